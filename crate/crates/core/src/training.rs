//! Two-stage training: a teacher stage on physics-derived RSRP labels,
//! then a student stage on measured labels whose loss mixes the usual
//! noise-prediction error with a pull of the reconstructed x₀ towards the
//! physics label.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{to_rows, Batch, DenoiserConfig, DenoiserModel, DropoutCtx, NormStats};
use crate::diffusion::{make_schedule, sample_batch, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_series, nrmse, MetricReport};
use crate::propagation::Aoi;
use crate::scenario::{substream, DatasetRecord, TargetSeries};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// Epochs without validation improvement before the stage stops.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    stages: Vec<Stage>,
    gamma: f64,
    delta: f64,
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

fn check_weights(gamma: f64, delta: f64) -> Result<()> {
    if !(gamma >= 0.0 && delta >= 0.0) || (gamma + delta - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Validation(format!(
            "loss weights must be non-negative and sum to 1, got gamma={gamma} delta={delta}"
        )));
    }
    Ok(())
}

impl StagePlan {
    pub fn new(stages: Vec<Stage>, gamma: f64, delta: f64) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Validation("stage plan needs at least one stage".into()));
        }
        check_weights(gamma, delta)?;
        Ok(Self { stages, gamma, delta })
    }

    /// Parses labels such as `T1S4` (teacher patience 1, then student
    /// patience 4). A zero count omits that stage, so `T0S5` is a single
    /// student stage.
    pub fn from_label(label: &str, gamma: f64, delta: f64) -> Result<Self> {
        let bad = || Error::Validation(format!("stage label `{label}` is not of the form T<n>S<m>"));
        let rest = label.trim().strip_prefix('T').ok_or_else(bad)?;
        let (t, s) = rest.split_once('S').ok_or_else(bad)?;
        let t: usize = t.parse().map_err(|_| bad())?;
        let s: usize = s.parse().map_err(|_| bad())?;
        let mut stages = Vec::new();
        if t > 0 {
            stages.push(Stage {
                kind: StageKind::Teacher,
                patience: t,
            });
        }
        if s > 0 {
            stages.push(Stage {
                kind: StageKind::Student,
                patience: s,
            });
        }
        Self::new(stages, gamma, delta)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `T<teacher patience>S<student patience>`.
    pub fn label(&self) -> String {
        let total = |k: StageKind| -> usize {
            self.stages.iter().filter(|s| s.kind == k).map(|s| s.patience).sum()
        };
        format!("T{}S{}", total(StageKind::Teacher), total(StageKind::Student))
    }
}

/// How the physical-correction term is weighted across diffusion steps.
///
/// Measured in x₀ space the term equals ((1−ᾱ_t)/ᾱ_t)·‖ε̂ − c‖² for a fixed
/// target c, so at large t its gradient is several orders of magnitude
/// larger than the noise-prediction term. `MinSnr` caps that factor at 1;
/// `Literal` keeps it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsWeighting {
    MinSnr,
    Literal,
}

impl FromStr for PhysicsWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "min_snr" => Ok(Self::MinSnr),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Validation(format!(
                "unknown physics weighting `{other}` (expected min_snr or literal)"
            ))),
        }
    }
}

impl fmt::Display for PhysicsWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MinSnr => "min_snr",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    /// Fixed (step, noise) draws per validation record.
    pub validation_draws: usize,
    pub physics_weighting: PhysicsWeighting,
    /// Decay of an exponential moving average of the weights; 0 disables
    /// it. When enabled, validation, early stopping and the returned
    /// parameters all use the averaged weights.
    #[serde(default)]
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            max_epochs: 100,
            validation_fraction: 0.1,
            validation_draws: 4,
            physics_weighting: PhysicsWeighting::MinSnr,
            ema_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.validation_draws == 0 {
            return fail("batch_size, max_epochs and validation_draws must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam moment decays must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return fail("adam_eps must be positive and grad_clip non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return fail(format!(
                "validation fraction must lie in (0, 0.5], got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

/// Normalized T×2 training label: (physics RSRP, real SINR) for the teacher,
/// (real RSRP, real SINR) for the student.
pub fn build_labels(record: &DatasetRecord, kind: StageKind, norm: &NormStats) -> Result<Tensor> {
    let rsrp = match kind {
        StageKind::Teacher => &record.theoretical_rsrp_dbm,
        StageKind::Student => &record.real.rsrp_dbm,
    };
    norm.normalize(rsrp, &record.real.sinr_db)
}

/// A record converted to model inputs once per stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Tensor,
    pub real: Tensor,
    pub theory: Tensor,
}

pub fn prepare(records: &[DatasetRecord], norm: &NormStats) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            Ok(Prepared {
                features: norm.condition_features(&r.conditions)?,
                real: build_labels(r, StageKind::Student, norm)?,
                theory: build_labels(r, StageKind::Teacher, norm)?,
            })
        })
        .collect()
}

/// Diffusion steps and noise for a batch of sequences.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Vec<Tensor>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(n: usize, len: usize, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let steps = (0..n).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps = (0..n)
            .map(|_| Tensor::from_fn(len, 2, |_, _| rng.sample(StandardNormal)))
            .collect();
        Self { steps, eps }
    }
}

/// Loss weights and x₀ choice for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub kind: StageKind,
    pub gamma: f64,
    pub delta: f64,
    pub weighting: PhysicsWeighting,
}

impl Objective {
    pub fn teacher() -> Self {
        Self {
            kind: StageKind::Teacher,
            gamma: 1.0,
            delta: 0.0,
            weighting: PhysicsWeighting::MinSnr,
        }
    }

    pub fn student(gamma: f64, delta: f64, weighting: PhysicsWeighting) -> Result<Self> {
        check_weights(gamma, delta)?;
        Ok(Self {
            kind: StageKind::Student,
            gamma,
            delta,
            weighting,
        })
    }

    fn for_stage(stage: &Stage, plan: &StagePlan, weighting: PhysicsWeighting) -> Self {
        match stage.kind {
            StageKind::Teacher => Self::teacher(),
            StageKind::Student => Self {
                kind: StageKind::Student,
                gamma: plan.gamma,
                delta: plan.delta,
                weighting,
            },
        }
    }
}

/// Records the stage loss on `g`.
///
/// The noise term is the element mean of (ε̂ − ε)². The physical term is the
/// element mean of (x̂₀ − x₀ᵖʰʸ)² with x̂₀ = (x_t − sqrt(1−ᾱ)·ε̂)/sqrt(ᾱ),
/// rewritten as a row-weighted error on ε̂ (see [`PhysicsWeighting`]).
pub fn record_loss(
    g: &mut Graph,
    model: &DenoiserModel,
    items: &[&Prepared],
    draw: &NoiseDraw,
    objective: &Objective,
    schedule: &NoiseSchedule,
    dropout: Option<DropoutCtx>,
) -> Result<Var> {
    let n = items.len();
    if n == 0 || draw.steps.len() != n || draw.eps.len() != n {
        return Err(Error::Shape("loss batch and noise draw differ in size".into()));
    }
    let mut x_ts = Vec::with_capacity(n);
    for (item, (&t, eps)) in items.iter().zip(draw.steps.iter().zip(&draw.eps)) {
        let x0 = match objective.kind {
            StageKind::Teacher => &item.theory,
            StageKind::Student => &item.real,
        };
        x_ts.push(crate::diffusion::forward_sample(x0, t, eps, schedule)?);
    }
    let xs: Vec<&Tensor> = x_ts.iter().collect();
    let conds: Vec<&Tensor> = items.iter().map(|p| &p.features).collect();
    let batch = Batch::new(&xs, &draw.steps, &conds)?;
    let eps_hat = model.forward(g, &batch, dropout);

    let eps_refs: Vec<&Tensor> = draw.eps.iter().collect();
    let noise_term = g.mse(eps_hat, to_rows(&eps_refs), None);
    if objective.kind == StageKind::Teacher || objective.delta == 0.0 {
        return Ok(noise_term);
    }

    let len = batch.len;
    let mut target = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(2 * n * len);
    for (b, item) in items.iter().enumerate() {
        let ab = schedule.alpha_bar(draw.steps[b]);
        let c = Tensor::from_fn(len, 2, |t, k| {
            (x_ts[b].get(t, k) - ab.sqrt() * item.theory.get(t, k)) / (1.0 - ab).sqrt()
        });
        target.push(c);
        let factor = (1.0 - ab) / ab;
        let w = match objective.weighting {
            PhysicsWeighting::Literal => factor,
            PhysicsWeighting::MinSnr => factor.min(1.0),
        };
        weights.extend(std::iter::repeat(w).take(2 * len));
    }
    let target_refs: Vec<&Tensor> = target.iter().collect();
    let phys_term = g.mse(eps_hat, to_rows(&target_refs), Some(weights));
    let a = g.scale(noise_term, objective.gamma);
    let b = g.scale(phys_term, objective.delta);
    Ok(g.add(a, b))
}

/// Loss value without gradients or dropout.
pub fn loss_value(
    model: &DenoiserModel,
    items: &[&Prepared],
    draw: &NoiseDraw,
    objective: &Objective,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut g = Graph::new(model.params());
    let loss = record_loss(&mut g, model, items, draw, objective, schedule, None)?;
    Ok(g.value(loss).get(0, 0))
}

/// Noise-prediction loss against physics labels for a random draw.
pub fn teacher_loss<R: Rng + ?Sized>(
    items: &[&Prepared],
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let len = items.first().map_or(0, |p| p.real.rows());
    let draw = NoiseDraw::sample(items.len(), len, schedule, rng);
    loss_value(model, items, &draw, &Objective::teacher(), schedule)
}

/// γ·(noise term) + δ·(physical term) on real labels for a random draw.
pub fn student_loss<R: Rng + ?Sized>(
    items: &[&Prepared],
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
    gamma: f64,
    delta: f64,
    weighting: PhysicsWeighting,
) -> Result<f64> {
    let objective = Objective::student(gamma, delta, weighting)?;
    let len = items.first().map_or(0, |p| p.real.rows());
    let draw = NoiseDraw::sample(items.len(), len, schedule, rng);
    loss_value(model, items, &draw, &objective, schedule)
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    fn new(model: &DenoiserModel) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, model: &mut DenoiserModel, grads: &crate::tensor::Gradients, cfg: &TrainConfig) -> Result<()> {
        let ids: Vec<_> = model.params().ids().collect();
        let mut norm_sq = 0.0;
        for &id in &ids {
            if let Some(g) = grads.try_get(id) {
                norm_sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        let scale = if cfg.grad_clip > 0.0 && norm_sq.sqrt() > cfg.grad_clip {
            cfg.grad_clip / norm_sq.sqrt()
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (slot, &id) in ids.iter().enumerate() {
            let Some(g) = grads.try_get(id) else { continue };
            let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
            let p = model.params_mut().get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub kind: StageKind,
    pub patience: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Runs one stage of minibatch Adam with early stopping and restores the
/// parameters of the best validation epoch.
///
/// Validation uses the same (step, noise) draws every epoch so that epochs
/// are compared on equal terms.
pub fn run_stage(
    model: &mut DenoiserModel,
    train: &[Prepared],
    val: &[Prepared],
    stage: &Stage,
    objective: &Objective,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageHistory> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("training and validation sets must be non-empty".into()));
    }
    let len = train[0].real.rows();
    let val_refs: Vec<&Prepared> = val.iter().flat_map(|p| std::iter::repeat(p).take(config.validation_draws)).collect();
    let val_draw = NoiseDraw::sample(val_refs.len(), len, schedule, rng);
    let val_loss = |m: &DenoiserModel| -> Result<f64> {
        let mut total = 0.0;
        let chunk = config.batch_size.max(64);
        for start in (0..val_refs.len()).step_by(chunk) {
            let end = (start + chunk).min(val_refs.len());
            let draw = NoiseDraw {
                steps: val_draw.steps[start..end].to_vec(),
                eps: val_draw.eps[start..end].to_vec(),
            };
            total += loss_value(m, &val_refs[start..end], &draw, objective, schedule)? * (end - start) as f64;
        }
        Ok(total / val_refs.len() as f64)
    };

    let mut adam = Adam::new(model);
    let mut ema = (config.ema_decay > 0.0).then(|| model.params().clone());
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let draw = NoiseDraw::sample(items.len(), len, schedule, rng);
            let mut dropout_rng = substream(rng.gen(), 0);
            let rate = model.config().dropout;
            let grads = {
                let mut g = Graph::new(model.params());
                let dropout = (rate > 0.0).then_some(DropoutCtx {
                    rate,
                    rng: &mut dropout_rng,
                });
                let loss = record_loss(&mut g, model, &items, &draw, objective, schedule, dropout)?;
                let value = g.value(loss).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite {:?} loss in epoch {epoch}",
                        stage.kind
                    )));
                }
                total += value * items.len() as f64;
                g.backward(loss)?
            };
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in epoch {epoch}")));
            }
            adam.update(model, &grads, config)?;
            if let Some(avg) = ema.as_mut() {
                let d = config.ema_decay;
                for id in model.params().ids() {
                    let live = model.params().get(id).data();
                    for (a, &p) in avg.get_mut(id).data_mut().iter_mut().zip(live) {
                        *a = d * *a + (1.0 - d) * p;
                    }
                }
            }
        }
        let train_loss = total / train.len() as f64;
        // Score the averaged weights by swapping them in for the duration.
        if let Some(avg) = ema.as_mut() {
            std::mem::swap(model.params_mut(), avg);
        }
        let v = val_loss(model);
        if let Some(avg) = ema.as_mut() {
            std::mem::swap(model.params_mut(), avg);
        }
        let v = v?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss in epoch {epoch}")));
        }
        log::debug!("{:?} epoch {epoch}: train {train_loss:.5} val {v:.5}", stage.kind);
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss: v,
        });
        if v < best.0 {
            best = (v, epoch, ema.as_ref().unwrap_or(model.params()).clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= stage.patience {
            break;
        }
    }
    *model.params_mut() = best.2;
    Ok(StageHistory {
        kind: stage.kind,
        patience: stage.patience,
        epochs,
        best_epoch: best.1,
        best_val_loss: best.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub label: String,
    pub gamma: f64,
    pub delta: f64,
    pub stages: Vec<StageHistory>,
}

/// Runs each stage of `plan` in order on one parameter set, then rounds the
/// parameters to 32-bit precision so the result survives a checkpoint
/// round trip unchanged.
pub fn run_plan_on(
    model: &mut DenoiserModel,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    plan: &StagePlan,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    seed: u64,
) -> Result<PlanReport> {
    let train_p = prepare(train, model.norm())?;
    let val_p = prepare(val, model.norm())?;
    let mut stages = Vec::with_capacity(plan.stages().len());
    for (i, stage) in plan.stages().iter().enumerate() {
        let mut rng = substream(seed, 100 + i as u64);
        let objective = Objective::for_stage(stage, plan, config.physics_weighting);
        let hist = run_stage(model, &train_p, &val_p, stage, &objective, schedule, config, &mut rng)?;
        log::info!(
            "{:?} stage: {} epochs, best validation loss {:.5} at epoch {}",
            stage.kind,
            hist.epochs.len(),
            hist.best_val_loss,
            hist.best_epoch
        );
        stages.push(hist);
    }
    model.quantize_f32();
    Ok(PlanReport {
        label: plan.label(),
        gamma: plan.gamma(),
        delta: plan.delta(),
        stages,
    })
}

/// Splits off about `fraction` of each AOI's users, chosen by a seeded
/// shuffle. Every AOI with at least two users contributes at least one
/// held-out user and keeps at least one.
pub fn split_by_user(records: &[DatasetRecord], fraction: f64, seed: u64) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for aoi in Aoi::ALL {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].aoi() == aoi).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut substream(seed, 10 + aoi.index() as u64));
        let n = idx.len();
        let k = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        let (h, rest) = idx.split_at(k);
        held.extend_from_slice(h);
        keep.extend_from_slice(rest);
    }
    keep.sort_unstable();
    held.sort_unstable();
    let pick = |v: &[usize]| v.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&keep), pick(&held)))
}

/// Fits normalization on `train`, initializes a model and runs the plan.
#[allow(clippy::too_many_arguments)]
pub fn run_plan(
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    plan: &StagePlan,
    model_config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(DenoiserModel, PlanReport)> {
    if train.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    let norm = NormStats::fit(train)?;
    let mut model = DenoiserModel::new(model_config.clone(), norm, config.seed)?;
    let report = run_plan_on(&mut model, train, val, plan, schedule, config, config.seed)?;
    Ok((model, report))
}

/// Generated samples for each record, denormalized to dB.
pub fn generate(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    records: &[DatasetRecord],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<TargetSeries>>> {
    if n_samples == 0 {
        return Err(Error::Validation("need at least one sample per record".into()));
    }
    let features = records
        .iter()
        .map(|r| model.condition_features(&r.conditions))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Vec<TargetSeries>> = vec![Vec::with_capacity(n_samples); records.len()];
    // Chains are grouped by sequence length; each chain owns its RNG stream
    // so results do not depend on the grouping.
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_len.entry(r.len()).or_default().push(i);
    }
    const CHAINS: usize = 64;
    for (len, idx) in by_len {
        let jobs: Vec<(usize, usize)> = idx.iter().flat_map(|&i| (0..n_samples).map(move |s| (i, s))).collect();
        for group in jobs.chunks(CHAINS) {
            let conds: Vec<&Tensor> = group.iter().map(|&(i, _)| &features[i]).collect();
            let mut rngs: Vec<ChaCha8Rng> = group
                .iter()
                .map(|&(i, s)| substream(seed, (i * n_samples + s) as u64))
                .collect();
            let xs = sample_batch(&conds, len, 2, model, schedule, &mut rngs)?;
            for (&(i, _), x) in group.iter().zip(&xs) {
                out[i].push(model.norm().denormalize(x));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    /// RSRP NRMSE of predicting the training-set mean everywhere.
    pub baseline_rsrp_nrmse: f64,
    pub n_samples: usize,
}

pub fn evaluate(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    records: &[DatasetRecord],
    n_samples: usize,
    bins: usize,
    seed: u64,
) -> Result<(Evaluation, Vec<Vec<TargetSeries>>)> {
    let generated = generate(model, schedule, records, n_samples, seed)?;
    let real: Vec<TargetSeries> = records.iter().map(|r| r.real.clone()).collect();
    let metrics = evaluate_series(&real, &generated, bins)?;
    let pooled: Vec<f64> = real.iter().flat_map(|s| s.rsrp_dbm.iter().copied()).collect();
    let constant = vec![model.norm().target_mean[0]; pooled.len()];
    Ok((
        Evaluation {
            metrics,
            baseline_rsrp_nrmse: nrmse(&pooled, &constant)?,
            n_samples,
        },
        generated,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotMode {
    Zero,
    Few,
}

impl FromStr for ShotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" => Ok(Self::Zero),
            "few" => Ok(Self::Few),
            other => Err(Error::Validation(format!("unknown mode `{other}` (expected zero or few)"))),
        }
    }
}

/// Share of the target AOI reserved for adaptation; evaluation never
/// touches it, whatever fraction is fine-tuned on.
pub const ADAPTATION_POOL: f64 = 0.10;

/// Source data, the target-AOI adaptation pool and the target evaluation set.
#[derive(Debug, Clone)]
pub struct TransferSplit {
    pub target: Aoi,
    pub source: Vec<DatasetRecord>,
    pub pool: Vec<DatasetRecord>,
    pub eval: Vec<DatasetRecord>,
}

impl TransferSplit {
    pub fn new(records: &[DatasetRecord], target: Aoi, seed: u64) -> Result<Self> {
        let source: Vec<DatasetRecord> = records.iter().filter(|r| r.aoi() != target).cloned().collect();
        let mut tgt: Vec<DatasetRecord> = records.iter().filter(|r| r.aoi() == target).cloned().collect();
        if source.is_empty() || tgt.len() < 2 {
            return Err(Error::Validation(format!(
                "transfer needs source records and at least two {target} records"
            )));
        }
        tgt.shuffle(&mut substream(seed, 20));
        let k = ((ADAPTATION_POOL * tgt.len() as f64).ceil() as usize).clamp(1, tgt.len() - 1);
        let eval = tgt.split_off(k);
        Ok(Self {
            target,
            source,
            pool: tgt,
            eval,
        })
    }

    /// The first `floor(fraction · n_target)` pool records.
    pub fn adaptation_subset(&self, fraction: f64) -> Result<&[DatasetRecord]> {
        if !(0.0..=ADAPTATION_POOL).contains(&fraction) {
            return Err(Error::Validation(format!(
                "fine-tuning fraction must lie in [0, {ADAPTATION_POOL}], got {fraction}"
            )));
        }
        let n_target = self.pool.len() + self.eval.len();
        let k = ((fraction * n_target as f64) + 1e-9).floor() as usize;
        if k == 0 {
            return Err(Error::Validation(format!(
                "fraction {fraction} of {n_target} {} records selects none",
                self.target
            )));
        }
        Ok(&self.pool[..k.min(self.pool.len())])
    }
}

/// Fine-tunes with a single student stage on `subset`. The model keeps the
/// normalization it was trained with; validation reuses the subset.
pub fn fine_tune(
    model: &mut DenoiserModel,
    subset: &[DatasetRecord],
    plan: &StagePlan,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<StageHistory> {
    let patience = plan
        .stages()
        .iter()
        .rev()
        .find(|s| s.kind == StageKind::Student)
        .map_or(plan.stages()[plan.stages().len() - 1].patience, |s| s.patience);
    let stage = Stage {
        kind: StageKind::Student,
        patience,
    };
    let objective = Objective::for_stage(&stage, plan, config.physics_weighting);
    let data = prepare(subset, model.norm())?;
    let mut rng = substream(config.seed, 200);
    let hist = run_stage(model, &data, &data, &stage, &objective, schedule, config, &mut rng)?;
    model.quantize_f32();
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub target: Aoi,
    pub mode: ShotMode,
    pub fraction: f64,
    pub plan: String,
    pub gamma: f64,
    pub delta: f64,
    pub fine_tune_records: usize,
    pub eval_records: usize,
    pub source: PlanReport,
    pub fine_tune: Option<StageHistory>,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSetup {
    pub target: Aoi,
    pub mode: ShotMode,
    pub fraction: f64,
    pub n_samples: usize,
    pub bins: usize,
}

/// Trains on the source AOIs, optionally fine-tunes on a slice of the
/// target AOI, and scores on target records outside the adaptation pool.
/// A zero fraction is the zero-shot case.
pub fn few_shot_protocol(
    records: &[DatasetRecord],
    setup: &FewShotSetup,
    plan: &StagePlan,
    model_config: &DenoiserConfig,
    schedule_params: &ScheduleParams,
    config: &TrainConfig,
) -> Result<FewShotReport> {
    let fraction = if setup.mode == ShotMode::Zero { 0.0 } else { setup.fraction };
    let mut reports = few_shot_sweep(
        records,
        setup.target,
        &[fraction],
        setup.n_samples,
        setup.bins,
        plan,
        model_config,
        schedule_params,
        config,
    )?;
    Ok(reports.remove(0))
}

/// [`few_shot_protocol`] for several fractions sharing one source model.
/// Every fraction starts from the same source parameters and is scored on
/// the same target records.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_sweep(
    records: &[DatasetRecord],
    target: Aoi,
    fractions: &[f64],
    n_samples: usize,
    bins: usize,
    plan: &StagePlan,
    model_config: &DenoiserConfig,
    schedule_params: &ScheduleParams,
    config: &TrainConfig,
) -> Result<Vec<FewShotReport>> {
    let schedule = make_schedule(schedule_params)?;
    let split = TransferSplit::new(records, target, config.seed)?;
    // Reject bad fractions before paying for source training.
    let subsets = fractions
        .iter()
        .map(|&f| if f > 0.0 { split.adaptation_subset(f).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = split_by_user(&split.source, config.validation_fraction, config.seed)?;
    let (source_model, source) = run_plan(&train, &val, plan, model_config, &schedule, config)?;
    let mut out = Vec::with_capacity(fractions.len());
    for (&fraction, subset) in fractions.iter().zip(subsets) {
        let mut model = source_model.clone();
        let fine = match subset {
            Some(subset) => Some(fine_tune(&mut model, subset, plan, &schedule, config)?),
            None => None,
        };
        let (evaluation, _) = evaluate(&model, &schedule, &split.eval, n_samples, bins, config.seed)?;
        out.push(FewShotReport {
            target,
            mode: if fine.is_some() { ShotMode::Few } else { ShotMode::Zero },
            fraction: if fine.is_some() { fraction } else { 0.0 },
            plan: plan.label(),
            gamma: plan.gamma(),
            delta: plan.delta(),
            fine_tune_records: subset.map_or(0, |s| s.len()),
            eval_records: split.eval.len(),
            source: source.clone(),
            fine_tune: fine,
            evaluation,
        });
    }
    Ok(out)
}
