//! Conditional noise predictor: a 2D transformer over the time and
//! attribute axes of a T×2 (RSRP, SINR) latent.
//!
//! Internally a batch of sequences is flattened to one row per
//! (sequence, attribute, time step), row index `(b·2 + k)·T + t`, with
//! `d_model` features per row. Each layer runs a transformer encoder block
//! whose attention is restricted to rows of the same (sequence, attribute)
//! — the temporal axis — followed by one restricted to rows of the same
//! (sequence, time step) — the attribute axis.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::scenario::{ConditionSeries, DatasetRecord, TargetSeries};
use crate::tensor::{grouped_attention, Graph, Grouping, ParamId, ParamSet, Tensor, Var};

/// Per-step condition features: z-scored log10 distance, BS height,
/// log10 frequency and transmit power, then a one-hot AOI.
pub const COND_FEATURES: usize = 7;

/// Sequences per forward pass when evaluating large batches.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_mult: usize,
    pub step_embed_dim: usize,
    pub dropout: f64,
    /// Adds the sinusoidal time-step encoding before temporal attention.
    pub temporal_positional: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_mult: 4,
            step_embed_dim: 128,
            dropout: 0.1,
            temporal_positional: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ff_mult", self.ff_mult),
            ("step_embed_dim", self.step_embed_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Validation(format!("model.{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(Error::Validation("step_embed_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// (RSRP dBm, SINR dB)
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
    /// (log10 d, h_bs, log10 f, p_t)
    pub cond_mean: [f64; 4],
    pub cond_std: [f64; 4],
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-9 { sd } else { 1.0 })
}

fn raw_condition(c: &ConditionSeries, t: usize) -> [f64; 4] {
    [c.d_m[t].log10(), c.h_bs_m[t], c.f_hz[t].log10(), c.pt_dbm[t]]
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            target_mean: [0.0; 2],
            target_std: [1.0; 2],
            cond_mean: [0.0; 4],
            cond_std: [1.0; 4],
        }
    }

    /// Fits statistics on measured targets and conditions.
    pub fn fit(records: &[DatasetRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("cannot fit normalization on no records".into()));
        }
        let (rm, rs) = mean_std(records.iter().flat_map(|r| r.real.rsrp_dbm.iter().copied()));
        let (sm, ss) = mean_std(records.iter().flat_map(|r| r.real.sinr_db.iter().copied()));
        let mut cond_mean = [0.0; 4];
        let mut cond_std = [1.0; 4];
        for f in 0..4 {
            let (m, s) = mean_std(
                records
                    .iter()
                    .flat_map(|r| (0..r.len()).map(move |t| raw_condition(&r.conditions, t)[f])),
            );
            cond_mean[f] = m;
            cond_std[f] = s;
        }
        Ok(Self {
            target_mean: [rm, sm],
            target_std: [rs, ss],
            cond_mean,
            cond_std,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.target_std.iter().chain(&self.cond_std).all(|s| *s > 0.0 && s.is_finite())
            && self.target_mean.iter().chain(&self.cond_mean).all(|m| m.is_finite());
        if !ok {
            return Err(Error::Validation("normalization statistics must be finite with positive spread".into()));
        }
        Ok(())
    }

    /// T×2 normalized matrix from an RSRP column and a SINR column.
    pub fn normalize(&self, rsrp: &[f64], sinr: &[f64]) -> Result<Tensor> {
        if rsrp.len() != sinr.len() {
            return Err(Error::Shape("RSRP and SINR lengths differ".into()));
        }
        Ok(Tensor::from_fn(rsrp.len(), 2, |t, k| {
            let v = if k == 0 { rsrp[t] } else { sinr[t] };
            (v - self.target_mean[k]) / self.target_std[k]
        }))
    }

    pub fn denormalize(&self, x: &Tensor) -> TargetSeries {
        let col = |k: usize| {
            (0..x.rows())
                .map(|t| x.get(t, k) * self.target_std[k] + self.target_mean[k])
                .collect()
        };
        TargetSeries {
            rsrp_dbm: col(0),
            sinr_db: col(1),
        }
    }

    /// T×7 condition feature matrix.
    pub fn condition_features(&self, c: &ConditionSeries) -> Result<Tensor> {
        c.validate()?;
        let mut out = Tensor::zeros(c.len(), COND_FEATURES);
        for t in 0..c.len() {
            let raw = raw_condition(c, t);
            for f in 0..4 {
                out.set(t, f, (raw[f] - self.cond_mean[f]) / self.cond_std[f]);
            }
            out.set(t, 4 + c.aoi.index(), 1.0);
        }
        Ok(out)
    }
}

/// Sinusoidal encoding of a diffusion step: `dim/2` sines then `dim/2`
/// cosines over geometrically spaced frequencies.
pub fn step_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Fixed sinusoidal encoding of sequence positions, `len × dim`.
pub fn positional_table(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(len, dim, |pos, c| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// softmax(QKᵀ/sqrt(d_k))·V for a single head.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.cols() == 0 {
        return Err(Error::Domain("key dimension must be positive".into()));
    }
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention shapes Q{:?} K{:?} V{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(grouped_attention(q, k, v, &Grouping::single(q.rows()), 1).0)
}

#[derive(Debug, Clone)]
struct EncoderIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    temporal: EncoderIds,
    attribute: EncoderIds,
}

#[derive(Debug, Clone)]
struct ModelIds {
    in_w: ParamId,
    in_b: ParamId,
    step_w1: ParamId,
    step_b1: ParamId,
    step_w2: ParamId,
    step_b2: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    attr_emb: ParamId,
    layers: Vec<LayerIds>,
    out_w: ParamId,
    out_b: ParamId,
    skip_w: ParamId,
    skip_b: ParamId,
}

/// Expected parameter names and shapes for a configuration.
pub fn parameter_layout(config: &DenoiserConfig) -> Vec<(String, (usize, usize))> {
    let d = config.d_model;
    let ff = d * config.ff_mult;
    let mut out = vec![
        ("input.weight".to_string(), (1, d)),
        ("input.bias".to_string(), (1, d)),
        ("step.fc1.weight".to_string(), (config.step_embed_dim, d)),
        ("step.fc1.bias".to_string(), (1, d)),
        ("step.fc2.weight".to_string(), (d, d)),
        ("step.fc2.bias".to_string(), (1, d)),
        ("cond.weight".to_string(), (COND_FEATURES, d)),
        ("cond.bias".to_string(), (1, d)),
        ("attribute_embedding".to_string(), (2, d)),
    ];
    for l in 0..config.n_layers {
        for axis in ["temporal", "attribute"] {
            let p = format!("layers.{l}.{axis}");
            for (name, shape) in [
                ("q.weight", (d, d)),
                ("q.bias", (1, d)),
                ("k.weight", (d, d)),
                ("k.bias", (1, d)),
                ("v.weight", (d, d)),
                ("v.bias", (1, d)),
                ("out.weight", (d, d)),
                ("out.bias", (1, d)),
                ("norm1.gain", (1, d)),
                ("norm1.bias", (1, d)),
                ("ff1.weight", (d, ff)),
                ("ff1.bias", (1, ff)),
                ("ff2.weight", (ff, d)),
                ("ff2.bias", (1, d)),
                ("norm2.gain", (1, d)),
                ("norm2.bias", (1, d)),
            ] {
                out.push((format!("{p}.{name}"), shape));
            }
        }
    }
    out.push(("head.weight".to_string(), (d, 1)));
    out.push(("head.bias".to_string(), (1, 1)));
    out.push(("skip.weight".to_string(), (d, 1)));
    out.push(("skip.bias".to_string(), (1, 1)));
    out
}

impl ModelIds {
    fn resolve(params: &ParamSet, config: &DenoiserConfig) -> Result<Self> {
        for (name, shape) in parameter_layout(config) {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |name: &str| params.find(name).expect("checked above");
        let encoder = |p: &str| EncoderIds {
            wq: id(&format!("{p}.q.weight")),
            bq: id(&format!("{p}.q.bias")),
            wk: id(&format!("{p}.k.weight")),
            bk: id(&format!("{p}.k.bias")),
            wv: id(&format!("{p}.v.weight")),
            bv: id(&format!("{p}.v.bias")),
            wo: id(&format!("{p}.out.weight")),
            bo: id(&format!("{p}.out.bias")),
            ln1_g: id(&format!("{p}.norm1.gain")),
            ln1_b: id(&format!("{p}.norm1.bias")),
            w1: id(&format!("{p}.ff1.weight")),
            b1: id(&format!("{p}.ff1.bias")),
            w2: id(&format!("{p}.ff2.weight")),
            b2: id(&format!("{p}.ff2.bias")),
            ln2_g: id(&format!("{p}.norm2.gain")),
            ln2_b: id(&format!("{p}.norm2.bias")),
        };
        Ok(Self {
            in_w: id("input.weight"),
            in_b: id("input.bias"),
            step_w1: id("step.fc1.weight"),
            step_b1: id("step.fc1.bias"),
            step_w2: id("step.fc2.weight"),
            step_b2: id("step.fc2.bias"),
            cond_w: id("cond.weight"),
            cond_b: id("cond.bias"),
            attr_emb: id("attribute_embedding"),
            layers: (0..config.n_layers)
                .map(|l| LayerIds {
                    temporal: encoder(&format!("layers.{l}.temporal")),
                    attribute: encoder(&format!("layers.{l}.attribute")),
                })
                .collect(),
            out_w: id("head.weight"),
            out_b: id("head.bias"),
            skip_w: id("skip.weight"),
            skip_b: id("skip.bias"),
        })
    }
}

/// Inputs for one forward pass over `seqs` sequences of length `len`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub seqs: usize,
    pub len: usize,
    /// One row per (sequence, attribute, step), value of x_t.
    pub x: Tensor,
    pub steps: Vec<usize>,
    /// One row per (sequence, step), [`COND_FEATURES`] columns.
    pub cond: Tensor,
}

impl Batch {
    pub fn new(xs: &[&Tensor], steps: &[usize], conds: &[&Tensor]) -> Result<Self> {
        let seqs = xs.len();
        if seqs == 0 || steps.len() != seqs || conds.len() != seqs {
            return Err(Error::Shape("batch components differ in length".into()));
        }
        let len = xs[0].rows();
        let mut x = Tensor::zeros(seqs * 2 * len, 1);
        let mut cond = Tensor::zeros(seqs * len, COND_FEATURES);
        for (b, (xt, c)) in xs.iter().zip(conds).enumerate() {
            if xt.shape() != (len, 2) {
                return Err(Error::Shape(format!(
                    "latent must be {len}x2, got {:?}",
                    xt.shape()
                )));
            }
            if c.shape() != (len, COND_FEATURES) {
                return Err(Error::Shape(format!(
                    "conditions must be {len}x{COND_FEATURES}, got {:?}",
                    c.shape()
                )));
            }
            if !xt.is_finite() || !c.is_finite() {
                return Err(Error::Domain("non-finite denoiser input".into()));
            }
            for k in 0..2 {
                for t in 0..len {
                    x.set(to_row(b, k, t, len), 0, xt.get(t, k));
                }
            }
            for t in 0..len {
                cond.row_mut(b * len + t).copy_from_slice(c.row(t));
            }
        }
        Ok(Self {
            seqs,
            len,
            x,
            steps: steps.to_vec(),
            cond,
        })
    }
}

/// Row index of (sequence, attribute, step) in the flattened layout.
pub fn to_row(b: usize, k: usize, t: usize, len: usize) -> usize {
    (b * 2 + k) * len + t
}

/// Splits an R×1 column in the flattened layout into per-sequence T×2 matrices.
pub fn from_rows(col: &Tensor, seqs: usize, len: usize) -> Vec<Tensor> {
    (0..seqs)
        .map(|b| Tensor::from_fn(len, 2, |t, k| col.get(to_row(b, k, t, len), 0)))
        .collect()
}

/// Flattens per-sequence T×2 matrices into an R×1 column.
pub fn to_rows(mats: &[&Tensor]) -> Tensor {
    let len = mats.first().map_or(0, |m| m.rows());
    let mut out = Tensor::zeros(mats.len() * 2 * len, 1);
    for (b, m) in mats.iter().enumerate() {
        for k in 0..2 {
            for t in 0..len {
                out.set(to_row(b, k, t, len), 0, m.get(t, k));
            }
        }
    }
    out
}

/// Dropout configuration for a training forward pass.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamSet,
    norm: NormStats,
    ids: ModelIds,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..=a))
}

impl DenoiserModel {
    /// Freshly initialized model: Glorot-uniform weights, zero biases,
    /// unit layer-norm gains and an open skip gate.
    pub fn new(config: DenoiserConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, (rows, cols)) in parameter_layout(&config) {
            let value = if name.ends_with(".gain") || name == "skip.bias" {
                Tensor::from_vec(rows, cols, vec![1.0; rows * cols])?
            } else if name.ends_with(".bias") {
                Tensor::zeros(rows, cols)
            } else {
                xavier(rows, cols, &mut rng)
            };
            params.add(name, value);
        }
        let ids = ModelIds::resolve(&params, &config)?;
        Ok(Self {
            config,
            params,
            norm,
            ids,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: DenoiserConfig, norm: NormStats, params: ParamSet) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let ids = ModelIds::resolve(&params, &config)?;
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameter `{name}` is not finite")));
        }
        Ok(Self {
            config,
            params,
            norm,
            ids,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Rounds every parameter to the nearest 32-bit float, the precision
    /// checkpoints store.
    pub fn quantize_f32(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            for x in self.params.get_mut(id).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn condition_features(&self, c: &ConditionSeries) -> Result<Tensor> {
        self.norm.condition_features(c)
    }

    /// Step embedding after the two-layer MLP.
    pub fn embed_step(&self, t: usize) -> Vec<f64> {
        let params = &self.params;
        let mut g = Graph::new(params);
        let enc = g.input(Tensor::from_vec(1, self.config.step_embed_dim, step_encoding(t, self.config.step_embed_dim)).unwrap());
        let s = self.step_mlp(&mut g, enc);
        g.value(s).data().to_vec()
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = g.param(w);
        let h = g.matmul(x, wv);
        let bv = g.param(b);
        g.add_row(h, bv)
    }

    fn step_mlp(&self, g: &mut Graph, enc: Var) -> Var {
        let ids = &self.ids;
        let h = self.linear(g, enc, ids.step_w1, ids.step_b1);
        let h = g.gelu(h);
        self.linear(g, h, ids.step_w2, ids.step_b2)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, dropout: &mut Option<DropoutCtx>) -> Var {
        match dropout {
            Some(ctx) if ctx.rate > 0.0 => {
                let keep = 1.0 - ctx.rate;
                let n = g.value(x).len();
                let mask = (0..n)
                    .map(|_| if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn encoder(
        &self,
        g: &mut Graph,
        u: Var,
        p: &EncoderIds,
        grouping: &Rc<Grouping>,
        dropout: &mut Option<DropoutCtx>,
    ) -> Var {
        let q = self.linear(g, u, p.wq, p.bq);
        let k = self.linear(g, u, p.wk, p.bk);
        let v = self.linear(g, u, p.wv, p.bv);
        let a = g.attention(q, k, v, grouping.clone(), self.config.n_heads);
        let a = self.linear(g, a, p.wo, p.bo);
        let a = self.maybe_dropout(g, a, dropout);
        let h = g.add(u, a);
        let (g1, b1) = (g.param(p.ln1_g), g.param(p.ln1_b));
        let h = g.layer_norm(h, g1, b1);
        let f = self.linear(g, h, p.w1, p.b1);
        let f = g.gelu(f);
        let f = self.linear(g, f, p.w2, p.b2);
        let f = self.maybe_dropout(g, f, dropout);
        let h2 = g.add(h, f);
        let (g2, b2) = (g.param(p.ln2_g), g.param(p.ln2_b));
        g.layer_norm(h2, g2, b2)
    }

    /// Records the forward pass on `g` and returns the R×1 noise estimate
    /// in the flattened row layout.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mut dropout: Option<DropoutCtx>) -> Var {
        let (b, len) = (batch.seqs, batch.len);
        let d = self.config.d_model;
        let rows = b * 2 * len;
        let ids = &self.ids;

        let mut seq_of = Vec::with_capacity(rows);
        let mut step_of = Vec::with_capacity(rows);
        let mut time_of = Vec::with_capacity(rows);
        let mut attr_of = Vec::with_capacity(rows);
        for s in 0..b {
            for k in 0..2 {
                for t in 0..len {
                    seq_of.push(s);
                    step_of.push(s * len + t);
                    time_of.push(t);
                    attr_of.push(k);
                }
            }
        }
        let (seq_of, step_of): (Rc<[usize]>, Rc<[usize]>) = (seq_of.into(), step_of.into());
        let (time_of, attr_of): (Rc<[usize]>, Rc<[usize]>) = (time_of.into(), attr_of.into());
        let temporal = Rc::new(Grouping {
            starts: (0..2 * b).map(|s| s * len).collect(),
            stride: 1,
            len,
        });
        let attribute = Rc::new(Grouping {
            starts: (0..b).flat_map(|s| (0..len).map(move |t| s * 2 * len + t)).collect(),
            stride: len,
            len: 2,
        });

        let x = g.input(batch.x.clone());
        let mut h = self.linear(g, x, ids.in_w, ids.in_b);

        let dim = self.config.step_embed_dim;
        let mut enc = Tensor::zeros(b, dim);
        for (s, &t) in batch.steps.iter().enumerate() {
            enc.row_mut(s).copy_from_slice(&step_encoding(t, dim));
        }
        let enc = g.input(enc);
        let step = self.step_mlp(g, enc);
        h = g.gather_add(h, step, seq_of.clone());

        let cond = g.input(batch.cond.clone());
        let cond = self.linear(g, cond, ids.cond_w, ids.cond_b);
        let pos = g.input(if self.config.temporal_positional {
            positional_table(len, d)
        } else {
            Tensor::zeros(len, d)
        });
        let attr = g.param(ids.attr_emb);

        for layer in &ids.layers {
            h = g.gather_add(h, cond, step_of.clone());
            let u = g.gather_add(h, pos, time_of.clone());
            h = self.encoder(g, u, &layer.temporal, &temporal, &mut dropout);
            let u = g.gather_add(h, attr, attr_of.clone());
            h = self.encoder(g, u, &layer.attribute, &attribute, &mut dropout);
        }
        // A per-step gate passes x_t straight to the output; at large t the
        // noise estimate is almost x_t itself, which the attention stack
        // alone reproduces poorly.
        let gate = self.linear(g, step, ids.skip_w, ids.skip_b);
        let zeros = g.input(Tensor::zeros(rows, 1));
        let gate = g.gather_add(zeros, gate, seq_of);
        let skip = g.mul(x, gate);
        let out = self.linear(g, h, ids.out_w, ids.out_b);
        g.add(out, skip)
    }

    /// ε_θ(x_t, t | c) for one normalized T×2 latent and its T×7 features.
    pub fn denoise(&self, x_t: &Tensor, t: usize, features: &Tensor) -> Result<Tensor> {
        Ok(self.denoise_batch(&[x_t], &[t], &[features])?.remove(0))
    }

    pub fn denoise_batch(&self, xs: &[&Tensor], ts: &[usize], conds: &[&Tensor]) -> Result<Vec<Tensor>> {
        if xs.len() != ts.len() || xs.len() != conds.len() {
            return Err(Error::Shape("batch components differ in length".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        for start in (0..xs.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(xs.len());
            let batch = Batch::new(&xs[start..end], &ts[start..end], &conds[start..end])?;
            let mut g = Graph::new(&self.params);
            let eps = self.forward(&mut g, &batch, None);
            let col = g.value(eps);
            if !col.is_finite() {
                return Err(Error::Numeric("denoiser produced non-finite output".into()));
            }
            out.extend(from_rows(col, batch.seqs, batch.len));
        }
        Ok(out)
    }
}

impl NoisePredictor for DenoiserModel {
    type Cond = Tensor;

    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.denoise(x_t, t, cond)
    }

    fn predict_eps_batch(&self, xs: &[Tensor], ts: &[usize], conds: &[&Tensor]) -> Result<Vec<Tensor>> {
        let refs: Vec<&Tensor> = xs.iter().collect();
        self.denoise_batch(&refs, ts, conds)
    }
}
