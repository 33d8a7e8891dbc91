//! Conditional DDPM machinery: noise schedule, forward marginal, reverse
//! ancestral sampler and the noise-prediction objective.
//!
//! Steps are 1-based throughout (`1 ..= steps`), matching the usual
//! presentation of the chain.
//!
//! The forward marginal is x_t = sqrt(ᾱ_t)·x₀ + sqrt(1−ᾱ_t)·ε and the
//! reverse mean is (1/sqrt(1−β_t))·(x_t − β_t/sqrt(1−ᾱ_t)·ε̂). Written
//! with coefficient (1−ᾱ_t) on ε and leading factor 1/ᾱ_t, the posterior
//! variance β̃_t would no longer correspond to the chain, so the standard
//! DDPM coefficients are used.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Quadratic,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(ScheduleKind::Linear),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            other => Err(Error::Validation(format!(
                "unknown schedule kind `{other}` (expected linear or quadratic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 50,
            kind: ScheduleKind::Quadratic,
            beta_min: 1e-4,
            beta_max: 0.5,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(Error::Validation(format!(
                "schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: Option<ScheduleParams>,
    beta: Vec<f64>,
    alpha_hat: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Builds the β table and its derived tables.
pub fn make_schedule(params: &ScheduleParams) -> Result<NoiseSchedule> {
    params.validate()?;
    let n = params.steps;
    let frac = |i: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    let beta = (0..n)
        .map(|i| match params.kind {
            ScheduleKind::Linear => params.beta_min + frac(i) * (params.beta_max - params.beta_min),
            ScheduleKind::Quadratic => {
                let (lo, hi) = (params.beta_min.sqrt(), params.beta_max.sqrt());
                (lo + frac(i) * (hi - lo)).powi(2)
            }
        })
        .collect();
    let mut schedule = NoiseSchedule::from_betas(beta)?;
    schedule.params = Some(*params);
    Ok(schedule)
}

impl NoiseSchedule {
    /// Schedule from an explicit β table (index 0 is step 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Validation("empty beta table".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Validation(format!("beta values must lie in (0, 1), got {b}")));
        }
        let alpha_hat: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha_hat {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]
                }
            })
            .collect();
        Ok(Self {
            params: None,
            beta,
            alpha_hat,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn params(&self) -> Option<&ScheduleParams> {
        self.params.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// α̂_t = 1 − β_t.
    pub fn alpha_hat(&self, t: usize) -> f64 {
        self.alpha_hat[t - 1]
    }

    /// ᾱ_t = Π_{i≤t} α̂_i.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Posterior variance β̃_t.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ca * x + cb * y)
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

/// x_t = sqrt(ᾱ_t)·x₀ + sqrt(1−ᾱ_t)·ε.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    same_shape(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Reverse-step mean μ = (x_t − β_t/sqrt(1−ᾱ_t)·ε̂) / sqrt(α̂_t).
pub fn posterior_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    same_shape(x_t, eps_hat)?;
    let inv = 1.0 / schedule.alpha_hat(t).sqrt();
    let k = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(combine(x_t, inv, eps_hat, -inv * k))
}

/// Reverse-step standard deviation sqrt(β̃_t).
pub fn posterior_sigma(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    schedule.check_step(t)?;
    Ok(schedule.beta_tilde(t).sqrt())
}

/// Inverts the forward marginal: x̂₀ = (x_t − sqrt(1−ᾱ_t)·ε̂) / sqrt(ᾱ_t).
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    same_shape(x_t, eps_hat)?;
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Domain(format!("alpha_bar at step {t} is zero")));
    }
    let s = ab.sqrt();
    Ok(combine(x_t, 1.0 / s, eps_hat, -(1.0 - ab).sqrt() / s))
}

/// A conditional noise predictor ε_θ(x_t, t | c).
pub trait NoisePredictor {
    type Cond: ?Sized;

    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Self::Cond) -> Result<Tensor>;

    /// Evaluates several sequences at once; implementations may batch.
    fn predict_eps_batch(&self, xs: &[Tensor], ts: &[usize], conds: &[&Self::Cond]) -> Result<Vec<Tensor>> {
        xs.iter()
            .zip(ts)
            .zip(conds)
            .map(|((x, &t), c)| self.predict_eps(x, t, c))
            .collect()
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn check_finite(x: &Tensor, t: usize) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::Numeric(format!("non-finite latent at diffusion step {t}")));
    }
    Ok(())
}

/// One ancestral step x_t → x_{t−1}. No noise is added at t = 1.
pub fn reverse_step<M: NoisePredictor, R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    cond: &M::Cond,
    model: &M,
    rng: &mut R,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let eps_hat = model.predict_eps(x_t, t, cond)?;
    let mean = posterior_mean(x_t, t, &eps_hat, schedule)?;
    let out = if t > 1 {
        let z = standard_normal(x_t.rows(), x_t.cols(), rng);
        combine(&mean, 1.0, &z, posterior_sigma(t, schedule)?)
    } else {
        mean
    };
    check_finite(&out, t)?;
    Ok(out)
}

/// Draws one `rows × cols` sample by running the reverse chain from noise.
pub fn sample<M: NoisePredictor, R: Rng + ?Sized>(
    cond: &M::Cond,
    rows: usize,
    cols: usize,
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut x = standard_normal(rows, cols, rng);
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(&x, t, cond, model, rng, schedule)?;
    }
    Ok(x)
}

/// Runs several reverse chains in lockstep, one RNG per chain, so that the
/// result for a chain does not depend on what it is batched with.
pub fn sample_batch<M: NoisePredictor, R: Rng>(
    conds: &[&M::Cond],
    rows: usize,
    cols: usize,
    model: &M,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Vec<Tensor>> {
    if conds.len() != rngs.len() {
        return Err(Error::Shape("one RNG per chain required".into()));
    }
    let mut xs: Vec<Tensor> = rngs
        .iter_mut()
        .map(|rng| standard_normal(rows, cols, rng))
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; xs.len()];
        let eps = model.predict_eps_batch(&xs, &ts, conds)?;
        let sigma = posterior_sigma(t, schedule)?;
        for ((x, e), rng) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            let mean = posterior_mean(x, t, e, schedule)?;
            *x = if t > 1 {
                let z = standard_normal(rows, cols, rng);
                combine(&mean, 1.0, &z, sigma)
            } else {
                mean
            };
            check_finite(x, t)?;
        }
    }
    Ok(xs)
}

/// Element-averaged ‖ε − ε_θ(x_t, t | c)‖² for a given step and noise draw.
pub fn eps_loss<M: NoisePredictor>(
    x0: &Tensor,
    cond: &M::Cond,
    model: &M,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = forward_sample(x0, t, eps, schedule)?;
    let eps_hat = model.predict_eps(&x_t, t, cond)?;
    same_shape(eps, &eps_hat)?;
    let n = eps.len() as f64;
    Ok(eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Exact noise predictor for data x₀ ~ N(μ, s²) i.i.d. per entry:
/// E[ε | x_t] = sqrt(1−ᾱ)·(x_t − sqrt(ᾱ)·μ) / (ᾱ·s² + 1 − ᾱ).
#[derive(Debug, Clone)]
pub struct GaussianOracle<'a> {
    pub mean: f64,
    pub stdev: f64,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for GaussianOracle<'_> {
    type Cond = ();

    fn predict_eps(&self, x_t: &Tensor, t: usize, _cond: &()) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t);
        let var = ab * self.stdev * self.stdev + 1.0 - ab;
        let k = (1.0 - ab).sqrt() / var;
        Ok(x_t.map(|x| k * (x - ab.sqrt() * self.mean)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::substream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap()
    }

    fn scalar(x: f64) -> Tensor {
        Tensor::scalar(x)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(&ScheduleParams {
            steps: 1,
            kind: ScheduleKind::Quadratic,
            beta_min: 0.02,
            beta_max: 0.3,
        })
        .unwrap();
        assert_eq!(s.betas(), &[0.02]);
        assert_eq!(s.alpha_bars(), &[1.0 - 0.02]);
        assert_eq!(s.beta_tildes(), &[0.02]);
    }

    #[test]
    fn two_step_tables() {
        let s = two_step();
        assert_relative_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
        assert_relative_eq!(s.beta_tilde(2), 0.1 / 0.28 * 0.2, epsilon = 1e-15);
        assert_relative_eq!(s.beta_tilde(2), 0.071_428_571_428_571_4, epsilon = 1e-12);
        assert_eq!(s.beta_tilde(1), s.beta(1));
        assert_relative_eq!(posterior_sigma(2, &s).unwrap(), 0.071_428_571_428_571_4f64.sqrt(), epsilon = 1e-12);
        assert_eq!(posterior_sigma(1, &s).unwrap(), 0.1f64.sqrt());
    }

    #[test]
    fn quadratic_and_linear_endpoints() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Quadratic] {
            let s = make_schedule(&ScheduleParams {
                steps: 50,
                kind,
                beta_min: 1e-4,
                beta_max: 0.5,
            })
            .unwrap();
            assert_relative_eq!(s.beta(1), 1e-4, max_relative = 1e-12);
            assert_relative_eq!(s.beta(50), 0.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        for (lo, hi) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            let p = ScheduleParams {
                steps: 10,
                kind: ScheduleKind::Linear,
                beta_min: lo,
                beta_max: hi,
            };
            assert!(make_schedule(&p).is_err());
        }
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn forward_sample_spot_value() {
        let s = two_step();
        let x = forward_sample(&scalar(1.0), 2, &scalar(0.5), &s).unwrap();
        // sqrt(0.72) + sqrt(0.28)·0.5
        assert_relative_eq!(x.get(0, 0), 1.113_103_268_530_316, epsilon = 1e-12);
        assert!(forward_sample(&scalar(1.0), 3, &scalar(0.5), &s).is_err());
        assert!(forward_sample(&Tensor::zeros(2, 2), 1, &Tensor::zeros(2, 1), &s).is_err());
    }

    #[test]
    fn posterior_mean_cases() {
        let s = two_step();
        let m = posterior_mean(&scalar(1.0), 2, &scalar(0.0), &s).unwrap();
        assert_relative_eq!(m.get(0, 0), 1.0 / 0.8f64.sqrt(), epsilon = 1e-15);
        // (1 − 0.2/sqrt(0.28)·0.3)/sqrt(0.8)
        let m = posterior_mean(&scalar(1.0), 2, &scalar(0.3), &s).unwrap();
        assert_relative_eq!(m.get(0, 0), 0.991_260_850_540_617_4, epsilon = 1e-12);
        let tiny = NoiseSchedule::from_betas(vec![1e-14]).unwrap();
        let m = posterior_mean(&scalar(0.7), 1, &scalar(0.4), &tiny).unwrap();
        assert_relative_eq!(m.get(0, 0), 0.7, epsilon = 1e-6);
    }

    #[test]
    fn predict_x0_spot_value() {
        let s = two_step();
        let x0 = predict_x0(&scalar(1.2), 2, &scalar(-0.4), &s).unwrap();
        // (1.2 + sqrt(0.28)·0.4)/sqrt(0.72)
        assert_relative_eq!(x0.get(0, 0), 1.663_657_388_158_024, epsilon = 1e-12);
        let x0 = predict_x0(&scalar(1.2), 1, &scalar(0.0), &s).unwrap();
        assert_relative_eq!(x0.get(0, 0), 1.2 / 0.9f64.sqrt(), epsilon = 1e-15);
    }

    struct Zero;
    impl NoisePredictor for Zero {
        type Cond = ();
        fn predict_eps(&self, x_t: &Tensor, _t: usize, _c: &()) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.rows(), x_t.cols()))
        }
    }

    /// Knows x₀ and therefore recovers the exact noise.
    struct KnowsX0<'a>(Tensor, &'a NoiseSchedule);
    impl NoisePredictor for KnowsX0<'_> {
        type Cond = ();
        fn predict_eps(&self, x_t: &Tensor, t: usize, _c: &()) -> Result<Tensor> {
            let ab = self.1.alpha_bar(t);
            Ok(combine(x_t, 1.0 / (1.0 - ab).sqrt(), &self.0, -(ab / (1.0 - ab)).sqrt()))
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = two_step();
        let x = Tensor::from_vec(2, 2, vec![0.1, -0.3, 0.7, 1.1]).unwrap();
        let a = reverse_step(&x, 1, &(), &Zero, &mut substream(1, 0), &s).unwrap();
        let b = reverse_step(&x, 1, &(), &Zero, &mut substream(2, 0), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, posterior_mean(&x, 1, &Tensor::zeros(2, 2), &s).unwrap());
    }

    #[test]
    fn one_step_chain_recovers_x0() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let x0 = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 0.3, 0.9]).unwrap();
        let oracle = KnowsX0(x0.clone(), &s);
        let got = sample(&(), 3, 2, &oracle, &s, &mut substream(4, 0)).unwrap();
        for (a, b) in got.data().iter().zip(x0.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_shaped() {
        let s = make_schedule(&ScheduleParams::default()).unwrap();
        let a = sample(&(), 24, 2, &Zero, &s, &mut substream(9, 0)).unwrap();
        let b = sample(&(), 24, 2, &Zero, &s, &mut substream(9, 0)).unwrap();
        assert_eq!(a.shape(), (24, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn batch_sampling_matches_single_chains() {
        let s = make_schedule(&ScheduleParams {
            steps: 10,
            ..ScheduleParams::default()
        })
        .unwrap();
        let oracle = GaussianOracle {
            mean: 0.5,
            stdev: 0.7,
            schedule: &s,
        };
        let mut rngs: Vec<_> = (0..3).map(|i| substream(5, i)).collect();
        let batch = sample_batch(&[&(), &(), &()], 4, 2, &oracle, &s, &mut rngs).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let single = sample(&(), 4, 2, &oracle, &s, &mut substream(5, i as u64)).unwrap();
            assert_eq!(b, &single);
        }
    }

    #[test]
    fn eps_loss_limits() {
        let s = two_step();
        let x0 = Tensor::from_vec(2, 2, vec![0.2, 0.4, -0.1, 1.0]).unwrap();
        let eps = standard_normal(2, 2, &mut substream(3, 3));
        let oracle = KnowsX0(x0.clone(), &s);
        assert!(eps_loss(&x0, &(), &oracle, 2, &eps, &s).unwrap() < 1e-24);

        let mut rng = substream(3, 4);
        let n = 20_000;
        let mut total = 0.0;
        for _ in 0..n {
            let eps = standard_normal(2, 2, &mut rng);
            let l = eps_loss(&x0, &(), &Zero, 1, &eps, &s).unwrap();
            assert!(l >= 0.0);
            total += l;
        }
        assert!((total / n as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn forward_marginal_moments() {
        let s = two_step();
        let mut rng = substream(17, 0);
        let n = 100_000;
        let zero = Tensor::zeros(1, 1);
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = standard_normal(1, 1, &mut rng);
                forward_sample(&zero, 2, &eps, &s).unwrap().get(0, 0)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02 * 0.28f64.sqrt());
        assert!((var / 0.28 - 1.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn schedule_invariants(
            steps in 1usize..200,
            lo in 1e-5f64..0.05,
            span in 0.0f64..0.5,
            quad in proptest::bool::ANY,
        ) {
            let p = ScheduleParams {
                steps,
                kind: if quad { ScheduleKind::Quadratic } else { ScheduleKind::Linear },
                beta_min: lo,
                beta_max: (lo + span).min(0.99),
            };
            let s = make_schedule(&p).unwrap();
            prop_assert_eq!(s.beta_tilde(1), s.beta(1));
            for t in 1..=steps {
                prop_assert_eq!(s.alpha_hat(t), 1.0 - s.beta(t));
                let prev = if t == 1 { 1.0 } else { s.alpha_bar(t - 1) };
                prop_assert_eq!(s.alpha_bar(t), prev * (1.0 - s.beta(t)));
                prop_assert!(s.alpha_bar(t) < prev);
                prop_assert!(s.beta_tilde(t) <= s.beta(t));
            }
        }

        #[test]
        fn predict_x0_inverts_forward(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            noise in proptest::collection::vec(-3.0f64..3.0, 8),
            t in 1usize..=50,
        ) {
            let s = make_schedule(&ScheduleParams::default()).unwrap();
            let x0 = Tensor::from_vec(4, 2, vals).unwrap();
            let eps = Tensor::from_vec(4, 2, noise).unwrap();
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, t, &eps, &s).unwrap();
            let scale = (1.0 - s.alpha_bar(t)).sqrt() / s.alpha_bar(t).sqrt();
            for (a, b) in back.data().iter().zip(x0.data()) {
                // Round-off grows with the inversion gain at large t.
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()) * (1.0 + scale) * 8.0);
            }
        }
    }
}
