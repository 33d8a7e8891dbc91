//! Checks shared by the focused integration tests and the acceptance run.
//! Each returns the measured quantities; callers decide what to assert.

#![allow(dead_code)]

use std::path::PathBuf;

use cq_core::denoiser::{parameter_layout, Batch, DenoiserConfig, DenoiserModel, NormStats};
use cq_core::diffusion::{
    forward_sample, make_schedule, predict_x0, sample, standard_normal, GaussianOracle, NoiseSchedule,
    ScheduleKind, ScheduleParams,
};
use cq_core::metrics::{jsd, nrmse, tv};
use cq_core::propagation::{
    fspl_db, hata_pl_db, winner2_pl_db, Aoi, CitySize, Environment, LinkGeometry,
};
use cq_core::scenario::{generate_scenario, substream, synthesize_dataset, ScenarioParams};
use cq_core::tensor::{Graph, Tensor};
use rand::Rng;

pub fn manifest_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

pub fn repo_path(rel: &str) -> PathBuf {
    manifest_path("../..").join(rel)
}

#[derive(Debug)]
pub struct OracleCheck {
    pub rows: usize,
    pub max_abs_err_db: f64,
    pub worst: String,
}

/// Compares every propagation formula with the frozen extended-precision table.
pub fn propagation_oracle() -> OracleCheck {
    let path = manifest_path("tests/data/propagation_oracle.csv");
    let mut rdr = csv::Reader::from_path(&path).expect("oracle table");
    let mut check = OracleCheck {
        rows: 0,
        max_abs_err_db: 0.0,
        worst: String::new(),
    };
    for row in rdr.records() {
        let row = row.unwrap();
        let num = |i: usize| row[i].parse::<f64>().unwrap();
        let aoi: Aoi = row[1].parse().unwrap();
        let env = Environment {
            aoi,
            city_size: row[2].parse::<CitySize>().unwrap(),
            hata_k: num(3),
        };
        let geom = LinkGeometry {
            d_m: num(4),
            ht_m: num(5),
            hr_m: num(6),
            fc_hz: num(7),
        };
        let expected = num(8);
        let got = match &row[0] {
            "hata" => hata_pl_db(&env, &geom),
            "winner2" => winner2_pl_db(&env, &geom),
            "fspl" => fspl_db(&geom),
            other => panic!("unknown model {other}"),
        }
        .unwrap();
        let err = (got - expected).abs();
        if err > check.max_abs_err_db {
            check.max_abs_err_db = err;
            check.worst = row.iter().collect::<Vec<_>>().join(",");
        }
        check.rows += 1;
    }
    check
}

#[derive(Debug)]
pub struct DiffusionMath {
    /// Largest |table − independent recursion| over ᾱ and β̃, default schedule.
    pub recursion_err: f64,
    /// Worst |empirical mean − √ᾱ·x₀| / √(1−ᾱ) over the probed steps.
    pub mean_err: f64,
    /// Worst |empirical variance / (1−ᾱ) − 1|.
    pub var_rel_err: f64,
    /// Largest |predict_x0(forward_sample(x₀, ε), ε) − x₀| over all steps.
    pub identity_err: f64,
    pub beta_tilde_1_exact: bool,
}

pub fn diffusion_math(draws: usize) -> DiffusionMath {
    let s = make_schedule(&ScheduleParams::default()).unwrap();
    let mut recursion_err: f64 = 0.0;
    let mut prod = 1.0;
    for t in 1..=s.steps() {
        let prev = prod;
        prod *= 1.0 - s.beta(t);
        recursion_err = recursion_err.max((s.alpha_bar(t) - prod).abs());
        if t > 1 {
            let bt = (1.0 - prev) / (1.0 - prod) * s.beta(t);
            recursion_err = recursion_err.max((s.beta_tilde(t) - bt).abs());
        }
    }

    let x0_value = 1.7;
    let mut mean_err: f64 = 0.0;
    let mut var_rel_err: f64 = 0.0;
    let mut rng = substream(2024, 0);
    for t in [1, 10, 25, 40, s.steps()] {
        let x0 = Tensor::from_vec(draws, 1, vec![x0_value; draws]).unwrap();
        let eps = standard_normal(draws, 1, &mut rng);
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        let n = draws as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let var = xt.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(t);
        mean_err = mean_err.max((mean - ab.sqrt() * x0_value).abs() / (1.0 - ab).sqrt());
        var_rel_err = var_rel_err.max((var / (1.0 - ab) - 1.0).abs());
    }

    let mut identity_err: f64 = 0.0;
    for t in 1..=s.steps() {
        let x0 = Tensor::from_fn(16, 2, |_, _| rng.gen_range(-3.0..3.0));
        let eps = standard_normal(16, 2, &mut rng);
        let back = predict_x0(&forward_sample(&x0, t, &eps, &s).unwrap(), t, &eps, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            identity_err = identity_err.max((a - b).abs());
        }
    }
    DiffusionMath {
        recursion_err,
        mean_err,
        var_rel_err,
        identity_err,
        beta_tilde_1_exact: s.beta_tilde(1) == s.beta(1),
    }
}

#[derive(Debug)]
pub struct ConjugateGaussian {
    pub target_mean: f64,
    pub target_sd: f64,
    pub mean: f64,
    pub sd: f64,
    pub se_mean: f64,
    pub se_sd: f64,
}

impl ConjugateGaussian {
    pub fn mean_z(&self) -> f64 {
        (self.mean - self.target_mean).abs() / self.se_mean
    }

    pub fn sd_z(&self) -> f64 {
        (self.sd - self.target_sd).abs() / self.se_sd
    }
}

/// Standard 1000-step linear schedule (β from 1e-4 to 0.02), fine enough
/// that the reverse variance choice no longer biases the spread.
pub fn fine_schedule() -> NoiseSchedule {
    make_schedule(&ScheduleParams {
        steps: 1000,
        kind: ScheduleKind::Linear,
        beta_min: 1e-4,
        beta_max: 0.02,
    })
    .unwrap()
}

/// Samples `n` values with the exact noise predictor for N(2, 0.5²) data.
/// `expected` replaces the target moments by the ones the sampler should
/// produce on this schedule.
pub fn conjugate_gaussian(n: usize, schedule: &NoiseSchedule, expected: Option<(f64, f64)>) -> ConjugateGaussian {
    let (mu, sd) = (2.0, 0.5);
    let oracle = GaussianOracle {
        mean: mu,
        stdev: sd,
        schedule,
    };
    let mut rng = substream(31, 0);
    let x = sample(&(), n, 1, &oracle, schedule, &mut rng).unwrap();
    let m = n as f64;
    let mean = x.data().iter().sum::<f64>() / m;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let (target_mean, target_sd) = expected.unwrap_or((mu, sd));
    ConjugateGaussian {
        target_mean,
        target_sd,
        mean,
        sd: var.sqrt(),
        se_mean: target_sd / m.sqrt(),
        se_sd: target_sd / (2.0 * (m - 1.0)).sqrt(),
    }
}

/// Exact output moments of the ancestral sampler driven by the exact
/// predictor for N(μ, s²) data. With a linear predictor every reverse step
/// is affine plus Gaussian noise, so mean and variance propagate in closed
/// form from x_T ~ N(0, 1).
pub fn sampler_moments(mu: f64, sd: f64, s: &NoiseSchedule) -> (f64, f64) {
    let (mut m, mut v) = (0.0, 1.0);
    for t in (1..=s.steps()).rev() {
        let (beta, ab) = (s.beta(t), s.alpha_bar(t));
        let k = (1.0 - ab).sqrt() / (ab * sd * sd + 1.0 - ab);
        let c = beta / (1.0 - ab).sqrt();
        let a = (1.0 - c * k) / (1.0 - beta).sqrt();
        let b = c * k * ab.sqrt() * mu / (1.0 - beta).sqrt();
        let noise = if t > 1 { (1.0 - s.alpha_bar(t - 1)) / (1.0 - ab) * beta } else { 0.0 };
        m = a * m + b;
        v = a * a * v + noise;
    }
    (m, v.sqrt())
}

/// d_model 8, two layers, no dropout.
pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ff_mult: 2,
        step_embed_dim: 8,
        dropout: 0.0,
        temporal_positional: true,
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error floor: differences on gradients smaller than this are
/// judged in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Full denoiser, every parameter coordinate, central differences with step 1e-5.
pub fn gradient_check() -> GradCheck {
    let len = 4;
    let mut rng = substream(5, 0);
    let recs = {
        let p = ScenarioParams {
            n_users: 3,
            steps: len,
            ..ScenarioParams::for_aoi(Aoi::Urban)
        };
        synthesize_dataset(&generate_scenario(&p, 5).unwrap(), 5).unwrap()
    };
    let cfg = tiny_denoiser();
    let mut model = DenoiserModel::new(cfg.clone(), NormStats::fit(&recs).unwrap(), 5).unwrap();
    // Move away from the initialization, where some heads start at zero
    // and would hide gradient paths.
    for id in model.params().ids().collect::<Vec<_>>() {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let feats: Vec<Tensor> = recs
        .iter()
        .map(|r| model.condition_features(&r.conditions).unwrap())
        .collect();
    let xs: Vec<Tensor> = (0..recs.len()).map(|_| standard_normal(len, 2, &mut rng)).collect();
    let steps = [3usize, 17, 42];
    let batch = Batch::new(
        &xs.iter().collect::<Vec<_>>(),
        &steps,
        &feats.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let target = standard_normal(batch.x.rows(), 1, &mut rng);

    let loss_of = |m: &DenoiserModel| -> f64 {
        let mut g = Graph::new(m.params());
        let out = m.forward(&mut g, &batch, None);
        let l = g.mse(out, target.clone(), None);
        g.value(l).get(0, 0)
    };
    let grads = {
        let mut g = Graph::new(model.params());
        let out = model.forward(&mut g, &batch, None);
        let l = g.mse(out, target.clone(), None);
        g.backward(l).unwrap()
    };

    let h = 1e-5;
    let mut check = GradCheck {
        coordinates: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    assert_eq!(model.params().len(), parameter_layout(&cfg).len());
    for id in model.params().ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).unwrap().clone();
        for i in 0..analytic.len() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", model.params().name(id));
            }
            check.coordinates += 1;
        }
    }
    check
}

#[derive(Debug)]
pub struct MetricIdentities {
    pub identical_jsd: f64,
    pub identical_tv: f64,
    pub disjoint_jsd: f64,
    pub disjoint_tv: f64,
    /// Largest |NRMSE(a·x+b, a·y+b) − NRMSE(x, y)| over the probed maps.
    pub affine_err: f64,
}

pub fn metric_identities() -> MetricIdentities {
    let mut rng = substream(8, 0);
    let x: Vec<f64> = (0..500).map(|_| rng.gen_range(-90.0..-60.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-4.0..4.0)).collect();
    let far: Vec<f64> = (0..500).map(|_| rng.gen_range(10.0..20.0)).collect();
    let base = nrmse(&x, &y).unwrap();
    let mut affine_err: f64 = 0.0;
    for (a, b) in [(1.0, 30.0), (-2.5, 0.0), (1e3, -7.0), (0.01, 100.0)] {
        let map = |v: &[f64]| v.iter().map(|t| a * t + b).collect::<Vec<_>>();
        affine_err = affine_err.max((nrmse(&map(&x), &map(&y)).unwrap() - base).abs());
    }
    MetricIdentities {
        identical_jsd: jsd(&x, &x, 50).unwrap(),
        identical_tv: tv(&x, &x, 50).unwrap(),
        disjoint_jsd: jsd(&x, &far, 50).unwrap(),
        disjoint_tv: tv(&x, &far, 50).unwrap(),
        affine_err,
    }
}
