//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cq_core::cli::fit;
use cq_core::config::ExperimentConfig;
use cq_core::diffusion::{make_schedule, standard_normal, ScheduleParams};
use cq_core::metrics::{nrmse, Attribute};
use cq_core::persistence::{load_checkpoint, read_dataset, save_checkpoint};
use cq_core::propagation::Aoi;
use cq_core::scenario::{substream, DatasetRecord};
use cq_core::training::few_shot_sweep;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: u64 = 5;

struct Outcome {
    id: u8,
    pass: bool,
    summary: String,
}

fn line(o: &Outcome) -> String {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    format!("criterion {}: {verdict} — {}", o.id, o.summary)
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let c = common::propagation_oracle();
    let el = t.elapsed();
    Outcome {
        id: 1,
        pass: c.rows == 200 && c.max_abs_err_db <= 1e-9 && el < Duration::from_secs(1),
        summary: format!(
            "propagation oracle: {} points, max |error| {:.2e} dB (≤ 1e-9), {}",
            c.rows,
            c.max_abs_err_db,
            secs(el)
        ),
    }
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let m = common::diffusion_math(100_000);
    let el = t.elapsed();
    Outcome {
        id: 2,
        pass: m.recursion_err == 0.0
            && m.mean_err <= 0.02
            && m.var_rel_err <= 0.02
            && m.identity_err <= 1e-12
            && m.beta_tilde_1_exact
            && el < Duration::from_secs(10),
        summary: format!(
            "recursion error {:.1e}, marginal mean error {:.4} sd-units, variance error {:.4} (≤ 0.02), \
             x0 identity {:.1e} (≤ 1e-12), β̃₁ = β₁: {}, {}",
            m.recursion_err,
            m.mean_err,
            m.var_rel_err,
            m.identity_err,
            m.beta_tilde_1_exact,
            secs(el)
        ),
    }
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let fine = common::conjugate_gaussian(10_000, &common::fine_schedule(), None);
    let default = make_schedule(&ScheduleParams::default()).unwrap();
    let expected = common::sampler_moments(2.0, 0.5, &default);
    let coarse = common::conjugate_gaussian(10_000, &default, Some(expected));
    let el = t.elapsed();
    Outcome {
        id: 3,
        pass: fine.mean_z() <= 3.0
            && fine.sd_z() <= 3.0
            && coarse.mean_z() <= 3.0
            && coarse.sd_z() <= 3.0
            && el < Duration::from_secs(30),
        summary: format!(
            "1000-step schedule: mean {:.4} ({:.2} SE), sd {:.4} ({:.2} SE) vs N(2, 0.5²); \
             default schedule: sd {:.4} vs closed-form sampler sd {:.4} ({:.2} SE), {}",
            fine.mean,
            fine.mean_z(),
            fine.sd,
            fine.sd_z(),
            coarse.sd,
            expected.1,
            coarse.sd_z(),
            secs(el)
        ),
    }
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let g = common::gradient_check();
    let el = t.elapsed();
    Outcome {
        id: 4,
        pass: g.max_rel_err <= 1e-4 && el < Duration::from_secs(60),
        summary: format!(
            "{} coordinates, max relative error {:.2e} (≤ 1e-4; worst {}), {}",
            g.coordinates,
            g.max_rel_err,
            g.worst,
            secs(el)
        ),
    }
}

struct SeedRun {
    nrmse: f64,
    baseline: f64,
    elapsed: Duration,
    physics_nrmse: f64,
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&common::repo_path("configs/desk.conf")).unwrap()
}

fn run_plan_seed(base: &ExperimentConfig, records: &[DatasetRecord], seed: u64, plan: (&str, f64, f64)) -> SeedRun {
    let mut cfg = base.clone().with_seed(seed);
    cfg.plan_stages = plan.0.into();
    cfg.gamma = plan.1;
    cfg.delta = plan.2;
    let t = Instant::now();
    let f = fit(&cfg, records).unwrap();
    let elapsed = t.elapsed();
    let real: Vec<f64> = f.test.iter().flat_map(|r| r.real.rsrp_dbm.clone()).collect();
    let theory: Vec<f64> = f.test.iter().flat_map(|r| r.theoretical_rsrp_dbm.clone()).collect();
    SeedRun {
        nrmse: f.evaluation.metrics.nrmse(Attribute::Rsrp),
        baseline: f.evaluation.baseline_rsrp_nrmse,
        elapsed,
        physics_nrmse: nrmse(&real, &theory).unwrap(),
    }
}

fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

fn criteria_5_and_6() -> (Outcome, Outcome) {
    let cfg = desk_config();
    let t = Instant::now();
    let records = cfg.build_dataset().unwrap();
    let gen_time = t.elapsed();
    let mut student = Vec::new();
    let mut teacher_student = Vec::new();
    for seed in 0..SEEDS {
        let ts = run_plan_seed(&cfg, &records, seed, ("T1S4", 0.8, 0.2));
        let s = run_plan_seed(&cfg, &records, seed, ("T0S5", 1.0, 0.0));
        println!(
            "    seed {seed}: T1S4 {:.4}  T0S5 {:.4}  mean-predictor {:.4}  T1S4 ratio {:.3}  ({} + {})",
            ts.nrmse,
            s.nrmse,
            ts.baseline,
            ts.nrmse / ts.baseline,
            secs(ts.elapsed),
            secs(s.elapsed)
        );
        teacher_student.push(ts);
        student.push(s);
    }

    let first = &teacher_student[0];
    let ratio = first.nrmse / first.baseline;
    let c5_time = gen_time + first.elapsed;
    let c5 = Outcome {
        id: 5,
        pass: ratio <= 0.5 && c5_time <= Duration::from_secs(15 * 60),
        summary: format!(
            "{} users, T1S4 seed 0: RSRP NRMSE {:.4} vs mean predictor {:.4}, ratio {:.3} (≤ 0.5); \
             reference: physics-only RSRP NRMSE {:.4} (ratio {:.3}), {}",
            records.len(),
            first.nrmse,
            first.baseline,
            ratio,
            first.physics_nrmse,
            first.physics_nrmse / first.baseline,
            secs(c5_time)
        ),
    };

    let n = SEEDS as usize;
    let mean = |v: &[SeedRun]| v.iter().map(|r| r.nrmse).sum::<f64>() / v.len() as f64;
    let (m_ts, m_s) = (mean(&teacher_student), mean(&student));
    let wins = teacher_student.iter().zip(&student).filter(|(a, b)| a.nrmse < b.nrmse).count();
    let p = sign_test_p(wins, n);
    let c6 = Outcome {
        id: 6,
        pass: m_ts <= m_s || p <= 0.25,
        summary: format!(
            "mean RSRP NRMSE over {n} seeds: T1S4 {m_ts:.4} vs T0S5 {m_s:.4}; \
             T1S4 better on {wins}/{n} seeds (one-sided sign test p = {p:.3})"
        ),
    };
    (c5, c6)
}

fn criterion_7() -> Outcome {
    let cfg = desk_config();
    let records = cfg.build_dataset().unwrap();
    let (mut zero, mut few) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let c = cfg.clone().with_seed(seed);
        let t = Instant::now();
        let reports = few_shot_sweep(
            &records,
            Aoi::Rural,
            &[0.0, 0.10],
            c.eval.samples,
            c.eval.bins,
            &c.plan().unwrap(),
            &c.model,
            &c.schedule,
            &c.train,
        )
        .unwrap();
        let (z, f) = (
            reports[0].evaluation.metrics.nrmse(Attribute::Rsrp),
            reports[1].evaluation.metrics.nrmse(Attribute::Rsrp),
        );
        println!(
            "    seed {seed}: zero-shot {z:.4}  10% few-shot {f:.4}  ({} fine-tune, {} eval users, {})",
            reports[1].fine_tune_records,
            reports[1].eval_records,
            secs(t.elapsed())
        );
        zero.push(z);
        few.push(f);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mz, mf) = (mean(&zero), mean(&few));
    Outcome {
        id: 7,
        pass: mz >= mf,
        summary: format!("rural target, mean RSRP NRMSE over {SEEDS} seeds: zero-shot {mz:.4} ≥ 10% few-shot {mf:.4}"),
    }
}

fn criterion_8() -> Outcome {
    let m = common::metric_identities();
    Outcome {
        id: 8,
        pass: m.identical_jsd == 0.0
            && m.identical_tv == 0.0
            && (m.disjoint_jsd - 1.0).abs() <= 1e-10
            && (m.disjoint_tv - 1.0).abs() <= 1e-10
            && m.affine_err <= 1e-10,
        summary: format!(
            "identical JSD {} TV {}; disjoint JSD {} TV {}; NRMSE affine drift {:.1e}",
            m.identical_jsd, m.identical_tv, m.disjoint_jsd, m.disjoint_tv, m.affine_err
        ),
    }
}

fn cqgen(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_cqgen"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_files(dir: &Path, a: &str, b: &str) -> bool {
    matches!((fs::read(dir.join(a)), fs::read(dir.join(b))), (Ok(x), Ok(y)) if x == y)
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let conf = common::repo_path("configs/smoke.conf");
    let conf = conf.to_str().unwrap();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let ran = cqgen(&["gen-data", "--config", conf, "--out", "d1.jsonl"], d)
        && cqgen(&["gen-data", "--config", conf, "--out", "d2.jsonl"], d);
    checks.push(("dataset bytes", ran && same_files(d, "d1.jsonl", "d2.jsonl")));
    let ran = cqgen(&["train", "--config", conf, "--data", "d1.jsonl", "--out", "m1.ckpt"], d)
        && cqgen(&["train", "--config", conf, "--data", "d1.jsonl", "--out", "m2.ckpt"], d);
    checks.push(("checkpoint bytes", ran && same_files(d, "m1.ckpt", "m2.ckpt")));
    checks.push(("training report", ran && same_files(d, "m1.ckpt.report.json", "m2.ckpt.report.json")));
    let ran = cqgen(&["sample", "--checkpoint", "m1.ckpt", "--data", "d1.jsonl", "--out", "s1.csv"], d)
        && cqgen(&["sample", "--checkpoint", "m2.ckpt", "--data", "d1.jsonl", "--out", "s2.csv"], d);
    let strip = |p: &str| {
        fs::read_to_string(d.join(p))
            .unwrap_or_default()
            .lines()
            .filter(|l| !l.starts_with("# checkpoint"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    checks.push(("sample file", ran && strip("s1.csv") == strip("s2.csv")));
    let ran = cqgen(&["eval", "--data", "s1.csv", "--out", "e1.json"], d)
        && cqgen(&["eval", "--data", "s1.csv", "--out", "e2.json"], d);
    checks.push(("metric report", ran && same_files(d, "e1.json", "e2.json")));
    let ran = cqgen(&["fewshot", "--config", conf, "--out", "f1.json"], d)
        && cqgen(&["fewshot", "--config", conf, "--out", "f2.json"], d);
    checks.push(("few-shot report", ran && same_files(d, "f1.json", "f2.json")));

    // In-memory model against its reloaded checkpoint, output bit for bit.
    let records = read_dataset(&d.join("d1.jsonl")).unwrap();
    let cfg = ExperimentConfig::load(Path::new(conf)).unwrap();
    let f = fit(&cfg, &records).unwrap();
    save_checkpoint(&d.join("rt.ckpt"), &f.model, &f.schedule, serde_json::Value::Null, cfg.seed).unwrap();
    let back = load_checkpoint(&d.join("rt.ckpt")).unwrap();
    let mut rng = substream(9, 0);
    let mut identical = true;
    for r in &records {
        let x = standard_normal(r.len(), 2, &mut rng);
        for t in [1, 7, cfg.schedule.steps] {
            let a = f.model.denoise(&x, t, &f.model.condition_features(&r.conditions).unwrap()).unwrap();
            let b = back.model.denoise(&x, t, &back.model.condition_features(&r.conditions).unwrap()).unwrap();
            identical &= a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        }
    }
    checks.push(("checkpoint round trip", identical));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        id: 9,
        pass: failed.is_empty(),
        summary: if failed.is_empty() {
            format!("{} identical: {}", checks.len(), checks.iter().map(|c| c.0).collect::<Vec<_>>().join(", "))
        } else {
            format!("differs: {}", failed.join(", "))
        },
    }
}

fn main() {
    let started = Instant::now();
    let mut outcomes = Vec::new();
    let mut run = |o: Outcome| {
        println!("{}", line(&o));
        outcomes.push(o);
    };
    run(criterion_1());
    run(criterion_2());
    run(criterion_3());
    run(criterion_4());
    run(criterion_8());
    run(criterion_9());
    let (c5, c6) = criteria_5_and_6();
    run(c5);
    run(c6);
    run(criterion_7());

    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary ({}):", secs(started.elapsed()));
    for o in &outcomes {
        println!("{}", line(o));
    }
    let failing: Vec<u8> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if !failing.is_empty() {
        println!("failing criteria: {failing:?}");
        std::process::exit(1);
    }
}
