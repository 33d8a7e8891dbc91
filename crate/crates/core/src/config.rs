//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments run to the end of the line
//! seed = 7
//! scenario.aois = urban, suburb, rural
//! scenario.rural.shadowing_sigma_db = 4
//! schedule.steps = 50
//! plan.stages = T1S4
//! ```
//!
//! Keys not listed in [`ExperimentConfig::to_text`] are rejected, as are
//! repeated keys. Shared `scenario.*` keys apply to every AOI; per-AOI keys
//! live under `scenario.<aoi>.*`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BINS;
use crate::propagation::Aoi;
use crate::scenario::{generate_scenario, synthesize_dataset, DatasetRecord, Layout, ScenarioParams};
use crate::training::{ShotMode, StagePlan, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub samples: usize,
    pub bins: usize,
    /// Share of users held out from training for scoring.
    pub test_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            bins: DEFAULT_BINS,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotConfig {
    pub target: Aoi,
    pub mode: ShotMode,
    pub fraction: f64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            target: Aoi::Rural,
            mode: ShotMode::Few,
            fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub aois: Vec<Aoi>,
    /// Scenario parameters for every AOI, indexed by [`Aoi::index`];
    /// only those in `aois` are synthesized.
    pub scenarios: [ScenarioParams; 3],
    pub schedule: ScheduleParams,
    pub model: DenoiserConfig,
    pub plan_stages: String,
    pub gamma: f64,
    pub delta: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub fewshot: FewShotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            aois: Aoi::ALL.to_vec(),
            scenarios: Aoi::ALL.map(ScenarioParams::for_aoi),
            schedule: ScheduleParams::default(),
            model: DenoiserConfig::default(),
            plan_stages: "T1S4".into(),
            gamma: 0.8,
            delta: 0.2,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            fewshot: FewShotConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Validation(format!("`{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Validation(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

/// Serde name of a unit enum variant.
fn variant<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit variants serialize to strings"),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates a configuration; unset keys keep their defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Validation(format!("line {}: `{key}` is set twice", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Validation(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Validation(format!("unknown key `{key}`"));
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["seed"] => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            ["scenario", "aois"] => self.aois = parse_list::<String>(key, value)?
                .iter()
                .map(|a| parse_enum(key, a))
                .collect::<Result<_>>()?,
            ["scenario", field] => {
                for s in &mut self.scenarios {
                    set_shared(s, field, key, value)?;
                }
            }
            ["scenario", aoi, field] => {
                let aoi: Aoi = parse_enum(key, aoi)?;
                set_per_aoi(&mut self.scenarios[aoi.index()], field, key, value)?;
            }
            ["schedule", "steps"] => self.schedule.steps = parse(key, value)?,
            ["schedule", "kind"] => self.schedule.kind = parse_enum(key, value)?,
            ["schedule", "beta_min"] => self.schedule.beta_min = parse(key, value)?,
            ["schedule", "beta_max"] => self.schedule.beta_max = parse(key, value)?,
            ["model", "d_model"] => self.model.d_model = parse(key, value)?,
            ["model", "n_heads"] => self.model.n_heads = parse(key, value)?,
            ["model", "n_layers"] => self.model.n_layers = parse(key, value)?,
            ["model", "ff_mult"] => self.model.ff_mult = parse(key, value)?,
            ["model", "step_embed_dim"] => self.model.step_embed_dim = parse(key, value)?,
            ["model", "dropout"] => self.model.dropout = parse(key, value)?,
            ["model", "temporal_positional"] => self.model.temporal_positional = parse_bool(key, value)?,
            ["plan", "stages"] => self.plan_stages = value.to_string(),
            ["plan", "gamma"] => self.gamma = parse(key, value)?,
            ["plan", "delta"] => self.delta = parse(key, value)?,
            ["train", "batch_size"] => self.train.batch_size = parse(key, value)?,
            ["train", "learning_rate"] => self.train.learning_rate = parse(key, value)?,
            ["train", "beta1"] => self.train.beta1 = parse(key, value)?,
            ["train", "beta2"] => self.train.beta2 = parse(key, value)?,
            ["train", "adam_eps"] => self.train.adam_eps = parse(key, value)?,
            ["train", "grad_clip"] => self.train.grad_clip = parse(key, value)?,
            ["train", "ema_decay"] => self.train.ema_decay = parse(key, value)?,
            ["train", "max_epochs"] => self.train.max_epochs = parse(key, value)?,
            ["train", "validation_fraction"] => self.train.validation_fraction = parse(key, value)?,
            ["train", "validation_draws"] => self.train.validation_draws = parse(key, value)?,
            ["train", "physics_weighting"] => self.train.physics_weighting = parse_enum(key, value)?,
            ["eval", "samples"] => self.eval.samples = parse(key, value)?,
            ["eval", "bins"] => self.eval.bins = parse(key, value)?,
            ["eval", "test_fraction"] => self.eval.test_fraction = parse(key, value)?,
            ["fewshot", "target"] => self.fewshot.target = parse_enum(key, value)?,
            ["fewshot", "mode"] => self.fewshot.mode = parse_enum(key, value)?,
            ["fewshot", "fraction"] => self.fewshot.fraction = parse(key, value)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.aois.is_empty() {
            return Err(Error::Validation("scenario.aois lists no AOI".into()));
        }
        let unique: BTreeSet<Aoi> = self.aois.iter().copied().collect();
        if unique.len() != self.aois.len() {
            return Err(Error::Validation("scenario.aois lists an AOI twice".into()));
        }
        for aoi in &self.aois {
            self.scenarios[aoi.index()]
                .validate()
                .map_err(|e| Error::Validation(format!("scenario.{aoi}: {}", strip_prefix(e))))?;
        }
        self.schedule.validate()?;
        self.model.validate()?;
        self.plan()?;
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::Validation("train seed must follow the top-level seed".into()));
        }
        if self.eval.samples == 0 || self.eval.bins == 0 {
            return Err(Error::Validation("eval.samples and eval.bins must be positive".into()));
        }
        if !(self.eval.test_fraction > 0.0 && self.eval.test_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "eval.test_fraction must lie in (0, 1), got {}",
                self.eval.test_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.fewshot.fraction) {
            return Err(Error::Validation(format!(
                "fewshot.fraction must lie in [0, 1), got {}",
                self.fewshot.fraction
            )));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<StagePlan> {
        StagePlan::from_label(&self.plan_stages, self.gamma, self.delta)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Scenario seed for one AOI; distinct for every (seed, AOI) pair.
    pub fn scenario_seed(seed: u64, aoi: Aoi) -> u64 {
        seed.wrapping_mul(3).wrapping_add(aoi.index() as u64)
    }

    /// Synthesizes every configured AOI, numbering users consecutively.
    pub fn build_dataset(&self) -> Result<Vec<DatasetRecord>> {
        let mut out = Vec::new();
        for &aoi in &self.aois {
            let seed = Self::scenario_seed(self.seed, aoi);
            let scenario = generate_scenario(&self.scenarios[aoi.index()], seed)?;
            let offset = out.len();
            out.extend(synthesize_dataset(&scenario, seed)?.into_iter().map(|mut r| {
                r.user_id += offset;
                r
            }));
        }
        Ok(out)
    }

    /// The fully resolved configuration, one `key = value` per line.
    /// Parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("scenario.aois", join(&self.aois));
        let s = &self.scenarios[0];
        kv("scenario.stations", s.n_stations.to_string());
        kv("scenario.users", s.n_users.to_string());
        kv("scenario.steps", s.steps.to_string());
        kv("scenario.frequencies_hz", join(&s.frequencies_hz));
        kv("scenario.ue_height_m", s.ue_height_m.to_string());
        kv("scenario.speed_min_mps", s.speed_range_mps.0.to_string());
        kv("scenario.speed_max_mps", s.speed_range_mps.1.to_string());
        kv("scenario.step_seconds", s.step_seconds.to_string());
        kv("scenario.noise_dbm", s.noise_dbm.to_string());
        kv("scenario.city_size", variant(&s.env.city_size));
        kv("scenario.hata_k", s.env.hata_k.to_string());
        for aoi in Aoi::ALL {
            let s = &self.scenarios[aoi.index()];
            let p = format!("scenario.{aoi}");
            match s.layout {
                Layout::Hex { isd_m } => {
                    kv(&format!("{p}.layout"), "hex".into());
                    kv(&format!("{p}.isd_m"), isd_m.to_string());
                }
                Layout::Uniform => kv(&format!("{p}.layout"), "uniform".into()),
            }
            kv(
                &format!("{p}.area_half_width_m"),
                s.area_half_width_m.map_or("auto".into(), |v| v.to_string()),
            );
            kv(&format!("{p}.height_min_m"), s.height_range_m.0.to_string());
            kv(&format!("{p}.height_max_m"), s.height_range_m.1.to_string());
            kv(&format!("{p}.power_min_dbm"), s.power_range_dbm.0.to_string());
            kv(&format!("{p}.power_max_dbm"), s.power_range_dbm.1.to_string());
            kv(&format!("{p}.shadowing_sigma_db"), s.shadowing.sigma_db.to_string());
            kv(
                &format!("{p}.shadowing_correlation_steps"),
                s.shadowing.correlation_steps.to_string(),
            );
        }
        kv("schedule.steps", self.schedule.steps.to_string());
        kv("schedule.kind", variant(&self.schedule.kind));
        kv("schedule.beta_min", self.schedule.beta_min.to_string());
        kv("schedule.beta_max", self.schedule.beta_max.to_string());
        let m = &self.model;
        kv("model.d_model", m.d_model.to_string());
        kv("model.n_heads", m.n_heads.to_string());
        kv("model.n_layers", m.n_layers.to_string());
        kv("model.ff_mult", m.ff_mult.to_string());
        kv("model.step_embed_dim", m.step_embed_dim.to_string());
        kv("model.dropout", m.dropout.to_string());
        kv("model.temporal_positional", m.temporal_positional.to_string());
        kv("plan.stages", self.plan_stages.clone());
        kv("plan.gamma", self.gamma.to_string());
        kv("plan.delta", self.delta.to_string());
        let t = &self.train;
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.grad_clip", t.grad_clip.to_string());
        kv("train.ema_decay", t.ema_decay.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.validation_fraction", t.validation_fraction.to_string());
        kv("train.validation_draws", t.validation_draws.to_string());
        kv("train.physics_weighting", t.physics_weighting.to_string());
        kv("eval.samples", self.eval.samples.to_string());
        kv("eval.bins", self.eval.bins.to_string());
        kv("eval.test_fraction", self.eval.test_fraction.to_string());
        kv("fewshot.target", self.fewshot.target.to_string());
        kv("fewshot.mode", variant(&self.fewshot.mode));
        kv("fewshot.fraction", self.fewshot.fraction.to_string());
        o
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Validation(m) => m,
        other => other.to_string(),
    }
}

fn set_shared(s: &mut ScenarioParams, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "stations" => s.n_stations = parse(key, value)?,
        "users" => s.n_users = parse(key, value)?,
        "steps" => s.steps = parse(key, value)?,
        "frequencies_hz" => s.frequencies_hz = parse_list(key, value)?,
        "ue_height_m" => s.ue_height_m = parse(key, value)?,
        "speed_min_mps" => s.speed_range_mps.0 = parse(key, value)?,
        "speed_max_mps" => s.speed_range_mps.1 = parse(key, value)?,
        "step_seconds" => s.step_seconds = parse(key, value)?,
        "noise_dbm" => s.noise_dbm = parse(key, value)?,
        "city_size" => s.env.city_size = parse_enum(key, value)?,
        "hata_k" => s.env.hata_k = parse(key, value)?,
        _ => return Err(Error::Validation(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn set_per_aoi(s: &mut ScenarioParams, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "layout" => {
            s.layout = match (value, s.layout) {
                ("hex", Layout::Hex { isd_m }) => Layout::Hex { isd_m },
                ("hex", Layout::Uniform) => Layout::Hex { isd_m: 500.0 },
                ("uniform", _) => Layout::Uniform,
                _ => return Err(Error::Validation(format!("`{key}`: expected hex or uniform, got `{value}`"))),
            }
        }
        "isd_m" => {
            let isd_m = parse(key, value)?;
            match &mut s.layout {
                Layout::Hex { isd_m: v } => *v = isd_m,
                Layout::Uniform => {
                    return Err(Error::Validation(format!("`{key}` needs the hex layout")));
                }
            }
        }
        "area_half_width_m" => {
            s.area_half_width_m = if value == "auto" { None } else { Some(parse(key, value)?) }
        }
        "height_min_m" => s.height_range_m.0 = parse(key, value)?,
        "height_max_m" => s.height_range_m.1 = parse(key, value)?,
        "power_min_dbm" => s.power_range_dbm.0 = parse(key, value)?,
        "power_max_dbm" => s.power_range_dbm.1 = parse(key, value)?,
        "shadowing_sigma_db" => s.shadowing.sigma_db = parse(key, value)?,
        "shadowing_correlation_steps" => s.shadowing.correlation_steps = parse(key, value)?,
        _ => return Err(Error::Validation(format!("unknown key `{key}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Shadowing;
    use crate::training::PhysicsWeighting;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let text = "\
# desk run
seed = 4
scenario.aois = urban, rural   # two only
scenario.users = 12
scenario.rural.shadowing_sigma_db = 0
scenario.urban.layout = uniform
scenario.urban.area_half_width_m = 800
schedule.steps = 20
plan.stages = T0S5
plan.gamma = 1
plan.delta = 0
train.physics_weighting = literal
";
        let cfg = ExperimentConfig::parse_text(text).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.aois, vec![Aoi::Urban, Aoi::Rural]);
        assert!(cfg.scenarios.iter().all(|s| s.n_users == 12));
        assert_eq!(cfg.scenarios[2].shadowing.sigma_db, 0.0);
        assert_eq!(cfg.scenarios[1].shadowing, Shadowing::for_aoi(Aoi::Suburb));
        assert_eq!(cfg.scenarios[0].layout, Layout::Uniform);
        assert_eq!(cfg.schedule.steps, 20);
        assert_eq!(cfg.plan().unwrap().stages().len(), 1);
        assert_eq!(cfg.train.physics_weighting, PhysicsWeighting::Literal);
        assert_eq!(ExperimentConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("plan.gamma = 0.7\nplan.delta = 0.2", "gamma"),
            ("seed = 1\nseed = 2", "twice"),
            ("model.width = 3", "unknown key"),
            ("schedule.steps = many", "cannot parse"),
            ("just words", "key = value"),
            ("scenario.aois = urban, urban", "twice"),
            ("scenario.mars.isd_m = 3", "mars"),
            ("eval.test_fraction = 1", "test_fraction"),
        ] {
            let err = ExperimentConfig::parse_text(text).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "{text}: {err}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn dataset_counts_and_ids() {
        let cfg = ExperimentConfig::parse_text("scenario.users = 4\nscenario.steps = 3").unwrap();
        let recs = cfg.build_dataset().unwrap();
        assert_eq!(recs.len(), 12);
        let ids: Vec<usize> = recs.iter().map(|r| r.user_id).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
        for aoi in Aoi::ALL {
            assert_eq!(recs.iter().filter(|r| r.aoi() == aoi).count(), 4);
        }
        assert_eq!(cfg.build_dataset().unwrap(), recs);
    }
}
