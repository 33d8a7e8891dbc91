//! Three small views onto `cq-core` for the browser: a path-loss sweep, a
//! simulated user trace, and the forward noising of that trace. Each export
//! returns a JSON string so the page needs no bindings beyond `JSON.parse`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cq_core::diffusion::{forward_sample, make_schedule, standard_normal, ScheduleKind, ScheduleParams};
use cq_core::propagation::{fspl_db, path_loss_db, Aoi, CitySize, Environment, LinkGeometry, PathLossModel};
use cq_core::scenario::{generate_scenario, substream, synthesize_dataset, ScenarioParams};
use cq_core::tensor::Tensor;

#[derive(Debug, Serialize)]
pub struct PathLossCurve {
    pub model: &'static str,
    pub distance_m: Vec<f64>,
    pub path_loss_db: Vec<f64>,
    pub free_space_db: Vec<f64>,
}

/// Log-spaced sweep of path loss against distance for one carrier.
pub fn path_loss_curve(
    aoi: &str,
    city: &str,
    fc_mhz: f64,
    ht_m: f64,
    hr_m: f64,
    d_min_m: f64,
    d_max_m: f64,
    points: usize,
) -> Result<PathLossCurve, String> {
    let aoi: Aoi = aoi.parse().map_err(|e: cq_core::Error| e.to_string())?;
    let env = Environment {
        city_size: city.parse::<CitySize>().map_err(|e| e.to_string())?,
        ..Environment::new(aoi)
    };
    if !(d_min_m > 0.0 && d_max_m > d_min_m) || points < 2 {
        return Err("need 0 < d_min < d_max and at least two points".into());
    }
    let fc_hz = fc_mhz * 1e6;
    let mut curve = PathLossCurve {
        model: PathLossModel::for_frequency(fc_hz).name(),
        distance_m: Vec::with_capacity(points),
        path_loss_db: Vec::with_capacity(points),
        free_space_db: Vec::with_capacity(points),
    };
    let ratio = (d_max_m / d_min_m).ln() / (points - 1) as f64;
    for i in 0..points {
        let geom = LinkGeometry {
            d_m: d_min_m * (ratio * i as f64).exp(),
            ht_m,
            hr_m,
            fc_hz,
        };
        curve.distance_m.push(geom.d_m);
        curve.path_loss_db.push(path_loss_db(&env, &geom).map_err(|e| e.to_string())?);
        curve.free_space_db.push(fspl_db(&geom).map_err(|e| e.to_string())?);
    }
    Ok(curve)
}

#[derive(Debug, Serialize)]
pub struct Station {
    pub x: f64,
    pub y: f64,
    pub fc_mhz: f64,
}

#[derive(Debug, Serialize)]
pub struct Trace {
    pub stations: Vec<Station>,
    pub path: Vec<[f64; 2]>,
    pub serving: Vec<usize>,
    pub rsrp_dbm: Vec<f64>,
    pub theory_rsrp_dbm: Vec<f64>,
    pub sinr_db: Vec<f64>,
}

/// One user moving through a seven-site layout of the given AOI.
pub fn simulate_trace(aoi: &str, steps: usize, shadowing_db: f64, seed: u64) -> Result<Trace, String> {
    let aoi: Aoi = aoi.parse().map_err(|e: cq_core::Error| e.to_string())?;
    let mut params = ScenarioParams {
        n_users: 1,
        steps,
        ..ScenarioParams::for_aoi(aoi)
    };
    params.shadowing.sigma_db = shadowing_db;
    let scenario = generate_scenario(&params, seed).map_err(|e| e.to_string())?;
    let record = synthesize_dataset(&scenario, seed)
        .map_err(|e| e.to_string())?
        .remove(0);
    Ok(Trace {
        stations: scenario
            .stations
            .iter()
            .map(|s| Station {
                x: s.position[0],
                y: s.position[1],
                fc_mhz: s.fc_hz / 1e6,
            })
            .collect(),
        path: scenario.trajectories[0].clone(),
        serving: record.serving_ids,
        rsrp_dbm: record.real.rsrp_dbm,
        theory_rsrp_dbm: record.theoretical_rsrp_dbm,
        sinr_db: record.real.sinr_db,
    })
}

#[derive(Debug, Serialize)]
pub struct Noising {
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
    /// The standardized RSRP trace.
    pub clean: Vec<f64>,
    /// Its noised version at the requested step.
    pub noised: Vec<f64>,
}

/// Standardizes `series` and noises it to step `t` of the given schedule.
pub fn forward_noising(
    series: &[f64],
    kind: &str,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    t: usize,
    seed: u64,
) -> Result<Noising, String> {
    if series.len() < 2 {
        return Err("need a series of at least two values".into());
    }
    let params = ScheduleParams {
        steps,
        kind: kind.parse::<ScheduleKind>().map_err(|e| e.to_string())?,
        beta_min,
        beta_max,
    };
    let schedule = make_schedule(&params).map_err(|e| e.to_string())?;
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-9);
    let clean: Vec<f64> = series.iter().map(|v| (v - mean) / sd).collect();
    let x0 = Tensor::from_vec(clean.len(), 1, clean.clone()).map_err(|e| e.to_string())?;
    let eps = standard_normal(clean.len(), 1, &mut substream(seed, 0));
    let noised = forward_sample(&x0, t, &eps, &schedule).map_err(|e| e.to_string())?;
    Ok(Noising {
        alpha_bar: schedule.alpha_bars().to_vec(),
        beta: schedule.betas().to_vec(),
        clean,
        noised: noised.into_vec(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pathLossCurve)]
#[allow(clippy::too_many_arguments)]
pub fn path_loss_curve_js(
    aoi: &str,
    city: &str,
    fc_mhz: f64,
    ht_m: f64,
    hr_m: f64,
    d_min_m: f64,
    d_max_m: f64,
    points: usize,
) -> Result<String, JsValue> {
    to_js(path_loss_curve(aoi, city, fc_mhz, ht_m, hr_m, d_min_m, d_max_m, points))
}

#[wasm_bindgen(js_name = simulateTrace)]
pub fn simulate_trace_js(aoi: &str, steps: usize, shadowing_db: f64, seed: u32) -> Result<String, JsValue> {
    to_js(simulate_trace(aoi, steps, shadowing_db, seed as u64))
}

#[wasm_bindgen(js_name = forwardNoising)]
pub fn forward_noising_js(
    series: &[f64],
    kind: &str,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    t: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(forward_noising(series, kind, steps, beta_min, beta_max, t, seed as u64))
}
