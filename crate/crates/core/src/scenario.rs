//! Synthetic multi-cell scenarios and dataset synthesis.
//!
//! A scenario places base stations on a layout, walks users along
//! random-waypoint trajectories and, per time step, computes every link's
//! received power (deterministic link budget plus correlated log-normal
//! shadowing). The strongest link serves the user; co-channel links from
//! the other stations interfere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{
    dbm_to_watts, linear_to_db, path_loss_db, received_power_dbm, Aoi, Environment, LinkBudget,
    LinkGeometry,
};

/// Operator carrier set: 700 MHz, 2.6 GHz, 4.9 GHz.
pub const DEFAULT_FREQUENCIES_HZ: [f64; 3] = [700.0e6, 2.6e9, 4.9e9];
pub const DEFAULT_NOISE_DBM: f64 = -104.0;
pub const DEFAULT_UE_HEIGHT_M: f64 = 1.5;

/// Independent RNG substream for a given seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shadowing {
    pub sigma_db: f64,
    /// Decorrelation length in time steps; `f64::INFINITY` freezes the gain.
    pub correlation_steps: f64,
}

impl Shadowing {
    pub fn for_aoi(aoi: Aoi) -> Self {
        let (sigma_db, correlation_steps) = match aoi {
            Aoi::Urban => (8.0, 10.0),
            Aoi::Suburb => (6.0, 15.0),
            Aoi::Rural => (4.0, 20.0),
        };
        Self {
            sigma_db,
            correlation_steps,
        }
    }

    pub fn disabled() -> Self {
        Self {
            sigma_db: 0.0,
            correlation_steps: 1.0,
        }
    }

    /// One-step correlation ρ = exp(−1/correlation_steps).
    pub fn rho(&self) -> f64 {
        (-1.0 / self.correlation_steps).exp()
    }
}

/// First-order Gauss–Markov shadowing process for one link.
///
/// g₀ ~ N(0, σ²); g_t = ρ·g_{t−1} + sqrt(1−ρ²)·σ·z_t.
#[derive(Debug, Clone)]
pub struct GaussMarkov {
    rho: f64,
    sigma: f64,
    state: Option<f64>,
}

impl GaussMarkov {
    pub fn new(shadowing: &Shadowing) -> Self {
        Self {
            rho: shadowing.rho(),
            sigma: shadowing.sigma_db,
            state: None,
        }
    }

    /// Environment gain in dB for the next time step.
    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        let g = match self.state {
            None => self.sigma * z,
            Some(prev) => self.rho * prev + (1.0 - self.rho * self.rho).sqrt() * self.sigma * z,
        };
        self.state = Some(g);
        g
    }
}

/// `len` consecutive environment gains for one link.
pub fn environment_gain_series<R: Rng + ?Sized>(
    shadowing: &Shadowing,
    len: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut process = GaussMarkov::new(shadowing);
    (0..len).map(|_| process.next(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BBox {
    pub fn centered(half_width: f64) -> Self {
        Self {
            min: [-half_width, -half_width],
            max: [half_width, half_width],
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            rng.gen_range(self.min[0]..=self.max[0]),
            rng.gen_range(self.min[1]..=self.max[1]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub bbox: BBox,
    /// Speed range in m/s.
    pub speed_range: (f64, f64),
    pub step_seconds: f64,
    pub steps: usize,
}

/// Random-waypoint walk sampled once per time step.
///
/// The walker moves toward a uniformly drawn waypoint at a uniformly drawn
/// speed; on arrival it stops for the remainder of that step and draws a
/// new waypoint and speed. Consecutive positions are therefore never more
/// than `max_speed · step_seconds` apart.
pub fn generate_trajectory<R: Rng + ?Sized>(params: &TrajectoryParams, rng: &mut R) -> Vec<[f64; 2]> {
    let (vmin, vmax) = params.speed_range;
    let draw_speed = |rng: &mut R| {
        if vmax > vmin {
            rng.gen_range(vmin..=vmax)
        } else {
            vmin
        }
    };
    let mut pos = params.bbox.sample(rng);
    let mut waypoint = params.bbox.sample(rng);
    let mut speed = draw_speed(rng);
    let mut out = Vec::with_capacity(params.steps);
    out.push(pos);
    for _ in 1..params.steps {
        let step = speed * params.step_seconds;
        let dx = waypoint[0] - pos[0];
        let dy = waypoint[1] - pos[1];
        let remaining = dx.hypot(dy);
        if remaining <= step {
            pos = waypoint;
            waypoint = params.bbox.sample(rng);
            speed = draw_speed(rng);
        } else if step > 0.0 {
            pos = [pos[0] + dx / remaining * step, pos[1] + dy / remaining * step];
        }
        out.push(pos);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Hexagonal grid: centre site, then rings at the inter-site distance.
    Hex { isd_m: f64 },
    /// Stations uniform in the area box.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub env: Environment,
    pub layout: Layout,
    pub n_stations: usize,
    pub n_users: usize,
    pub steps: usize,
    /// Half-width of the square service area; derived from the layout when unset.
    pub area_half_width_m: Option<f64>,
    pub frequencies_hz: Vec<f64>,
    pub height_range_m: (f64, f64),
    pub power_range_dbm: (f64, f64),
    pub ue_height_m: f64,
    pub speed_range_mps: (f64, f64),
    pub step_seconds: f64,
    pub noise_dbm: f64,
    pub shadowing: Shadowing,
}

impl ScenarioParams {
    pub fn for_aoi(aoi: Aoi) -> Self {
        let (isd_m, height_range_m, power_range_dbm) = match aoi {
            Aoi::Urban => (500.0, (20.0, 35.0), (40.0, 46.0)),
            Aoi::Suburb => (1000.0, (25.0, 40.0), (40.0, 46.0)),
            Aoi::Rural => (2000.0, (30.0, 50.0), (43.0, 49.0)),
        };
        Self {
            env: Environment::new(aoi),
            layout: Layout::Hex { isd_m },
            n_stations: 7,
            n_users: 100,
            steps: 24,
            area_half_width_m: None,
            frequencies_hz: DEFAULT_FREQUENCIES_HZ.to_vec(),
            height_range_m,
            power_range_dbm,
            ue_height_m: DEFAULT_UE_HEIGHT_M,
            speed_range_mps: (1.0, 15.0),
            step_seconds: 2.0,
            noise_dbm: DEFAULT_NOISE_DBM,
            shadowing: Shadowing::for_aoi(aoi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.n_stations == 0 {
            return fail("scenario needs at least one base station".into());
        }
        if self.n_users == 0 {
            return fail("scenario needs at least one user".into());
        }
        if self.steps < 2 {
            return fail(format!("sequence length must be at least 2, got {}", self.steps));
        }
        if self.frequencies_hz.is_empty() || self.frequencies_hz.iter().any(|f| !(*f > 0.0)) {
            return fail("frequency set must be non-empty and positive".into());
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.height_range_m) || self.height_range_m.0 <= 0.0 {
            return fail(format!("invalid BS height range {:?}", self.height_range_m));
        }
        if !ordered(self.power_range_dbm)
            || self.power_range_dbm.0 < 0.0
            || self.power_range_dbm.1 > 80.0
        {
            return fail(format!("invalid transmit power range {:?}", self.power_range_dbm));
        }
        if !ordered(self.speed_range_mps) || self.speed_range_mps.0 < 0.0 {
            return fail(format!("invalid speed range {:?}", self.speed_range_mps));
        }
        if !(self.ue_height_m > 0.0) || !(self.step_seconds > 0.0) {
            return fail("UE height and step duration must be positive".into());
        }
        if !self.noise_dbm.is_finite() {
            return fail("noise power must be finite".into());
        }
        if !(self.shadowing.sigma_db >= 0.0) || !(self.shadowing.correlation_steps > 0.0) {
            return fail(format!("invalid shadowing {:?}", self.shadowing));
        }
        if let Layout::Hex { isd_m } = self.layout {
            if !(isd_m > 0.0) {
                return fail(format!("inter-site distance must be positive, got {isd_m}"));
            }
        }
        if let Some(h) = self.area_half_width_m {
            if !(h > 0.0) {
                return fail(format!("area half-width must be positive, got {h}"));
            }
        }
        if matches!(self.layout, Layout::Uniform) && self.area_half_width_m.is_none() {
            return fail("uniform layout requires an explicit area half-width".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub id: usize,
    pub position: [f64; 2],
    pub height_m: f64,
    pub fc_hz: f64,
    pub pt_dbm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: ScenarioParams,
    pub stations: Vec<BaseStation>,
    pub area: BBox,
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

/// Site positions of a hexagonal grid, centre first, ordered by ring and angle.
pub fn hex_positions(n: usize, isd_m: f64) -> Vec<[f64; 2]> {
    let mut rings = 0i64;
    while 1 + 3 * rings * (rings + 1) < n as i64 {
        rings += 1;
    }
    let mut sites = Vec::new();
    for q in -rings..=rings {
        for r in -rings..=rings {
            let s = -q - r;
            let ring = q.abs().max(r.abs()).max(s.abs());
            if ring > rings {
                continue;
            }
            let x = isd_m * (q as f64 + r as f64 / 2.0);
            let y = isd_m * (3f64.sqrt() / 2.0 * r as f64);
            let mut angle = y.atan2(x);
            if angle < 0.0 {
                angle += std::f64::consts::TAU;
            }
            sites.push((ring, angle, [x, y]));
        }
    }
    sites.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    sites.into_iter().take(n).map(|s| s.2).collect()
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Places stations and draws one trajectory per user. Deterministic in `seed`.
pub fn generate_scenario(params: &ScenarioParams, seed: u64) -> Result<Scenario> {
    params.validate()?;
    let mut rng = substream(seed, 0);
    let (positions, area) = match params.layout {
        Layout::Hex { isd_m } => {
            let positions = hex_positions(params.n_stations, isd_m);
            let reach = positions
                .iter()
                .map(|p| p[0].abs().max(p[1].abs()))
                .fold(0.0, f64::max);
            let half = params.area_half_width_m.unwrap_or(reach + isd_m / 2.0);
            (positions, BBox::centered(half))
        }
        Layout::Uniform => {
            let area = BBox::centered(params.area_half_width_m.unwrap_or(1000.0));
            let positions = (0..params.n_stations).map(|_| area.sample(&mut rng)).collect();
            (positions, area)
        }
    };
    let stations = positions
        .into_iter()
        .enumerate()
        .map(|(id, position)| BaseStation {
            id,
            position,
            height_m: uniform_in(&mut rng, params.height_range_m),
            fc_hz: params.frequencies_hz[rng.gen_range(0..params.frequencies_hz.len())],
            pt_dbm: uniform_in(&mut rng, params.power_range_dbm),
        })
        .collect();
    let trajectory = TrajectoryParams {
        bbox: area,
        speed_range: params.speed_range_mps,
        step_seconds: params.step_seconds,
        steps: params.steps,
    };
    let trajectories = (0..params.n_users)
        .map(|u| generate_trajectory(&trajectory, &mut substream(seed, 1 + 2 * u as u64)))
        .collect();
    Ok(Scenario {
        params: params.clone(),
        stations,
        area,
        trajectories,
    })
}

/// 3D distance between a user at ground position `pos` and a station.
pub fn link_distance_m(bs: &BaseStation, pos: [f64; 2], ue_height_m: f64) -> f64 {
    let dx = pos[0] - bs.position[0];
    let dy = pos[1] - bs.position[1];
    let dz = bs.height_m - ue_height_m;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Received power of one link including the environment gain.
pub fn link_pr_dbm(
    env: &Environment,
    bs: &BaseStation,
    user_pos: [f64; 2],
    ue_height_m: f64,
    gain_db: f64,
) -> Result<f64> {
    let geom = LinkGeometry {
        d_m: link_distance_m(bs, user_pos, ue_height_m),
        ht_m: bs.height_m,
        hr_m: ue_height_m,
        fc_hz: bs.fc_hz,
    };
    let pl = path_loss_db(env, &geom)?;
    Ok(received_power_dbm(&LinkBudget::isotropic(bs.pt_dbm), pl) + gain_db)
}

/// Strongest link and its index; ties go to the lowest index.
pub fn serving_selection(pr_dbm: &[f64]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &p) in pr_dbm.iter().enumerate() {
        match best {
            Some((b, _)) if p <= b => {}
            _ => best = Some((p, i)),
        }
    }
    best.ok_or_else(|| Error::Validation("serving selection needs at least one link".into()))
}

fn same_channel(a: f64, b: f64) -> bool {
    (a / 1e3).round() == (b / 1e3).round()
}

/// Co-channel interference at the serving link, in watts.
pub fn interference_power_w(pr_w: &[f64], freqs_hz: &[f64], serving: usize) -> Result<f64> {
    if pr_w.len() != freqs_hz.len() {
        return Err(Error::Shape(format!(
            "{} powers but {} frequencies",
            pr_w.len(),
            freqs_hz.len()
        )));
    }
    if serving >= pr_w.len() {
        return Err(Error::Validation(format!(
            "serving index {serving} out of range for {} links",
            pr_w.len()
        )));
    }
    let f_serving = freqs_hz[serving];
    Ok(pr_w
        .iter()
        .zip(freqs_hz)
        .enumerate()
        .filter(|&(i, (_, &f))| i != serving && same_channel(f, f_serving))
        .map(|(_, (&p, _))| p)
        .sum())
}

/// Linear SINR = RSRP / (I + N).
pub fn sinr(rsrp_w: f64, interference_w: f64, noise_w: f64) -> Result<f64> {
    if !(noise_w > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {noise_w}")));
    }
    Ok(rsrp_w / (interference_w + noise_w))
}

/// Per-step serving-link conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSeries {
    pub d_m: Vec<f64>,
    pub h_bs_m: Vec<f64>,
    pub f_hz: Vec<f64>,
    pub pt_dbm: Vec<f64>,
    pub aoi: Aoi,
}

impl ConditionSeries {
    pub fn len(&self) -> usize {
        self.d_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_m.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.d_m.len();
        if self.h_bs_m.len() != t || self.f_hz.len() != t || self.pt_dbm.len() != t {
            return Err(Error::Shape("condition sequences differ in length".into()));
        }
        if t == 0 {
            return Err(Error::Shape("empty condition series".into()));
        }
        if self.d_m.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Domain("condition distances must be positive".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.h_bs_m) || !finite(&self.f_hz) || !finite(&self.pt_dbm) {
            return Err(Error::Domain("condition values must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub rsrp_dbm: Vec<f64>,
    pub sinr_db: Vec<f64>,
}

impl TargetSeries {
    pub fn len(&self) -> usize {
        self.rsrp_dbm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rsrp_dbm.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub user_id: usize,
    pub conditions: ConditionSeries,
    pub real: TargetSeries,
    pub theoretical_rsrp_dbm: Vec<f64>,
    pub serving_ids: Vec<usize>,
}

impl DatasetRecord {
    pub fn aoi(&self) -> Aoi {
        self.conditions.aoi
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// Deterministic RSRP from the condition series alone: zero environment
/// gain and isotropic antennas.
pub fn theoretical_rsrp(
    conditions: &ConditionSeries,
    env: &Environment,
    ue_height_m: f64,
) -> Result<Vec<f64>> {
    conditions.validate()?;
    let env = Environment {
        aoi: conditions.aoi,
        ..*env
    };
    (0..conditions.len())
        .map(|t| {
            let geom = LinkGeometry {
                d_m: conditions.d_m[t],
                ht_m: conditions.h_bs_m[t],
                hr_m: ue_height_m,
                fc_hz: conditions.f_hz[t],
            };
            Ok(conditions.pt_dbm[t] - path_loss_db(&env, &geom)?)
        })
        .collect()
}

/// One record per user: serving-cell RSRP, SINR, the serving-link condition
/// series and the physics label. Deterministic in `seed`.
pub fn synthesize_dataset(scenario: &Scenario, seed: u64) -> Result<Vec<DatasetRecord>> {
    let params = &scenario.params;
    let env = &params.env;
    let noise_w = dbm_to_watts(params.noise_dbm);
    let freqs: Vec<f64> = scenario.stations.iter().map(|b| b.fc_hz).collect();
    let n = scenario.stations.len();

    scenario
        .trajectories
        .iter()
        .enumerate()
        .map(|(user, path)| {
            let steps = path.len();
            let mut rng = substream(seed, 2 + 2 * user as u64);
            let gains: Vec<Vec<f64>> = (0..n)
                .map(|_| environment_gain_series(&params.shadowing, steps, &mut rng))
                .collect();

            let mut conditions = ConditionSeries {
                d_m: Vec::with_capacity(steps),
                h_bs_m: Vec::with_capacity(steps),
                f_hz: Vec::with_capacity(steps),
                pt_dbm: Vec::with_capacity(steps),
                aoi: env.aoi,
            };
            let mut real = TargetSeries {
                rsrp_dbm: Vec::with_capacity(steps),
                sinr_db: Vec::with_capacity(steps),
            };
            let mut serving_ids = Vec::with_capacity(steps);
            let mut pr_dbm = vec![0.0; n];
            for (t, &pos) in path.iter().enumerate() {
                for (i, bs) in scenario.stations.iter().enumerate() {
                    pr_dbm[i] = link_pr_dbm(env, bs, pos, params.ue_height_m, gains[i][t])?;
                }
                let (rsrp_dbm, serving) = serving_selection(&pr_dbm)?;
                let pr_w: Vec<f64> = pr_dbm.iter().map(|&p| dbm_to_watts(p)).collect();
                let interference = interference_power_w(&pr_w, &freqs, serving)?;
                let ratio = sinr(pr_w[serving], interference, noise_w)?;

                let bs = &scenario.stations[serving];
                conditions.d_m.push(link_distance_m(bs, pos, params.ue_height_m));
                conditions.h_bs_m.push(bs.height_m);
                conditions.f_hz.push(bs.fc_hz);
                conditions.pt_dbm.push(bs.pt_dbm);
                real.rsrp_dbm.push(rsrp_dbm);
                real.sinr_db.push(linear_to_db(ratio));
                serving_ids.push(bs.id);
            }
            let theoretical_rsrp_dbm = theoretical_rsrp(&conditions, env, params.ue_height_m)?;
            Ok(DatasetRecord {
                user_id: user,
                conditions,
                real,
                theoretical_rsrp_dbm,
                serving_ids,
            })
        })
        .collect()
}
