//! Closed-form path-loss models and link-budget arithmetic.
//!
//! Every public function takes SI units (meters, hertz, dBm). Each model
//! converts to the units its formula is written in (MHz and km for Hata,
//! GHz and m for WINNER II) internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light used by the free-space model, in m/s.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Lower edge of the Hata band (150 MHz).
pub const HATA_MIN_HZ: f64 = 150.0e6;
/// Upper edge of the Hata band (1500 MHz).
pub const HATA_MAX_HZ: f64 = 1500.0e6;
/// Lower edge of the WINNER II band (2 GHz).
pub const WINNER_MIN_HZ: f64 = 2.0e9;
/// Upper edge of the WINNER II band (6 GHz).
pub const WINNER_MAX_HZ: f64 = 6.0e9;

/// Rural end of the Hata environmental factor.
pub const HATA_K_RURAL: f64 = 35.94;
/// Desert end of the Hata environmental factor.
pub const HATA_K_DESERT: f64 = 40.94;

/// Area-of-interest class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aoi {
    Urban,
    Suburb,
    Rural,
}

impl Aoi {
    pub const ALL: [Aoi; 3] = [Aoi::Urban, Aoi::Suburb, Aoi::Rural];

    pub fn index(self) -> usize {
        match self {
            Aoi::Urban => 0,
            Aoi::Suburb => 1,
            Aoi::Rural => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aoi::Urban => "urban",
            Aoi::Suburb => "suburb",
            Aoi::Rural => "rural",
        }
    }
}

impl std::fmt::Display for Aoi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Aoi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "urban" => Ok(Aoi::Urban),
            "suburb" | "suburban" => Ok(Aoi::Suburb),
            "rural" => Ok(Aoi::Rural),
            other => Err(Error::Validation(format!(
                "unknown AOI `{other}` (expected urban, suburb or rural)"
            ))),
        }
    }
}

/// Hata urban sub-case, selecting the mobile-antenna correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitySize {
    Big,
    MidSmall,
}

impl std::str::FromStr for CitySize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "big" => Ok(CitySize::Big),
            "mid_small" | "midsmall" | "small" => Ok(CitySize::MidSmall),
            other => Err(Error::Validation(format!(
                "unknown city size `{other}` (expected big or mid_small)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub aoi: Aoi,
    pub city_size: CitySize,
    /// Hata environmental factor K in dB.
    pub hata_k: f64,
}

impl Environment {
    pub fn new(aoi: Aoi) -> Self {
        Self {
            aoi,
            city_size: CitySize::Big,
            hata_k: HATA_K_RURAL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(HATA_K_RURAL..=HATA_K_DESERT).contains(&self.hata_k) {
            return Err(Error::Validation(format!(
                "hata_k must lie in [{HATA_K_RURAL}, {HATA_K_DESERT}], got {}",
                self.hata_k
            )));
        }
        Ok(())
    }
}

/// Transmitter/receiver geometry in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub d_m: f64,
    pub ht_m: f64,
    pub hr_m: f64,
    pub fc_hz: f64,
}

impl LinkGeometry {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("distance", self.d_m),
            ("transmitter height", self.ht_m),
            ("receiver height", self.hr_m),
            ("carrier frequency", self.fc_hz),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub pt_dbm: f64,
    pub gt_dbi: f64,
    pub gr_dbi: f64,
}

impl LinkBudget {
    /// Budget with isotropic antennas.
    pub fn isotropic(pt_dbm: f64) -> Self {
        Self {
            pt_dbm,
            gt_dbi: 0.0,
            gr_dbi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pt_dbm.is_finite() && self.gt_dbi.is_finite() && self.gr_dbi.is_finite()) {
            return Err(Error::Validation("link budget fields must be finite".into()));
        }
        if !(0.0..=80.0).contains(&self.pt_dbm) {
            return Err(Error::Validation(format!(
                "transmit power must lie in [0, 80] dBm, got {}",
                self.pt_dbm
            )));
        }
        Ok(())
    }
}

/// Which closed-form model a frequency dispatches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathLossModel {
    FreeSpace,
    Hata,
    Winner2,
}

impl PathLossModel {
    pub fn for_frequency(fc_hz: f64) -> Self {
        if (HATA_MIN_HZ..=HATA_MAX_HZ).contains(&fc_hz) {
            PathLossModel::Hata
        } else if (WINNER_MIN_HZ..=WINNER_MAX_HZ).contains(&fc_hz) {
            PathLossModel::Winner2
        } else {
            PathLossModel::FreeSpace
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PathLossModel::FreeSpace => "free-space",
            PathLossModel::Hata => "hata",
            PathLossModel::Winner2 => "winner2",
        }
    }
}

/// Free-space path loss: 20 log10(d) + 20 log10(f) + 20 log10(4π/c).
pub fn fspl_db(geom: &LinkGeometry) -> Result<f64> {
    if !(geom.d_m.is_finite() && geom.d_m > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {}", geom.d_m)));
    }
    if !(geom.fc_hz.is_finite() && geom.fc_hz > 0.0) {
        return Err(Error::Domain(format!(
            "carrier frequency must be positive, got {}",
            geom.fc_hz
        )));
    }
    let k = 20.0 * (4.0 * std::f64::consts::PI / SPEED_OF_LIGHT).log10();
    Ok(20.0 * geom.d_m.log10() + 20.0 * geom.fc_hz.log10() + k)
}

/// Mobile antenna height correction α(h_r) of the Hata urban formula.
/// `f_mhz` in MHz, `hr_m` in meters.
pub fn hata_mobile_correction(city: CitySize, f_mhz: f64, hr_m: f64) -> f64 {
    match city {
        CitySize::Big => 3.2 * (11.75 * hr_m).log10().powi(2) - 4.97,
        CitySize::MidSmall => {
            let lf = f_mhz.log10();
            (1.1 * lf - 0.7) * hr_m - (1.56 * lf - 0.8)
        }
    }
}

/// Okumura–Hata path loss for 150–1500 MHz.
pub fn hata_pl_db(env: &Environment, geom: &LinkGeometry) -> Result<f64> {
    geom.validate()?;
    if !(HATA_MIN_HZ..=HATA_MAX_HZ).contains(&geom.fc_hz) {
        return Err(Error::Range {
            model: "Hata",
            band: "150-1500 MHz",
            value: format!("{} MHz", geom.fc_hz / 1e6),
        });
    }
    let f = geom.fc_hz / 1e6;
    let d = geom.d_m / 1e3;
    let lf = f.log10();
    let lht = geom.ht_m.log10();
    let urban = 69.55 + 26.16 * lf - 13.82 * lht - hata_mobile_correction(env.city_size, f, geom.hr_m)
        + (44.9 - 6.55 * lht) * d.log10();
    Ok(match env.aoi {
        Aoi::Urban => urban,
        Aoi::Suburb => urban - 2.0 * (f / 20.0).log10().powi(2) - 5.4,
        Aoi::Rural => urban - 4.78 * lf * lf + 18.33 * lf - env.hata_k,
    })
}

/// WINNER II path loss for 2–6 GHz. The distance is the 3D
/// transmitter–receiver distance.
pub fn winner2_pl_db(env: &Environment, geom: &LinkGeometry) -> Result<f64> {
    geom.validate()?;
    if !(WINNER_MIN_HZ..=WINNER_MAX_HZ).contains(&geom.fc_hz) {
        return Err(Error::Range {
            model: "WINNER II",
            band: "2-6 GHz",
            value: format!("{} GHz", geom.fc_hz / 1e9),
        });
    }
    let (offset, height_slope, freq_slope) = match env.aoi {
        Aoi::Urban => (9.45, 17.3, 2.7),
        Aoi::Suburb => (11.65, 16.2, 3.8),
        Aoi::Rural => (10.5, 18.5, 1.5),
    };
    let f_ghz = geom.fc_hz / 1e9;
    Ok(40.0 * geom.d_m.log10() + offset
        - height_slope * geom.ht_m.log10()
        - height_slope * geom.hr_m.log10()
        + freq_slope * (f_ghz / 5.0).log10())
}

/// Path loss with model selection by carrier frequency. Frequencies outside
/// both measurement bands fall back to free space.
pub fn path_loss_db(env: &Environment, geom: &LinkGeometry) -> Result<f64> {
    geom.validate()?;
    match PathLossModel::for_frequency(geom.fc_hz) {
        PathLossModel::Hata => hata_pl_db(env, geom),
        PathLossModel::Winner2 => winner2_pl_db(env, geom),
        PathLossModel::FreeSpace => {
            log::warn!(
                "{} MHz is outside the Hata and WINNER II bands; using free-space loss",
                geom.fc_hz / 1e6
            );
            fspl_db(geom)
        }
    }
}

/// PR = PT + G_r + G_t − PL.
pub fn received_power_dbm(budget: &LinkBudget, pl_db: f64) -> f64 {
    budget.pt_dbm + budget.gr_dbi + budget.gt_dbi - pl_db
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}
