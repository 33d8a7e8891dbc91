//! Distribution and error metrics for generated-vs-real series.
//!
//! JSD and TV compare histograms built over the pooled range of both
//! samples; NRMSE pools every (generated, real) pair and normalizes by the
//! range of the real values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::TargetSeries;

pub const DEFAULT_BINS: usize = 50;

/// Normalized bin masses of two samples over shared edges.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPair {
    pub edges: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl HistogramPair {
    pub fn new(a: &[f64], b: &[f64], bins: usize) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Validation("histogram needs two non-empty samples".into()));
        }
        if bins == 0 {
            return Err(Error::Validation("histogram needs at least one bin".into()));
        }
        if a.iter().chain(b).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("histogram input contains non-finite values".into()));
        }
        let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
        let width = hi - lo;
        let edges = (0..=bins).map(|i| lo + width * i as f64 / bins as f64).collect();
        let mass = |xs: &[f64]| {
            let mut h = vec![0.0; bins];
            for &x in xs {
                let i = if width > 0.0 {
                    (((x - lo) / width) * bins as f64) as usize
                } else {
                    0
                };
                h[i.min(bins - 1)] += 1.0;
            }
            let n = xs.len() as f64;
            h.iter_mut().for_each(|v| *v /= n);
            h
        };
        Ok(Self {
            edges,
            p: mass(a),
            q: mass(b),
        })
    }

    pub fn bins(&self) -> usize {
        self.p.len()
    }

    /// Jensen–Shannon divergence in bits.
    pub fn jsd(&self) -> f64 {
        let kl = |x: &[f64], m: &[f64]| -> f64 {
            x.iter()
                .zip(m)
                .filter(|(xi, _)| **xi > 0.0)
                .map(|(xi, mi)| xi * (xi / mi).log2())
                .sum()
        };
        let m: Vec<f64> = self.p.iter().zip(&self.q).map(|(a, b)| 0.5 * (a + b)).collect();
        (0.5 * kl(&self.p, &m) + 0.5 * kl(&self.q, &m)).clamp(0.0, 1.0)
    }

    pub fn tv(&self) -> f64 {
        (0.5 * self.p.iter().zip(&self.q).map(|(a, b)| (a - b).abs()).sum::<f64>()).clamp(0.0, 1.0)
    }
}

pub fn jsd(real: &[f64], gen: &[f64], bins: usize) -> Result<f64> {
    Ok(HistogramPair::new(real, gen, bins)?.jsd())
}

pub fn tv(real: &[f64], gen: &[f64], bins: usize) -> Result<f64> {
    Ok(HistogramPair::new(real, gen, bins)?.tv())
}

/// RMSE of `gen` against `real`, divided by the range of `real`.
pub fn nrmse(real: &[f64], gen: &[f64]) -> Result<f64> {
    if real.is_empty() || real.len() != gen.len() {
        return Err(Error::Validation(format!(
            "nrmse needs equal non-empty lengths, got {} and {}",
            real.len(),
            gen.len()
        )));
    }
    let lo = real.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Validation("nrmse is undefined for constant real data".into()));
    }
    let mse = real.iter().zip(gen).map(|(r, g)| (g - r) * (g - r)).sum::<f64>() / real.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribute {
    #[serde(rename = "RSRP")]
    Rsrp,
    #[serde(rename = "SINR")]
    Sinr,
}

impl Attribute {
    pub const ALL: [Attribute; 2] = [Attribute::Rsrp, Attribute::Sinr];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Rsrp => "RSRP",
            Attribute::Sinr => "SINR",
        }
    }

    pub fn of(self, s: &TargetSeries) -> &[f64] {
        match self {
            Attribute::Rsrp => &s.rsrp_dbm,
            Attribute::Sinr => &s.sinr_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub attribute: Attribute,
    pub jsd: f64,
    pub tv: f64,
    pub nrmse: f64,
    pub n_sequences: usize,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, attribute: Attribute) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.attribute == attribute)
    }

    pub fn nrmse(&self, attribute: Attribute) -> f64 {
        self.row(attribute).map_or(f64::NAN, |r| r.nrmse)
    }

    /// Fixed-width table, one line per attribute.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<6} {:>10} {:>10} {:>10} {:>6} {:>5}\n", "attr", "JSD", "TV", "NRMSE", "seqs", "bins");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>6} {:>5}\n",
                r.attribute.name(),
                r.jsd,
                r.tv,
                r.nrmse,
                r.n_sequences,
                r.bins
            ));
        }
        out
    }
}

/// Per-step average of several generated series.
pub fn ensemble_mean(samples: &[TargetSeries]) -> Result<TargetSeries> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("ensemble needs at least one sample".into()))?;
    let len = first.len();
    if samples.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("ensemble members differ in length".into()));
    }
    let n = samples.len() as f64;
    let avg = |a: Attribute| (0..len).map(|t| samples.iter().map(|s| a.of(s)[t]).sum::<f64>() / n).collect();
    Ok(TargetSeries {
        rsrp_dbm: avg(Attribute::Rsrp),
        sinr_db: avg(Attribute::Sinr),
    })
}

/// Scores generated sequences against the real ones.
///
/// `generated[i]` holds the samples drawn for `real[i]`. JSD and TV compare
/// the pooled real values with every generated value; NRMSE compares each
/// real value with the per-step mean of its samples.
pub fn evaluate_series(real: &[TargetSeries], generated: &[Vec<TargetSeries>], bins: usize) -> Result<MetricReport> {
    if real.is_empty() || real.len() != generated.len() {
        return Err(Error::Validation(format!(
            "need generated samples for each of {} real sequences, got {}",
            real.len(),
            generated.len()
        )));
    }
    let means = generated.iter().map(|g| ensemble_mean(g)).collect::<Result<Vec<_>>>()?;
    for (r, m) in real.iter().zip(&means) {
        if r.len() != m.len() {
            return Err(Error::Shape("generated and real sequence lengths differ".into()));
        }
    }
    let rows = Attribute::ALL
        .iter()
        .map(|&a| {
            let pooled_real: Vec<f64> = real.iter().flat_map(|s| a.of(s).iter().copied()).collect();
            let pooled_gen: Vec<f64> = generated
                .iter()
                .flat_map(|g| g.iter().flat_map(|s| a.of(s).iter().copied()))
                .collect();
            let pooled_mean: Vec<f64> = means.iter().flat_map(|s| a.of(s).iter().copied()).collect();
            let hist = HistogramPair::new(&pooled_real, &pooled_gen, bins)?;
            Ok(MetricRow {
                attribute: a,
                jsd: hist.jsd(),
                tv: hist.tv(),
                nrmse: nrmse(&pooled_real, &pooled_mean)?,
                n_sequences: real.len(),
                bins,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_samples_score_zero() {
        let a: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        assert_eq!(jsd(&a, &a, 50).unwrap(), 0.0);
        assert_eq!(tv(&a, &a, 50).unwrap(), 0.0);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_supports_score_one() {
        let a = vec![0.0, 0.1, 0.2];
        let b = vec![5.0, 5.5];
        assert_eq!(jsd(&a, &b, 50).unwrap(), 1.0);
        assert_eq!(tv(&a, &b, 50).unwrap(), 1.0);
    }

    #[test]
    fn tv_of_half_overlap() {
        let h = HistogramPair {
            edges: vec![0.0, 1.0, 2.0],
            p: vec![0.5, 0.5],
            q: vec![1.0, 0.0],
        };
        assert_eq!(h.tv(), 0.5);
    }

    #[test]
    fn jsd_matches_direct_summation() {
        let a: Vec<f64> = (0..400).map(|i| i as f64 / 400.0).collect();
        let b: Vec<f64> = (0..300).map(|i| 0.5 + i as f64 / 300.0).collect();
        let h = HistogramPair::new(&a, &b, 20).unwrap();
        // Separate accumulation over the mixture, written out term by term.
        let mut total = 0.0;
        for i in 0..20 {
            let m = (h.p[i] + h.q[i]) / 2.0;
            if h.p[i] > 0.0 {
                total += 0.5 * h.p[i] * (h.p[i].ln() - m.ln()) / std::f64::consts::LN_2;
            }
            if h.q[i] > 0.0 {
                total += 0.5 * h.q[i] * (h.q[i].ln() - m.ln()) / std::f64::consts::LN_2;
            }
        }
        assert!((h.jsd() - total).abs() <= 1e-10);
        assert!(h.jsd() > 0.0 && h.jsd() < 1.0);
    }

    #[test]
    fn nrmse_hand_value() {
        assert!((nrmse(&[0.0, 10.0], &[1.0, 11.0]).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn nrmse_errors() {
        assert!(nrmse(&[1.0, 1.0], &[0.0, 2.0]).is_err());
        assert!(nrmse(&[1.0], &[0.0, 2.0]).is_err());
        assert!(jsd(&[], &[1.0], 50).is_err());
    }

    #[test]
    fn masses_sum_to_one() {
        let h = HistogramPair::new(&[1.0, 2.0, 2.5, 9.0], &[3.0, 3.0, -1.0], 50).unwrap();
        assert!((h.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((h.q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(h.edges.len(), 51);
    }

    #[test]
    fn constant_pool_is_one_bin() {
        let h = HistogramPair::new(&[2.0, 2.0], &[2.0], 10).unwrap();
        assert_eq!(h.jsd(), 0.0);
        assert_eq!(h.tv(), 0.0);
    }

    #[test]
    fn report_on_perfect_generation() {
        let s = TargetSeries {
            rsrp_dbm: vec![-80.0, -90.0, -85.0],
            sinr_db: vec![3.0, 10.0, -2.0],
        };
        let rep = evaluate_series(&[s.clone()], &[vec![s.clone(), s]], 50).unwrap();
        for row in &rep.rows {
            assert_eq!((row.jsd, row.tv, row.nrmse), (0.0, 0.0, 0.0));
            assert_eq!(row.n_sequences, 1);
        }
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric(a in prop::collection::vec(-50.0f64..50.0, 1..60),
                                 b in prop::collection::vec(-50.0f64..50.0, 1..60)) {
            let j = jsd(&a, &b, 50).unwrap();
            let t = tv(&a, &b, 50).unwrap();
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert!((j - jsd(&b, &a, 50).unwrap()).abs() < 1e-12);
            prop_assert!((t - tv(&b, &a, 50).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn nrmse_affine_invariant(pairs in prop::collection::vec((-100.0f64..0.0, -100.0f64..0.0), 2..40),
                                  scale in 0.1f64..10.0, shift in -50.0f64..50.0) {
            let real: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let gen: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(real.iter().any(|r| (r - real[0]).abs() > 1e-3));
            let base = nrmse(&real, &gen).unwrap();
            let tr = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
            let moved = nrmse(&tr(&real), &tr(&gen)).unwrap();
            prop_assert!((base - moved).abs() <= 1e-10 * base.max(1.0));
        }
    }
}
