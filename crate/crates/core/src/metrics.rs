//! Accuracy and calibration metrics.
//!
//! All metrics average first over the points of one element and then over
//! elements. Probabilistic metrics read a Gaussian predictive given by a
//! pointwise mean and standard deviation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{normal_cdf, normal_pdf};

/// Default number of coverage intervals for the miscalibration area.
pub const DEFAULT_COVERAGE_STEPS: usize = 99;

/// One test element: ground truth, predictive mean and (optionally) std.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementPrediction {
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    /// Empty for deterministic predictions.
    pub std: Vec<f64>,
}

impl ElementPrediction {
    pub fn deterministic(truth: Vec<f64>, mean: Vec<f64>) -> Result<Self> {
        Self::new(truth, mean, Vec::new())
    }

    pub fn new(truth: Vec<f64>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if truth.len() != mean.len() || (!std.is_empty() && std.len() != truth.len()) {
            return Err(Error::shape(format!(
                "element has {} truth, {} mean and {} std values",
                truth.len(),
                mean.len(),
                std.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::shape("element has no points"));
        }
        Ok(ElementPrediction { truth, mean, std })
    }

    pub fn is_probabilistic(&self) -> bool {
        !self.std.is_empty()
    }

    fn std_checked(&self) -> Result<&[f64]> {
        if self.std.is_empty() {
            return Err(Error::config("probabilistic metric needs a predictive std"));
        }
        if let Some(s) = self.std.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::domain(format!("predictive std must be positive and finite, got {s}")));
        }
        Ok(&self.std)
    }

    /// `‖u − û‖ / ‖u‖`, or `None` for a zero-norm truth.
    pub fn rl2(&self) -> Option<f64> {
        let num: f64 = self.truth.iter().zip(&self.mean).map(|(u, m)| (u - m) * (u - m)).sum();
        let den: f64 = self.truth.iter().map(|u| u * u).sum();
        (den > 0.0).then(|| (num / den).sqrt())
    }

    pub fn nll(&self) -> Result<f64> {
        let std = self.std_checked()?;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let total: f64 = self
            .truth
            .iter()
            .zip(&self.mean)
            .zip(std)
            .map(|((u, m), s)| s.ln() + half_ln_2pi + (u - m) * (u - m) / (2.0 * s * s))
            .sum();
        Ok(total / self.truth.len() as f64)
    }

    /// Fraction of points inside the central interval of each level.
    pub fn coverage(&self, levels: &[f64]) -> Result<Vec<f64>> {
        let std = self.std_checked()?;
        let mut z: Vec<f64> = self.truth.iter().zip(&self.mean).zip(std).map(|((u, m), s)| (u - m).abs() / s).collect();
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        levels
            .iter()
            .map(|&p| {
                let t = coverage_threshold(p)?;
                Ok(z.partition_point(|&v| v <= t) as f64 / n)
            })
            .collect()
    }

    pub fn miscalibration_area(&self, levels: &[f64]) -> Result<f64> {
        let obs = self.coverage(levels)?;
        Ok(levels
            .windows(2)
            .zip(obs.windows(2))
            .map(|(p, o)| ((p[1] - p[0]) / 2.0 * (o[0] - p[0] + o[1] - p[1])).abs())
            .sum())
    }

    pub fn interval_score(&self, levels: &[f64]) -> Result<f64> {
        let std = self.std_checked()?;
        let mut total = 0.0;
        for &p in levels {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::domain(format!("interval level {p} outside (0, 1)")));
            }
            let zl = inverse_normal_cdf((1.0 - p) / 2.0)?;
            let zu = inverse_normal_cdf((1.0 + p) / 2.0)?;
            let penalty = 2.0 / (1.0 - p);
            for ((u, m), s) in self.truth.iter().zip(&self.mean).zip(std) {
                let lo = m + s * zl;
                let hi = m + s * zu;
                let mut score = hi - lo;
                if *u < lo {
                    score += penalty * (lo - u);
                }
                if *u > hi {
                    score += penalty * (u - hi);
                }
                total += score;
            }
        }
        Ok(total / (levels.len() * self.truth.len()) as f64)
    }
}

/// `Φ⁻¹((1 + p)/2)`, with the level-1 interval covering everything.
fn coverage_threshold(level: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::domain(format!("coverage level {level} outside [0, 1]")));
    }
    if level == 1.0 {
        Ok(f64::INFINITY)
    } else {
        inverse_normal_cdf((1.0 + level) / 2.0)
    }
}

/// `k/K` for `k = 0..=K`.
pub fn coverage_levels(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

/// `0.01, 0.02, …, 0.99`.
pub fn interval_levels() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

/// Mean relative L2 error over elements with non-zero truth.
///
/// Returns the mean and the indices of excluded zero-norm elements.
pub fn rl2(elements: &[ElementPrediction]) -> Result<(f64, Vec<usize>)> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for (i, e) in elements.iter().enumerate() {
        match e.rl2() {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => excluded.push(i),
        }
    }
    if used == 0 {
        return Err(Error::domain("every element has zero-norm ground truth"));
    }
    Ok((sum / used as f64, excluded))
}

fn mean_over<F: Fn(&ElementPrediction) -> Result<f64>>(elements: &[ElementPrediction], f: F) -> Result<f64> {
    if elements.is_empty() {
        return Err(Error::shape("no elements"));
    }
    let mut s = 0.0;
    for e in elements {
        s += f(e)?;
    }
    Ok(s / elements.len() as f64)
}

pub fn nll(elements: &[ElementPrediction]) -> Result<f64> {
    mean_over(elements, ElementPrediction::nll)
}

pub fn miscalibration_area(elements: &[ElementPrediction], levels: &[f64]) -> Result<f64> {
    mean_over(elements, |e| e.miscalibration_area(levels))
}

pub fn interval_score(elements: &[ElementPrediction], levels: &[f64]) -> Result<f64> {
    mean_over(elements, |e| e.interval_score(levels))
}

/// Standard normal quantile.
///
/// Acklam's rational approximation followed by one Newton step on
/// `Φ(x) − p`, using the complementary error function for `Φ`.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("inverse normal CDF needs 0 < p < 1, got {p}")));
    }
    if p > 0.5 {
        // 1 − p is exact here
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let pdf = normal_pdf(x);
    if pdf > 0.0 {
        x - (normal_cdf(x) - p) / pdf
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub expected: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementMetrics {
    pub index: usize,
    pub rl2: Option<f64>,
    pub nll: Option<f64>,
    pub ma: Option<f64>,
    pub is_score: Option<f64>,
}

/// Aggregates, per-element values and the mean calibration curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rl2: f64,
    pub nll: Option<f64>,
    pub ma: Option<f64>,
    pub is_score: Option<f64>,
    /// Elements left out of RL₂ because their truth has zero norm.
    pub rl2_excluded: Vec<usize>,
    pub elements: Vec<ElementMetrics>,
    pub calibration: Vec<CalibrationPoint>,
}

impl MetricReport {
    /// Probabilistic metrics are filled in only when every element has a std.
    pub fn compute(elements: &[ElementPrediction]) -> Result<Self> {
        let (rl2_mean, excluded) = rl2(elements)?;
        let probabilistic = elements.iter().all(ElementPrediction::is_probabilistic);
        let cov_levels = coverage_levels(DEFAULT_COVERAGE_STEPS);
        let is_levels = interval_levels();
        let mut rows = Vec::with_capacity(elements.len());
        let mut curve = vec![0.0; cov_levels.len()];
        for (i, e) in elements.iter().enumerate() {
            let mut row = ElementMetrics { index: i, rl2: e.rl2(), nll: None, ma: None, is_score: None };
            if probabilistic {
                row.nll = Some(e.nll()?);
                row.ma = Some(e.miscalibration_area(&cov_levels)?);
                row.is_score = Some(e.interval_score(&is_levels)?);
                for (c, o) in curve.iter_mut().zip(e.coverage(&cov_levels)?) {
                    *c += o;
                }
            }
            rows.push(row);
        }
        let n = elements.len() as f64;
        let mean = |f: fn(&ElementMetrics) -> Option<f64>| -> Option<f64> {
            probabilistic.then(|| rows.iter().map(|r| f(r).unwrap_or(0.0)).sum::<f64>() / n)
        };
        let calibration = if probabilistic {
            cov_levels.iter().zip(&curve).map(|(&expected, &o)| CalibrationPoint { expected, observed: o / n }).collect()
        } else {
            Vec::new()
        };
        Ok(MetricReport {
            rl2: rl2_mean,
            nll: mean(|r| r.nll),
            ma: mean(|r| r.ma),
            is_score: mean(|r| r.is_score),
            rl2_excluded: excluded,
            elements: rows,
            calibration,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-element table: `index,rl2,nll,ma,is`.
    pub fn write_elements_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "rl2", "nll", "ma", "is"]).map_err(csv_err)?;
        for r in &self.elements {
            w.serialize((r.index, r.rl2, r.nll, r.ma, r.is_score)).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Calibration curve: `expected,observed`.
    pub fn write_calibration_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["expected", "observed"]).map_err(csv_err)?;
        for p in &self.calibration {
            w.serialize((p.expected, p.observed)).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
