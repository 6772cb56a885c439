//! Evaluation metrics: MSE/MAE, the M4 family (sMAPE, MASE, OWA), MAPE, ND,
//! precision/recall/F1 with optional point adjustment, and accuracy.
//!
//! Points whose denominator vanishes are excluded and counted rather than clamped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anomaly_adapter::point_adjust;
use crate::error::{Error, Result};

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric over zero points"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// A metric value together with the number of points left out because their
/// denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub excluded: usize,
}

fn ratio_mean(
    pred: &[f64],
    truth: &[f64],
    scale: f64,
    denom: impl Fn(f64, f64) -> f64,
) -> Result<Measured> {
    check_pair(pred, truth)?;
    let (mut sum, mut used) = (0.0, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let d = denom(p, t);
        if d == 0.0 {
            continue;
        }
        sum += (p - t).abs() / d;
        used += 1;
    }
    let excluded = pred.len() - used;
    if excluded > 0 {
        log::debug!(
            "{excluded} of {} points excluded (zero denominator)",
            pred.len()
        );
    }
    if used == 0 {
        return Err(Error::Empty("every point has a zero denominator"));
    }
    Ok(Measured {
        value: scale * sum / used as f64,
        excluded,
    })
}

/// `(200/H) * sum |p - t| / (|p| + |t|)`, in `[0, 200]`.
pub fn smape(pred: &[f64], truth: &[f64]) -> Result<Measured> {
    ratio_mean(pred, truth, 200.0, |p, t| p.abs() + t.abs())
}

/// `(100/H) * sum |p - t| / |t|`.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Measured> {
    ratio_mean(pred, truth, 100.0, |_, t| t.abs())
}

/// `sum |p - t| / sum |t|`.
pub fn nd(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let denom: f64 = truth.iter().map(|t| t.abs()).sum();
    if denom == 0.0 {
        return Err(Error::invalid("ND is undefined for an all-zero truth"));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / denom)
}

/// In-sample seasonal-naive MAE `1/(n-m) * sum_{j>=m} |y_j - y_{j-m}|`.
pub fn seasonal_naive_scale(insample: &[f64], m: usize) -> Result<f64> {
    let m = m.max(1);
    if insample.len() <= m {
        return Err(Error::InsufficientData {
            required: m + 1,
            available: insample.len(),
        });
    }
    let n = insample.len();
    Ok((m..n)
        .map(|j| (insample[j] - insample[j - m]).abs())
        .sum::<f64>()
        / (n - m) as f64)
}

/// MAE of the forecast over the in-sample seasonal-naive MAE.
pub fn mase(pred: &[f64], truth: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    let scale = seasonal_naive_scale(insample, m)?;
    if scale == 0.0 {
        return Err(Error::invalid(
            "MASE is undefined for a seasonally constant in-sample series",
        ));
    }
    let h = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / h
        / scale)
}

fn acf(y: &[f64], lag: usize) -> f64 {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let denom: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    (lag..n)
        .map(|i| (y[i] - mean) * (y[i - lag] - mean))
        .sum::<f64>()
        / denom
}

/// M4 seasonality test: lag-`m` autocorrelation beyond the 90% band.
pub fn is_seasonal(y: &[f64], m: usize) -> bool {
    if m <= 1 || y.len() < 3 * m {
        return false;
    }
    let head: f64 = (1..m).map(|k| acf(y, k).powi(2)).sum();
    let limit = 1.645 * ((1.0 + 2.0 * head) / y.len() as f64).sqrt();
    acf(y, m).abs() > limit
}

/// Seasonal indices of a classical multiplicative decomposition (mean 1).
pub fn seasonal_indices(y: &[f64], m: usize) -> Vec<f64> {
    let n = y.len();
    // centered moving average; 2 x m when m is even
    let half = m / 2;
    let mut ratios = vec![Vec::new(); m];
    for i in half..n.saturating_sub(half) {
        let ma = if m % 2 == 1 {
            y[i - half..=i + half].iter().sum::<f64>() / m as f64
        } else {
            if i + half >= n {
                continue;
            }
            let inner: f64 = y[i - half + 1..i + half].iter().sum();
            (0.5 * y[i - half] + inner + 0.5 * y[i + half]) / m as f64
        };
        if ma != 0.0 {
            ratios[i % m].push(y[i] / ma);
        }
    }
    let mut si: Vec<f64> = ratios
        .iter()
        .map(|r| {
            if r.is_empty() {
                1.0
            } else {
                r.iter().sum::<f64>() / r.len() as f64
            }
        })
        .collect();
    let mean = si.iter().sum::<f64>() / m as f64;
    if mean != 0.0 {
        si.iter_mut().for_each(|s| *s /= mean);
    }
    si
}

/// Naive2: the last deseasonalized value repeated and reseasonalized when the
/// series passes the seasonality test, plain naive otherwise.
pub fn naive2(insample: &[f64], horizon: usize, m: usize) -> Result<Vec<f64>> {
    let Some(&last) = insample.last() else {
        return Err(Error::Empty("naive2 needs an in-sample series"));
    };
    if !is_seasonal(insample, m) {
        return Ok(vec![last; horizon]);
    }
    let si = seasonal_indices(insample, m);
    let n = insample.len();
    let level = last / si[(n - 1) % m];
    Ok((0..horizon).map(|h| level * si[(n + h) % m]).collect())
}

/// Overall weighted average of sMAPE and MASE relative to Naive2.
pub fn owa(pred: &[f64], truth: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    let base = naive2(insample, truth.len(), m)?;
    let s = smape(pred, truth)?.value;
    let s0 = smape(&base, truth)?.value;
    let q = mase(pred, truth, insample, m)?;
    let q0 = mase(&base, truth, insample, m)?;
    if s0 == 0.0 || q0 == 0.0 {
        return Err(Error::invalid("OWA is undefined when Naive2 is perfect"));
    }
    Ok(0.5 * (s / s0 + q / q0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary precision/recall/F1 (undefined ratios count as 0).
pub fn precision_recall_f1(pred: &[u8], truth: &[u8], adjust: bool) -> Result<Prf> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let adjusted;
    let pred = if adjust {
        adjusted = point_adjust(pred, truth)?;
        &adjusted[..]
    } else {
        pred
    };
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("accuracy over zero samples"));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Named metric values for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Which metric family applies, e.g. `forecast`, `m4`, `anomaly`.
    pub convention: String,
    pub values: BTreeMap<String, f64>,
    /// Points excluded per metric because of zero denominators.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn new(convention: impl Into<String>) -> Self {
        Self {
            convention: convention.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn set_measured(&mut self, name: &str, m: Measured) -> &mut Self {
        self.values.insert(name.to_string(), m.value);
        if m.excluded > 0 {
            self.excluded.insert(name.to_string(), m.excluded);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CSV with one row per labelled report (e.g. prediction length) and one
/// column per metric; missing values are left empty.
pub fn metrics_table_csv(row_name: &str, rows: &[(String, MetricReport)]) -> String {
    let mut cols: Vec<&String> = rows.iter().flat_map(|(_, r)| r.values.keys()).collect();
    cols.sort();
    cols.dedup();
    let mut out = String::from(row_name);
    for c in &cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(label);
        for c in &cols {
            out.push(',');
            if let Some(v) = r.values.get(*c) {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn basic_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[2.0], &[0.0]).unwrap(), 4.0);
        assert_eq!(mae(&[2.0], &[0.0]).unwrap(), 2.0);
        assert!(mse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn m4_examples() {
        assert!((smape(&[2.0], &[1.0]).unwrap().value - 200.0 / 3.0).abs() < 1e-12);
        let y: Vec<f64> = (0..48)
            .map(|i| 10.0 + (i as f64 * 0.7).sin() + 0.1 * i as f64)
            .collect();
        let t = [12.0, 13.0, 12.5];
        assert_eq!(smape(&t, &t).unwrap().value, 0.0);
        assert_eq!(mase(&t, &t, &y, 12).unwrap(), 0.0);
        assert_eq!(owa(&t, &t, &y, 12).unwrap(), 0.0);
        assert!(mase(&t, &t, &y[..12], 12).is_err());
    }

    #[test]
    fn seasonal_naive_has_unit_mase() {
        let y: Vec<f64> = (0..60)
            .map(|i| (i as f64 * 0.37).cos() * 3.0 + i as f64 * 0.01)
            .collect();
        let m = 7;
        let pred = &y[..y.len() - m];
        let truth = &y[m..];
        assert_eq!(mase(pred, truth, &y, m).unwrap(), 1.0);
    }

    #[test]
    fn mape_nd_examples() {
        assert_eq!(mape(&[110.0], &[100.0]).unwrap().value, 10.0);
        assert!((nd(&[110.0], &[100.0]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(nd(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(nd(&[1.0], &[0.0]).is_err());
        let m = mape(&[1.0, 2.0, 5.0], &[0.0, 1.0, 5.0]).unwrap();
        assert_eq!(m.excluded, 1);
        assert_eq!(m.value, 50.0);
    }

    #[test]
    fn naive2_reseasonalizes_a_seasonal_series() {
        let m = 4;
        let pattern = [0.8, 1.2, 1.1, 0.9];
        let y: Vec<f64> = (0..40).map(|i| 50.0 * pattern[i % m]).collect();
        assert!(is_seasonal(&y, m));
        let f = naive2(&y, 8, m).unwrap();
        for (h, v) in f.iter().enumerate() {
            assert!((v - 50.0 * pattern[(40 + h) % m]).abs() < 1e-9, "{f:?}");
        }
        let flat: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert_eq!(naive2(&flat, 3, 1).unwrap(), vec![39.0; 3]);
    }

    #[test]
    fn prf_examples() {
        let t = [0u8, 1, 1, 0];
        let p = precision_recall_f1(&t, &t, false).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = precision_recall_f1(&[0, 0, 0, 0], &t, false).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let truth = [0u8, 1, 1, 1, 0];
        let raw = [0u8, 0, 1, 0, 0];
        assert_eq!(precision_recall_f1(&raw, &truth, true).unwrap().f1, 1.0);
        assert!(precision_recall_f1(&raw, &truth, false).unwrap().f1 < 1.0);
    }

    #[test]
    fn report_json_and_table() {
        let mut r = MetricReport::new("forecast");
        r.set("mse", 0.5).set("mae", 0.25);
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut r2 = MetricReport::new("forecast");
        r2.set("mse", 1.0);
        let csv = metrics_table_csv("horizon", &[("24".into(), r), ("48".into(), r2)]);
        assert_eq!(csv, "horizon,mae,mse\n24,0.25,0.5\n48,,1\n");
    }

    proptest! {
        #[test]
        fn smape_bounded_and_mape_nd_scale_free(
            v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40),
            c in 0.01f64..100.0,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(s) = smape(&p, &t) {
                prop_assert!((0.0..=200.0 + 1e-9).contains(&s.value));
            }
            let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
            let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
            if let (Ok(a), Ok(b)) = (mape(&p, &t), mape(&ps, &ts)) {
                prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.max(1.0));
            }
            if let (Ok(a), Ok(b)) = (nd(&p, &t), nd(&ps, &ts)) {
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }

        #[test]
        fn point_adjust_never_hurts_recall_or_adds_false_positives(
            v in prop::collection::vec((0u8..2, 0u8..2), 1..60),
        ) {
            let (p, t): (Vec<u8>, Vec<u8>) = v.into_iter().unzip();
            let raw = precision_recall_f1(&p, &t, false).unwrap();
            let adj = precision_recall_f1(&p, &t, true).unwrap();
            prop_assert!(adj.recall >= raw.recall);
            let a = point_adjust(&p, &t).unwrap();
            let fp = |x: &[u8]| x.iter().zip(&t).filter(|(&q, &y)| q == 1 && y == 0).count();
            prop_assert_eq!(fp(&a), fp(&p));
        }
    }
}
