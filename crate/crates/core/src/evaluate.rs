//! Task-level evaluation: model outputs to original-scale predictions and a
//! [`MetricReport`].

use serde::{Deserialize, Serialize};

use crate::anomaly_adapter::{
    anomaly_score, sigmas, threshold_and_detect, token_discrepancy, tokens_to_points,
};
use crate::backbone::Model;
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::scalar::{to_f64, Scalar};
use crate::tasks_heads::{
    argmax, denormalize_rows, prepare_batch, BatchTarget, Sample, SampleTarget, TaskSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Seasonal period for MASE/OWA; those metrics are skipped when unset.
    pub seasonal_period: Option<usize>,
    /// Skip the discrepancy factor even when an anomaly adapter exists.
    pub reconstruction_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seasonal_period: None,
            reconstruction_only: false,
        }
    }
}

/// Original-scale outputs kept for CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictions {
    /// One row per (sample, channel). Imputation rows carry the mask.
    Series {
        pred: Vec<Vec<f64>>,
        truth: Vec<Vec<f64>>,
        mask: Option<Vec<Vec<f64>>>,
    },
    Classes {
        pred: Vec<usize>,
        truth: Vec<usize>,
    },
    Anomaly {
        scores: Vec<f64>,
        flags: Vec<u8>,
        labels: Option<Vec<u8>>,
        threshold: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Predictions,
}

fn rows_f64<T: Scalar>(rows: &[Vec<T>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| to_f64(v)).collect())
        .collect()
}

/// Runs the model over `samples` and returns original-scale head rows, or
/// logits for classification.
fn predict_rows<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let batch = prepare_batch(model.config(), &refs)?;
        let (y, _, _) = model.predict(&batch.patches, false)?;
        if matches!(batch.target, BatchTarget::Labels(_)) {
            out.extend(rows_f64(
                &y.data()
                    .chunks(y.shape()[1])
                    .map(<[T]>::to_vec)
                    .collect::<Vec<_>>(),
            ));
        } else {
            out.extend(rows_f64(&denormalize_rows(&y, &batch.stats)));
        }
    }
    Ok(out)
}

/// Per-point anomaly scores over consecutive windows, in window order.
///
/// Reconstruction error is the channel mean of squared original-scale error;
/// with an anomaly adapter it is reweighted by the per-window softmax of the
/// layer-averaged discrepancy.
pub fn anomaly_scores<T: Scalar>(
    model: &Model<T>,
    windows: &[Sample<T>],
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    let m = cfg.channels;
    let acfg = &cfg.adapters.anomaly;
    let sig = if opts.reconstruction_only {
        None
    } else {
        sigmas(model)
    };
    let mut scores = Vec::new();
    for chunk in windows.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let batch = prepare_batch(cfg, &refs)?;
        let (y, _, attn) = model.predict(&batch.patches, sig.is_some())?;
        let recon = denormalize_rows(&y, &batch.stats);
        let disc = match &sig {
            Some(s) => Some(token_discrepancy(
                &attn,
                s,
                acfg.squared_distance,
                acfg.symmetric_kl,
            )?),
            None => None,
        };
        for (k, sample) in chunk.iter().enumerate() {
            let l = sample.input[0].len();
            let mut err = vec![0.0; l];
            for c in 0..m {
                for (t, e) in err.iter_mut().enumerate() {
                    let d = to_f64(recon[k * m + c][t]) - to_f64(sample.input[c][t]);
                    *e += d * d / m as f64;
                }
            }
            let points = match &disc {
                Some(d) => {
                    let n = d[0].len();
                    let mut tok = vec![0.0; n];
                    for c in 0..m {
                        for (i, v) in tok.iter_mut().enumerate() {
                            *v += to_f64(d[k * m + c][i]) / m as f64;
                        }
                    }
                    Some(tokens_to_points(&tok, &cfg.patch)?)
                }
                None => None,
            };
            scores.extend(anomaly_score(&err, points.as_deref())?);
        }
    }
    Ok(scores)
}

/// Metrics for the test windows of `data` under the model's task.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &TaskData<T>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let task = model.config().task;
    if data.test.is_empty() {
        return Err(Error::Empty("no test samples"));
    }
    match task {
        TaskSpec::LongForecast { .. } | TaskSpec::ShortForecast { .. } => {
            let pred = predict_rows(model, &data.test, opts.batch_size)?;
            let mut truth = Vec::with_capacity(pred.len());
            let mut insample = Vec::with_capacity(pred.len());
            for s in &data.test {
                let SampleTarget::Forecast(fut) = &s.target else {
                    return Err(Error::invalid("forecast task needs forecast samples"));
                };
                truth.extend(rows_f64(fut));
                insample.extend(rows_f64(&s.input));
            }
            let report = forecast_report(&task, &pred, &truth, &insample, opts.seasonal_period)?;
            Ok(Evaluation {
                report,
                predictions: Predictions::Series {
                    pred,
                    truth,
                    mask: None,
                },
            })
        }
        TaskSpec::Imputation { .. } => {
            let pred = predict_rows(model, &data.test, opts.batch_size)?;
            let (mut truth, mut mask) = (Vec::new(), Vec::new());
            for s in &data.test {
                let SampleTarget::Impute(mk) = &s.target else {
                    return Err(Error::invalid("imputation task needs masked samples"));
                };
                truth.extend(rows_f64(&s.input));
                mask.extend(rows_f64(mk));
            }
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for ((pr, tr), mr) in pred.iter().zip(&truth).zip(&mask) {
                for ((&a, &b), &keep) in pr.iter().zip(tr).zip(mr) {
                    if keep == 0.0 {
                        p.push(a);
                        t.push(b);
                    }
                }
            }
            let mut report = MetricReport::new("imputation");
            report
                .set("mse", metrics::mse(&p, &t)?)
                .set("mae", metrics::mae(&p, &t)?);
            report.set("masked_points", p.len() as f64);
            Ok(Evaluation {
                report,
                predictions: Predictions::Series {
                    pred,
                    truth,
                    mask: Some(mask),
                },
            })
        }
        TaskSpec::Classification { .. } => {
            let logits = predict_rows(model, &data.test, opts.batch_size)?;
            let pred: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
            let truth: Vec<usize> = data
                .test
                .iter()
                .map(|s| match s.target {
                    SampleTarget::Class(k) => Ok(k),
                    _ => Err(Error::invalid("classification task needs labelled samples")),
                })
                .collect::<Result<_>>()?;
            let mut report = MetricReport::new("classification");
            report.set("accuracy", metrics::accuracy(&pred, &truth)?);
            Ok(Evaluation {
                report,
                predictions: Predictions::Classes { pred, truth },
            })
        }
        TaskSpec::Anomaly { anomaly_ratio } => {
            let scores = anomaly_scores(model, &data.test, opts)?;
            let mut reference = anomaly_scores(model, &data.train, opts)?;
            reference.extend_from_slice(&scores);
            let (threshold, flags) = threshold_and_detect(&scores, &reference, anomaly_ratio)?;
            let mut report = MetricReport::new("anomaly");
            report.set("threshold", threshold);
            report.set("flagged", flags.iter().filter(|&&f| f == 1).count() as f64);
            if let Some(labels) = &data.test_labels {
                let raw = metrics::precision_recall_f1(&flags, labels, false)?;
                let adj = metrics::precision_recall_f1(&flags, labels, true)?;
                report
                    .set("precision", raw.precision)
                    .set("recall", raw.recall)
                    .set("f1", raw.f1)
                    .set("pa_precision", adj.precision)
                    .set("pa_recall", adj.recall)
                    .set("pa_f1", adj.f1);
            }
            Ok(Evaluation {
                report,
                predictions: Predictions::Anomaly {
                    scores,
                    flags,
                    labels: data.test_labels.clone(),
                    threshold,
                },
            })
        }
    }
}

/// MSE/MAE/MAPE/ND over all points, plus the M4 family for short-term
/// forecasting (sMAPE always; MASE/OWA per series when a period is given,
/// averaged over series).
pub fn forecast_report(
    task: &TaskSpec,
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    insample: &[Vec<f64>],
    period: Option<usize>,
) -> Result<MetricReport> {
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    let (p, t) = (flat(pred), flat(truth));
    let short = matches!(task, TaskSpec::ShortForecast { .. });
    let mut report = MetricReport::new(if short { "m4" } else { "forecast" });
    report
        .set("mse", metrics::mse(&p, &t)?)
        .set("mae", metrics::mae(&p, &t)?);
    if let Ok(m) = metrics::mape(&p, &t) {
        report.set_measured("mape", m);
    }
    if let Ok(v) = metrics::nd(&p, &t) {
        report.set("nd", v);
    }
    if !short {
        return Ok(report);
    }
    if let Ok(m) = metrics::smape(&p, &t) {
        report.set_measured("smape", m);
    }
    let Some(m) = period else {
        return Ok(report);
    };
    // M4 aggregation: average per-series sMAPE and MASE, then OWA against the
    // averages of Naive2.
    let (mut s, mut q, mut s0, mut q0, mut used) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for ((pr, tr), ins) in pred.iter().zip(truth).zip(insample) {
        let Ok(base) = metrics::naive2(ins, tr.len(), m) else {
            continue;
        };
        let vals = (
            metrics::smape(pr, tr),
            metrics::mase(pr, tr, ins, m),
            metrics::smape(&base, tr),
            metrics::mase(&base, tr, ins, m),
        );
        if let (Ok(a), Ok(b), Ok(c), Ok(d)) = vals {
            s += a.value;
            q += b;
            s0 += c.value;
            q0 += d;
            used += 1;
        }
    }
    let skipped = pred.len() - used;
    if skipped > 0 {
        log::debug!("{skipped} series without a defined MASE/OWA");
        report.excluded.insert("mase".into(), skipped);
    }
    if used > 0 {
        let k = used as f64;
        report.set("mase", q / k);
        if s0 > 0.0 && q0 > 0.0 {
            report.set("owa", 0.5 * (s / s0 + q / q0));
        }
    }
    Ok(report)
}
