//! Dataset ingestion (CSV and synthetic), chronological splits and windowing
//! into task samples.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::preprocessing::make_imputation_mask;
use crate::scalar::{lit, Scalar};
use crate::tasks_heads::{Sample, SampleTarget, TaskSpec};
use crate::training::few_shot_subset;

/// A multivariate series stored channel-major, `values[c][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub columns: Vec<String>,
    pub timestamps: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Per-point anomaly labels, when known.
    #[serde(default)]
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel-major copy of the time range `r`.
    pub fn slice(&self, r: Range<usize>) -> Vec<Vec<f64>> {
        self.values.iter().map(|c| c[r.clone()].to_vec()).collect()
    }
}

/// Fixed-length labelled samples, `samples[i][c][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub samples: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Series(TimeSeries),
    Labeled(LabeledSet),
}

/// Reads an ETT-style CSV: a header row, the timestamp in the first column and
/// one numeric column per channel. `label_column` (by header name) is split
/// off as per-point anomaly labels.
///
/// Cell coordinates in errors are 1-based: data row (header excluded) and file
/// column (timestamp is column 1).
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<TimeSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::CsvParse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 2 {
        return Err(Error::CsvParse {
            line: 1,
            message: "need a timestamp column and at least one value column".into(),
        });
    }
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("label column {name:?} not in header")))?,
        ),
        None => None,
    };
    let value_idx: Vec<usize> = (1..headers.len())
        .filter(|&i| Some(i) != label_idx)
        .collect();
    let mut values = vec![Vec::new(); value_idx.len()];
    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::CsvParse {
            line: e.position().map_or(line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::CsvParse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let parse = |col: usize| -> Result<f64> {
            let cell = &rec[col];
            let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                line,
                message: format!(
                    "column {} ({}) is not numeric: {cell:?}",
                    col + 1,
                    headers[col]
                ),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteCell {
                    row: row + 1,
                    col: col + 1,
                });
            }
            Ok(v)
        };
        for (c, &col) in value_idx.iter().enumerate() {
            values[c].push(parse(col)?);
        }
        if let Some(li) = label_idx {
            labels.push(u8::from(parse(li)? != 0.0));
        }
        timestamps.push(rec[0].to_string());
    }
    if timestamps.is_empty() {
        return Err(Error::Empty("CSV has no data rows"));
    }
    Ok(TimeSeries {
        columns: value_idx.iter().map(|&i| headers[i].clone()).collect(),
        timestamps,
        values,
        labels: label_idx.map(|_| labels),
    })
}

/// Writes a series in the layout [`load_csv`] reads.
pub fn write_csv(ts: &TimeSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(ts.columns.iter().cloned());
    if ts.labels.is_some() {
        header.push("label".into());
    }
    let io = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(io)?;
    for t in 0..ts.len() {
        let mut rec = vec![ts.timestamps[t].clone()];
        rec.extend(ts.values.iter().map(|c| format!("{}", c[t])));
        if let Some(l) = &ts.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn default_channels() -> usize {
    1
}

/// Synthetic stand-ins for benchmark data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// `sum_k a_k cos(2 pi t / p_k + phase_c)` plus noise.
    SinusoidMix {
        length: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        periods: Vec<f64>,
        #[serde(default)]
        amplitudes: Vec<f64>,
        #[serde(default)]
        noise: f64,
    },
    /// Linear trend plus a sinusoidal season.
    TrendPlusSeason {
        length: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        period: f64,
        slope: f64,
        amplitude: f64,
        #[serde(default)]
        noise: f64,
    },
    /// Periodic signal with isolated spikes; returns per-point labels.
    PeriodicWithAnomalies {
        length: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        period: f64,
        anomaly_ratio: f64,
        spike: f64,
        #[serde(default)]
        noise: f64,
    },
    /// Sine (class 0) versus square (class 1) waves with random period and phase.
    TwoClassWaveforms {
        samples: usize,
        length: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default)]
        noise: f64,
    },
}

fn timestamps(n: usize) -> Vec<String> {
    (0..n).map(|t| t.to_string()).collect()
}

fn columns(m: usize) -> Vec<String> {
    (0..m).map(|c| format!("ch{c}")).collect()
}

fn noise_source(noise: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))
}

/// Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    match spec {
        SyntheticSpec::SinusoidMix {
            length,
            channels,
            periods,
            amplitudes,
            noise,
        } => {
            if periods.is_empty() || periods.iter().any(|&p| p <= 0.0) {
                return Err(Error::invalid("sinusoid_mix needs positive periods"));
            }
            let nz = noise_source(*noise)?;
            let values = (0..*channels)
                .map(|c| {
                    let phase = tau * c as f64 / *channels as f64;
                    (0..*length)
                        .map(|t| {
                            let clean: f64 = periods
                                .iter()
                                .enumerate()
                                .map(|(k, &p)| {
                                    let a = amplitudes.get(k).copied().unwrap_or(1.0);
                                    a * (tau * t as f64 / p + phase).cos()
                                })
                                .sum();
                            if *noise > 0.0 {
                                clean + nz.sample(&mut rng)
                            } else {
                                clean
                            }
                        })
                        .collect()
                })
                .collect();
            Ok(Dataset::Series(TimeSeries {
                columns: columns(*channels),
                timestamps: timestamps(*length),
                values,
                labels: None,
            }))
        }
        SyntheticSpec::TrendPlusSeason {
            length,
            channels,
            period,
            slope,
            amplitude,
            noise,
        } => {
            let nz = noise_source(*noise)?;
            let values = (0..*channels)
                .map(|c| {
                    let phase = tau * c as f64 / *channels as f64;
                    (0..*length)
                        .map(|t| {
                            let t = t as f64;
                            slope * t
                                + amplitude * (tau * t / period + phase).sin()
                                + nz.sample(&mut rng)
                        })
                        .collect()
                })
                .collect();
            Ok(Dataset::Series(TimeSeries {
                columns: columns(*channels),
                timestamps: timestamps(*length),
                values,
                labels: None,
            }))
        }
        SyntheticSpec::PeriodicWithAnomalies {
            length,
            channels,
            period,
            anomaly_ratio,
            spike,
            noise,
        } => {
            if !(0.0..1.0).contains(anomaly_ratio) {
                return Err(Error::invalid(format!(
                    "anomaly ratio {anomaly_ratio} outside [0, 1)"
                )));
            }
            let nz = noise_source(*noise)?;
            let mut values: Vec<Vec<f64>> = (0..*channels)
                .map(|c| {
                    let phase = tau * c as f64 / *channels as f64;
                    (0..*length)
                        .map(|t| (tau * t as f64 / period + phase).sin() + nz.sample(&mut rng))
                        .collect()
                })
                .collect();
            let count = (anomaly_ratio * *length as f64).round() as usize;
            let at = rand::seq::index::sample(&mut rng, *length, count).into_vec();
            let mut labels = vec![0u8; *length];
            for t in at {
                labels[t] = 1;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for ch in values.iter_mut() {
                    ch[t] += sign * spike;
                }
            }
            Ok(Dataset::Series(TimeSeries {
                columns: columns(*channels),
                timestamps: timestamps(*length),
                values,
                labels: Some(labels),
            }))
        }
        SyntheticSpec::TwoClassWaveforms {
            samples,
            length,
            channels,
            noise,
        } => {
            let nz = noise_source(*noise)?;
            let mut out = Vec::with_capacity(*samples);
            let mut labels = Vec::with_capacity(*samples);
            for i in 0..*samples {
                let class = i % 2;
                let period = rng.random_range(12.0..36.0);
                let phase = rng.random_range(0.0..tau);
                let amp = rng.random_range(0.5..2.0);
                let sample = (0..*channels)
                    .map(|_| {
                        (0..*length)
                            .map(|t| {
                                let s = (tau * t as f64 / period + phase).sin();
                                let v = if class == 0 { s } else { s.signum() };
                                amp * v + nz.sample(&mut rng)
                            })
                            .collect()
                    })
                    .collect();
                out.push(sample);
                labels.push(class);
            }
            Ok(Dataset::Labeled(LabeledSet {
                samples: out,
                labels,
                num_classes: 2,
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<String>,
    },
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const ETT: SplitFractions = SplitFractions {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const STANDARD: SplitFractions = SplitFractions {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.train > 0.0 && self.val >= 0.0 && self.test > 0.0;
        if !ok || (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions {self:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }

    /// Chronological `[train | val | test]` index ranges over `len` points.
    pub fn ranges(&self, len: usize) -> Result<Splits> {
        self.validate()?;
        let train_end = (self.train * len as f64).floor() as usize;
        let val_end = train_end + (self.val * len as f64).floor() as usize;
        Ok(Splits {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub source: DataSource,
    /// Expected channel count, checked after loading.
    #[serde(default)]
    pub channels: Option<usize>,
    /// Sampling frequency tag such as `h`, `15min`.
    #[serde(default)]
    pub frequency: Option<String>,
    /// Seasonal period for MASE/OWA; 1 means non-seasonal.
    #[serde(default)]
    pub seasonal_period: Option<usize>,
    #[serde(default)]
    pub splits: Option<SplitFractions>,
}

impl DatasetDescriptor {
    pub fn synthetic(name: impl Into<String>, spec: SyntheticSpec, seed: u64) -> Self {
        Self {
            name: name.into(),
            source: DataSource::Synthetic { spec, seed },
            channels: None,
            frequency: None,
            seasonal_period: None,
            splits: None,
        }
    }

    /// 0.6/0.2/0.2 for ETT-style names, 0.7/0.1/0.2 otherwise, unless overridden.
    pub fn split_fractions(&self) -> SplitFractions {
        self.splits.unwrap_or_else(|| {
            if self.name.to_ascii_lowercase().starts_with("ett") {
                SplitFractions::ETT
            } else {
                SplitFractions::STANDARD
            }
        })
    }

    /// Relative CSV paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        let ds = match &self.source {
            DataSource::Csv { path, label_column } => {
                let p = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                Dataset::Series(load_csv(&p, label_column.as_deref())?)
            }
            DataSource::Synthetic { spec, seed } => generate_synthetic(spec, *seed)?,
        };
        let m = match &ds {
            Dataset::Series(ts) => ts.channels(),
            Dataset::Labeled(ls) => ls.samples.first().map_or(0, Vec::len),
        };
        if let Some(want) = self.channels {
            if want != m {
                return Err(Error::LengthMismatch {
                    expected: want,
                    actual: m,
                });
            }
        }
        Ok(ds)
    }
}

/// Samples for one task, ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct TaskData<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
    /// Per-point labels of the test windows in order (anomaly detection).
    pub test_labels: Option<Vec<u8>>,
    /// Timesteps of the training split actually used (after any few-shot cut).
    pub train_len: usize,
}

/// How windows are cut from a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowOptions {
    /// Stride between training windows.
    pub stride: usize,
    /// Stride between validation/test windows.
    pub eval_stride: usize,
    /// Few-shot fraction of the training split.
    pub fraction: Option<f64>,
    /// Seed for imputation masks.
    pub seed: u64,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            eval_stride: 1,
            fraction: None,
            seed: 0,
        }
    }
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| lit(x)).collect()
}

/// Context+target windows over `seg[c][..]` starting every `stride` points.
pub fn forecast_windows<T: Scalar>(
    seg: &[Vec<f64>],
    context: usize,
    horizon: usize,
    stride: usize,
) -> Vec<Sample<T>> {
    let len = seg.first().map_or(0, Vec::len);
    let span = context + horizon;
    if len < span || stride == 0 {
        return Vec::new();
    }
    (0..=len - span)
        .step_by(stride)
        .map(|s| Sample {
            input: seg.iter().map(|c| cast(&c[s..s + context])).collect(),
            target: SampleTarget::Forecast(
                seg.iter()
                    .map(|c| cast(&c[s + context..s + span]))
                    .collect(),
            ),
        })
        .collect()
}

fn imputation_windows<T: Scalar>(
    seg: &[Vec<f64>],
    context: usize,
    stride: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    let len = seg.first().map_or(0, Vec::len);
    if len < context || stride == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (w, s) in (0..=len - context).step_by(stride).enumerate() {
        let mut masks = Vec::with_capacity(seg.len());
        for c in 0..seg.len() {
            let stream = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((w * seg.len() + c) as u64);
            masks.push(make_imputation_mask::<T>(context, ratio, stream)?);
        }
        out.push(Sample {
            input: seg.iter().map(|c| cast(&c[s..s + context])).collect(),
            target: SampleTarget::Impute(masks),
        });
    }
    Ok(out)
}

/// Non-overlapping reconstruction windows; the tail shorter than `context` is dropped.
pub fn reconstruction_windows<T: Scalar>(
    seg: &[Vec<f64>],
    context: usize,
    stride: usize,
) -> Vec<Sample<T>> {
    let len = seg.first().map_or(0, Vec::len);
    if len < context || stride == 0 {
        return Vec::new();
    }
    (0..=len - context)
        .step_by(stride)
        .map(|s| Sample {
            input: seg.iter().map(|c| cast(&c[s..s + context])).collect(),
            target: SampleTarget::Reconstruct,
        })
        .collect()
}

fn with_context(r: &Range<usize>, context: usize) -> Range<usize> {
    r.start.saturating_sub(context)..r.end
}

/// Cuts a dataset into train/val/test samples for the task in `cfg`.
///
/// Validation and test segments borrow `context` points from the preceding
/// split so their first window starts right at the boundary. A few-shot
/// fraction keeps the end of the training split.
pub fn build_task_data<T: Scalar>(
    ds: &Dataset,
    fractions: SplitFractions,
    cfg: &ModelConfig,
    opts: &WindowOptions,
) -> Result<TaskData<T>> {
    let l = cfg.patch.context_len;
    match (ds, &cfg.task) {
        (Dataset::Series(ts), task) => {
            if ts.channels() != cfg.channels {
                return Err(Error::LengthMismatch {
                    expected: cfg.channels,
                    actual: ts.channels(),
                });
            }
            let sp = fractions.ranges(ts.len())?;
            let need = l + task.horizon().unwrap_or(0);
            let mut train_seg = ts.slice(sp.train.clone());
            if let Some(f) = opts.fraction {
                train_seg = few_shot_subset(&train_seg, f, need)?;
            }
            let train_len = train_seg.first().map_or(0, Vec::len);
            let val_seg = ts.slice(with_context(&sp.val, l));
            let test_range = with_context(&sp.test, l);
            let test_seg = ts.slice(test_range.clone());
            let (train, val, test, test_labels) = match *task {
                TaskSpec::LongForecast { horizon } | TaskSpec::ShortForecast { horizon } => (
                    forecast_windows(&train_seg, l, horizon, opts.stride),
                    forecast_windows(&val_seg, l, horizon, opts.eval_stride),
                    forecast_windows(&test_seg, l, horizon, opts.eval_stride),
                    None,
                ),
                TaskSpec::Imputation { mask_ratio } => (
                    imputation_windows(&train_seg, l, opts.stride, mask_ratio, opts.seed)?,
                    imputation_windows(&val_seg, l, opts.eval_stride, mask_ratio, opts.seed ^ 1)?,
                    imputation_windows(&test_seg, l, opts.eval_stride, mask_ratio, opts.seed ^ 2)?,
                    None,
                ),
                TaskSpec::Anomaly { .. } => {
                    // test windows tile the test split exactly, no borrowed context
                    let test_seg = ts.slice(sp.test.clone());
                    let test = reconstruction_windows(&test_seg, l, l);
                    let labels = ts
                        .labels
                        .as_ref()
                        .map(|lab| lab[sp.test.start..sp.test.start + test.len() * l].to_vec());
                    (
                        reconstruction_windows(&train_seg, l, opts.stride),
                        reconstruction_windows(&ts.slice(sp.val.clone()), l, l),
                        test,
                        labels,
                    )
                }
                TaskSpec::Classification { .. } => {
                    return Err(Error::invalid("classification needs a labelled dataset"));
                }
            };
            if train.is_empty() {
                return Err(Error::InsufficientData {
                    required: need,
                    available: train_len,
                });
            }
            if test.is_empty() {
                return Err(Error::InsufficientData {
                    required: need,
                    available: test_range.len(),
                });
            }
            Ok(TaskData {
                train,
                val,
                test,
                test_labels,
                train_len,
            })
        }
        (Dataset::Labeled(ls), TaskSpec::Classification { num_classes }) => {
            if ls.num_classes != *num_classes {
                return Err(Error::LengthMismatch {
                    expected: *num_classes,
                    actual: ls.num_classes,
                });
            }
            let sp = fractions.ranges(ls.samples.len())?;
            let mut train_range = sp.train.clone();
            if let Some(f) = opts.fraction {
                let keep = (f * train_range.len() as f64).floor() as usize;
                if keep == 0 {
                    return Err(Error::InsufficientData {
                        required: 1,
                        available: 0,
                    });
                }
                train_range = train_range.end - keep..train_range.end;
            }
            let take = |r: Range<usize>| -> Result<Vec<Sample<T>>> {
                r.map(|i| {
                    let s = &ls.samples[i];
                    if s.len() != cfg.channels || s.iter().any(|c| c.len() != l) {
                        return Err(Error::LengthMismatch {
                            expected: l,
                            actual: s.first().map_or(0, Vec::len),
                        });
                    }
                    Ok(Sample {
                        input: s.iter().map(|c| cast(c)).collect(),
                        target: SampleTarget::Class(ls.labels[i]),
                    })
                })
                .collect()
            };
            Ok(TaskData {
                train_len: train_range.len(),
                train: take(train_range)?,
                val: take(sp.val)?,
                test: take(sp.test)?,
                test_labels: None,
            })
        }
        (Dataset::Labeled(_), task) => Err(Error::invalid(format!(
            "task {} needs a time series",
            task.name()
        ))),
    }
}
