//! Task specifications, output heads, losses and batch preparation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly_adapter;
use crate::backbone::{
    linear, uniform_init, Bound, ForwardOptions, ForwardTrace, Model, ModelConfig, ParamStore,
};
use crate::error::{Error, Result};
use crate::preprocessing::{patch_rows, NormStats};
use crate::scalar::{from_usize, Scalar};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    LongForecast { horizon: usize },
    ShortForecast { horizon: usize },
    Imputation { mask_ratio: f64 },
    Classification { num_classes: usize },
    Anomaly { anomaly_ratio: f64 },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::LongForecast { .. } => "long_forecast",
            TaskSpec::ShortForecast { .. } => "short_forecast",
            TaskSpec::Imputation { .. } => "imputation",
            TaskSpec::Classification { .. } => "classification",
            TaskSpec::Anomaly { .. } => "anomaly",
        }
    }

    pub fn horizon(&self) -> Option<usize> {
        match *self {
            TaskSpec::LongForecast { horizon } | TaskSpec::ShortForecast { horizon } => {
                Some(horizon)
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::LongForecast { horizon } | TaskSpec::ShortForecast { horizon }
                if horizon == 0 =>
            {
                Err(Error::invalid("forecast horizon must be positive"))
            }
            TaskSpec::Classification { num_classes } if num_classes < 2 => {
                Err(Error::invalid("classification needs at least 2 classes"))
            }
            TaskSpec::Imputation { mask_ratio: r } | TaskSpec::Anomaly { anomaly_ratio: r }
                if !(r > 0.0 && r < 1.0) =>
            {
                Err(Error::invalid(format!("ratio {r} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Output width per row (per sample for classification).
pub fn head_output_dim(cfg: &ModelConfig) -> usize {
    match cfg.task {
        TaskSpec::LongForecast { horizon } | TaskSpec::ShortForecast { horizon } => horizon,
        TaskSpec::Imputation { .. } | TaskSpec::Anomaly { .. } => cfg.patch.context_len,
        TaskSpec::Classification { num_classes } => num_classes,
    }
}

/// Flattened input width of the head.
pub fn head_input_dim(cfg: &ModelConfig) -> usize {
    let per_row = cfg.num_patches() * cfg.backbone.d_model;
    match cfg.task {
        TaskSpec::Classification { .. } => per_row * cfg.channels,
        _ => per_row,
    }
}

pub(crate) fn init_head<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let (i, o) = (head_input_dim(cfg), head_output_dim(cfg));
    store.insert("head.weight", uniform_init(vec![i, o], i, rng), true);
    store.insert("head.bias", uniform_init(vec![o], i, rng), true);
}

/// Flattens final tokens `[R, N, D]` and maps them to the task output:
/// `[R, O]` per series, or `[B, C]` logits over all channels of a sample.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    tokens: Var,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let flat = match cfg.task {
        TaskSpec::Classification { .. } => g.reshape(
            tokens,
            vec![s[0] / cfg.channels, cfg.channels * s[1] * s[2]],
        )?,
        _ => g.reshape(tokens, vec![s[0], s[1] * s[2]])?,
    };
    linear(g, flat, b.var("head.weight"), Some(b.var("head.bias")))
}

pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

/// `sum over masked (pred - target)^2 / #masked`; `mask` uses 1 = observed, 0 = masked.
pub fn masked_mse_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Var> {
    if g.shape(pred) != target.shape() || target.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let masked = mask.data().iter().filter(|&&m| m == T::zero()).count();
    if masked == 0 {
        return Err(Error::invalid("imputation mask has no masked positions"));
    }
    let w = g.constant(mask.map(|m| if m == T::zero() { T::one() } else { T::zero() }));
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let d = g.mul(d, w)?;
    let d2 = g.square(d);
    let s = g.sum(d2);
    Ok(g.scale(s, T::one() / from_usize::<T>(masked)))
}

/// Mean cross-entropy of `logits [B, C]` against class indices.
pub fn cross_entropy_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::LengthMismatch {
            expected: s[0],
            actual: labels.len(),
        });
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let onehot = Tensor::from_fn(vec![s[0], c], |k| {
        if labels[k / c] == k % c {
            T::one()
        } else {
            T::zero()
        }
    });
    let lp = g.log_softmax(logits);
    let oh = g.constant(onehot);
    let picked = g.mul(lp, oh)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one() / from_usize::<T>(s[0])))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One multivariate sample in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `[M][L]` context.
    pub input: Vec<Vec<T>>,
    pub target: SampleTarget<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleTarget<T> {
    /// `[M][O]` future values.
    Forecast(Vec<Vec<T>>),
    /// `[M][L]` mask, 1 = observed, 0 = masked.
    Impute(Vec<Vec<T>>),
    Class(usize),
    /// Reconstruct the input (anomaly detection).
    Reconstruct,
}

#[derive(Debug, Clone)]
pub enum BatchTarget<T> {
    /// Normalized `[R, O]`.
    Series(Tensor<T>),
    /// Normalized full context `[R, L]` and its mask.
    Masked {
        target: Tensor<T>,
        mask: Tensor<T>,
    },
    Labels(Vec<usize>),
}

/// Normalized, patched model input for `samples` samples of `M` channels each.
#[derive(Debug, Clone)]
pub struct TaskBatch<T> {
    pub patches: Tensor<T>,
    /// Normalized input rows `[R, L]` (masked positions zeroed).
    pub inputs: Tensor<T>,
    pub stats: Vec<NormStats<T>>,
    pub target: BatchTarget<T>,
    pub samples: usize,
}

impl<T: Scalar> TaskBatch<T> {
    pub fn rows(&self) -> usize {
        self.stats.len()
    }
}

/// Normalizes every channel row with its own statistics and patches the batch.
pub fn prepare_batch<T: Scalar>(cfg: &ModelConfig, samples: &[&Sample<T>]) -> Result<TaskBatch<T>> {
    let m = cfg.channels;
    let l = cfg.patch.context_len;
    if samples.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let mut inputs = Vec::with_capacity(samples.len() * m * l);
    let mut stats = Vec::with_capacity(samples.len() * m);
    let mut series = Vec::new();
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.input.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: s.input.len(),
            });
        }
        for (c, row) in s.input.iter().enumerate() {
            if row.len() != l {
                return Err(Error::LengthMismatch {
                    expected: l,
                    actual: row.len(),
                });
            }
            let mask = match &s.target {
                SampleTarget::Impute(mk) => Some(mk[c].as_slice()),
                _ => None,
            };
            let st = NormStats::from_series(row, mask)?;
            let mut z = st.apply(row);
            match &s.target {
                SampleTarget::Forecast(fut) => series.extend(st.apply(&fut[c])),
                SampleTarget::Impute(mk) => {
                    series.extend(z.iter().copied());
                    masks.extend(mk[c].iter().copied());
                    for (v, &keep) in z.iter_mut().zip(&mk[c]) {
                        if keep == T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                SampleTarget::Reconstruct => series.extend(z.iter().copied()),
                SampleTarget::Class(_) => {}
            }
            inputs.extend(z);
            stats.push(st);
        }
        if let SampleTarget::Class(k) = s.target {
            labels.push(k);
        }
    }
    let rows = samples.len() * m;
    let inputs = Tensor::new(vec![rows, l], inputs)?;
    let patches = patch_rows(&inputs, &cfg.patch)?;
    let target = match &samples[0].target {
        SampleTarget::Forecast(_) => {
            let o = series.len() / rows;
            BatchTarget::Series(Tensor::new(vec![rows, o], series)?)
        }
        SampleTarget::Reconstruct => BatchTarget::Series(Tensor::new(vec![rows, l], series)?),
        SampleTarget::Impute(_) => BatchTarget::Masked {
            target: Tensor::new(vec![rows, l], series)?,
            mask: Tensor::new(vec![rows, l], masks)?,
        },
        SampleTarget::Class(_) => BatchTarget::Labels(labels),
    };
    Ok(TaskBatch {
        patches,
        inputs,
        stats,
        target,
        samples: samples.len(),
    })
}

pub struct TaskOutput {
    pub loss: Var,
    /// Task loss before the prior discrepancy term; equals `loss` otherwise.
    pub fit: Var,
    pub trace: ForwardTrace,
}

/// Forward pass plus the task loss in normalized space. Anomaly models with
/// an anomaly adapter add the weighted prior discrepancy.
pub fn task_loss<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    batch: &TaskBatch<T>,
    mut opts: ForwardOptions,
    rng: &mut R,
) -> Result<TaskOutput> {
    let cfg = model.config();
    let with_prior = matches!(cfg.task, TaskSpec::Anomaly { .. })
        && model.params().contains(anomaly_adapter::SIGMA);
    opts.capture |= with_prior;
    let x = g.constant(batch.patches.clone());
    let trace = model.forward(g, b, x, opts, rng)?;
    let loss = match &batch.target {
        BatchTarget::Series(t) => mse_loss(g, trace.output, t)?,
        BatchTarget::Masked { target, mask } => masked_mse_loss(g, trace.output, target, mask)?,
        BatchTarget::Labels(labels) => cross_entropy_loss(g, trace.output, labels)?,
    };
    let fit = loss;
    let loss = if with_prior {
        let d = anomaly_adapter::discrepancy_loss(g, b, cfg, &trace.attention)?;
        g.add(loss, d)?
    } else {
        loss
    };
    Ok(TaskOutput { loss, fit, trace })
}

/// Head output rows mapped back to original units with each row's statistics.
pub fn denormalize_rows<T: Scalar>(out: &Tensor<T>, stats: &[NormStats<T>]) -> Vec<Vec<T>> {
    (0..out.shape()[0])
        .map(|i| stats[i].invert(out.row(i)))
        .collect()
}
