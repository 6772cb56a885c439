//! Instance normalization, patch tokenization, channel flattening and
//! imputation masks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{from_usize, lit, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Per-series statistics needed to undo [`instance_normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats<T> {
    pub mean: T,
    /// Population variance.
    pub variance: T,
    pub eps: T,
}

impl<T: Scalar> NormStats<T> {
    pub fn scale(&self) -> T {
        (self.variance + self.eps).sqrt()
    }

    /// Statistics of the entries where `mask` is 1 (all entries when `mask` is `None`).
    pub fn from_series(x: &[T], mask: Option<&[T]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = T::zero();
        for (i, &v) in x.iter().enumerate() {
            if mask.is_none_or(|m| m[i] != T::zero()) {
                sum += v;
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "instance normalization needs at least 2 observed points, got {n}"
            )));
        }
        let mean = sum / from_usize(n);
        let mut ss = T::zero();
        for (i, &v) in x.iter().enumerate() {
            if mask.is_none_or(|m| m[i] != T::zero()) {
                ss += (v - mean) * (v - mean);
            }
        }
        Ok(Self {
            mean,
            variance: ss / from_usize(n),
            eps: lit(DEFAULT_NORM_EPS),
        })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let s = self.scale();
        x.iter().map(|&v| (v - self.mean) / s).collect()
    }

    pub fn invert(&self, y: &[T]) -> Vec<T> {
        let s = self.scale();
        y.iter().map(|&v| v * s + self.mean).collect()
    }
}

/// `(x - mean) / sqrt(var + eps)` with population variance; constant series map to zeros.
pub fn instance_normalize<T: Scalar>(x: &[T]) -> Result<(Vec<T>, NormStats<T>)> {
    let stats = NormStats::from_series(x, None)?;
    Ok((stats.apply(x), stats))
}

pub fn instance_denormalize<T: Scalar>(y: &[T], stats: &NormStats<T>) -> Vec<T> {
    stats.invert(y)
}

/// Patch length `P`, stride `S` and context length `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub context_len: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize, context_len: usize) -> Result<Self> {
        let cfg = Self {
            patch_len,
            stride,
            context_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 {
            return Err(Error::invalid("patch_len and stride must be at least 1"));
        }
        if self.patch_len > self.context_len {
            return Err(Error::invalid(format!(
                "patch_len {} exceeds context_len {}",
                self.patch_len, self.context_len
            )));
        }
        Ok(())
    }

    /// `floor((L - P) / S) + 1`
    pub fn num_patches(&self) -> usize {
        (self.context_len - self.patch_len) / self.stride + 1
    }

    /// Last input index (exclusive) covered by some patch.
    pub fn covered_len(&self) -> usize {
        (self.num_patches() - 1) * self.stride + self.patch_len
    }
}

/// Splits one series into `[N, P]` patches, `patches[i][j] = x[i*S + j]`.
pub fn patch<T: Scalar>(x: &[T], cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if x.len() != cfg.context_len {
        return Err(Error::LengthMismatch {
            expected: cfg.context_len,
            actual: x.len(),
        });
    }
    let n = cfg.num_patches();
    let mut data = Vec::with_capacity(n * cfg.patch_len);
    for i in 0..n {
        data.extend_from_slice(&x[i * cfg.stride..i * cfg.stride + cfg.patch_len]);
    }
    Tensor::new(vec![n, cfg.patch_len], data)
}

/// Patches every row of a `[R, L]` batch into `[R, N, P]`.
pub fn patch_rows<T: Scalar>(rows: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    if rows.rank() != 2 {
        return Err(Error::invalid("patch_rows expects a [rows, length] tensor"));
    }
    let r = rows.shape()[0];
    let n = cfg.num_patches();
    let mut data = Vec::with_capacity(r * n * cfg.patch_len);
    for i in 0..r {
        data.extend(patch(rows.row(i), cfg)?.into_data());
    }
    Tensor::new(vec![r, n, cfg.patch_len], data)
}

/// Channel-independent batch: one univariate row per original variable.
#[derive(Debug, Clone)]
pub struct SeriesBatch<T> {
    /// Raw (un-normalized) values, `[rows, L]`.
    pub values: Tensor<T>,
    pub channel_index: Vec<usize>,
    pub stats: Vec<NormStats<T>>,
    /// 1 = observed, 0 = masked; same shape as `values`.
    pub mask: Option<Tensor<T>>,
}

impl<T: Scalar> SeriesBatch<T> {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    /// Normalized rows with masked positions set to zero (the normalized mean).
    pub fn normalized(&self) -> Tensor<T> {
        let l = self.values.shape()[1];
        let mut data = Vec::with_capacity(self.values.len());
        for (i, st) in self.stats.iter().enumerate() {
            let mut row = st.apply(self.values.row(i));
            if let Some(m) = &self.mask {
                for (v, &keep) in row.iter_mut().zip(m.row(i)) {
                    if keep == T::zero() {
                        *v = T::zero();
                    }
                }
            }
            data.extend(row);
        }
        Tensor::new(vec![self.rows(), l], data).expect("shape")
    }

    /// Inverse of [`flatten_channels`].
    pub fn regroup(&self) -> Tensor<T> {
        let m = self.channel_index.iter().max().map_or(0, |&c| c + 1);
        let l = self.values.shape()[1];
        let mut out = vec![T::zero(); m * l];
        for (row, &c) in self.channel_index.iter().enumerate() {
            out[c * l..(c + 1) * l].copy_from_slice(self.values.row(row));
        }
        Tensor::new(vec![m, l], out).expect("shape")
    }

    /// Attaches a mask and recomputes each row's statistics from its observed points.
    pub fn with_mask(mut self, mask: Tensor<T>) -> Result<Self> {
        if mask.shape() != self.values.shape() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: self.values.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        self.stats = (0..self.rows())
            .map(|i| NormStats::from_series(self.values.row(i), Some(mask.row(i))))
            .collect::<Result<_>>()?;
        self.mask = Some(mask);
        Ok(self)
    }
}

/// `[M, L]` multivariate series to an `M`-row channel-independent batch.
pub fn flatten_channels<T: Scalar>(multivariate: &Tensor<T>) -> Result<SeriesBatch<T>> {
    if multivariate.rank() != 2 || multivariate.shape()[0] == 0 {
        return Err(Error::invalid(format!(
            "flatten_channels expects [M >= 1, L], got {:?}",
            multivariate.shape()
        )));
    }
    let m = multivariate.shape()[0];
    let stats = (0..m)
        .map(|i| NormStats::from_series(multivariate.row(i), None))
        .collect::<Result<_>>()?;
    Ok(SeriesBatch {
        values: multivariate.clone(),
        channel_index: (0..m).collect(),
        stats,
        mask: None,
    })
}

/// Number of masked points for a given ratio: `round(ratio * len)`.
pub fn masked_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64).round() as usize
}

/// Mask with exactly `round(ratio * len)` zeros (masked) and ones elsewhere,
/// deterministic in `seed`.
pub fn make_imputation_mask<T: Scalar>(len: usize, ratio: f64, seed: u64) -> Result<Vec<T>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = masked_count(len, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![T::one(); len];
    for i in sample(&mut rng, len, k) {
        mask[i] = T::zero();
    }
    Ok(mask)
}
