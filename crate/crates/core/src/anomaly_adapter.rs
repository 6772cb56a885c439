//! Gaussian prior attention, KL discrepancy, anomaly scores and thresholding.

use crate::backbone::{Bound, Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::preprocessing::PatchConfig;
use crate::scalar::{from_usize, lit, Scalar};
use crate::tasks_heads::TaskSpec;
use crate::tensor::{softmax_in_place, softplus, Graph, Tensor, Var};

pub const PREFIX: &str = "anomaly.";
/// `[K, N]` raw scales; `sigma = softplus(raw)`.
pub const SIGMA: &str = "anomaly.sigma_raw";
pub const PROB_FLOOR: f64 = 1e-12;

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn init_params<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>) {
    if !matches!(cfg.task, TaskSpec::Anomaly { .. }) {
        return;
    }
    let raw = lit(softplus_inverse(cfg.adapters.anomaly.sigma_init));
    store.insert(
        SIGMA,
        Tensor::full(vec![cfg.backbone.num_layers, cfg.num_patches()], raw),
        true,
    );
}

/// `(A + A^T - diag(A)) / 2` without renormalization.
pub fn symmetrize_raw<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::invalid(format!(
            "attention must be square, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    let half = lit::<T>(0.5);
    Ok(Tensor::from_fn(vec![n, n], |k| {
        let (i, j) = (k / n, k % n);
        if i == j {
            a.at(&[i, i]) * half
        } else {
            (a.at(&[i, j]) + a.at(&[j, i])) * half
        }
    }))
}

/// Symmetrized attention with every row renormalized to sum to one.
pub fn symmetrize_attention<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = symmetrize_raw(a)?;
    let n = s.shape()[0];
    for row in s.data_mut().chunks_mut(n) {
        let total: T = row.iter().copied().sum();
        if total > T::zero() {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    Ok(s)
}

fn distance<T: Scalar>(i: usize, j: usize, squared: bool) -> T {
    let d: T = from_usize(i.abs_diff(j));
    if squared {
        d * d
    } else {
        d
    }
}

/// Row `i` is the normalized kernel `exp(-dis(i,j) / (2 sigma_i^2))` over `j`.
pub fn gaussian_prior<T: Scalar>(t: usize, sigma: &[T], squared: bool) -> Result<Tensor<T>> {
    if sigma.len() != t {
        return Err(Error::LengthMismatch {
            expected: t,
            actual: sigma.len(),
        });
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > T::zero())) {
        return Err(Error::invalid(format!("sigma must be positive, got {s}")));
    }
    let mut out = Vec::with_capacity(t * t);
    for (i, &s) in sigma.iter().enumerate() {
        let two_s2 = lit::<T>(2.0) * s * s;
        let mut row: Vec<T> = (0..t)
            .map(|j| -distance::<T>(i, j, squared) / two_s2)
            .collect();
        softmax_in_place(&mut row);
        out.extend(row);
    }
    Tensor::new(vec![t, t], out)
}

/// Per-row `KL(p || q)` (or the symmetrized mean of both directions),
/// with probabilities floored at `1e-12`.
pub fn discrepancy<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>, symmetric: bool) -> Result<Vec<T>> {
    if p.shape() != q.shape() || p.rank() < 1 {
        return Err(Error::ShapeMismatch {
            op: "discrepancy",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let d = *p.shape().last().unwrap();
    let floor = lit::<T>(PROB_FLOOR);
    let kl = |a: &[T], b: &[T]| -> T {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let (x, y) = (x.max(floor), y.max(floor));
                x * (x.ln() - y.ln())
            })
            .sum()
    };
    Ok(p.data()
        .chunks(d)
        .zip(q.data().chunks(d))
        .map(|(a, b)| {
            if symmetric {
                (kl(a, b) + kl(b, a)) * lit(0.5)
            } else {
                kl(a, b)
            }
        })
        .collect())
}

/// `sigma` values `[K][N]` of a model with an anomaly adapter.
pub fn sigmas<T: Scalar>(model: &Model<T>) -> Option<Vec<Vec<T>>> {
    let raw = model.params().get(SIGMA)?;
    let n = raw.shape()[1];
    Some(
        raw.data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| softplus(v)).collect())
            .collect(),
    )
}

/// Training term: `kappa * mean over layers, rows and tokens of KL(A_hat || prior)`.
/// `attention` holds head-averaged `[R, N, N]` probabilities per layer;
/// `A_hat` is treated as a constant so only the prior scales receive gradient.
pub fn discrepancy_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    attention: &[Var],
) -> Result<Var> {
    let acfg = &cfg.adapters.anomaly;
    let raw = b.var(SIGMA);
    let mut total: Option<Var> = None;
    for (l, &a) in attention.iter().enumerate() {
        let av = g.value(a).clone();
        let (r, n) = (av.shape()[0], av.shape()[1]);
        let mut hat = Vec::with_capacity(av.len());
        for i in 0..r {
            let m = Tensor::new(vec![n, n], av.data()[i * n * n..(i + 1) * n * n].to_vec())?;
            hat.extend(symmetrize_attention(&m)?.into_data());
        }
        let floor = lit::<T>(PROB_FLOOR);
        let neg_entropy: T = hat
            .iter()
            .map(|&p| {
                if p > T::zero() {
                    p * p.max(floor).ln()
                } else {
                    T::zero()
                }
            })
            .sum();
        let log_hat = Tensor::new(
            vec![r, n, n],
            hat.iter().map(|&p| p.max(floor).ln()).collect(),
        )?;
        let hat = g.constant(Tensor::new(vec![r, n, n], hat)?);

        let s = g.slice(raw, 0, l, 1)?;
        let s = g.softplus(s);
        let s = g.reshape(s, vec![n, 1])?;
        let s2 = g.square(s);
        let denom = g.scale(s2, lit(2.0));
        let dist = g.constant(Tensor::from_fn(vec![n, n], |k| {
            distance(k / n, k % n, acfg.squared_distance)
        }));
        let z = g.div(dist, denom)?;
        let z = g.neg(z);
        let logp = g.log_softmax(z);

        let cross = g.mul(hat, logp)?;
        let cross = g.sum(cross);
        let ne = g.constant(Tensor::scalar(neg_entropy));
        let mut kl = g.sub(ne, cross)?;
        if acfg.symmetric_kl {
            let q = g.exp(logp);
            let lh = g.constant(log_hat);
            let diff = g.sub(logp, lh)?;
            let rev = g.mul(q, diff)?;
            let rev = g.sum(rev);
            let both = g.add(kl, rev)?;
            kl = g.scale(both, lit(0.5));
        }
        let kl = g.scale(kl, T::one() / from_usize::<T>(r * n));
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    let total = total.ok_or(Error::Empty("no attention maps captured"))?;
    Ok(g.scale(
        total,
        lit::<T>(acfg.kappa) / from_usize::<T>(attention.len()),
    ))
}

/// Per-row, per-token discrepancy `[R][N]` averaged over layers.
pub fn token_discrepancy<T: Scalar>(
    attention: &[Tensor<T>],
    sigma: &[Vec<T>],
    squared: bool,
    symmetric: bool,
) -> Result<Vec<Vec<T>>> {
    let first = attention.first().ok_or(Error::Empty("no attention maps"))?;
    let (r, n) = (first.shape()[0], first.shape()[1]);
    let mut out = vec![vec![T::zero(); n]; r];
    for (a, s) in attention.iter().zip(sigma) {
        let prior = gaussian_prior(n, s, squared)?;
        for (i, row) in out.iter_mut().enumerate() {
            let m = Tensor::new(vec![n, n], a.data()[i * n * n..(i + 1) * n * n].to_vec())?;
            let kl = discrepancy(&symmetrize_attention(&m)?, &prior, symmetric)?;
            for (o, v) in row.iter_mut().zip(kl) {
                *o += v;
            }
        }
    }
    let k = from_usize::<T>(attention.len());
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    Ok(out)
}

/// Token values to time points: each point averages the patches covering it;
/// points past the last patch take the last patch's value.
pub fn tokens_to_points<T: Scalar>(tokens: &[T], cfg: &PatchConfig) -> Result<Vec<T>> {
    let n = cfg.num_patches();
    if tokens.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: tokens.len(),
        });
    }
    let mut sum = vec![T::zero(); cfg.context_len];
    let mut count = vec![0usize; cfg.context_len];
    for (i, &v) in tokens.iter().enumerate() {
        for t in i * cfg.stride..i * cfg.stride + cfg.patch_len {
            sum[t] += v;
            count[t] += 1;
        }
    }
    let last = tokens[n - 1];
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { last } else { s / from_usize(c) })
        .collect())
}

/// Reconstruction error alone, or `recon * softmax_time(discrepancy) * T`.
pub fn anomaly_score<T: Scalar>(recon_err: &[T], discrepancy: Option<&[T]>) -> Result<Vec<T>> {
    let Some(d) = discrepancy else {
        return Ok(recon_err.to_vec());
    };
    if d.len() != recon_err.len() {
        return Err(Error::LengthMismatch {
            expected: recon_err.len(),
            actual: d.len(),
        });
    }
    let mut w = d.to_vec();
    softmax_in_place(&mut w);
    let t = from_usize::<T>(recon_err.len());
    Ok(recon_err.iter().zip(w).map(|(&e, w)| e * w * t).collect())
}

/// Linear-interpolation quantile (the common "type 7" definition).
pub fn quantile<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = lit::<T>(pos - lo as f64);
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Threshold at the `(1 - ratio)` quantile of `reference` (train and test
/// scores together) and flag test points strictly above it.
pub fn threshold_and_detect<T: Scalar>(
    scores: &[T],
    reference: &[T],
    ratio: f64,
) -> Result<(T, Vec<u8>)> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to threshold"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "anomaly ratio {ratio} outside (0, 1)"
        )));
    }
    let th = quantile(
        if reference.is_empty() {
            scores
        } else {
            reference
        },
        1.0 - ratio,
    )?;
    Ok((th, scores.iter().map(|&s| u8::from(s > th)).collect()))
}

/// Any hit inside a true anomalous segment marks the whole segment.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let mut out = pred.to_vec();
    let mut i = 0;
    while i < truth.len() {
        if truth[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < truth.len() && truth[i] != 0 {
            i += 1;
        }
        if pred[start..i].iter().any(|&p| p != 0) {
            out[start..i].iter_mut().for_each(|p| *p = 1);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::from_fn(vec![n, n], |_| rng.random_range(0.01..1.0));
        for row in t.data_mut().chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    #[test]
    fn symmetrize_examples() {
        let a = Tensor::new(
            vec![3, 3],
            vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0],
        )
        .unwrap();
        assert!(symmetrize_attention(&a).unwrap().max_abs_diff(&a) < 1e-15);
        let i = Tensor::<f64>::eye(4);
        let raw = symmetrize_raw(&i).unwrap();
        assert!(raw.data().iter().zip(i.data()).all(|(&r, &e)| r == e / 2.0));
        assert_eq!(symmetrize_attention(&i).unwrap(), i);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = symmetrize_raw(&stochastic(3, &mut rng)).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert!((r.at(&[x, y]) - r.at(&[y, x])).abs() < 1e-12);
            }
        }
        assert!(symmetrize_raw(&Tensor::<f64>::zeros(vec![2, 3])).is_err());
    }

    #[test]
    fn prior_examples() {
        let p = gaussian_prior(5, &[1e-3; 5], false).unwrap();
        assert!(p.max_abs_diff(&Tensor::eye(5)) < 1e-12);
        let p = gaussian_prior(8, &[1e6; 8], false).unwrap();
        for row in p.data().chunks(8) {
            let (lo, hi) = row
                .iter()
                .fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(hi - lo < 1e-3);
        }
        let p = gaussian_prior(3, &[1.0f64; 3], false).unwrap();
        assert!((p.at(&[1, 0]) - p.at(&[1, 2])).abs() < 1e-15);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gaussian_prior(2, &[1.0, 0.0], false).is_err());
    }

    #[test]
    fn discrepancy_examples() {
        let p = gaussian_prior(4, &[0.7f64; 4], true).unwrap();
        assert!(discrepancy(&p, &p, false)
            .unwrap()
            .iter()
            .all(|&v| v.abs() < 1e-12));
        let onehot = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let uniform = Tensor::full(vec![1, 4], 0.25);
        let kl = discrepancy(&onehot, &uniform, false).unwrap()[0];
        assert!((kl - 4f64.ln()).abs() < 1e-9);
        assert!(discrepancy(&onehot, &Tensor::full(vec![1, 3], 1.0 / 3.0), false).is_err());
    }

    #[test]
    fn score_examples() {
        let e = [1.0f64, 2.0, 4.0];
        let s = anomaly_score(&e, Some(&[0.3, 0.3, 0.3])).unwrap();
        for (a, b) in s.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            anomaly_score(&[0.0; 3], Some(&[1.0, 5.0, 2.0])).unwrap(),
            vec![0.0; 3]
        );
        assert!(anomaly_score(&e, Some(&[1.0])).is_err());
        let mut e = vec![0.1; 50];
        e[17] = 9.0;
        let s = anomaly_score(&e, Some(&vec![0.2; 50])).unwrap();
        let arg = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(arg, 17);
    }

    #[test]
    fn threshold_examples() {
        let s = [1.0, 2.0, 3.0, 4.0];
        let (_, flags) = threshold_and_detect(&s, &s, 0.5).unwrap();
        assert_eq!(flags, vec![0, 0, 1, 1]);
        let (_, flags) = threshold_and_detect(&[2.0; 5], &[2.0; 5], 0.2).unwrap();
        assert_eq!(flags, vec![0; 5]);
        assert!(threshold_and_detect::<f64>(&[], &[], 0.1).is_err());
        assert_eq!(
            point_adjust(&[0, 1, 0, 0], &[0, 1, 1, 0]).unwrap(),
            vec![0, 1, 1, 0]
        );
        assert_eq!(
            point_adjust(&[0, 0, 1, 0, 0], &[0, 1, 1, 1, 0]).unwrap(),
            vec![0, 1, 1, 1, 0]
        );
    }

    #[test]
    fn tokens_broadcast_to_points() {
        let cfg = PatchConfig::new(4, 2, 9).unwrap();
        let pts = tokens_to_points(&[1.0, 3.0, 5.0], &cfg).unwrap();
        assert_eq!(pts, vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn graph_loss_matches_direct_kl() {
        use crate::backbone::{BackboneConfig, Variant};
        let cfg = ModelConfig {
            backbone: BackboneConfig::small(2, 8),
            patch: PatchConfig::new(4, 4, 16).unwrap(),
            channels: 1,
            task: TaskSpec::Anomaly {
                anomaly_ratio: 0.01,
            },
            variant: Variant::Adapter,
            adapters: Default::default(),
            seed: 0,
        };
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<Tensor<f64>> = (0..2)
            .map(|_| {
                let mut d = Vec::new();
                for _ in 0..3 {
                    d.extend(stochastic(4, &mut rng).into_data());
                }
                Tensor::new(vec![3, 4, 4], d).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let loss = discrepancy_loss(&mut g, &b, &cfg, &vars).unwrap();
        let tok = token_discrepancy(&maps, &sigmas(&model).unwrap(), false, false).unwrap();
        let want: f64 = tok.iter().flatten().sum::<f64>() / 12.0 * 0.1;
        assert!((g.value(loss).item() - want).abs() < 1e-10);
        g.backward(loss).unwrap();
        assert!(g.grad(b.var(SIGMA)).unwrap().iter().any(|v| v.abs() > 0.0));
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_self(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = stochastic(6, &mut rng);
            let q = stochastic(6, &mut rng);
            for v in discrepancy(&p, &q, false).unwrap() {
                prop_assert!(v >= -1e-12);
            }
            for v in discrepancy(&p, &p, true).unwrap() {
                prop_assert!(v.abs() < 1e-10);
            }
        }

        #[test]
        fn prior_rows_decay(sigma in 0.05f64..20.0, t in 2usize..16) {
            let p = gaussian_prior(t, &vec![sigma; t], false).unwrap();
            for i in 0..t {
                let row = p.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in i + 1..t {
                    prop_assert!(row[j] <= row[j - 1]);
                }
                for j in (0..i).rev() {
                    prop_assert!(row[j] <= row[j + 1]);
                }
            }
        }

        #[test]
        fn symmetrization_fixes_doubly_stochastic_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let mut a = vec![0.0f64; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = rng.random_range(0.05..1.0);
                    a[i * n + j] = v;
                    a[j * n + i] = v;
                }
            }
            // symmetric Sinkhorn scaling to a doubly stochastic matrix
            for _ in 0..500 {
                let d: Vec<f64> = (0..n).map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt()).collect();
                for i in 0..n {
                    for j in 0..n {
                        a[i * n + j] *= d[i] * d[j];
                    }
                }
            }
            let a = Tensor::new(vec![n, n], a).unwrap();
            let once = symmetrize_attention(&a).unwrap();
            prop_assert!(once.max_abs_diff(&a) < 1e-9);
            let twice = symmetrize_attention(&once).unwrap();
            prop_assert!(twice.max_abs_diff(&once) < 1e-9);
        }
    }
}
