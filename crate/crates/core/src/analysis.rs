//! Numerical probes of how attention behaves: token similarity across
//! layers, PCA substitution, pretrained/random weight mixing, the attention
//! optimum as a PCA projector, the Jacobian bound, the `n^{-1/2}` attention
//! averaging rate and feature conditioning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMode, ForwardOptions, Model, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{singular_values, spectral_norm, symmetric_eigen};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{softmax_in_place, Graph, Tensor};

pub const SIMILARITY_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    /// 0 is the embedded input, `k` the output of block `k`.
    pub layer: usize,
    pub mean: f64,
    /// Counts over 20 equal bins on `[-1, 1]`.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub layers: Vec<LayerSimilarity>,
}

impl SimilarityProfile {
    pub fn means(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mean).collect()
    }

    /// `layer,mean,bin_0..bin_19`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean");
        for b in 0..SIMILARITY_BINS {
            out.push_str(&format!(",bin_{b}"));
        }
        out.push('\n');
        for l in &self.layers {
            out.push_str(&format!("{},{}", l.layer, l.mean));
            for c in &l.histogram {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Cosine similarity; two zero vectors count as identical, one zero vector as orthogonal.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

fn bin(c: f64) -> usize {
    (((c + 1.0) / 2.0 * SIMILARITY_BINS as f64).floor() as usize).min(SIMILARITY_BINS - 1)
}

/// Pairwise token similarity per layer for states shaped `[R, N, D]`: the
/// mean over pairs within each row, averaged over rows, plus a histogram
/// of all `R * N(N-1)/2` pairs.
pub fn similarity_of_states<T: Scalar>(states: &[Tensor<T>]) -> Result<SimilarityProfile> {
    let mut layers = Vec::with_capacity(states.len());
    for (layer, s) in states.iter().enumerate() {
        if s.rank() != 3 {
            return Err(Error::invalid(format!(
                "states must be [R, N, D], got {:?}",
                s.shape()
            )));
        }
        let (r, n, d) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        if n < 2 {
            return Err(Error::InsufficientData {
                required: 2,
                available: n,
            });
        }
        let data: Vec<f64> = s.data().iter().map(|&v| to_f64(v)).collect();
        let mut histogram = vec![0usize; SIMILARITY_BINS];
        let mut mean = 0.0;
        for row in 0..r {
            let tok = |i: usize| &data[(row * n + i) * d..(row * n + i + 1) * d];
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let c = cosine(tok(i), tok(j));
                    histogram[bin(c)] += 1;
                    sum += c;
                }
            }
            mean += sum / (n * (n - 1) / 2) as f64;
        }
        layers.push(LayerSimilarity {
            layer,
            mean: mean / r as f64,
            histogram,
        });
    }
    Ok(SimilarityProfile { layers })
}

/// Eval-mode forward with a chosen attention computation.
/// Returns head output, captured states and final tokens.
pub fn forward_with<T: Scalar>(
    model: &Model<T>,
    patches: &Tensor<T>,
    attention: AttentionMode,
) -> Result<(Tensor<T>, Vec<Tensor<T>>, Tensor<T>)> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let x = g.constant(patches.clone());
    let opts = ForwardOptions {
        train: false,
        capture: true,
        attention,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tr = model.forward(&mut g, &b, x, opts, &mut rng)?;
    let states = tr.states.iter().map(|&v| g.value(v).clone()).collect();
    Ok((
        g.value(tr.output).clone(),
        states,
        g.value(tr.tokens).clone(),
    ))
}

/// Token similarity profile of `model` on `patches [R, N, P]`.
pub fn token_similarity_profile<T: Scalar>(
    model: &Model<T>,
    patches: &Tensor<T>,
) -> Result<SimilarityProfile> {
    let (_, states, _) = forward_with(model, patches, AttentionMode::Standard)?;
    similarity_of_states(&states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSubstitution {
    pub rank: usize,
    pub profile: SimilarityProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub attention: SimilarityProfile,
    pub substitutions: Vec<PcaSubstitution>,
    /// Max output difference between rank-`D` PCA and the pass-through baseline.
    pub full_rank_identity_gap: f64,
}

/// Similarity profiles with every attention layer replaced by a per-sample
/// projection onto the top `m` principal directions, for `m` in `ranks`
/// (`{D/4, D/2, D}` when empty), next to the attention model's profile.
pub fn substitute_pca_attention<T: Scalar>(
    model: &Model<T>,
    patches: &Tensor<T>,
    ranks: &[usize],
) -> Result<PcaReport> {
    let d = model.config().backbone.d_model;
    let ranks: Vec<usize> = if ranks.is_empty() {
        vec![(d / 4).max(1), (d / 2).max(1), d]
    } else {
        ranks.to_vec()
    };
    let attention = token_similarity_profile(model, patches)?;
    let mut substitutions = Vec::with_capacity(ranks.len());
    for &rank in &ranks {
        let (_, states, _) = forward_with(model, patches, AttentionMode::Pca { rank })?;
        substitutions.push(PcaSubstitution {
            rank,
            profile: similarity_of_states(&states)?,
        });
    }
    let (full, _, _) = forward_with(model, patches, AttentionMode::Pca { rank: d })?;
    let (ident, _, _) = forward_with(model, patches, AttentionMode::Identity)?;
    Ok(PcaReport {
        attention,
        substitutions,
        full_rank_identity_gap: to_f64(full.max_abs_diff(&ident)),
    })
}

/// Every frozen tensor becomes `alpha * pretrained + (1 - alpha) * random`;
/// trainable tensors keep their `pretrained` values.
pub fn mix_weights<T: Scalar>(
    pretrained: &ParamStore<T>,
    random: &ParamStore<T>,
    alpha: f64,
) -> Result<ParamStore<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("mix ratio {alpha} outside [0, 1]")));
    }
    let mut out = pretrained.clone();
    let a: T = lit(alpha);
    let b: T = lit(1.0 - alpha);
    for p in out.iter_mut() {
        if p.trainable {
            continue;
        }
        let r = random.require(&p.name)?;
        if r.shape() != p.value.shape() {
            return Err(Error::CheckpointShape {
                name: p.name.clone(),
                found: r.shape().to_vec(),
                expected: p.value.shape().to_vec(),
            });
        }
        for (x, &y) in p.value.data_mut().iter_mut().zip(r.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPoint {
    pub alpha: f64,
    pub layer_means: Vec<f64>,
}

/// Per-layer mean token similarity as the frozen weights move from `random`
/// (alpha 0) to `pretrained` (alpha 1).
pub fn mix_similarity_curve<T: Scalar>(
    pretrained: &Model<T>,
    random: &Model<T>,
    patches: &Tensor<T>,
    alphas: &[f64],
) -> Result<Vec<MixPoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let store = mix_weights(pretrained.params(), random.params(), alpha)?;
            let mixed = Model::from_parts(pretrained.config().clone(), store)?;
            Ok(MixPoint {
                alpha,
                layer_means: token_similarity_profile(&mixed, patches)?.means(),
            })
        })
        .collect()
}

pub fn mix_curve_csv(points: &[MixPoint]) -> String {
    let k = points.first().map_or(0, |p| p.layer_means.len());
    let mut out = String::from("alpha");
    for l in 0..k {
        out.push_str(&format!(",layer_{l}"));
    }
    out.push('\n');
    for p in points {
        out.push_str(&format!("{}", p.alpha));
        for v in &p.layer_means {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Zero-centred `[N, D]` Gaussian patterns with column `j` scaled by
/// `1 / (1 + j/4)`, which keeps the spectrum of `X^T X` well separated.
pub fn centered_patterns(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = gaussian(n, d, 1.0, rng);
    for j in 0..d {
        let s = 1.0 / (1.0 + 0.25 * j as f64);
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] = (x[i * d + j] - mean) * s;
        }
    }
    x
}

/// `sum_i |x_i - X^T X A x_i|^2`, evaluated row by row.
pub fn pca_objective(x: &[f64], a: &[f64], n: usize, d: usize) -> f64 {
    let s = matmul(&transpose(x, n, d), x, d, n, d);
    let sa = matmul(&s, a, d, d, d);
    (0..n)
        .map(|i| {
            let xi = &x[i * d..(i + 1) * d];
            (0..d)
                .map(|r| {
                    let v: f64 = (0..d).map(|c| sa[r * d + c] * xi[c]).sum();
                    (xi[r] - v).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub eigenvalues: Vec<f64>,
    /// Objective at `A* = sum_{i<=m} v_i v_i^T / lambda_i`.
    pub analytic_objective: f64,
    /// `sum_{k>m} lambda_k`.
    pub tail_eigen_sum: f64,
    pub identity_gap: f64,
    /// Final objective of each descent start over `A = W_Q W_K^T`.
    pub descent_objectives: Vec<f64>,
    pub descent_relative_gaps: Vec<f64>,
    /// Starts within `1e-3` relative of the analytic optimum.
    pub descent_successes: usize,
    /// Two eigenvalues within `1e-10`: the optimum is not unique.
    pub degenerate: bool,
}

/// Objective and gradient in coordinates where `X^T X` has unit top eigenvalue.
fn descent_objective(
    s: &[f64],
    q: &[f64],
    k: &[f64],
    d: usize,
    m: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let a = matmul(q, &transpose(k, d, m), d, m, d);
    let sa = matmul(s, &a, d, d, d);
    let mut e = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            e[i * d + j] = f64::from(u8::from(i == j)) - sa[i * d + j];
        }
    }
    // f = tr(E S E^T), grad_A = -2 S^T E S
    let es = matmul(&e, s, d, d, d);
    let f: f64 = (0..d)
        .map(|i| (0..d).map(|j| es[i * d + j] * e[i * d + j]).sum::<f64>())
        .sum();
    let g = matmul(&matmul(s, &e, d, d, d), s, d, d, d);
    let ga: Vec<f64> = g.iter().map(|v| -2.0 * v).collect();
    let gq = matmul(&ga, k, d, d, m);
    let gk = matmul(&transpose(&ga, d, d), q, d, d, m);
    (f, gq, gk)
}

/// Gradient descent with Armijo backtracking over `(W_Q, W_K)`; returns the
/// final objective in normalized coordinates.
fn factored_descent(s: &[f64], d: usize, m: usize, rng: &mut ChaCha8Rng, iters: usize) -> f64 {
    let mut q = gaussian(d, m, 0.5 / (m as f64).sqrt(), rng);
    let mut k = gaussian(d, m, 0.5 / (m as f64).sqrt(), rng);
    let (mut f, mut gq, mut gk) = descent_objective(s, &q, &k, d, m);
    let mut step = 1.0;
    for _ in 0..iters {
        let gnorm: f64 = gq.iter().chain(&gk).map(|v| v * v).sum();
        if gnorm < 1e-28 {
            break;
        }
        step *= 2.0;
        loop {
            let q2: Vec<f64> = q.iter().zip(&gq).map(|(a, g)| a - step * g).collect();
            let k2: Vec<f64> = k.iter().zip(&gk).map(|(a, g)| a - step * g).collect();
            let (f2, gq2, gk2) = descent_objective(s, &q2, &k2, d, m);
            if f2 <= f - 0.5 * step * gnorm {
                (q, k, f, gq, gk) = (q2, k2, f2, gq2, gk2);
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                return f;
            }
        }
    }
    f
}

/// Checks that `A* = sum_{i<=m} v_i v_i^T / lambda_i` attains
/// `sum_{k>m} lambda_k` and that descent over the factored form finds it.
pub fn verify_theorem1(
    d: usize,
    n: usize,
    m: usize,
    seed: u64,
    starts: usize,
) -> Result<Theorem1Report> {
    if m == 0 || m > d {
        return Err(Error::invalid(format!("rank m = {m} must lie in 1..={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = centered_patterns(n, d, &mut rng);
    let s = matmul(&transpose(&x, n, d), &x, d, n, d);
    let eig = symmetric_eigen(&Tensor::new(vec![d, d], s.clone())?)?;
    let lambda = eig.values.clone();
    let degenerate = lambda.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-10) || lambda[m - 1] <= 0.0;
    let mut a = vec![0.0; d * d];
    for i in 0..m {
        let v = &eig.vectors[i];
        for r in 0..d {
            for c in 0..d {
                a[r * d + c] += v[r] * v[c] / lambda[i];
            }
        }
    }
    let analytic = pca_objective(&x, &a, n, d);
    let tail: f64 = lambda[m..].iter().sum();
    let top = lambda[0];
    let s_norm: Vec<f64> = s.iter().map(|v| v / top).collect();
    let trace: f64 = lambda.iter().sum();
    let mut objs = Vec::with_capacity(starts);
    let mut gaps = Vec::with_capacity(starts);
    for _ in 0..starts {
        let f = top * factored_descent(&s_norm, d, m, &mut rng, 20_000);
        let denom = if analytic > 1e-12 * trace {
            analytic
        } else {
            trace
        };
        objs.push(f);
        gaps.push((f - analytic) / denom);
    }
    let successes = gaps.iter().filter(|&&g| g < 1e-3).count();
    Ok(Theorem1Report {
        d,
        n,
        m,
        eigenvalues: lambda,
        analytic_objective: analytic,
        tail_eigen_sum: tail,
        identity_gap: (analytic - tail).abs(),
        descent_objectives: objs,
        descent_relative_gaps: gaps,
        descent_successes: successes,
        degenerate,
    })
}

/// `softmax(X A X^T) X` for `x [N, D]`.
pub fn attention_map(x: &[f64], a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let xa = matmul(x, a, n, d, d);
    let mut logits = matmul(&xa, &transpose(x, n, d), n, d, n);
    for row in logits.chunks_mut(n) {
        softmax_in_place(row);
    }
    matmul(&logits, x, n, n, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaInstance {
    pub n: usize,
    pub d: usize,
    pub jacobian_norm: f64,
    /// `|A|_2 sum_i (P_ii + 1/2)|x_i - sum_j P_ij x_j|^2 + Delta`.
    pub bound: f64,
    /// The same plus `N`, as the appendix derivation gives it.
    pub bound_with_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub instances: Vec<LemmaInstance>,
    pub violations: usize,
    pub violations_with_n: usize,
}

/// Right-hand side of the Jacobian bound without and with the `+N` term.
pub fn lemma_bound(x: &[f64], a: &[f64], n: usize, d: usize) -> Result<(f64, f64)> {
    let an = spectral_norm(&Tensor::new(vec![d, d], a.to_vec())?)?;
    let xa = matmul(x, a, n, d, d);
    let mut p = matmul(&xa, &transpose(x, n, d), n, d, n);
    for row in p.chunks_mut(n) {
        softmax_in_place(row);
    }
    let avg = matmul(&p, x, n, n, d);
    let dist2 = |j: usize, i: usize| -> f64 {
        (0..d)
            .map(|c| (x[j * d + c] - avg[i * d + c]).powi(2))
            .sum()
    };
    let mut main = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        main += (p[i * n + i] + 0.5) * dist2(i, i);
        for j in 0..n {
            if j != i {
                cross += p[i * n + j] * dist2(j, i);
            }
        }
    }
    let norms: f64 = x.iter().map(|v| v * v).sum();
    let bound = an * main + an * cross + 0.5 * an * norms;
    Ok((bound, bound + n as f64))
}

/// Full `ND x ND` Jacobian of `softmax(X A X^T) X` by central differences.
pub fn attention_jacobian(x: &[f64], a: &[f64], n: usize, d: usize, h: f64) -> Tensor<f64> {
    let nd = n * d;
    let mut jac = vec![0.0; nd * nd];
    let mut probe = x.to_vec();
    for col in 0..nd {
        let orig = probe[col];
        probe[col] = orig + h;
        let up = attention_map(&probe, a, n, d);
        probe[col] = orig - h;
        let down = attention_map(&probe, a, n, d);
        probe[col] = orig;
        for row in 0..nd {
            jac[row * nd + col] = (up[row] - down[row]) / (2.0 * h);
        }
    }
    Tensor::new(vec![nd, nd], jac).expect("square jacobian")
}

/// Random `(N, D)` in `2..=max_n` x `1..=max_d`, `X` standard normal and `A`
/// rescaled to spectral norm `a_norm`; counts bound violations (with a 1e-6
/// slack) for both bound forms.
pub fn verify_lemma_bound(
    instances: usize,
    max_n: usize,
    max_d: usize,
    a_norm: f64,
    seed: u64,
) -> Result<LemmaReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances);
    for _ in 0..instances {
        let n = rng.random_range(1..=max_n);
        let d = rng.random_range(1..=max_d);
        out.push(lemma_instance(n, d, a_norm, &mut rng)?);
    }
    let violations = out
        .iter()
        .filter(|i| i.jacobian_norm > i.bound + 1e-6)
        .count();
    let violations_with_n = out
        .iter()
        .filter(|i| i.jacobian_norm > i.bound_with_n + 1e-6)
        .count();
    Ok(LemmaReport {
        instances: out,
        violations,
        violations_with_n,
    })
}

pub fn lemma_instance(
    n: usize,
    d: usize,
    a_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LemmaInstance> {
    let x = gaussian(n, d, 1.0, rng);
    let mut a = gaussian(d, d, 1.0, rng);
    let sn = spectral_norm(&Tensor::new(vec![d, d], a.clone())?)?;
    if sn > 0.0 {
        a.iter_mut().for_each(|v| *v *= a_norm / sn);
    }
    let jac = attention_jacobian(&x, &a, n, d, 1e-5);
    let jacobian_norm = singular_values(&jac)?.first().copied().unwrap_or(0.0);
    let (bound, bound_with_n) = lemma_bound(&x, &a, n, d)?;
    Ok(LemmaInstance {
        n,
        d,
        jacobian_norm,
        bound,
        bound_with_n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub ns: Vec<usize>,
    pub d: usize,
    pub trials: usize,
    /// Token noise is `sigma / sqrt(d)` per coordinate.
    pub sigma: f64,
    /// Spectral norm of `W_Q W_K^T`.
    pub qk_norm: f64,
    pub confidence: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            ns: vec![16, 64, 256, 1024],
            d: 16,
            trials: 50,
            sigma: 1.0,
            qk_norm: 1.0,
            confidence: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub ns: Vec<usize>,
    pub mean_deviation: Vec<f64>,
    pub slope: f64,
    /// 95% interval of the least-squares slope.
    pub slope_ci: (f64, f64),
    /// `psi(delta, d) / sqrt(d)` at `d` and `2d`, with `nu_6 = |W_Q W_K^T|_2`.
    pub psi_correction: (f64, f64),
}

/// `psi(delta, d) = 2 sigma nu1 nu6 sqrt(2 log(1/delta)) + 2 sigma^2 nu6 log(d/delta)`.
pub fn psi(delta: f64, d: usize, sigma: f64, nu1: f64, nu6: f64) -> f64 {
    2.0 * sigma * nu1 * nu6 * (2.0 * (1.0 / delta).ln()).sqrt()
        + 2.0 * sigma * sigma * nu6 * (d as f64 / delta).ln()
}

/// Least-squares slope, intercept and slope standard error.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - icpt - slope * a).powi(2))
        .sum();
    let se = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, icpt, se)
}

/// Tokens `x_i = mu + noise`; the query is the first token. Measures
/// `|softmax(x_q A x_i^T / sqrt(d)) X W_V - mu W_V|_inf` averaged over trials and
/// fits `log deviation ~ slope * log n`.
pub fn verify_convergence_rate(cfg: &ConvergenceConfig, seed: u64) -> Result<ConvergenceReport> {
    if cfg.ns.len() < 2 || cfg.trials == 0 {
        return Err(Error::invalid(
            "need at least two token counts and one trial",
        ));
    }
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = gaussian(1, d, 1.0, &mut rng);
    let mnorm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    mu.iter_mut().for_each(|v| *v /= mnorm);
    let mut a = gaussian(d, d, 1.0, &mut rng);
    let an = spectral_norm(&Tensor::new(vec![d, d], a.clone())?)?;
    a.iter_mut().for_each(|v| *v *= cfg.qk_norm / an);
    let wv = gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let target = matmul(&mu, &wv, 1, d, d);
    let noise = cfg.sigma / (d as f64).sqrt();
    let scale = 1.0 / (d as f64).sqrt();
    let mut mean_dev = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let mut total = 0.0;
        for _ in 0..cfg.trials {
            let mut x = gaussian(n, d, noise, &mut rng);
            for i in 0..n {
                for c in 0..d {
                    x[i * d + c] += mu[c];
                }
            }
            let q = matmul(&x[..d], &a, 1, d, d);
            let mut w: Vec<f64> = (0..n)
                .map(|i| scale * (0..d).map(|c| q[c] * x[i * d + c]).sum::<f64>())
                .collect();
            softmax_in_place(&mut w);
            let pooled = matmul(&w, &x, 1, n, d);
            let out = matmul(&pooled, &wv, 1, d, d);
            total += out
                .iter()
                .zip(&target)
                .map(|(o, t)| (o - t).abs())
                .fold(0.0, f64::max);
        }
        mean_dev.push(total / cfg.trials as f64);
    }
    let lx: Vec<f64> = cfg.ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = mean_dev
        .iter()
        .map(|v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    let (slope, _, se) = linear_fit(&lx, &ly);
    let nu6 = cfg.qk_norm;
    let corr = |dd: usize| psi(cfg.confidence, dd, cfg.sigma, 1.0, nu6) / (dd as f64).sqrt();
    let psi_correction = (corr(d), corr(2 * d));
    log::debug!(
        "psi(delta, d)/sqrt(d): d={d} {:.4}, d={} {:.4}",
        psi_correction.0,
        2 * d,
        psi_correction.1
    );
    Ok(ConvergenceReport {
        ns: cfg.ns.clone(),
        mean_deviation: mean_dev,
        slope,
        slope_ci: (slope - 1.96 * se, slope + 1.96 * se),
        psi_correction,
    })
}

pub fn convergence_csv(r: &ConvergenceReport) -> String {
    let mut out = String::from("n,deviation\n");
    for (n, v) in r.ns.iter().zip(&r.mean_deviation) {
        out.push_str(&format!("{n},{v}\n"));
    }
    out
}

/// Smallest eigenvalue of `(1/N) sum_i g_i g_i^T` for features `g [N, d]`.
pub fn conditioning_diagnostic(features: &Tensor<f64>) -> Result<f64> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(Error::invalid(format!(
            "features must be [N, d], got {:?}",
            features.shape()
        )));
    }
    let n = features.shape()[0] as f64;
    let cov = features.transpose2().matmul2(features)?.map(|v| v / n);
    let eig = symmetric_eigen(&cov)?;
    Ok(eig.values.last().copied().unwrap_or(0.0).max(0.0))
}

/// Final normalized tokens of every patch as feature rows `[R*N, D]`.
pub fn token_features<T: Scalar>(model: &Model<T>, patches: &Tensor<T>) -> Result<Tensor<f64>> {
    let (_, _, tokens) = forward_with(model, patches, AttentionMode::Standard)?;
    let d = *tokens.shape().last().unwrap_or(&1);
    let data: Vec<f64> = tokens.data().iter().map(|&v| to_f64(v)).collect();
    Tensor::new(vec![data.len() / d, d], data)
}
