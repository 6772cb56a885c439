//! Temporal, channel and frequency adapters with scaled-sigmoid select gates.
//!
//! Parameter layout (per layer `l`):
//! - `adapters.temporal.{l}.{down,up}.{weight,bias}`: bottleneck `D -> r -> D`, `up` zeroed
//! - `adapters.channel.{l}.mix_down [r_c, M]`, `down`/`up` (`D -> r -> D`), `mix_up [M, r_c]` zeroed
//! - `adapters.frequency.{l}.{w_re,w_im} [N/2+1, F/2+1]`, `embed.{weight,bias}` (`P -> D`), `mix [H]` zeroed
//! - `gates.{temporal,channel,frequency} [K]`, initialized to 0

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Bound, Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::fft::rfft_bins;
use crate::tensor::sigmoid;
use crate::tensor::{Graph, Tensor, Var};

pub const PREFIX: &str = "adapters.";
pub const GATE_PREFIX: &str = "gates.";
pub const GATE_TEMPORAL: &str = "gates.temporal";
pub const GATE_CHANNEL: &str = "gates.channel";
pub const GATE_FREQUENCY: &str = "gates.frequency";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Temporal,
    Channel,
    Frequency,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [
        AdapterKind::Temporal,
        AdapterKind::Channel,
        AdapterKind::Frequency,
    ];

    pub fn gate_name(self) -> &'static str {
        match self {
            AdapterKind::Temporal => GATE_TEMPORAL,
            AdapterKind::Channel => GATE_CHANNEL,
            AdapterKind::Frequency => GATE_FREQUENCY,
        }
    }
}

/// `sigmoid(lambda * g)`.
pub fn gate(g: f64, lambda: f64) -> f64 {
    sigmoid(lambda * g)
}

/// Truncated (and rescaled) identity between `n`- and `f`-point spectra.
pub fn truncation_identity<T: Scalar>(n: usize, f: usize) -> Tensor<T> {
    let (nb, fb) = (rfft_bins(n), rfft_bins(f));
    let s: T = lit(f as f64 / n as f64);
    Tensor::from_fn(
        vec![nb, fb],
        |i| if i / fb == i % fb { s } else { T::zero() },
    )
}

pub(crate) fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    use crate::backbone::uniform_init;
    let k = cfg.backbone.num_layers;
    let d = cfg.backbone.d_model;
    let r = cfg.temporal_rank();
    let (m, rc) = (cfg.channels, cfg.channel_rank());
    let (n, f, p) = (cfg.num_patches(), cfg.adapters.prompts, cfg.patch.patch_len);
    for l in 0..k {
        let t = |s: &str| format!("adapters.temporal.{l}.{s}");
        store.insert(t("down.weight"), uniform_init(vec![d, r], d, rng), true);
        store.insert(t("down.bias"), uniform_init(vec![r], d, rng), true);
        store.insert(t("up.weight"), Tensor::zeros(vec![r, d]), true);
        store.insert(t("up.bias"), Tensor::zeros(vec![d]), true);

        let c = |s: &str| format!("adapters.channel.{l}.{s}");
        store.insert(c("mix_down"), uniform_init(vec![rc, m], m, rng), true);
        store.insert(c("down.weight"), uniform_init(vec![d, r], d, rng), true);
        store.insert(c("down.bias"), uniform_init(vec![r], d, rng), true);
        store.insert(c("up.weight"), uniform_init(vec![r, d], r, rng), true);
        store.insert(c("up.bias"), uniform_init(vec![d], r, rng), true);
        store.insert(c("mix_up"), Tensor::zeros(vec![m, rc]), true);

        if f > 0 {
            let q = |s: &str| format!("adapters.frequency.{l}.{s}");
            store.insert(q("w_re"), truncation_identity(n, f), true);
            store.insert(
                q("w_im"),
                Tensor::zeros(vec![rfft_bins(n), rfft_bins(f)]),
                true,
            );
            store.insert(q("embed.weight"), uniform_init(vec![p, d], p, rng), true);
            store.insert(q("embed.bias"), uniform_init(vec![d], p, rng), true);
            store.insert(q("mix"), Tensor::zeros(vec![cfg.backbone.num_heads]), true);
        }
    }
    for kind in AdapterKind::ALL {
        store.insert(kind.gate_name(), Tensor::zeros(vec![k]), true);
    }
}

/// Gate value `sigmoid(lambda * g_l)` as a `[1]` node.
pub fn gate_var<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    kind: AdapterKind,
    layer: usize,
) -> Result<Var> {
    let gl = g.slice(b.var(kind.gate_name()), 0, layer, 1)?;
    let z = g.scale(gl, lit(cfg.adapters.lambda));
    Ok(g.sigmoid(z))
}

fn mlp<T: Scalar>(g: &mut Graph<T>, b: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    use crate::backbone::linear;
    let h = linear(
        g,
        x,
        b.var(&format!("{prefix}.down.weight")),
        Some(b.var(&format!("{prefix}.down.bias"))),
    )?;
    let h = g.gelu(h);
    linear(
        g,
        h,
        b.var(&format!("{prefix}.up.weight")),
        Some(b.var(&format!("{prefix}.up.bias"))),
    )
}

/// `gate_t(l) * Up(GELU(Down(x)))` for every token of `x [.., D]`.
pub fn temporal_delta<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let u = mlp(g, b, &format!("adapters.temporal.{layer}"), x)?;
    let gate = gate_var(g, b, cfg, AdapterKind::Temporal, layer)?;
    g.mul(u, gate)
}

/// `x + gate_t(l) * Up(GELU(Down(x)))`.
pub fn temporal_adapter<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let d = temporal_delta(g, b, cfg, layer, x)?;
    g.add(x, d)
}

/// `[B*M, T, D]` (channels of a sample contiguous) to `[B*T, M, D]`.
pub fn to_channel_major<T: Scalar>(g: &mut Graph<T>, x: Var, m: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[0].is_multiple_of(m) {
        return Err(Error::invalid(format!(
            "batch {s:?} is not divisible by {m} channels"
        )));
    }
    let (bsz, t, d) = (s[0] / m, s[1], s[2]);
    let y = g.reshape(x, vec![bsz, m, t, d])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, vec![bsz * t, m, d])
}

/// Inverse of [`to_channel_major`] for `t` tokens per series.
pub fn from_channel_major<T: Scalar>(g: &mut Graph<T>, x: Var, m: usize, t: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != m || t == 0 || !s[0].is_multiple_of(t) {
        return Err(Error::invalid(format!(
            "expected [B*{t}, {m}, D], got {s:?}"
        )));
    }
    let (bsz, d) = (s[0] / t, s[2]);
    let y = g.reshape(x, vec![bsz, t, m, d])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, vec![bsz * m, t, d])
}

/// Channel-mixing bottleneck on `x [B*T, M, D]`:
/// `gate_c(l) * MixUp(Up(GELU(Down(MixDown(x)))))`.
pub fn channel_delta<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let prefix = format!("adapters.channel.{layer}");
    let z = g.matmul(b.var(&format!("{prefix}.mix_down")), x)?;
    let z = mlp(g, b, &prefix, z)?;
    let z = g.matmul(b.var(&format!("{prefix}.mix_up")), z)?;
    let gate = gate_var(g, b, cfg, AdapterKind::Channel, layer)?;
    g.mul(z, gate)
}

/// Gated channel-mixing residual on tokens laid out `[B*M, T, D]`.
pub fn channel_adapter<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let t = g.shape(x)[1];
    let xc = to_channel_major(g, x, cfg.channels)?;
    let d = channel_delta(g, b, cfg, layer, xc)?;
    let d = from_channel_major(g, d, cfg.channels, t)?;
    g.add(x, d)
}

/// Prompts `[R, F, D]` from patches `[R, N, P]`: FFT across the patch axis,
/// complex projection `N/2+1 -> F/2+1` bins, inverse FFT to `F` slots, then `P -> D`.
pub fn frequency_adapter<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    patches: Var,
) -> Result<Var> {
    let f = cfg.adapters.prompts;
    if cfg.num_patches() + f > cfg.backbone.max_tokens {
        return Err(Error::TokenOverflow {
            tokens: cfg.num_patches() + f,
            max: cfg.backbone.max_tokens,
        });
    }
    let prefix = format!("adapters.frequency.{layer}");
    let y = frequency_resample(
        g,
        patches,
        b.var(&format!("{prefix}.w_re")),
        b.var(&format!("{prefix}.w_im")),
        f,
    )?;
    crate::backbone::linear(
        g,
        y,
        b.var(&format!("{prefix}.embed.weight")),
        Some(b.var(&format!("{prefix}.embed.bias"))),
    )
}

/// `iFFT_F(W * FFT_N(x))` along the token axis of `x [R, N, P]`, giving `[R, F, P]`.
pub fn frequency_resample<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w_re: Var,
    w_im: Var,
    f: usize,
) -> Result<Var> {
    let xt = g.transpose(x)?;
    let (re, im) = g.rfft(xt)?;
    let a = g.matmul(re, w_re)?;
    let c = g.matmul(im, w_im)?;
    let out_re = g.sub(a, c)?;
    let a = g.matmul(re, w_im)?;
    let c = g.matmul(im, w_re)?;
    let out_im = g.add(a, c)?;
    let y = g.irfft(out_re, out_im, f)?;
    g.transpose(y)
}

/// Per-head weight `gate_f(l) * mix_l` shaped `[1, H, 1, 1]` for the prompt attention.
pub fn prompt_mix<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<Var> {
    let gate = gate_var(g, b, cfg, AdapterKind::Frequency, layer)?;
    let mix = g.mul(b.var(&format!("adapters.frequency.{layer}.mix")), gate)?;
    g.reshape(mix, vec![1, cfg.backbone.num_heads, 1, 1])
}

/// `[tokens; prompts]` along the token axis; heads only ever read the first `N`.
pub fn attach_prompts<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    prompts: Var,
    max_tokens: usize,
) -> Result<Var> {
    let (n, f) = (g.shape(tokens)[1], g.shape(prompts)[1]);
    if n + f > max_tokens {
        return Err(Error::TokenOverflow {
            tokens: n + f,
            max: max_tokens,
        });
    }
    if f == 0 {
        return Ok(tokens);
    }
    g.concat(&[tokens, prompts], 1)
}

/// Per-layer 0/1 gate coefficients (1 iff `gate >= 0.5`) and raw gate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub lambda: f64,
    pub temporal: Vec<u8>,
    pub channel: Vec<u8>,
    pub frequency: Vec<u8>,
    pub values: GateValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateValues {
    pub temporal: Vec<f64>,
    pub channel: Vec<f64>,
    pub frequency: Vec<f64>,
}

pub fn coefficients(gs: &[f64], lambda: f64) -> (Vec<u8>, Vec<f64>) {
    let vals: Vec<f64> = gs.iter().map(|&x| gate(x, lambda)).collect();
    (vals.iter().map(|&v| u8::from(v >= 0.5)).collect(), vals)
}

/// `None` for models without adapters.
pub fn report_gate_coefficients<T: Scalar>(model: &Model<T>) -> Option<GateReport> {
    let lambda = model.config().adapters.lambda;
    let read = |kind: AdapterKind| -> Option<(Vec<u8>, Vec<f64>)> {
        let t = model.params().get(kind.gate_name())?;
        let gs: Vec<f64> = t.data().iter().map(|&v| to_f64(v)).collect();
        Some(coefficients(&gs, lambda))
    };
    let (tc, tv) = read(AdapterKind::Temporal)?;
    let (cc, cv) = read(AdapterKind::Channel)?;
    let (fc, fv) = read(AdapterKind::Frequency)?;
    Some(GateReport {
        lambda,
        temporal: tc,
        channel: cc,
        frequency: fc,
        values: GateValues {
            temporal: tv,
            channel: cv,
            frequency: fv,
        },
    })
}
