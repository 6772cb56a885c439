use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::params::{Bound, ParamStore};
use super::{ModelConfig, Variant};
use crate::adapters;
use crate::anomaly_adapter;
use crate::error::{Error, Result};
use crate::linalg::project_top_components;
use crate::scalar::{lit, Scalar};
use crate::tasks_heads;
use crate::tensor::{Graph, Tensor, Var};

/// What the attention sub-layer computes; the analysis suite swaps it out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Standard,
    /// Projection of each sample's attention input onto its top `rank` principal directions.
    Pca { rank: usize },
    /// Pass the attention input through unchanged.
    Identity,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train: bool,
    /// Record per-layer token states and head-averaged attention.
    pub capture: bool,
    pub attention: AttentionMode,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn capture(mut self) -> Self {
        self.capture = true;
        self
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Task head output.
    pub output: Var,
    /// Final normalized patch tokens `[R, N, D]`.
    pub tokens: Var,
    /// Embedded input followed by each block's output (captured runs only).
    pub states: Vec<Var>,
    /// Head-averaged patch-token attention `[R, N, N]` per layer (captured runs only).
    pub attention: Vec<Var>,
}

/// Backbone, adapters and task head with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

pub(crate) const STREAM_BACKBONE: u64 = 0;
pub(crate) const STREAM_IO: u64 = 1;
pub(crate) const STREAM_ADAPTERS: u64 = 2;
pub(crate) const STREAM_FRESH: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for fresh linear layers.
pub(crate) fn uniform_init<T: Scalar, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -a, a, rng)
}

fn is_frozen_backbone(name: &str) -> bool {
    name.starts_with("h.") && (name.contains(".attn.") || name.contains(".mlp."))
}

/// Names of the tensors a pretrained checkpoint provides.
pub(crate) fn is_backbone_tensor(name: &str) -> bool {
    name.starts_with("h.") || name.starts_with("wpe.") || name.starts_with("ln_f.")
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config,
            params: ParamStore::new(),
        };
        let stream = if model.config.variant.uses_pretrained() {
            STREAM_BACKBONE
        } else {
            STREAM_FRESH
        };
        model.init_backbone(stream);
        let mut io = stream_rng(model.config.seed, STREAM_IO);
        let (p, d) = (model.config.patch.patch_len, model.config.backbone.d_model);
        model
            .params
            .insert("embed.weight", uniform_init(vec![p, d], p, &mut io), true);
        model
            .params
            .insert("embed.bias", uniform_init(vec![d], p, &mut io), true);
        tasks_heads::init_head(&model.config, &mut model.params, &mut io);
        model.sync_adapters();
        model.apply_freeze();
        Ok(model)
    }

    /// Builds a model and copies the backbone tensors of `ckpt` into it.
    pub fn from_pretrained(config: ModelConfig, ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut m = Self::new(config)?;
        if m.config.variant.uses_pretrained() {
            m.load_pretrained(ckpt)?;
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Reassembles a model from a config and a full parameter set.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone())?;
        for p in reference.params.iter() {
            let got = params
                .get(&p.name)
                .ok_or_else(|| Error::CheckpointMissing(p.name.clone()))?;
            if got.shape() != p.value.shape() {
                return Err(Error::CheckpointShape {
                    name: p.name.clone(),
                    found: got.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
        }
        let mut model = Self { config, params };
        model.apply_freeze();
        Ok(model)
    }

    fn init_backbone(&mut self, stream: u64) {
        let cfg = &self.config.backbone;
        let (d, h) = (cfg.d_model, cfg.ffn_hidden);
        let mut rng = stream_rng(self.config.seed, stream);
        let std = 0.02;
        let p = &mut self.params;
        p.insert(
            "wpe.weight",
            Tensor::randn(vec![cfg.max_tokens, d], std, &mut rng),
            true,
        );
        for l in 0..cfg.num_layers {
            let n = |s: &str| format!("h.{l}.{s}");
            p.insert(n("ln_1.weight"), Tensor::ones(vec![d]), true);
            p.insert(n("ln_1.bias"), Tensor::zeros(vec![d]), true);
            p.insert(
                n("attn.c_attn.weight"),
                Tensor::randn(vec![d, 3 * d], std, &mut rng),
                false,
            );
            p.insert(n("attn.c_attn.bias"), Tensor::zeros(vec![3 * d]), false);
            p.insert(
                n("attn.c_proj.weight"),
                Tensor::randn(vec![d, d], std, &mut rng),
                false,
            );
            p.insert(n("attn.c_proj.bias"), Tensor::zeros(vec![d]), false);
            p.insert(n("ln_2.weight"), Tensor::ones(vec![d]), true);
            p.insert(n("ln_2.bias"), Tensor::zeros(vec![d]), true);
            p.insert(
                n("mlp.c_fc.weight"),
                Tensor::randn(vec![d, h], std, &mut rng),
                false,
            );
            p.insert(n("mlp.c_fc.bias"), Tensor::zeros(vec![h]), false);
            p.insert(
                n("mlp.c_proj.weight"),
                Tensor::randn(vec![h, d], std, &mut rng),
                false,
            );
            p.insert(n("mlp.c_proj.bias"), Tensor::zeros(vec![d]), false);
        }
        p.insert("ln_f.weight", Tensor::ones(vec![d]), true);
        p.insert("ln_f.bias", Tensor::zeros(vec![d]), true);
    }

    /// Adds or drops adapter parameters to match the variant.
    fn sync_adapters(&mut self) {
        if self.config.variant.has_adapters() {
            if !self.params.contains(adapters::GATE_TEMPORAL) {
                let mut rng = stream_rng(self.config.seed, STREAM_ADAPTERS);
                adapters::init_params(&self.config, &mut self.params, &mut rng);
                anomaly_adapter::init_params(&self.config, &mut self.params);
            }
        } else {
            self.params.remove_prefix(adapters::PREFIX);
            self.params.remove_prefix(adapters::GATE_PREFIX);
            self.params.remove_prefix(anomaly_adapter::PREFIX);
        }
    }

    fn apply_freeze(&mut self) {
        let freeze = self.config.variant.freezes_backbone();
        self.params
            .set_trainable(|name| !(freeze && is_frozen_backbone(name)));
    }

    /// Switches freeze policy, adapter slots and (for `no_pretrain*`) re-initializes the backbone.
    pub fn set_variant(&mut self, variant: Variant) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.variant = variant;
        cfg.validate()?;
        let was_pretrained = self.config.variant.uses_pretrained();
        self.config = cfg;
        if was_pretrained && !variant.uses_pretrained() {
            self.init_backbone(STREAM_FRESH);
        }
        self.sync_adapters();
        self.apply_freeze();
        Ok(())
    }

    /// Overwrites backbone tensors with those in `ckpt`.
    pub fn load_pretrained(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|p| is_backbone_tensor(&p.name))
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let src = ckpt
                .params
                .get(&name)
                .ok_or_else(|| Error::CheckpointMissing(name.clone()))?;
            let dst = self.params.get_mut(&name).expect("listed above");
            if src.shape() != dst.shape() {
                return Err(Error::CheckpointShape {
                    name,
                    found: src.shape().to_vec(),
                    expected: dst.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Tokens `[R, N, D]`: `patches @ W_emb + b_emb + pos[0..N]`.
    pub fn embed_input(&self, g: &mut Graph<T>, b: &Bound<'_, T>, patches: Var) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        if shape.len() != 3 || shape[2] != self.config.patch.patch_len {
            return Err(Error::invalid(format!(
                "expected patches [rows, N, {}], got {shape:?}",
                self.config.patch.patch_len
            )));
        }
        let n = shape[1];
        let budget = self
            .config
            .backbone
            .max_tokens
            .saturating_sub(self.config.prompt_count());
        if n > budget {
            return Err(Error::TokenOverflow {
                tokens: n + self.config.prompt_count(),
                max: self.config.backbone.max_tokens,
            });
        }
        let x = linear(g, patches, b.var("embed.weight"), Some(b.var("embed.bias")))?;
        let pos = g.slice(b.var("wpe.weight"), 0, 0, n)?;
        g.add(x, pos)
    }

    /// Full forward pass from patches `[R, N, P]` with `R = samples * channels`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Bound<'_, T>,
        patches: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let rows = g.shape(patches)[0];
        let m = self.config.channels;
        if rows == 0 || !rows.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "batch of {rows} rows is not divisible by {m} channels"
            )));
        }
        let p = self.config.backbone.dropout;
        let mut x = self.embed_input(g, b, patches)?;
        if opts.train {
            x = g.dropout(x, p, rng);
        }
        let mut states = Vec::new();
        let mut attention = Vec::new();
        if opts.capture {
            states.push(x);
        }
        for l in 0..self.config.backbone.num_layers {
            let (out, attn) = self.forward_block(g, b, l, x, patches, opts, rng)?;
            x = out;
            if opts.capture {
                states.push(x);
                if let Some(a) = attn {
                    attention.push(a);
                }
            }
        }
        let eps = lit(self.config.backbone.ln_eps);
        let tokens = g.layer_norm(x, b.var("ln_f.weight"), b.var("ln_f.bias"), eps)?;
        let output = tasks_heads::head_forward(g, b, &self.config, tokens)?;
        Ok(ForwardTrace {
            output,
            tokens,
            states,
            attention,
        })
    }

    /// One pre-norm block: `x + MHA(LN(x)) [+ adapters]`, then `+ FFN(LN(.))`.
    /// Also returns the head-averaged patch attention when `opts.capture` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &Bound<'_, T>,
        layer: usize,
        x: Var,
        patches: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;
        if layer >= cfg.backbone.num_layers {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        let t = g.shape(x)[1];
        if t > cfg.backbone.max_tokens {
            return Err(Error::TokenOverflow {
                tokens: t,
                max: cfg.backbone.max_tokens,
            });
        }
        let eps = lit(cfg.backbone.ln_eps);
        let name = |s: &str| format!("h.{layer}.{s}");
        let h1 = g.layer_norm(
            x,
            b.var(&name("ln_1.weight")),
            b.var(&name("ln_1.bias")),
            eps,
        )?;
        let adapters_on = cfg.variant.has_adapters() && opts.attention == AttentionMode::Standard;
        let mut probs = None;
        let mut a = match opts.attention {
            AttentionMode::Standard => {
                let prompts = if adapters_on && cfg.adapters.frequency {
                    let pr = adapters::frequency_adapter(g, b, cfg, layer, patches)?;
                    let hp = g.layer_norm(
                        pr,
                        b.var(&name("ln_1.weight")),
                        b.var(&name("ln_1.bias")),
                        eps,
                    )?;
                    Some((hp, adapters::prompt_mix(g, b, cfg, layer)?))
                } else {
                    None
                };
                let (a, p) = attention(g, b, cfg, layer, h1, prompts, cfg.backbone.causal)?;
                probs = Some(p);
                a
            }
            AttentionMode::Identity => h1,
            AttentionMode::Pca { rank } => {
                let v = g.value(h1);
                let (r, n, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let mut out = Vec::with_capacity(v.len());
                for i in 0..r {
                    let xi =
                        Tensor::new(vec![n, d], v.data()[i * n * d..(i + 1) * n * d].to_vec())?;
                    out.extend(project_top_components(&xi, rank)?.into_data());
                }
                g.constant(Tensor::new(vec![r, n, d], out)?)
            }
        };
        if adapters_on {
            if cfg.adapters.temporal {
                let dt = adapters::temporal_delta(g, b, cfg, layer, a)?;
                a = g.add(a, dt)?;
            }
            if cfg.adapters.channel {
                let hc = adapters::to_channel_major(g, h1, cfg.channels)?;
                let (ac, _) = attention(g, b, cfg, layer, hc, None, false)?;
                let dc = adapters::channel_delta(g, b, cfg, layer, ac)?;
                let dc = adapters::from_channel_major(g, dc, cfg.channels, t)?;
                a = g.add(a, dc)?;
            }
        }
        if opts.train {
            a = g.dropout(a, cfg.backbone.dropout, rng);
        }
        let x = g.add(x, a)?;
        let h2 = g.layer_norm(
            x,
            b.var(&name("ln_2.weight")),
            b.var(&name("ln_2.bias")),
            eps,
        )?;
        let f = linear(
            g,
            h2,
            b.var(&name("mlp.c_fc.weight")),
            Some(b.var(&name("mlp.c_fc.bias"))),
        )?;
        let f = g.gelu(f);
        let mut f = linear(
            g,
            f,
            b.var(&name("mlp.c_proj.weight")),
            Some(b.var(&name("mlp.c_proj.bias"))),
        )?;
        if opts.train {
            f = g.dropout(f, cfg.backbone.dropout, rng);
        }
        let out = g.add(x, f)?;
        let attn = match (opts.capture, probs) {
            (true, Some(p)) => Some(g.mean_axis(p, 1)?),
            _ => None,
        };
        Ok((out, attn))
    }

    /// Eval-mode forward on a constant input; returns output and trace values.
    pub fn predict(
        &self,
        patches: &Tensor<T>,
        capture: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let x = g.constant(patches.clone());
        let mut opts = ForwardOptions::eval();
        opts.capture = capture;
        let mut rng = stream_rng(0, 0);
        let tr = self.forward(&mut g, &b, x, opts, &mut rng)?;
        let states = tr.states.iter().map(|&v| g.value(v).clone()).collect();
        let attn = tr.attention.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(tr.output).clone(), states, attn))
    }
}

/// `x @ w (+ bias)` over the last axis of `x`, any rank >= 2.
pub(crate) fn linear<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let din = *shape.last().unwrap_or(&0);
    let dout = g.shape(w)[1];
    let rows = shape.iter().product::<usize>() / din.max(1);
    let x2 = if shape.len() == 2 {
        x
    } else {
        g.reshape(x, vec![rows, din])?
    };
    let mut y = g.matmul(x2, w)?;
    if let Some(bv) = bias {
        y = g.add(y, bv)?;
    }
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out = shape;
    *out.last_mut().unwrap() = dout;
    g.reshape(y, out)
}

/// Multi-head attention over `x [R, T, D]` (already layer-normed).
///
/// Optional prompts `[R, F, D]` act as extra keys and values; their softmax is
/// taken separately and scaled per head by `mix [1, H, 1, 1]`, so a zero mix
/// leaves the patch-token output untouched. Returns the output and the
/// patch-token probabilities `[R, H, T, T]`.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    prompts: Option<(Var, Var)>,
    causal: bool,
) -> Result<(Var, Var)> {
    let (r, t, d) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let heads = cfg.backbone.num_heads;
    let dh = d / heads;
    let name = |s: &str| format!("h.{layer}.attn.{s}");
    let (full, f) = match prompts {
        Some((p, _)) => {
            let f = g.shape(p)[1];
            (
                adapters::attach_prompts(g, x, p, cfg.backbone.max_tokens)?,
                f,
            )
        }
        None => (x, 0),
    };
    let qkv = linear(
        g,
        full,
        b.var(&name("c_attn.weight")),
        Some(b.var(&name("c_attn.bias"))),
    )?;
    let q = g.slice(qkv, 2, 0, d)?;
    let q = g.slice(q, 1, 0, t)?;
    let k = g.slice(qkv, 2, d, d)?;
    let v = g.slice(qkv, 2, 2 * d, d)?;
    let split = |g: &mut Graph<T>, z: Var, len: usize, keys: bool| -> Result<Var> {
        let z = g.reshape(z, vec![r, len, heads, dh])?;
        g.permute(z, if keys { &[0, 2, 3, 1] } else { &[0, 2, 1, 3] })
    };
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let qh = split(g, q, t, false)?;
    let kt = g.slice(k, 1, 0, t)?;
    let vt = g.slice(v, 1, 0, t)?;
    let kh = split(g, kt, t, true)?;
    let vh = split(g, vt, t, false)?;
    let s = g.matmul(qh, kh)?;
    let mut s = g.scale(s, scale);
    if causal {
        let mask = Tensor::from_fn(vec![t, t], |i| {
            if i % t > i / t {
                lit(-1e9)
            } else {
                T::zero()
            }
        });
        let mask = g.constant(mask);
        s = g.add(s, mask)?;
    }
    let probs = g.softmax(s);
    let mut ctx = g.matmul(probs, vh)?;
    if let Some((_, mix)) = prompts {
        let kp = g.slice(k, 1, t, f)?;
        let vp = g.slice(v, 1, t, f)?;
        let kph = split(g, kp, f, true)?;
        let vph = split(g, vp, f, false)?;
        let sp = g.matmul(qh, kph)?;
        let sp = g.scale(sp, scale);
        let pp = g.softmax(sp);
        let cp = g.matmul(pp, vph)?;
        let cp = g.mul(cp, mix)?;
        ctx = g.add(ctx, cp)?;
    }
    let merged = g.permute(ctx, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, vec![r, t, d])?;
    let out = linear(
        g,
        merged,
        b.var(&name("c_proj.weight")),
        Some(b.var(&name("c_proj.bias"))),
    )?;
    Ok((out, probs))
}
