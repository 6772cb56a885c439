use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::attention;
use super::*;
use crate::check::model_gradient_error;
use crate::tasks_heads::{prepare_batch, task_loss, Sample, SampleTarget};
use crate::tensor::{Graph, Tensor};
use crate::testutil::tiny;

fn forecast_batch(
    cfg: &ModelConfig,
    samples: usize,
    seed: u64,
) -> crate::tasks_heads::TaskBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.patch.context_len;
    let o = cfg.task.horizon().unwrap();
    let owned: Vec<Sample<f64>> = (0..samples)
        .map(|_| {
            let series: Vec<Vec<f64>> = (0..cfg.channels)
                .map(|_| Tensor::<f64>::randn(vec![l + o], 1.0, &mut rng).into_data())
                .collect();
            Sample {
                input: series.iter().map(|s| s[..l].to_vec()).collect(),
                target: SampleTarget::Forecast(series.iter().map(|s| s[l..].to_vec()).collect()),
            }
        })
        .collect();
    let refs: Vec<&Sample<f64>> = owned.iter().collect();
    prepare_batch(cfg, &refs).unwrap()
}

#[test]
fn embed_input_examples() {
    let mut cfg = tiny(1, 8, 1, Variant::Frozen);
    cfg.patch = crate::preprocessing::PatchConfig::new(8, 8, 32).unwrap();
    let mut m = Model::<f64>::new(cfg).unwrap();
    for name in ["wpe.weight", "embed.bias"] {
        let t = m.params_mut().get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let mut g = Graph::new();
    let b = m.params().bind(&mut g);
    let x = g.constant(Tensor::zeros(vec![1, 4, 8]));
    let y = m.embed_input(&mut g, &b, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // P == D with an identity embedding: token i = patch i + pos[i]
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    *m.params_mut().get_mut("embed.weight").unwrap() = Tensor::eye(8);
    let pos = Tensor::<f64>::randn(vec![16, 8], 1.0, &mut rng);
    *m.params_mut().get_mut("wpe.weight").unwrap() = pos.clone();
    let patches = Tensor::<f64>::randn(vec![1, 4, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let b = m.params().bind(&mut g);
    let x = g.constant(patches.clone());
    let y = m.embed_input(&mut g, &b, x).unwrap();
    for i in 0..4 {
        for j in 0..8 {
            let want = patches.at(&[0, i, j]) + pos.at(&[i, j]);
            assert!((g.value(y).at(&[0, i, j]) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn embed_shapes_and_overflow() {
    let mut cfg = tiny(1, 64, 1, Variant::Frozen);
    cfg.patch = crate::preprocessing::PatchConfig::new(16, 16, 256).unwrap();
    cfg.backbone.max_tokens = 16;
    let m = Model::<f64>::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let b = m.params().bind(&mut g);
    let x = g.constant(Tensor::zeros(vec![1, 16, 16]));
    let y = m.embed_input(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 64]);
    let x = g.constant(Tensor::zeros(vec![1, 17, 16]));
    assert!(matches!(
        m.embed_input(&mut g, &b, x),
        Err(Error::TokenOverflow { .. })
    ));
    cfg.variant = Variant::Adapter;
    assert!(matches!(
        Model::<f64>::new(cfg),
        Err(Error::TokenOverflow { .. })
    ));
}

#[test]
fn single_token_passes_through_identity_attention() {
    let mut cfg = tiny(1, 4, 1, Variant::Frozen);
    cfg.backbone.num_heads = 1;
    let mut m = Model::<f64>::new(cfg.clone()).unwrap();
    let eye = Tensor::<f64>::eye(4);
    let qkv = Tensor::from_fn(vec![4, 12], |k| eye.data()[(k / 12) * 4 + (k % 12) % 4]);
    *m.params_mut().get_mut("h.0.attn.c_attn.weight").unwrap() = qkv;
    *m.params_mut().get_mut("h.0.attn.c_proj.weight").unwrap() = eye;
    let mut g = Graph::new();
    let b = m.params().bind(&mut g);
    let x = Tensor::new(vec![1, 1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let xv = g.constant(x.clone());
    let (out, probs) = attention(&mut g, &b, &cfg, 0, xv, None, false).unwrap();
    assert_eq!(g.value(probs).data(), &[1.0]);
    assert!(g.value(out).max_abs_diff(&x) < 1e-15);
}

#[test]
fn gradient_reaches_input_embedding_through_frozen_blocks() {
    let cfg = tiny(3, 16, 1, Variant::Frozen);
    let m = Model::<f64>::new(cfg.clone()).unwrap();
    let batch = forecast_batch(&cfg, 4, 2);
    let mut g = Graph::new();
    let b = m.params().bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = task_loss(&m, &mut g, &b, &batch, ForwardOptions::eval(), &mut rng).unwrap();
    assert!(g.value(out.loss).item() > 0.0);
    assert!(g.value(out.trace.output).is_finite());
    g.backward(out.loss).unwrap();
    let grad = g.grad(b.var("embed.weight")).unwrap();
    assert!(grad.iter().map(|v| v * v).sum::<f64>() > 0.0);
    assert!(g.grad(b.var("h.1.attn.c_attn.weight")).is_none());
}

#[test]
fn variants_set_the_trainable_census() {
    let cfg = tiny(2, 8, 1, Variant::Frozen);
    let mut m = Model::<f64>::new(cfg).unwrap();
    let is_trainable_kind = |n: &str| {
        n.contains("ln_")
            || n.starts_with("wpe.")
            || n.starts_with("embed.")
            || n.starts_with("head.")
    };
    for p in m.params().iter() {
        assert_eq!(p.trainable, is_trainable_kind(&p.name), "{}", p.name);
    }
    let frozen_attn = m.params().get("h.0.attn.c_attn.weight").unwrap().clone();

    m.set_variant(Variant::NoFreeze).unwrap();
    assert_eq!(m.params().frozen_count(), 0);
    assert_eq!(
        m.params().get("h.0.attn.c_attn.weight").unwrap(),
        &frozen_attn
    );

    m.set_variant(Variant::NoPretrainFreeze).unwrap();
    assert_ne!(
        m.params().get("h.0.attn.c_attn.weight").unwrap(),
        &frozen_attn
    );
    for p in m.params().iter() {
        assert_eq!(p.trainable, is_trainable_kind(&p.name), "{}", p.name);
    }

    m.set_variant(Variant::Adapter).unwrap();
    for p in m.params().iter() {
        let want = is_trainable_kind(&p.name)
            || p.name.starts_with("adapters.")
            || p.name.starts_with("gates.");
        assert_eq!(p.trainable, want, "{}", p.name);
    }
    m.set_variant(Variant::Frozen).unwrap();
    assert!(!m.params().iter().any(|p| p.name.starts_with("adapters.")));
}

#[test]
fn composed_model_matches_finite_differences() {
    for variant in [Variant::Frozen, Variant::Adapter] {
        let mut cfg = tiny(2, 8, 2, variant);
        cfg.adapters.prompts = 3;
        let mut m = Model::<f64>::new(cfg.clone()).unwrap();
        // wake the zero-initialized paths so every parameter matters
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in m.params_mut().iter_mut() {
            if p.name.starts_with("adapters.") || p.name.starts_with("gates.") {
                p.value = Tensor::randn(p.value.shape().to_vec(), 0.2, &mut rng);
            }
        }
        let batch = forecast_batch(&cfg, 2, 9);
        let err = model_gradient_error(&m, &batch, 6, 1e-5, 1).unwrap();
        assert!(err < 1e-6, "{variant}: {err}");
    }
}

#[test]
fn causal_flag_masks_future_tokens() {
    let mut cfg = tiny(1, 8, 1, Variant::Frozen);
    cfg.backbone.causal = true;
    let m = Model::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(vec![1, 7, 8], 1.0, &mut rng);
    let (_, _, attn) = m.predict(&x, true).unwrap();
    let a = &attn[0];
    for i in 0..7 {
        for j in i + 1..7 {
            assert!(a.at(&[0, i, j]) < 1e-12);
        }
    }
}
