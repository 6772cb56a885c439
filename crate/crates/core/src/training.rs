//! Adam optimizer, the epoch loop with early stopping, few-shot subsetting,
//! zero-shot evaluation and percentage sweeps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOptions, Model, ParamStore, Variant};
use crate::data::{build_task_data, Dataset, SplitFractions, TaskData, WindowOptions};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalOptions, Evaluation};
use crate::metrics::MetricReport;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tasks_heads::{prepare_batch, task_loss, Sample};
use crate::tensor::{Graph, Tensor};

const STREAM_SHUFFLE: u64 = 10;
const STREAM_DROPOUT: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without strict validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Keep only this fraction (the end) of the training split.
    pub few_shot_fraction: Option<f64>,
    /// Overrides the model's variant before training.
    pub variant: Option<Variant>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Cap on batches per epoch (a random subset after shuffling).
    pub max_batches_per_epoch: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            few_shot_fraction: None,
            variant: None,
            max_steps: None,
            max_batches_per_epoch: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if let Some(f) = self.few_shot_fraction {
            check_fraction(f)?;
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::invalid(format!("fraction {f} outside (0, 1]")));
    }
    Ok(())
}

/// Adam with bias correction; only parameters that received a gradient move.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = |_: &crate::backbone::Param<T>| Vec::new();
        Self {
            lr,
            cfg,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// `grads` is indexed like the store (see [`crate::backbone::Bound::grads`]).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr: T = lit(self.lr);
        let (b1t, b2t, eps): (T, T, T) = (lit(b1), lit(b2), lit(self.cfg.eps));
        let (c1t, c2t): (T, T) = (lit(c1), lit(c2));
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = store.param_mut(i);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                *m = vec![T::zero(); grad.len()];
                *v = vec![T::zero(); grad.len()];
            }
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = b1t * m[j] + (T::one() - b1t) * gj;
                v[j] = b2t * v[j] + (T::one() - b2t) * gj * gj;
                let mh = m[j] / c1t;
                let vh = v[j] / c2t;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation loss; the training loss stands in when there is no validation data.
    pub val_loss: f64,
    pub steps: usize,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub total_steps: usize,
    pub trainable_tensors: usize,
    pub frozen_tensors: usize,
    pub trainable_scalars: usize,
    pub frozen_scalars: usize,
}

/// Mean loss over `samples` in eval mode, weighted by batch size.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let batch = prepare_batch(model.config(), &refs)?;
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let out = task_loss(model, &mut g, &b, &batch, ForwardOptions::eval(), &mut rng)?;
        total += to_f64(g.value(out.loss).item()) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place and restores the best-validation parameters.
///
/// Fails with [`Error::Diverged`] as soon as a batch loss is not finite.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("empty training set"));
    }
    if let Some(v) = cfg.variant {
        if v != model.config().variant {
            model.set_variant(v)?;
        }
    }
    let trainable_tensors = model.params().iter().filter(|p| p.trainable).count();
    let frozen_tensors = model.params().len() - trainable_tensors;
    log::info!(
        "variant {}: {} trainable tensors ({} scalars), {} frozen ({} scalars)",
        model.config().variant,
        trainable_tensors,
        model.params().trainable_count(),
        frozen_tensors,
        model.params().frozen_count()
    );
    let mut adam = Adam::new(model.params(), cfg.lr, cfg.adam);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(STREAM_SHUFFLE);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(STREAM_DROPOUT);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
        stopped_early: false,
        total_steps: 0,
        trainable_tensors,
        frozen_tensors,
        trainable_scalars: model.params().trainable_count(),
        frozen_scalars: model.params().frozen_count(),
    };
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut stale = 0usize;
    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let (mut sum, mut seen, mut steps) = (0.0, 0usize, 0usize);
        for (step, idx) in batches.into_iter().enumerate() {
            if cfg.max_steps.is_some_and(|cap| history.total_steps >= cap) {
                break;
            }
            let refs: Vec<&Sample<T>> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = prepare_batch(model.config(), &refs)?;
            let (loss, grads) = {
                let mut g = Graph::new();
                let b = model.params().bind(&mut g);
                let out = task_loss(
                    model,
                    &mut g,
                    &b,
                    &batch,
                    ForwardOptions::train(),
                    &mut drop_rng,
                )?;
                let loss = to_f64(g.value(out.loss).item());
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                g.backward(out.loss)?;
                (loss, b.grads(&g))
            };
            adam.step(model.params_mut(), &grads);
            sum += loss * idx.len() as f64;
            seen += idx.len();
            steps += 1;
            history.total_steps += 1;
        }
        if steps == 0 {
            break;
        }
        let train_loss = sum / seen as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_loss(model, val_set, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps,
                loss: val_loss,
            });
        }
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6}{}",
            if improved { " *" } else { "" }
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            steps,
            improved,
        });
        if improved {
            best = Some((
                val_loss,
                model.params().iter().map(|p| p.value.clone()).collect(),
            ));
            history.best_epoch = Some(epoch);
            history.best_val_loss = Some(val_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break 'epochs;
            }
        }
        if cfg.max_steps.is_some_and(|cap| history.total_steps >= cap) {
            break;
        }
    }
    if let Some((_, values)) = best {
        for (i, v) in values.into_iter().enumerate() {
            model.params_mut().param_mut(i).value = v;
        }
    }
    Ok(history)
}

/// The last `floor(fraction * L)` timesteps of a channel-major training split.
///
/// Errors when fewer than `required` (context plus horizon) points remain.
pub fn few_shot_subset<V: Clone>(
    series: &[Vec<V>],
    fraction: f64,
    required: usize,
) -> Result<Vec<Vec<V>>> {
    check_fraction(fraction)?;
    let len = series.first().map_or(0, Vec::len);
    let keep = (fraction * len as f64).floor() as usize;
    if keep < required {
        return Err(Error::InsufficientData {
            required,
            available: keep,
        });
    }
    Ok(series.iter().map(|c| c[len - keep..].to_vec()).collect())
}

/// Evaluates a model on another dataset's test windows without training.
///
/// The parameter hash is taken before and after; any difference is an error.
pub fn zero_shot_eval<T: Scalar>(
    model: &Model<T>,
    target: &TaskData<T>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let before = model.params().hash();
    let out = evaluate(model, target, opts)?;
    if model.params().hash() != before {
        return Err(Error::EvalMutation);
    }
    Ok(out)
}

/// Target windows for zero-shot evaluation: the test split cut into
/// non-overlapping context/horizon sequences.
pub fn zero_shot_data<T: Scalar>(
    ds: &Dataset,
    fractions: SplitFractions,
    cfg: &crate::backbone::ModelConfig,
) -> Result<TaskData<T>> {
    let span = cfg.patch.context_len + cfg.task.horizon().unwrap_or(0);
    let opts = WindowOptions {
        stride: span,
        eval_stride: span,
        fraction: None,
        seed: 0,
    };
    build_task_data(ds, fractions, cfg, &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_len: Option<usize>,
    pub epochs: Option<usize>,
    pub metrics: Option<MetricReport>,
    /// Set when the fraction leaves too little data to train.
    pub note: Option<String>,
}

/// One fresh copy of `base` trained per fraction with the same seeds.
/// Fractions too small to form a window yield a row without metrics.
pub fn run_percentage_sweep<T: Scalar>(
    base: &Model<T>,
    ds: &Dataset,
    fractions: SplitFractions,
    windows: &WindowOptions,
    cfg: &TrainConfig,
    eval: &EvalOptions,
    percentages: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(percentages.len());
    for &f in percentages {
        check_fraction(f)?;
        let w = WindowOptions {
            fraction: Some(f),
            ..*windows
        };
        let data = match build_task_data::<T>(ds, fractions, base.config(), &w) {
            Ok(d) => d,
            Err(e @ Error::InsufficientData { .. }) => {
                rows.push(SweepRow {
                    fraction: f,
                    train_len: None,
                    epochs: None,
                    metrics: None,
                    note: Some(e.to_string()),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut model = base.clone();
        let hist = train(&mut model, &data.train, &data.val, cfg)?;
        let ev = evaluate(&model, &data, eval)?;
        rows.push(SweepRow {
            fraction: f,
            train_len: Some(data.train_len),
            epochs: Some(hist.epochs.len()),
            metrics: Some(ev.report),
            note: None,
        });
    }
    Ok(rows)
}

/// `fraction,train_len,<metrics...>,note` with one line per sweep row.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut cols: Vec<String> = rows
        .iter()
        .filter_map(|r| r.metrics.as_ref())
        .flat_map(|m| m.values.keys().cloned())
        .collect();
    cols.sort();
    cols.dedup();
    let mut out = format!("fraction,train_len,{},note\n", cols.join(","));
    for r in rows {
        out.push_str(&format!(
            "{},{}",
            r.fraction,
            r.train_len.map_or(String::new(), |n| n.to_string())
        ));
        for c in &cols {
            out.push(',');
            if let Some(v) = r.metrics.as_ref().and_then(|m| m.get(c)) {
                out.push_str(&format!("{v}"));
            }
        }
        out.push(',');
        out.push_str(&r.note.clone().unwrap_or_default().replace(',', ";"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::testutil::tiny;

    fn sinusoid(len: usize, channels: usize) -> Dataset {
        let spec = SyntheticSpec::SinusoidMix {
            length: len,
            channels,
            periods: vec![12.0, 30.0],
            amplitudes: vec![1.0, 0.5],
            noise: 0.05,
        };
        generate_synthetic(&spec, 1).unwrap()
    }

    fn setup(variant: Variant) -> (Model<f64>, TaskData<f64>) {
        let cfg = tiny(2, 8, 1, variant);
        let ds = sinusoid(400, 1);
        let w = WindowOptions {
            stride: 4,
            eval_stride: 8,
            ..Default::default()
        };
        let data = build_task_data(&ds, SplitFractions::STANDARD, &cfg, &w).unwrap();
        (Model::new(cfg).unwrap(), data)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: epochs,
            lr: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "w",
            Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            true,
        );
        store.insert("frozen", Tensor::new(vec![1], vec![5.0]).unwrap(), false);
        let mut adam = Adam::new(&store, 0.1, AdamConfig::default());
        adam.step(&mut store, &[Some(vec![0.5, -2.0, 0.0]), Some(vec![1.0])]);
        let w = store.get("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(store.get("frozen").unwrap().data(), &[5.0]);
    }

    #[test]
    fn zero_lr_is_flat_and_stops_after_patience() {
        let (mut model, data) = setup(Variant::Frozen);
        let before = model.params().hash();
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick(20)
        };
        let h = train(&mut model, &data.train, &data.val, &cfg).unwrap();
        assert_eq!(model.params().hash(), before);
        assert_eq!(h.epochs.len(), 1 + cfg.patience);
        assert!(h.stopped_early);
        assert!(h.epochs.windows(2).all(|w| w[0].val_loss == w[1].val_loss));
        assert_eq!(h.best_epoch, Some(1));
    }

    #[test]
    fn freeze_contract_holds_per_variant() {
        for variant in [Variant::Frozen, Variant::Adapter, Variant::NoFreeze] {
            let (mut model, data) = setup(variant);
            let frozen_before: Vec<(String, Tensor<f64>)> = model
                .params()
                .iter()
                .filter(|p| p.name.starts_with("h."))
                .filter(|p| p.name.contains(".attn.") || p.name.contains(".mlp."))
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect();
            let cfg = TrainConfig {
                max_steps: Some(10),
                ..quick(5)
            };
            train(&mut model, &data.train, &[], &cfg).unwrap();
            let changed = frozen_before
                .iter()
                .filter(|(n, v)| model.params().get(n).unwrap() != v)
                .count();
            if variant == Variant::NoFreeze {
                assert_eq!(changed, frozen_before.len(), "{variant}");
            } else {
                assert_eq!(changed, 0, "{variant}");
            }
        }
    }

    #[test]
    fn census_matches_variant() {
        let (mut model, data) = setup(Variant::Frozen);
        let h = train(
            &mut model,
            &data.train[..8],
            &[],
            &TrainConfig {
                max_steps: Some(1),
                ..quick(1)
            },
        )
        .unwrap();
        // per layer: ln_1, ln_2 (weight+bias); plus wpe, ln_f, embed, head
        assert_eq!(h.trainable_tensors, 2 * 4 + 1 + 2 + 2 + 2);
        assert_eq!(h.frozen_tensors, 2 * 8);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, data) = setup(Variant::Frozen);
        let cfg = TrainConfig {
            lr: 1e200,
            ..quick(3)
        };
        assert!(matches!(
            train(&mut model, &data.train, &data.val, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let (base, data) = setup(Variant::Adapter);
        let cfg = quick(3);
        let mut a = base.clone();
        let ha = train(&mut a, &data.train, &data.val, &cfg).unwrap();
        let mut b = base.clone();
        let hb = train(&mut b, &data.train, &data.val, &cfg).unwrap();
        assert_eq!(a.params().hash(), b.params().hash());
        assert_eq!(ha, hb);
        let best = ha.best_val_loss.unwrap();
        assert_eq!(evaluate_loss(&a, &data.val, cfg.batch_size).unwrap(), best);
    }

    #[test]
    fn few_shot_examples() {
        let s = vec![(0..10_000).collect::<Vec<u32>>()];
        assert_eq!(few_shot_subset(&s, 1.0, 10).unwrap(), s);
        let cut = few_shot_subset(&s, 0.1, 10).unwrap();
        assert_eq!(cut[0].len(), 1000);
        assert_eq!(cut[0][0], 9000);
        let tiny = vec![(0..100).collect::<Vec<u32>>()];
        assert!(matches!(
            few_shot_subset(&tiny, 0.05, 96 + 24),
            Err(Error::InsufficientData {
                required: 120,
                available: 5
            })
        ));
        assert!(few_shot_subset(&s, 0.0, 1).is_err());
        assert!(few_shot_subset(&s, 1.5, 1).is_err());
    }

    #[test]
    fn zero_shot_leaves_the_model_untouched() {
        let (mut model, data) = setup(Variant::Frozen);
        train(&mut model, &data.train, &data.val, &quick(2)).unwrap();
        let opts = EvalOptions::default();
        let same = zero_shot_eval(&model, &data, &opts).unwrap();
        assert_eq!(same, evaluate(&model, &data, &opts).unwrap());

        let shifted = generate_synthetic(
            &SyntheticSpec::SinusoidMix {
                length: 500,
                channels: 1,
                periods: vec![24.0],
                amplitudes: vec![3.0],
                noise: 0.1,
            },
            5,
        )
        .unwrap();
        let target =
            zero_shot_data::<f64>(&shifted, SplitFractions::STANDARD, model.config()).unwrap();
        let hash = model.params().hash();
        let ev = zero_shot_eval(&model, &target, &opts).unwrap();
        assert!(ev.report.get("mse").unwrap().is_finite());
        assert_eq!(model.params().hash(), hash);
        // non-overlapping windows: L + O = 38 points each over a 100 + 32 point test segment
        assert_eq!(target.test.len(), 3);
    }

    #[test]
    fn sweep_emits_one_row_per_fraction() {
        let (model, _) = setup(Variant::Frozen);
        let ds = sinusoid(400, 1);
        let w = WindowOptions {
            stride: 8,
            eval_stride: 16,
            ..Default::default()
        };
        let cfg = TrainConfig {
            max_steps: Some(2),
            ..quick(1)
        };
        let fr = [0.05, 0.1, 0.2, 0.5, 0.8, 1.0];
        let rows = run_percentage_sweep(
            &model,
            &ds,
            SplitFractions::STANDARD,
            &w,
            &cfg,
            &EvalOptions::default(),
            &fr,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        // 5% of 280 points is 14 < 38
        assert!(rows[0].metrics.is_none() && rows[0].note.is_some());
        assert!(rows[5].metrics.as_ref().unwrap().get("mse").is_some());
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        let single = run_percentage_sweep(
            &model,
            &ds,
            SplitFractions::STANDARD,
            &w,
            &cfg,
            &EvalOptions::default(),
            &[1.0],
        )
        .unwrap();
        assert_eq!(single[0], rows[5]);
    }
}
