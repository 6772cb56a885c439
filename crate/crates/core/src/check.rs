//! Central finite-difference oracles used to validate reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anomaly_adapter;
use crate::backbone::{ForwardOptions, Model};
use crate::error::Result;
use crate::scalar::{lit, Scalar};
use crate::tasks_heads::{task_loss, TaskBatch};
use crate::tensor::{Graph, Tensor};

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<T: Scalar>(
    x: &Tensor<T>,
    h: T,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> Vec<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (lit::<T>(2.0) * h));
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    let diff = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let denom = na.max(nb);
    if denom == T::zero() {
        T::zero()
    } else {
        diff / denom
    }
}

/// Autodiff versus central differences for the task loss of a whole model.
///
/// Checks up to `per_param` randomly chosen entries of every trainable tensor
/// (all entries when the tensor is smaller) and returns the relative error over
/// the concatenated entries.
pub fn model_gradient_error<T: Scalar>(
    model: &Model<T>,
    batch: &TaskBatch<T>,
    per_param: usize,
    h: T,
    seed: u64,
) -> Result<T> {
    // The prior term sees attention as a constant, so finite differences of
    // every parameter except the prior scales use the task loss alone.
    let loss_of = |m: &Model<T>| -> Result<(T, T, Vec<Option<Vec<T>>>)> {
        let mut g = Graph::new();
        let b = m.params().bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = task_loss(m, &mut g, &b, batch, ForwardOptions::eval(), &mut rng)?;
        g.backward(out.loss)?;
        Ok((
            g.value(out.loss).item(),
            g.value(out.fit).item(),
            b.grads(&g),
        ))
    };
    let sigma = model.params().position(anomaly_adapter::SIGMA);
    let (_, _, grads) = loss_of(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let (mut auto, mut numeric) = (Vec::new(), Vec::new());
    for (i, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = grad.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        for j in picks {
            let orig = probe.params().param(i).value.data()[j];
            probe.params_mut().param_mut(i).value.data_mut()[j] = orig + h;
            let pick = |(full, fit, _): (T, T, _)| if Some(i) == sigma { full } else { fit };
            let up = pick(loss_of(&probe)?);
            probe.params_mut().param_mut(i).value.data_mut()[j] = orig - h;
            let down = pick(loss_of(&probe)?);
            probe.params_mut().param_mut(i).value.data_mut()[j] = orig;
            numeric.push((up - down) / (lit::<T>(2.0) * h));
            auto.push(grad[j]);
        }
    }
    Ok(relative_error(&auto, &numeric))
}
