//! Shared pieces of the training loops: per-sample gradients summed in input
//! order, divergence checks and optimizer stepping.

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::params::{cosine_lr, Adam, GradStore, ParamStore};

/// Final learning rate as a fraction of the base rate.
pub const LR_FLOOR: f64 = 0.05;

/// Mean loss and mean gradient over `n` samples. Each sample builds its own
/// graph; results are reduced in index order so the sum does not depend on
/// scheduling.
pub fn mean_grads<F>(exec: Exec, n: usize, f: F) -> Result<(Vec<f64>, GradStore)>
where
    F: Fn(usize) -> Result<(Vec<f64>, GradStore)> + Sync + Send,
{
    let results = exec.map_range(n, f);
    let mut losses: Vec<f64> = Vec::new();
    let mut grads = Vec::with_capacity(n);
    for r in results {
        let (l, g) = r?;
        if losses.is_empty() {
            losses = vec![0.0; l.len()];
        }
        for (acc, v) in losses.iter_mut().zip(&l) {
            *acc += v;
        }
        grads.push(g);
    }
    let mut g = GradStore::sum_ordered(grads);
    let k = 1.0 / n.max(1) as f64;
    g.scale(k);
    losses.iter_mut().for_each(|v| *v *= k);
    Ok((losses, g))
}

/// Adam with a cosine-decayed learning rate, refusing non-finite updates.
pub struct Trainer {
    pub opt: Adam,
    pub base_lr: f64,
    pub total_steps: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(base_lr: f64, total_steps: usize, clip: f64) -> Self {
        Trainer {
            opt: Adam::new().with_clip(clip),
            base_lr,
            total_steps,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps, LR_FLOOR)
    }

    pub fn apply(&mut self, store: &mut ParamStore, loss: f64, grads: &GradStore) -> Result<()> {
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                msg: format!("loss {loss}, gradient norm {}", grads.norm()),
            });
        }
        let lr = self.lr();
        self.opt.step(store, grads, lr);
        self.step += 1;
        Ok(())
    }
}

/// Moving average of the last `window` values of `xs` ending at `end`.
pub fn smoothed(xs: &[f64], end: usize, window: usize) -> f64 {
    let lo = (end + 1).saturating_sub(window);
    let s = &xs[lo..=end];
    s.iter().sum::<f64>() / s.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::Bound;
    use crate::tensor::Tensor;

    #[test]
    fn serial_and_parallel_grads_agree_bitwise() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[3], vec![0.3, -1.1, 2.0]).unwrap());
        let run = |exec| {
            mean_grads(exec, 37, |i| {
                let g = Graph::new();
                let b = Bound::all(&g, &s);
                let x = g.constant(Tensor::full(&[3], (i as f64).sin()));
                let l = b.get("w")?.mul(x)?.square().sum();
                Ok((vec![l.item()], b.grads(&g.backward(l)?)))
            })
            .unwrap()
        };
        let (la, ga) = run(Exec::Serial);
        let (lb, gb) = run(Exec::Parallel);
        assert_eq!(la, lb);
        assert_eq!(ga.0["w"], gb.0["w"]);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1]));
        let mut t = Trainer::new(1e-3, 10, 1.0);
        let err = t.apply(&mut s, f64::NAN, &GradStore::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
    }

    #[test]
    fn smoothing_window() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(smoothed(&xs, 3, 2), 3.5);
        assert_eq!(smoothed(&xs, 0, 5), 1.0);
    }
}
