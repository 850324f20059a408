use super::{LinearTask, Model, Task, Tuning};
use crate::adapters::{AdapterBase, AdapterKind, AdapterSpec};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::rng::{gaussian_matrix, trial_rng};

/// Fourth-order central differences with `h = 1e-4·(1 + |θ|)`, aligned
/// with [`Model::params`]. The wider step keeps rounding (≈ ε·loss/h) small
/// for tasks whose loss is large next to its gradient.
pub fn finite_difference_grad(model: &Model) -> Result<Vec<Vec<f64>>> {
    let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(lens.len());
    for (t, &len) in lens.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let x = model.params()[t][i];
            let h = 1e-4 * (1.0 + x.abs());
            let mut at = |d: f64| -> Result<f64> {
                probe.params_mut()[t][i] = x + d;
                let v = probe.loss();
                probe.params_mut()[t][i] = x;
                v
            };
            let near = at(h)? - at(-h)?;
            let far = at(2.0 * h)? - at(-2.0 * h)?;
            *gi = (8.0 * near - far) / (12.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max |a − b| / max(1, |a|, |b|)` over all coordinates.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// Worst relative error between analytic and finite-difference gradients
/// for a randomly perturbed `kind` adapter on a random least-squares task.
pub fn grad_check(kind: AdapterKind, base: &Matrix, r: usize, seed: u64) -> Result<f64> {
    let (n, m) = base.shape();
    let mut rng = trial_rng(seed, 0);
    let samples = m + 3;
    let task = Task::Linear(LinearTask {
        x: gaussian_matrix(&mut rng, samples, m, 1.0),
        y: gaussian_matrix(&mut rng, samples, n, 1.0),
    });
    let adapter_base = AdapterBase::new(base.clone())?;
    let mut state = AdapterSpec::new(kind, r).with_seed(seed).init(&adapter_base)?;
    state.perturb(&mut rng, 0.3);
    let model = Model::new(
        task,
        Tuning::Adapter {
            base: adapter_base,
            state,
        },
    );
    let (_, analytic) = model.loss_and_grad(None)?;
    let numeric = finite_difference_grad(&model)?;
    Ok(max_relative_error(&analytic, &numeric))
}
