use crate::adapters::{Adapter, AdapterBase, AdapterSpec, AdapterState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Fit `x ↦ W x`: `L = (1/N)·‖X Wᵀ − Y‖²_F` with samples as rows of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTask {
    /// `N x m`.
    pub x: Matrix,
    /// `N x n`.
    pub y: Matrix,
}

/// Two-layer ReLU network `x ↦ (x W₁ᵀ)₊ w₂` with objective
/// `‖(X W₁ᵀ)₊ w₂ − y‖² + β(‖W₁‖²_F + ‖w₂‖²)`. `W₁` stores neurons as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    /// `N x d`.
    pub x: Matrix,
    pub y: Vec<f64>,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Linear(LinearTask),
    ToyNet(ToyNet),
}

impl Task {
    pub fn samples(&self) -> usize {
        match self {
            Task::Linear(t) => t.x.rows(),
            Task::ToyNet(t) => t.x.rows(),
        }
    }
}

/// What the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuning {
    /// The weight itself (and the head, for the network).
    Full(Matrix),
    /// An adapter over a frozen weight; the head is frozen too.
    Adapter { base: AdapterBase, state: AdapterState },
}

/// A task together with its current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub task: Task,
    pub tuning: Tuning,
    /// Second-layer weights of the network; empty for the linear task.
    pub head: Vec<f64>,
    /// When set, the trace metric is `‖W_eff − reference‖_F`.
    pub reference: Option<Matrix>,
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.cols(), |i, j| m[(rows[i], j)])
}

impl Model {
    pub fn new(task: Task, tuning: Tuning) -> Self {
        Self {
            task,
            tuning,
            head: Vec::new(),
            reference: None,
        }
    }

    /// Full tuning, or an adapter initialized from `spec` over `weight`.
    pub fn with_spec(task: Task, weight: Matrix, spec: Option<&AdapterSpec>) -> Result<Self> {
        let tuning = match spec {
            None => Tuning::Full(weight),
            Some(spec) => {
                let base = AdapterBase::new(weight)?;
                let state = spec.init(&base)?;
                Tuning::Adapter { base, state }
            }
        };
        Ok(Self::new(task, tuning))
    }

    pub fn with_head(mut self, head: Vec<f64>) -> Self {
        self.head = head;
        self
    }

    pub fn with_reference(mut self, reference: Matrix) -> Self {
        self.reference = Some(reference);
        self
    }

    /// Current (effective) weight of the linear map or first layer.
    pub fn weight(&self) -> Result<Matrix> {
        match &self.tuning {
            Tuning::Full(w) => Ok(w.clone()),
            Tuning::Adapter { base, state } => state.effective_weight(base),
        }
    }

    pub fn adapter(&self) -> Option<&AdapterState> {
        match &self.tuning {
            Tuning::Adapter { state, .. } => Some(state),
            Tuning::Full(_) => None,
        }
    }

    fn head_trainable(&self) -> bool {
        matches!(self.tuning, Tuning::Full(_)) && matches!(self.task, Task::ToyNet(_))
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = match &self.tuning {
            Tuning::Full(w) => vec![w.as_slice()],
            Tuning::Adapter { state, .. } => state.params(),
        };
        if self.head_trainable() {
            p.push(&self.head);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let head_trainable = self.head_trainable();
        let mut p = match &mut self.tuning {
            Tuning::Full(w) => vec![w.as_mut_slice()],
            Tuning::Adapter { state, .. } => state.params_mut(),
        };
        if head_trainable {
            p.push(&mut self.head);
        }
        p
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn param_norm(&self) -> f64 {
        self.params().iter().flat_map(|p| p.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `‖W_eff − reference‖_F` when a reference is set.
    pub fn metric(&self) -> Result<Option<f64>> {
        match &self.reference {
            Some(r) => Ok(Some(self.weight()?.sub(r)?.frobenius_norm())),
            None => Ok(None),
        }
    }

    pub fn loss(&self) -> Result<f64> {
        Ok(self.forward(None, false)?.0)
    }

    /// Loss on all samples, or on the listed rows, and its gradients aligned
    /// with [`Model::params`].
    pub fn loss_and_grad(&self, rows: Option<&[usize]>) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, grads) = self.forward(rows, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    fn forward(&self, rows: Option<&[usize]>, want_grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let w = self.weight()?;
        let (loss, grad_w, grad_head) = match &self.task {
            Task::Linear(t) => {
                let (x, y) = match rows {
                    Some(r) => (select_rows(&t.x, r), select_rows(&t.y, r)),
                    None => (t.x.clone(), t.y.clone()),
                };
                let (loss, g) = linear_loss(&w, &x, &y, want_grad)?;
                (loss, g, None)
            }
            Task::ToyNet(t) => {
                let (x, y) = match rows {
                    Some(r) => (select_rows(&t.x, r), r.iter().map(|&i| t.y[i]).collect()),
                    None => (t.x.clone(), t.y.clone()),
                };
                toynet_loss(&w, &self.head, &x, &y, t.weight_decay, want_grad)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss evaluated to {loss}"),
            });
        }
        let Some(grad_w) = grad_w else {
            return Ok((loss, None));
        };
        let mut grads = match &self.tuning {
            Tuning::Full(_) => vec![grad_w.into_vec()],
            Tuning::Adapter { base, state } => state.backprop(base, &grad_w)?,
        };
        if self.head_trainable() {
            grads.push(grad_head.unwrap_or_default());
        }
        Ok((loss, Some(grads)))
    }
}

fn linear_loss(w: &Matrix, x: &Matrix, y: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
    if x.cols() != w.cols() || y.cols() != w.rows() || x.rows() != y.rows() {
        return Err(Error::shape(
            "linear task",
            format!("W {:?}, X {:?}, Y {:?}", w.shape(), x.shape(), y.shape()),
        ));
    }
    let n = x.rows().max(1) as f64;
    let resid = x.matmul_t(w)?.sub(y)?;
    let loss = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / n;
    let grad = if want_grad {
        Some(resid.t_matmul(x)?.scale(2.0 / n))
    } else {
        None
    };
    Ok((loss, grad))
}

type ToyOut = (f64, Option<Matrix>, Option<Vec<f64>>);

fn toynet_loss(w1: &Matrix, w2: &[f64], x: &Matrix, y: &[f64], beta: f64, want_grad: bool) -> Result<ToyOut> {
    let h = w1.rows();
    if x.cols() != w1.cols() || w2.len() != h || y.len() != x.rows() {
        return Err(Error::shape(
            "toy network",
            format!("W1 {:?}, w2 {}, X {:?}, y {}", w1.shape(), w2.len(), x.shape(), y.len()),
        ));
    }
    let z = x.matmul_t(w1)?;
    let act = z.map(|v| v.max(0.0));
    let resid: Vec<f64> = (0..x.rows())
        .map(|i| act.row(i).iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() - y[i])
        .collect();
    let penalty = w1.as_slice().iter().chain(w2).map(|v| v * v).sum::<f64>();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() + beta * penalty;
    if !want_grad {
        return Ok((loss, None, None));
    }
    let mut grad_head: Vec<f64> = w2.iter().map(|v| 2.0 * beta * v).collect();
    let mut dz = Matrix::zeros(x.rows(), h);
    for i in 0..x.rows() {
        let g = 2.0 * resid[i];
        for j in 0..h {
            grad_head[j] += g * act[(i, j)];
            // ReLU subgradient at 0 is 0.
            if z[(i, j)] > 0.0 {
                dz[(i, j)] = g * w2[j];
            }
        }
    }
    let mut grad_w1 = dz.t_matmul(x)?;
    grad_w1.axpy(2.0 * beta, w1)?;
    Ok((loss, Some(grad_w1), Some(grad_head)))
}
