//! Optimizers: Adam, plain SGD, the sharpness-aware (SAM) two-step wrapper,
//! and early stopping.
//!
//! Optimizers see parameters through [`ParamVector`], an ordered list of
//! flat tensors; gradients travel alongside as index-parallel buffers.

use std::fmt;

use crate::element::Element;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// Validation produced a NaN; training cannot continue meaningfully.
    NanLoss { epoch: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NanLoss { epoch } => {
                write!(f, "validation loss is NaN at epoch {epoch}")
            }
        }
    }
}

impl std::error::Error for OptimError {}

/// An ordered collection of flat parameter tensors.
pub trait ParamVector<E: Element> {
    fn num_tensors(&self) -> usize;
    fn tensor(&self, i: usize) -> &[E];
    fn tensor_mut(&mut self, i: usize) -> &mut [E];
}

/// Minimal [`ParamVector`] for tests and toy problems.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams<E>(pub Vec<Vec<E>>);

impl<E: Element> ParamVector<E> for FlatParams<E> {
    fn num_tensors(&self) -> usize {
        self.0.len()
    }
    fn tensor(&self, i: usize) -> &[E] {
        &self.0[i]
    }
    fn tensor_mut(&mut self, i: usize) -> &mut [E] {
        &mut self.0[i]
    }
}

/// A base (inner) optimizer applying one update from a gradient list.
pub trait Optimizer<E: Element> {
    fn step<P: ParamVector<E>>(&mut self, params: &mut P, grads: &[Vec<E>]);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }
}

impl<E: Element> Optimizer<E> for Sgd {
    fn step<P: ParamVector<E>>(&mut self, params: &mut P, grads: &[Vec<E>]) {
        let lr = E::from_f64(self.lr);
        for i in 0..params.num_tensors() {
            let p = params.tensor_mut(i);
            for (pv, &g) in p.iter_mut().zip(grads[i].iter()) {
                *pv = *pv - lr * g;
            }
        }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated lazily on first use and
/// must then keep matching the parameter shapes.
#[derive(Debug, Clone)]
pub struct Adam<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<E: Element> Optimizer<E> for Adam<E> {
    fn step<P: ParamVector<E>>(&mut self, params: &mut P, grads: &[Vec<E>]) {
        let n = params.num_tensors();
        assert_eq!(grads.len(), n, "gradient list does not match parameter list");
        if self.m.is_empty() {
            self.m = (0..n).map(|i| vec![E::zero(); params.tensor(i).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for i in 0..n {
            let p = params.tensor_mut(i);
            assert_eq!(p.len(), grads[i].len(), "gradient shape mismatch in tensor {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Neighborhood radius for the SAM ascent step. `rho = 0` or `enabled =
/// false` degenerates to the base optimizer exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
    pub enabled: bool,
}

impl SamConfig {
    pub fn new(rho: f64) -> Self {
        SamConfig { rho, enabled: true }
    }

    pub fn disabled() -> Self {
        SamConfig { rho: 0.0, enabled: false }
    }
}

/// What one SAM step observed.
#[derive(Debug, Clone, Copy)]
pub struct SamOutcome {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    /// Global L2 norm of the unperturbed gradient.
    pub grad_norm: f64,
    /// Whether the ascent step actually ran.
    pub perturbed: bool,
}

fn global_norm<E: Element>(grads: &[Vec<E>]) -> f64 {
    let mut s = 0.0;
    for g in grads {
        for &v in g {
            let x = v.as_f64();
            s += x * x;
        }
    }
    s.sqrt()
}

/// One sharpness-aware step: ascend `rho * g/||g||` from the current
/// parameters, take the gradient there, restore the parameters exactly, and
/// hand that adversarial gradient to the base optimizer. `loss_fn` must
/// return the loss and gradients at whatever parameters it is given.
pub fn sam_step<E, P, O, F>(
    params: &mut P,
    loss_fn: &mut F,
    sam: &SamConfig,
    base: &mut O,
) -> SamOutcome
where
    E: Element,
    P: ParamVector<E>,
    O: Optimizer<E>,
    F: FnMut(&mut P) -> (f64, Vec<Vec<E>>),
{
    let (loss, grads) = loss_fn(params);
    let grad_norm = global_norm(&grads);
    if !sam.enabled || sam.rho == 0.0 || grad_norm == 0.0 {
        base.step(params, &grads);
        return SamOutcome { loss, grad_norm, perturbed: false };
    }

    let n = params.num_tensors();
    let snapshot: Vec<Vec<E>> = (0..n).map(|i| params.tensor(i).to_vec()).collect();
    let scale = E::from_f64(sam.rho / grad_norm);
    for i in 0..n {
        let p = params.tensor_mut(i);
        for (pv, &g) in p.iter_mut().zip(grads[i].iter()) {
            *pv = *pv + scale * g;
        }
    }
    let (_, adv_grads) = loss_fn(params);
    // bitwise restore from the snapshot: no trace of the perturbation survives
    for (i, saved) in snapshot.iter().enumerate() {
        params.tensor_mut(i).copy_from_slice(saved);
    }
    base.step(params, &adv_grads);
    SamOutcome { loss, grad_norm, perturbed: true }
}

/// Early-stopping decision for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss and a snapshot taken when it improves.
/// Ties do not count as improvement; the run stops once the number of
/// consecutive non-improving epochs exceeds the patience.
#[derive(Debug, Clone)]
pub struct EarlyStop<C> {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    best_checkpoint: Option<C>,
    since_improvement: usize,
}

impl<C: Clone> EarlyStop<C> {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            best_epoch: 0,
            best_checkpoint: None,
            since_improvement: 0,
        }
    }

    pub fn update(
        &mut self,
        epoch: usize,
        val_loss: f64,
        checkpoint: &C,
    ) -> Result<StopDecision, OptimError> {
        if val_loss.is_nan() {
            return Err(OptimError::NanLoss { epoch });
        }
        match self.best {
            Some(best) if val_loss >= best => {
                self.since_improvement += 1;
                if self.since_improvement > self.patience {
                    Ok(StopDecision::Stop)
                } else {
                    Ok(StopDecision::Continue)
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.best_epoch = epoch;
                self.best_checkpoint = Some(checkpoint.clone());
                self.since_improvement = 0;
                Ok(StopDecision::Improved)
            }
        }
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_checkpoint(&self) -> Option<&C> {
        self.best_checkpoint.as_ref()
    }

    pub fn into_best_checkpoint(self) -> Option<C> {
        self.best_checkpoint
    }
}
