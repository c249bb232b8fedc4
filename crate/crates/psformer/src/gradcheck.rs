//! Finite-difference verification of the backward pass.
//!
//! The numeric side re-evaluates the full forward loss at perturbed
//! parameters, so it exercises none of the backward rules it is checking.
//! Everything here runs in f64.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{insert_params, model_forward, ModelConfig, ModelError, PsformerParams};
use crate::tensor::Tape;

/// Central-difference step used throughout.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the max relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor: below this magnitude the comparison is absolute, which
/// keeps finite-difference noise on near-zero gradients from reading as a
/// huge relative error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<12} max_rel_error = {:.3e}  ({} coords)\n",
                g.name, g.max_rel_error, g.checked
            ));
        }
        s.push_str(&format!(
            "overall      max_rel_error = {:.3e}  tolerance = {:.1e}  -> {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

fn forward_loss(
    params: &PsformerParams<f64>,
    x: &[f64],
    target: &[f64],
    batch: usize,
) -> Result<f64, ModelError> {
    let mut tape: Tape<f64> = Tape::new();
    let tp = insert_params(&mut tape, params, false)?;
    let art = model_forward(&mut tape, params, &tp, x, batch, false)?;
    let pred = tape.data(art.output);
    let mut sum = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        sum += d * d;
    }
    Ok(sum / pred.len() as f64)
}

/// Analytic gradients of the MSE loss, by parameter tensor.
pub fn analytic_grads(
    params: &PsformerParams<f64>,
    x: &[f64],
    target: &[f64],
    batch: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let cfg = &params.config;
    let mut tape: Tape<f64> = Tape::new();
    let tp = insert_params(&mut tape, params, true)?;
    let art = model_forward(&mut tape, params, &tp, x, batch, false)?;
    let t = tape
        .constant(target.to_vec(), vec![batch, cfg.channels, cfg.horizon])
        .map_err(|e| ModelError::Stage { stage: "loss".into(), source: e })?;
    let stage = |e| ModelError::Stage { stage: "loss".into(), source: e };
    let diff = tape.sub(art.output, t).map_err(stage)?;
    let sq = tape.mul(diff, diff).map_err(stage)?;
    let loss = tape.mean_all(sq);
    tape.backward(loss).map_err(stage)?;
    Ok(tp
        .leaf_ids()
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect())
}

/// Central finite differences of the same loss, by parameter tensor.
pub fn numeric_grads(
    params: &PsformerParams<f64>,
    x: &[f64],
    target: &[f64],
    batch: usize,
    h: f64,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut work = params.clone();
    let n_tensors = work.tensors().len();
    let mut out = Vec::with_capacity(n_tensors);
    for ti in 0..n_tensors {
        let len = work.tensors()[ti].len();
        let mut g = vec![0.0; len];
        for j in 0..len {
            let original = work.tensors()[ti][j];
            work.tensors_mut()[ti][j] = original + h;
            let plus = forward_loss(&work, x, target, batch)?;
            work.tensors_mut()[ti][j] = original - h;
            let minus = forward_loss(&work, x, target, batch)?;
            work.tensors_mut()[ti][j] = original;
            g[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compare two gradient lists group by group.
pub fn compare_grads(
    names: &[String],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tolerance: f64,
) -> GradCheckReport {
    let mut groups = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for ((name, a), n) in names.iter().zip(analytic.iter()).zip(numeric.iter()) {
        let mut worst: f64 = 0.0;
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let denom = av.abs().max(nv.abs()).max(REL_FLOOR);
            worst = worst.max((av - nv).abs() / denom);
        }
        overall = overall.max(worst);
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_error: worst,
            checked: a.len(),
        });
    }
    GradCheckReport {
        groups,
        max_rel_error: overall,
        tolerance,
    }
}

/// Full check on a seeded random instance of `cfg`: analytic backward vs
/// central differences with step `h`.
pub fn grad_check(
    cfg: &ModelConfig,
    seed: u64,
    batch: usize,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, ModelError> {
    cfg.validate()?;
    let params = PsformerParams::<f64>::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let dist = Uniform::new(-1.0, 1.0);
    let x: Vec<f64> = (0..batch * cfg.channels * cfg.lookback)
        .map(|_| dist.sample(&mut rng))
        .collect();
    let target: Vec<f64> = (0..batch * cfg.channels * cfg.horizon)
        .map(|_| dist.sample(&mut rng))
        .collect();
    let analytic = analytic_grads(&params, &x, &target, batch)?;
    let numeric = numeric_grads(&params, &x, &target, batch, h)?;
    Ok(compare_grads(&params.tensor_names(), &analytic, &numeric, tolerance))
}
