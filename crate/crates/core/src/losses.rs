//! Instance-discrimination losses and their analytic gradients.
//!
//! For one instance with embedding `z`, label `i` and bank rows `w_j`, the
//! prediction is `p = softmax(W z / τ)`. On top of the cross-entropy
//! `-log p_i` we add the square-root self-distillation term `KL(p ‖ u)` with
//! `u_k = √p_k / Σ_s √p_s`. `u` is treated as a constant target: no gradient
//! flows through it.

use crate::error::{Error, Result};
use crate::tensor::{axpy, clamp_prob, dot, ensure_finite, stable_softmax, Mat, PROB_FLOOR};

/// Coefficient of `log p_k` in `∂KL(p‖u)/∂p_k`.
pub(crate) const SQRTKL_LOG_COEF: f64 = 0.5;

/// A probability vector with every entry at least [`PROB_FLOOR`].
///
/// Flooring does not renormalize, so the sum can exceed one by at most
/// `N · PROB_FLOOR`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    p: Vec<f64>,
    floored: bool,
}

impl ProbVector {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let p = stable_softmax(logits)?;
        Ok(Self::floor(p))
    }

    /// Accepts an explicit distribution (non-negative, summing to one).
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        ensure_finite(&p, "probabilities")?;
        if p.is_empty() || p.iter().any(|&v| v < 0.0) {
            return Err(Error::DegenerateInput(
                "probabilities must be non-empty and non-negative".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self::floor(p))
    }

    fn floor(mut p: Vec<f64>) -> Self {
        let mut floored = false;
        for v in &mut p {
            if *v < PROB_FLOOR {
                *v = clamp_prob(*v);
                floored = true;
            }
        }
        Self { p, floored }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// True when at least one entry was raised to the floor.
    pub fn was_floored(&self) -> bool {
        self.floored
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.p)
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
}

/// `u_k = √p_k / c` with `c = Σ_s √p_s`, so `1 ≤ c ≤ √N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtProbVector {
    pub u: Vec<f64>,
    pub c: f64,
}

pub fn sqrt_distribution(p: &ProbVector) -> SqrtProbVector {
    let roots: Vec<f64> = p.as_slice().iter().map(|v| v.sqrt()).collect();
    let c: f64 = roots.iter().sum();
    let u = roots.into_iter().map(|r| r / c).collect();
    SqrtProbVector { u, c }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqrtKlTerms {
    pub sqrtkl: f64,
    /// `Σ p_k log p_k` (negative entropy).
    pub l1: f64,
    /// `-Σ p_k log u_k` (cross-entropy against the flattened target).
    pub l2: f64,
}

/// The divergence is summed as `Σ p_k (x_k − ln(1 + x_k))` with
/// `x_k = u_k/p_k − 1`. Since `Σ u = Σ p = 1` this equals `Σ p log(p/u)`,
/// but every term is non-negative, so a flat `p` gives exactly zero rather
/// than a rounding residue of either sign.
pub fn sqrtkl_value(p: &ProbVector, u: &SqrtProbVector) -> SqrtKlTerms {
    let mut sqrtkl = 0.0;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (&pk, &uk) in p.as_slice().iter().zip(&u.u) {
        let uk = uk.max(PROB_FLOOR);
        let (lp, lu) = (pk.ln(), uk.ln());
        let x = uk / pk - 1.0;
        sqrtkl += pk * (x - x.ln_1p()).max(0.0);
        l1 += pk * lp;
        l2 -= pk * lu;
    }
    SqrtKlTerms { sqrtkl, l1, l2 }
}

/// `O_k = ∂KL(p‖u)/∂p_k = 0.5·log p_k + 1 + log c`, with `u` held fixed.
pub fn sqrtkl_grad_p(p: &ProbVector) -> Vec<f64> {
    sqrtkl_grad_p_with(p, SQRTKL_LOG_COEF)
}

pub(crate) fn sqrtkl_grad_p_with(p: &ProbVector, log_coef: f64) -> Vec<f64> {
    let c: f64 = p.as_slice().iter().map(|v| v.sqrt()).sum();
    let offset = 1.0 + c.ln();
    p.as_slice().iter().map(|&pk| log_coef * pk.ln() + offset).collect()
}

/// Gradient of the SqrtKL term with respect to the logits:
/// `g_j = p_j (O_j - Σ_k O_k p_k)`.
pub fn sqrtkl_logit_grad(p: &ProbVector) -> Vec<f64> {
    sqrtkl_logit_grad_with(p, SQRTKL_LOG_COEF)
}

pub(crate) fn sqrtkl_logit_grad_with(p: &ProbVector, log_coef: f64) -> Vec<f64> {
    let o = sqrtkl_grad_p_with(p, log_coef);
    let p = p.as_slice();
    let mean = dot(&o, p);
    p.iter().zip(&o).map(|(pk, ok)| pk * (ok - mean)).collect()
}

/// `∂L_SqrtKL/∂w_j = (-Σ_{k≠j} O_k p_k p_j + O_j (p_j - p_j²)) · z / τ`.
///
/// Evaluates the per-row expression term by term; [`sqrtkl_logit_grad`]
/// is the vectorized equivalent used in training.
pub fn sqrtkl_grad_w(p: &ProbVector, z: &[f64], j: usize, temperature: f64) -> Vec<f64> {
    let o = sqrtkl_grad_p(p);
    let p = p.as_slice();
    let pj = p[j];
    let cross: f64 = (0..p.len())
        .filter(|&k| k != j)
        .map(|k| o[k] * p[k] * pj)
        .sum();
    let coef = -cross + o[j] * (pj - pj * pj);
    z.iter().map(|zk| coef * zk / temperature).collect()
}

/// `∂L_SqrtKL/∂z = Σ_j g_j w_j / τ`.
pub fn sqrtkl_grad_z(p: &ProbVector, bank: &Mat, temperature: f64) -> Vec<f64> {
    weighted_row_sum(&sqrtkl_logit_grad(p), bank, temperature)
}

fn weighted_row_sum(coefs: &[f64], rows: &Mat, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows.cols()];
    for (j, &g) in coefs.iter().enumerate() {
        if g != 0.0 {
            axpy(g / temperature, rows.row(j), &mut out);
        }
    }
    out
}

fn outer_rows(coefs: &[f64], z: &[f64], temperature: f64) -> Mat {
    let mut out = Mat::zeros(coefs.len(), z.len());
    for (j, &g) in coefs.iter().enumerate() {
        for (o, zk) in out.row_mut(j).iter_mut().zip(z) {
            *o = g * zk / temperature;
        }
    }
    out
}

/// Cross-entropy value and gradients for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CeGrads {
    pub loss: f64,
    /// `∂L/∂z = Σ_k (p_k − δ_ki) w_k / τ`
    pub grad_z: Vec<f64>,
    /// Row `k` is `(p_k − δ_ki) z / τ`.
    pub grad_w: Mat,
    /// Set when `p_i` had to be raised to the floor.
    pub floored: bool,
}

/// `p - e_i`, the cross-entropy gradient with respect to the logits.
pub fn ce_logit_grad(p: &ProbVector, label: usize) -> Vec<f64> {
    let mut g = p.as_slice().to_vec();
    g[label] -= 1.0;
    g
}

pub fn ce_loss_and_grads(
    p: &ProbVector,
    label: usize,
    z: &[f64],
    bank: &Mat,
    temperature: f64,
) -> Result<CeGrads> {
    check_instance(p, label, z, bank)?;
    let g = ce_logit_grad(p, label);
    Ok(CeGrads {
        loss: -p.as_slice()[label].ln(),
        grad_z: weighted_row_sum(&g, bank, temperature),
        grad_w: outer_rows(&g, z, temperature),
        floored: p.as_slice()[label] <= PROB_FLOOR,
    })
}

fn check_instance(p: &ProbVector, label: usize, z: &[f64], bank: &Mat) -> Result<()> {
    if label >= p.len() {
        return Err(Error::Usage(format!(
            "label {label} outside {} classes",
            p.len()
        )));
    }
    if bank.rows() != p.len() || bank.cols() != z.len() {
        return Err(Error::Config(format!(
            "bank is {}x{}, expected {}x{}",
            bank.rows(),
            bank.cols(),
            p.len(),
            z.len()
        )));
    }
    Ok(())
}

/// NPID's proximal term `‖z − w_i‖²` and its gradients. Every other bank
/// row gets an exactly zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximalTerms {
    pub value: f64,
    pub grad_z: Vec<f64>,
    /// Gradient for row `w_i`.
    pub grad_w_target: Vec<f64>,
}

impl ProximalTerms {
    /// Gradient for an arbitrary bank row.
    pub fn grad_w_row(&self, row: usize, target: usize) -> Vec<f64> {
        if row == target {
            self.grad_w_target.clone()
        } else {
            vec![0.0; self.grad_w_target.len()]
        }
    }
}

pub fn proximal_loss(z: &[f64], w_target: &[f64]) -> Result<ProximalTerms> {
    if z.len() != w_target.len() {
        return Err(Error::Config(format!(
            "embedding has {} entries, bank row has {}",
            z.len(),
            w_target.len()
        )));
    }
    let diff: Vec<f64> = z.iter().zip(w_target).map(|(a, b)| a - b).collect();
    Ok(ProximalTerms {
        value: dot(&diff, &diff),
        grad_z: diff.iter().map(|d| 2.0 * d).collect(),
        grad_w_target: diff.iter().map(|d| -2.0 * d).collect(),
    })
}

/// `L = L_CE + λ·L_SqrtKL`
pub fn total_loss(ce: f64, sqrtkl: f64, lambda: f64) -> f64 {
    ce + lambda * sqrtkl
}

/// Weights and switches for assembling the per-instance objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    /// Weight of the proximal term; zero outside proximal mode.
    pub proximal: f64,
    /// When false the SqrtKL term is kept out of `grad_z`.
    pub sqrtkl_into_encoder: bool,
    /// Compute bank-row gradients (`grad_w`), needed by parametric training.
    pub bank_grad: bool,
}

impl ObjectiveWeights {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            proximal: 0.0,
            sqrtkl_into_encoder: true,
            bank_grad: false,
        }
    }
}

/// Everything computed for one instance.
///
/// `total = ce + λ·sqrtkl + proximal_weight·proximal`; with no proximal
/// weight this is exactly [`total_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub sqrtkl: f64,
    pub l1: f64,
    pub l2: f64,
    pub proximal: f64,
    pub total: f64,
    pub lambda: f64,
    pub grad_z: Vec<f64>,
    /// Present when [`ObjectiveWeights::bank_grad`] is set; one row per bank row.
    pub grad_w: Option<Mat>,
    pub probs: ProbVector,
    pub floored: bool,
}

impl LossReport {
    /// Single-line record: `ce=… sqrtkl=… l1=… l2=… proximal=… total=… lambda=… floored=…`.
    pub fn to_log_line(&self) -> String {
        format!(
            "ce={} sqrtkl={} l1={} l2={} proximal={} total={} lambda={} floored={}",
            self.ce, self.sqrtkl, self.l1, self.l2, self.proximal, self.total, self.lambda, self.floored
        )
    }
}

/// Evaluates the objective for one instance against the bank rows.
pub fn evaluate_instance(
    bank: &Mat,
    temperature: f64,
    z: &[f64],
    label: usize,
    weights: ObjectiveWeights,
) -> Result<LossReport> {
    ensure_finite(z, "embedding")?;
    if z.len() != bank.cols() {
        return Err(Error::Config(format!(
            "embedding has {} entries, bank rows have {}",
            z.len(),
            bank.cols()
        )));
    }
    let logits: Vec<f64> = bank.row_iter().map(|w| dot(w, z) / temperature).collect();
    let p = ProbVector::from_logits(&logits)?;
    check_instance(&p, label, z, bank)?;

    let ce = -p.as_slice()[label].ln();
    let mut logit_grad = ce_logit_grad(&p, label);
    let mut encoder_logit_grad = logit_grad.clone();

    let (mut sqrtkl, mut l1, mut l2) = (0.0, 0.0, 0.0);
    if weights.lambda != 0.0 {
        let u = sqrt_distribution(&p);
        let terms = sqrtkl_value(&p, &u);
        (sqrtkl, l1, l2) = (terms.sqrtkl, terms.l1, terms.l2);
        let g = sqrtkl_logit_grad(&p);
        for (acc, gk) in logit_grad.iter_mut().zip(&g) {
            *acc += weights.lambda * gk;
        }
        if weights.sqrtkl_into_encoder {
            encoder_logit_grad.clone_from(&logit_grad);
        }
    }

    let mut grad_z = weighted_row_sum(&encoder_logit_grad, bank, temperature);
    let mut grad_w = weights.bank_grad.then(|| outer_rows(&logit_grad, z, temperature));

    let mut proximal = 0.0;
    if weights.proximal != 0.0 {
        let terms = proximal_loss(z, bank.row(label))?;
        proximal = terms.value;
        axpy(weights.proximal, &terms.grad_z, &mut grad_z);
        if let Some(gw) = grad_w.as_mut() {
            axpy(weights.proximal, &terms.grad_w_target, gw.row_mut(label));
        }
    }

    let total = total_loss(ce, sqrtkl, weights.lambda) + weights.proximal * proximal;
    Ok(LossReport {
        ce,
        sqrtkl,
        l1,
        l2,
        proximal,
        total,
        lambda: weights.lambda,
        grad_z,
        grad_w,
        floored: p.as_slice()[label] <= PROB_FLOOR,
        probs: p,
    })
}
