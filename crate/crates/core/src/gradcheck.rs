//! Finite-difference verification of every analytic gradient in the crate.
//!
//! The reference losses here are written out independently of
//! [`crate::losses`]: plain loops, their own softmax, and a frozen
//! square-root target for the SqrtKL term.

use std::fmt;

use crate::bank::CorrectedDirection;
use crate::encoder::{Activation, Encoder, EncoderConfig};
use crate::error::Result;
use crate::losses::{
    ce_loss_and_grads, proximal_loss, sqrt_distribution, sqrtkl_grad_w, sqrtkl_grad_z,
    sqrtkl_logit_grad_with, ProbVector, SQRTKL_LOG_COEF,
};
use crate::tensor::{l2_norm, Mat, SeededRng};

/// Denominator floor of the relative error `|a − f| / max(|a|, |f|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per loss family.
    pub instances: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Elementwise absolute tolerance for the corrected bank direction.
    pub direction_tol: f64,
    /// Perturb the `log p` coefficient of the SqrtKL derivative (negative control).
    pub break_sqrtkl: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            min_classes: 4,
            max_classes: 32,
            min_dim: 2,
            max_dim: 16,
            step: 1e-5,
            rel_tol: 1e-6,
            direction_tol: 1e-8,
            break_sqrtkl: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Relative,
    Absolute,
    /// Must be bitwise zero.
    Exact,
    /// Distance outside an accepted interval (zero when inside).
    Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: ErrorKind,
    pub max_err: f64,
    pub tol: f64,
    pub cases: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        match self.kind {
            ErrorKind::Exact | ErrorKind::Interval => self.max_err == 0.0,
            _ => self.max_err <= self.tol,
        }
    }
}

/// The ten-class example with `p = {0.91, 0.01 × 9}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkedExample {
    pub u: Vec<f64>,
    pub c: f64,
    /// `‖∂L_CE/∂w_j‖ / ‖z‖` for a non-target row.
    pub ce_ratio: f64,
    /// `‖∂L_SqrtKL/∂w_j‖ / ‖z‖` for a non-target row.
    pub sqrtkl_ratio: f64,
    pub amplification: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub example: WorkedExample,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.kind == ErrorKind::Relative)
            .fold(0.0, |m, c| m.max(c.max_err))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>9} {:>12} {:>10}  status", "gradient", "kind", "max err", "tol")?;
        for c in &self.checks {
            let kind = match c.kind {
                ErrorKind::Relative => "rel",
                ErrorKind::Absolute => "abs",
                ErrorKind::Exact => "exact",
                ErrorKind::Interval => "interval",
            };
            writeln!(
                f,
                "{:<34} {:>9} {:>12.3e} {:>10.1e}  {} ({} cases)",
                c.name,
                kind,
                c.max_err,
                c.tol,
                if c.passed() { "ok" } else { "FAIL" },
                c.cases
            )?;
        }
        writeln!(f, "max relative error: {:.3e}", self.max_rel_err())?;
        let e = &self.example;
        writeln!(f, "worked example, N = 10, p = {{0.91, 0.01 x 9}}:")?;
        writeln!(f, "  u = {{{:.4}, {:.4}, ...}}  c = {:.6}", e.u[0], e.u[1], e.c)?;
        writeln!(f, "  |dL_CE/dw_j| / |z|     = {:.6}", e.ce_ratio)?;
        writeln!(f, "  |dL_SqrtKL/dw_j| / |z| = {:.6}", e.sqrtkl_ratio)?;
        write!(f, "  norm ratio             = {:.4}", e.amplification)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn reference_probs(w: &Mat, z: &[f64], tau: f64) -> Vec<f64> {
    let mut logits = vec![0.0; w.rows()];
    for (j, l) in logits.iter_mut().enumerate() {
        let mut s = 0.0;
        for k in 0..z.len() {
            s += w[(j, k)] * z[k];
        }
        *l = s / tau;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn reference_ce(w: &Mat, z: &[f64], label: usize, tau: f64) -> f64 {
    -reference_probs(w, z, tau)[label].ln()
}

fn reference_kl(w: &Mat, z: &[f64], tau: f64, frozen_u: &[f64]) -> f64 {
    reference_probs(w, z, tau)
        .iter()
        .zip(frozen_u)
        .map(|(p, u)| p * (p.ln() - u.ln()))
        .sum()
}

fn central<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

struct Instance {
    w: Mat,
    z: Vec<f64>,
    label: usize,
    tau: f64,
}

fn random_instance(rng: &mut SeededRng, cfg: &GradcheckConfig) -> Instance {
    let n = cfg.min_classes + rng.below(cfg.max_classes - cfg.min_classes + 1);
    let d = cfg.min_dim + rng.below(cfg.max_dim - cfg.min_dim + 1);
    let scale = 2.0 / (d as f64).sqrt();
    let w = Mat::new(n, d, (0..n * d).map(|_| scale * rng.normal()).collect()).expect("finite");
    let z = (0..d).map(|_| rng.normal()).collect();
    let label = rng.below(n);
    let tau = if rng.coin() { 1.0 } else { 0.5 + rng.uniform() };
    Instance { w, z, label, tau }
}

/// Max relative error of `analytic` against central differences of `loss`
/// over every bank entry and every embedding entry.
fn compare_wz(
    inst: &Instance,
    h: f64,
    loss: &dyn Fn(&Mat, &[f64]) -> f64,
    analytic_w: &Mat,
    analytic_z: &[f64],
) -> (f64, f64) {
    let mut worst_w: f64 = 0.0;
    for j in 0..inst.w.rows() {
        for k in 0..inst.w.cols() {
            let fd = central(
                |e| {
                    let mut w = inst.w.clone();
                    w[(j, k)] += e;
                    loss(&w, &inst.z)
                },
                h,
            );
            worst_w = worst_w.max(rel_err(analytic_w[(j, k)], fd));
        }
    }
    let mut worst_z: f64 = 0.0;
    for k in 0..inst.z.len() {
        let fd = central(
            |e| {
                let mut z = inst.z.clone();
                z[k] += e;
                loss(&inst.w, &z)
            },
            h,
        );
        worst_z = worst_z.max(rel_err(analytic_z[k], fd));
    }
    (worst_w, worst_z)
}

fn probs_of(inst: &Instance) -> Result<ProbVector> {
    let logits: Vec<f64> = inst
        .w
        .row_iter()
        .map(|r| crate::tensor::dot(r, &inst.z) / inst.tau)
        .collect();
    ProbVector::from_logits(&logits)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = SeededRng::new(cfg.seed);
    let h = cfg.step;
    let log_coef = if cfg.break_sqrtkl { 1.1 * SQRTKL_LOG_COEF } else { SQRTKL_LOG_COEF };
    let (mut ce_w, mut ce_z, mut kl_w, mut kl_z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut prox_rel, mut prox_zero) = (0.0f64, 0.0f64);

    for _ in 0..cfg.instances {
        let inst = random_instance(&mut rng, cfg);
        let p = probs_of(&inst)?;

        let ce = ce_loss_and_grads(&p, inst.label, &inst.z, &inst.w, inst.tau)?;
        let ce_loss = |w: &Mat, z: &[f64]| reference_ce(w, z, inst.label, inst.tau);
        let (ew, ez) = compare_wz(&inst, h, &ce_loss, &ce.grad_w, &ce.grad_z);
        ce_w = ce_w.max(ew);
        ce_z = ce_z.max(ez);

        let u = sqrt_distribution(&p).u;
        let (gw, gz) = if cfg.break_sqrtkl {
            let g = sqrtkl_logit_grad_with(&p, log_coef);
            let mut gw = Mat::zeros(inst.w.rows(), inst.w.cols());
            let mut gz = vec![0.0; inst.z.len()];
            for (j, &gj) in g.iter().enumerate() {
                for k in 0..inst.z.len() {
                    gw[(j, k)] = gj * inst.z[k] / inst.tau;
                    gz[k] += gj * inst.w[(j, k)] / inst.tau;
                }
            }
            (gw, gz)
        } else {
            let rows: Vec<Vec<f64>> = (0..inst.w.rows())
                .map(|j| sqrtkl_grad_w(&p, &inst.z, j, inst.tau))
                .collect();
            (Mat::from_rows(&rows)?, sqrtkl_grad_z(&p, &inst.w, inst.tau))
        };
        let kl_loss = |w: &Mat, z: &[f64]| reference_kl(w, z, inst.tau, &u);
        let (ew, ez) = compare_wz(&inst, h, &kl_loss, &gw, &gz);
        kl_w = kl_w.max(ew);
        kl_z = kl_z.max(ez);

        let target = inst.w.row(inst.label);
        let prox = proximal_loss(&inst.z, target)?;
        let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
        for k in 0..inst.z.len() {
            let fd_w = central(
                |e| {
                    let mut w = target.to_vec();
                    w[k] += e;
                    sq(&inst.z, &w)
                },
                h,
            );
            let fd_z = central(
                |e| {
                    let mut z = inst.z.clone();
                    z[k] += e;
                    sq(&z, target)
                },
                h,
            );
            prox_rel = prox_rel.max(rel_err(prox.grad_w_target[k], fd_w)).max(rel_err(prox.grad_z[k], fd_z));
        }
        for j in (0..inst.w.rows()).filter(|&j| j != inst.label) {
            for v in prox.grad_w_row(j, inst.label) {
                if v.to_bits() != 0 {
                    prox_zero = prox_zero.max(v.abs().max(f64::MIN_POSITIVE));
                }
            }
        }
    }

    let (enc_err, enc_cases) = encoder_check(&mut rng, cfg)?;
    let (dir_err, dir_cases) = direction_check(&mut rng, cfg)?;
    let example = worked_example(log_coef)?;

    let n = cfg.instances;
    let rel = |name, max_err, cases| CheckResult { name, kind: ErrorKind::Relative, max_err, tol: cfg.rel_tol, cases };
    let interval = |name, value: f64, lo: f64, hi: f64| CheckResult {
        name,
        kind: ErrorKind::Interval,
        max_err: if value < lo { lo - value } else if value > hi { value - hi } else { 0.0 },
        tol: 0.0,
        cases: 1,
    };
    let u_err = example
        .u
        .iter()
        .enumerate()
        .map(|(k, &v)| (v - if k == 0 { 0.5145 } else { 0.0539 }).abs())
        .fold(0.0, f64::max);
    let checks = vec![
        rel("cross-entropy d/dw", ce_w, n),
        rel("cross-entropy d/dz", ce_z, n),
        rel("sqrtkl (u detached) d/dw", kl_w, n),
        rel("sqrtkl (u detached) d/dz", kl_z, n),
        rel("proximal d/dw_i, d/dz", prox_rel, n),
        CheckResult { name: "proximal d/dw_j, j != i", kind: ErrorKind::Exact, max_err: prox_zero, tol: 0.0, cases: n },
        rel("encoder backward", enc_err, enc_cases),
        CheckResult {
            name: "corrected bank direction",
            kind: ErrorKind::Absolute,
            max_err: dir_err,
            tol: cfg.direction_tol,
            cases: dir_cases,
        },
        CheckResult { name: "example: u", kind: ErrorKind::Absolute, max_err: u_err, tol: 5e-4, cases: 1 },
        CheckResult {
            name: "example: ce ratio",
            kind: ErrorKind::Absolute,
            max_err: (example.ce_ratio - 0.01).abs(),
            tol: 1e-9,
            cases: 1,
        },
        interval("example: sqrtkl ratio", example.sqrtkl_ratio, 0.019, 0.023),
        interval("example: amplification", example.amplification, 1.9, 2.3),
    ];
    Ok(GradcheckReport { checks, example })
}

/// Random MLPs (two to four layers, both activations) against central
/// differences of a random linear functional of the embeddings.
fn encoder_check(rng: &mut SeededRng, cfg: &GradcheckConfig) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let cases = 4;
    for case in 0..cases {
        let depth = 1 + (case % 3) + 1;
        let widths: Vec<usize> = (0..=depth).map(|_| 2 + rng.below(5)).collect();
        let activation = if case % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let enc = Encoder::init(EncoderConfig::new(widths.clone(), activation, rng.below(1 << 30) as u64))?;
        let batch = 3;
        let x = Mat::new(batch, widths[0], (0..batch * widths[0]).map(|_| rng.normal()).collect())?;
        let out_dim = *widths.last().expect("widths");
        let coef = Mat::new(batch, out_dim, (0..batch * out_dim).map(|_| rng.normal()).collect())?;
        let objective = |e: &Encoder| -> f64 {
            let z = e.embed(&x).expect("shapes fixed");
            z.as_slice().iter().zip(coef.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = enc.forward(&x)?;
        let (grads, _) = enc.backward(&tape, &coef)?;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (t, values) in analytic.iter().enumerate() {
            for (k, &a) in values.iter().enumerate() {
                let fd = central(
                    |e| {
                        let mut shifted = enc.clone();
                        shifted.params.tensors_mut()[t][k] += e;
                        objective(&shifted)
                    },
                    cfg.step,
                );
                worst = worst.max(rel_err(a, fd));
            }
        }
    }
    Ok((worst, cases))
}

/// Full batches (`B = N ≤ 16`): the corrected direction for every row
/// against the negative central difference of the summed cross-entropy.
fn direction_check(rng: &mut SeededRng, cfg: &GradcheckConfig) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..cfg.instances.clamp(1, 8) {
        let n = 2 + rng.below(15);
        let d = 2 + rng.below(7);
        let w = Mat::new(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
        let z = Mat::new(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
        let mut probs = Mat::zeros(n, n);
        for j in 0..n {
            probs.row_mut(j).copy_from_slice(&reference_probs(&w, z.row(j), 1.0));
        }
        let summed = |w: &Mat| -> f64 { (0..n).map(|j| reference_ce(w, z.row(j), j, 1.0)).sum() };
        for i in 0..n {
            let dir = CorrectedDirection::corrected(i, &probs, &z, i)?;
            for k in 0..d {
                let fd = central(
                    |e| {
                        let mut shifted = w.clone();
                        shifted[(i, k)] += e;
                        summed(&shifted)
                    },
                    cfg.step,
                );
                worst = worst.max((dir.direction[k] + fd).abs());
            }
            cases += 1;
        }
    }
    Ok((worst, cases))
}

pub fn worked_example_probs() -> ProbVector {
    let mut p = vec![0.01; 10];
    p[0] = 0.91;
    ProbVector::from_probs(p).expect("valid distribution")
}

fn worked_example(log_coef: f64) -> Result<WorkedExample> {
    let p = worked_example_probs();
    let s = sqrt_distribution(&p);
    let z = [2.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0];
    let bank = Mat::zeros(10, 3);
    let ce = ce_loss_and_grads(&p, 0, &z, &bank, 1.0)?;
    let j = 1;
    let g = sqrtkl_logit_grad_with(&p, log_coef);
    let kl_row: Vec<f64> = z.iter().map(|zk| g[j] * zk).collect();
    let zn = l2_norm(&z);
    let ce_ratio = l2_norm(ce.grad_w.row(j)) / zn;
    let sqrtkl_ratio = l2_norm(&kl_row) / zn;
    Ok(WorkedExample {
        u: s.u,
        c: s.c,
        ce_ratio,
        sqrtkl_ratio,
        amplification: sqrtkl_ratio / ce_ratio,
    })
}
