//! Preconditioned conjugate gradient with a diagonal preconditioner.
//!
//! ```text
//! r0 = b - A x0;  y0 = r0 / P;  p0 = y0
//! while |r_i| >= eps and i < n:
//!     alpha = r_i.y_i / p_i.A p_i
//!     x += alpha p_i;  r -= alpha A p_i
//!     y = r / P;  beta = r_{i+1}.y_{i+1} / r_i.y_i;  p = y + beta p
//! ```
//!
//! [`pcg_recorded`] additionally keeps a tape from which [`PcgTape::backward`]
//! returns exact cotangents for the damping, the preconditioner and the
//! right-hand side, using the operator itself as its own adjoint.

use crate::curvature::CurvatureOperator;
use crate::error::{Error, Result};
use crate::vecops::{axpy, dot, norm};

/// Curvature along a search direction at or below this is a breakdown.
pub const BREAKDOWN: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct PcgResult {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub iterations: usize,
    /// Set when the operator had no positive curvature along a search direction.
    pub breakdown: bool,
}

#[derive(Debug, Clone, Default)]
struct Iteration {
    p: Vec<f64>,
    q: Vec<f64>,
    r_next: Vec<f64>,
    alpha: f64,
    kappa: f64,
    rho: f64,
    rho_next: f64,
    beta: f64,
}

/// Everything the reverse pass needs.
#[derive(Debug, Clone)]
pub struct PcgTape {
    x0: Vec<f64>,
    r0: Vec<f64>,
    p_diag: Vec<f64>,
    iterations: Vec<Iteration>,
}

/// Cotangents of the solver inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PcgGradients {
    pub damping: Vec<f64>,
    pub p_diag: Vec<f64>,
    pub b: Vec<f64>,
    /// Only computed when requested; costs one extra operator application.
    pub x0: Option<Vec<f64>>,
}

fn check(b: &[f64], x0: &[f64], p_diag: &[f64], eps: f64) -> Result<()> {
    if x0.len() != b.len() || p_diag.len() != b.len() {
        return Err(Error::Shape(format!(
            "pcg: b has {} entries, x0 {}, preconditioner {}",
            b.len(),
            x0.len(),
            p_diag.len()
        )));
    }
    if let Some(bad) = p_diag.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("preconditioner entries must be positive, got {bad}")));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("pcg threshold must be nonnegative, got {eps}")));
    }
    Ok(())
}

fn solve(
    b: &[f64],
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    x0: &[f64],
    p_diag: &[f64],
    n: usize,
    eps: f64,
    mut tape: Option<&mut PcgTape>,
) -> Result<PcgResult> {
    check(b, x0, p_diag, eps)?;
    let ax0 = apply(x0)?;
    let mut x = x0.to_vec();
    let mut r: Vec<f64> = b.iter().zip(&ax0).map(|(bi, ai)| bi - ai).collect();
    if let Some(t) = tape.as_deref_mut() {
        t.r0 = r.clone();
    }
    let mut y: Vec<f64> = r.iter().zip(p_diag).map(|(ri, pi)| ri / pi).collect();
    let mut p = y.clone();
    let mut rho = dot(&r, &y);
    let mut i = 0;
    let mut breakdown = false;
    while i < n && norm(&r) >= eps && rho != 0.0 {
        let q = apply(&p)?;
        let kappa = dot(&p, &q);
        if kappa <= BREAKDOWN {
            breakdown = true;
            break;
        }
        let alpha = rho / kappa;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        for ((yi, ri), pi) in y.iter_mut().zip(&r).zip(p_diag) {
            *yi = ri / pi;
        }
        let rho_next = dot(&r, &y);
        let beta = rho_next / rho;
        let p_prev = std::mem::replace(&mut p, y.clone());
        axpy(beta, &p_prev, &mut p);
        if let Some(t) = tape.as_deref_mut() {
            t.iterations.push(Iteration {
                p: p_prev,
                q,
                r_next: r.clone(),
                alpha,
                kappa,
                rho,
                rho_next,
                beta,
            });
        }
        rho = rho_next;
        i += 1;
    }
    Ok(PcgResult { x, r, iterations: i, breakdown })
}

/// Solves `A x = b` by at most `n` iterations from `x0`. `eps = 0` disables
/// the residual test. Costs `1 + iterations` applications of `A`, plus the
/// one that detected a breakdown.
pub fn pcg(
    b: &[f64],
    apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    x0: &[f64],
    p_diag: &[f64],
    n: usize,
    eps: f64,
) -> Result<PcgResult> {
    solve(b, apply, x0, p_diag, n, eps, None)
}

/// [`pcg`] on a curvature operator, keeping the tape.
pub fn pcg_recorded(
    b: &[f64],
    op: &CurvatureOperator<'_>,
    x0: &[f64],
    p_diag: &[f64],
    n: usize,
    eps: f64,
) -> Result<(PcgResult, PcgTape)> {
    let mut tape = PcgTape { x0: x0.to_vec(), r0: Vec::new(), p_diag: p_diag.to_vec(), iterations: Vec::new() };
    let res = solve(b, |v| op.ggn_vp(v), x0, p_diag, n, eps, Some(&mut tape))?;
    Ok((res, tape))
}

impl PcgTape {
    pub fn iterations(&self) -> usize {
        self.iterations.len()
    }

    /// Reverse pass for cotangents `x_bar` of the returned solution and
    /// `r_bar` of the returned residual. `op` must be the operator used in
    /// the forward solve. The operator's own parameters are treated as
    /// constants apart from its damping.
    pub fn backward(
        &self,
        op: &CurvatureOperator<'_>,
        x_bar: &[f64],
        r_bar: Option<&[f64]>,
        want_x0: bool,
    ) -> Result<PcgGradients> {
        let d = self.x0.len();
        if x_bar.len() != d || r_bar.is_some_and(|r| r.len() != d) {
            return Err(Error::Shape(format!("pcg backward: cotangents for dim {d}")));
        }
        let pd = &self.p_diag;
        let mut s_bar = vec![0.0; d];
        let mut p_diag_bar = vec![0.0; d];
        let xb = x_bar.to_vec();
        let mut rb = r_bar.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
        // Cotangent of the search direction produced by the iteration being undone.
        let mut pb = vec![0.0; d];
        let mut rho_bar = 0.0;

        for it in self.iterations.iter().rev() {
            // p_{i+1} = y_{i+1} + beta p_i
            let mut yb = pb.clone();
            let beta_bar = dot(&pb, &it.p);
            let mut pb_i: Vec<f64> = pb.iter().map(|v| it.beta * v).collect();
            // beta = rho_{i+1} / rho_i
            rho_bar += beta_bar / it.rho;
            let mut rho_i_bar = -beta_bar * it.rho_next / (it.rho * it.rho);
            // rho_{i+1} = r_{i+1} . y_{i+1},  y_{i+1} = r_{i+1} / P
            for k in 0..d {
                let y = it.r_next[k] / pd[k];
                rb[k] += rho_bar * y;
                yb[k] += rho_bar * it.r_next[k];
                rb[k] += yb[k] / pd[k];
                p_diag_bar[k] -= yb[k] * y / pd[k];
            }
            // r_{i+1} = r_i - alpha q_i;  x_{i+1} = x_i + alpha p_i
            let alpha_bar = dot(&xb, &it.p) - dot(&rb, &it.q);
            let mut qb: Vec<f64> = rb.iter().map(|v| -it.alpha * v).collect();
            axpy(it.alpha, &xb, &mut pb_i);
            // alpha = rho_i / kappa_i
            rho_i_bar += alpha_bar / it.kappa;
            let kappa_bar = -alpha_bar * it.rho / (it.kappa * it.kappa);
            // kappa = p_i . q_i
            axpy(kappa_bar, &it.q, &mut pb_i);
            axpy(kappa_bar, &it.p, &mut qb);
            // q_i = (H + diag s) p_i
            let hq = op.ggn_vp_grad(&qb)?;
            for k in 0..d {
                pb_i[k] += hq[k];
                s_bar[k] += qb[k] * it.p[k];
            }
            pb = pb_i;
            rho_bar = rho_i_bar;
        }

        // p0 = y0;  rho0 = r0 . y0;  y0 = r0 / P
        for k in 0..d {
            let y = self.r0[k] / pd[k];
            let yb = pb[k] + rho_bar * self.r0[k];
            rb[k] += rho_bar * y + yb / pd[k];
            p_diag_bar[k] -= yb * y / pd[k];
        }
        // r0 = b - (H + diag s) x0
        for k in 0..d {
            s_bar[k] -= rb[k] * self.x0[k];
        }
        let x0_bar = if want_x0 {
            let h_rb = op.ggn_vp_grad(&rb)?;
            Some(xb.iter().zip(&h_rb).map(|(a, b)| a - b).collect())
        } else {
            None
        };
        Ok(PcgGradients { damping: s_bar, p_diag: p_diag_bar, b: rb, x0: x0_bar })
    }
}
