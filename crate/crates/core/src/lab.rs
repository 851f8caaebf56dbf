//! Checks of when a quasi-Newton direction is parallel to the CG direction.
//!
//! Central object: the rank-one modified identity `A_k` whose inverse maps
//! `-g_k` to `p_k^CG`. Writing `B_k = A_kᵀ W_k A_k`, the QN direction is
//! `δ_k p_k^CG` exactly when `W_k g_k = g_k / δ_k`. Everything here works on
//! stored traces; no solver code path depends on this module.

use serde::Serialize;

use crate::cg::Trace;
use crate::error::{Error, Result};
use crate::linalg::{is_positive_definite, solve_linear, Lu, Matrix, Vector};
use crate::qn::{self, AlphaPair, QnRun, UpdateScheme, WStrategy, DEGENERACY_TOL};

/// Default relative tolerance for "holds" decisions.
pub const DEFAULT_REL_TOL: f64 = 1e-8;
/// Orthogonality `|gᵀp_prev|/(‖g‖‖p_prev‖)` beyond which the closed-form
/// inverse of `A_k` is refused.
pub const ORTHOGONALITY_TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-300;

/// Which expression of `A_k` to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AForm {
    /// `I + p_prev^CG gᵀ / (g_prevᵀ g_prev)`; `p_prev` must be the CG direction.
    Cg,
    /// `I - p_prev gᵀ / (p_prevᵀ g_prev)`; invariant to scaling of `p_prev`.
    P,
}

fn a_coefficient(g_prev: &Vector, p_prev: &Vector, form: AForm) -> Result<f64> {
    match form {
        AForm::Cg => {
            let d = g_prev.norm2();
            if d <= FLOOR {
                return Err(Error::ZeroDenominator("g_prev' g_prev"));
            }
            Ok(1.0 / d)
        }
        AForm::P => {
            let d = p_prev.dot(g_prev);
            if d.abs() <= FLOOR {
                return Err(Error::ZeroDenominator("p_prev' g_prev"));
            }
            Ok(-1.0 / d)
        }
    }
}

/// `A_k`; `prev = None` is iteration 0 and gives `I`.
pub fn build_a(g: &Vector, prev: Option<(&Vector, &Vector)>, form: AForm) -> Result<Matrix> {
    let mut a = Matrix::identity(g.len());
    if let Some((p_prev, g_prev)) = prev {
        p_prev.check_len(g.len())?;
        g_prev.check_len(g.len())?;
        a.add_outer(a_coefficient(g_prev, p_prev, form)?, p_prev, g);
    }
    Ok(a)
}

/// Closed-form `A_k⁻¹`, valid because `gᵀp_prev = 0` on exact-line-search
/// trajectories. Fails if that orthogonality is violated beyond
/// [`ORTHOGONALITY_TOL`].
pub fn invert_a(g: &Vector, prev: Option<(&Vector, &Vector)>, form: AForm) -> Result<Matrix> {
    let mut inv = Matrix::identity(g.len());
    if let Some((p_prev, g_prev)) = prev {
        p_prev.check_len(g.len())?;
        g_prev.check_len(g.len())?;
        let residual = g.dot(p_prev).abs() / (g.norm() * p_prev.norm()).max(FLOOR);
        if residual > ORTHOGONALITY_TOL {
            return Err(Error::OrthogonalityViolated { residual });
        }
        inv.add_outer(-a_coefficient(g_prev, p_prev, form)?, p_prev, g);
    }
    Ok(inv)
}

/// `W = A⁻ᵀ B A⁻¹` via two LU solves.
pub fn extract_w(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    b.check_dim(a.dim())?;
    let at = Lu::factor(&a.transpose())?;
    let z = at.solve_matrix(b)?; // A⁻ᵀ B
    Ok(at.solve_matrix(&z.transpose())?.transpose()) // (A⁻ᵀ (A⁻ᵀB)ᵀ)ᵀ = A⁻ᵀ B A⁻¹
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoremCheck {
    pub holds: bool,
    pub delta: Option<f64>,
    /// Larger of the `B A⁻¹g` and `W g` residuals, relative.
    pub residual: f64,
}

/// Tests `B A⁻¹ g = g/δ` (and equivalently `W g = g/δ`) with δ taken as
/// the Rayleigh-type quotient `gᵀg / gᵀ(B A⁻¹ g)`.
pub fn check_theorem_iff(b: &Matrix, a: &Matrix, g: &Vector) -> Result<TheoremCheck> {
    check_theorem_iff_with(b, a, g, DEFAULT_REL_TOL)
}

pub fn check_theorem_iff_with(
    b: &Matrix,
    a: &Matrix,
    g: &Vector,
    tol: f64,
) -> Result<TheoremCheck> {
    let gnorm2 = g.norm2();
    if gnorm2 <= FLOOR {
        return Err(Error::ZeroDenominator("g' g"));
    }
    let v = b.apply(&solve_linear(a, g)?);
    let gv = g.dot(&v);
    if gv.abs() <= 1e-14 * g.norm() * v.norm() || gv == 0.0 {
        return Ok(TheoremCheck {
            holds: false,
            delta: None,
            residual: 1.0,
        });
    }
    let delta = gnorm2 / gv;
    let target = g.scale(1.0 / delta);
    let r_b = (&v - &target).norm() / v.norm().max(FLOOR);
    let wg = extract_w(b, a)?.apply(g);
    let r_w = (&wg - &target).norm() / wg.norm().max(FLOOR);
    let residual = r_b.max(r_w);
    Ok(TheoremCheck {
        holds: residual <= tol,
        delta: Some(delta),
        residual,
    })
}

/// Residual of `U A⁻¹ g = (1/δ - 1) g - (gᵀg / p_prevᵀB_prev p_prev) g_prev`,
/// relative to `‖g‖`.
pub fn check_corollary_u(
    u: &Matrix,
    a: &Matrix,
    b_prev: &Matrix,
    p_prev: &Vector,
    g: &Vector,
    g_prev: &Vector,
    delta: f64,
) -> Result<f64> {
    let curvature = b_prev.quadratic_form(p_prev);
    if curvature == 0.0 {
        return Err(Error::ZeroDenominator("p_prev' B_prev p_prev"));
    }
    let lhs = u.apply(&solve_linear(a, g)?);
    let rhs = g
        .scale(1.0 / delta - 1.0)
        .axpy(-g.norm2() / curvature, g_prev);
    Ok((&lhs - &rhs).norm() / g.norm().max(FLOOR))
}

/// `1 / (1 + φ gᵀg / curvature)`.
pub fn predict_delta_broyden(phi: f64, gnorm2: f64, curvature: f64) -> Result<f64> {
    let phi_hat = -curvature / gnorm2;
    if (phi - phi_hat).abs() <= DEGENERACY_TOL * phi_hat.abs() {
        return Err(Error::DegeneratePhi { phi, phi_hat });
    }
    Ok(1.0 / (1.0 + phi * gnorm2 / curvature))
}

/// `1 / (1 + (α_k/α_{k-1}) gᵀg / curvature)`.
pub fn predict_delta_rank_one(alphas: AlphaPair, gnorm2: f64, curvature: f64) -> Result<f64> {
    if alphas.prev == 0.0 {
        return Err(Error::InvalidScheme("alpha_{k-1} must be nonzero".into()));
    }
    let delta_hat = qn::degenerate_delta(gnorm2, curvature);
    let denom = 1.0 + alphas.current / alphas.prev * gnorm2 / curvature;
    if denom.abs()
        <= DEGENERACY_TOL * (1.0 + (alphas.current / alphas.prev * gnorm2 / curvature).abs())
    {
        return Err(Error::DegenerateDelta {
            delta: f64::INFINITY,
            delta_hat,
        });
    }
    let delta = 1.0 / denom;
    if (delta - delta_hat).abs() <= DEGENERACY_TOL * delta_hat.abs() {
        return Err(Error::DegenerateDelta { delta, delta_hat });
    }
    Ok(delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DegenerateValues {
    pub delta_hat: f64,
    pub phi_hat: f64,
    pub curvature: f64,
    pub gnorm2: f64,
}

pub fn degenerate_values(gnorm2: f64, curvature: f64) -> Result<DegenerateValues> {
    if curvature == 0.0 {
        return Err(Error::ZeroDenominator("p_prev' B_prev p_prev"));
    }
    if gnorm2 <= 0.0 {
        return Err(Error::ZeroDenominator("g' g"));
    }
    Ok(DegenerateValues {
        delta_hat: qn::degenerate_delta(gnorm2, curvature),
        phi_hat: -curvature / gnorm2,
        curvature,
        gnorm2,
    })
}

/// `δ = pᵀBp / gᵀg`.
pub fn measure_delta(p: &Vector, b: &Matrix, g: &Vector) -> f64 {
    b.quadratic_form(p) / g.norm2().max(FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PdAnalysis {
    /// `φ̂ = -curvature / gᵀg`.
    pub threshold: f64,
    /// `φ > φ̂`.
    pub satisfied: bool,
    pub pd_observed: bool,
}

impl PdAnalysis {
    pub fn agrees(&self) -> bool {
        self.satisfied == self.pd_observed
    }
}

/// Compares the Broyden-parameter threshold with an observed PD test of
/// `b_new`. Requires `b_prev ≻ 0`.
pub fn pd_analysis(
    b_prev: &Matrix,
    phi: f64,
    gnorm2: f64,
    curvature: f64,
    b_new: &Matrix,
) -> Result<PdAnalysis> {
    if !is_positive_definite(b_prev)? {
        return Err(Error::InvalidScheme(
            "B_prev must be positive definite".into(),
        ));
    }
    let threshold = -curvature / gnorm2;
    Ok(PdAnalysis {
        threshold,
        satisfied: phi > threshold,
        pd_observed: is_positive_definite(b_new)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SecantSpan {
    pub secant: f64,
    pub span: f64,
}

/// Residuals of the secant condition `U p_prev = (H - B_prev) p_prev` and of
/// `range(U) ⊆ span{g_prev, g}`.
pub fn secant_and_span_residuals(
    u: &Matrix,
    p_prev: &Vector,
    h: &Matrix,
    b_prev: &Matrix,
    g: &Vector,
    g_prev: &Vector,
) -> SecantSpan {
    let target = &h.apply(p_prev) - &b_prev.apply(p_prev);
    let secant = (&u.apply(p_prev) - &target).norm() / target.norm().max(1.0);

    let mut basis: Vec<Vector> = Vec::with_capacity(2);
    for v in [g_prev, g] {
        let mut r = v.clone();
        for _ in 0..2 {
            for q in &basis {
                r = r.axpy(-q.dot(&r), q);
            }
        }
        let norm = r.norm();
        if norm > 1e-12 * v.norm() && norm > FLOOR {
            basis.push(r.scale(1.0 / norm));
        }
    }
    let n = u.dim();
    let mut outside2 = 0.0;
    for j in 0..n {
        let mut col = u.column(j);
        for q in &basis {
            col = col.axpy(-q.dot(&col), q);
        }
        outside2 += col.norm2();
    }
    let span = outside2.sqrt() / u.frobenius().max(FLOOR);
    SecantSpan { secant, span }
}

/// Closed forms of `W_k` for the Broyden family:
/// `W⁰ = B_prev + (1/θ_prev - 1) g_prev g_prevᵀ / curvature` and
/// `W^φ = W⁰ + φ g gᵀ / curvature`.
pub fn w_closed_forms(
    b_prev: &Matrix,
    p_prev: &Vector,
    theta_prev: f64,
    g: &Vector,
    g_prev: &Vector,
    phi: f64,
) -> Result<(Matrix, Matrix)> {
    if theta_prev == 0.0 {
        return Err(Error::ZeroDenominator("theta_prev"));
    }
    let curvature = b_prev.quadratic_form(p_prev);
    if curvature == 0.0 {
        return Err(Error::ZeroDenominator("p_prev' B_prev p_prev"));
    }
    let mut w0 = b_prev.clone();
    w0.add_outer((1.0 / theta_prev - 1.0) / curvature, g_prev, g_prev);
    let mut wphi = w0.clone();
    wphi.add_outer(phi / curvature, g, g);
    Ok((w0, wphi))
}

/// Angle between the lines spanned by `u` and `v`, in `[0, π/2]`.
///
/// Uses `2·atan2(‖û - sv̂‖, ‖û + sv̂‖)` with `s = sign(uᵀv)`, which stays
/// accurate for tiny angles where `acos` does not.
pub fn principal_angle(u: &Vector, v: &Vector) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu <= FLOOR || nv <= FLOOR {
        return std::f64::consts::FRAC_PI_2;
    }
    let uh = u.scale(1.0 / nu);
    let s = if u.dot(v) < 0.0 { -1.0 } else { 1.0 };
    let vh = v.scale(s / nv);
    2.0 * (&uh - &vh).norm().atan2((&uh + &vh).norm())
}

/// Per-iteration comparison of a QN run against CG (iterations `k ≥ 1`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub k: usize,
    pub delta_measured: f64,
    pub delta_predicted: Option<f64>,
    pub angle_residual: f64,
    pub w_residual: f64,
    pub u_residual: f64,
    pub assumption_residual: f64,
    pub grad_norm: f64,
}

impl ReportRow {
    pub fn delta_error(&self) -> Option<f64> {
        self.delta_predicted
            .map(|p| (self.delta_measured - p).abs() / p.abs().max(FLOOR))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParallelismReport {
    pub rows: Vec<ReportRow>,
    /// The two traces had different numbers of steps; rows cover the shorter.
    pub truncated: bool,
    pub r_cg: usize,
    pub r_qn: usize,
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

impl ParallelismReport {
    pub fn max_angle(&self) -> f64 {
        max_of(self.rows.iter().map(|r| r.angle_residual))
    }

    pub fn max_w_residual(&self) -> f64 {
        max_of(self.rows.iter().map(|r| r.w_residual))
    }

    pub fn max_u_residual(&self) -> f64 {
        max_of(self.rows.iter().map(|r| r.u_residual))
    }

    pub fn max_assumption_residual(&self) -> f64 {
        max_of(self.rows.iter().map(|r| r.assumption_residual))
    }

    pub fn max_delta_error(&self) -> f64 {
        max_of(self.rows.iter().filter_map(|r| r.delta_error()))
    }

    /// Angle, `W`/`U` condition residuals and δ prediction errors all within
    /// `tol`, and both traces of the same length.
    pub fn is_parallel(&self, tol: f64) -> bool {
        !self.truncated
            && self.max_angle() <= tol
            && self.max_w_residual() <= tol
            && self.max_u_residual() <= tol
            && self.max_delta_error() <= tol
    }
}

/// δ_k the scheme is expected to produce, when it has a closed form.
pub fn predicted_delta(
    scheme: &UpdateScheme,
    k: usize,
    gnorm2: f64,
    curvature: f64,
    theta_prev: f64,
) -> Option<f64> {
    match scheme {
        UpdateScheme::BroydenFamily(phi) => {
            predict_delta_broyden(phi.at(k), gnorm2, curvature).ok()
        }
        UpdateScheme::Sr1Secant => {
            predict_delta_rank_one(AlphaPair::sr1(theta_prev), gnorm2, curvature).ok()
        }
        UpdateScheme::GeneralRankOne(alphas) => {
            predict_delta_rank_one(alphas.at(k), gnorm2, curvature).ok()
        }
        UpdateScheme::RankOneForDelta(deltas) => Some(deltas.at(k)),
        UpdateScheme::WBased(WStrategy::Identity | WStrategy::PreviousB) => Some(1.0),
        UpdateScheme::WBased(WStrategy::Custom(_)) | UpdateScheme::NoUpdate => None,
    }
}

/// Builds the per-iteration report from stored traces of the same problem.
pub fn build_report(cg: &Trace, qn_run: &QnRun, scheme: &UpdateScheme) -> ParallelismReport {
    let qn = &qn_run.trace;
    let cg_steps = cg.steps().count();
    let qn_steps = qn_run.b.len();
    let common = cg_steps.min(qn_steps);
    let mut rows = Vec::with_capacity(common.saturating_sub(1));

    for k in 1..common {
        let prev = &qn.states[k - 1];
        let cur = &qn.states[k];
        let (p_prev, theta_prev) = (prev.p.as_ref().unwrap(), prev.theta.unwrap());
        let (g_prev, g) = (&prev.g, &cur.g);
        let p = cur.p.as_ref().unwrap();
        let (b_prev, b) = (&qn_run.b[k - 1], &qn_run.b[k]);
        let p_cg = cg.states[k].p.as_ref().unwrap();

        let gnorm2 = g.norm2();
        let curvature = b_prev.quadratic_form(p_prev);
        let delta_measured = measure_delta(p, b, g);
        let delta_predicted = predicted_delta(scheme, k, gnorm2, curvature, theta_prev);
        let delta_ref = delta_predicted.unwrap_or(delta_measured);
        let gnorm = g.norm().max(FLOOR);

        let a = build_a(g, Some((p_prev, g_prev)), AForm::P);
        let w_residual = a
            .as_ref()
            .ok()
            .and_then(|a| extract_w(b, a).ok())
            .map(|w| (&w.apply(g) - &g.scale(1.0 / delta_ref)).norm() / gnorm)
            .unwrap_or(f64::INFINITY);
        let u_residual = a
            .as_ref()
            .ok()
            .and_then(|a| {
                check_corollary_u(&(b - b_prev), a, b_prev, p_prev, g, g_prev, delta_ref).ok()
            })
            .unwrap_or(f64::INFINITY);

        rows.push(ReportRow {
            k,
            delta_measured,
            delta_predicted,
            angle_residual: principal_angle(p, p_cg),
            w_residual,
            u_residual,
            assumption_residual: (&b_prev.apply(g) - g).norm() / gnorm,
            grad_norm: g.norm(),
        });
    }

    ParallelismReport {
        rows,
        truncated: cg_steps != qn_steps,
        r_cg: cg.r,
        r_qn: qn.r,
    }
}
