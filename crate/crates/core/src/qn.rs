//! Quasi-Newton driver `B_k p_k = -g_k` with exact line search and pluggable
//! update schemes.
//!
//! `B_0 = I`. For `k ≥ 1` the scheme forms `B_k` at the start of iteration
//! `k` from iteration `k-1` quantities, then the direction is solved for.

use std::fmt;
use std::sync::Arc;

use crate::cg::{exact_step, IterationState, Trace};
use crate::error::{Error, Result};
use crate::linalg::{solve_linear, Matrix, Vector};
use crate::problem::QuadraticProblem;

/// Relative distance to a degenerate value below which an update is refused.
pub const DEGENERACY_TOL: f64 = 1e-10;
/// Residual allowed in `W g = (1/δ) g` for user-supplied `W`.
pub const CUSTOM_W_TOL: f64 = 1e-8;

/// Per-iteration parameter sequence. Iteration `k ≥ 1` reads entry `k-1`;
/// past the end the default repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule<T> {
    values: Vec<T>,
    default: T,
}

impl<T: Copy> Schedule<T> {
    pub fn constant(value: T) -> Self {
        Schedule {
            values: Vec::new(),
            default: value,
        }
    }

    /// Uses `values` in order, then repeats the last one.
    pub fn from_values(values: Vec<T>) -> Option<Self> {
        let default = *values.last()?;
        Some(Schedule { values, default })
    }

    pub fn at(&self, k: usize) -> T {
        k.checked_sub(1)
            .and_then(|i| self.values.get(i))
            .copied()
            .unwrap_or(self.default)
    }

    fn all(&self) -> impl Iterator<Item = &T> {
        self.values.iter().chain(std::iter::once(&self.default))
    }
}

/// `(α_{k-1}, α_k)` for the rank-one family `u = α_k g_k - α_{k-1} g_{k-1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaPair {
    pub prev: f64,
    pub current: f64,
}

impl AlphaPair {
    pub fn new(prev: f64, current: f64) -> Result<Self> {
        if !(prev.is_finite() && current.is_finite()) {
            return Err(Error::InvalidScheme("alpha values must be finite".into()));
        }
        if prev == 0.0 {
            return Err(Error::InvalidScheme("alpha_{k-1} must be nonzero".into()));
        }
        if current == prev {
            return Err(Error::InvalidScheme(
                "alpha_k must differ from alpha_{k-1}".into(),
            ));
        }
        Ok(AlphaPair { prev, current })
    }

    /// The pair that reproduces SR1 after a step of length `theta_prev`.
    pub fn sr1(theta_prev: f64) -> Self {
        AlphaPair {
            prev: 1.0 / theta_prev - 1.0,
            current: 1.0 / theta_prev,
        }
    }
}

/// Quantities available to a custom `W_k` supplier.
pub struct WContext<'a> {
    pub k: usize,
    pub b_prev: &'a Matrix,
    pub p_prev: &'a Vector,
    pub g: &'a Vector,
    pub g_prev: &'a Vector,
}

pub type WSupplier = Arc<dyn Fn(&WContext<'_>) -> Matrix + Send + Sync>;

#[derive(Clone)]
pub enum WStrategy {
    Identity,
    PreviousB,
    Custom(WSupplier),
}

impl fmt::Debug for WStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WStrategy::Identity => f.write_str("Identity"),
            WStrategy::PreviousB => f.write_str("PreviousB"),
            WStrategy::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum UpdateScheme {
    /// One-parameter Broyden family; `φ = 0` is BFGS, `φ = 1` DFP.
    BroydenFamily(Schedule<f64>),
    /// SR1 defined by the secant condition.
    Sr1Secant,
    GeneralRankOne(Schedule<AlphaPair>),
    /// Rank-one update constructed to give `p_k = δ_k p_k^CG`.
    RankOneForDelta(Schedule<f64>),
    /// `B_k = A_kᵀ W_k A_k`.
    WBased(WStrategy),
    /// `B_k = I` throughout (steepest descent); a non-parallel baseline.
    NoUpdate,
}

impl UpdateScheme {
    pub fn broyden(phi: Schedule<f64>) -> Result<Self> {
        if phi.all().any(|v| !v.is_finite()) {
            return Err(Error::InvalidScheme("phi must be finite".into()));
        }
        Ok(UpdateScheme::BroydenFamily(phi))
    }

    pub fn bfgs() -> Self {
        UpdateScheme::BroydenFamily(Schedule::constant(0.0))
    }

    pub fn general_rank_one(alphas: Schedule<AlphaPair>) -> Result<Self> {
        for pair in alphas.all() {
            AlphaPair::new(pair.prev, pair.current)?;
        }
        Ok(UpdateScheme::GeneralRankOne(alphas))
    }

    pub fn rank_one_for_delta(deltas: Schedule<f64>) -> Result<Self> {
        for d in deltas.all() {
            if !d.is_finite() || *d == 0.0 {
                return Err(Error::InvalidScheme(
                    "target delta must be finite and nonzero".into(),
                ));
            }
        }
        Ok(UpdateScheme::RankOneForDelta(deltas))
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateScheme::BroydenFamily(_) => "broyden",
            UpdateScheme::Sr1Secant => "sr1",
            UpdateScheme::GeneralRankOne(_) => "rank1",
            UpdateScheme::RankOneForDelta(_) => "delta1",
            UpdateScheme::WBased(WStrategy::Identity) => "w-identity",
            UpdateScheme::WBased(WStrategy::PreviousB) => "w-prev",
            UpdateScheme::WBased(WStrategy::Custom(_)) => "w-custom",
            UpdateScheme::NoUpdate => "none",
        }
    }

    /// Whether the scheme is expected to produce directions parallel to CG.
    pub fn claims_parallelism(&self) -> bool {
        !matches!(self, UpdateScheme::NoUpdate)
    }
}

/// `β u uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOneUpdate {
    pub beta: f64,
    pub u: Vector,
}

impl RankOneUpdate {
    pub fn matrix(&self) -> Matrix {
        Matrix::outer(self.beta, &self.u, &self.u)
    }

    /// `B_prev + β u uᵀ`, symmetric whenever `B_prev` is.
    pub fn apply(&self, b_prev: &Matrix) -> Matrix {
        let mut b = b_prev.clone();
        b.add_outer(self.beta, &self.u, &self.u);
        b
    }
}

/// Solves `B p = -g`.
pub fn qn_direction(b: &Matrix, g: &Vector) -> Result<Vector> {
    solve_linear(b, &-g)
}

fn curvature_of(b: &Matrix, p: &Vector) -> Result<f64> {
    let curvature = b.quadratic_form(p);
    if curvature.abs() <= 1e-14 * p.norm2() * b.frobenius() || curvature == 0.0 {
        return Err(Error::ZeroDenominator("p_prev' B_prev p_prev"));
    }
    Ok(curvature)
}

/// Broyden-family update with parameter `phi`.
pub fn broyden_update(b_prev: &Matrix, p_prev: &Vector, h: &Matrix, phi: f64) -> Result<Matrix> {
    let hp = h.apply(p_prev);
    let php = p_prev.dot(&hp);
    if php <= 1e-14 * p_prev.norm2() * h.frobenius() {
        return Err(Error::ZeroDenominator("p_prev' H p_prev"));
    }
    let bp = b_prev.apply(p_prev);
    let pbp = curvature_of(b_prev, p_prev)?;
    let w = hp.scale(1.0 / php).axpy(-1.0 / pbp, &bp);

    let mut b = b_prev.clone();
    b.add_outer(1.0 / php, &hp, &hp);
    b.add_outer(-1.0 / pbp, &bp, &bp);
    if phi != 0.0 {
        b.add_outer(phi * pbp, &w, &w);
    }
    Ok(b)
}

/// The Broyden `w_k` vector, `Hp/(pᵀHp) - Bp/(pᵀBp)`.
pub fn broyden_w(b_prev: &Matrix, p_prev: &Vector, h: &Matrix) -> Result<Vector> {
    let hp = h.apply(p_prev);
    let php = p_prev.dot(&hp);
    if php <= 0.0 {
        return Err(Error::ZeroDenominator("p_prev' H p_prev"));
    }
    let pbp = curvature_of(b_prev, p_prev)?;
    Ok(hp.scale(1.0 / php).axpy(-1.0 / pbp, &b_prev.apply(p_prev)))
}

/// The rank-one term `β u uᵀ` with `u = α_k g - α_{k-1} g_prev` and
/// `β = 1 / (α_{k-1}(α_k - α_{k-1}) p_prevᵀ B_prev p_prev)`.
pub fn general_rank_one_term(
    b_prev: &Matrix,
    p_prev: &Vector,
    g: &Vector,
    g_prev: &Vector,
    alphas: AlphaPair,
) -> Result<RankOneUpdate> {
    let alphas = AlphaPair::new(alphas.prev, alphas.current)?;
    let curvature = curvature_of(b_prev, p_prev)?;
    let beta = 1.0 / (alphas.prev * (alphas.current - alphas.prev) * curvature);
    let u = g.scale(alphas.current).axpy(-alphas.prev, g_prev);
    Ok(RankOneUpdate { beta, u })
}

pub fn general_rank_one_update(
    b_prev: &Matrix,
    p_prev: &Vector,
    g: &Vector,
    g_prev: &Vector,
    alphas: AlphaPair,
) -> Result<Matrix> {
    Ok(general_rank_one_term(b_prev, p_prev, g, g_prev, alphas)?.apply(b_prev))
}

/// SR1 update from the secant condition, `u = (H - B_prev) p_prev`.
///
/// `theta_prev` is only carried into [`Error::Sr1Degenerate`].
pub fn sr1_secant_update(
    b_prev: &Matrix,
    p_prev: &Vector,
    theta_prev: f64,
    h: &Matrix,
) -> Result<Matrix> {
    let u = &h.apply(p_prev) - &b_prev.apply(p_prev);
    let denominator = p_prev.dot(&u);
    let diff_norm = (h - b_prev).frobenius();
    if denominator.abs() <= 1e-12 * p_prev.norm2() * diff_norm || denominator == 0.0 {
        return Err(Error::Sr1Degenerate {
            theta_prev,
            denominator,
        });
    }
    Ok(RankOneUpdate {
        beta: 1.0 / denominator,
        u,
    }
    .apply(b_prev))
}

/// The degenerate scaling `1 / (1 + gᵀg / p_prevᵀ B_prev p_prev)`.
pub fn degenerate_delta(gnorm2: f64, curvature: f64) -> f64 {
    1.0 / (1.0 + gnorm2 / curvature)
}

/// The rank-one term that makes the next direction `δ p^CG`.
pub fn rank_one_for_delta_term(
    b_prev: &Matrix,
    p_prev: &Vector,
    g: &Vector,
    g_prev: &Vector,
    delta: f64,
) -> Result<RankOneUpdate> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::InvalidScheme(
            "target delta must be finite and nonzero".into(),
        ));
    }
    let curvature = curvature_of(b_prev, p_prev)?;
    let gnorm2 = g.norm2();
    let delta_hat = degenerate_delta(gnorm2, curvature);
    if (delta - delta_hat).abs() <= DEGENERACY_TOL * delta_hat.abs() {
        return Err(Error::DegenerateDelta { delta, delta_hat });
    }
    let ratio = gnorm2 / curvature;
    let u = g.scale(1.0 / delta - 1.0).axpy(-ratio, g_prev);
    let beta = 1.0 / ((1.0 / delta - 1.0) * gnorm2 - gnorm2 * ratio);
    Ok(RankOneUpdate { beta, u })
}

pub fn rank_one_for_delta(
    b_prev: &Matrix,
    p_prev: &Vector,
    g: &Vector,
    g_prev: &Vector,
    delta: f64,
) -> Result<Matrix> {
    Ok(rank_one_for_delta_term(b_prev, p_prev, g, g_prev, delta)?.apply(b_prev))
}

/// `A_k = I - p_prev gᵀ / (p_prevᵀ g_prev)`.
pub(crate) fn a_pform(p_prev: &Vector, g: &Vector, g_prev: &Vector) -> Result<Matrix> {
    let denom = p_prev.dot(g_prev);
    if denom == 0.0 || denom.abs() <= 1e-300 {
        return Err(Error::ZeroDenominator("p_prev' g_prev"));
    }
    let mut a = Matrix::identity(g.len());
    a.add_outer(-1.0 / denom, p_prev, g);
    Ok(a)
}

/// `AᵀWA`, symmetrized when `W` is symmetric.
pub(crate) fn congruence(a: &Matrix, w: &Matrix) -> Matrix {
    let b = a.transpose().matmul(&w.matmul(a));
    if w.max_asymmetry() <= crate::linalg::SYMMETRY_TOL * w.max_abs() {
        b.symmetrize()
    } else {
        b
    }
}

/// `B_k = A_kᵀ W_k A_k` for the chosen `W_k`.
///
/// Custom `W` must satisfy `W g = (1/δ) g` for some `δ ≠ 0`; otherwise
/// [`Error::InvalidScheme`] reports the residual `‖Wg - (gᵀWg/gᵀg) g‖`.
pub fn w_based_matrix(
    strategy: &WStrategy,
    k: usize,
    b_prev: &Matrix,
    p_prev: &Vector,
    g: &Vector,
    g_prev: &Vector,
) -> Result<Matrix> {
    let a = a_pform(p_prev, g, g_prev)?;
    let w = match strategy {
        WStrategy::Identity => Matrix::identity(g.len()),
        WStrategy::PreviousB => b_prev.clone(),
        WStrategy::Custom(supplier) => {
            let w = supplier(&WContext {
                k,
                b_prev,
                p_prev,
                g,
                g_prev,
            });
            w.check_dim(g.len())?;
            validate_custom_w(&w, g)?;
            w
        }
    };
    Ok(congruence(&a, &w))
}

fn validate_custom_w(w: &Matrix, g: &Vector) -> Result<()> {
    let wg = w.apply(g);
    let gwg = g.dot(&wg);
    let gnorm2 = g.norm2();
    let residual = (&wg - &g.scale(gwg / gnorm2)).norm();
    if gwg == 0.0 || !gwg.is_finite() || residual > CUSTOM_W_TOL * wg.norm() {
        return Err(Error::InvalidScheme(format!(
            "custom W violates W g = (1/delta) g (residual {residual:e})"
        )));
    }
    Ok(())
}

/// A quasi-Newton run: the iterate trace, every `B_k` used (one per step),
/// and the error that stopped it early, if any.
#[derive(Clone, Debug)]
pub struct QnRun {
    pub trace: Trace,
    pub b: Vec<Matrix>,
    pub abort: Option<Error>,
}

fn breakdown(k: usize, e: Error) -> Error {
    match e {
        Error::Sr1Degenerate { .. }
        | Error::DegenerateDelta { .. }
        | Error::DegeneratePhi { .. }
        | Error::InvalidScheme(_)
        | Error::SchemeBreakdown { .. } => e,
        other => Error::SchemeBreakdown {
            k,
            reason: other.to_string(),
        },
    }
}

/// Forms `B_k` for `k ≥ 1` from the previous state.
pub fn next_matrix(
    scheme: &UpdateScheme,
    k: usize,
    qp: &QuadraticProblem,
    b_prev: &Matrix,
    prev: &IterationState,
    g: &Vector,
) -> Result<Matrix> {
    let p_prev = prev.p.as_ref().expect("previous state has a direction");
    let theta_prev = prev.theta.expect("previous state has a step");
    let g_prev = &prev.g;
    match scheme {
        UpdateScheme::BroydenFamily(phi) => {
            let phi = phi.at(k);
            let phi_hat = -b_prev.quadratic_form(p_prev) / g.norm2();
            if (phi - phi_hat).abs() <= DEGENERACY_TOL * phi_hat.abs() {
                return Err(Error::DegeneratePhi { phi, phi_hat });
            }
            broyden_update(b_prev, p_prev, qp.h(), phi)
        }
        UpdateScheme::Sr1Secant => sr1_secant_update(b_prev, p_prev, theta_prev, qp.h()),
        UpdateScheme::GeneralRankOne(alphas) => {
            general_rank_one_update(b_prev, p_prev, g, g_prev, alphas.at(k))
        }
        UpdateScheme::RankOneForDelta(deltas) => {
            rank_one_for_delta(b_prev, p_prev, g, g_prev, deltas.at(k))
        }
        UpdateScheme::WBased(strategy) => w_based_matrix(strategy, k, b_prev, p_prev, g, g_prev),
        UpdateScheme::NoUpdate => Ok(Matrix::identity(g.len())),
    }
}

/// Runs quasi-Newton from `qp.x0()` with `B_0 = I`.
///
/// Scheme failures (degenerate values, singular `B_k`) end the run early:
/// the partial trace is returned with `converged = false` and the error in
/// [`QnRun::abort`].
pub fn qn_run(qp: &QuadraticProblem, scheme: &UpdateScheme, tol: f64, max_iter: usize) -> QnRun {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = qp.n();
    let h = qp.h();
    let mut x = qp.x0().clone();
    let mut g = &h.apply(&x) + qp.c();
    let mut states: Vec<IterationState> = Vec::new();
    let mut bs: Vec<Matrix> = Vec::new();

    let finish = |states: Vec<IterationState>, bs, converged, abort| {
        let r = states.len() - 1;
        QnRun {
            trace: Trace {
                states,
                r,
                converged,
            },
            b: bs,
            abort,
        }
    };

    for k in 0.. {
        if g.norm() <= tol || k == max_iter {
            let converged = g.norm() <= tol;
            states.push(IterationState {
                k,
                x,
                g,
                p: None,
                theta: None,
            });
            return finish(states, bs, converged, None);
        }
        let step = (|| -> Result<(Matrix, Vector, f64)> {
            let b = if k == 0 {
                Matrix::identity(n)
            } else {
                next_matrix(scheme, k, qp, &bs[k - 1], &states[k - 1], &g)?
            };
            if !b.is_finite() {
                return Err(Error::ZeroDenominator("update produced non-finite entries"));
            }
            let p = qn_direction(&b, &g)?;
            let theta = exact_step(&p, &g, h)?;
            Ok((b, p, theta))
        })();
        match step {
            Ok((b, p, theta)) => {
                let x_next = x.axpy(theta, &p);
                let g_next = g.axpy(theta, &h.apply(&p));
                states.push(IterationState {
                    k,
                    x,
                    g,
                    p: Some(p),
                    theta: Some(theta),
                });
                bs.push(b);
                x = x_next;
                g = g_next;
            }
            Err(e) => {
                states.push(IterationState {
                    k,
                    x,
                    g,
                    p: None,
                    theta: None,
                });
                return finish(states, bs, false, Some(breakdown(k, e)));
            }
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cg::cg_run;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    fn qpa_step1() -> (Matrix, Vector, Vector, Vector, Matrix) {
        // B0, p0, g1, g0, H for the diag(2,4) fixture
        (
            Matrix::identity(2),
            v(&[2.0, 4.0]),
            v(&[-8.0 / 9.0, 4.0 / 9.0]),
            v(&[-2.0, -4.0]),
            Matrix::diag(&[2.0, 4.0]),
        )
    }

    fn p1_cg() -> Vector {
        v(&[80.0 / 81.0, -20.0 / 81.0])
    }

    fn assert_close(a: &Vector, b: &Vector, tol: f64) {
        assert!((a - b).norm() <= tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn direction_examples() {
        assert_eq!(
            qn_direction(&Matrix::identity(2), &v(&[-2.0, -4.0])).unwrap(),
            v(&[2.0, 4.0])
        );
        assert_eq!(
            qn_direction(&Matrix::diag(&[2.0, 4.0]), &v(&[2.0, 4.0])).unwrap(),
            v(&[-1.0, -1.0])
        );
        assert!(qn_direction(&Matrix::zeros(2), &v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn direction_with_identity_w_matches_cg() {
        let (b0, p0, g1, g0, _) = qpa_step1();
        let b1 = w_based_matrix(&WStrategy::Identity, 1, &b0, &p0, &g1, &g0).unwrap();
        assert_close(&qn_direction(&b1, &g1).unwrap(), &p1_cg(), 1e-12);
    }

    #[test]
    fn bfgs_step_gives_cg_direction() {
        let (b0, p0, g1, _, h) = qpa_step1();
        let b1 = broyden_update(&b0, &p0, &h, 0.0).unwrap();
        assert_close(&qn_direction(&b1, &g1).unwrap(), &p1_cg(), 1e-12);
        assert_eq!(b1.max_asymmetry(), 0.0);
    }

    #[test]
    fn broyden_is_linear_in_phi() {
        let (b0, p0, _, _, h) = qpa_step1();
        let b_bfgs = broyden_update(&b0, &p0, &h, 0.0).unwrap();
        let b_dfp = broyden_update(&b0, &p0, &h, 1.0).unwrap();
        let w = broyden_w(&b0, &p0, &h).unwrap();
        let expected = Matrix::outer(b0.quadratic_form(&p0), &w, &w);
        assert!((&(&b_dfp - &b_bfgs) - &expected).frobenius() <= 1e-14);
    }

    #[test]
    fn broyden_w_is_scaled_gradient() {
        let (b0, p0, g1, _, h) = qpa_step1();
        let w = broyden_w(&b0, &p0, &h).unwrap();
        assert_close(&w, &g1.scale(1.0 / b0.quadratic_form(&p0)), 1e-10);
    }

    #[test]
    fn general_rank_one_fixture_delta() {
        let (b0, p0, g1, g0, _) = qpa_step1();
        let b1 =
            general_rank_one_update(&b0, &p0, &g1, &g0, AlphaPair::new(1.0, 2.0).unwrap()).unwrap();
        let p1 = qn_direction(&b1, &g1).unwrap();
        assert_close(&p1, &p1_cg().scale(81.0 / 89.0), 1e-12);
    }

    #[test]
    fn general_rank_one_matches_sr1_vector() {
        let (b0, p0, g1, g0, h) = qpa_step1();
        let theta0 = 5.0 / 18.0;
        let term = general_rank_one_term(&b0, &p0, &g1, &g0, AlphaPair::sr1(theta0)).unwrap();
        let secant_u = &h.apply(&p0) - &b0.apply(&p0);
        assert_close(&term.u, &secant_u, 1e-10);
    }

    #[test]
    fn general_rank_one_scale_invariant() {
        let (b0, p0, g1, g0, _) = qpa_step1();
        let u1 =
            general_rank_one_term(&b0, &p0, &g1, &g0, AlphaPair::new(0.7, -1.3).unwrap()).unwrap();
        let u2 =
            general_rank_one_term(&b0, &p0, &g1, &g0, AlphaPair::new(1.4, -2.6).unwrap()).unwrap();
        assert!((&u1.matrix() - &u2.matrix()).frobenius() <= 1e-14);
    }

    #[test]
    fn alpha_validation() {
        assert!(matches!(
            AlphaPair::new(0.0, 1.0),
            Err(Error::InvalidScheme(_))
        ));
        let err = AlphaPair::new(1.0, 1.0).unwrap_err();
        assert!(err
            .to_string()
            .contains("alpha_k must differ from alpha_{k-1}"));
        let bad = Schedule::from_values(vec![
            AlphaPair {
                prev: 1.0,
                current: 2.0,
            },
            AlphaPair {
                prev: 3.0,
                current: 3.0,
            },
        ])
        .unwrap();
        assert!(UpdateScheme::general_rank_one(bad).is_err());
    }

    #[test]
    fn sr1_examples() {
        let (b0, p0, _, _, h) = qpa_step1();
        assert!(matches!(
            sr1_secant_update(&h, &p0, 0.5, &h),
            Err(Error::Sr1Degenerate { .. })
        ));
        let b1 = sr1_secant_update(&b0, &p0, 5.0 / 18.0, &h).unwrap();
        assert_close(&b1.apply(&p0), &h.apply(&p0), 1e-12);

        // H = I, B0 = I: first step has theta = 1
        let id = Matrix::identity(3);
        match sr1_secant_update(&id, &v(&[1.0, -2.0, 0.5]), 1.0, &id) {
            Err(Error::Sr1Degenerate { theta_prev, .. }) => assert_eq!(theta_prev, 1.0),
            other => panic!("expected degenerate SR1, got {other:?}"),
        }
    }

    #[test]
    fn rank_one_for_delta_examples() {
        let (b0, p0, g1, g0, _) = qpa_step1();
        let term = rank_one_for_delta_term(&b0, &p0, &g1, &g0, 1.0).unwrap();
        // u reduces to a multiple of g0 when delta = 1
        let ratio = term.u[0] / g0[0];
        assert_close(&term.u, &g0.scale(ratio), 1e-15);
        // delta = 1 makes B1 singular (it annihilates B0⁻¹g0), yet p1^CG
        // still solves the consistent system B1 p = -g1.
        let b1 = term.apply(&b0);
        assert!(matches!(
            qn_direction(&b1, &g1),
            Err(Error::SingularMatrix { .. })
        ));
        assert_close(&b1.apply(&p1_cg()), &-&g1, 1e-12);
        let b_half = rank_one_for_delta(&b0, &p0, &g1, &g0, 0.5).unwrap();
        assert_close(
            &qn_direction(&b_half, &g1).unwrap(),
            &p1_cg().scale(0.5),
            1e-12,
        );

        match rank_one_for_delta(&b0, &p0, &g1, &g0, 81.0 / 85.0) {
            Err(Error::DegenerateDelta { delta_hat, .. }) => {
                assert!((delta_hat - 81.0 / 85.0).abs() < 1e-15)
            }
            other => panic!("expected DegenerateDelta, got {other:?}"),
        }

        assert!(
            rank_one_for_delta_term(&b0, &p0, &g1, &g0, 0.5)
                .unwrap()
                .beta
                > 0.0
        );
        assert!(rank_one_for_delta(&b0, &p0, &g1, &g0, 0.0).is_err());
    }

    #[test]
    fn w_based_strategies_on_fixture() {
        let (b0, p0, g1, g0, _) = qpa_step1();
        let id = w_based_matrix(&WStrategy::Identity, 1, &b0, &p0, &g1, &g0).unwrap();
        let prev = w_based_matrix(&WStrategy::PreviousB, 1, &b0, &p0, &g1, &g0).unwrap();
        assert!((&id - &prev).frobenius() <= 1e-15);

        // expanded form with W = I
        let gp = g0.dot(&p0);
        let mut closed = Matrix::identity(2);
        closed.add_outer(-1.0 / gp, &g1, &p0);
        closed.add_outer(-1.0 / gp, &p0, &g1);
        closed.add_outer(p0.norm2() / (gp * gp), &g1, &g1);
        assert!((&id - &closed).frobenius() <= 1e-10);
    }

    #[test]
    fn custom_w_is_validated() {
        let (b0, p0, g1, g0, _) = qpa_step1();
        let bad: WSupplier = Arc::new(|_| Matrix::from_rows(&[[1.0, 0.5], [0.5, 2.0]]).unwrap());
        assert!(matches!(
            w_based_matrix(&WStrategy::Custom(bad), 1, &b0, &p0, &g1, &g0),
            Err(Error::InvalidScheme(_))
        ));
        let good: WSupplier = Arc::new(|ctx| {
            // 3 I + multiple of the direction orthogonal to g
            let mut w = Matrix::identity(2).scale(3.0);
            let t = Vector::new(vec![-ctx.g[1], ctx.g[0]]).unwrap();
            w.add_outer(1.0, &t, &t);
            w
        });
        let b1 = w_based_matrix(&WStrategy::Custom(good), 1, &b0, &p0, &g1, &g0).unwrap();
        assert_close(
            &qn_direction(&b1, &g1).unwrap(),
            &p1_cg().scale(1.0 / 3.0),
            1e-12,
        );
    }

    #[test]
    fn bfgs_run_matches_cg_on_fixture() {
        let qp = QuadraticProblem::qp_a();
        let cg = cg_run(&qp, 1e-12, 10).unwrap();
        let qn = qn_run(&qp, &UpdateScheme::bfgs(), 1e-12, 10);
        assert!(qn.abort.is_none());
        assert_eq!(qn.trace.r, cg.r);
        for (a, b) in qn.trace.states.iter().zip(&cg.states) {
            for i in 0..2 {
                assert!((a.x[i] - b.x[i]).abs() <= 1e-10);
            }
        }
        assert_eq!(qn.b.len(), qn.trace.r);
    }

    #[test]
    fn degenerate_run_aborts_with_partial_trace() {
        // H = I with B0 = I: the first step is exact and SR1 is undefined,
        // but the run has already converged. Use a diagonal H whose first
        // Rayleigh quotient is 1 instead.
        let qp = QuadraticProblem::new(
            Matrix::diag(&[0.5, 1.5, 1.0]),
            v(&[1.0, 1.0, 0.0]),
            Vector::zeros(3),
        )
        .unwrap();
        let run = qn_run(&qp, &UpdateScheme::Sr1Secant, 1e-12, 20);
        assert!(!run.trace.converged);
        assert!(matches!(run.abort, Some(Error::Sr1Degenerate { .. })));
        assert_eq!(run.trace.states.len(), 2);
    }

    #[test]
    fn broyden_run_aborts_at_degenerate_phi() {
        let scheme = UpdateScheme::broyden(Schedule::constant(-20.25)).unwrap();
        let run = qn_run(&QuadraticProblem::qp_a(), &scheme, 1e-12, 10);
        assert!(
            matches!(run.abort, Some(Error::DegeneratePhi { .. })),
            "{:?}",
            run.abort
        );
        assert_eq!(run.b.len(), 1);
    }

    #[test]
    fn schedule_indexing() {
        let s = Schedule::from_values(vec![1.0, 2.0]).unwrap();
        assert_eq!(s.at(1), 1.0);
        assert_eq!(s.at(2), 2.0);
        assert_eq!(s.at(7), 2.0);
        assert_eq!(Schedule::constant(0.5).at(3), 0.5);
    }
}
