//! The method of conjugate gradients (Hestenes–Stiefel form) with exact line
//! search on a quadratic program.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problem::QuadraticProblem;

/// Iterations allowed beyond `n` before a run counts as failing to terminate.
pub const TERMINATION_SLACK: usize = 5;

/// One iterate of a line-search method. `p` and `theta` are absent on the
/// final (terminating) state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationState {
    pub k: usize,
    pub x: Vector,
    pub g: Vector,
    pub p: Option<Vector>,
    pub theta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub states: Vec<IterationState>,
    /// Index of the last recorded state.
    pub r: usize,
    pub converged: bool,
}

impl Trace {
    pub fn final_state(&self) -> &IterationState {
        &self.states[self.r]
    }

    /// States that carry a search direction.
    pub fn steps(&self) -> impl Iterator<Item = &IterationState> {
        self.states.iter().filter(|s| s.p.is_some())
    }
}

/// Default stopping tolerance `1e-10 · max(1, ‖g0‖)`.
pub fn default_tol(qp: &QuadraticProblem) -> f64 {
    let g0 = &qp.h().apply(qp.x0()) + qp.c();
    1e-10 * g0.norm().max(1.0)
}

/// Exact minimizing step `-pᵀg / pᵀHp` along `p`.
pub fn exact_step(p: &Vector, g: &Vector, h: &Matrix) -> Result<f64> {
    let curvature = h.quadratic_form(p);
    if curvature <= 1e-14 * p.norm2() * h.frobenius() {
        return Err(Error::CurvatureBreakdown { curvature });
    }
    Ok(-p.dot(g) / curvature)
}

/// `-g + (gᵀg / g_prevᵀg_prev) p_prev`, or `-g` when there is no history.
pub fn cg_direction(g: &Vector, prev: Option<(&Vector, &Vector)>) -> Result<Vector> {
    match prev {
        None => Ok(-g),
        Some((g_prev, p_prev)) => {
            let gnorm2_prev = g_prev.norm2();
            if gnorm2_prev <= 1e-300 {
                return Err(Error::CgBreakdown { gnorm2_prev });
            }
            Ok((-g).axpy(g.norm2() / gnorm2_prev, p_prev))
        }
    }
}

/// Runs CG from `qp.x0()` until `‖g‖ ≤ tol` or `max_iter` steps.
///
/// Hitting `max_iter` yields a trace with `converged = false`; curvature
/// breakdown is an error.
pub fn cg_run(qp: &QuadraticProblem, tol: f64, max_iter: usize) -> Result<Trace> {
    assert!(tol > 0.0, "tolerance must be positive");
    let h = qp.h();
    let mut x = qp.x0().clone();
    let mut g = &h.apply(&x) + qp.c();
    let mut prev: Option<(Vector, Vector)> = None;
    let mut states = Vec::new();

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
            return Ok(Trace {
                states,
                r: k,
                converged,
            });
        }
        let p = cg_direction(&g, prev.as_ref().map(|(gp, pp)| (gp, pp)))?;
        let theta = exact_step(&p, &g, h)?;
        let hp = h.apply(&p);
        let x_next = x.axpy(theta, &p);
        let g_next = g.axpy(theta, &hp);
        states.push(IterationState {
            k,
            x,
            g: g.clone(),
            p: Some(p.clone()),
            theta: Some(theta),
        });
        prev = Some((g, p));
        x = x_next;
        g = g_next;
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{objective_at, random_spd_problem, SpectrumSpec};

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn exact_step_examples() {
        let h = Matrix::diag(&[2.0, 4.0]);
        let theta = exact_step(&v(&[2.0, 4.0]), &v(&[-2.0, -4.0]), &h).unwrap();
        assert!((theta - 5.0 / 18.0).abs() <= 1e-15);

        let g = v(&[0.3, -1.2, 2.0]);
        assert!((exact_step(&-&g, &g, &Matrix::identity(3)).unwrap() - 1.0).abs() <= 1e-15);

        let theta1 = exact_step(
            &v(&[80.0 / 81.0, -20.0 / 81.0]),
            &v(&[-8.0 / 9.0, 4.0 / 9.0]),
            &h,
        )
        .unwrap();
        assert!((theta1 - 0.45).abs() <= 1e-15);
    }

    #[test]
    fn exact_step_rejects_zero_direction() {
        let h = Matrix::diag(&[2.0, 4.0]);
        assert!(matches!(
            exact_step(&Vector::zeros(2), &v(&[1.0, 1.0]), &h),
            Err(Error::CurvatureBreakdown { .. })
        ));
    }

    #[test]
    fn cg_direction_examples() {
        assert_eq!(
            cg_direction(&v(&[-2.0, -4.0]), None).unwrap(),
            v(&[2.0, 4.0])
        );

        let p1 = cg_direction(
            &v(&[-8.0 / 9.0, 4.0 / 9.0]),
            Some((&v(&[-2.0, -4.0]), &v(&[2.0, 4.0]))),
        )
        .unwrap();
        assert!((p1[0] - 80.0 / 81.0).abs() <= 1e-15);
        assert!((p1[1] + 20.0 / 81.0).abs() <= 1e-15);

        let g = v(&[1.0, 2.0]);
        let p_prev = v(&[0.5, 0.5]);
        assert_eq!(
            cg_direction(&g, Some((&g, &p_prev))).unwrap(),
            &(-&g) + &p_prev
        );

        assert!(matches!(
            cg_direction(&g, Some((&Vector::zeros(2), &p_prev))),
            Err(Error::CgBreakdown { .. })
        ));
    }

    #[test]
    fn identity_hessian_converges_in_one_step() {
        let c = v(&[0.4, -2.0, 1.5]);
        let qp = QuadraticProblem::new(Matrix::identity(3), c.clone(), Vector::zeros(3)).unwrap();
        let trace = cg_run(&qp, 1e-12, 10).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.r, 1);
        assert_eq!(trace.final_state().x.clone(), -&c);
    }

    #[test]
    fn qp_a_trace() {
        let trace = cg_run(&QuadraticProblem::qp_a(), 1e-12, 10).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.r, 2);
        assert!((trace.states[0].theta.unwrap() - 5.0 / 18.0).abs() <= 1e-12);
        assert!((trace.states[1].theta.unwrap() - 0.45).abs() <= 1e-12);
        let x2 = &trace.final_state().x;
        assert!((x2[0] - 1.0).abs() <= 1e-12 && (x2[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn distinct_eigenvalue_count_bounds_iterations() {
        // 20 eigenvalues taking 5 distinct values: the Krylov space has dimension 5.
        let eigs: Vec<f64> = (0..20)
            .map(|i| [1.0, 3.0, 10.0, 30.0, 100.0][i % 5])
            .collect();
        let qp = random_spd_problem(&SpectrumSpec::new(eigs, 21).unwrap());
        let trace = cg_run(&qp, 1e-8 * qp.c().norm(), 100).unwrap();
        assert!(trace.converged);
        assert!(trace.r <= 5 + 2, "r = {}", trace.r);
    }

    #[test]
    fn max_iter_flags_non_convergence() {
        let qp = random_spd_problem(&SpectrumSpec::log_spaced(10, 100.0, 1).unwrap());
        let trace = cg_run(&qp, 1e-12, 3).unwrap();
        assert!(!trace.converged);
        assert_eq!(trace.r, 3);
        assert_eq!(trace.states.len(), 4);
    }

    #[test]
    fn descent_on_every_step() {
        let qp = random_spd_problem(&SpectrumSpec::log_spaced(12, 1e3, 4).unwrap());
        let trace = cg_run(&qp, 1e-10, 100).unwrap();
        for w in trace.states.windows(2) {
            let q0 = objective_at(&qp, &w[0].x).unwrap();
            let q1 = objective_at(&qp, &w[1].x).unwrap();
            assert!(q1 < q0 + 1e-12);
            assert!(w[0].p.as_ref().unwrap().dot(&w[0].g) < 0.0);
        }
    }
}
