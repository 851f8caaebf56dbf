//! Strictly convex quadratic programs `min ½xᵀHx + cᵀx`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, is_positive_definite, Matrix, Vector, SYMMETRY_TOL};

/// Largest condition number accepted by the instance generators.
pub const MAX_GENERATOR_COND: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProblem {
    h: Matrix,
    c: Vector,
    x0: Vector,
}

impl QuadraticProblem {
    /// Validates `H = Hᵀ ≻ 0`, `c ≠ 0` and matching dimensions.
    pub fn new(h: Matrix, c: Vector, x0: Vector) -> Result<Self> {
        let n = h.dim();
        if n == 0 {
            return Err(Error::InvalidProblem("dimension must be positive".into()));
        }
        c.check_len(n)?;
        x0.check_len(n)?;
        if h.max_asymmetry() > SYMMETRY_TOL * h.max_abs() {
            return Err(Error::InvalidProblem("H must be symmetric".into()));
        }
        if !is_positive_definite(&h)? {
            return Err(Error::InvalidProblem("H must be positive definite".into()));
        }
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidProblem("c must be nonzero".into()));
        }
        let h = h.mark_symmetric()?;
        Ok(QuadraticProblem { h, c, x0 })
    }

    /// The hand-checkable fixture `H = diag(2,4)`, `c = (-2,-4)`, `x0 = 0`,
    /// minimizer `(1,1)`.
    pub fn qp_a() -> Self {
        QuadraticProblem::new(
            Matrix::diag(&[2.0, 4.0]),
            Vector::from_vec(vec![-2.0, -4.0]),
            Vector::zeros(2),
        )
        .expect("fixture is valid")
    }

    pub fn with_x0(mut self, x0: Vector) -> Result<Self> {
        x0.check_len(self.n())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.h.dim()
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn c(&self) -> &Vector {
        &self.c
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    /// Unique minimizer `x* = -H⁻¹c`.
    pub fn minimizer(&self) -> Result<Vector> {
        linalg::solve_linear(&self.h, &-&self.c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        QuadraticProblem::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProblemFile {
            n: self.n(),
            h: self.h.to_rows(),
            c: self.c.as_slice().to_vec(),
            x0: self.x0.as_slice().to_vec(),
        };
        let mut text = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.h.len() != file.n {
            return Err(Error::Format(format!(
                "H has {} rows but n = {}",
                file.h.len(),
                file.n
            )));
        }
        let h = Matrix::from_rows(&file.h).map_err(|e| Error::Format(e.to_string()))?;
        let c = Vector::new(file.c)?;
        let x0 = Vector::new(file.x0)?;
        QuadraticProblem::new(h, c, x0)
    }
}

/// On-disk layout: `{"n": int, "H": [[...]], "c": [...], "x0": [...]}`.
#[derive(Serialize, Deserialize)]
struct ProblemFile {
    n: usize,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    c: Vec<f64>,
    x0: Vec<f64>,
}

/// `½xᵀHx + cᵀx`.
pub fn objective_at(qp: &QuadraticProblem, x: &Vector) -> Result<f64> {
    x.check_len(qp.n())?;
    Ok(0.5 * qp.h.quadratic_form(x) + qp.c.dot(x))
}

/// `Hx + c`.
pub fn gradient_at(qp: &QuadraticProblem, x: &Vector) -> Result<Vector> {
    x.check_len(qp.n())?;
    Ok(&qp.h.apply(x) + &qp.c)
}

/// Eigenvalues (ascending, positive) and seed for a generated instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSpec {
    eigenvalues: Vec<f64>,
    seed: u64,
}

impl SpectrumSpec {
    /// Sorts `eigenvalues` ascending; rejects non-positive values and
    /// condition numbers above [`MAX_GENERATOR_COND`].
    pub fn new(mut eigenvalues: Vec<f64>, seed: u64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidProblem("spectrum must be non-empty".into()));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidProblem(format!(
                "eigenvalues must be positive and finite, got {bad}"
            )));
        }
        eigenvalues.sort_by(f64::total_cmp);
        let cond = eigenvalues[eigenvalues.len() - 1] / eigenvalues[0];
        if cond > MAX_GENERATOR_COND * (1.0 + 1e-12) {
            return Err(Error::InvalidProblem(format!(
                "condition number {cond:e} exceeds {MAX_GENERATOR_COND:e}"
            )));
        }
        Ok(SpectrumSpec { eigenvalues, seed })
    }

    /// `n` eigenvalues log-spaced on `[1, cond]`.
    pub fn log_spaced(n: usize, cond: f64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidProblem("n must be positive".into()));
        }
        if !(cond.is_finite() && cond >= 1.0) {
            return Err(Error::InvalidProblem(format!(
                "condition number must be >= 1, got {cond}"
            )));
        }
        let eigs = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    cond.powf(i as f64 / (n - 1) as f64)
                }
            })
            .collect();
        SpectrumSpec::new(eigs, seed)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn condition_number(&self) -> f64 {
        self.eigenvalues[self.n() - 1] / self.eigenvalues[0]
    }
}

/// `H = Q diag(λ) Qᵀ` with a seeded Haar `Q`, `c` standard normal, `x0 = 0`.
pub fn random_spd_problem(spec: &SpectrumSpec) -> QuadraticProblem {
    let n = spec.n();
    let mut rng = linalg::seeded_rng(spec.seed);
    let q = linalg::random_orthogonal_from(&mut rng, n);
    let mut h = Matrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n)
                .map(|k| q.get(i, k) * spec.eigenvalues[k] * q.get(j, k))
                .sum();
            h.set(i, j, v);
            h.set(j, i, v);
        }
    }
    let c = loop {
        let c = Vector::from_vec((0..n).map(|_| rng.sample(StandardNormal)).collect());
        if c.norm() >= 1e-8 {
            break c;
        }
    };
    QuadraticProblem::new(h, c, Vector::zeros(n)).expect("generated spectrum is valid")
}
