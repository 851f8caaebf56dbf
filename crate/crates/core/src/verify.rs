//! Randomized property batteries.
//!
//! Each property runs `trials` independent trials. Trial `i` of property `j`
//! draws from its own ChaCha8 stream `(seed, j << 32 | i)`, so reports do not
//! depend on thread scheduling. Trials run in parallel on rayon's pool and
//! are merged in index order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::cg::{cg_run, default_tol, Trace, TERMINATION_SLACK};
use crate::error::{Error, Result};
use crate::lab::{
    self, build_a, build_report, check_corollary_u, check_theorem_iff, degenerate_values,
    extract_w, invert_a, pd_analysis, predict_delta_broyden, predict_delta_rank_one,
    secant_and_span_residuals, w_closed_forms, AForm, DEFAULT_REL_TOL,
};
use crate::linalg::{is_positive_definite, seeded_rng, Matrix, Vector};
use crate::problem::{random_spd_problem, QuadraticProblem, SpectrumSpec};
use crate::qn::{
    self, broyden_update, general_rank_one_term, general_rank_one_update, qn_run,
    rank_one_for_delta, rank_one_for_delta_term, sr1_secant_update, AlphaPair, QnRun, Schedule,
    UpdateScheme, WStrategy,
};

/// Dimensions drawn by default. From `n ≈ 5` upward rounding alone starts
/// to push orthogonality and trace-to-trace agreement past `1e-8`; set
/// [`VerifyConfig::n`] to probe larger instances.
pub const DEFAULT_DIMENSIONS: [usize; 4] = [2, 3, 4, 5];
/// Largest condition number drawn by default.
pub const DEFAULT_COND_MAX: f64 = 1e2;

/// Random SPD instances: `n` uniform over `n_choices`, condition number
/// log-uniform on `[1, cond_max]`, interior eigenvalues log-uniform between
/// `1` and the condition number.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSampler {
    pub n_choices: Vec<usize>,
    pub cond_max: f64,
}

impl Default for InstanceSampler {
    fn default() -> Self {
        InstanceSampler {
            n_choices: DEFAULT_DIMENSIONS.to_vec(),
            cond_max: DEFAULT_COND_MAX,
        }
    }
}

impl InstanceSampler {
    pub fn new(n_choices: Vec<usize>, cond_max: f64) -> Result<Self> {
        if n_choices.is_empty() || n_choices.contains(&0) {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if !(1.0..=crate::problem::MAX_GENERATOR_COND).contains(&cond_max) {
            return Err(Error::InvalidConfig(format!(
                "condition bound {cond_max} out of range"
            )));
        }
        Ok(InstanceSampler {
            n_choices,
            cond_max,
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> QuadraticProblem {
        let n = self.n_choices[rng.gen_range(0..self.n_choices.len())];
        let log_cond = rng.gen_range(0.0..=self.cond_max.log10());
        let cond = 10f64.powf(log_cond);
        let mut eigs = vec![1.0];
        if n > 1 {
            eigs.push(cond);
            for _ in 2..n {
                eigs.push(10f64.powf(rng.gen_range(0.0..=log_cond)));
            }
        }
        let spec = SpectrumSpec::new(eigs, rng.gen()).expect("sampled spectrum is valid");
        random_spd_problem(&spec)
    }

    /// Instance number `index` of the stream seeded by `seed`.
    pub fn problem(&self, seed: u64, index: u64) -> QuadraticProblem {
        self.sample(&mut trial_rng(seed, u64::MAX, index))
    }
}

/// The RNG owned by one trial.
pub fn trial_rng(seed: u64, property: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(property.wrapping_shl(32) ^ trial);
    rng
}

/// Pairwise orthogonality residuals of a CG trace, each relative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Orthogonality {
    /// `max |g_kᵀg_i| / (‖g_k‖‖g_i‖)`, `i < k`.
    pub gradient: f64,
    /// `max |g_kᵀp_i| / (‖g_k‖‖p_i‖)`, `i < k`.
    pub direction: f64,
    /// `max |p_iᵀHp_j| / (‖p_i‖_H‖p_j‖_H)`, `i ≠ j`.
    pub conjugacy: f64,
}

impl Orthogonality {
    pub fn max(&self) -> f64 {
        self.gradient.max(self.direction).max(self.conjugacy)
    }
}

/// A converged trace's final gradient is zero in exact arithmetic and
/// rounding noise in practice, so it is left out.
pub fn cg_orthogonality(trace: &Trace, h: &Matrix) -> Orthogonality {
    let states = if trace.converged {
        &trace.states[..trace.r]
    } else {
        &trace.states[..]
    };
    let hp: Vec<Option<(Vector, f64)>> = states
        .iter()
        .map(|s| {
            s.p.as_ref().map(|p| {
                let hp = h.apply(p);
                let pn = p.dot(&hp).sqrt();
                (hp, pn)
            })
        })
        .collect();
    let mut o = Orthogonality::default();
    for k in 0..states.len() {
        let gk = &states[k].g;
        for i in 0..k {
            let gi = &states[i].g;
            o.gradient = o
                .gradient
                .max(gk.dot(gi).abs() / (gk.norm() * gi.norm()).max(1e-300));
            if let Some(pi) = &states[i].p {
                o.direction = o
                    .direction
                    .max(gk.dot(pi).abs() / (gk.norm() * pi.norm()).max(1e-300));
                if let (Some(pk), Some((hpi, hni)), Some((_, hnk))) = (&states[k].p, &hp[i], &hp[k])
                {
                    o.conjugacy = o.conjugacy.max(pk.dot(hpi).abs() / (hni * hnk).max(1e-300));
                }
            }
        }
    }
    o
}

/// `max_k ‖x_k^a − x_k^b‖ / (1 + ‖x_k^b‖)` over the common prefix.
pub fn iterate_gap(a: &Trace, b: &Trace) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(sa, sb)| (&sa.x - &sb.x).norm() / (1.0 + sb.x.norm()))
        .fold(0.0, f64::max)
}

/// Largest entry of `a - b` relative to `max(1, max |a_ij|)`.
pub fn elementwise_gap(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).max_abs() / a.max_abs().max(1.0)
}

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    /// Restrict random instances to this dimension; fixed-dimension
    /// properties of another size are skipped.
    pub n: Option<usize>,
    /// Run only this property.
    pub property: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub description: &'static str,
    pub ran: bool,
    pub trials: usize,
    pub samples: usize,
    pub failures: usize,
    pub skipped: usize,
    pub breakdowns: usize,
    pub tolerance: f64,
    pub max_residual: f64,
    pub counts: BTreeMap<&'static str, usize>,
    pub maxima: BTreeMap<&'static str, f64>,
    pub minima: BTreeMap<&'static str, f64>,
    pub first_failure: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub trials: usize,
    pub n: Option<usize>,
    pub properties: Vec<PropertyResult>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

/// Per-trial accumulator; merged in trial order.
#[derive(Clone, Debug, Default)]
struct Tally {
    samples: usize,
    failures: usize,
    skipped: usize,
    breakdowns: usize,
    max_residual: f64,
    counts: BTreeMap<&'static str, usize>,
    maxima: BTreeMap<&'static str, f64>,
    minima: BTreeMap<&'static str, f64>,
    first_failure: Option<String>,
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::INFINITY
    } else {
        a.max(b)
    }
}

impl Tally {
    /// Records one sample whose residual must stay within `tol`.
    fn within(&mut self, residual: f64, tol: f64, what: impl FnOnce() -> String) {
        self.expect(residual <= tol, residual, what);
    }

    fn expect(&mut self, ok: bool, residual: f64, what: impl FnOnce() -> String) {
        self.samples += 1;
        self.max_residual = nan_max(self.max_residual, residual);
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }

    fn count(&mut self, key: &'static str) {
        *self.counts.entry(key).or_default() += 1;
    }

    fn max(&mut self, key: &'static str, v: f64) {
        let e = self.maxima.entry(key).or_insert(0.0);
        *e = nan_max(*e, v);
    }

    fn min(&mut self, key: &'static str, v: f64) {
        let e = self.minima.entry(key).or_insert(f64::INFINITY);
        *e = if v.is_nan() { f64::NAN } else { e.min(v) };
    }

    fn breakdown(&mut self, e: &Error) {
        self.breakdowns += 1;
        *self.counts.entry(breakdown_kind(e)).or_default() += 1;
    }

    fn merge(&mut self, other: Tally) {
        self.samples += other.samples;
        self.failures += other.failures;
        self.skipped += other.skipped;
        self.breakdowns += other.breakdowns;
        self.max_residual = nan_max(self.max_residual, other.max_residual);
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        for (k, v) in other.maxima {
            self.max(k, v);
        }
        for (k, v) in other.minima {
            self.min(k, v);
        }
        if self.first_failure.is_none() {
            self.first_failure = other.first_failure;
        }
    }
}

fn breakdown_kind(e: &Error) -> &'static str {
    match e {
        Error::Sr1Degenerate { .. } => "breakdown_sr1",
        Error::DegenerateDelta { .. } => "breakdown_degenerate_delta",
        Error::DegeneratePhi { .. } => "breakdown_degenerate_phi",
        Error::SchemeBreakdown { .. } => "breakdown_scheme",
        _ => "breakdown_other",
    }
}

struct Trial<'a> {
    index: usize,
    sampler: &'a InstanceSampler,
}

struct Property {
    name: &'static str,
    description: &'static str,
    tolerance: f64,
    fixed_n: Option<usize>,
    run: fn(&mut ChaCha8Rng, &Trial) -> Tally,
}

const PROPERTIES: &[Property] = &[
    Property {
        name: "cg-correctness",
        description: "CG terminates within n+5 steps with pairwise orthogonal gradients, directions orthogonal to later gradients, and H-conjugate directions",
        tolerance: 1e-8,
        fixed_n: None,
        run: cg_correctness,
    },
    Property {
        name: "qpa-fixture",
        description: "hand-computed values on H = diag(2,4), c = (-2,-4)",
        tolerance: 1e-12,
        fixed_n: Some(2),
        run: qpa_fixture,
    },
    Property {
        name: "a-forms",
        description: "both expressions of A_k agree under rescaling of p_prev; closed-form inverse; A^-T g = g",
        tolerance: 1e-9,
        fixed_n: None,
        run: a_forms,
    },
    Property {
        name: "qn-invariants",
        description: "shipped schemes keep B_k symmetric and B_k p_k = -g_k; the Broyden family satisfies the secant condition",
        tolerance: 1e-8,
        fixed_n: None,
        run: qn_invariants,
    },
    Property {
        name: "broyden-equivalence",
        description: "Broyden-family iterates and directions match CG for phi in {0, +-0.5, 1, 5}",
        tolerance: 1e-8,
        fixed_n: None,
        run: broyden_equivalence,
    },
    Property {
        name: "delta-prediction",
        description: "measured delta_k matches the closed forms for the Broyden and general rank-one families; BFGS gives delta = 1",
        tolerance: 1e-8,
        fixed_n: None,
        run: delta_prediction,
    },
    Property {
        name: "theorem-corollary",
        description: "the W-condition holds exactly when the U-condition residual is within 1e-8",
        tolerance: 0.0,
        fixed_n: None,
        run: theorem_corollary,
    },
    Property {
        name: "necessity",
        description: "W = I is parallel yet violates the secant and span conditions; W = B_prev keeps the span condition only",
        tolerance: 1e-8,
        fixed_n: Some(3),
        run: necessity,
    },
    Property {
        name: "rank-one",
        description: "general rank-one family is parallel, matches the target-delta construction, has sign(beta) = sign(1/delta - 1/delta_hat), and contains SR1",
        tolerance: 1e-9,
        fixed_n: None,
        run: rank_one,
    },
    Property {
        name: "degeneracy",
        description: "targeting delta_hat or phi_hat aborts with the dedicated error, and W(phi_hat) g = 0",
        tolerance: 1e-8,
        fixed_n: None,
        run: degeneracy,
    },
    Property {
        name: "bfgs-pd",
        description: "BFGS keeps every B_k positive definite over full runs",
        tolerance: 0.0,
        fixed_n: None,
        run: bfgs_pd,
    },
    Property {
        name: "pd-threshold",
        description: "B_k(phi) is positive definite exactly when phi > phi_hat, tested at phi_hat (1 +- 1e-3)",
        tolerance: 0.0,
        fixed_n: None,
        run: pd_threshold,
    },
    Property {
        name: "w-closed-form",
        description: "extracted W_k of Broyden updates matches the closed forms W^0 and W^phi",
        tolerance: 1e-9,
        fixed_n: None,
        run: w_closed_form,
    },
    Property {
        name: "termination-remark",
        description: "W = I runs end with B_r != H",
        tolerance: 1e-4,
        fixed_n: None,
        run: termination_remark,
    },
];

pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|p| p.name).collect()
}

/// Runs the selected batteries. Breakdowns are counted, not fatal.
pub fn run_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if let Some(name) = &cfg.property {
        if !PROPERTIES.iter().any(|p| p.name == name) {
            return Err(Error::InvalidConfig(format!(
                "unknown property '{name}' (known: {})",
                property_names().join(", ")
            )));
        }
    }
    let sampler = match cfg.n {
        Some(n) => InstanceSampler::new(vec![n], DEFAULT_COND_MAX)?,
        None => InstanceSampler::default(),
    };

    let mut properties = Vec::new();
    for (idx, prop) in PROPERTIES.iter().enumerate() {
        if cfg
            .property
            .as_deref()
            .is_some_and(|name| name != prop.name)
        {
            continue;
        }
        let ran = match (cfg.n, prop.fixed_n) {
            (Some(n), Some(fixed)) => n == fixed,
            _ => true,
        };
        let mut total = Tally::default();
        if ran {
            let tallies: Vec<Tally> = (0..cfg.trials)
                .into_par_iter()
                .map(|i| {
                    let mut rng = trial_rng(cfg.seed, idx as u64, i as u64);
                    (prop.run)(
                        &mut rng,
                        &Trial {
                            index: i,
                            sampler: &sampler,
                        },
                    )
                })
                .collect();
            for t in tallies {
                total.merge(t);
            }
        }
        log::info!(
            "{}: {} samples, {} failures, {} breakdowns",
            prop.name,
            total.samples,
            total.failures,
            total.breakdowns
        );
        properties.push(PropertyResult {
            name: prop.name,
            description: prop.description,
            ran,
            trials: if ran { cfg.trials } else { 0 },
            samples: total.samples,
            failures: total.failures,
            skipped: total.skipped,
            breakdowns: total.breakdowns,
            tolerance: prop.tolerance,
            max_residual: total.max_residual,
            counts: total.counts,
            maxima: total.maxima,
            minima: total.minima,
            passed: total.failures == 0,
            first_failure: total.first_failure,
        });
    }
    let passed = properties.iter().all(|p| p.passed);
    Ok(SuiteReport {
        seed: cfg.seed,
        trials: cfg.trials,
        n: cfg.n,
        properties,
        passed,
    })
}

/// Stopping tolerance `1e-8 ‖g0‖` under which CG orthogonality and finite
/// termination are checked.
pub fn termination_tol(qp: &QuadraticProblem) -> f64 {
    let g0 = &qp.h().apply(qp.x0()) + qp.c();
    1e-8 * g0.norm()
}

fn max_iter(qp: &QuadraticProblem) -> usize {
    qp.n() + TERMINATION_SLACK
}

fn run_scheme(qp: &QuadraticProblem, scheme: &UpdateScheme) -> QnRun {
    qn_run(qp, scheme, default_tol(qp), max_iter(qp))
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// `(α_prev, α)` with `α/α_prev` bounded away from 0 and 1.
fn random_alpha_pair(rng: &mut ChaCha8Rng) -> AlphaPair {
    let prev = sign(rng) * rng.gen_range(0.5..2.0);
    let ratio = if rng.gen::<bool>() {
        rng.gen_range(0.2..0.8)
    } else {
        rng.gen_range(1.25..5.0)
    };
    AlphaPair::new(prev, ratio * prev).expect("ratio is bounded away from 1")
}

/// Data of iteration `k ≥ 1` of a QN run.
struct Step<'a> {
    k: usize,
    b_prev: &'a Matrix,
    b: &'a Matrix,
    p_prev: &'a Vector,
    theta_prev: f64,
    g_prev: &'a Vector,
    g: &'a Vector,
    p: &'a Vector,
}

fn steps(run: &QnRun) -> Vec<Step<'_>> {
    (1..run.b.len())
        .map(|k| {
            let (prev, cur) = (&run.trace.states[k - 1], &run.trace.states[k]);
            Step {
                k,
                b_prev: &run.b[k - 1],
                b: &run.b[k],
                p_prev: prev.p.as_ref().unwrap(),
                theta_prev: prev.theta.unwrap(),
                g_prev: &prev.g,
                g: &cur.g,
                p: cur.p.as_ref().unwrap(),
            }
        })
        .collect()
}

fn cg_correctness(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let trace = match cg_run(&qp, termination_tol(&qp), max_iter(&qp)) {
        Ok(trace) => trace,
        Err(e) => {
            t.breakdown(&e);
            return t;
        }
    };
    let o = cg_orthogonality(&trace, qp.h());
    t.max("gradient_orthogonality", o.gradient);
    t.max("direction_orthogonality", o.direction);
    t.max("conjugacy", o.conjugacy);
    if !trace.converged {
        t.count("not_terminated");
    }
    t.expect(trace.converged && o.max() <= 1e-8, o.max(), || {
        format!(
            "trial {}: n = {}, r = {}, converged = {}, orthogonality {:?}",
            trial.index,
            qp.n(),
            trace.r,
            trace.converged,
            o
        )
    });
    t
}

fn qpa_fixture(_rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    if trial.index > 0 {
        return t;
    }
    let qp = QuadraticProblem::qp_a();
    let tol = 1e-12;
    let cg = cg_run(&qp, tol, 10).expect("fixture run");
    let x2 = &cg.final_state().x;
    let check = |t: &mut Tally, label: &'static str, got: f64, want: f64| {
        t.within((got - want).abs(), 1e-12, || {
            format!("{label}: got {got}, want {want}")
        });
    };
    check(&mut t, "r", cg.r as f64, 2.0);
    check(&mut t, "theta0", cg.states[0].theta.unwrap(), 5.0 / 18.0);
    check(&mut t, "theta1", cg.states[1].theta.unwrap(), 0.45);
    check(&mut t, "x2[0]", x2[0], 1.0);
    check(&mut t, "x2[1]", x2[1], 1.0);

    let (p0, g0, g1) = (
        cg.states[0].p.as_ref().unwrap(),
        &cg.states[0].g,
        &cg.states[1].g,
    );
    let a1 = build_a(g1, Some((p0, g0)), AForm::Cg).unwrap();
    let want = [41.0 / 45.0, 2.0 / 45.0, -8.0 / 45.0, 49.0 / 45.0];
    for (got, want) in a1.as_slice().iter().zip(want) {
        check(&mut t, "A1", *got, want);
    }
    let dv = degenerate_values(g1.norm2(), p0.norm2()).unwrap();
    check(&mut t, "delta_hat", dv.delta_hat, 81.0 / 85.0);
    check(&mut t, "phi_hat", dv.phi_hat, -20.25);
    check(
        &mut t,
        "delta(phi=1)",
        predict_delta_broyden(1.0, dv.gnorm2, dv.curvature).unwrap(),
        81.0 / 85.0,
    );

    let rank1 =
        UpdateScheme::general_rank_one(Schedule::constant(AlphaPair::new(1.0, 2.0).unwrap()))
            .unwrap();
    for (scheme, want) in [(UpdateScheme::bfgs(), 1.0), (rank1, 81.0 / 89.0)] {
        let run = qn_run(&qp, &scheme, tol, 10);
        let report = build_report(&cg, &run, &scheme);
        for row in &report.rows {
            // measured δ carries the rounding of two solves
            t.within((row.delta_measured - want).abs(), 1e-10, || {
                format!("{}: delta {} != {want}", scheme.name(), row.delta_measured)
            });
            t.within(row.angle_residual, 1e-10, || {
                format!("{}: angle {}", scheme.name(), row.angle_residual)
            });
        }
    }
    t
}

fn a_forms(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let Ok(cg) = cg_run(&qp, default_tol(&qp), max_iter(&qp)) else {
        t.skipped += 1;
        return t;
    };
    let id = Matrix::identity(qp.n());
    for k in 1..cg.r {
        let (prev, cur) = (&cg.states[k - 1], &cg.states[k]);
        let (p_prev, g_prev, g) = (prev.p.as_ref().unwrap(), &prev.g, &cur.g);
        let scale = sign(rng) * 10f64.powf(rng.gen_range(-6.0..6.0));
        let (a_cg, a_p, inv) = match (
            build_a(g, Some((p_prev, g_prev)), AForm::Cg),
            build_a(g, Some((&p_prev.scale(scale), g_prev)), AForm::P),
            invert_a(g, Some((p_prev, g_prev)), AForm::Cg),
        ) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (a, b, c) => {
                let e = a.err().or(b.err()).or(c.err()).unwrap();
                t.breakdown(&e);
                continue;
            }
        };
        let forms = (&a_cg - &a_p).frobenius() / a_cg.frobenius().max(1.0);
        let product = (&a_cg.matmul(&inv) - &id).frobenius();
        let transpose = (&inv.transpose().apply(g) - g).norm() / g.norm();
        t.max("form_gap", forms);
        t.max("inverse_gap", product);
        t.max("inverse_transpose_gap", transpose);
        t.within(forms, 1e-9, || {
            format!(
                "trial {} k {k}: forms differ by {forms:e} (scale {scale:e})",
                trial.index
            )
        });
        t.within(product, 1e-10, || {
            format!("trial {} k {k}: |A A^-1 - I| = {product:e}", trial.index)
        });
        t.within(transpose, 1e-10, || {
            format!("trial {} k {k}: |A^-T g - g| = {transpose:e}", trial.index)
        });
    }
    t
}

/// A random shipped scheme; `None` means the sampled parameters were rejected.
fn random_parallel_scheme(rng: &mut ChaCha8Rng) -> UpdateScheme {
    match rng.gen_range(0..6) {
        0 => UpdateScheme::bfgs(),
        1 => UpdateScheme::broyden(Schedule::constant(rng.gen_range(-0.9..5.0))).unwrap(),
        2 => UpdateScheme::Sr1Secant,
        3 => UpdateScheme::general_rank_one(Schedule::constant(random_alpha_pair(rng))).unwrap(),
        4 => UpdateScheme::WBased(WStrategy::Identity),
        _ => UpdateScheme::WBased(WStrategy::PreviousB),
    }
}

fn qn_invariants(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let scheme = random_parallel_scheme(rng);
    let run = run_scheme(&qp, &scheme);
    if let Some(e) = &run.abort {
        t.breakdown(e);
    }
    for (k, b) in run.b.iter().enumerate() {
        let s = &run.trace.states[k];
        let asym = (b - &b.transpose()).frobenius() / b.frobenius().max(1e-300);
        let bp = &b.apply(s.p.as_ref().unwrap()) + &s.g;
        let solve = bp.norm() / s.g.norm();
        t.max("asymmetry", asym);
        t.max("solve_residual", solve);
        t.within(asym, 1e-10, || {
            format!("{}: asymmetry {asym:e} at k {k}", scheme.name())
        });
        t.within(solve, 1e-8, || {
            format!("{}: |B p + g| = {solve:e} at k {k}", scheme.name())
        });
    }
    if matches!(scheme, UpdateScheme::BroydenFamily(_)) {
        for st in steps(&run) {
            let hp = qp.h().apply(st.p_prev);
            let secant = (&st.b.apply(st.p_prev) - &hp).norm() / hp.norm();
            t.max("broyden_secant", secant);
            t.within(secant, 1e-8, || {
                format!(
                    "{}: secant residual {secant:e} at k {}",
                    scheme.name(),
                    st.k
                )
            });
        }
    }
    t
}

const EQUIVALENCE_PHIS: [f64; 5] = [0.0, 0.5, -0.5, 1.0, 5.0];

fn broyden_equivalence(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let Ok(cg) = cg_run(&qp, default_tol(&qp), max_iter(&qp)) else {
        t.skipped += 1;
        return t;
    };
    for phi in EQUIVALENCE_PHIS {
        let scheme = UpdateScheme::broyden(Schedule::constant(phi)).unwrap();
        let run = run_scheme(&qp, &scheme);
        let near_degenerate = steps(&run).iter().any(|st| {
            let phi_hat = -st.b_prev.quadratic_form(st.p_prev) / st.g.norm2();
            (phi - phi_hat).abs() <= 1e-6 * phi_hat.abs()
        });
        if near_degenerate || matches!(run.abort, Some(Error::DegeneratePhi { .. })) {
            t.skipped += 1;
            t.count("skipped_near_phi_hat");
            continue;
        }
        if let Some(e) = &run.abort {
            t.breakdown(e);
            continue;
        }
        let report = build_report(&cg, &run, &scheme);
        if report.truncated {
            t.count("length_mismatch");
        }
        let gap = iterate_gap(&run.trace, &cg);
        let angle = report.max_angle();
        t.max("iterate_gap", gap);
        t.max("angle", angle);
        t.within(gap.max(angle), 1e-8, || {
            format!(
                "trial {} phi {phi}: n = {}, iterate gap {gap:e}, angle {angle:e}",
                trial.index,
                qp.n()
            )
        });
    }
    t
}

fn delta_prediction(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let Ok(cg) = cg_run(&qp, default_tol(&qp), max_iter(&qp)) else {
        t.skipped += 1;
        return t;
    };
    let schemes = [
        UpdateScheme::broyden(Schedule::constant(rng.gen_range(-0.9..5.0))).unwrap(),
        UpdateScheme::general_rank_one(Schedule::constant(random_alpha_pair(rng))).unwrap(),
        UpdateScheme::bfgs(),
    ];
    for (i, scheme) in schemes.iter().enumerate() {
        let run = run_scheme(&qp, scheme);
        if let Some(e) = &run.abort {
            t.breakdown(e);
        }
        let report = build_report(&cg, &run, scheme);
        for row in &report.rows {
            let Some(err) = row.delta_error() else {
                t.skipped += 1;
                continue;
            };
            if i == 2 {
                let dev = (row.delta_measured - 1.0).abs();
                t.max("bfgs_delta_deviation", dev);
                t.within(dev, 1e-10, || {
                    format!(
                        "trial {}: BFGS delta {} at k {}",
                        trial.index, row.delta_measured, row.k
                    )
                });
            } else {
                t.max(
                    if i == 0 {
                        "broyden_delta_error"
                    } else {
                        "rank1_delta_error"
                    },
                    err,
                );
                t.count("predicted_iterations");
                t.within(err, 1e-8, || {
                    format!(
                        "trial {} {}: delta {} vs predicted {:?} at k {}",
                        trial.index,
                        scheme.name(),
                        row.delta_measured,
                        row.delta_predicted,
                        row.k
                    )
                });
            }
        }
    }
    t
}

fn theorem_corollary(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let choice = rng.gen_range(0..9);
    let scheme = match choice {
        6 => UpdateScheme::rank_one_for_delta(Schedule::constant(rng.gen_range(0.3..3.0))).unwrap(),
        7 => UpdateScheme::NoUpdate,
        _ => random_parallel_scheme(rng), // 8 perturbs a parallel B_k below
    };
    let run = run_scheme(&qp, &scheme);
    let steps = steps(&run);
    if steps.is_empty() {
        t.skipped += 1;
        return t;
    }
    let st = &steps[rng.gen_range(0..steps.len())];
    let mut b = st.b.clone();
    if choice == 8 {
        let n = qp.n();
        let mut e = Matrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.sample(StandardNormal);
                e.set(i, j, v);
                e.set(j, i, v);
            }
        }
        b = &b + &e.scale(1e-3 * b.frobenius() / e.frobenius());
    }
    let assumption = (&st.b_prev.apply(st.g) - st.g).norm() / st.g.norm();
    if assumption > DEFAULT_REL_TOL {
        t.skipped += 1;
        t.count("skipped_assumption_violated");
        return t;
    }
    let outcome = build_a(st.g, Some((st.p_prev, st.g_prev)), AForm::P).and_then(|a| {
        let th = check_theorem_iff(&b, &a, st.g)?;
        let delta = th
            .delta
            .unwrap_or_else(|| lab::measure_delta(st.p, &b, st.g));
        let cor = check_corollary_u(
            &(&b - st.b_prev),
            &a,
            st.b_prev,
            st.p_prev,
            st.g,
            st.g_prev,
            delta,
        )?;
        Ok((th, cor))
    });
    let (th, cor) = match outcome {
        Ok(v) => v,
        Err(e) => {
            t.breakdown(&e);
            return t;
        }
    };
    let cor_holds = cor <= DEFAULT_REL_TOL;
    if th.holds {
        t.count("theorem_holds");
        t.max("corollary_residual_when_holding", cor);
    } else {
        t.count("theorem_fails");
        t.min("corollary_residual_when_failing", cor);
    }
    let disagreement = if th.holds == cor_holds { 0.0 } else { 1.0 };
    t.within(disagreement, 0.0, || {
        format!(
            "trial {} scheme {} k {}: theorem {:?}, corollary residual {cor:e}",
            trial.index,
            if choice == 8 {
                "perturbed"
            } else {
                scheme.name()
            },
            st.k,
            th
        )
    });
    t
}

fn necessity(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let sampler = InstanceSampler::new(vec![3], trial.sampler.cond_max).unwrap();
    let qp = sampler.sample(rng);
    let Ok(cg) = cg_run(&qp, default_tol(&qp), max_iter(&qp)) else {
        t.skipped += 1;
        return t;
    };
    let residuals = |run: &QnRun| -> Vec<(f64, f64)> {
        steps(run)
            .iter()
            .map(|st| {
                let r = secant_and_span_residuals(
                    &(st.b - st.b_prev),
                    st.p_prev,
                    qp.h(),
                    st.b_prev,
                    st.g,
                    st.g_prev,
                );
                (r.secant, r.span)
            })
            .collect()
    };

    let identity = UpdateScheme::WBased(WStrategy::Identity);
    let run = run_scheme(&qp, &identity);
    if let Some(e) = &run.abort {
        t.breakdown(e);
        return t;
    }
    let angle = build_report(&cg, &run, &identity).max_angle();
    let res = residuals(&run);
    let witness = res.iter().any(|r| r.0 > 1e-4) && res.iter().any(|r| r.1 > 1e-4);
    t.max("identity_angle", angle);
    t.expect(angle <= 1e-8 && witness, angle, || {
        format!(
            "trial {}: W = I angle {angle:e}, residuals {res:?}",
            trial.index
        )
    });

    let run = run_scheme(&qp, &UpdateScheme::WBased(WStrategy::PreviousB));
    if let Some(e) = &run.abort {
        t.breakdown(e);
        return t;
    }
    let res = residuals(&run);
    let span = res.iter().map(|r| r.1).fold(0.0, f64::max);
    let secant_witness = res.iter().any(|r| r.0 > 1e-4);
    t.max("previous_b_span", span);
    t.expect(span <= 1e-8 && secant_witness, span, || {
        format!("trial {}: W = B_prev residuals {res:?}", trial.index)
    });
    t
}

fn rank_one(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();

    // sign of β against the degenerate value, over random scalars
    for _ in 0..10 {
        let alphas = AlphaPair {
            prev: sign(rng) * rng.gen_range(0.1..10.0),
            current: sign(rng) * rng.gen_range(0.0..10.0),
        };
        let gnorm2 = 10f64.powf(rng.gen_range(-2.0..1.0));
        let curvature = sign(rng) * 10f64.powf(rng.gen_range(-2.0..1.0));
        let Ok(delta) = predict_delta_rank_one(alphas, gnorm2, curvature) else {
            t.skipped += 1;
            continue;
        };
        let delta_hat = qn::degenerate_delta(gnorm2, curvature);
        let beta = 1.0 / (alphas.prev * (alphas.current - alphas.prev) * curvature);
        if (beta > 0.0) != (delta < delta_hat) {
            t.count("sign_literal_disagreements");
        }
        let ok = (beta > 0.0) == (1.0 / delta > 1.0 / delta_hat);
        t.expect(ok, if ok { 0.0 } else { 1.0 }, || {
            format!("beta {beta:e} with delta {delta} and delta_hat {delta_hat}")
        });
    }

    let qp = trial.sampler.sample(rng);
    let Ok(cg) = cg_run(&qp, default_tol(&qp), max_iter(&qp)) else {
        t.skipped += 1;
        return t;
    };
    let alphas = random_alpha_pair(rng);
    let scheme = UpdateScheme::general_rank_one(Schedule::constant(alphas)).unwrap();
    let run = run_scheme(&qp, &scheme);
    if let Some(e) = &run.abort {
        t.breakdown(e);
    } else {
        let angle = build_report(&cg, &run, &scheme).max_angle();
        t.max("rank1_angle", angle);
        t.within(angle, 1e-8, || {
            format!("trial {}: {alphas:?} angle {angle:e}", trial.index)
        });
    }
    for st in steps(&run) {
        let gnorm2 = st.g.norm2();
        let curvature = st.b_prev.quadratic_form(st.p_prev);
        let built = predict_delta_rank_one(alphas, gnorm2, curvature).and_then(|delta| {
            Ok((
                general_rank_one_term(st.b_prev, st.p_prev, st.g, st.g_prev, alphas)?.matrix(),
                rank_one_for_delta_term(st.b_prev, st.p_prev, st.g, st.g_prev, delta)?.matrix(),
            ))
        });
        match built {
            Ok((general, targeted)) => {
                let gap = elementwise_gap(&general, &targeted);
                t.max("construction_gap", gap);
                t.within(gap, 1e-9, || {
                    format!(
                        "trial {} k {}: constructions differ by {gap:e}",
                        trial.index, st.k
                    )
                });
            }
            Err(e) => t.breakdown(&e),
        }
    }

    // SR1 inside the family
    let run = run_scheme(&qp, &UpdateScheme::Sr1Secant);
    for st in steps(&run) {
        let sr1 = sr1_secant_update(st.b_prev, st.p_prev, st.theta_prev, qp.h());
        let general = general_rank_one_update(
            st.b_prev,
            st.p_prev,
            st.g,
            st.g_prev,
            AlphaPair::sr1(st.theta_prev),
        );
        if let (Ok(a), Ok(b)) = (sr1, general) {
            let gap = elementwise_gap(&a, &b);
            t.max("sr1_gap", gap);
            t.within(gap, 1e-10, || {
                format!("trial {} k {}: SR1 differs by {gap:e}", trial.index, st.k)
            });
        }
    }
    if let Some(e) = &run.abort {
        if let Error::Sr1Degenerate { theta_prev, .. } = e {
            t.count("sr1_degenerate");
            let off = (theta_prev - 1.0).abs();
            t.within(off, 1e-6, || {
                format!(
                    "trial {}: SR1 rejected theta_prev = {theta_prev}",
                    trial.index
                )
            });
        } else {
            t.breakdown(e);
        }
    }
    if trial.index == 0 {
        // first exact step has θ0 = 1
        let fixture = QuadraticProblem::new(
            Matrix::diag(&[0.5, 1.5, 1.0]),
            Vector::from_vec(vec![1.0, 1.0, 0.0]),
            Vector::zeros(3),
        )
        .unwrap();
        let run = run_scheme(&fixture, &UpdateScheme::Sr1Secant);
        let ok = matches!(run.abort, Some(Error::Sr1Degenerate { .. })) && run.b.len() == 1;
        t.expect(ok, 0.0, || format!("theta0 = 1 fixture: {:?}", run.abort));
    }
    t
}

/// A BFGS run with at least one update and a random step from it.
fn bfgs_step(rng: &mut ChaCha8Rng, trial: &Trial) -> Option<(QuadraticProblem, QnRun, usize)> {
    let qp = trial.sampler.sample(rng);
    let run = run_scheme(&qp, &UpdateScheme::bfgs());
    if run.b.len() < 2 {
        return None;
    }
    let k = rng.gen_range(1..run.b.len());
    Some((qp, run, k))
}

fn degeneracy(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let Some((qp, run, k)) = bfgs_step(rng, trial) else {
        t.skipped += 1;
        return t;
    };
    let st = &steps(&run)[k - 1];
    let dv = degenerate_values(st.g.norm2(), st.b_prev.quadratic_form(st.p_prev)).unwrap();

    let standalone = rank_one_for_delta(st.b_prev, st.p_prev, st.g, st.g_prev, dv.delta_hat);
    t.expect(
        matches!(standalone, Err(Error::DegenerateDelta { .. })),
        0.0,
        || {
            format!(
                "trial {} k {k}: delta_hat accepted: {standalone:?}",
                trial.index
            )
        },
    );
    let predicted = predict_delta_broyden(dv.phi_hat, dv.gnorm2, dv.curvature);
    t.expect(
        matches!(predicted, Err(Error::DegeneratePhi { .. })),
        0.0,
        || {
            format!(
                "trial {} k {k}: phi_hat accepted: {predicted:?}",
                trial.index
            )
        },
    );

    // full runs targeting the k = 1 degenerate values abort at k = 1
    let first = &steps(&run)[0];
    let dv1 =
        degenerate_values(first.g.norm2(), first.b_prev.quadratic_form(first.p_prev)).unwrap();
    let runs = [
        UpdateScheme::rank_one_for_delta(Schedule::constant(dv1.delta_hat)).unwrap(),
        UpdateScheme::broyden(Schedule::constant(dv1.phi_hat)).unwrap(),
    ];
    for scheme in &runs {
        let r = run_scheme(&qp, scheme);
        let ok = matches!(
            r.abort,
            Some(Error::DegenerateDelta { .. }) | Some(Error::DegeneratePhi { .. })
        ) && r.b.len() == 1;
        t.expect(ok, 0.0, || {
            format!(
                "trial {}: {} run ended with {:?}",
                trial.index,
                scheme.name(),
                r.abort
            )
        });
    }

    match w_closed_forms(
        st.b_prev,
        st.p_prev,
        st.theta_prev,
        st.g,
        st.g_prev,
        dv.phi_hat,
    ) {
        Ok((_, w_hat)) => {
            let res = w_hat.apply(st.g).norm() / st.g.norm();
            t.max("w_hat_g", res);
            t.within(res, 1e-8, || {
                format!(
                    "trial {} k {k}: |W(phi_hat) g| / |g| = {res:e}",
                    trial.index
                )
            });
        }
        Err(e) => t.breakdown(&e),
    }
    t
}

fn bfgs_pd(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let qp = trial.sampler.sample(rng);
    let run = run_scheme(&qp, &UpdateScheme::bfgs());
    if let Some(e) = &run.abort {
        t.breakdown(e);
    }
    for (k, b) in run.b.iter().enumerate() {
        let pd = is_positive_definite(b).unwrap_or(false);
        t.expect(pd, if pd { 0.0 } else { 1.0 }, || {
            format!("trial {}: B_{k} not positive definite", trial.index)
        });
    }
    t
}

fn pd_threshold(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let Some((qp, run, k)) = bfgs_step(rng, trial) else {
        t.skipped += 1;
        return t;
    };
    let st = &steps(&run)[k - 1];
    let gnorm2 = st.g.norm2();
    let curvature = st.b_prev.quadratic_form(st.p_prev);
    let phi_hat = -curvature / gnorm2;
    for factor in [1.0 + 1e-3, 1.0 - 1e-3] {
        let phi = phi_hat * factor;
        let analysis = broyden_update(st.b_prev, st.p_prev, qp.h(), phi)
            .and_then(|b| pd_analysis(st.b_prev, phi, gnorm2, curvature, &b));
        match analysis {
            Ok(a) => {
                t.count(if a.pd_observed {
                    "pd_observed"
                } else {
                    "indefinite_observed"
                });
                t.expect(a.agrees(), if a.agrees() { 0.0 } else { 1.0 }, || {
                    format!(
                        "trial {} k {k}: phi = {phi} vs threshold {}: {a:?}",
                        trial.index, a.threshold
                    )
                });
            }
            Err(e) => t.breakdown(&e),
        }
    }
    t
}

fn w_closed_form(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let Some((qp, run, k)) = bfgs_step(rng, trial) else {
        t.skipped += 1;
        return t;
    };
    let st = &steps(&run)[k - 1];
    let phi = rng.gen_range(-0.9..5.0);
    let outcome = (|| -> Result<(f64, f64, f64)> {
        let (w0, wphi) = w_closed_forms(st.b_prev, st.p_prev, st.theta_prev, st.g, st.g_prev, phi)?;
        let a = build_a(st.g, Some((st.p_prev, st.g_prev)), AForm::P)?;
        let e0 = extract_w(&broyden_update(st.b_prev, st.p_prev, qp.h(), 0.0)?, &a)?;
        let ephi = extract_w(&broyden_update(st.b_prev, st.p_prev, qp.h(), phi)?, &a)?;
        let term = Matrix::outer(phi / st.b_prev.quadratic_form(st.p_prev), st.g, st.g);
        Ok((
            (&e0 - &w0).frobenius() / w0.frobenius(),
            (&ephi - &wphi).frobenius() / wphi.frobenius(),
            (&(&ephi - &e0) - &term).frobenius() / w0.frobenius().max(term.frobenius()),
        ))
    })();
    match outcome {
        Ok((r0, rphi, rterm)) => {
            t.max("w0_gap", r0);
            t.max("wphi_gap", rphi);
            t.max("phi_term_gap", rterm);
            let worst = r0.max(rphi).max(rterm);
            t.within(worst, 1e-9, || {
                format!(
                    "trial {} k {k} phi {phi}: gaps {r0:e} {rphi:e} {rterm:e}",
                    trial.index
                )
            });
        }
        Err(e) => t.breakdown(&e),
    }
    t
}

fn termination_remark(rng: &mut ChaCha8Rng, trial: &Trial) -> Tally {
    let mut t = Tally::default();
    let scheme = UpdateScheme::WBased(WStrategy::Identity);
    let mut check = |qp: &QuadraticProblem, label: &str| {
        let run = run_scheme(qp, &scheme);
        if let Some(e) = &run.abort {
            t.breakdown(e);
            return;
        }
        let last = run.b.last().expect("at least one step");
        let gap = (last - qp.h()).frobenius() / qp.h().frobenius();
        t.min("final_gap", gap);
        t.expect(gap > 1e-4, gap, || {
            format!("{label}: |B_r - H| / |H| = {gap:e}")
        });
    };
    if trial.index == 0 && trial.sampler.n_choices.contains(&2) {
        check(&QuadraticProblem::qp_a(), "fixture");
    }
    let qp = trial.sampler.sample(rng);
    check(&qp, &format!("trial {}", trial.index));
    t
}
