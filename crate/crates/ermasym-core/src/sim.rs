//! Finite-dimensional ERM experiments on Gaussian designs, and the
//! linear-separability threshold.
//!
//! Each trial draws an `m x n` standard normal design (`m = round(delta n)`),
//! labels from the model with the signal fixed at the first basis vector
//! (rotational invariance makes this lossless), minimizes the empirical risk
//! `(1/m) sum loss(y_i a_i' x)`, and records the correlation of the
//! minimizer with the signal and the debiased error `||x - mu x0||^2`.
//!
//! Losses that are nonnegative with a vanishing right tail (logistic,
//! exponential, hinge) have unbounded minimizers whenever the data is
//! linearly separable, which happens with probability one below the
//! threshold `delta* = 1 / min_c E[(G + c SY)_-^2]`; runs below the
//! threshold are tagged with a warning and a diverging-iterate detector.

use crate::error::{CoreError, Result};
use crate::link::{LinkKind, LinkModel};
use crate::loss::{LossKind, LossSpec, Smoothness};
use crate::num;
use crate::quad::{QuadOptions, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    /// Outer iteration budget (gradient or subgradient steps).
    pub steps: usize,
    /// Early stop when the gradient norm falls below `tol_scale * sqrt(n)`.
    pub grad_tol_scale: f64,
    /// Armijo parameters for the backtracking line search.
    pub armijo_beta: f64,
    pub armijo_c: f64,
    /// Iterate norm beyond which the instance is declared separable.
    pub divergence_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 1000,
            grad_tol_scale: 1e-8,
            armijo_beta: 0.5,
            armijo_c: 1e-4,
            divergence_norm: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum X0Mode {
    /// Signal fixed at the first standard basis vector.
    FirstBasis,
    /// Random unit signal with labels drawn from the conditional law
    /// (rotational-invariance cross-check; built-in binary models only).
    RandomUnit,
}

/// A Monte Carlo experiment specification.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: LinkModel,
    pub loss: LossSpec,
    pub n: usize,
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub x0_mode: X0Mode,
    /// Theorem prediction used for the debiased error; when absent the
    /// sample projection coefficient is used instead.
    pub prediction: Option<(f64, f64)>,
}

impl Experiment {
    pub fn new(model: LinkModel, loss: LossSpec, delta: f64) -> Self {
        Experiment {
            model,
            loss,
            n: 128,
            delta,
            trials: 25,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            x0_mode: X0Mode::FirstBasis,
            prediction: None,
        }
    }

    pub fn m(&self) -> usize {
        (self.delta * self.n as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrialResult {
    pub correlation: f64,
    pub debiased_error: f64,
    pub objective_value: f64,
    pub converged: bool,
    pub grad_norm_final: f64,
    pub separable_detected: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub corr_mean: f64,
    pub corr_stderr: f64,
    pub err_mean: f64,
    pub err_stderr: f64,
    pub warnings: Vec<String>,
    pub trials: Vec<TrialResult>,
}

fn mean_stderr(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs all trials (in parallel, deterministically keyed by trial index)
/// and aggregates.
pub fn run_experiment(exp: &Experiment) -> Result<ExperimentSummary> {
    if exp.n < 2 || exp.trials < 1 || !(exp.delta > 0.0) {
        return Err(CoreError::InvalidParameter(
            "experiment needs n >= 2, trials >= 1, delta > 0".into(),
        ));
    }
    let mut warnings = Vec::new();
    if exp.m() <= exp.n {
        warnings.push("m <= n: outside the overdetermined regime".into());
    }
    if has_vanishing_tail(&exp.loss) {
        let thr = separability_threshold(&exp.model)?;
        if exp.delta <= thr {
            warnings.push(format!(
                "SeparableData: delta = {} is at or below the separability threshold {:.4}",
                exp.delta, thr
            ));
        }
    }
    let results: Vec<Result<TrialResult>> = (0..exp.trials)
        .into_par_iter()
        .map(|t| run_trial(exp, t as u64))
        .collect();
    let mut trials = Vec::with_capacity(exp.trials);
    for r in results {
        trials.push(r?);
    }
    if trials.iter().any(|t| t.separable_detected) {
        warnings.push("SeparableData: diverging iterate norm detected".into());
    }
    let (corr_mean, corr_stderr) = mean_stderr(trials.iter().map(|t| t.correlation));
    let (err_mean, err_stderr) = mean_stderr(trials.iter().map(|t| t.debiased_error));
    Ok(ExperimentSummary {
        corr_mean,
        corr_stderr,
        err_mean,
        err_stderr,
        warnings,
        trials,
    })
}

fn has_vanishing_tail(loss: &LossSpec) -> bool {
    matches!(
        loss.kind(),
        LossKind::Logistic | LossKind::Exponential | LossKind::Hinge
    )
}

/// One ERM trial: builds the label-weighted design `YA` (only `y_i a_i`
/// enters the risk), minimizes, and measures.
fn run_trial(exp: &Experiment, trial: u64) -> Result<TrialResult> {
    let n = exp.n;
    let m = exp.m();
    let mut feat = ChaCha8Rng::seed_from_u64(exp.seed);
    feat.set_stream((1 << 32) | trial);

    // label-weighted design and the signal direction expressed in its basis
    let (ya, x0) = match exp.x0_mode {
        X0Mode::FirstBasis => {
            let pairs = exp.model.sampler(exp.seed, trial).take_pairs(m);
            let mut ya = DMatrix::<f64>::zeros(m, n);
            for i in 0..m {
                let (s, y) = pairs[i];
                ya[(i, 0)] = y * s;
                for j in 1..n {
                    // y_i times an independent normal is again normal
                    ya[(i, j)] = feat.sample::<f64, _>(StandardNormal);
                }
            }
            let mut x0 = DVector::zeros(n);
            x0[0] = 1.0;
            (ya, x0)
        }
        X0Mode::RandomUnit => {
            let mut dir = ChaCha8Rng::seed_from_u64(exp.seed);
            dir.set_stream((2 << 32) | trial);
            let mut x0 = DVector::from_fn(n, |_, _| dir.sample::<f64, _>(StandardNormal));
            x0 /= x0.norm();
            let mut labels = ChaCha8Rng::seed_from_u64(exp.seed);
            labels.set_stream((3 << 32) | trial);
            let mut a = DMatrix::<f64>::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    a[(i, j)] = feat.sample::<f64, _>(StandardNormal);
                }
            }
            let mut ya = a.clone();
            for i in 0..m {
                let s = a.row(i).transpose().dot(&x0);
                let y = sample_label(&exp.model, s, &mut labels)?;
                ya.row_mut(i).scale_mut(y);
            }
            (ya, x0)
        }
    };

    let sol = match exp.loss.kind() {
        // exact linear-algebra solution of the least-squares form
        LossKind::Square if exp.loss.id() == "square" => solve_square(&ya, &exp.optimizer),
        _ => match exp.loss.smoothness() {
            Smoothness::C2 => gradient_descent(&exp.loss, &ya, &exp.optimizer)?,
            Smoothness::C0Convex => subgradient_descent(&exp.loss, &ya, &exp.optimizer),
        },
    };

    let x = &sol.x;
    let norm = x.norm();
    let correlation = if norm > 0.0 { x.dot(&x0) / norm } else { 0.0 };
    let mu_ref = exp.prediction.map(|(mu, _)| mu).unwrap_or_else(|| x.dot(&x0));
    let debiased_error = (x - &x0 * mu_ref).norm_squared();
    Ok(TrialResult {
        correlation,
        debiased_error,
        objective_value: sol.objective,
        converged: sol.converged,
        grad_norm_final: sol.grad_norm,
        separable_detected: sol.separable,
    })
}

fn sample_label(model: &LinkModel, s: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    match model.kind() {
        LinkKind::Signed => Ok(if s >= 0.0 { 1.0 } else { -1.0 }),
        LinkKind::NoisySigned { eps } => {
            let y = if s >= 0.0 { 1.0 } else { -1.0 };
            let u: f64 = rng.gen();
            Ok(if u < *eps { -y } else { y })
        }
        LinkKind::Logistic => {
            let p = 1.0 / (1.0 + (-s).exp());
            let u: f64 = rng.gen();
            Ok(if u < p { 1.0 } else { -1.0 })
        }
        LinkKind::Probit => {
            let u: f64 = rng.gen();
            Ok(if u < num::normal_cdf(s) { 1.0 } else { -1.0 })
        }
        _ => Err(CoreError::InvalidParameter(
            "conditional labels are only defined for the binary models".into(),
        )),
    }
}

struct OptOutcome {
    x: DVector<f64>,
    objective: f64,
    grad_norm: f64,
    converged: bool,
    separable: bool,
}

fn risk_and_grad(loss: &LossSpec, ya: &DMatrix<f64>, x: &DVector<f64>) -> (f64, DVector<f64>) {
    let m = ya.nrows() as f64;
    let u = ya * x;
    let mut risk = 0.0;
    let mut w = DVector::zeros(u.len());
    for i in 0..u.len() {
        risk += loss.value(u[i]);
        w[i] = loss.derivative(u[i]);
    }
    (risk / m, ya.transpose() * w / m)
}

fn solve_square(ya: &DMatrix<f64>, _cfg: &OptimizerConfig) -> OptOutcome {
    // (t-1)^2 margins: minimize ||YA x - 1||^2 by normal equations
    let gram = ya.transpose() * ya;
    let rhs = ya.transpose() * DVector::from_element(ya.nrows(), 1.0);
    let x = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(ya.ncols()));
    let loss = LossSpec::square();
    let (objective, grad) = risk_and_grad(&loss, ya, &x);
    OptOutcome {
        grad_norm: grad.norm(),
        converged: true,
        separable: false,
        objective,
        x,
    }
}

fn gradient_descent(
    loss: &LossSpec,
    ya: &DMatrix<f64>,
    cfg: &OptimizerConfig,
) -> Result<OptOutcome> {
    let n = ya.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let (mut f, mut g) = risk_and_grad(loss, ya, &x);
    let f0 = f;
    let tol = cfg.grad_tol_scale * (n as f64).sqrt();
    let mut step = 1.0;
    let mut separable = false;
    let mut converged = false;
    for _ in 0..cfg.steps {
        let gn2 = g.norm_squared();
        if gn2.sqrt() <= tol {
            converged = true;
            break;
        }
        let mut t = step;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &x - &g * t;
            let (fc, gc) = risk_and_grad(loss, ya, &cand);
            if fc <= f - cfg.armijo_c * t * gn2 {
                x = cand;
                f = fc;
                g = gc;
                step = (t * 1.5).min(1e6);
                accepted = true;
                break;
            }
            t *= cfg.armijo_beta;
        }
        if !accepted {
            converged = g.norm() <= tol;
            break;
        }
        if x.norm() > cfg.divergence_norm {
            separable = true;
            break;
        }
        if f > 1e3 * (f0 + 1.0) {
            return Err(CoreError::OptimizerDiverged(cfg.steps));
        }
    }
    Ok(OptOutcome {
        grad_norm: g.norm(),
        objective: f,
        converged,
        separable,
        x,
    })
}

fn spectral_norm_estimate(ya: &DMatrix<f64>) -> f64 {
    let n = ya.ncols();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lam = 1.0;
    for _ in 0..30 {
        let w = ya.transpose() * (ya * &v);
        lam = w.norm();
        if lam == 0.0 {
            return 1.0;
        }
        v = w / lam;
    }
    lam.sqrt()
}

fn subgradient_descent(loss: &LossSpec, ya: &DMatrix<f64>, cfg: &OptimizerConfig) -> OptOutcome {
    let n = ya.ncols();
    let lip = spectral_norm_estimate(ya).max(1e-8);
    let mut x = DVector::<f64>::zeros(n);
    let (mut f, mut g) = risk_and_grad(loss, ya, &x);
    let mut best_f = f;
    let mut best_x = x.clone();
    let mut best_g = g.norm();
    let mut separable = false;
    for k in 1..=cfg.steps {
        let t = 1.0 / (lip * (k as f64).sqrt());
        x -= &g * (t / g.norm().max(1e-12));
        let (fc, gc) = risk_and_grad(loss, ya, &x);
        f = fc;
        g = gc;
        if f < best_f {
            best_f = f;
            best_x = x.clone();
            best_g = g.norm();
        }
        if x.norm() > cfg.divergence_norm {
            separable = true;
            break;
        }
    }
    OptOutcome {
        x: best_x,
        objective: best_f,
        grad_norm: best_g,
        converged: !separable,
        separable,
    }
}

// ---------------------------------------------------------------------------
// Separability threshold
// ---------------------------------------------------------------------------

/// `delta* = 1 / min_c E[(G + c SY)_-^2]`; `+inf` when the minimum vanishes
/// (noiseless signed labels, where growing `c` empties the negative part).
pub fn separability_threshold(model: &LinkModel) -> Result<f64> {
    let rule = QuadratureRule::for_model(model, QuadOptions::default());
    let g = |c: f64| rule.expect_negpart_sq(c).unwrap_or(f64::NAN);
    // expand until the convex objective turns upward
    let mut hi = 1.0;
    let mut g_half = g(0.5);
    let mut g_hi = g(1.0);
    while g_hi <= g_half && hi < 64.0 {
        hi *= 2.0;
        g_half = g_hi;
        g_hi = g(hi);
    }
    let (c_star, min_val) = if g_hi <= g_half {
        (hi, g_hi)
    } else {
        num::golden_min(g, 0.0, hi, 1e-7)
    };
    let _ = c_star;
    if !min_val.is_finite() {
        return Err(CoreError::QuadratureNonConvergence(
            "separability functional evaluated non-finite".into(),
        ));
    }
    if min_val < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / min_val)
}

/// Threshold as a function of the flip probability; values are capped at
/// 1e4 (the threshold grows without bound as eps -> 0).
pub fn threshold_curve(eps_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    eps_grid
        .iter()
        .map(|&eps| {
            let model = LinkModel::noisy_signed(eps)?;
            let thr = separability_threshold(&model)?;
            Ok((eps, thr.min(1e4)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saddle;
    use approx::assert_abs_diff_eq;

    #[test]
    fn threshold_reference_values() {
        // frozen from an independent adaptive-quadrature minimization
        let t = separability_threshold(&LinkModel::logistic()).unwrap();
        assert_abs_diff_eq!(t, 2.278220544594678, epsilon = 1e-3);
        let t = separability_threshold(&LinkModel::probit()).unwrap();
        assert_abs_diff_eq!(t, 2.695347694708354, epsilon = 1e-3);
        // symmetric labels: minimum at c = 0 with value E[G_-^2] = 1/2
        let t = separability_threshold(&LinkModel::noisy_signed(0.5).unwrap()).unwrap();
        assert_abs_diff_eq!(t, 2.0, epsilon = 1e-3);
        // noiseless signed data is always separable
        let t = separability_threshold(&LinkModel::signed()).unwrap();
        assert!(t.is_infinite());
    }

    #[test]
    fn threshold_curve_monotone() {
        let eps: Vec<f64> = (1..=10).map(|i| 0.05 * i as f64).collect();
        let curve = threshold_curve(&eps).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].1 <= pair[0].1 + 1e-6);
        }
        assert_abs_diff_eq!(curve[1].1, 2.99228600726458, epsilon = 1e-2); // eps = 0.1
        assert_abs_diff_eq!(curve[4].1, 2.245288964560833, epsilon = 1e-2); // eps = 0.25
        // eps -> 0 grows without bound; report capped
        let tiny = threshold_curve(&[1e-4]).unwrap();
        assert!(tiny[0].1 >= 100.0);
    }

    #[test]
    fn square_signed_matches_prediction() {
        let model = LinkModel::signed();
        let delta = 5.0;
        let pred = saddle::ls_closed_form(&model, delta).unwrap();
        let mut exp = Experiment::new(model, LossSpec::square(), delta);
        exp.trials = 25;
        exp.seed = 11;
        exp.prediction = Some((pred.mu, pred.alpha));
        let s = run_experiment(&exp).unwrap();
        // prediction corr = 0.935478 (mu = sqrt(2/pi), alpha^2 = (1-2/pi)/4)
        assert_abs_diff_eq!(pred.correlation, 0.9354784416700414, epsilon = 1e-12);
        assert!(
            (s.corr_mean - pred.correlation).abs() < 0.02,
            "corr {} vs {}",
            s.corr_mean,
            pred.correlation
        );
        // debiased error concentrates on alpha^2
        assert!(
            (s.err_mean - pred.alpha * pred.alpha).abs() < 0.02,
            "err {} vs {}",
            s.err_mean,
            pred.alpha * pred.alpha
        );
    }

    #[test]
    fn hinge_on_signed_data_separates() {
        let model = LinkModel::signed();
        let mut exp = Experiment::new(model, LossSpec::hinge(), 5.0);
        exp.trials = 3;
        exp.n = 64;
        exp.seed = 3;
        let s = run_experiment(&exp).unwrap();
        assert!(s.warnings.iter().any(|w| w.contains("SeparableData")));
        assert!(s.trials.iter().any(|t| t.separable_detected));
    }

    #[test]
    fn deterministic_summaries() {
        let model = LinkModel::logistic();
        let mut exp = Experiment::new(model, LossSpec::square(), 4.0);
        exp.trials = 6;
        exp.n = 32;
        exp.seed = 77;
        let a = run_experiment(&exp).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_experiment(&exp).unwrap());
        assert_eq!(a.corr_mean.to_bits(), b.corr_mean.to_bits());
        assert_eq!(a.err_mean.to_bits(), b.err_mean.to_bits());
    }

    #[test]
    fn rotational_reduction_consistency() {
        let model = LinkModel::probit();
        let delta = 4.0;
        let mut e1 = Experiment::new(model.clone(), LossSpec::square(), delta);
        e1.trials = 25;
        e1.n = 96;
        e1.seed = 5;
        let mut ru = e1.clone();
        ru.x0_mode = X0Mode::RandomUnit;
        let a = run_experiment(&e1).unwrap();
        let b = run_experiment(&ru).unwrap();
        let pooled = (a.corr_stderr.powi(2) + b.corr_stderr.powi(2)).sqrt();
        assert!(
            (a.corr_mean - b.corr_mean).abs() < 2.0 * pooled + 5e-3,
            "e1 {} vs random {} (pooled se {})",
            a.corr_mean,
            b.corr_mean,
            pooled
        );
    }

    #[test]
    fn logistic_loss_gd_reaches_prediction_scale() {
        // smoke: smooth non-square path runs and lands in a sane range
        let model = LinkModel::noisy_signed(0.25).unwrap();
        let mut exp = Experiment::new(model, LossSpec::logistic(), 6.0);
        exp.trials = 4;
        exp.n = 64;
        exp.seed = 21;
        let s = run_experiment(&exp).unwrap();
        assert!(s.corr_mean > 0.3 && s.corr_mean <= 1.0);
        assert!(s.warnings.is_empty(), "{:?}", s.warnings);
    }
}
