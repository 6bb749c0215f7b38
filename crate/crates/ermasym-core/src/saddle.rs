//! The three-equation system determining the asymptotic behavior of binary
//! ERM, and its damped fixed-point solver.
//!
//! Unknowns `(mu, alpha >= 0, lambda >= 0)` solve
//!
//! ```text
//! E[ SY  M'(aG + mu SY; l) ]            = 0            (a)
//! l^2 d E[ M'(aG + mu SY; l)^2 ]        = alpha^2      (b)
//! l   d E[ G M'(aG + mu SY; l) ]        = alpha        (c)
//! ```
//!
//! with `M'` the envelope x-derivative of the loss. The asymptotic
//! correlation is `mu/sqrt(mu^2 + alpha^2)` and the effective noise is
//! `sigma = alpha/mu`. Squaring (c) and dividing by (b) shows `delta >= 1`
//! is necessary (Cauchy-Schwarz against `E[G^2] = 1`).
//!
//! The fixed-point map updates `mu` by a scalar root-find of (a), then
//! `alpha` from (b) and `lambda` from (c), with multiplicative damping that
//! halves when the residual grows. A finite-difference Newton polish runs
//! afterwards. Uniqueness is guaranteed only for strictly convex C1 losses
//! with nonzero derivative at the origin; for others the converged point is
//! reported with an `Unverified` flag and an optional multi-start spread
//! diagnostic.

use crate::error::{CoreError, Result};
use crate::link::LinkModel;
use crate::loss::LossSpec;
use crate::quad::{QuadOptions, QuadratureRule};
use crate::num;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Acceptance tolerance on the max absolute residual of (a)-(c).
    pub tol: f64,
    /// Outer fixed-point iteration budget.
    pub max_iter: usize,
    /// Initial damping factor in `v <- (1-eta) v + eta F(v)`.
    pub damping: f64,
    /// Number of solver starts (1 = deterministic least-squares start).
    pub n_starts: usize,
    /// Seed for the multiplicative jitter of extra starts.
    pub seed: u64,
    /// Quadrature orders.
    pub n_g: usize,
    pub gl_nodes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-9,
            max_iter: 500,
            damping: 0.5,
            n_starts: 1,
            seed: 0,
            n_g: 80,
            gl_nodes: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UniquenessFlag {
    /// Loss satisfies the strict-convexity class conditions under which the
    /// solution is provably unique.
    VerifiedClassConditions,
    Unverified,
}

/// A solution of the three-equation system plus derived quantities.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub mu: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// `alpha / mu`
    pub sigma_eff: f64,
    /// `mu / sqrt(mu^2 + alpha^2)`
    pub correlation: f64,
    /// residuals of (a), (b), (c) at the returned point
    pub residuals: [f64; 3],
    pub uniqueness: UniquenessFlag,
    /// max pairwise L-inf distance between multi-start solutions
    pub multistart_spread: f64,
    pub iterations: usize,
}

impl SaddleSolution {
    fn from_point(mu: f64, alpha: f64, lambda: f64, residuals: [f64; 3]) -> Self {
        SaddleSolution {
            mu,
            alpha,
            lambda,
            sigma_eff: alpha / mu,
            correlation: mu / (mu * mu + alpha * alpha).sqrt(),
            residuals,
            uniqueness: UniquenessFlag::Unverified,
            multistart_spread: 0.0,
            iterations: 0,
        }
    }

    /// Lift to the four-variable saddle parameterization
    /// (`tau = alpha/sqrt(delta)`, `gamma = alpha/(lambda sqrt(delta))`).
    pub fn to_scalar_point(&self, delta: f64) -> ScalarSaddlePoint {
        ScalarSaddlePoint {
            alpha: self.alpha,
            mu: self.mu,
            tau: self.alpha / delta.sqrt(),
            gamma: self.alpha / (self.lambda * delta.sqrt()),
        }
    }
}

/// Point of the four-variable deterministic min-max problem
/// `min_{alpha, mu, tau} max_gamma  gamma tau/2 - alpha gamma/sqrt(delta)
///  + E[M(alpha G + mu SY; tau/gamma)]`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarSaddlePoint {
    pub alpha: f64,
    pub mu: f64,
    pub tau: f64,
    pub gamma: f64,
}

/// The least-squares solution in closed form:
/// `mu = E[SY]`, `alpha = sqrt(1 - E[SY]^2) / sqrt(delta - 1)`,
/// `lambda = 1/(2(delta-1))`. Requires `E[SY] > 0`.
pub fn ls_closed_form(model: &LinkModel, delta: f64) -> Result<SaddleSolution> {
    check_delta(delta)?;
    let m = model.mean_sy();
    if m <= 0.0 {
        return Err(CoreError::MeanNotPositive(m));
    }
    let alpha = (1.0 - m * m).max(0.0).sqrt() / (delta - 1.0).sqrt();
    let lambda = 1.0 / (2.0 * (delta - 1.0));
    let mut sol = SaddleSolution::from_point(m, alpha, lambda, [0.0; 3]);
    sol.uniqueness = UniquenessFlag::VerifiedClassConditions;
    Ok(sol)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 1.0) || !delta.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "delta must exceed 1, got {delta}"
        )));
    }
    Ok(())
}

struct System<'a> {
    loss: &'a LossSpec,
    rule: QuadratureRule,
    delta: f64,
}

impl System<'_> {
    fn residuals(&self, v: [f64; 3], refined: bool) -> [f64; 3] {
        let [mu, alpha, lambda] = v;
        let m = self.rule.envelope_moments(self.loss, mu, alpha, lambda, refined);
        [
            m.e_sy,
            lambda * lambda * self.delta * m.e_sq - alpha * alpha,
            lambda * self.delta * m.e_g - alpha,
        ]
    }

    fn max_abs(r: [f64; 3]) -> f64 {
        r.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }

    /// One sweep of the fixed-point map.
    fn step(&self, v: [f64; 3]) -> [f64; 3] {
        let [mu, alpha, lambda] = v;
        // (i) root of (a) in mu at fixed (alpha, lambda); the map
        // mu -> E[SY M'] is nondecreasing for convex losses
        let ra = |m: f64| {
            self.rule
                .envelope_moments(self.loss, m, alpha, lambda, false)
                .e_sy
        };
        let mu_new = num::monotone_root(ra, mu, 0.05 * (1.0 + mu.abs()), 1e4, 1e-12)
            .unwrap_or(mu);
        // (ii) alpha from (b), (iii) lambda from (c)
        let m = self
            .rule
            .envelope_moments(self.loss, mu_new, alpha, lambda, false);
        let alpha_new = (lambda * lambda * self.delta * m.e_sq).max(0.0).sqrt();
        let lambda_new = if m.e_g > 1e-300 {
            (alpha_new / (self.delta * m.e_g)).clamp(1e-12, 1e12)
        } else {
            lambda * 2.0
        };
        [mu_new, alpha_new, lambda_new]
    }

    fn solve_from(&self, start: [f64; 3], opts: &SolverOptions) -> Result<([f64; 3], usize)> {
        let mut v = start;
        let mut eta = opts.damping;
        let mut res = Self::max_abs(self.residuals(v, false));
        let mut iters = 0;
        for it in 0..opts.max_iter {
            iters = it + 1;
            let target = self.step(v);
            let v_new = [
                v[0] + eta * (target[0] - v[0]),
                v[1] + eta * (target[1] - v[1]),
                (v[2] + eta * (target[2] - v[2])).max(1e-12),
            ];
            if !v_new.iter().all(|x| x.is_finite()) || v_new[1] > 1e6 || v_new[2] > 1e8 {
                return Err(CoreError::DivergingIterates { alpha: v_new[1], lambda: v_new[2] });
            }
            let res_new = Self::max_abs(self.residuals(v_new, false));
            if res_new > res {
                eta = (eta * 0.5).max(1.0 / 64.0);
            } else {
                eta = (eta * 1.2).min(opts.damping.max(0.5));
            }
            v = v_new;
            res = res_new;
            if res <= opts.tol {
                break;
            }
        }
        // guarded Newton polish on the 3-residual map
        let mut r = self.residuals(v, false);
        for _ in 0..25 {
            if Self::max_abs(r) <= 0.1 * opts.tol {
                break;
            }
            let mut jac = Matrix3::<f64>::zeros();
            for j in 0..3 {
                let h = 1e-6 * v[j].abs().max(1e-3);
                let mut vp = v;
                vp[j] += h;
                let rp = self.residuals(vp, false);
                for i in 0..3 {
                    jac[(i, j)] = (rp[i] - r[i]) / h;
                }
            }
            let rhs = Vector3::new(r[0], r[1], r[2]);
            let Some(step) = jac.lu().solve(&rhs) else { break };
            let mut accepted = false;
            let mut scale = 1.0;
            for _ in 0..10 {
                let cand = [
                    v[0] - scale * step[0],
                    (v[1] - scale * step[1]).max(0.0),
                    (v[2] - scale * step[2]).max(1e-12),
                ];
                let rc = self.residuals(cand, false);
                if Self::max_abs(rc) < Self::max_abs(r) {
                    v = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if Self::max_abs(r) > opts.tol {
            return Err(CoreError::NoConvergence { max_residual: Self::max_abs(r) });
        }
        Ok((v, iters))
    }
}

/// Solves the three-equation system for `(mu, alpha, lambda)`.
///
/// Initialization is the least-squares closed form regardless of the target
/// loss; extra starts (for the uniqueness diagnostic) jitter it
/// multiplicatively. Residuals of the returned solution are re-evaluated on
/// a refined rule and must stay within tolerance.
pub fn solve_system(
    loss: &LossSpec,
    model: &LinkModel,
    delta: f64,
    opts: &SolverOptions,
) -> Result<SaddleSolution> {
    check_delta(delta)?;
    let mut qopts = QuadOptions::for_loss(loss);
    qopts.n_g = opts.n_g;
    qopts.gl_nodes = opts.gl_nodes;
    let system = System {
        loss,
        rule: QuadratureRule::for_model(model, qopts),
        delta,
    };
    let base = match ls_closed_form(model, delta) {
        Ok(s) => [s.mu, s.alpha, s.lambda],
        Err(_) => [0.5, 0.5, 0.5],
    };
    let mut starts = vec![base];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 1..opts.n_starts.max(1) {
        let jitter = |rng: &mut ChaCha8Rng| -> f64 {
            let u: f64 = rng.gen_range(-1.0..1.0);
            (u * std::f64::consts::LN_2).exp()
        };
        starts.push([
            base[0] * jitter(&mut rng),
            base[1] * jitter(&mut rng),
            base[2] * jitter(&mut rng),
        ]);
    }
    let solved: Vec<Result<([f64; 3], usize)>> = starts
        .par_iter()
        .map(|s| system.solve_from(*s, opts))
        .collect();
    let mut points = Vec::new();
    let mut first_err = None;
    for s in solved {
        match s {
            Ok(p) => points.push(p),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(first_err.unwrap());
    }
    let spread = points
        .iter()
        .flat_map(|a| {
            points.iter().map(move |b| {
                (0..3).fold(0.0f64, |acc, i| acc.max((a.0[i] - b.0[i]).abs()))
            })
        })
        .fold(0.0f64, f64::max);
    let (v, iterations) = points[0];
    let final_res = system.residuals(v, true);
    if System::max_abs(final_res) > opts.tol.max(1e-8) {
        return Err(CoreError::QuadratureNonConvergence(format!(
            "refined residuals {:e} disagree with tolerance at the solution",
            System::max_abs(final_res)
        )));
    }
    let mut sol = SaddleSolution::from_point(v[0], v[1], v[2], final_res);
    sol.uniqueness = if loss.in_uniqueness_class() {
        UniquenessFlag::VerifiedClassConditions
    } else {
        UniquenessFlag::Unverified
    };
    sol.multistart_spread = spread;
    sol.iterations = iterations;
    Ok(sol)
}

/// Residuals of the four first-order conditions of the scalar min-max
/// problem at `pt`. A valid system solution mapped through
/// `to_scalar_point` must zero all four.
pub fn stationarity_check(
    loss: &LossSpec,
    model: &LinkModel,
    delta: f64,
    pt: &ScalarSaddlePoint,
    opts: &SolverOptions,
) -> [f64; 4] {
    let mut qopts = QuadOptions::for_loss(loss);
    qopts.n_g = opts.n_g;
    qopts.gl_nodes = opts.gl_nodes;
    let rule = QuadratureRule::for_model(model, qopts);
    let lambda = pt.tau / pt.gamma;
    let m = rule.envelope_moments(loss, pt.mu, pt.alpha, lambda, false);
    // E[M'_lambda] = -E[(M'_x)^2]/2 pointwise
    let e_dl = -0.5 * m.e_sq;
    let sd = delta.sqrt();
    [
        m.e_sy,
        m.e_g - pt.gamma / sd,
        0.5 * pt.gamma + e_dl / pt.gamma,
        -pt.alpha / sd - pt.tau / (pt.gamma * pt.gamma) * e_dl + 0.5 * pt.tau,
    ]
}

/// `|1 - lambda delta E[l''(prox)/(1 + lambda l''(prox))]|`: the
/// twice-differentiable reformulation of equation (c), near zero at a
/// valid solution of a C2 loss.
pub fn eq20_cross_check(
    loss: &LossSpec,
    model: &LinkModel,
    sol: &SaddleSolution,
    delta: f64,
) -> Result<f64> {
    loss.second_derivative(0.0)?;
    let rule = QuadratureRule::for_model(model, QuadOptions::for_loss(loss));
    let (mu, alpha, lambda) = (sol.mu, sol.alpha, sol.lambda);
    let e = rule.expect_gsy(move |g, w| {
        loss.envelope_second_derivative_ratio(alpha * g + mu * w, lambda)
            .unwrap_or(f64::NAN)
    })?;
    Ok((1.0 - lambda * delta * e).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ls_closed_form_reference_points() {
        // frozen from the closed-form algebra
        let sol = ls_closed_form(&LinkModel::signed(), 3.0).unwrap();
        assert_abs_diff_eq!(sol.mu, 0.7978845608028654, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.alpha, 0.42625123321371083, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.lambda, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.correlation, 0.8820255434491029, epsilon = 1e-12);

        // delta = 2 makes mu^2 + alpha^2 = 1, so corr = mu
        let sol = ls_closed_form(&LinkModel::signed(), 2.0).unwrap();
        assert_abs_diff_eq!(sol.alpha, 0.6028102749890869, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.correlation, sol.mu, epsilon = 1e-12);

        let sol = ls_closed_form(&LinkModel::probit(), 10.0).unwrap();
        assert_abs_diff_eq!(sol.mu, 0.5641895835477563, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.alpha, 0.27521509039218545, epsilon = 1e-12);

        let sol = ls_closed_form(&LinkModel::logistic(), 5.0).unwrap();
        assert_abs_diff_eq!(sol.mu, 0.4132419282838141, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.alpha, 0.45531063811102496, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.correlation, 0.6720698932134581, epsilon = 1e-9);
    }

    #[test]
    fn pure_noise_labels_rejected() {
        let m = LinkModel::noisy_signed(0.5).unwrap();
        assert!(matches!(
            ls_closed_form(&m, 3.0),
            Err(CoreError::MeanNotPositive(_))
        ));
    }

    #[test]
    fn delta_below_one_rejected() {
        assert!(ls_closed_form(&LinkModel::signed(), 0.9).is_err());
        let opts = SolverOptions::default();
        assert!(solve_system(&LossSpec::square(), &LinkModel::signed(), 1.0, &opts).is_err());
    }

    #[test]
    fn solver_matches_ls_closed_form_on_square() {
        let opts = SolverOptions::default();
        for model in [LinkModel::signed(), LinkModel::logistic()] {
            for delta in [2.0, 5.0] {
                let sol = solve_system(&LossSpec::square(), &model, delta, &opts).unwrap();
                let cf = ls_closed_form(&model, delta).unwrap();
                assert_abs_diff_eq!(sol.mu, cf.mu, epsilon = 1e-6);
                assert_abs_diff_eq!(sol.alpha, cf.alpha, epsilon = 1e-6);
                assert_abs_diff_eq!(sol.lambda, cf.lambda, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn square_alpha_vanishes_at_large_delta() {
        let sol = ls_closed_form(&LinkModel::signed(), 1e6).unwrap();
        assert!(sol.alpha < 1e-3);
        assert!(sol.correlation > 0.999999);
    }

    #[test]
    fn stationarity_holds_at_solution_and_fails_off_it() {
        let model = LinkModel::signed();
        let loss = LossSpec::square();
        let delta = 3.0;
        let sol = ls_closed_form(&model, delta).unwrap();
        let opts = SolverOptions::default();
        let pt = sol.to_scalar_point(delta);
        let r = stationarity_check(&loss, &model, delta, &pt, &opts);
        for (i, ri) in r.iter().enumerate() {
            assert!(ri.abs() <= 1e-8, "residual {i} = {ri}");
        }
        // perturbing mu breaks the first condition
        let mut bad = pt;
        bad.mu += 0.1;
        let r = stationarity_check(&loss, &model, delta, &bad, &opts);
        assert!(r[0].abs() > 1e-3);
        // scaling tau breaks the tau/gamma conditions
        let mut bad = pt;
        bad.tau *= 2.0;
        let r = stationarity_check(&loss, &model, delta, &bad, &opts);
        assert!(r[2].abs() > 1e-3 || r[3].abs() > 1e-3);
    }

    #[test]
    fn eq20_identity_for_square() {
        // lambda δ 2/(1+2 lambda) = 1 exactly at lambda = 1/(2(delta-1))
        let model = LinkModel::signed();
        let sol = ls_closed_form(&model, 3.0).unwrap();
        let r = eq20_cross_check(&LossSpec::square(), &model, &sol, 3.0).unwrap();
        assert!(r <= 1e-10, "residual {r}");
    }

    #[test]
    fn cauchy_schwarz_necessity() {
        // at any accepted solution, delta >= E[(M')^2] / E[G M']^2
        let model = LinkModel::logistic();
        let opts = SolverOptions::default();
        for (loss, delta) in [
            (LossSpec::square(), 4.0),
            (LossSpec::logistic(), 4.0),
            (LossSpec::lad(), 4.0),
        ] {
            let sol = solve_system(&loss, &model, delta, &opts).unwrap();
            let rule = QuadratureRule::for_model(&model, QuadOptions::for_loss(&loss));
            let m = rule.envelope_moments(&loss, sol.mu, sol.alpha, sol.lambda, false);
            assert!(delta >= m.e_sq / (m.e_g * m.e_g) - 1e-6);
        }
    }
}
