//! Convex losses with proximal operators and Moreau envelopes.
//!
//! The Moreau envelope `M(x; l) = min_v (x-v)^2/(2l) + loss(v)` and its
//! derivatives are what the asymptotic system consumes:
//!
//! - `M'_x(x; l) = (x - prox)/l`
//! - `M'_l(x; l) = -(x - prox)^2/(2 l^2) = -(M'_x)^2/2`
//!
//! The square loss is `(t-1)^2`, matching the closed forms used throughout
//! (`prox = (x+2l)/(1+2l)`, `l = 1/(2(d-1))` at the least-squares solution);
//! predictions are invariant to loss rescaling so the choice of constant is
//! immaterial.

use crate::error::{CoreError, Result};
use crate::num::{self, Pchip};
use std::sync::Arc;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    C2,
    C0Convex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxStrategy {
    ClosedForm,
    ScalarNewton,
    Bisection,
}

/// Moreau envelope value and derivatives at one point.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeEval {
    pub value: f64,
    /// d/dx of the envelope, `(x - prox)/lambda`
    pub dx: f64,
    /// d/dlambda of the envelope; equals `-dx^2/2` identically
    pub dlambda: f64,
    pub prox_point: f64,
}

/// A loss table: the derivative on a strictly increasing grid, plus the
/// stored value at the mid-grid anchor. The derivative is interpolated by a
/// monotone cubic and continued linearly beyond the grid at the boundary
/// slopes; values are exact integrals of that interpolant.
#[derive(Debug)]
pub struct TabulatedLoss {
    dloss: Pchip,
    anchor_value: f64,
    anchor_integral: f64,
}

impl TabulatedLoss {
    /// Builds from `(w, loss, dloss)` columns. `dloss` must be nondecreasing
    /// (convexity); the anchor is the stored loss at the middle grid point.
    pub fn new(w: Vec<f64>, loss: Vec<f64>, dloss: Vec<f64>) -> Result<Self> {
        if w.len() < 8 || w.len() != loss.len() || w.len() != dloss.len() {
            return Err(CoreError::MalformedTable(
                "loss table needs >= 8 aligned (w, loss, dloss) rows".into(),
            ));
        }
        if !w.windows(2).all(|c| c[1] > c[0]) {
            return Err(CoreError::MalformedTable("loss grid must be strictly increasing".into()));
        }
        if !dloss.windows(2).all(|c| c[1] >= c[0] - 1e-9) {
            return Err(CoreError::MalformedTable(
                "loss derivative must be nondecreasing (non-convex table)".into(),
            ));
        }
        let mid = w.len() / 2;
        let anchor_x = w[mid];
        let anchor_value = loss[mid];
        let interp = Pchip::new(w, dloss);
        let anchor_integral = interp.integral_from_start(anchor_x);
        Ok(TabulatedLoss {
            dloss: interp,
            anchor_value,
            anchor_integral,
        })
    }

    pub fn grid_range(&self) -> (f64, f64) {
        (self.dloss.x_min(), self.dloss.x_max())
    }

    fn deriv(&self, t: f64) -> f64 {
        let (lo, hi) = self.grid_range();
        if t < lo {
            self.dloss.first() + self.dloss.slope_begin() * (t - lo)
        } else if t > hi {
            self.dloss.last() + self.dloss.slope_end() * (t - hi)
        } else {
            self.dloss.eval(t)
        }
    }

    fn value(&self, t: f64) -> f64 {
        let (lo, hi) = self.grid_range();
        let inner = |x: f64| self.anchor_value - self.anchor_integral + self.dloss.integral_from_start(x);
        if t < lo {
            let d = t - lo;
            inner(lo) + self.dloss.first() * d + 0.5 * self.dloss.slope_begin() * d * d
        } else if t > hi {
            let d = t - hi;
            inner(hi) + self.dloss.last() * d + 0.5 * self.dloss.slope_end() * d * d
        } else {
            inner(t)
        }
    }

    fn prox(&self, x: f64, lambda: f64) -> f64 {
        // v + lambda * l'(v) is strictly increasing in v
        let g = |v: f64| v + lambda * self.deriv(v) - x;
        let step = lambda * (1.0 + self.deriv(x).abs()) + 1e-6;
        num::monotone_root(g, x, step, 1e12, 1e-13 * (1.0 + x.abs()))
            .expect("prox objective is strongly convex")
    }
}

#[derive(Debug, Clone)]
pub enum LossKind {
    Square,
    Lad,
    Logistic,
    Exponential,
    Hinge,
    Tabulated(Arc<TabulatedLoss>),
}

/// A convex loss, optionally rescaled as `loss(c2 t)/c1`.
///
/// Immutable and cheap to clone; all evaluations are pure.
#[derive(Debug, Clone)]
pub struct LossSpec {
    kind: LossKind,
    c1: f64,
    c2: f64,
}

impl LossSpec {
    pub fn square() -> Self {
        Self::from_kind(LossKind::Square)
    }
    pub fn lad() -> Self {
        Self::from_kind(LossKind::Lad)
    }
    pub fn logistic() -> Self {
        Self::from_kind(LossKind::Logistic)
    }
    pub fn exponential() -> Self {
        Self::from_kind(LossKind::Exponential)
    }
    pub fn hinge() -> Self {
        Self::from_kind(LossKind::Hinge)
    }
    pub fn tabulated(table: Arc<TabulatedLoss>) -> Self {
        Self::from_kind(LossKind::Tabulated(table))
    }

    fn from_kind(kind: LossKind) -> Self {
        LossSpec { kind, c1: 1.0, c2: 1.0 }
    }

    /// `loss(c2 t)/c1` for `c1 > 0`, `c2 != 0`. Predictions of the rescaled
    /// loss have the same effective noise and correlation.
    pub fn scaled(&self, c1: f64, c2: f64) -> Result<Self> {
        if c1 <= 0.0 || c2 == 0.0 || !c1.is_finite() || !c2.is_finite() {
            return Err(CoreError::InvalidParameter(format!(
                "scaling requires c1 > 0 and c2 != 0, got ({c1}, {c2})"
            )));
        }
        Ok(LossSpec {
            kind: self.kind.clone(),
            c1: self.c1 * c1,
            c2: self.c2 * c2,
        })
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn id(&self) -> String {
        let base = match &self.kind {
            LossKind::Square => "square",
            LossKind::Lad => "lad",
            LossKind::Logistic => "logistic-loss",
            LossKind::Exponential => "exponential",
            LossKind::Hinge => "hinge",
            LossKind::Tabulated(_) => "tabulated",
        };
        if self.c1 == 1.0 && self.c2 == 1.0 {
            base.to_string()
        } else {
            format!("{base}[c1={},c2={}]", self.c1, self.c2)
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match self.kind {
            LossKind::Lad | LossKind::Hinge => Smoothness::C0Convex,
            _ => Smoothness::C2,
        }
    }

    pub fn prox_strategy(&self) -> ProxStrategy {
        match self.kind {
            LossKind::Square | LossKind::Lad | LossKind::Hinge => ProxStrategy::ClosedForm,
            LossKind::Logistic | LossKind::Exponential => ProxStrategy::ScalarNewton,
            LossKind::Tabulated(_) => ProxStrategy::Bisection,
        }
    }

    /// Strictly convex, continuously differentiable, derivative nonzero at 0:
    /// the class with a uniqueness guarantee for the asymptotic system.
    pub fn in_uniqueness_class(&self) -> bool {
        matches!(
            self.kind,
            LossKind::Square | LossKind::Logistic | LossKind::Exponential
        )
    }

    /// Loss value at `t`.
    pub fn value(&self, t: f64) -> f64 {
        let u = self.c2 * t;
        let base = match &self.kind {
            LossKind::Square => (u - 1.0) * (u - 1.0),
            LossKind::Lad => (u - 1.0).abs(),
            LossKind::Logistic => softplus(-u),
            LossKind::Exponential => (-u).exp(),
            LossKind::Hinge => (1.0 - u).max(0.0),
            LossKind::Tabulated(tab) => tab.value(u),
        };
        base / self.c1
    }

    /// Derivative at `t`; at kinks of LAD/Hinge a fixed subgradient is chosen
    /// (0 at the LAD spike, 0 on the flat side of the hinge).
    pub fn derivative(&self, t: f64) -> f64 {
        let u = self.c2 * t;
        let base = match &self.kind {
            LossKind::Square => 2.0 * (u - 1.0),
            LossKind::Lad => {
                if u > 1.0 {
                    1.0
                } else if u < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Logistic => -sigmoid(-u),
            LossKind::Exponential => -(-u).exp(),
            LossKind::Hinge => {
                if u < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Tabulated(tab) => tab.deriv(u),
        };
        base * self.c2 / self.c1
    }

    /// Second derivative for C2 losses.
    pub fn second_derivative(&self, t: f64) -> Result<f64> {
        let u = self.c2 * t;
        let base = match &self.kind {
            LossKind::Square => 2.0,
            LossKind::Logistic => {
                let s = sigmoid(-u);
                s * (1.0 - s)
            }
            LossKind::Exponential => (-u).exp(),
            _ => return Err(CoreError::NotTwiceDifferentiable),
        };
        Ok(base * self.c2 * self.c2 / self.c1)
    }

    /// Proximal point: the unique minimizer of `(x-v)^2/(2 lambda) + loss(v)`.
    pub fn prox(&self, x: f64, lambda: f64) -> f64 {
        assert!(lambda > 0.0, "prox requires lambda > 0");
        // reduce the rescaled prox to the base loss
        let lam = lambda * self.c2 * self.c2 / self.c1;
        let xs = self.c2 * x;
        let base = match &self.kind {
            LossKind::Square => (xs + 2.0 * lam) / (1.0 + 2.0 * lam),
            LossKind::Lad => 1.0 + soft_threshold(xs - 1.0, lam),
            LossKind::Hinge => 1.0 + soft_threshold(xs + 0.5 * lam - 1.0, 0.5 * lam),
            LossKind::Logistic => prox_logistic(xs, lam),
            LossKind::Exponential => {
                // v - x = lam e^{-v}  =>  v = x + u with u + ln u = ln(lam) - x
                xs + num::lambert_w_of_exp(lam.ln() - xs)
            }
            LossKind::Tabulated(tab) => tab.prox(xs, lam),
        };
        base / self.c2
    }

    /// Prox with the optimality-residual contract checked.
    pub fn try_prox(&self, x: f64, lambda: f64) -> Result<f64> {
        let v = self.prox(x, lambda);
        let r = self.prox_residual(x, lambda, v);
        if r > 1e-10 {
            return Err(CoreError::ProxNonConvergence { residual: r, iters: 200 });
        }
        Ok(v)
    }

    /// Distance of 0 from the subdifferential of the prox objective at `v`.
    pub fn prox_residual(&self, x: f64, lambda: f64, v: f64) -> f64 {
        let g = (v - x) / lambda;
        let u = self.c2 * v;
        match &self.kind {
            LossKind::Lad => {
                let (lo, hi) = if (u - 1.0).abs() < 1e-12 {
                    (-1.0, 1.0)
                } else if u > 1.0 {
                    (1.0, 1.0)
                } else {
                    (-1.0, -1.0)
                };
                sub_residual(g, lo * self.c2 / self.c1, hi * self.c2 / self.c1)
            }
            LossKind::Hinge => {
                let (lo, hi) = if (u - 1.0).abs() < 1e-12 {
                    (-1.0, 0.0)
                } else if u > 1.0 {
                    (0.0, 0.0)
                } else {
                    (-1.0, -1.0)
                };
                sub_residual(g, lo * self.c2 / self.c1, hi * self.c2 / self.c1)
            }
            _ => (g + self.derivative(v)).abs(),
        }
    }

    /// Envelope value and derivatives at `(x, lambda)`.
    pub fn envelope(&self, x: f64, lambda: f64) -> EnvelopeEval {
        let p = self.prox(x, lambda);
        let dx = (x - p) / lambda;
        EnvelopeEval {
            value: 0.5 * dx * dx * lambda + self.value(p),
            dx,
            dlambda: -0.5 * dx * dx,
            prox_point: p,
        }
    }

    /// `M'_x(x; lambda)` alone; the quantity the asymptotic system integrates.
    #[inline]
    pub fn envelope_dx(&self, x: f64, lambda: f64) -> f64 {
        (x - self.prox(x, lambda)) / lambda
    }

    /// `l''(prox)/(1 + lambda l''(prox))`, the curvature ratio entering the
    /// twice-differentiable reformulation of the third system equation.
    pub fn envelope_second_derivative_ratio(&self, x: f64, lambda: f64) -> Result<f64> {
        let p = self.prox(x, lambda);
        let h = self.second_derivative(p)?;
        Ok(h / (1.0 + lambda * h))
    }

    /// Locations in `x` where `M'_x(.; lambda)` has a kink (empty for losses
    /// with C1 envelopes' derivative, i.e. everything except LAD and hinge).
    pub fn envelope_kinks(&self, lambda: f64) -> Vec<f64> {
        let lam = lambda * self.c2 * self.c2 / self.c1;
        let base = match self.kind {
            LossKind::Lad => vec![1.0 - lam, 1.0 + lam],
            LossKind::Hinge => vec![1.0 - lam, 1.0],
            _ => Vec::new(),
        };
        base.into_iter().map(|k| k / self.c2).collect()
    }
}

fn sub_residual(g: f64, lo: f64, hi: f64) -> f64 {
    // distance from -g to [lo, hi]
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    if -g < lo {
        (lo + g).abs()
    } else if -g > hi {
        (-g - hi).abs()
    } else {
        0.0
    }
}

fn prox_logistic(x: f64, lam: f64) -> f64 {
    // solve v = x + lam * sigmoid(-v) on [x, x + lam]
    let mut lo = x;
    let mut hi = x + lam;
    let mut v = x + lam * sigmoid(-x);
    for _ in 0..80 {
        let s = sigmoid(-v);
        let g = v - x - lam * s;
        if g > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let dg = 1.0 + lam * s * (1.0 - s);
        let mut step = g / dg;
        let mut v_new = v - step;
        if v_new <= lo || v_new >= hi {
            v_new = 0.5 * (lo + hi);
            step = v - v_new;
        }
        if step.abs() <= 1e-15 * (1.0 + v.abs()) {
            return v_new;
        }
        v = v_new;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Two-stage brute-force minimizer of the prox objective; the independent
    /// oracle for prox and envelope values.
    fn brute_prox(loss: &LossSpec, x: f64, lambda: f64) -> f64 {
        let obj = |v: f64| (x - v) * (x - v) / (2.0 * lambda) + loss.value(v);
        let mut best = (f64::INFINITY, 0.0);
        let mut v = -12.0;
        while v <= 12.0 {
            let o = obj(v);
            if o < best.0 {
                best = (o, v);
            }
            v += 1e-3;
        }
        let mut vfine = best.1 - 2e-3;
        while vfine <= best.1 + 2e-3 {
            let o = obj(vfine);
            if o < best.0 {
                best = (o, vfine);
            }
            vfine += 1e-7;
        }
        best.1
    }

    fn all_losses() -> Vec<LossSpec> {
        vec![
            LossSpec::square(),
            LossSpec::lad(),
            LossSpec::logistic(),
            LossSpec::exponential(),
            LossSpec::hinge(),
        ]
    }

    #[test]
    fn square_prox_closed_form() {
        let sq = LossSpec::square();
        // x at the loss minimizer is a fixed point
        assert_abs_diff_eq!(sq.prox(1.0, 5.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sq.prox(0.0, 0.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn lad_prox_soft_threshold() {
        let lad = LossSpec::lad();
        assert_abs_diff_eq!(lad.prox(3.0, 1.0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lad.prox(3.0, 1.0), brute_prox(&lad, 3.0, 1.0), epsilon = 1e-6);
    }

    #[test]
    fn hinge_prox_brute_force() {
        let hinge = LossSpec::hinge();
        // oracle: grid minimization of (x-v)^2/(2*2) + max(0, 1-v) gives v = 1
        assert_abs_diff_eq!(brute_prox(&hinge, 0.0, 2.0), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(hinge.prox(0.0, 2.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn envelope_square_hand_values() {
        let sq = LossSpec::square();
        let e = sq.envelope(1.0, 1.0);
        assert_abs_diff_eq!(e.value, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.dx, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.dlambda, 0.0, epsilon = 1e-15);
        // x=0, lambda=1/2: prox=1/2, value=(0-1/2)^2/1 + 1/4 = 1/2
        let e = sq.envelope(0.0, 0.5);
        assert_abs_diff_eq!(e.prox_point, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.value, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.dx, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.dlambda, -0.5, epsilon = 1e-15);
        // brute-force cross-check of the value
        let p = brute_prox(&sq, 0.0, 0.5);
        let val = (0.0 - p) * (0.0 - p) / 1.0 + sq.value(p);
        assert_abs_diff_eq!(e.value, val, epsilon = 1e-10);
    }

    #[test]
    fn lad_dead_zone_slope() {
        // inside the soft-threshold dead zone the prox sticks at 1, dx = t/lambda
        let lad = LossSpec::lad();
        let lambda = 0.7;
        for t in [0.1, 0.3, 0.65] {
            let e = lad.envelope(1.0 + t, lambda);
            assert_abs_diff_eq!(e.prox_point, 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(e.dx, t / lambda, epsilon = 1e-14);
            // finite differences of the brute-force envelope
            let env = |x: f64| {
                let p = brute_prox(&lad, x, lambda);
                (x - p) * (x - p) / (2.0 * lambda) + lad.value(p)
            };
            let h = 1e-5;
            let fd = (env(1.0 + t + h) - env(1.0 + t - h)) / (2.0 * h);
            assert_abs_diff_eq!(e.dx, fd, epsilon = 1e-4);
        }
    }

    #[test]
    fn exponential_curvature_ratio_at_origin() {
        // prox(0; 1) solves v = e^{-v}: the omega constant
        let exp = LossSpec::exponential();
        let omega = 0.5671432904097838_f64;
        let p = exp.prox(0.0, 1.0);
        assert_abs_diff_eq!(p, omega, epsilon = 1e-12);
        let ratio = exp.envelope_second_derivative_ratio(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(ratio, omega / (1.0 + omega), epsilon = 1e-12);
        // finite-difference second derivative of the brute-force envelope
        let env = |x: f64| {
            let p = brute_prox(&exp, x, 1.0);
            (x - p) * (x - p) / 2.0 + exp.value(p)
        };
        let h = 1e-3;
        let fd2 = (env(h) - 2.0 * env(0.0) + env(-h)) / (h * h);
        assert_abs_diff_eq!(ratio, fd2, epsilon = 1e-3);
    }

    #[test]
    fn square_ratio_is_constant() {
        let sq = LossSpec::square();
        for lambda in [0.1, 1.0, 7.5] {
            let r = sq.envelope_second_derivative_ratio(-3.0, lambda).unwrap();
            assert_abs_diff_eq!(r, 2.0 / (1.0 + 2.0 * lambda), epsilon = 1e-14);
        }
    }

    #[test]
    fn logistic_ratio_vanishes_in_flat_tail() {
        let lg = LossSpec::logistic();
        let r = lg.envelope_second_derivative_ratio(40.0, 1.0).unwrap();
        assert!(r < 1e-10);
    }

    #[test]
    fn nonsmooth_losses_refuse_ratio() {
        for loss in [LossSpec::lad(), LossSpec::hinge()] {
            assert!(matches!(
                loss.envelope_second_derivative_ratio(0.3, 1.0),
                Err(CoreError::NotTwiceDifferentiable)
            ));
        }
    }

    #[test]
    fn prox_matches_brute_force_everywhere() {
        for loss in all_losses() {
            for &x in &[-4.0, -1.0, 0.0, 0.9, 1.0, 1.7, 5.0] {
                for &lam in &[0.2, 1.0, 3.0] {
                    let p = loss.try_prox(x, lam).unwrap();
                    let b = brute_prox(&loss, x, lam);
                    assert_abs_diff_eq!(p, b, epsilon = 2e-6);
                }
            }
        }
    }

    #[test]
    fn scaled_loss_reduces_to_base() {
        let base = LossSpec::logistic();
        let scaled = base.scaled(2.5, -1.3).unwrap();
        for &t in &[-2.0, 0.0, 1.4] {
            assert_abs_diff_eq!(scaled.value(t), base.value(-1.3 * t) / 2.5, epsilon = 1e-14);
        }
        // prox of the scaled loss minimizes the scaled objective
        let x = 0.8;
        let lam = 0.6;
        let p = scaled.prox(x, lam);
        assert!(scaled.prox_residual(x, lam, p) < 1e-10);
        assert_abs_diff_eq!(p, brute_prox(&scaled, x, lam), epsilon = 2e-6);
    }

    #[test]
    fn fenchel_identity_on_grid() {
        // M(x; l) = q(x)/l - (1/l) (q + l loss)*(x), conjugate by grid max
        for loss in all_losses() {
            for &(x, lam) in &[(0.4_f64, 0.8_f64), (-1.2, 1.5), (2.2, 0.3)] {
                let conj = {
                    let mut best = f64::NEG_INFINITY;
                    let mut y = -30.0;
                    while y <= 30.0 {
                        best = best.max(x * y - (0.5 * y * y + lam * loss.value(y)));
                        y += 1e-3;
                    }
                    best
                };
                let lhs = loss.envelope(x, lam).value;
                let rhs = 0.5 * x * x / lam - conj / lam;
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tabulated_reproduces_square() {
        // tabulate the square loss derivative and compare all operations
        let n = 512;
        let w: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64).collect();
        let loss: Vec<f64> = w.iter().map(|&t| (t - 1.0) * (t - 1.0)).collect();
        let dloss: Vec<f64> = w.iter().map(|&t| 2.0 * (t - 1.0)).collect();
        let tab = LossSpec::tabulated(Arc::new(TabulatedLoss::new(w, loss, dloss).unwrap()));
        let sq = LossSpec::square();
        for &x in &[-3.0, 0.0, 1.0, 4.2] {
            for &lam in &[0.4, 2.0] {
                assert_abs_diff_eq!(tab.prox(x, lam), sq.prox(x, lam), epsilon = 1e-9);
                let (a, b) = (tab.envelope(x, lam), sq.envelope(x, lam));
                assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-8);
                assert_abs_diff_eq!(a.dx, b.dx, epsilon = 1e-9);
            }
        }
        // beyond-grid linear continuation keeps the prox well defined
        assert!(tab.prox(40.0, 1.0).is_finite());
    }

    #[test]
    fn tabulated_rejects_nonconvex_derivative() {
        let n = 64;
        let w: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let loss = vec![0.0; n];
        let dloss: Vec<f64> = w.iter().map(|&t| (3.0 * t).sin()).collect();
        assert!(TabulatedLoss::new(w, loss, dloss).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(400))]

        #[test]
        fn convexity_of_values(
            idx in 0usize..5,
            x in -8.0..8.0f64,
            y in -8.0..8.0f64,
            theta in 0.001..0.999f64,
        ) {
            let loss = &all_losses()[idx];
            let lhs = loss.value(theta * x + (1.0 - theta) * y);
            let rhs = theta * loss.value(x) + (1.0 - theta) * loss.value(y);
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn prox_nonexpansive_and_optimal(
            idx in 0usize..5,
            x in -10.0..10.0f64,
            xp in -10.0..10.0f64,
            lam in 0.05..5.0f64,
        ) {
            let loss = &all_losses()[idx];
            let p = loss.prox(x, lam);
            let pp = loss.prox(xp, lam);
            prop_assert!((p - pp).abs() <= (x - xp).abs() + 1e-12);
            prop_assert!(loss.prox_residual(x, lam, p) <= 1e-10);
        }

        #[test]
        fn dlambda_identity_and_fd_consistency(
            idx in 0usize..5,
            x in -6.0..6.0f64,
            lam in 0.1..4.0f64,
        ) {
            let loss = &all_losses()[idx];
            let e = loss.envelope(x, lam);
            // identity holds by construction; check against the prox form
            prop_assert!((e.dlambda + 0.5 * e.dx * e.dx).abs() <= 1e-9 * (1.0 + e.dlambda.abs()));
            // central differences of the envelope value
            let h = 1e-6 * (1.0 + x.abs());
            let fd_x = (loss.envelope(x + h, lam).value - loss.envelope(x - h, lam).value) / (2.0 * h);
            prop_assert!((fd_x - e.dx).abs() <= (1e-6_f64).max(1e-4 * e.value.abs()));
            let hl = 1e-6 * lam;
            let fd_l = (loss.envelope(x, lam + hl).value - loss.envelope(x, lam - hl).value) / (2.0 * hl);
            prop_assert!((fd_l - e.dlambda).abs() <= (1e-6_f64).max(1e-4 * e.value.abs()));
        }

        #[test]
        fn envelope_convex_in_x(
            idx in 0usize..5,
            x in -5.0..5.0f64,
            lam in 0.1..3.0f64,
        ) {
            let loss = &all_losses()[idx];
            let h = 1e-4;
            let second = (loss.envelope(x + h, lam).value - 2.0 * loss.envelope(x, lam).value
                + loss.envelope(x - h, lam).value) / (h * h);
            prop_assert!(second >= -1e-8);
        }
    }
}
