//! Fundamental performance limits via the Fisher information of
//! `W_sigma = sigma G + SY`.
//!
//! The density is the Gaussian convolution
//! `p(w) = int phi_sigma(w - x) p_SY(x) dx`, its derivative uses the
//! `phi'` kernel (never finite differences of `p`), and
//!
//! ```text
//! kappa(sigma) = sigma^2 (sigma^2 I + I - 1) / (1 + sigma^2 (sigma^2 I - 1)),
//! I = I(W_sigma),
//! ```
//!
//! is in `[0, 1)` with `kappa(0+) = 0` and `kappa(inf) = 1`. The smallest
//! root of `kappa(sigma) = 1/delta` is the best achievable effective noise
//! `sigma_opt`; no convex loss beats correlation `1/sqrt(1 + sigma_opt^2)`.
//!
//! For models with a differentiable `p_SY` the Stam inequality gives the
//! closed-form bound `sigma_opt^2 >= 1/((delta-1)(I(SY)-1))`, with equality
//! exactly in the Gaussian case; combining it with the least-squares closed
//! form bounds the LS suboptimality ratio by
//! `xi = (I(SY)-1)(1-E[SY]^2)/E[SY]^2`.

use crate::error::{CoreError, Result};
use crate::link::LinkModel;
use crate::num;
use rayon::prelude::*;
use std::io::Write;

const SIGMA_MIN: f64 = 1e-3;
const P_FLOOR: f64 = 1e-14;

/// Pointwise evaluator for the density of `W_sigma = sigma G + SY`.
///
/// All quantities come from one pass of panel Gauss-Legendre quadrature in
/// the `x` (label) coordinate, accumulated in log space with max
/// subtraction, so ratios such as the score stay accurate even where the
/// density underflows linear arithmetic.
#[derive(Debug, Clone)]
pub struct WDensity {
    model: LinkModel,
    pub sigma: f64,
    gl: (Vec<f64>, Vec<f64>),
}

/// One-point convolution results on the log scale.
#[derive(Debug, Clone, Copy)]
pub struct WPoint {
    pub log_p: f64,
    /// score `xi(w) = p'(w)/p(w)`
    pub score: f64,
    /// `(log p)''(w)`
    pub log_p_second: f64,
}

impl WDensity {
    pub fn new(model: &LinkModel, sigma: f64) -> Result<Self> {
        if !(sigma >= SIGMA_MIN) || !sigma.is_finite() {
            return Err(CoreError::SigmaTooSmall(sigma));
        }
        Ok(WDensity {
            model: model.clone(),
            sigma,
            gl: num::gauss_legendre(16),
        })
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    /// Integration panel edges for the point `w`: support edges, density
    /// split points, a sigma-scaled ladder around the kernel center, and
    /// boundary layers (width `sigma^2`-scaled) at the non-smooth points.
    fn edges(&self, w: f64) -> Vec<f64> {
        let (lo, hi) = self.model.support();
        let s = self.sigma;
        let mut e = vec![lo, hi];
        let mut push = |x: f64| {
            if x > lo && x < hi {
                e.push(x);
            }
        };
        for k in [1.0, 2.0, 4.0, 8.0, 12.0] {
            push(w - k * s);
            push(w + k * s);
        }
        push(w);
        let mut layers = self.model.split_points();
        layers.push(lo);
        layers.push(hi);
        for sp in layers {
            for k in [1.0, 4.0, 16.0, 64.0] {
                let d = k * s * s.min(1.0);
                push(sp - d);
                push(sp + d);
            }
        }
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e.dedup_by(|a, b| (*a - *b).abs() < 1e-300);
        e
    }

    /// Log-density, score, and second log-derivative at `w`.
    pub fn point(&self, w: f64) -> WPoint {
        let s2 = self.sigma * self.sigma;
        let log_norm = -(self.sigma.ln() + num::LN_SQRT_2PI);
        let edges = self.edges(w);
        let (gx, gw) = &self.gl;
        // first pass: locate the maximum of the log integrand at the nodes
        let mut xs: Vec<f64> = Vec::with_capacity((edges.len() - 1) * gx.len() * 2);
        let mut wts: Vec<f64> = Vec::new();
        for seg in edges.windows(2) {
            let width = seg[1] - seg[0];
            if width <= 0.0 {
                continue;
            }
            // coarse panels are fine far from the kernel; their integrand is
            // negligible after max subtraction
            let n_sub = (width / (3.0 * self.sigma).min(1.5)).ceil().clamp(1.0, 8.0) as usize;
            for k in 0..n_sub {
                let a = seg[0] + width * k as f64 / n_sub as f64;
                let b = seg[0] + width * (k + 1) as f64 / n_sub as f64;
                num::map_panel(gx, gw, a, b, &mut xs, &mut wts);
            }
        }
        let mut m = f64::NEG_INFINITY;
        let logs: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let t = w - x;
                let l = log_norm - 0.5 * t * t / s2 + self.model.log_density_sy(x);
                if l > m {
                    m = l;
                }
                l
            })
            .collect();
        if m == f64::NEG_INFINITY {
            return WPoint {
                log_p: f64::NEG_INFINITY,
                score: 0.0,
                log_p_second: 0.0,
            };
        }
        let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
        for i in 0..xs.len() {
            let e = wts[i] * (logs[i] - m).exp();
            let k1 = -(w - xs[i]) / s2;
            t0 += e;
            t1 += e * k1;
            t2 += e * (k1 * k1 - 1.0 / s2);
        }
        let score = t1 / t0;
        WPoint {
            log_p: m + t0.ln(),
            score,
            log_p_second: t2 / t0 - score * score,
        }
    }

    pub fn density(&self, w: f64) -> f64 {
        self.point(w).log_p.exp()
    }
}

/// Grid specification for [`DensityTable`].
#[derive(Debug, Clone, Copy)]
pub struct DensityGridSpec {
    /// Half-width of the grid; `None` selects `8 + 8 sigma`.
    pub w_max: Option<f64>,
    /// Point count; raised automatically when `sigma` under-resolves it.
    pub points: usize,
}

impl Default for DensityGridSpec {
    fn default() -> Self {
        DensityGridSpec { w_max: None, points: 4096 }
    }
}

/// Gridded density of `W_sigma` with derivative, score, and Fisher
/// information.
#[derive(Debug, Clone)]
pub struct DensityTable {
    pub sigma: f64,
    pub grid: Vec<f64>,
    pub p: Vec<f64>,
    pub dp: Vec<f64>,
    pub score: Vec<f64>,
    pub log_p: Vec<f64>,
    pub fisher: f64,
}

/// Builds the density table of `W_sigma = sigma G + SY`.
pub fn density_w(model: &LinkModel, sigma: f64, spec: DensityGridSpec) -> Result<DensityTable> {
    let wd = WDensity::new(model, sigma)?;
    let w_max = spec.w_max.unwrap_or(8.0 + 8.0 * sigma);
    let mut n = spec.points.max(64);
    // keep at least ~4 grid points per kernel width
    let needed = (2.0 * w_max / (sigma / 4.0)).ceil() as usize;
    if needed > n {
        n = needed.min(1 << 18);
    }
    let h = 2.0 * w_max / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| -w_max + h * i as f64).collect();
    let pts: Vec<WPoint> = grid.par_iter().map(|&w| wd.point(w)).collect();
    let p: Vec<f64> = pts.iter().map(|q| q.log_p.exp()).collect();
    let dp: Vec<f64> = pts.iter().zip(&p).map(|(q, &pv)| q.score * pv).collect();
    let score: Vec<f64> = pts.iter().map(|q| q.score).collect();
    let log_p: Vec<f64> = pts.iter().map(|q| q.log_p).collect();
    // Fisher integrand score^2 p, dropping the sub-floor tail contribution
    let integrand: Vec<f64> = p
        .iter()
        .zip(&score)
        .map(|(&pv, &sc)| if pv >= P_FLOOR { sc * sc * pv } else { 0.0 })
        .collect();
    let fisher = num::simpson_uniform(&integrand, h);
    Ok(DensityTable {
        sigma,
        grid,
        p,
        dp,
        score,
        log_p,
        fisher,
    })
}

impl DensityTable {
    pub fn grid_step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// Simpson integral of `f(w) p(w)` over the grid.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let y: Vec<f64> = self.grid.iter().zip(&self.p).map(|(&w, &p)| f(w) * p).collect();
        num::simpson_uniform(&y, self.grid_step())
    }

    /// CSV rows `w,p,dp,score`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "w,p,dp,score")?;
        for i in 0..self.grid.len() {
            writeln!(
                out,
                "{:.12e},{:.12e},{:.12e},{:.12e}",
                self.grid[i], self.p[i], self.dp[i], self.score[i]
            )?;
        }
        Ok(())
    }
}

/// `kappa(sigma)` from the gridded Fisher information; tiny negative
/// numerators from roundoff clamp to zero.
pub fn kappa(model: &LinkModel, sigma: f64) -> Result<f64> {
    kappa_with_points(model, sigma, 4096)
}

pub(crate) fn kappa_with_points(model: &LinkModel, sigma: f64, points: usize) -> Result<f64> {
    let table = density_w(model, sigma, DensityGridSpec { w_max: None, points })?;
    let i = table.fisher;
    let s2 = sigma * sigma;
    let numer = (s2 * (s2 * i + i - 1.0)).max(0.0);
    let denom = 1.0 + s2 * (s2 * i - 1.0);
    Ok(numer / denom)
}

/// Result of the `kappa(sigma) = 1/delta` root search.
#[derive(Debug, Clone)]
pub struct SigmaOptResult {
    pub sigma_opt: f64,
    /// `1/sqrt(1 + sigma_opt^2)`
    pub corr_opt: f64,
    /// Fisher information of `W` at `sigma_opt`
    pub fisher: f64,
    /// every sign change seen on the scan grid (diagnostics; the first one
    /// is refined into `sigma_opt`)
    pub sign_changes: Vec<f64>,
}

/// Smallest `sigma` with `kappa(sigma) = 1/delta`: scans a log grid for the
/// first sign change, then bisects to 1e-8.
pub fn sigma_opt(model: &LinkModel, delta: f64) -> Result<SigmaOptResult> {
    if !(delta > 1.0) {
        return Err(CoreError::InvalidParameter(format!("delta must exceed 1, got {delta}")));
    }
    let target = 1.0 / delta;
    let f_scan = |s: f64| kappa_with_points(model, s, 1024).map(|k| k - target);
    // establish the bracket
    let mut hi = 1.0;
    while f_scan(hi)? <= 0.0 {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(CoreError::NoRoot(1e3));
        }
    }
    let mut lo = (hi / 2.0).min(0.05);
    while f_scan(lo)? >= 0.0 && lo > 2.0 * SIGMA_MIN {
        lo *= 0.5;
    }
    lo = lo.max(SIGMA_MIN);
    // log-grid scan for sign changes
    let n_scan = 40;
    let ratio = (hi / lo).ln() / (n_scan - 1) as f64;
    let svals: Vec<f64> = (0..n_scan).map(|i| lo * (ratio * i as f64).exp()).collect();
    let fvals: Vec<f64> = svals
        .par_iter()
        .map(|&s| f_scan(s))
        .collect::<Result<Vec<f64>>>()?;
    let mut sign_changes = Vec::new();
    let mut bracket = None;
    for i in 0..n_scan - 1 {
        if fvals[i] < 0.0 && fvals[i + 1] >= 0.0 {
            sign_changes.push(svals[i]);
            if bracket.is_none() {
                bracket = Some((svals[i], svals[i + 1], fvals[i], fvals[i + 1]));
            }
        }
    }
    let (mut a, mut b, mut fa, _fb) = bracket.unwrap_or((lo, hi, -1.0, 1.0));
    // bisection on the full-resolution kappa
    let f_full = |s: f64| kappa(model, s).map(|k| k - target);
    fa = if bracket.is_some() { fa } else { f_full(a)? };
    while b - a > 1e-8 {
        let mid = 0.5 * (a + b);
        let fm = f_full(mid)?;
        if (fm < 0.0) == (fa < 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    let s_opt = 0.5 * (a + b);
    let table = density_w(model, s_opt, DensityGridSpec::default())?;
    Ok(SigmaOptResult {
        sigma_opt: s_opt,
        corr_opt: 1.0 / (1.0 + s_opt * s_opt).sqrt(),
        fisher: table.fisher,
        sign_changes,
    })
}

/// Fisher information of `SY` itself; requires a differentiable density.
pub fn fisher_sy(model: &LinkModel) -> Result<f64> {
    if !model.is_density_differentiable() {
        return Err(CoreError::DensityNotDifferentiable);
    }
    let (lo, hi) = model.support();
    // widen so the e^{-w^2} tails of the integrand are fully captured
    let (lo, hi) = (lo - 4.0, hi + 4.0);
    let (gx, gw) = num::gauss_legendre(32);
    let n_panels = ((hi - lo) / 1.5).ceil() as usize;
    let mut total = 0.0;
    for k in 0..n_panels {
        let a = lo + (hi - lo) * k as f64 / n_panels as f64;
        let b = lo + (hi - lo) * (k + 1) as f64 / n_panels as f64;
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (&x, &w) in gx.iter().zip(&gw) {
            let t = mid + half * x;
            let p = model.density_sy(t);
            if p > 1e-280 {
                let d = model.density_sy_deriv(t)?;
                total += half * w * d * d / p;
            }
        }
    }
    Ok(total)
}

/// Stam closed-form lower bound `1/((delta-1)(I(SY)-1))` on `sigma_opt^2`.
pub fn stam_lower_bound(model: &LinkModel, delta: f64) -> Result<f64> {
    if !(delta > 1.0) {
        return Err(CoreError::InvalidParameter(format!("delta must exceed 1, got {delta}")));
    }
    let i_sy = fisher_sy(model)?;
    Ok(1.0 / ((delta - 1.0) * (i_sy - 1.0)))
}

/// LS suboptimality: `sigma_LS^2/sigma_opt^2 <= xi`, delta-independent.
#[derive(Debug, Clone, Copy)]
pub struct LsSuboptimality {
    pub xi: f64,
    /// LS correlation is at least `1/sqrt(xi)` times optimal
    pub inv_sqrt_xi: f64,
}

pub fn ls_suboptimality(model: &LinkModel) -> Result<LsSuboptimality> {
    let i_sy = fisher_sy(model)?;
    let m = model.mean_sy();
    let xi = (i_sy - 1.0) * (1.0 - m * m) / (m * m);
    Ok(LsSuboptimality { xi, inv_sqrt_xi: 1.0 / xi.sqrt() })
}
