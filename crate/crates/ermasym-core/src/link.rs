//! Binary label models and the induced law of the product `SY`.
//!
//! With `S ~ N(0,1)` and `Y = f(S)` valued in `{-1, +1}`, every model is
//! summarized by the density of `SY`:
//!
//! - Signed:        `p(w) = 2 phi(w) 1{w >= 0}`
//! - NoisySigned:   `p(w) = 2 phi(w) [(1-eps) 1{w >= 0} + eps 1{w < 0}]`
//! - Logistic:      `p(w) = 2 phi(w) / (1 + e^{-w})`
//! - Probit:        `p(w) = 2 phi(w) Phi(w)`
//!
//! A synthetic `GaussianSy` model (the product law is `N(m, v)` directly)
//! is included because it is the one case where the downstream limit
//! quantities have closed forms. Arbitrary laws can be loaded from CSV.

use crate::error::{CoreError, Result};
use crate::num::{self, Pchip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Density given on a grid, loaded from CSV and renormalized to unit mass.
#[derive(Debug)]
pub struct TabulatedDensity {
    interp: Pchip,
    lo: f64,
    hi: f64,
    pub renormalization: f64,
    /// CDF knots used by the inverse-transform sampler.
    cdf_x: Vec<f64>,
    cdf_y: Vec<f64>,
}

impl TabulatedDensity {
    pub fn from_columns(w: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if w.len() != p.len() {
            return Err(CoreError::MalformedTable("w and p column lengths differ".into()));
        }
        if w.len() < 1024 {
            return Err(CoreError::MalformedTable(format!(
                "need at least 1024 grid points, got {}",
                w.len()
            )));
        }
        if !w.windows(2).all(|c| c[1] > c[0]) {
            return Err(CoreError::MalformedTable("grid must be strictly increasing".into()));
        }
        let n = w.len();
        let h0 = w[1] - w[0];
        for c in w.windows(2) {
            if ((c[1] - c[0]) - h0).abs() > 1e-9 * h0.max(1.0) {
                return Err(CoreError::MalformedTable("grid must be uniform".into()));
            }
        }
        if w[0] > -8.0 + 1e-6 || w[n - 1] < 8.0 - 1e-6 {
            return Err(CoreError::MalformedTable(
                "grid must cover [-8, 8]".into(),
            ));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(CoreError::MalformedTable("density values must be finite and nonnegative".into()));
        }
        let raw = Pchip::new(w.clone(), p.clone());
        let mass = raw.integral_from_start(w[n - 1]);
        if mass <= 0.0 {
            return Err(CoreError::MalformedTable("density has zero mass".into()));
        }
        let p_norm: Vec<f64> = p.iter().map(|v| v / mass).collect();
        let interp = Pchip::new(w.clone(), p_norm);
        let cdf_y: Vec<f64> = w.iter().map(|&x| interp.integral_from_start(x)).collect();
        Ok(TabulatedDensity {
            lo: w[0],
            hi: w[n - 1],
            renormalization: mass,
            cdf_x: w,
            cdf_y,
            interp,
        })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| CoreError::MalformedTable("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["w", "p"] {
            return Err(CoreError::MalformedTable(format!("expected header `w,p`, got `{header}`")));
        }
        let mut w = Vec::new();
        let mut p = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.split(',').map(str::trim);
            let (a, b) = (it.next(), it.next());
            match (a.and_then(|s| s.parse::<f64>().ok()), b.and_then(|s| s.parse::<f64>().ok())) {
                (Some(x), Some(y)) => {
                    w.push(x);
                    p.push(y);
                }
                _ => {
                    return Err(CoreError::MalformedTable(format!("bad row {}: `{line}`", i + 2)));
                }
            }
        }
        Self::from_columns(w, p)
    }

    fn density(&self, w: f64) -> f64 {
        if w < self.lo || w > self.hi {
            0.0
        } else {
            self.interp.eval(w).max(0.0)
        }
    }

    fn inverse_cdf(&self, u: f64) -> f64 {
        let i = match self
            .cdf_y
            .binary_search_by(|v| v.partial_cmp(&u).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
        .min(self.cdf_x.len() - 2);
        let (c0, c1) = (self.cdf_y[i], self.cdf_y[i + 1]);
        if c1 <= c0 {
            return self.cdf_x[i];
        }
        let t = ((u - c0) / (c1 - c0)).clamp(0.0, 1.0);
        self.cdf_x[i] + t * (self.cdf_x[i + 1] - self.cdf_x[i])
    }
}

#[derive(Debug, Clone)]
pub enum LinkKind {
    Signed,
    NoisySigned { eps: f64 },
    Logistic,
    Probit,
    /// Test model: the law of the product `SY` is `N(mean, var)` directly.
    GaussianSy { mean: f64, var: f64 },
    Tabulated(Arc<TabulatedDensity>),
}

/// A binary label model together with its cached `E[SY]`.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct LinkModel {
    kind: LinkKind,
    mean_sy: f64,
}

impl LinkModel {
    pub fn signed() -> Self {
        LinkModel {
            kind: LinkKind::Signed,
            mean_sy: (2.0 / std::f64::consts::PI).sqrt(),
        }
    }

    pub fn noisy_signed(eps: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&eps) {
            return Err(CoreError::InvalidParameter(format!(
                "flip probability must lie in [0, 1/2], got {eps}"
            )));
        }
        Ok(LinkModel {
            kind: LinkKind::NoisySigned { eps },
            mean_sy: (1.0 - 2.0 * eps) * (2.0 / std::f64::consts::PI).sqrt(),
        })
    }

    pub fn logistic() -> Self {
        let mut m = LinkModel {
            kind: LinkKind::Logistic,
            mean_sy: 0.0,
        };
        m.mean_sy = m.quadrature_mean().expect("logistic mean quadrature converges");
        m
    }

    pub fn probit() -> Self {
        LinkModel {
            kind: LinkKind::Probit,
            mean_sy: (1.0 / std::f64::consts::PI).sqrt(),
        }
    }

    pub fn gaussian_sy(mean: f64, var: f64) -> Result<Self> {
        if var <= 0.0 || !var.is_finite() {
            return Err(CoreError::InvalidParameter(format!("variance must be positive, got {var}")));
        }
        Ok(LinkModel {
            kind: LinkKind::GaussianSy { mean, var },
            mean_sy: mean,
        })
    }

    pub fn tabulated(table: TabulatedDensity) -> Result<Self> {
        let mut m = LinkModel {
            kind: LinkKind::Tabulated(Arc::new(table)),
            mean_sy: 0.0,
        };
        m.mean_sy = m.quadrature_mean()?;
        Ok(m)
    }

    pub fn kind(&self) -> &LinkKind {
        &self.kind
    }

    /// Cached `E[SY]`.
    pub fn mean_sy(&self) -> f64 {
        self.mean_sy
    }

    /// Short identifier used in CSV provenance columns.
    pub fn id(&self) -> String {
        match &self.kind {
            LinkKind::Signed => "signed".into(),
            LinkKind::NoisySigned { eps } => format!("noisysigned(eps={eps})"),
            LinkKind::Logistic => "logistic".into(),
            LinkKind::Probit => "probit".into(),
            LinkKind::GaussianSy { mean, var } => format!("gaussian-sy(m={mean},v={var})"),
            LinkKind::Tabulated(_) => "tabulated".into(),
        }
    }

    /// Density of `SY` at `w`. Total on the reals.
    pub fn density_sy(&self, w: f64) -> f64 {
        let two_phi = 2.0 * num::normal_pdf(w);
        match &self.kind {
            LinkKind::Signed => {
                if w >= 0.0 {
                    two_phi
                } else {
                    0.0
                }
            }
            LinkKind::NoisySigned { eps } => two_phi * if w >= 0.0 { 1.0 - eps } else { *eps },
            LinkKind::Logistic => two_phi * sigmoid(w),
            LinkKind::Probit => two_phi * num::normal_cdf(w),
            LinkKind::GaussianSy { mean, var } => {
                let z = (w - mean) / var.sqrt();
                num::normal_pdf(z) / var.sqrt()
            }
            LinkKind::Tabulated(t) => t.density(w),
        }
    }

    /// `ln p_SY(w)`; `-inf` where the density vanishes. Stable in deep tails.
    pub fn log_density_sy(&self, w: f64) -> f64 {
        let base = std::f64::consts::LN_2 - num::LN_SQRT_2PI - 0.5 * w * w;
        match &self.kind {
            LinkKind::Signed => {
                if w >= 0.0 {
                    base
                } else {
                    f64::NEG_INFINITY
                }
            }
            LinkKind::NoisySigned { eps } => {
                let m = if w >= 0.0 { 1.0 - eps } else { *eps };
                if m > 0.0 {
                    base + m.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            LinkKind::Logistic => base - softplus(-w),
            LinkKind::Probit => base + num::normal_logcdf(w),
            LinkKind::GaussianSy { mean, var } => {
                -0.5 * (w - mean) * (w - mean) / var - 0.5 * var.ln() - num::LN_SQRT_2PI
            }
            LinkKind::Tabulated(t) => {
                let p = t.density(w);
                if p > 0.0 {
                    p.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `p_SY'(w)` for models whose density is differentiable on the reals.
    pub fn density_sy_deriv(&self, w: f64) -> Result<f64> {
        let two_phi = 2.0 * num::normal_pdf(w);
        match &self.kind {
            LinkKind::Logistic => {
                let s = sigmoid(w);
                Ok(two_phi * (s * (1.0 - s) - w * s))
            }
            LinkKind::Probit => Ok(two_phi * (num::normal_pdf(w) - w * num::normal_cdf(w))),
            LinkKind::GaussianSy { mean, var } => {
                Ok(-(w - mean) / var * self.density_sy(w))
            }
            _ => Err(CoreError::DensityNotDifferentiable),
        }
    }

    pub fn is_density_differentiable(&self) -> bool {
        matches!(
            self.kind,
            LinkKind::Logistic | LinkKind::Probit | LinkKind::GaussianSy { .. }
        )
    }

    /// Points where `p_SY` is non-smooth; quadrature panels split here.
    pub fn split_points(&self) -> Vec<f64> {
        match self.kind {
            LinkKind::Signed | LinkKind::NoisySigned { .. } => vec![0.0],
            _ => Vec::new(),
        }
    }

    /// Interval outside which the density mass is negligible (< 1e-15).
    pub fn support(&self) -> (f64, f64) {
        match &self.kind {
            LinkKind::Signed => (0.0, 8.0),
            LinkKind::NoisySigned { .. } | LinkKind::Logistic | LinkKind::Probit => (-8.0, 8.0),
            LinkKind::GaussianSy { mean, var } => {
                let r = 8.0 * var.sqrt().max(1.0);
                (mean - r, mean + r)
            }
            LinkKind::Tabulated(t) => (t.lo, t.hi),
        }
    }

    /// `E[SY]` by panel quadrature of `w p_SY(w)`, with a refinement check.
    pub fn quadrature_mean(&self) -> Result<f64> {
        let coarse = self.integrate_sy(|w| w, 48);
        let fine = self.integrate_sy(|w| w, 96);
        if (coarse - fine).abs() > 1e-9 {
            return Err(CoreError::QuadratureNonConvergence(format!(
                "mean refinement gap {:e}",
                (coarse - fine).abs()
            )));
        }
        Ok(fine)
    }

    /// Panel Gauss-Legendre integral of `f(w) p_SY(w)` over the support.
    pub fn integrate_sy(&self, f: impl Fn(f64) -> f64, nodes_per_panel: usize) -> f64 {
        let (nodes, weights) = num::gauss_legendre(nodes_per_panel);
        let (lo, hi) = self.support();
        let mut edges: Vec<f64> = vec![lo];
        for s in self.split_points() {
            if s > lo && s < hi {
                edges.push(s);
            }
        }
        edges.push(hi);
        let mut total = 0.0;
        for seg in edges.windows(2) {
            let width = seg[1] - seg[0];
            let n_sub = (width / 2.0).ceil().max(1.0) as usize;
            for k in 0..n_sub {
                let a = seg[0] + width * k as f64 / n_sub as f64;
                let b = seg[0] + width * (k + 1) as f64 / n_sub as f64;
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                for (&x, &w) in nodes.iter().zip(&weights) {
                    let wp = mid + half * x;
                    total += half * w * f(wp) * self.density_sy(wp);
                }
            }
        }
        total
    }

    /// Deterministic sampler for `(s, y)` pairs keyed by `(seed, stream)`.
    pub fn sampler(&self, seed: u64, stream: u64) -> PairSampler {
        PairSampler::new(self.clone(), seed, stream)
    }

    /// Convenience wrapper: `count` pairs from stream 0.
    pub fn sample_pairs(&self, count: usize, seed: u64) -> Vec<(f64, f64)> {
        self.sampler(seed, 0).take_pairs(count)
    }
}

/// Streams `(s, y)` pairs. Label noise consumes a separate sub-stream so
/// models that ignore it (Signed) produce the same `s` sequence as models
/// that use it with probability zero (NoisySigned with eps = 0).
pub struct PairSampler {
    model: LinkModel,
    rng_s: ChaCha8Rng,
    rng_label: ChaCha8Rng,
}

impl PairSampler {
    fn new(model: LinkModel, seed: u64, stream: u64) -> Self {
        let mut rng_s = ChaCha8Rng::seed_from_u64(seed);
        rng_s.set_stream(2 * stream);
        let mut rng_label = ChaCha8Rng::seed_from_u64(seed);
        rng_label.set_stream(2 * stream + 1);
        PairSampler { model, rng_s, rng_label }
    }

    pub fn next_pair(&mut self) -> (f64, f64) {
        match &self.model.kind {
            LinkKind::Signed => {
                let s: f64 = self.rng_s.sample(StandardNormal);
                (s, if s >= 0.0 { 1.0 } else { -1.0 })
            }
            LinkKind::NoisySigned { eps } => {
                let s: f64 = self.rng_s.sample(StandardNormal);
                let mut y = if s >= 0.0 { 1.0 } else { -1.0 };
                let u: f64 = self.rng_label.gen();
                if u < *eps {
                    y = -y;
                }
                (s, y)
            }
            LinkKind::Logistic => {
                let s: f64 = self.rng_s.sample(StandardNormal);
                let u: f64 = self.rng_label.gen();
                (s, if u < sigmoid(s) { 1.0 } else { -1.0 })
            }
            LinkKind::Probit => {
                let s: f64 = self.rng_s.sample(StandardNormal);
                let u: f64 = self.rng_label.gen();
                (s, if u < num::normal_cdf(s) { 1.0 } else { -1.0 })
            }
            // For the synthetic product-law models only the law of s*y matters
            // downstream (y times the remaining feature coordinates is again
            // standard normal), so attribute the whole product to s.
            LinkKind::GaussianSy { mean, var } => {
                let z: f64 = self.rng_s.sample(StandardNormal);
                (mean + var.sqrt() * z, 1.0)
            }
            LinkKind::Tabulated(t) => {
                let u: f64 = self.rng_s.gen();
                (t.inverse_cdf(u), 1.0)
            }
        }
    }

    pub fn take_pairs(&mut self, count: usize) -> Vec<(f64, f64)> {
        (0..count).map(|_| self.next_pair()).collect()
    }
}
