//! Deterministic expectations over `(G, SY)` with `G ~ N(0,1)` independent
//! of `SY ~ p_SY`.
//!
//! The generic path is a tensor product of a probabilists' Gauss-Hermite
//! rule in `g` and per-panel Gauss-Legendre rules against `p_SY` in the
//! second coordinate, with panels split where `p_SY` is non-smooth. Every
//! checked evaluation re-runs at doubled Hermite order and errors if the
//! two disagree.
//!
//! Envelope-derivative integrands of non-differentiable losses (LAD, hinge)
//! carry kinks along lines `alpha g + mu w = const` that no fixed Hermite
//! rule resolves past ~1e-4. For those the inner `g` integral switches to
//! piecewise Gauss-Legendre split exactly at the kink locations, which
//! restores spectral accuracy.

use crate::link::LinkModel;
use crate::loss::LossSpec;
use crate::num;
use crate::error::{CoreError, Result};

const RICHARDSON_TOL: f64 = 1e-7;
/// Gaussian mass outside [-8.5, 8.5] is below 1e-16.
const G_MAX: f64 = 8.5;

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    /// Gauss-Hermite order for the `g` dimension.
    pub n_g: usize,
    /// Gauss-Legendre nodes per smooth panel of `p_SY`.
    pub gl_nodes: usize,
    /// Subdivisions of each smooth panel (doubled for C0 losses).
    pub panel_split: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { n_g: 80, gl_nodes: 64, panel_split: 1 }
    }
}

impl QuadOptions {
    pub fn for_loss(loss: &LossSpec) -> Self {
        let mut o = QuadOptions::default();
        if loss.smoothness() == crate::loss::Smoothness::C0Convex {
            o.panel_split = 2;
        }
        o
    }
}

/// First and second envelope-derivative moments used by the system solver.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeMoments {
    /// `E[SY * M'_x]`
    pub e_sy: f64,
    /// `E[(M'_x)^2]`
    pub e_sq: f64,
    /// `E[G * M'_x]`
    pub e_g: f64,
}

#[derive(Debug, Clone)]
pub struct QuadratureRule {
    g_nodes: Vec<f64>,
    g_weights: Vec<f64>,
    g_nodes_fine: Vec<f64>,
    g_weights_fine: Vec<f64>,
    /// sy nodes with weights premultiplied by `p_SY`
    sy_nodes: Vec<f64>,
    sy_weights: Vec<f64>,
    /// inner Gauss-Legendre template for kink-split g integration
    gl_inner: (Vec<f64>, Vec<f64>),
    split_points: Vec<f64>,
    opts: QuadOptions,
}

impl QuadratureRule {
    pub fn for_model(model: &LinkModel, opts: QuadOptions) -> Self {
        let (g_nodes, g_weights) = num::gauss_hermite_prob(opts.n_g);
        let (g_nodes_fine, g_weights_fine) = num::gauss_hermite_prob(2 * opts.n_g);
        let (gl_x, gl_w) = num::gauss_legendre(opts.gl_nodes);
        let (lo, hi) = model.support();
        let split_points = model.split_points();
        let mut edges = vec![lo];
        for &s in &split_points {
            if s > lo && s < hi {
                edges.push(s);
            }
        }
        edges.push(hi);
        let mut sy_nodes = Vec::new();
        let mut sy_weights = Vec::new();
        for seg in edges.windows(2) {
            for k in 0..opts.panel_split {
                let a = seg[0] + (seg[1] - seg[0]) * k as f64 / opts.panel_split as f64;
                let b = seg[0] + (seg[1] - seg[0]) * (k + 1) as f64 / opts.panel_split as f64;
                num::map_panel(&gl_x, &gl_w, a, b, &mut sy_nodes, &mut sy_weights);
            }
        }
        for (w, x) in sy_weights.iter_mut().zip(&sy_nodes) {
            *w *= model.density_sy(*x);
        }
        QuadratureRule {
            g_nodes,
            g_weights,
            g_nodes_fine,
            g_weights_fine,
            sy_nodes,
            sy_weights,
            gl_inner: num::gauss_legendre(24),
            split_points,
            opts,
        }
    }

    pub fn options(&self) -> QuadOptions {
        self.opts
    }

    pub fn split_points(&self) -> &[f64] {
        &self.split_points
    }

    /// Sum of the (density-weighted) sy weights, i.e. the quadrature mass.
    pub fn sy_mass(&self) -> f64 {
        self.sy_weights.iter().sum()
    }

    pub fn g_mass(&self) -> f64 {
        self.g_weights.iter().sum()
    }

    fn tensor(&self, f: &dyn Fn(f64, f64) -> f64, fine: bool) -> Result<f64> {
        let (gx, gw) = if fine {
            (&self.g_nodes_fine, &self.g_weights_fine)
        } else {
            (&self.g_nodes, &self.g_weights)
        };
        let mut total = 0.0;
        for (&g, &vg) in gx.iter().zip(gw) {
            let mut row = 0.0;
            for (&w, &vw) in self.sy_nodes.iter().zip(&self.sy_weights) {
                let v = f(g, w);
                if !v.is_finite() {
                    return Err(CoreError::NonFiniteIntegrand { g, sy: w });
                }
                row += vw * v;
            }
            total += vg * row;
        }
        Ok(total)
    }

    /// Tensor-product expectation with the doubled-order consistency check.
    pub fn expect_gsy(&self, f: impl Fn(f64, f64) -> f64) -> Result<f64> {
        let base = self.tensor(&f, false)?;
        let fine = self.tensor(&f, true)?;
        if (base - fine).abs() > RICHARDSON_TOL {
            return Err(CoreError::QuadratureNonConvergence(format!(
                "refinement gap {:e} exceeds {RICHARDSON_TOL:e}",
                (base - fine).abs()
            )));
        }
        Ok(fine)
    }

    /// Single-order tensor evaluation (used inside iteration loops).
    pub fn expect_gsy_unchecked(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.tensor(&f, false).unwrap_or(f64::NAN)
    }

    /// `E[(G + c SY)_-^2]`, the separability functional.
    pub fn expect_negpart_sq(&self, c: f64) -> Result<f64> {
        self.expect_gsy(|g, w| {
            let t = (g + c * w).min(0.0);
            t * t
        })
    }

    /// Envelope-derivative moments at `(mu, alpha, lambda)`.
    ///
    /// `refined` doubles the resolution of whichever inner rule is active;
    /// the difference between the two is the quadrature error estimate.
    pub fn envelope_moments(
        &self,
        loss: &LossSpec,
        mu: f64,
        alpha: f64,
        lambda: f64,
        refined: bool,
    ) -> EnvelopeMoments {
        let kinks = loss.envelope_kinks(lambda);
        if kinks.is_empty() {
            self.moments_tensor(loss, mu, alpha, lambda, refined)
        } else {
            self.moments_kink_split(loss, mu, alpha, lambda, &kinks, refined)
        }
    }

    fn moments_tensor(
        &self,
        loss: &LossSpec,
        mu: f64,
        alpha: f64,
        lambda: f64,
        refined: bool,
    ) -> EnvelopeMoments {
        let (gx, gw) = if refined {
            (&self.g_nodes_fine, &self.g_weights_fine)
        } else {
            (&self.g_nodes, &self.g_weights)
        };
        let mut e_sy = 0.0;
        let mut e_sq = 0.0;
        let mut e_g = 0.0;
        for (&g, &vg) in gx.iter().zip(gw) {
            let mut r_sy = 0.0;
            let mut r_sq = 0.0;
            let mut r_g = 0.0;
            for (&w, &vw) in self.sy_nodes.iter().zip(&self.sy_weights) {
                let f = loss.envelope_dx(alpha * g + mu * w, lambda);
                r_sy += vw * w * f;
                r_sq += vw * f * f;
                r_g += vw * f;
            }
            e_sy += vg * r_sy;
            e_sq += vg * r_sq;
            e_g += vg * g * r_g;
        }
        EnvelopeMoments { e_sy, e_sq, e_g }
    }

    fn moments_kink_split(
        &self,
        loss: &LossSpec,
        mu: f64,
        alpha: f64,
        lambda: f64,
        kinks: &[f64],
        refined: bool,
    ) -> EnvelopeMoments {
        let (order, max_width) = if refined { (48usize, 1.0) } else { (24usize, 2.0) };
        let (gl_x, gl_w) = if refined {
            num::gauss_legendre(order)
        } else {
            self.gl_inner.clone()
        };
        let mut e_sy = 0.0;
        let mut e_sq = 0.0;
        let mut e_g = 0.0;
        let mut edges: Vec<f64> = Vec::with_capacity(kinks.len() + 2);
        let mut gbuf: Vec<f64> = Vec::new();
        let mut wbuf: Vec<f64> = Vec::new();
        for (&w, &vw) in self.sy_nodes.iter().zip(&self.sy_weights) {
            edges.clear();
            edges.push(-G_MAX);
            if alpha > 0.0 {
                for &k in kinks {
                    let gk = (k - mu * w) / alpha;
                    if gk > -G_MAX && gk < G_MAX {
                        edges.push(gk);
                    }
                }
            }
            edges.push(G_MAX);
            edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
            gbuf.clear();
            wbuf.clear();
            for seg in edges.windows(2) {
                let width = seg[1] - seg[0];
                if width <= 0.0 {
                    continue;
                }
                let n_sub = (width / max_width).ceil().max(1.0) as usize;
                for k in 0..n_sub {
                    let a = seg[0] + width * k as f64 / n_sub as f64;
                    let b = seg[0] + width * (k + 1) as f64 / n_sub as f64;
                    num::map_panel(&gl_x, &gl_w, a, b, &mut gbuf, &mut wbuf);
                }
            }
            let mut r_sy = 0.0;
            let mut r_sq = 0.0;
            let mut r_g = 0.0;
            for (&g, &gwt) in gbuf.iter().zip(&wbuf) {
                let wt = gwt * num::normal_pdf(g);
                let f = loss.envelope_dx(alpha * g + mu * w, lambda);
                r_sy += wt * f;
                r_sq += wt * f * f;
                r_g += wt * g * f;
            }
            e_sy += vw * w * r_sy;
            e_sq += vw * r_sq;
            e_g += vw * r_g;
        }
        EnvelopeMoments { e_sy, e_sq, e_g }
    }
}
