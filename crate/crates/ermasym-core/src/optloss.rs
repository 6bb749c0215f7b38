//! Synthesis of the correlation-optimal convex loss.
//!
//! With `sigma* = sigma_opt(delta)` and `W* = sigma* G + SY`, the optimal
//! loss is the negated Moreau envelope
//!
//! ```text
//! l*(w) = -M_{a1 q + a2 log p_W*}(w; 1),   q(x) = x^2/2,
//! a1 = (1 - s^2 I) / (delta (s^2 I + I - 1)),
//! a2 = 1 / (delta (s^2 I + I - 1)),        I = I(W*), s = sigma*,
//! ```
//!
//! equivalently the conjugate form `l*(w) = (q + a1 q + a2 log p_W*)^*(w) - q(w)`.
//! Writing `h(v) = (1 + a1) q(v) + a2 log p_W*(v)` (convex whenever
//! `(log p_W)'' <= -1/(sigma^2+1)`, a sufficient condition checked on a
//! grid), the conjugate pair is sampled parametrically: for a grid of `v`,
//!
//! ```text
//! w = h'(v),    l*'(w) = v - w,    l*(w) = w v - h(v) - q(w),
//! ```
//!
//! which places table knots densely exactly where `l*'` is steep. For
//! hard-margin models (noiseless Signed) `h'` maps onto `(0, inf)` only --
//! the ideal loss is a barrier on negative margins -- and the table covers
//! `h'([-v_cap, v_hi])` with a geometric left tail instead of `[-w_max, w_max]`.
//!
//! Solving the three-equation system with the tabulated loss must return
//! `(mu, alpha, lambda) = (1, sigma*, 1)`; `verify_achievability` asserts
//! exactly that.

use crate::error::{CoreError, Result};
use crate::limits::{self, WDensity};
use crate::link::LinkModel;
use crate::loss::{LossSpec, TabulatedLoss};
use crate::num;
use crate::saddle::{self, SaddleSolution, SolverOptions};
use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convexity {
    /// The grid check of the sufficient curvature condition passed.
    ProvenSufficient,
    /// Sufficient condition failed somewhere but the sampled derivative is
    /// still nondecreasing.
    NumericallyConvex,
    NonConvexDetected,
}

impl std::fmt::Display for Convexity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Convexity::ProvenSufficient => "proven-sufficient",
            Convexity::NumericallyConvex => "numerically-convex",
            Convexity::NonConvexDetected => "non-convex-detected",
        };
        f.write_str(s)
    }
}

/// Gridded optimal loss with coefficients and provenance.
#[derive(Debug, Clone)]
pub struct OptLossTable {
    pub sigma_opt: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta: f64,
    pub model_id: String,
    pub grid: Vec<f64>,
    pub loss_values: Vec<f64>,
    pub loss_deriv: Vec<f64>,
    pub convexity: Convexity,
}

#[derive(Debug, Clone, Copy)]
pub struct OptGridSpec {
    pub points: usize,
    /// Right edge of the table; `None` selects `8 + 8 sigma_opt`.
    pub w_max: Option<f64>,
}

impl Default for OptGridSpec {
    fn default() -> Self {
        OptGridSpec { points: 2048, w_max: None }
    }
}

/// Result of the sufficient-convexity grid check.
#[derive(Debug, Clone, Copy)]
pub struct LemmaCheck {
    pub holds: bool,
    /// worst value of `(log p)''(w) + 1/(sigma^2+1)` over the grid (<= 0 when
    /// the condition holds)
    pub worst_margin: f64,
    pub argmax: f64,
}

/// Grid check of `(log p_W)''(w) <= -1/(sigma^2 + 1)`.
pub fn lemma_d1_check(model: &LinkModel, sigma: f64, points: usize) -> Result<LemmaCheck> {
    let wd = WDensity::new(model, sigma)?;
    let w_max = 8.0 + 8.0 * sigma;
    let n = points.max(64);
    let bound = 1.0 / (sigma * sigma + 1.0);
    let margins: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let w = -w_max + 2.0 * w_max * i as f64 / (n - 1) as f64;
            (wd.point(w).log_p_second + bound, w)
        })
        .collect();
    let (worst_margin, argmax) = margins
        .into_iter()
        .fold((f64::NEG_INFINITY, 0.0), |acc, x| if x.0 > acc.0 { x } else { acc });
    Ok(LemmaCheck { holds: worst_margin <= 1e-8, worst_margin, argmax })
}

/// Builds the optimal-loss table for `model` at aspect ratio `delta`.
pub fn build_optimal_loss(
    model: &LinkModel,
    delta: f64,
    spec: OptGridSpec,
) -> Result<OptLossTable> {
    let opt = limits::sigma_opt(model, delta)?;
    build_with_sigma(model, delta, opt.sigma_opt, opt.fisher, spec)
}

pub(crate) fn build_with_sigma(
    model: &LinkModel,
    delta: f64,
    sigma: f64,
    fisher: f64,
    spec: OptGridSpec,
) -> Result<OptLossTable> {
    let s2 = sigma * sigma;
    let denom = delta * (s2 * fisher + fisher - 1.0);
    let alpha1 = (1.0 - s2 * fisher) / denom;
    let alpha2 = 1.0 / denom;
    let wd = WDensity::new(model, sigma)?;
    let hp = |v: f64| (1.0 + alpha1) * v + alpha2 * wd.point(v).score;
    let h = |v: f64| (1.0 + alpha1) * 0.5 * v * v + alpha2 * wd.point(v).log_p;

    let w_max = spec.w_max.unwrap_or(8.0 + 8.0 * sigma);
    let v_cap = 50.0 * (1.0 + w_max);
    let v_hi = num::monotone_root(|v| hp(v) - w_max, 0.0, 1.0, 1e6, 1e-11)
        .ok_or_else(|| CoreError::NonConvexInner(f64::NAN))?;
    // left end: either the conjugate covers -w_max or the loss is a barrier
    let barrier = hp(-v_cap) > -w_max;
    let n = spec.points.max(64);
    let v_grid: Vec<f64> = if barrier {
        // geometric sweep into the barrier plus a uniform bulk
        let n_tail = n / 4;
        let v_knee = -4.0 * w_max.max(1.0);
        let mut vs: Vec<f64> = (0..n_tail)
            .map(|i| {
                let t = i as f64 / n_tail as f64;
                -((-v_cap / v_knee).powf(1.0 - t) * (-v_knee))
            })
            .collect();
        let rest = n - n_tail;
        vs.extend((0..rest).map(|i| v_knee + (v_hi - v_knee) * i as f64 / (rest - 1) as f64));
        vs
    } else {
        let v_lo = num::monotone_root(|v| hp(v) + w_max, 0.0, 1.0, v_cap, 1e-11)
            .ok_or_else(|| CoreError::NonConvexInner(f64::NAN))?;
        (0..n)
            .map(|i| v_lo + (v_hi - v_lo) * i as f64 / (n - 1) as f64)
            .collect()
    };

    let rows: Vec<(f64, f64, f64)> = v_grid
        .par_iter()
        .map(|&v| {
            let w = hp(v);
            (w, w * v - h(v) - 0.5 * w * w, v - w)
        })
        .collect();
    // h must be convex for the conjugate sampling to be valid: its
    // derivative values, i.e. the w knots, must strictly increase
    let mut worst = 0.0f64;
    for c in rows.windows(2) {
        worst = worst.min(c[1].0 - c[0].0);
    }
    if worst < 0.0 {
        return Err(CoreError::NonConvexInner(worst));
    }
    let mut grid = Vec::with_capacity(rows.len());
    let mut loss_values = Vec::with_capacity(rows.len());
    let mut loss_deriv = Vec::with_capacity(rows.len());
    for (w, val, dv) in rows {
        if let Some(&last) = grid.last() {
            if w <= last {
                continue;
            }
        }
        grid.push(w);
        loss_values.push(val);
        loss_deriv.push(dv);
    }
    let min_val = loss_values.iter().cloned().fold(f64::INFINITY, f64::min);
    for v in &mut loss_values {
        *v -= min_val;
    }

    let lemma = lemma_d1_check(model, sigma, 1024)?;
    let deriv_monotone = loss_deriv.windows(2).all(|c| c[1] >= c[0] - 1e-9);
    let convexity = if lemma.holds && deriv_monotone {
        Convexity::ProvenSufficient
    } else if deriv_monotone {
        Convexity::NumericallyConvex
    } else {
        Convexity::NonConvexDetected
    };

    Ok(OptLossTable {
        sigma_opt: sigma,
        alpha1,
        alpha2,
        delta,
        model_id: model.id(),
        grid,
        loss_values,
        loss_deriv,
        convexity,
    })
}

impl OptLossTable {
    /// Wraps the table as a loss usable by every envelope operation.
    pub fn as_loss(&self) -> Result<LossSpec> {
        let tab = TabulatedLoss::new(
            self.grid.clone(),
            self.loss_values.clone(),
            self.loss_deriv.clone(),
        )?;
        Ok(LossSpec::tabulated(Arc::new(tab)))
    }

    /// Affine display normalization mapping `l(1) -> 0`, `l(2) -> 1`.
    pub fn display_normalized(&self) -> (Vec<f64>, Vec<f64>) {
        let interp = num::Pchip::new(self.grid.clone(), self.loss_values.clone());
        let l1 = interp.eval(1.0);
        let l2 = interp.eval(2.0);
        let c = if (l2 - l1).abs() > 1e-12 { 1.0 / (l2 - l1) } else { 1.0 };
        (
            self.loss_values.iter().map(|&v| (v - l1) * c).collect(),
            self.loss_deriv.iter().map(|&d| d * c).collect(),
        )
    }

    /// CSV with a metadata preamble; the loss loader reads the same layout.
    pub fn write_csv<W: Write>(&self, out: &mut W, display_columns: bool) -> std::io::Result<()> {
        writeln!(
            out,
            "# sigma_opt={:.12e}, alpha1={:.12e}, alpha2={:.12e}, delta={:.12e}, model={}, convexity={}",
            self.sigma_opt, self.alpha1, self.alpha2, self.delta, self.model_id, self.convexity
        )?;
        if display_columns {
            let (dv, dd) = self.display_normalized();
            writeln!(out, "w,loss,dloss,loss_display,dloss_display")?;
            for i in 0..self.grid.len() {
                writeln!(
                    out,
                    "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                    self.grid[i], self.loss_values[i], self.loss_deriv[i], dv[i], dd[i]
                )?;
            }
        } else {
            writeln!(out, "w,loss,dloss")?;
            for i in 0..self.grid.len() {
                writeln!(
                    out,
                    "{:.12e},{:.12e},{:.12e}",
                    self.grid[i], self.loss_values[i], self.loss_deriv[i]
                )?;
            }
        }
        Ok(())
    }

    /// Parses the CSV layout written by [`OptLossTable::write_csv`]; extra
    /// columns (display normalization) are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut sigma_opt = f64::NAN;
        let mut alpha1 = f64::NAN;
        let mut alpha2 = f64::NAN;
        let mut delta = f64::NAN;
        let mut model_id = String::from("unknown");
        let mut convexity = Convexity::NumericallyConvex;
        let mut grid = Vec::new();
        let mut loss_values = Vec::new();
        let mut loss_deriv = Vec::new();
        let mut saw_header = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for part in meta.split(',') {
                    let mut kv = part.splitn(2, '=');
                    let (k, v) = (kv.next().unwrap_or("").trim(), kv.next().unwrap_or("").trim());
                    match k {
                        "sigma_opt" => sigma_opt = v.parse().unwrap_or(f64::NAN),
                        "alpha1" => alpha1 = v.parse().unwrap_or(f64::NAN),
                        "alpha2" => alpha2 = v.parse().unwrap_or(f64::NAN),
                        "delta" => delta = v.parse().unwrap_or(f64::NAN),
                        "model" => model_id = v.to_string(),
                        "convexity" => {
                            convexity = match v {
                                "proven-sufficient" => Convexity::ProvenSufficient,
                                "non-convex-detected" => Convexity::NonConvexDetected,
                                _ => Convexity::NumericallyConvex,
                            }
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if !line.starts_with("w,loss,dloss") {
                    return Err(CoreError::MalformedTable(format!(
                        "expected header starting `w,loss,dloss`, got `{line}`"
                    )));
                }
                saw_header = true;
                continue;
            }
            let mut it = line.split(',').map(str::trim);
            let parse = |s: Option<&str>| s.and_then(|t| t.parse::<f64>().ok());
            match (parse(it.next()), parse(it.next()), parse(it.next())) {
                (Some(w), Some(l), Some(d)) => {
                    grid.push(w);
                    loss_values.push(l);
                    loss_deriv.push(d);
                }
                _ => return Err(CoreError::MalformedTable(format!("bad row `{line}`"))),
            }
        }
        if grid.len() < 8 {
            return Err(CoreError::MalformedTable("too few rows".into()));
        }
        Ok(OptLossTable {
            sigma_opt,
            alpha1,
            alpha2,
            delta,
            model_id,
            grid,
            loss_values,
            loss_deriv,
            convexity,
        })
    }
}

/// Solves the system with the tabulated loss and asserts the solution is
/// `(mu, alpha, lambda) = (1, sigma_opt, 1)` within 1e-4.
pub fn verify_achievability(
    table: &OptLossTable,
    model: &LinkModel,
    opts: &SolverOptions,
) -> Result<SaddleSolution> {
    if table.convexity == Convexity::NonConvexDetected {
        return Err(CoreError::AchievabilityFailed(
            "table is marked non-convex".into(),
        ));
    }
    let loss = table.as_loss()?;
    let sol = saddle::solve_system(&loss, model, table.delta, opts)?;
    let errs = [
        (sol.mu - 1.0).abs(),
        (sol.alpha - table.sigma_opt).abs(),
        (sol.lambda - 1.0).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0f64, f64::max);
    if worst > 1e-4 {
        return Err(CoreError::AchievabilityFailed(format!(
            "solved (mu, alpha, lambda) = ({:.6}, {:.6}, {:.6}), expected (1, {:.6}, 1); \
             max deviation {:.2e}",
            sol.mu, sol.alpha, sol.lambda, table.sigma_opt, worst
        )));
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::limits::{density_w, DensityGridSpec};
    use crate::num::simpson_uniform;

    #[test]
    fn coefficients_and_identity() {
        let model = LinkModel::signed();
        let t = build_optimal_loss(&model, 4.0, OptGridSpec::default()).unwrap();
        assert!(t.alpha1 > 0.0 && t.alpha2 > 0.0);
        assert_abs_diff_eq!(
            1.0 + t.alpha1 - t.alpha2 / (t.sigma_opt * t.sigma_opt),
            0.0,
            epsilon = 1e-8
        );
        assert_eq!(t.convexity, Convexity::ProvenSufficient);
        // derivative sampled nondecreasing
        assert!(t.loss_deriv.windows(2).all(|c| c[1] >= c[0] - 1e-9));
        // values pinned at zero minimum
        let min = t.loss_values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(min, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lemma_check_signed_and_gaussian() {
        let signed = LinkModel::signed();
        let c = lemma_d1_check(&signed, 0.7, 512).unwrap();
        assert!(c.holds, "margin {}", c.worst_margin);
        // Gaussian log-density curvature is exactly -1/(sigma^2+v)
        let (m, v) = (0.5, 0.75);
        let g = LinkModel::gaussian_sy(m, v).unwrap();
        let c = lemma_d1_check(&g, 0.9, 256).unwrap();
        assert!(c.holds);
        let expect = 1.0 / (0.81 + 1.0) - 1.0 / (0.81 + v);
        assert_abs_diff_eq!(c.worst_margin, expect, epsilon = 1e-6);
    }

    #[test]
    fn gaussian_sy_table_is_quadratic() {
        // the optimal loss for a Gaussian product law is least-squares-like:
        // its derivative is affine
        let (m, delta) = (0.564, 3.0);
        let model = LinkModel::gaussian_sy(m, 1.0 - m * m).unwrap();
        let t = build_optimal_loss(&model, delta, OptGridSpec::default()).unwrap();
        // least-squares fit of the derivative
        let n = t.grid.len() as f64;
        let sx: f64 = t.grid.iter().sum();
        let sy: f64 = t.loss_deriv.iter().sum();
        let sxx: f64 = t.grid.iter().map(|x| x * x).sum();
        let sxy: f64 = t.grid.iter().zip(&t.loss_deriv).map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icept = (sy - slope * sx) / n;
        let worst = t
            .grid
            .iter()
            .zip(&t.loss_deriv)
            .map(|(x, y)| (y - (slope * x + icept)).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-5, "max affine deviation {worst}");
    }

    #[test]
    fn moreau_identities_on_grid() {
        // M_{l*}(w; 1) = -a1 w^2/2 - a2 log p(w) and
        // M'(w; 1) = -a1 w - a2 score(w) on the sampled range
        let model = LinkModel::signed();
        let delta = 4.0;
        let t = build_optimal_loss(&model, delta, OptGridSpec::default()).unwrap();
        let wd = WDensity::new(&model, t.sigma_opt).unwrap();
        let loss = t.as_loss().unwrap();
        let lo = t.grid[0];
        let hi = *t.grid.last().unwrap();
        for i in 0..60 {
            let w = lo + (hi - lo) * i as f64 / 59.0;
            let e = loss.envelope(w, 1.0);
            let pt = wd.point(w);
            let rhs = -t.alpha1 * 0.5 * w * w - t.alpha2 * pt.log_p;
            // envelope value matches up to the additive pin of the table
            let shift = {
                let e0 = loss.envelope(1.0, 1.0);
                let pt0 = wd.point(1.0);
                e0.value - (-t.alpha1 * 0.5 - t.alpha2 * pt0.log_p)
            };
            assert_abs_diff_eq!(e.value - shift, rhs, epsilon = 1e-5);
            assert_abs_diff_eq!(e.dx, -t.alpha1 * w - t.alpha2 * pt.score, epsilon = 1e-6);
        }
    }

    #[test]
    fn w_form_system_satisfied() {
        // E[(M')^2] = E[W M'] = sigma^2/delta and E[M' score] = -1/delta
        let model = LinkModel::signed();
        let delta = 3.0;
        let t = build_optimal_loss(&model, delta, OptGridSpec::default()).unwrap();
        let loss = t.as_loss().unwrap();
        let tab = density_w(&model, t.sigma_opt, DensityGridSpec::default()).unwrap();
        let h = tab.grid_step();
        let mp: Vec<f64> = tab.grid.iter().map(|&w| loss.envelope_dx(w, 1.0)).collect();
        let s2d = t.sigma_opt * t.sigma_opt / delta;
        let e_sq: Vec<f64> = mp.iter().zip(&tab.p).map(|(&f, &p)| f * f * p).collect();
        let e_w: Vec<f64> = mp
            .iter()
            .zip(tab.grid.iter().zip(&tab.p))
            .map(|(&f, (&w, &p))| w * f * p)
            .collect();
        let e_sc: Vec<f64> = mp
            .iter()
            .zip(tab.score.iter().zip(&tab.p))
            .map(|(&f, (&sc, &p))| f * sc * p)
            .collect();
        assert_abs_diff_eq!(simpson_uniform(&e_sq, h), s2d, epsilon = 1e-5);
        assert_abs_diff_eq!(simpson_uniform(&e_w, h), s2d, epsilon = 1e-5);
        assert_abs_diff_eq!(simpson_uniform(&e_sc, h), -1.0 / delta, epsilon = 1e-5);
    }

    #[test]
    fn csv_roundtrip() {
        let model = LinkModel::gaussian_sy(0.6, 0.64).unwrap();
        let t = build_optimal_loss(&model, 2.5, OptGridSpec { points: 256, w_max: None }).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, true).unwrap();
        let parsed = OptLossTable::from_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_abs_diff_eq!(parsed.sigma_opt, t.sigma_opt, epsilon = 1e-10);
        assert_abs_diff_eq!(parsed.alpha1, t.alpha1, epsilon = 1e-10);
        assert_eq!(parsed.grid.len(), t.grid.len());
        assert_abs_diff_eq!(parsed.loss_deriv[17], t.loss_deriv[17], epsilon = 1e-10);
        // display columns: l(1) = 0 and l(2) = 1
        let (dv, _) = t.display_normalized();
        let p = num::Pchip::new(t.grid.clone(), dv);
        assert_abs_diff_eq!(p.eval(1.0), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.eval(2.0), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn achievability_gaussian_matches_ls() {
        // LS is optimal for the Gaussian product law: achieved correlation
        // equals the least-squares closed form
        let (m, delta) = (0.564, 3.0);
        let model = LinkModel::gaussian_sy(m, 1.0 - m * m).unwrap();
        let t = build_optimal_loss(&model, delta, OptGridSpec::default()).unwrap();
        let sol = verify_achievability(&t, &model, &SolverOptions::default()).unwrap();
        let cf = saddle::ls_closed_form(&model, delta).unwrap();
        assert_abs_diff_eq!(sol.correlation, cf.correlation, epsilon = 1e-6);
    }
}
