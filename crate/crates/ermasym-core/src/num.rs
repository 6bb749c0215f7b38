//! Shared numerical kernels: normal special functions, Gaussian quadrature
//! nodes, scalar root finding, monotone cubic interpolation.

use nalgebra::DMatrix;

pub const SQRT_2PI: f64 = 2.5066282746310002;
pub const LN_SQRT_2PI: f64 = 0.9189385332046727;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Mills ratio `Phi(-z)/phi(z)` for `z > 0`, by Laplace continued fraction.
///
/// Converges quickly for z >= 2; callers switch to direct erfc below that.
fn mills_ratio_cf(z: f64) -> f64 {
    // R(z) = 1/(z + 1/(z + 2/(z + 3/(z + ...))))
    let mut f = z;
    let tiny = 1e-300;
    let mut c = f;
    let mut d = 0.0;
    for k in 1..200 {
        let a = k as f64;
        d = z + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = z + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// log of the standard normal CDF, accurate far into the left tail.
pub fn normal_logcdf(x: f64) -> f64 {
    if x >= -2.0 {
        normal_cdf(x).ln()
    } else {
        // log Phi(x) = log phi(x) + log R(|x|)
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio_cf(-x).ln()
    }
}

/// Hazard-type ratio `phi(x)/Phi(x)`, stable for very negative `x`.
pub fn normal_pdf_over_cdf(x: f64) -> f64 {
    if x >= -2.0 {
        normal_pdf(x) / normal_cdf(x)
    } else {
        1.0 / mills_ratio_cf(-x)
    }
}

/// Solve `w + ln w = l` for `w > 0` (Lambert W of `e^l` on the log scale).
pub fn lambert_w_of_exp(l: f64) -> f64 {
    let mut w = if l > 1.0 {
        l - l.ln() * l / (1.0 + l)
    } else {
        (l - 1.0).exp().min(0.5) + f64::MIN_POSITIVE
    };
    for _ in 0..60 {
        let g = w + w.ln() - l;
        let step = g / (1.0 + 1.0 / w);
        let mut w_new = w - step;
        if w_new <= 0.0 {
            w_new = w * 0.5;
        }
        if (w_new - w).abs() <= 1e-16 * w.abs().max(1e-300) {
            return w_new;
        }
        w = w_new;
    }
    w
}

// ---------------------------------------------------------------------------
// Gaussian quadrature nodes (Golub-Welsch on the Jacobi matrix)
// ---------------------------------------------------------------------------

fn golub_welsch(diag: &[f64], offdiag: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = diag[i];
    }
    for i in 0..n - 1 {
        j[(i, i + 1)] = offdiag[i];
        j[(i + 1, i)] = offdiag[i];
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Gauss-Hermite nodes/weights for the probabilists' weight
/// `e^{-g^2/2}/sqrt(2 pi)`; weights sum to 1.
pub fn gauss_hermite_prob(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let (nodes, weights) = golub_welsch(&diag, &offdiag, std::f64::consts::PI.sqrt());
    let nodes = nodes
        .into_iter()
        .map(|x| x * std::f64::consts::SQRT_2)
        .collect();
    let weights = weights
        .into_iter()
        .map(|w| w / std::f64::consts::PI.sqrt())
        .collect();
    (nodes, weights)
}

/// Gauss-Legendre nodes/weights on `[-1, 1]`; weights sum to 2.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &offdiag, 2.0)
}

/// Map a `[-1, 1]` rule onto `[a, b]`, appending to the output buffers.
pub fn map_panel(nodes: &[f64], weights: &[f64], a: f64, b: f64, xs: &mut Vec<f64>, ws: &mut Vec<f64>) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    for (&x, &w) in nodes.iter().zip(weights) {
        xs.push(mid + half * x);
        ws.push(half * w);
    }
}

// ---------------------------------------------------------------------------
// Composite Simpson on a uniform grid
// ---------------------------------------------------------------------------

/// Integrates samples `y` on a uniform grid with spacing `h`.
///
/// Uses composite Simpson; an even sample count gets a 3/8 block at the end.
pub fn simpson_uniform(y: &[f64], h: f64) -> f64 {
    let n = y.len();
    assert!(n >= 2);
    if n == 2 {
        return 0.5 * h * (y[0] + y[1]);
    }
    let (simpson_end, tail) = if n % 2 == 1 { (n - 1, 0.0) } else { (n - 4, 0.0) };
    let mut s = tail;
    if simpson_end >= 2 {
        let mut acc = y[0] + y[simpson_end];
        let mut i = 1;
        while i < simpson_end {
            acc += 4.0 * y[i];
            if i + 1 < simpson_end {
                acc += 2.0 * y[i + 1];
            }
            i += 2;
        }
        s += acc * h / 3.0;
    }
    if n % 2 == 0 {
        let m = n - 4;
        s += 3.0 * h / 8.0 * (y[m] + 3.0 * y[m + 1] + 3.0 * y[m + 2] + y[m + 3]);
    }
    s
}

// ---------------------------------------------------------------------------
// Scalar root finding and 1-D minimization
// ---------------------------------------------------------------------------

/// Brent's method on a bracketing interval. `fa`/`fb` must have opposite signs.
pub fn brent<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    xtol: f64,
    max_iter: usize,
) -> f64 {
    assert!(
        fa == 0.0 || fb == 0.0 || (fa < 0.0) != (fb < 0.0),
        "brent: root not bracketed"
    );
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut mflag = true;
    let mut d = 0.0;
    for _ in 0..max_iter {
        if fb == 0.0 || (b - a).abs() < xtol {
            return b;
        }
        let mut s = if fa != fc && fb != fc {
            // inverse quadratic interpolation
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let cond = !((s > lo.min(b) && s < lo.max(b))
            || (s > b.min(lo) && s < b.max(lo)))
            || (mflag && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!mflag && (s - b).abs() >= (c - d).abs() / 2.0)
            || (mflag && (b - c).abs() < xtol)
            || (!mflag && (c - d).abs() < xtol);
        if cond {
            s = 0.5 * (a + b);
            mflag = true;
        } else {
            mflag = false;
        }
        let fs = f(s);
        d = c;
        c = b;
        fc = fb;
        if (fa < 0.0) != (fs < 0.0) {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    b
}

/// Finds a root of a nondecreasing function by geometric bracket expansion
/// around `x0` followed by Brent. Returns `None` if no sign change is found
/// within `span` of `x0`.
pub fn monotone_root<F: FnMut(f64) -> f64>(
    mut f: F,
    x0: f64,
    initial_step: f64,
    span: f64,
    xtol: f64,
) -> Option<f64> {
    let f0 = f(x0);
    if f0 == 0.0 {
        return Some(x0);
    }
    let dir = if f0 > 0.0 { -1.0 } else { 1.0 };
    let mut step = initial_step.abs().max(1e-12);
    let mut a = x0;
    let mut fa = f0;
    loop {
        let b = a + dir * step;
        if (b - x0).abs() > span {
            return None;
        }
        let fb = f(b);
        if fb == 0.0 {
            return Some(b);
        }
        if (fa < 0.0) != (fb < 0.0) {
            let (lo, hi, flo, fhi) = if a < b { (a, b, fa, fb) } else { (b, a, fb, fa) };
            return Some(brent(f, lo, hi, flo, fhi, xtol, 200));
        }
        a = b;
        fa = fb;
        step *= 2.0;
    }
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, xtol: f64) -> (f64, f64) {
    const INVPHI: f64 = 0.6180339887498949;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > xtol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    (x, fx)
}

// ---------------------------------------------------------------------------
// Monotone cubic (PCHIP) interpolation
// ---------------------------------------------------------------------------

/// Fritsch-Carlson shape-preserving cubic interpolant on a strictly
/// increasing knot set. Monotone data produce a monotone interpolant.
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
    /// cumulative exact integral of the interpolant from x[0] to x[i]
    cum: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 2 && y.len() == n);
        assert!(x.windows(2).all(|w| w[1] > w[0]), "knots must increase");
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        for i in 1..n - 1 {
            if delta[i - 1] == 0.0 || delta[i] == 0.0 || (delta[i - 1] > 0.0) != (delta[i] > 0.0) {
                m[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        m[0] = Self::edge_slope(h[0], h.get(1).copied().unwrap_or(h[0]), delta[0], delta.get(1).copied().unwrap_or(delta[0]));
        m[n - 1] = Self::edge_slope(
            h[n - 2],
            if n >= 3 { h[n - 3] } else { h[n - 2] },
            delta[n - 2],
            if n >= 3 { delta[n - 3] } else { delta[n - 2] },
        );
        let mut cum = vec![0.0; n];
        for i in 0..n - 1 {
            let seg = h[i] / 2.0 * (y[i] + y[i + 1]) + h[i] * h[i] / 12.0 * (m[i] - m[i + 1]);
            cum[i + 1] = cum[i] + seg;
        }
        Pchip { x, y, m, cum }
    }

    fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
        // standard one-sided three-point estimate with monotonicity clamps
        let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            s = 0.0;
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            s = 3.0 * d0;
        }
        s
    }

    fn segment(&self, x: f64) -> usize {
        match self.x.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(self.x.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.x.len() - 2),
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.x.last().unwrap()
    }

    pub fn first(&self) -> f64 {
        self.y[0]
    }

    pub fn last(&self) -> f64 {
        *self.y.last().unwrap()
    }

    pub fn slope_begin(&self) -> f64 {
        self.m[0]
    }

    pub fn slope_end(&self) -> f64 {
        *self.m.last().unwrap()
    }

    /// Interpolated value; clamps to the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x.clamp(self.x_min(), self.x_max()));
        let h = self.x[i + 1] - self.x[i];
        let t = (x.clamp(self.x_min(), self.x_max()) - self.x[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[i] + h10 * h * self.m[i] + h01 * self.y[i + 1] + h11 * h * self.m[i + 1]
    }

    /// Derivative of the interpolant; clamps to the knot range.
    pub fn deriv(&self, x: f64) -> f64 {
        let xc = x.clamp(self.x_min(), self.x_max());
        let i = self.segment(xc);
        let h = self.x[i + 1] - self.x[i];
        let t = (xc - self.x[i]) / h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        d00 * self.y[i] + d10 * self.m[i] + d01 * self.y[i + 1] + d11 * self.m[i + 1]
    }

    /// Exact integral of the interpolant from the first knot to `x` (within range).
    pub fn integral_from_start(&self, x: f64) -> f64 {
        let xc = x.clamp(self.x_min(), self.x_max());
        let i = self.segment(xc);
        let h = self.x[i + 1] - self.x[i];
        let t = (xc - self.x[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        // integrals of the Hermite basis on [0, t], scaled by h
        let i00 = 0.5 * t4 - t3 + t;
        let i10 = 0.25 * t4 - 2.0 / 3.0 * t3 + 0.5 * t2;
        let i01 = -0.5 * t4 + t3;
        let i11 = 0.25 * t4 - t3 / 3.0;
        self.cum[i]
            + h * (i00 * self.y[i]
                + i10 * h * self.m[i]
                + i01 * self.y[i + 1]
                + i11 * h * self.m[i + 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_cdf_matches_reference() {
        // reference values from 40-digit evaluation of Phi
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(1.0), 0.8413447460685429, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(-2.5), 0.006209665325776132, epsilon = 1e-16);
    }

    #[test]
    fn logcdf_deep_tail() {
        // log Phi(-10) = -53.23128515051247 to full precision
        assert_abs_diff_eq!(normal_logcdf(-10.0), -53.23128515051247, epsilon = 1e-10);
        // continuity across the switch at -2
        let a = normal_logcdf(-1.9999999);
        let b = normal_logcdf(-2.0000001);
        assert!((a - b).abs() < 1e-6);
        // hazard ratio ~ |x| + 1/|x| in the tail
        let r = normal_pdf_over_cdf(-30.0);
        assert_abs_diff_eq!(r, 30.0 + 1.0 / 30.0 - 0.0000740, epsilon = 1e-3);
    }

    #[test]
    fn hermite_rule_normalized() {
        for n in [8, 40, 80, 160] {
            let (x, w) = gauss_hermite_prob(n);
            let mass: f64 = w.iter().sum();
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| x * x * w).sum();
            assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-11);
            let m4: f64 = x.iter().zip(&w).map(|(x, w)| x.powi(4) * w).sum();
            assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn legendre_rule_exact_on_polynomials() {
        let (x, w) = gauss_legendre(16);
        let mass: f64 = w.iter().sum();
        assert_abs_diff_eq!(mass, 2.0, epsilon = 1e-13);
        let p6: f64 = x.iter().zip(&w).map(|(x, w)| x.powi(6) * w).sum();
        assert_abs_diff_eq!(p6, 2.0 / 7.0, epsilon = 1e-13);
    }

    #[test]
    fn lambert_solves_transcendental() {
        for l in [-30.0, -1.0, 0.0, 1.0, 5.0, 50.0, 500.0] {
            let w = lambert_w_of_exp(l);
            assert!(w > 0.0);
            assert_abs_diff_eq!(w + w.ln(), l, epsilon = 1e-12 * l.abs().max(1.0));
        }
    }

    #[test]
    fn brent_finds_cubic_root() {
        let f = |x: f64| x * x * x - 2.0;
        let r = brent(f, 0.0, 2.0, f(0.0), f(2.0), 1e-14, 100);
        assert_abs_diff_eq!(r, 2.0_f64.powf(1.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn simpson_integrates_smooth() {
        for n in [101usize, 4096] {
            let h = 2.0 / (n - 1) as f64;
            let y: Vec<f64> = (0..n).map(|i| (-1.0 + i as f64 * h).cos()).collect();
            let v = simpson_uniform(&y, h);
            assert_abs_diff_eq!(v, 2.0 * 1.0_f64.sin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pchip_preserves_monotone_data_and_integrates() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.17).collect();
        let y: Vec<f64> = x.iter().map(|&v| v + (v * 0.9).sin()).collect();
        let p = Pchip::new(x.clone(), y.clone());
        let mut prev = f64::NEG_INFINITY;
        for i in 0..490 {
            let v = p.eval(0.017 * i as f64);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        // integral consistency: d/dx of the cumulative equals eval
        let a = p.integral_from_start(4.0);
        let b = p.integral_from_start(4.0 + 1e-6);
        assert_abs_diff_eq!((b - a) / 1e-6, p.eval(4.0), epsilon = 1e-5);
    }

    #[test]
    fn golden_min_quadratic() {
        let (x, _) = golden_min(|x| (x - 1.3).powi(2), -4.0, 6.0, 1e-10);
        assert_abs_diff_eq!(x, 1.3, epsilon = 1e-8);
    }
}
