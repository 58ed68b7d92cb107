//! Clamped B-spline bases and their derivative-roughness penalties.
//!
//! Basis functions are evaluated with the Cox–de Boor recursion in the
//! triangular form, and derivatives with the standard divided-difference
//! recurrence on the same table. The roughness penalty integrates the square
//! of the third derivative exactly: for a spline of order `k` the integrand
//! on each knot span is a polynomial of degree `2(k - 4)`, so a Gauss–Legendre
//! rule with `k - 3` nodes per span carries no quadrature error.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of a cubic spline (degree 3).
pub const CUBIC: usize = 4;

/// Default number of interior knots on the radial axis.
pub const DEFAULT_INTERIOR_KNOTS: usize = 20;

/// Default edge thinning factor: the outermost knot gap is twice the central one.
pub const DEFAULT_EDGE_THINNING: f64 = 2.0;

/// The spacing transition of `make_knots` happens between these positions of
/// the uniform pre-image.
const THINNING_START: f64 = 0.6;
const THINNING_END: f64 = 0.8;

/// A clamped B-spline basis over `[knots[0], knots[last]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
    order: usize,
}

impl SplineBasis {
    /// Build a clamped basis from interior knots on the open interval `(lo, hi)`.
    pub fn clamped(interior: &[f64], lo: f64, hi: f64, order: usize) -> Result<Self> {
        if order < CUBIC {
            return Err(Error::Argument(format!(
                "spline order must be at least {CUBIC} for a third-derivative penalty, got {order}"
            )));
        }
        if !(lo < hi) {
            return Err(Error::Argument(format!("empty spline domain [{lo}, {hi}]")));
        }
        let mut prev = lo;
        for &k in interior {
            if !(k > prev) || !(k < hi) {
                return Err(Error::Argument(format!(
                    "interior knots must be strictly increasing inside ({lo}, {hi})"
                )));
            }
            prev = k;
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * order);
        knots.extend(std::iter::repeat_n(lo, order));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(hi, order));
        Ok(Self { knots, order })
    }

    /// Rebuild a basis from a full knot vector as stored in model files.
    pub fn from_knot_vector(knots: Vec<f64>, order: usize) -> Result<Self> {
        if knots.len() < 2 * order {
            return Err(Error::Argument("knot vector too short for order".into()));
        }
        let lo = knots[0];
        let hi = knots[knots.len() - 1];
        let clamped_lo = knots[..order].iter().all(|&k| k == lo);
        let clamped_hi = knots[knots.len() - order..].iter().all(|&k| k == hi);
        if !clamped_lo || !clamped_hi {
            return Err(Error::Argument("knot vector is not clamped".into()));
        }
        let interior = &knots[order..knots.len() - order];
        Self::clamped(interior, lo, hi, order)
    }

    /// Cubic basis on `[-1, 1]` with `make_knots` interior knots.
    pub fn radial(n_interior: usize, edge_thinning: f64) -> Result<Self> {
        let interior = make_knots(n_interior, edge_thinning)?;
        Self::clamped(&interior, -1.0, 1.0, CUBIC)
    }

    /// Cubic basis with uniform interior knots on `[lo, hi]`.
    pub fn uniform(n_interior: usize, lo: f64, hi: f64) -> Result<Self> {
        let step = (hi - lo) / (n_interior + 1) as f64;
        let interior: Vec<f64> = (1..=n_interior).map(|i| lo + step * i as f64).collect();
        Self::clamped(&interior, lo, hi, CUBIC)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.order..self.knots.len() - self.order]
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis functions, `K = n_interior + order`.
    pub fn len(&self) -> usize {
        self.knots.len() - self.order
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// True when the knot vector is mirror-symmetric about the domain midpoint.
    pub fn is_symmetric(&self) -> bool {
        let (lo, hi) = self.domain();
        let mid = 0.5 * (lo + hi);
        let n = self.knots.len();
        (0..n).all(|i| ((self.knots[i] - mid) + (self.knots[n - 1 - i] - mid)).abs() < 1e-12)
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if x.is_nan() || x < lo || x > hi {
            return Err(Error::Domain(format!(
                "evaluation point {x} outside spline domain [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Index `i` of the knot span `[t_i, t_{i+1})` containing `x`.
    fn span(&self, x: f64) -> usize {
        let p = self.order - 1;
        let n = self.len();
        if x >= self.knots[n] {
            return n - 1;
        }
        // knots[p..=n] is sorted; find last index with knot <= x.
        let slice = &self.knots[p..=n];
        let pos = slice.partition_point(|&k| k <= x);
        (p + pos - 1).min(n - 1)
    }

    /// Nonzero basis values at `x`: returns the index of the first nonzero
    /// function and the `order` values starting there.
    pub fn eval_local(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        self.check_domain(x)?;
        let span = self.span(x);
        let ders = self.derivs_at_span(span, x, 0);
        Ok((span + 1 - self.order, ders.into_iter().next().unwrap_or_default()))
    }

    /// All `K` basis values at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let (first, local) = self.eval_local(x)?;
        let mut out = vec![0.0; self.len()];
        out[first..first + local.len()].copy_from_slice(&local);
        Ok(out)
    }

    /// All `K` values of the `n`-th derivative of each basis function at `x`.
    pub fn eval_derivative(&self, x: f64, n: usize) -> Result<Vec<f64>> {
        self.check_domain(x)?;
        let span = self.span(x);
        let ders = self.derivs_at_span(span, x, n);
        let mut out = vec![0.0; self.len()];
        let first = span + 1 - self.order;
        out[first..first + self.order].copy_from_slice(&ders[n]);
        Ok(out)
    }

    /// Evaluate `sum_k coeffs[k] * B_k(x)`.
    pub fn evaluate(&self, coeffs: &[f64], x: f64) -> Result<f64> {
        if coeffs.len() != self.len() {
            return Err(Error::Argument(format!(
                "expected {} spline coefficients, got {}",
                self.len(),
                coeffs.len()
            )));
        }
        let (first, local) = self.eval_local(x)?;
        Ok(local.iter().zip(&coeffs[first..]).map(|(b, c)| b * c).sum())
    }

    /// Derivatives 0..=n of the nonzero basis functions on `span`.
    fn derivs_at_span(&self, span: usize, x: f64, n: usize) -> Vec<Vec<f64>> {
        let t = &self.knots;
        let p = self.order - 1;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; n + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let top = n.min(p);
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=top {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2: usize = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=top {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    /// Exact `K x K` matrix of `∫ B_i'''(x) B_j'''(x) dx` over the domain.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        self.derivative_gram(3)
    }

    /// Exact Gram matrix of the `d`-th derivatives.
    pub fn derivative_gram(&self, d: usize) -> DMatrix<f64> {
        let k = self.len();
        let mut s = DMatrix::zeros(k, k);
        let p = self.order - 1;
        if d > p {
            return s;
        }
        let (nodes, weights) = gauss_legendre(p - d + 1);
        for span in p..k {
            let (a, b) = (self.knots[span], self.knots[span + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let first = span - p;
            for (node, w) in nodes.iter().zip(&weights) {
                let x = mid + half * node;
                let ders = self.derivs_at_span(span, x, d);
                let row = &ders[d];
                for i in 0..=p {
                    for j in i..=p {
                        s[(first + i, first + j)] += w * half * row[i] * row[j];
                    }
                }
            }
        }
        s.fill_lower_triangle_with_upper_triangle();
        s
    }
}

/// Interior knots on `(-1, 1)` thinned toward both edges.
///
/// Uniform pre-image points `u_i = -1 + 2i/(n+1)` are pushed through a
/// symmetric monotone map whose slope is `1` for `|u| < 0.6`, rises smoothly
/// (cubic smoothstep) to `edge_thinning` at `|u| = 0.8` and stays there, then
/// rescaled so the map fixes `±1`. With `edge_thinning = 1` the knots are
/// uniform; with the default factor 2 the gaps beyond `|u| = 0.8` are exactly
/// twice the central gaps.
pub fn make_knots(n_interior: usize, edge_thinning: f64) -> Result<Vec<f64>> {
    if n_interior < 1 {
        return Err(Error::Argument("at least one interior knot is required".into()));
    }
    if !(edge_thinning >= 1.0) || !edge_thinning.is_finite() {
        return Err(Error::Argument(format!(
            "edge thinning factor must be >= 1, got {edge_thinning}"
        )));
    }
    let width = THINNING_END - THINNING_START;
    // ∫_0^v smoothstep((s - start) / width) ds
    let ramp_integral = |v: f64| -> f64 {
        if v <= THINNING_START {
            0.0
        } else if v <= THINNING_END {
            let s = (v - THINNING_START) / width;
            width * (s.powi(3) - 0.5 * s.powi(4))
        } else {
            0.5 * width + (v - THINNING_END)
        }
    };
    let raw = |u: f64| u + (edge_thinning - 1.0) * u.signum() * ramp_integral(u.abs());
    let scale = 1.0 / raw(1.0);
    let n1 = (n_interior + 1) as f64;
    let knots = (1..=n_interior)
        .map(|i| {
            let u = -1.0 + 2.0 * i as f64 / n1;
            // exact zero for the central knot of odd counts
            if 2 * i == n_interior + 1 {
                0.0
            } else {
                scale * raw(u)
            }
        })
        .collect();
    Ok(knots)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, computed by Newton
/// iteration on the Legendre polynomial.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            }
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(x), p0 = P_{n-1}(x)
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}
