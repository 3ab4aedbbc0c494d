//! Characteristic roots of `det(sI − A − Ad e^{−sh}) = 0`.
//!
//! The solution operator's generator is discretized by Chebyshev collocation
//! on `[−h, 0]`; its rightmost eigenvalue is then polished by Newton's method
//! on the characteristic function itself.

use nalgebra::{Complex, DMatrix};
use num_complex::Complex64;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootOptions {
    /// Initial number of Chebyshev intervals.
    pub nodes: usize,
    /// Doubling stops here; exceeding it reports non-convergence.
    pub max_nodes: usize,
    /// Largest accepted relative move of the rightmost root when doubling.
    pub tolerance: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { nodes: 24, max_nodes: 384, tolerance: 1e-6 }
    }
}

/// Chebyshev differentiation matrix on the `nodes + 1` Gauss-Lobatto points
/// `x_j = cos(πj/nodes)`.
fn cheb_diff(nodes: usize) -> DMatrix<f64> {
    let n = nodes;
    let x: Vec<f64> = (0..=n).map(|j| (std::f64::consts::PI * j as f64 / n as f64).cos()).collect();
    let c: Vec<f64> = (0..=n)
        .map(|j| {
            let base = if j == 0 || j == n { 2.0 } else { 1.0 };
            if j % 2 == 0 { base } else { -base }
        })
        .collect();
    let mut d = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        let mut row = 0.0;
        for j in 0..=n {
            if i != j {
                d[(i, j)] = c[i] / c[j] / (x[i] - x[j]);
                row += d[(i, j)];
            }
        }
        d[(i, i)] = -row;
    }
    d
}

/// Collocation matrix of the generator on `nodes + 1` points; block 0 is
/// `θ = 0` and block `nodes` is `θ = −h`.
fn generator(a: &DMatrix<f64>, a_d: &DMatrix<f64>, h: f64, nodes: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let d = cheb_diff(nodes) * (2.0 / h);
    let size = n * (nodes + 1);
    let mut m = DMatrix::zeros(size, size);
    for i in 1..=nodes {
        for j in 0..=nodes {
            let v = d[(i, j)];
            if v != 0.0 {
                for k in 0..n {
                    m[(i * n + k, j * n + k)] = v;
                }
            }
        }
    }
    m.view_mut((0, 0), (n, n)).copy_from(a);
    let mut last = m.view_mut((0, nodes * n), (n, n));
    last += a_d;
    m
}

/// Rightmost eigenvalue of the discretized generator. Of a conjugate pair
/// the member with non-negative imaginary part is returned.
pub(crate) fn rightmost_candidate(a: &DMatrix<f64>, a_d: &DMatrix<f64>, h: f64, nodes: usize) -> Complex64 {
    let eig = generator(a, a_d, h, nodes).complex_eigenvalues();
    let mut best = Complex64::new(f64::NEG_INFINITY, 0.0);
    for z in eig.iter() {
        let z = Complex64::new(z.re, z.im.abs());
        if z.re > best.re + 1e-12 * (1.0 + z.re.abs()) || (z.re >= best.re - 1e-12 * (1.0 + z.re.abs()) && z.im < best.im) {
            best = z;
        }
    }
    best
}

/// Newton's method on `det(sI − A − Ad e^{−sh})`, using
/// `f'/f = tr(M(s)⁻¹ M'(s))`.
fn newton_refine(a: &DMatrix<f64>, a_d: &DMatrix<f64>, h: f64, start: Complex64) -> Option<Complex64> {
    let n = a.nrows();
    let ac: DMatrix<Complex64> = a.map(|v| Complex::new(v, 0.0));
    let adc: DMatrix<Complex64> = a_d.map(|v| Complex::new(v, 0.0));
    let eye = DMatrix::<Complex64>::identity(n, n);
    let mut s = start;
    for _ in 0..60 {
        let e = (-s * h).exp();
        let m = &eye * s - &ac - &adc * e;
        let dm = &eye + &adc * (e * h);
        let inv = m.try_inverse()?;
        let ratio = (inv * dm).trace();
        if ratio.norm() == 0.0 || !ratio.is_finite() {
            return None;
        }
        let step = ratio.inv();
        s -= step;
        if step.norm() <= 1e-14 * (1.0 + s.norm()) {
            return Some(s);
        }
    }
    Some(s)
}

/// Rightmost characteristic root of `ẋ = A x + Ad x(t−h)`.
pub fn rightmost_root(a: &DMatrix<f64>, a_d: &DMatrix<f64>, h: f64) -> Result<Complex64> {
    rightmost_root_with(a, a_d, h, &RootOptions::default())
}

pub fn rightmost_root_with(a: &DMatrix<f64>, a_d: &DMatrix<f64>, h: f64, opts: &RootOptions) -> Result<Complex64> {
    let n = a.nrows();
    if a.ncols() != n || a_d.shape() != (n, n) {
        return Err(Error::Dimension(format!("A {:?} and Ad {:?}", a.shape(), a_d.shape())));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("delay must be positive, got {h}")));
    }
    // Newton can wander to a different root from a poor start; only accept
    // refinements that stay close to the discretized estimate. Comparing
    // refined values keeps clustered roots, whose raw estimates are only
    // accurate to about the square root of the eigensolver's error, from
    // stalling the doubling.
    let estimate = |nodes: usize| {
        let candidate = rightmost_candidate(a, a_d, h, nodes);
        match newton_refine(a, a_d, h, candidate) {
            Some(s) if (s - candidate).norm() <= 1e-4 * (1.0 + candidate.norm()) => s,
            _ => candidate,
        }
    };
    let mut nodes = opts.nodes.max(2);
    let mut current = estimate(nodes);
    let root = loop {
        let finer = estimate(2 * nodes);
        let delta = (finer - current).norm();
        if delta <= opts.tolerance * (1.0 + finer.norm()) {
            break finer;
        }
        if 2 * nodes >= opts.max_nodes {
            return Err(Error::Unconverged { delta, nodes: 2 * nodes });
        }
        nodes *= 2;
        current = finer;
    };
    Ok(Complex64::new(root.re, root.im.abs()))
}

/// Smallest delay at which the rightmost root reaches the imaginary axis,
/// found by scanning `(0, h_cap]` and bisecting the first sign change to
/// `tol`. `None` means no crossing up to `h_cap`.
pub fn oracle_delay_margin(a: &DMatrix<f64>, a_d: &DMatrix<f64>, h_cap: f64, tol: f64) -> Result<Option<f64>> {
    let abscissa = |h: f64| rightmost_root(a, a_d, h).map(|s| s.re);
    let zero_delay = crate::linalg::spectral_abscissa(&(a + a_d));
    if zero_delay >= 0.0 {
        return Err(Error::UnstableAtZeroDelay { abscissa: zero_delay });
    }
    let steps = 400usize;
    let dh = h_cap / steps as f64;
    let mut lo = 0.0;
    for k in 1..=steps {
        let h = dh * k as f64;
        if abscissa(h)? >= 0.0 {
            let mut hi = h;
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if mid <= 0.0 {
                    break;
                }
                if abscissa(mid)? >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Some(0.5 * (lo + hi)));
        }
        lo = h;
    }
    Ok(None)
}
