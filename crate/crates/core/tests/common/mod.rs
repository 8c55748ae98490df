//! Independent reference implementations used by the integration and
//! acceptance tests. Deliberately naive: straight loops, no shared code with
//! the library beyond its public types.

#![allow(dead_code)]

use radon_cbir::index::IndexedImage;
use radon_cbir::RadonBarcode;

/// Pixel-major nearest-bin accumulation. Rows are angles `j·180/n_p` degrees,
/// bins split `[-N√2/2, N√2/2]` into `N` equal parts, out-of-range offsets
/// clamp to the end bins.
pub fn radon_oracle(pixels: &[f64], side: usize, projections: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * projections];
    let n = side as f64;
    let width = std::f64::consts::SQRT_2;
    let half = n * width / 2.0;
    let trig: Vec<(f64, f64)> = (0..projections)
        .map(|j| {
            let theta = (j as f64 * 180.0 / projections as f64).to_radians();
            (theta.cos(), theta.sin())
        })
        .collect();
    for r in 0..side {
        for c in 0..side {
            let v = pixels[r * side + c];
            if v == 0.0 {
                continue;
            }
            // column grows right, row grows down; y points up
            let x = c as f64 - (n - 1.0) / 2.0;
            let y = (n - 1.0) / 2.0 - r as f64;
            for (j, &(cos, sin)) in trig.iter().enumerate() {
                let rho = x * cos + y * sin;
                let raw = ((rho + half) / width).floor();
                let bin = if raw < 0.0 {
                    0
                } else if raw >= n {
                    side - 1
                } else {
                    raw as usize
                };
                out[j * side + bin] += v;
            }
        }
    }
    out
}

/// Median of the nonzero entries of each row, then `v ≥ T`, read bit by bit.
pub fn barcode_bits_oracle(values: &[f64], side: usize) -> Vec<bool> {
    let mut bits = Vec::with_capacity(values.len());
    for row in values.chunks(side) {
        let mut nz: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
        if nz.is_empty() {
            bits.extend(std::iter::repeat_n(false, row.len()));
            continue;
        }
        nz.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = nz.len();
        let t = if m % 2 == 1 {
            nz[m / 2]
        } else {
            (nz[m / 2 - 1] + nz[m / 2]) / 2.0
        };
        bits.extend(row.iter().map(|&v| v >= t));
    }
    bits
}

pub fn hamming_oracle(a: &RadonBarcode, b: &RadonBarcode) -> u32 {
    a.bits().zip(b.bits()).filter(|(x, y)| x != y).count() as u32
}

/// Exhaustive scan then stable sort by distance: ties keep `records` order.
pub fn knn_oracle<'a>(
    records: impl IntoIterator<Item = &'a IndexedImage>,
    query: &RadonBarcode,
    k: usize,
) -> Vec<(String, u32)> {
    let mut all: Vec<(String, u32)> = records
        .into_iter()
        .map(|r| (r.id.clone(), hamming_oracle(&r.barcode, query)))
        .collect();
    all.sort_by_key(|e| e.1);
    all.truncate(k);
    all
}

pub fn rbf(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d).exp()
}

pub struct QpSolution {
    pub alphas: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
}

impl QpSolution {
    pub fn decision(&self, xs: &[Vec<f64>], ys: &[i8], gamma: f64, x: &[f64]) -> f64 {
        self.bias
            + xs.iter()
                .zip(ys)
                .zip(&self.alphas)
                .map(|((xi, &yi), a)| a * f64::from(yi) * rbf(xi, x, gamma))
                .sum::<f64>()
    }
}

/// Projects `v` onto `{0 ≤ α ≤ C, Σ α_i y_i = 0}` by bisecting on the
/// multiplier of the equality constraint.
fn project(v: &[f64], ys: &[f64], c: f64) -> Vec<f64> {
    let at = |lambda: f64| -> Vec<f64> {
        v.iter()
            .zip(ys)
            .map(|(vi, yi)| (vi - lambda * yi).clamp(0.0, c))
            .collect()
    };
    let balance = |a: &[f64]| a.iter().zip(ys).map(|(a, y)| a * y).sum::<f64>();
    // balance(at(λ)) is non-increasing in λ
    let bound = v.iter().map(|x| x.abs()).fold(0.0, f64::max) + c + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Dense projected-gradient ascent on the soft-margin dual.
pub fn dual_qp_oracle(xs: &[Vec<f64>], ys: &[i8], c: f64, gamma: f64) -> QpSolution {
    let n = xs.len();
    let y: Vec<f64> = ys.iter().map(|&v| f64::from(v)).collect();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| y[i] * y[j] * rbf(&xs[i], &xs[j], gamma)).collect())
        .collect();
    // Gershgorin bound on the largest eigenvalue of Q
    let lipschitz = q
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / lipschitz;
    let objective = |a: &[f64]| {
        let quad: f64 = (0..n)
            .map(|i| (0..n).map(|j| a[i] * q[i][j] * a[j]).sum::<f64>())
            .sum();
        a.iter().sum::<f64>() - 0.5 * quad
    };
    let mut alphas = vec![0.0; n];
    for _ in 0..200_000 {
        let grad: Vec<f64> = (0..n)
            .map(|i| 1.0 - (0..n).map(|j| q[i][j] * alphas[j]).sum::<f64>())
            .collect();
        let next: Vec<f64> = alphas.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
        let next = project(&next, &y, c);
        let moved: f64 = next.iter().zip(&alphas).map(|(a, b)| (a - b).abs()).sum();
        alphas = next;
        if moved < 1e-15 {
            break;
        }
    }

    // bias from margin vectors, else midpoint of the feasible interval
    let eps = 1e-7 * c;
    let u = |i: usize| (0..n).map(|j| alphas[j] * y[j] * rbf(&xs[j], &xs[i], gamma)).sum::<f64>();
    let free: Vec<f64> = (0..n)
        .filter(|&i| alphas[i] > eps && alphas[i] < c - eps)
        .map(|i| y[i] - u(i))
        .collect();
    let bias = if !free.is_empty() {
        free.iter().sum::<f64>() / free.len() as f64
    } else {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            let b = y[i] - u(i);
            let at_zero = alphas[i] <= eps;
            if at_zero == (y[i] > 0.0) {
                lo = lo.max(b);
            } else {
                hi = hi.min(b);
            }
        }
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            _ => hi,
        }
    };
    QpSolution {
        objective: objective(&alphas),
        alphas,
        bias,
    }
}
