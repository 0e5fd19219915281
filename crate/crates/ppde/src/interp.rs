//! Cubic B-spline interpolation on a square uniform grid.
//!
//! Tables of the parametrix correction are stored in normalized Gaussian
//! coordinates on `[-R, R]^2`. Values decay to zero at the boundary, so the
//! coefficient field is simply padded with zeros outside the grid.

#[derive(Debug, Clone)]
pub struct SplineGrid {
    n: usize,
    radius: f64,
    h: f64,
    coef: Vec<f64>,
}

impl SplineGrid {
    pub fn new(n: usize, radius: f64, values: &[f64]) -> Self {
        assert_eq!(values.len(), n * n);
        let h = 2.0 * radius / (n - 1) as f64;
        let mut coef = values.to_vec();
        let mut line = vec![0.0; n];
        for i in 0..n {
            line.copy_from_slice(&coef[i * n..(i + 1) * n]);
            prefilter(&mut line);
            coef[i * n..(i + 1) * n].copy_from_slice(&line);
        }
        for j in 0..n {
            for i in 0..n {
                line[i] = coef[i * n + j];
            }
            prefilter(&mut line);
            for i in 0..n {
                coef[i * n + j] = line[i];
            }
        }
        Self { n, radius, h, coef }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Grid coordinate of index `i`.
    pub fn node(&self, i: usize) -> f64 {
        -self.radius + self.h * i as f64
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.coef.iter_mut().for_each(|v| *v *= c);
    }

    pub fn add_scaled(&mut self, other: &SplineGrid, c: f64) {
        assert_eq!(self.n, other.n);
        self.coef.iter_mut().zip(&other.coef).for_each(|(a, b)| *a += c * b);
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let u = (p[0] + self.radius) / self.h;
        let v = (p[1] + self.radius) / self.h;
        let last = (self.n - 1) as f64;
        if !(u > -2.0 && u < last + 2.0 && v > -2.0 && v < last + 2.0) {
            return 0.0;
        }
        let iu = u.floor();
        let iv = v.floor();
        let bu = basis(u - iu);
        let bv = basis(v - iv);
        let iu = iu as i64;
        let iv = iv as i64;
        let n = self.n as i64;
        let mut acc = 0.0;
        for a in 0..4 {
            let i = iu - 1 + a;
            if i < 0 || i >= n {
                continue;
            }
            let row = &self.coef[(i * n) as usize..((i + 1) * n) as usize];
            let mut r = 0.0;
            for b in 0..4 {
                let j = iv - 1 + b;
                if j >= 0 && j < n {
                    r += bv[b as usize] * row[j as usize];
                }
            }
            acc += bu[a as usize] * r;
        }
        acc
    }

    /// Value and gradient at `p`.
    pub fn eval_grad(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let u = (p[0] + self.radius) / self.h;
        let v = (p[1] + self.radius) / self.h;
        let last = (self.n - 1) as f64;
        if !(u > -2.0 && u < last + 2.0 && v > -2.0 && v < last + 2.0) {
            return (0.0, [0.0, 0.0]);
        }
        let iu = u.floor();
        let iv = v.floor();
        let (bu, du) = (basis(u - iu), basis_d(u - iu));
        let (bv, dv) = (basis(v - iv), basis_d(v - iv));
        let (iu, iv, n) = (iu as i64, iv as i64, self.n as i64);
        let (mut f, mut fu, mut fv) = (0.0, 0.0, 0.0);
        for a in 0..4 {
            let i = iu - 1 + a;
            if i < 0 || i >= n {
                continue;
            }
            let row = &self.coef[(i * n) as usize..((i + 1) * n) as usize];
            let (mut r, mut rd) = (0.0, 0.0);
            for b in 0..4 {
                let j = iv - 1 + b;
                if j >= 0 && j < n {
                    r += bv[b as usize] * row[j as usize];
                    rd += dv[b as usize] * row[j as usize];
                }
            }
            f += bu[a as usize] * r;
            fu += du[a as usize] * r;
            fv += bu[a as usize] * rd;
        }
        (f, [fu / self.h, fv / self.h])
    }
}

fn basis_d(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [-0.5 * s * s, 1.5 * t * t - 2.0 * t, -1.5 * t * t + t + 0.5, 0.5 * t * t]
}

fn basis(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Solves the tridiagonal system `(1/6, 2/3, 1/6) c = v` in place.
fn prefilter(v: &mut [f64]) {
    let n = v.len();
    let mut cp = vec![0.0; n];
    let a = 1.0 / 6.0;
    let b = 2.0 / 3.0;
    cp[0] = a / b;
    v[0] /= b;
    for i in 1..n {
        let m = b - a * cp[i - 1];
        cp[i] = a / m;
        v[i] = (v[i] - a * v[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        v[i] -= cp[i] * v[i + 1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_nodes_and_smooth_functions() {
        let n = 41;
        let r = 6.0;
        let f = |x: f64, y: f64| (-(x * x + 0.5 * y * y + 0.3 * x * y) / 2.0).exp() * (1.0 + 0.2 * x);
        let grid = SplineGrid::new(n, r, &{
            let mut v = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let x = -r + 2.0 * r * i as f64 / (n - 1) as f64;
                    let y = -r + 2.0 * r * j as f64 / (n - 1) as f64;
                    v.push(f(x, y));
                }
            }
            v
        });
        assert!((grid.eval([grid.node(20), grid.node(13)]) - f(grid.node(20), grid.node(13))).abs() < 1e-12);
        let mut worst: f64 = 0.0;
        for k in 0..200 {
            let x = -3.0 + 6.0 * ((k * 37) % 200) as f64 / 200.0;
            let y = -3.0 + 6.0 * ((k * 71) % 200) as f64 / 200.0;
            worst = worst.max((grid.eval([x, y]) - f(x, y)).abs());
        }
        assert!(worst < 5e-4, "{worst}");
        assert_eq!(grid.eval([40.0, 0.0]), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 33;
        let vals: Vec<f64> = (0..n * n)
            .map(|k| {
                let x = -5.0 + 10.0 * (k / n) as f64 / (n - 1) as f64;
                let y = -5.0 + 10.0 * (k % n) as f64 / (n - 1) as f64;
                (x * 0.7).sin() * (-(y * y) / 8.0).exp()
            })
            .collect();
        let grid = SplineGrid::new(n, 5.0, &vals);
        let p = [0.37, -1.21];
        let (f, g) = grid.eval_grad(p);
        let h = 1e-5;
        assert!((f - grid.eval(p)).abs() < 1e-14);
        let gx = (grid.eval([p[0] + h, p[1]]) - grid.eval([p[0] - h, p[1]])) / (2.0 * h);
        let gy = (grid.eval([p[0], p[1] + h]) - grid.eval([p[0], p[1] - h])) / (2.0 * h);
        assert!((g[0] - gx).abs() < 1e-7 && (g[1] - gy).abs() < 1e-7, "{g:?} {gx} {gy}");
    }
}
