#![allow(dead_code)]

//! Independent numerical oracles shared by the integration tests.

use std::f64::consts::PI;

/// Gauss-Hermite rule for weight `exp(-x^2)`, nodes by Newton iteration on
/// the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        // standard initial guesses from the asymptotic node distribution
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[g(a)]` for `a ~ N(mean, var)` by Gauss-Hermite quadrature.
pub fn gaussian_expectation(
    rule: &(Vec<f64>, Vec<f64>),
    mean: f64,
    var: f64,
    g: impl Fn(f64) -> f64,
) -> f64 {
    let s = (2.0 * var).sqrt();
    rule.0
        .iter()
        .zip(&rule.1)
        .map(|(&x, &w)| w * g(mean + s * x))
        .sum::<f64>()
        / PI.sqrt()
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre integral of `f` over `[a, b]`.
pub fn integrate(
    rule: &(Vec<f64>, Vec<f64>),
    a: f64,
    b: f64,
    panels: usize,
    f: impl Fn(f64) -> f64,
) -> f64 {
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        let mid = lo + h / 2.0;
        total += rule
            .0
            .iter()
            .zip(&rule.1)
            .map(|(&x, &w)| w * f(mid + h / 2.0 * x))
            .sum::<f64>()
            * h
            / 2.0;
    }
    total
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Mean and variance of `max(0, a)`, `a ~ N(mean, var)`, by quadrature over
/// the positive half-line (the integrand has a kink at zero).
pub fn rectifier_quadrature(rule: &(Vec<f64>, Vec<f64>), mean: f64, var: f64) -> (f64, f64) {
    if var == 0.0 {
        return (mean.max(0.0), 0.0);
    }
    let s = var.sqrt();
    let hi = mean + 14.0 * s;
    if hi <= 0.0 {
        return (0.0, 0.0);
    }
    let lo = (mean - 14.0 * s).max(0.0);
    let density = |a: f64| normal_pdf((a - mean) / s) / s;
    let m1 = integrate(rule, lo, hi, 400, |a| a * density(a));
    let m2 = integrate(rule, lo, hi, 400, |a| a * a * density(a));
    (m1, m2 - m1 * m1)
}

/// Streaming sample statistics with standard errors of the mean and of the
/// (unbiased) variance.
#[derive(Default, Clone, Copy, Debug)]
pub struct Moments {
    n: f64,
    shift: f64,
    s1: f64,
    s2: f64,
    s3: f64,
    s4: f64,
}

impl Moments {
    /// Values are accumulated relative to `shift` for numerical stability.
    pub fn with_shift(shift: f64) -> Self {
        Moments {
            shift,
            ..Default::default()
        }
    }

    pub fn push(&mut self, v: f64) {
        let d = v - self.shift;
        let d2 = d * d;
        self.n += 1.0;
        self.s1 += d;
        self.s2 += d2;
        self.s3 += d2 * d;
        self.s4 += d2 * d2;
    }

    pub fn mean(&self) -> f64 {
        self.shift + self.s1 / self.n
    }

    fn central(&self) -> (f64, f64) {
        let m = self.s1 / self.n;
        let c2 = self.s2 / self.n - m * m;
        let c4 = self.s4 / self.n - 4.0 * m * self.s3 / self.n + 6.0 * m * m * self.s2 / self.n
            - 3.0 * m.powi(4);
        (c2, c4)
    }

    pub fn var(&self) -> f64 {
        self.central().0 * self.n / (self.n - 1.0)
    }

    pub fn mean_se(&self) -> f64 {
        (self.central().0 / self.n).sqrt()
    }

    pub fn var_se(&self) -> f64 {
        let (c2, c4) = self.central();
        ((c4 - c2 * c2).max(0.0) / self.n).sqrt()
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Spectral radius from the characteristic polynomial (Faddeev-LeVerrier)
/// and its roots (Durand-Kerner). Independent of any library eigensolver;
/// adequate for small dense matrices.
pub fn char_poly_radius(w: &ndarray::Array2<f64>) -> f64 {
    use nalgebra::Complex;
    let n = w.nrows();
    // monic coefficients, c[k] multiplies lambda^(n-k)
    let mut c = vec![1.0; n + 1];
    let mut m = ndarray::Array2::<f64>::zeros((n, n));
    for k in 1..=n {
        let mut next = w.dot(&m);
        for i in 0..n {
            next[[i, i]] += c[k - 1];
        }
        m = next;
        c[k] = -w.dot(&m).diag().sum() / k as f64;
    }
    let eval = |z: Complex<f64>| {
        c.iter()
            .fold(Complex::new(0.0, 0.0), |acc, &ck| acc * z + ck)
    };
    let bound = 1.0 + c[1..].iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let seed = Complex::new(0.4, 0.9);
    let mut z: Vec<Complex<f64>> = (0..n).map(|i| seed.powu(i as u32) * bound).collect();
    for _ in 0..5000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            moved = moved.max(step.norm() / z[i].norm().max(1e-300));
        }
        if moved < 1e-15 {
            break;
        }
    }
    z.iter().map(|r| r.norm()).fold(0.0, f64::max)
}
