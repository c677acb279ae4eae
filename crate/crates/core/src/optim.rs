//! Quasi-Newton minimization with finite-difference gradients.
//!
//! Objectives return `f64::INFINITY` (or NaN) outside their admissible
//! region; the line search treats such points as rejected.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when `max |∂f/∂xᵢ|` falls below this.
    pub gradient_tolerance: f64,
    /// Stop after two consecutive steps whose relative decrease is below this.
    pub function_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            function_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

struct Counted<F> {
    f: F,
    calls: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.calls += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    /// Central differences, falling back to one-sided ones at the edge of
    /// the admissible region.
    fn gradient(&mut self, x: &[f64], fx: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * x[i].abs().max(1.0);
                xp[i] = x[i] + h;
                let fp = self.eval(&xp);
                xp[i] = x[i] - h;
                let fm = self.eval(&xp);
                xp[i] = x[i];
                match (fp.is_finite(), fm.is_finite()) {
                    (true, true) => (fp - fm) / (2.0 * h),
                    (true, false) => (fp - fx) / h,
                    (false, true) => (fx - fm) / h,
                    (false, false) => 0.0,
                }
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f` from `x0` with BFGS and a backtracking Armijo line search.
///
/// `x0` must be admissible (finite objective); otherwise the start is
/// returned unchanged with `converged = false`.
///
/// ```
/// use vmemsec::optim::{bfgs, BfgsOptions};
/// let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
/// let m = bfgs(rosen, &[-1.2, 1.0], &BfgsOptions::default());
/// assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
/// ```
pub fn bfgs<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum {
    let k = x0.len();
    let mut obj = Counted { f, calls: 0 };
    let mut x = x0.to_vec();
    let mut fx = obj.eval(&x);
    if !fx.is_finite() || k == 0 {
        return Minimum {
            x,
            f: fx,
            iterations: 0,
            evaluations: obj.calls,
            converged: k == 0 && fx.is_finite(),
        };
    }
    let mut g = obj.gradient(&x, fx);
    // inverse Hessian approximation, row-major
    let mut h = identity(k);
    let mut fresh = true;
    let mut small_steps = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if max_abs(&g) <= opts.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d: Vec<f64> = (0..k).map(|i| -dot(&h[i * k..(i + 1) * k], &g)).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            h = identity(k);
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            fresh = true;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let fn_ = obj.eval(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            if fresh {
                // Even steepest descent cannot make progress.
                converged = max_abs(&g) <= opts.gradient_tolerance.sqrt();
                break;
            }
            h = identity(k);
            fresh = true;
            continue;
        };

        let gn = obj.gradient(&xn, fn_);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            update_inverse(&mut h, &s, &y, sy);
            fresh = false;
        }

        let decrease = fx - fn_;
        x = xn;
        g = gn;
        fx = fn_;
        if decrease <= opts.function_tolerance * (1.0 + fx.abs()) {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }

    Minimum {
        x,
        f: fx,
        iterations,
        evaluations: obj.calls,
        converged,
    }
}

fn identity(k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k * k];
    for i in 0..k {
        h[i * k + i] = 1.0;
    }
    h
}

/// `H ← (I − ρsy')H(I − ρys') + ρss'`.
fn update_inverse(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let k = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..k).map(|i| dot(&h[i * k..(i + 1) * k], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..k {
        for j in 0..k {
            h[i * k + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let f = |x: &[f64]| 3.0 * (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2) + x[0] * x[1];
        let m = bfgs(f, &[0.0, 0.0], &BfgsOptions::default());
        // stationary point of the quadratic: 6(x0-1) + x1 = 0, 2(x1+2) + x0 = 0
        let x1 = -5.0 / (2.0 - 1.0 / 6.0);
        let x0 = 1.0 - x1 / 6.0;
        assert!(m.converged);
        assert!((m.x[0] - x0).abs() < 1e-5, "{:?}", m.x);
        assert!((m.x[1] - x1).abs() < 1e-5);
    }

    #[test]
    fn respects_barrier() {
        // minimum at the boundary side is excluded; optimum at x = 0.5
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::INFINITY
            } else {
                x[0] - x[0].ln() * 0.5
            }
        };
        let m = bfgs(f, &[3.0], &BfgsOptions::default());
        assert!((m.x[0] - 0.5).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn infeasible_start() {
        let m = bfgs(|_| f64::INFINITY, &[1.0], &BfgsOptions::default());
        assert!(!m.converged);
        assert_eq!(m.iterations, 0);
    }
}
