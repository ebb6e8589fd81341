//! L2-penalized logistic regression fit by damped Newton iterations.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions<T> {
    /// Ridge penalty on the weights; the bias is not penalized.
    pub l2: T,
    pub max_iter: usize,
    /// Stop once the gradient norm of the penalized log-likelihood drops
    /// below this.
    pub tol: T,
}

impl<T: Real> Default for LogisticOptions<T> {
    fn default() -> Self {
        LogisticOptions {
            l2: T::lit(1e-3),
            max_iter: 500,
            tol: T::lit(1e-8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit<T> {
    pub weights: Vec<T>,
    pub bias: T,
    /// False when the iteration budget ran out, or when the training set is
    /// perfectly separated (the unpenalized optimum does not exist and the
    /// weights are only held finite by the penalty).
    pub converged: bool,
    pub separated: bool,
    pub iterations: usize,
}

impl<T: Real> LogisticFit<T> {
    pub fn predict(&self, x: &[T]) -> T {
        self.linear(x).sigmoid()
    }

    fn linear(&self, x: &[T]) -> T {
        self.weights
            .iter()
            .zip(x)
            .fold(self.bias, |acc, (&w, &v)| acc + w * v)
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn objective<T: Real>(rows: &[Vec<T>], labels: &[bool], theta: &[T], l2: T) -> T {
    let d = theta.len() - 1;
    let mut total = T::zero();
    for (x, &y) in rows.iter().zip(labels) {
        let eta = x
            .iter()
            .zip(&theta[..d])
            .fold(theta[d], |a, (&v, &w)| a + v * w);
        total = total + if y { eta } else { T::zero() } - softplus(eta);
    }
    let ridge: T = theta[..d].iter().map(|&w| w * w).sum();
    total - l2 * ridge / T::lit(2.0)
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major, n x n)
/// by Cholesky factorization. Returns `None` if `a` is not numerically
/// positive definite.
fn solve_spd<T: Real>(a: &[T], b: &[T]) -> Option<Vec<T>> {
    let n = b.len();
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum = sum - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= T::zero() || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let s = (0..i).fold(b[i], |s, k| s - l[i * n + k] * y[k]);
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let s = (i + 1..n).fold(y[i], |s, k| s - l[k * n + i] * x[k]);
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Maximizes the penalized log-likelihood from a zero start. Deterministic
/// for a given input order.
pub fn fit_logistic<T: Real>(
    rows: &[Vec<T>],
    labels: &[bool],
    opts: &LogisticOptions<T>,
) -> LogisticFit<T> {
    assert_eq!(rows.len(), labels.len(), "one label per row");
    let d = rows.first().map_or(0, Vec::len);
    let p = d + 1;
    let mut theta = vec![T::zero(); p];
    let mut converged = false;
    let mut iterations = 0;
    let mut current = objective(rows, labels, &theta, opts.l2);
    while iterations < opts.max_iter {
        let mut grad = vec![T::zero(); p];
        let mut hess = vec![T::zero(); p * p];
        let mut xb = vec![T::one(); p];
        for (x, &y) in rows.iter().zip(labels) {
            xb[..d].copy_from_slice(x);
            let eta = xb[..d]
                .iter()
                .zip(&theta[..d])
                .fold(theta[d], |a, (&v, &w)| a + v * w);
            let mu = eta.sigmoid();
            let resid = T::indicator(y) - mu;
            let curv = mu * (T::one() - mu);
            for i in 0..p {
                grad[i] = grad[i] + resid * xb[i];
                let ci = curv * xb[i];
                for j in 0..=i {
                    hess[i * p + j] = hess[i * p + j] + ci * xb[j];
                }
            }
        }
        for i in 0..d {
            grad[i] = grad[i] - opts.l2 * theta[i];
            hess[i * p + i] = hess[i * p + i] + opts.l2;
        }
        for i in 0..p {
            for j in 0..i {
                hess[j * p + i] = hess[i * p + j];
            }
        }
        let gnorm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
        if gnorm < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut jitter = T::lit(1e-12);
        let step = loop {
            if let Some(step) = solve_spd(&hess, &grad) {
                break step;
            }
            for i in 0..p {
                hess[i * p + i] = hess[i * p + i] + jitter;
            }
            jitter = jitter * T::lit(10.0);
        };
        // near the optimum the objective changes by less than its own
        // rounding error, so a rounding-sized decrease is not a rejection
        let slack = T::epsilon() * T::lit(64.0) * (T::one() + current.abs());
        let mut t = T::one();
        let mut improved = false;
        while t > T::lit(1e-12) {
            let trial: Vec<T> = theta.iter().zip(&step).map(|(&a, &s)| a + t * s).collect();
            let value = objective(rows, labels, &trial, opts.l2);
            if value >= current - slack {
                theta = trial;
                current = value;
                improved = true;
                break;
            }
            t = t / T::lit(2.0);
        }
        if !improved {
            break;
        }
    }
    let fit = LogisticFit {
        weights: theta[..d].to_vec(),
        bias: theta[d],
        converged,
        separated: false,
        iterations,
    };
    let separated = !rows.is_empty()
        && labels.iter().any(|&y| y)
        && labels.iter().any(|&y| !y)
        && rows.iter().zip(labels).all(|(x, &y)| {
            let eta = fit.linear(x);
            if y {
                eta > T::zero()
            } else {
                eta < T::zero()
            }
        });
    LogisticFit {
        converged: converged && !separated,
        separated,
        ..fit
    }
}
