//! Levenberg-Marquardt fit of one or two Gaussians to a density curve.
//!
//! Each component is `amplitude * exp(-(x - mean)^2 / (2 sigma^2))`.
//! Residuals are unweighted, so the objective is the plain residual sum of
//! squares and the reported goodness of fit is [`reduced_chi_square`] with
//! three parameters per component.

use serde::{Deserialize, Serialize};

use super::{reduced_chi_square, Histogram, MetricsError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent<T> {
    pub amplitude: T,
    pub mean: T,
    pub sigma: T,
}

impl<T: Scalar> GaussianComponent<T> {
    pub fn eval(&self, x: T) -> T {
        let u = (x - self.mean) / self.sigma;
        self.amplitude * (-(u * u) * T::lit(0.5)).exp()
    }
}

pub fn gaussian_sum<T: Scalar>(components: &[GaussianComponent<T>], x: T) -> T {
    components.iter().map(|c| c.eval(x)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFitReport<T> {
    /// Ordered by ascending sigma.
    pub components: Vec<GaussianComponent<T>>,
    pub chi2_red: T,
    pub df: usize,
    pub rss: T,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions<T> {
    pub max_iter: usize,
    /// Stop when an accepted step lowers the RSS by less than `ftol * rss`.
    pub ftol: T,
    /// Stop when the step is below `xtol * (|p| + xtol)`.
    pub xtol: T,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 500,
            ftol: T::epsilon() * T::lit(16.0),
            xtol: T::epsilon().sqrt() * T::lit(1e-3),
        }
    }
}

/// Fits `n_components` Gaussians to the density of `hist` (at bin centers).
///
/// Without `init`, one component starts from the histogram's mean and
/// standard deviation at peak density. Two components start from the mean
/// and standard deviation of the central half of the mass, plus a second
/// component with the same mean, four times the width and a tenth of the
/// amplitude.
pub fn fit_gaussians<T: Scalar>(
    hist: &Histogram<T>,
    n_components: usize,
    init: Option<&[GaussianComponent<T>]>,
) -> Result<GaussianFitReport<T>> {
    let x = hist.centers();
    let init = match init {
        Some(c) => c.to_vec(),
        None => default_init(hist, n_components)?,
    };
    fit_gaussians_xy(&x, &hist.density, n_components, &init, &FitOptions::default())
}

pub fn default_init<T: Scalar>(hist: &Histogram<T>, n_components: usize) -> Result<Vec<GaussianComponent<T>>> {
    let x = hist.centers();
    let w: Vec<T> = hist.density.iter().zip(hist.widths()).map(|(&d, w)| d * w).collect();
    let peak = hist.density.iter().cloned().fold(T::zero(), T::max);
    match n_components {
        1 => {
            let (mean, sd) = weighted_moments(&x, &w);
            Ok(vec![GaussianComponent {
                amplitude: peak,
                mean,
                sigma: positive_sigma(sd, hist),
            }])
        }
        2 => {
            // Restrict to the bins between the 25% and 75% quantiles.
            let (q1, q3) = (T::lit(0.25), T::lit(0.75));
            let mut cum = T::zero();
            let mut central = vec![T::zero(); w.len()];
            for (i, &wi) in w.iter().enumerate() {
                let next = cum + wi;
                if next > q1 && cum < q3 {
                    central[i] = wi;
                }
                cum = next;
            }
            let (mean, sd) = weighted_moments(&x, &central);
            let sigma = positive_sigma(sd, hist);
            Ok(vec![
                GaussianComponent {
                    amplitude: peak,
                    mean,
                    sigma,
                },
                GaussianComponent {
                    amplitude: peak * T::lit(0.1),
                    mean,
                    sigma: sigma * T::lit(4.0),
                },
            ])
        }
        n => Err(MetricsError::Components(n)),
    }
}

fn weighted_moments<T: Scalar>(x: &[T], w: &[T]) -> (T, T) {
    let total: T = w.iter().cloned().sum();
    if !(total > T::zero()) {
        return (T::zero(), T::zero());
    }
    let mean = x.iter().zip(w).map(|(&xi, &wi)| xi * wi).sum::<T>() / total;
    let var = x.iter().zip(w).map(|(&xi, &wi)| (xi - mean) * (xi - mean) * wi).sum::<T>() / total;
    (mean, var.sqrt())
}

/// Falls back to one bin width when the moment estimate degenerates.
fn positive_sigma<T: Scalar>(sd: T, hist: &Histogram<T>) -> T {
    if sd > T::zero() {
        sd
    } else {
        hist.widths().first().copied().unwrap_or(T::one())
    }
}

/// Levenberg-Marquardt on arbitrary `(x, y)` samples.
pub fn fit_gaussians_xy<T: Scalar>(
    x: &[T],
    y: &[T],
    n_components: usize,
    init: &[GaussianComponent<T>],
    opts: &FitOptions<T>,
) -> Result<GaussianFitReport<T>> {
    if !(1..=2).contains(&n_components) {
        return Err(MetricsError::Components(n_components));
    }
    if init.len() != n_components {
        return Err(MetricsError::BadInit(format!(
            "{} initial components for a {}-component fit",
            init.len(),
            n_components
        )));
    }
    if let Some(c) = init.iter().find(|c| !(c.sigma > T::zero()) || !c.amplitude.is_finite() || !c.mean.is_finite()) {
        return Err(MetricsError::BadInit(format!("sigma must be positive and finite: {c:?}")));
    }
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let n_params = 3 * n_components;
    if x.len() <= n_params {
        return Err(MetricsError::NoDegreesOfFreedom {
            n_points: x.len(),
            n_params,
        });
    }

    let mut p: Vec<T> = init.iter().flat_map(|c| [c.amplitude, c.mean, c.sigma]).collect();
    let mut rss = residual_ss(x, y, &p);
    let mut lambda = T::lit(1e-3);
    let lambda_max = T::lit(1e16);
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = vec![T::zero(); x.len() * n_params];
    let mut resid = vec![T::zero(); x.len()];

    while iterations < opts.max_iter && !converged {
        iterations += 1;
        jacobian(x, &p, &mut jac);
        for (r, (&xi, &yi)) in resid.iter_mut().zip(x.iter().zip(y)) {
            *r = yi - model(&p, xi);
        }
        let (jtj, jtr) = normal_equations(&jac, &resid, n_params);
        if jtr.iter().all(|g| *g == T::zero()) {
            converged = true;
            break;
        }

        let mut accepted = false;
        while lambda <= lambda_max {
            let mut m = jtj.clone();
            for i in 0..n_params {
                let d = jtj[i * n_params + i];
                m[i * n_params + i] = d + lambda * d.max(T::min_positive_value());
            }
            let Some(step) = solve(&mut m, &jtr, n_params) else {
                lambda *= T::lit(10.0);
                continue;
            };
            let trial: Vec<T> = p.iter().zip(&step).map(|(&a, &b)| a + b).collect();
            let sigmas_ok = trial.chunks(3).all(|c| c[2] > T::zero() && c.iter().all(|v| v.is_finite()));
            let trial_rss = if sigmas_ok { residual_ss(x, y, &trial) } else { T::infinity() };
            if trial_rss < rss {
                let drop = rss - trial_rss;
                let step_norm = norm(&step);
                let p_norm = norm(&p);
                p = trial;
                rss = trial_rss;
                lambda = (lambda * T::lit(0.1)).max(T::lit(1e-12));
                accepted = true;
                if drop <= opts.ftol * rss || step_norm <= opts.xtol * (p_norm + opts.xtol) || rss == T::zero() {
                    converged = true;
                }
                break;
            }
            lambda *= T::lit(10.0);
        }
        if !accepted {
            // No downhill step at any damping: the current point is a
            // stationary point to working precision.
            converged = true;
        }
    }

    let mut components: Vec<GaussianComponent<T>> = p
        .chunks(3)
        .map(|c| GaussianComponent {
            amplitude: c[0],
            mean: c[1],
            sigma: c[2],
        })
        .collect();
    components.sort_by(|a, b| a.sigma.partial_cmp(&b.sigma).unwrap());
    let fitted: Vec<T> = x.iter().map(|&xi| model(&p, xi)).collect();
    let chi2_red = reduced_chi_square(y, &fitted, n_params)?;
    Ok(GaussianFitReport {
        components,
        chi2_red,
        df: x.len() - n_params,
        rss,
        iterations,
        converged,
    })
}

fn model<T: Scalar>(p: &[T], x: T) -> T {
    p.chunks(3)
        .map(|c| {
            let u = (x - c[1]) / c[2];
            c[0] * (-(u * u) * T::lit(0.5)).exp()
        })
        .sum()
}

fn residual_ss<T: Scalar>(x: &[T], y: &[T], p: &[T]) -> T {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - model(p, xi);
            r * r
        })
        .sum()
}

/// Row-major `len(x) x len(p)` Jacobian of the model.
fn jacobian<T: Scalar>(x: &[T], p: &[T], out: &mut [T]) {
    let np = p.len();
    for (i, &xi) in x.iter().enumerate() {
        for (k, c) in p.chunks(3).enumerate() {
            let (a, mu, s) = (c[0], c[1], c[2]);
            let u = (xi - mu) / s;
            let g = (-(u * u) * T::lit(0.5)).exp();
            let row = &mut out[i * np + 3 * k..i * np + 3 * k + 3];
            row[0] = g;
            row[1] = a * g * u / s;
            row[2] = a * g * u * u / s;
        }
    }
}

fn normal_equations<T: Scalar>(jac: &[T], resid: &[T], np: usize) -> (Vec<T>, Vec<T>) {
    let mut jtj = vec![T::zero(); np * np];
    let mut jtr = vec![T::zero(); np];
    for (row, &r) in jac.chunks(np).zip(resid) {
        for i in 0..np {
            jtr[i] += row[i] * r;
            for j in 0..np {
                jtj[i * np + j] += row[i] * row[j];
            }
        }
    }
    (jtj, jtr)
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve<T: Scalar>(a: &mut [T], b: &[T], n: usize) -> Option<Vec<T>> {
    let mut b = b.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())?;
        if !(a[pivot * n + col].abs() > T::zero()) {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut xs = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * xs[k];
        }
        xs[row] = acc / a[row * n + row];
    }
    xs.iter().all(|v| v.is_finite()).then_some(xs)
}
