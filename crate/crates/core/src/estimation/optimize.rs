//! Quasi-Newton minimizer (BFGS with backtracking line search) with Newton
//! refinement steps from a finite-difference Hessian of the analytic gradient.
//!
//! Evaluation errors at trial points (non-positive-definite or near-singular
//! covariances) are treated as an infinite objective: the line search backs off.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Euclidean norm of the gradient.
    pub grad_tol: f64,
    /// `|Δf| / max(1, |f|)` of the last accepted step.
    pub rel_tol: f64,
    /// Largest coordinate change allowed in one step.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            max_step: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

/// Central-difference Hessian of a gradient function, symmetrized.
pub fn fd_hessian<G>(grad: &G, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let d = (grad(&xp)? - grad(&xm)?) / (2.0 * step);
        h.set_column(j, &d);
    }
    Ok((&h + h.transpose()) * 0.5)
}

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

fn line_search<F>(eval: &F, cur: &Point, dir: &DVector<f64>) -> Option<Point>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let slope = cur.g.dot(dir);
    if !(slope < 0.0) {
        return None;
    }
    let gnorm = cur.g.norm();
    let mut alpha = 1.0;
    for _ in 0..60 {
        let x = &cur.x + dir * alpha;
        if let Ok((f, g)) = eval(&x) {
            if f.is_finite() && g.iter().all(|v| v.is_finite()) {
                let armijo = f <= cur.f + 1e-4 * alpha * slope;
                // accept roundoff-level increases that still shrink the gradient
                let flat = f <= cur.f + 1e-14 * cur.f.abs().max(1.0) && g.norm() < gnorm;
                if armijo || flat {
                    return Some(Point { x, f, g });
                }
            }
        }
        alpha *= 0.5;
    }
    None
}

fn cap_step(dir: &mut DVector<f64>, max_step: f64) {
    let m = dir.amax();
    if m > max_step {
        *dir *= max_step / m;
    }
}

/// Minimizes `eval`, which returns the objective and its gradient.
pub fn minimize<F>(eval: F, x0: &DVector<f64>, opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (f0, g0) = eval(x0)?;
    let mut cur = Point {
        x: x0.clone(),
        f: f0,
        g: g0,
    };
    let grad_only = |x: &DVector<f64>| eval(x).map(|(_, g)| g);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut rel_change = f64::INFINITY;
    let mut iterations = 0;
    let mut message = String::from("maximum iterations reached");
    let mut converged = false;

    while iterations < opts.max_iter {
        if cur.g.norm() < opts.grad_tol && rel_change < opts.rel_tol {
            converged = true;
            message = "converged".into();
            break;
        }
        iterations += 1;
        let mut dir = -(&h_inv * &cur.g);
        if cur.g.dot(&dir) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            dir = -cur.g.clone();
        }
        cap_step(&mut dir, opts.max_step);
        let next = match line_search(&eval, &cur, &dir) {
            Some(p) => Some(p),
            None => {
                // BFGS direction failed: try a Newton step from the local Hessian.
                let newton = fd_hessian(&grad_only, &cur.x).ok().and_then(|h| {
                    let chol = h.cholesky()?;
                    let mut d = -chol.solve(&cur.g);
                    cap_step(&mut d, opts.max_step);
                    line_search(&eval, &cur, &d).map(|p| (p, chol.inverse()))
                });
                match newton {
                    Some((p, hinv)) => {
                        h_inv = hinv;
                        fresh = false;
                        Some(p)
                    }
                    None if !fresh => {
                        h_inv = DMatrix::identity(n, n);
                        fresh = true;
                        continue;
                    }
                    None => None,
                }
            }
        };
        let Some(next) = next else {
            if cur.g.norm() < opts.grad_tol {
                converged = true;
                message = "converged (no further decrease possible)".into();
            } else {
                message = "line search failed to find a decrease".into();
            }
            break;
        };
        let s = &next.x - &cur.x;
        let y = &next.g - &cur.g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // scale the initial inverse Hessian before the first update
                h_inv *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        rel_change = (cur.f - next.f).abs() / next.f.abs().max(1.0);
        cur = next;
    }
    if !converged && cur.g.norm() < opts.grad_tol && rel_change < opts.rel_tol {
        converged = true;
        message = "converged".into();
    }
    Ok(OptimOutcome {
        x: cur.x,
        f: cur.f,
        grad: cur.g,
        iterations,
        converged,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn rosenbrock(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        Ok((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let out = minimize(rosenbrock, &DVector::from_vec(vec![-1.2, 1.0]), &OptimOptions::default()).unwrap();
        assert!(out.converged, "{}", out.message);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backs_off_from_infeasible_region() {
        // objective undefined for x > 2; minimum at x = 1.5
        let f = |x: &DVector<f64>| {
            if x[0] > 2.0 {
                Err(Error::invalid("outside domain"))
            } else {
                Ok(((x[0] - 1.5).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 1.5)])))
            }
        };
        let out = minimize(f, &DVector::from_vec(vec![-3.0]), &OptimOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn unbounded_objective_does_not_converge() {
        let f = |x: &DVector<f64>| Ok((x[0], DVector::from_vec(vec![1.0])));
        let opts = OptimOptions {
            max_iter: 20,
            ..Default::default()
        };
        let out = minimize(f, &DVector::from_vec(vec![0.0]), &opts).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 20);
    }

    #[test]
    fn fd_hessian_of_quadratic() {
        let grad = |x: &DVector<f64>| Ok(DVector::from_vec(vec![2.0 * x[0] + x[1], x[0] + 6.0 * x[1]]));
        let h = fd_hessian(&grad, &DVector::from_vec(vec![0.3, -0.2])).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 6.0]);
        assert!((h - expected).abs().max() < 1e-8);
    }
}
