//! Derivative-free simplex minimization.
//!
//! The simulated-moments objective is piecewise constant in the parameters
//! (choices are discrete lists), so gradient methods are useless; Nelder-Mead
//! with the Gao-Han adaptive coefficients handles the moderate dimensions
//! here. Restarts re-initialize the simplex around the incumbent with a
//! shrunken step.

#[derive(Clone, Debug)]
pub struct NelderMeadOptions {
    /// Total objective-evaluation budget across restarts.
    pub max_evals: usize,
    /// Stop when the simplex function spread falls below this.
    pub f_tol: f64,
    /// Initial simplex step per coordinate.
    pub init_step: f64,
    /// Number of restarts after the first convergence (0 = single run).
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_evals: 2000, f_tol: 1e-10, init_step: 0.5, restarts: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// False when the evaluation budget ran out before the spread tolerance.
    pub converged: bool,
    /// (evaluation count, best objective so far), one point per accepted step.
    pub trace: Vec<(usize, f64)>,
}

struct Budget<'a, F> {
    f: F,
    used: &'a mut usize,
    max: usize,
}

impl<F: FnMut(&[f64]) -> f64> Budget<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        if *self.used >= self.max {
            return None;
        }
        *self.used += 1;
        Some((self.f)(x))
    }
}

/// Minimize `f` starting from `x0`.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> OptimResult {
    let mut used = 0usize;
    let mut trace = Vec::new();
    let mut best_x = x0.to_vec();
    let mut best_f = f(&best_x);
    used += 1;
    trace.push((used, best_f));
    let mut converged = false;

    let mut step = opts.init_step;
    for _ in 0..=opts.restarts {
        let mut budget = Budget { f: &mut f, used: &mut used, max: opts.max_evals };
        match run_simplex(&mut budget, &best_x, step, opts.f_tol, &mut trace) {
            Some((x, fx, done)) => {
                if fx < best_f {
                    best_f = fx;
                    best_x = x;
                }
                converged = done;
                if !done {
                    break;
                }
            }
            None => break,
        }
        step *= 0.5;
    }

    OptimResult { x: best_x, f: best_f, evals: used, converged, trace }
}

fn run_simplex<F: FnMut(&[f64]) -> f64>(
    budget: &mut Budget<'_, F>,
    x0: &[f64],
    step: f64,
    f_tol: f64,
    trace: &mut Vec<(usize, f64)>,
) -> Option<(Vec<f64>, f64, bool)> {
    let n = x0.len();
    if n == 0 {
        let fx = budget.eval(x0)?;
        return Some((x0.to_vec(), fx, true));
    }
    // Gao-Han adaptive coefficients.
    let nf = n as f64;
    let alpha = 1.0;
    let beta = 1.0 + 2.0 / nf;
    let gamma = 0.75 - 1.0 / (2.0 * nf);
    let delta = 1.0 - 1.0 / nf;

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = budget.eval(x0)?;
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i] == 0.0 { step } else { step * (1.0 + x[i].abs()) };
        let fx = budget.eval(&x)?;
        simplex.push((x, fx));
    }

    loop {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let spread = simplex[n].1 - simplex[0].1;
        if spread.abs() <= f_tol {
            let (x, fx) = simplex.swap_remove(0);
            return Some((x, fx, true));
        }

        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|(x, _)| x[d]).sum::<f64>() / nf)
            .collect();
        let worst = simplex[n].clone();
        let at = |coef: f64| -> Vec<f64> {
            (0..n).map(|d| centroid[d] + coef * (centroid[d] - worst.0[d])).collect()
        };

        let xr = at(alpha);
        let fr = match budget.eval(&xr) {
            Some(v) => v,
            None => {
                let (x, fx) = simplex.swap_remove(0);
                return Some((x, fx, false));
            }
        };

        let replacement = if fr < simplex[0].1 {
            let xe = at(alpha * beta);
            match budget.eval(&xe) {
                Some(fe) if fe < fr => Some((xe, fe)),
                Some(_) | None => Some((xr, fr)),
            }
        } else if fr < simplex[n - 1].1 {
            Some((xr, fr))
        } else {
            let (xc, inside) = if fr < worst.1 { (at(alpha * gamma), false) } else { (at(-gamma), true) };
            match budget.eval(&xc) {
                Some(fc) if fc < if inside { worst.1 } else { fr } => Some((xc, fc)),
                Some(_) => None,
                None => {
                    let (x, fx) = simplex.swap_remove(0);
                    return Some((x, fx, false));
                }
            }
        };

        match replacement {
            Some((x, fx)) => {
                if fx < simplex[0].1 {
                    trace.push((*budget.used, fx));
                }
                simplex[n] = (x, fx);
            }
            None => {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n)
                        .map(|d| best[d] + delta * (item.0[d] - best[d]))
                        .collect();
                    let fx = match budget.eval(&x) {
                        Some(v) => v,
                        None => {
                            simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                            let (x, fx) = simplex.swap_remove(0);
                            return Some((x, fx, false));
                        }
                    };
                    *item = (x, fx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_sphere() {
        let res = nelder_mead(
            |x| x.iter().map(|v| v * v).sum(),
            &[1.0, -2.0, 3.0],
            &NelderMeadOptions::default(),
        );
        assert!(res.converged);
        assert!(res.f < 1e-8, "f = {}", res.f);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| {
            (0..x.len() - 1)
                .map(|i| 100.0 * (x[i + 1] - x[i] * x[i]).powi(2) + (1.0 - x[i]).powi(2))
                .sum::<f64>()
        };
        let opts = NelderMeadOptions { max_evals: 20_000, restarts: 4, ..Default::default() };
        let res = nelder_mead(rosen, &[-1.2, 1.0], &opts);
        assert!(res.f < 1e-6, "f = {}", res.f);
        assert!((res.x[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn budget_zero_returns_start() {
        let opts = NelderMeadOptions { max_evals: 1, ..Default::default() };
        let res = nelder_mead(|x| x[0] * x[0], &[3.0], &opts);
        assert_eq!(res.x, vec![3.0]);
        assert_eq!(res.evals, 1);
        assert!(!res.converged);
    }

    #[test]
    fn trace_is_monotone() {
        let res = nelder_mead(
            |x| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2),
            &[0.0, 0.0],
            &NelderMeadOptions::default(),
        );
        for w in res.trace.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }
}
