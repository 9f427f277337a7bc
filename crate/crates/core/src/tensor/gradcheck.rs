//! Central-difference gradient checking in `f64`.

use super::{Graph, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic - fd| / max(|analytic|, |fd|, floor)` over checked
    /// components, with `floor = max(1e-8, 1e-6 * max_j |analytic_j|)` so that
    /// components many orders below the gradient scale are judged against
    /// finite-difference round-off rather than their own size.
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// Analytic and finite-difference values at `worst_index`.
    pub worst_pair: (f64, f64),
    /// Components sitting on a derivative discontinuity. They were nudged
    /// away; any still listed after nudging are excluded from the error.
    pub kinks: Vec<usize>,
    /// False when the function or a probe produced a non-finite value.
    pub finite: bool,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.finite && self.max_rel_err < tol
    }
}

const KINK_TOL: f64 = 0.05;
const MAX_NUDGE_ROUNDS: usize = 3;

fn eval<F>(f: &F, x: &Tensor<f64>) -> f64
where
    F: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let v = f(g.constant(x.clone()));
    let out = v.value();
    assert_eq!(out.numel(), 1, "grad_check function must return a scalar");
    out.item()
}

fn eval_grad<F>(f: &F, x: &Tensor<f64>) -> (f64, Tensor<f64>)
where
    F: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(xv);
    let value = y.item();
    if !value.is_finite() {
        return (value, Tensor::zeros(x.shape()));
    }
    g.backward(y);
    let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    (value, grad)
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> GradCheckReport
where
    F: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    let mut x = x.clone();
    let mut kinks: Vec<usize> = Vec::new();
    let n = x.numel();
    for round in 0..=MAX_NUDGE_ROUNDS {
        let (f0, analytic) = eval_grad(&f, &x);
        if !f0.is_finite() || !analytic.is_finite() {
            return failed(kinks);
        }
        let mut fd = vec![0.0; n];
        let mut new_kinks = Vec::new();
        for i in 0..n {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let fp = eval(&f, &x);
            x.data_mut()[i] = orig - eps;
            let fm = eval(&f, &x);
            x.data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return failed(kinks);
            }
            fd[i] = (fp - fm) / (2.0 * eps);
            let right = (fp - f0) / eps;
            let left = (f0 - fm) / eps;
            if (right - left).abs() > KINK_TOL * right.abs().max(left.abs()).max(1.0) {
                new_kinks.push(i);
            }
        }
        if new_kinks.is_empty() || round == MAX_NUDGE_ROUNDS {
            for &i in &new_kinks {
                if !kinks.contains(&i) {
                    kinks.push(i);
                }
            }
            let mut report = GradCheckReport {
                max_rel_err: 0.0,
                worst_index: None,
                worst_pair: (0.0, 0.0),
                kinks: kinks.clone(),
                finite: true,
                checked: 0,
            };
            let scale = analytic.data().iter().fold(0.0f64, |m, a| m.max(a.abs()));
            let floor = (1e-6 * scale).max(1e-8);
            for i in 0..n {
                if new_kinks.contains(&i) {
                    continue;
                }
                let a = analytic.data()[i];
                let denom = a.abs().max(fd[i].abs()).max(floor);
                let err = (a - fd[i]).abs() / denom;
                report.checked += 1;
                if report.worst_index.is_none() || err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_index = Some(i);
                    report.worst_pair = (a, fd[i]);
                }
            }
            return report;
        }
        for &i in &new_kinks {
            if !kinks.contains(&i) {
                kinks.push(i);
            }
            x.data_mut()[i] += 10.0 * eps * (1.0 + x.data()[i].abs());
        }
    }
    unreachable!("loop returns on its final round")
}

fn failed(kinks: Vec<usize>) -> GradCheckReport {
    GradCheckReport {
        max_rel_err: f64::INFINITY,
        worst_index: None,
        worst_pair: (f64::NAN, f64::NAN),
        kinks,
        finite: false,
        checked: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]);
        let r = grad_check(|v| v.square().sum(), &x, 1e-4);
        assert!(r.passed(1e-8), "{r:?}");
    }

    #[test]
    fn relu_kink_is_flagged_and_nudged() {
        let x = Tensor::from_f64(&[3], &[0.0, 0.5, -0.7]);
        let r = grad_check(|v| v.relu().sum(), &x, 1e-4);
        assert_eq!(r.kinks, vec![0]);
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn non_finite_output_is_a_failure_not_a_crash() {
        let x = Tensor::from_f64(&[2], &[-1.0, 2.0]);
        let r = grad_check(|v| v.log().sum(), &x, 1e-4);
        assert!(!r.finite);
        assert!(!r.passed(1.0));
    }
}
