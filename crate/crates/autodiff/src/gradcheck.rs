//! Central finite-difference oracle for tape gradients (64-bit only).
//!
//! Each coordinate is probed at steps `eps` and `eps / 2`. For a smooth
//! function the one-sided slope gap at the full step is twice the gap at the
//! half step (both are curvature); when that relation breaks, a
//! non-differentiable point lies inside the probe window and the coordinate
//! is reported as a kink instead of being scored. Coordinates whose
//! derivative is below what the step can resolve in `f64` are reported as
//! unresolved.

use crate::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)` over scored coordinates.
    pub max_rel_err: f64,
    /// Coordinate (flat index, or `name[index]` for parameters) of the worst error.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates excluded because a kink lies within the probe window.
    pub kinks: Vec<String>,
    /// Coordinates excluded because the derivative is below finite-difference resolution.
    pub unresolved: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.kinks.extend(other.kinks);
        self.unresolved += other.unresolved;
    }
}

enum Probe {
    Scored(f64),
    Kink,
    Unresolved,
}

/// Scores one coordinate given `f` at offsets `[-h, -h/2, 0, h/2, h]`.
fn probe(analytic: f64, f: [f64; 5], eps: f64) -> Probe {
    let [fm, fmh, f0, fph, fp] = f;
    let scale = f.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let noise = 64.0 * f64::EPSILON * scale / eps;

    let (dp, dm) = ((fp - f0) / eps, (f0 - fm) / eps);
    let half = eps / 2.0;
    let (dph, dmh) = ((fph - f0) / half, (f0 - fmh) / half);
    let slope = dp.abs().max(dm.abs());
    if ((dp - dm) - 2.0 * (dph - dmh)).abs() > 1e-3 * slope + noise {
        return Probe::Kink;
    }
    let central = (fp - fm) / (2.0 * eps);
    let resolution = 1e4 * f64::EPSILON * scale / eps;
    let mag = analytic.abs().max(central.abs());
    if mag < resolution {
        return Probe::Unresolved;
    }
    Probe::Scored((analytic - central).abs() / mag.max(1e-12))
}

fn check_step(eps: f64) -> Result<(), AutodiffError> {
    if (1e-6..=1e-2).contains(&eps) {
        Ok(())
    } else {
        Err(AutodiffError::InvalidStep(eps))
    }
}

fn finite(v: f64) -> Result<f64, AutodiffError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AutodiffError::NumericFault { op: "grad_check" })
    }
}

/// Checks the tape gradient of scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    check_step(eps)?;
    let g = Graph::new();
    let v = g.variable(x.clone());
    let y = f(&g, v);
    let grads = g.backward(y)?;
    let analytic = grads
        .of(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |t: &Tensor<f64>| -> Result<f64, AutodiffError> {
        let g = Graph::new();
        let out = f(&g, g.variable(t.clone()));
        if let Some(fault) = g.fault() {
            return Err(fault);
        }
        finite(out.item())
    };
    let mut report = GradCheckReport::default();
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let base = x.data()[i];
        let mut fs = [0.0; 5];
        for (slot, off) in fs.iter_mut().zip([-1.0, -0.5, 0.0, 0.5, 1.0]) {
            xp.data_mut()[i] = base + off * eps;
            *slot = eval(&xp)?;
        }
        xp.data_mut()[i] = base;
        report.merge(score(analytic.data()[i], fs, eps, || i.to_string()));
    }
    Ok(report)
}

fn score(analytic: f64, fs: [f64; 5], eps: f64, label: impl Fn() -> String) -> GradCheckReport {
    let mut r = GradCheckReport::default();
    match probe(analytic, fs, eps) {
        Probe::Scored(err) => {
            r.checked = 1;
            r.max_rel_err = err;
            r.worst = Some(label());
        }
        Probe::Kink => r.kinks.push(label()),
        Probe::Unresolved => r.unresolved = 1,
    }
    r
}

/// Checks the tape gradient of `f` w.r.t. every parameter scalar in `store`
/// (or those accepted by `select`).
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    eps: f64,
    select: impl Fn(ParamId, &str) -> bool,
) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Var<'g, f64>,
{
    check_step(eps)?;
    let g = Graph::new();
    let y = f(&g, store);
    let grads = g.backward(y)?;

    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64, AutodiffError> {
        let g = Graph::new();
        let out = f(&g, s);
        if let Some(fault) = g.fault() {
            return Err(fault);
        }
        finite(out.item())
    };
    let mut report = GradCheckReport::default();
    for (id, name, value) in store.iter() {
        if !select(id, name) {
            continue;
        }
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        for i in 0..value.numel() {
            let base = value.data()[i];
            let mut fs = [0.0; 5];
            for (slot, off) in fs.iter_mut().zip([-1.0, -0.5, 0.0, 0.5, 1.0]) {
                work.get_mut(id).data_mut()[i] = base + off * eps;
                *slot = eval(&work)?;
            }
            work.get_mut(id).data_mut()[i] = base;
            report.merge(score(analytic.data()[i], fs, eps, || format!("{name}[{i}]")));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let x = Tensor::from_f64([1], &[3.0]);
        let r = grad_check(|_, v| (v * v).sum(), &x, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn l1_kink_is_excluded() {
        let x = Tensor::from_f64([3], &[0.7, 0.0, -1.2]);
        let r = grad_check(|_, v| v.l1_norm(), &x, 1e-6).unwrap();
        assert_eq!(r.kinks, vec!["1".to_string()]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detach hides the dependence, so the tape reports half the slope.
        let x = Tensor::from_f64([2], &[1.0, 2.0]);
        let r = grad_check(|_, v| (v * v.detach()).sum(), &x, 1e-6).unwrap();
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::from_f64([1], &[1.0]);
        assert!(matches!(
            grad_check(|_, v| v.sum(), &x, 0.5),
            Err(AutodiffError::InvalidStep(_))
        ));
    }
}
