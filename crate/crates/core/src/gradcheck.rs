//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::tensor::{ParamSet, Tensor};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Relative error of two vectors, `|a - n|_2 / max(|a|_2, |n|_2, floor)`.
pub fn rel_err_vec(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest per-parameter relative error, the checked elements of each
    /// parameter taken as one vector.
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    /// Largest elementwise relative error with the floor applied, as a diagnostic.
    pub max_elem_rel_err: f64,
    /// `(parameter, element, analytic, numeric)` at the worst element.
    pub worst_elem: Option<(String, usize, f64, f64)>,
}

/// Compares the gradients stored in `analytic` with central differences of
/// `loss` taken around the values in `analytic`. `stride` visits every
/// `stride`-th element of each parameter (1 checks all of them).
pub fn check_params(
    analytic: &ParamSet<f64>,
    step: f64,
    floor: f64,
    stride: usize,
    loss: impl Fn(&ParamSet<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = analytic.clone();
    probe.zero_grad();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: None,
        max_elem_rel_err: 0.0,
        worst_elem: None,
    };
    let names: Vec<String> = analytic.names().map(str::to_string).collect();
    for name in names {
        let shape = analytic.get(&name).expect("listed").shape().to_vec();
        let grad = analytic.grad(&name).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let (mut a_vec, mut n_vec) = (Vec::new(), Vec::new());
        for i in (0..grad.len()).step_by(stride.max(1)) {
            let orig = probe.get(&name).expect("listed").data()[i];
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let e = rel_err(a, numeric, floor);
            if e > report.max_elem_rel_err || report.worst_elem.is_none() {
                report.max_elem_rel_err = e;
                report.worst_elem = Some((name.clone(), i, a, numeric));
            }
            a_vec.push(a);
            n_vec.push(numeric);
        }
        report.checked += a_vec.len();
        let e = rel_err_vec(&a_vec, &n_vec, floor);
        if e > report.max_rel_err || report.worst_param.is_none() {
            report.max_rel_err = e;
            report.worst_param = Some(name);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let g = Tensor::new(&[3], vec![2.0, -4.0, 1.0]).unwrap();
        p.accumulate_grad("a", &g).unwrap();
        let r = check_params(&p, 1e-4, 1e-12, 1, |q| Ok(q.get("a").unwrap().data().iter().map(|v| v * v).sum())).unwrap();
        assert!(r.max_rel_err < 1e-9 && r.checked == 3);
        let mut wrong = p.clone();
        wrong.accumulate_grad("a", &g).unwrap();
        let r = check_params(&wrong, 1e-4, 1e-12, 1, |q| Ok(q.get("a").unwrap().data().iter().map(|v| v * v).sum())).unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
