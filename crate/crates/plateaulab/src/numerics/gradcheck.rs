//! Central-difference validation of the reverse sweep.

use ndarray::ArrayD;

use crate::error::Result;
use crate::numerics::{NodeId, Tape};

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked elements.
    pub max_abs_err: f64,
    /// `(param index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Number of elements compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients against central differences.
///
/// `build` must construct the same scalar function of the given leaf tensors
/// each time it is called; it is re-invoked twice per checked element with a
/// perturbed copy of the parameters, so it should be deterministic.
pub fn grad_check<F>(params: &[ArrayD<f64>], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[ArrayD<f64>]| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.input(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let orig = work[pi].as_slice().unwrap()[ei];
            work[pi].as_slice_mut().unwrap()[ei] = orig + step;
            let (t_plus, _, l_plus) = eval(&work)?;
            let f_plus = t_plus.value(l_plus).iter().next().copied().unwrap();
            work[pi].as_slice_mut().unwrap()[ei] = orig - step;
            let (t_minus, _, l_minus) = eval(&work)?;
            let f_minus = t_minus.value(l_minus).iter().next().copied().unwrap();
            work[pi].as_slice_mut().unwrap()[ei] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi].as_slice().unwrap()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if abs > report.max_abs_err {
                report.max_abs_err = abs;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
