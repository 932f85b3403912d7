//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which elements of an input to perturb.
#[derive(Debug, Clone)]
pub enum Probe {
    All,
    Indices(Vec<usize>),
    /// Gradient of this input is not checked.
    Skip,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Norm-wise relative error per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_errors: Vec<f64>,
    /// Number of perturbed elements.
    pub probes: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Denominators below this are treated as exact zeros; the absolute error is reported.
const ZERO_NORM: f64 = 1e-12;

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < ZERO_NORM {
        diff
    } else {
        diff / scale
    }
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `eps`, for every input and probe selection.
pub fn check<F>(inputs: &[Tensor<f64>], probes: &[Probe], eps: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    assert_eq!(inputs.len(), probes.len(), "one probe selection per input");
    let graph = Graph::new();
    let vars: Vec<Var<f64>> = inputs
        .iter()
        .zip(probes)
        .map(|(t, p)| graph.leaf(t.clone(), !matches!(p, Probe::Skip)))
        .collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(&loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let vs: Vec<Var<f64>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut total = 0;
    for (i, probe) in probes.iter().enumerate() {
        let indices: Vec<usize> = match probe {
            Probe::All => (0..inputs[i].numel()).collect(),
            Probe::Indices(ix) => ix.clone(),
            Probe::Skip => continue,
        };
        let analytic_full = grads.get_or_zeros(&vars[i]);
        let mut analytic = Vec::with_capacity(indices.len());
        let mut numeric = Vec::with_capacity(indices.len());
        for &j in &indices {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
            analytic.push(analytic_full.data()[j]);
        }
        total += indices.len();
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradcheckReport {
        rel_errors,
        probes: total,
    })
}
