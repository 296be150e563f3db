//! Central finite-difference verification of tape gradients.
//!
//! The checker perturbs one parameter coordinate at a time and rebuilds the
//! forward pass from scratch, so it exercises a completely different path
//! than `Graph::backward`. It is meant for small probe graphs, at most a few
//! thousand parameter values, with a sampled subset of coordinates per
//! tensor.

use super::params::ParamSet;
use super::scalar::Scalar;
use super::{graph::Graph, graph::NodeId, NumericsError};

/// Step and sampling controls for a finite-difference run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOpts {
    /// Central-difference half step.
    pub step: f64,
    /// Upper bound on coordinates probed per parameter tensor.
    pub max_coords: usize,
    /// Absolute floor inside the relative-error denominator, guarding
    /// near-zero gradient pairs.
    pub rel_floor: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            step: 1e-5,
            max_coords: 64,
            rel_floor: 1e-6,
        }
    }
}

/// Worst observed disagreement between tape and finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_param: String,
    pub worst_coord: usize,
    pub worst_tape: f64,
    pub worst_fd: f64,
}

/// Compares tape gradients of `names` against central finite differences of
/// the loss built by `build`. The builder must be a pure function of the
/// parameter values.
pub fn check_params<S, F>(
    params: &mut ParamSet<S>,
    names: &[&str],
    build: F,
    opts: GradCheckOpts,
) -> Result<GradCheckReport, NumericsError>
where
    S: Scalar,
    F: Fn(&ParamSet<S>) -> Result<(Graph<S>, NodeId), NumericsError>,
{
    let (mut graph, loss) = build(params)?;
    graph.backward(loss)?;
    let grads = graph.param_grads();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_param: String::new(),
        worst_coord: 0,
        worst_tape: 0.0,
        worst_fd: 0.0,
    };

    for &name in names {
        let grad = grads
            .get(name)
            .ok_or_else(|| NumericsError::MissingGradient {
                name: name.to_string(),
            })?
            .clone();
        let len = grad.len();
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            (0..opts.max_coords).map(|i| i * len / opts.max_coords).collect()
        };
        for &c in &coords {
            let original = params.value(name)?.data()[c];
            let base = original.real();

            params.value_mut(name)?.data_mut()[c] = S::of(base + opts.step);
            let (plus_graph, plus_loss) = build(params)?;
            let plus = plus_graph.value(plus_loss).item().real();

            params.value_mut(name)?.data_mut()[c] = S::of(base - opts.step);
            let (minus_graph, minus_loss) = build(params)?;
            let minus = minus_graph.value(minus_loss).item().real();

            params.value_mut(name)?.data_mut()[c] = original;

            let fd = (plus - minus) / (2.0 * opts.step);
            let tape = grad.data()[c].real();
            let rel = (tape - fd).abs() / tape.abs().max(fd.abs()).max(opts.rel_floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_coord = c;
                report.worst_tape = tape;
                report.worst_fd = fd;
            }
        }
    }
    Ok(report)
}
