//! Central finite-difference verification of reverse-mode gradients.

use super::eval::{forward, Bindings, EvalOptions, Trace};
use super::graph::{ExprGraph, NodeId, Op};
use super::{gradients_wrt, GraphError};

/// Coordinates whose perturbation moves a relu/abs argument to within this
/// distance of zero are treated as nondifferentiable and skipped.
const KINK_TOLERANCE: f64 = 1e-6;

/// Entries smaller than this fraction of the largest analytic gradient of the
/// same input are judged against that fraction instead of their own size.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct InputGradientError {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub compared: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub inputs: Vec<InputGradientError>,
    pub step: f64,
}

impl GradientReport {
    pub fn max_abs_error(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, i| m.max(i.max_abs_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, i| m.max(i.max_rel_error))
    }
}

fn kink_nodes(graph: &ExprGraph) -> Vec<NodeId> {
    graph
        .nodes()
        .iter()
        .filter_map(|op| match op {
            Op::Relu(x) | Op::Abs(x) => Some(*x),
            _ => None,
        })
        .collect()
}

/// True when some relu/abs argument sits near zero or changes sign between
/// the two perturbed evaluations.
fn crosses_kink(kinks: &[NodeId], base: &Trace, plus: &Trace, minus: &Trace) -> bool {
    kinks.iter().any(|&k| {
        let (b, p, m) = (base.value(k).data(), plus.value(k).data(), minus.value(k).data());
        b.iter().zip(p).zip(m).any(|((&b, &p), &m)| {
            p != m
                && (b.abs() < KINK_TOLERANCE
                || p.abs() < KINK_TOLERANCE
                || m.abs() < KINK_TOLERANCE
                    || (p > 0.0) != (m > 0.0))
        })
    })
}

/// Compares `backward` against central differences for every free input of
/// `graph`, differentiating the first marked output (which must be scalar).
pub fn check_gradient(
    graph: &ExprGraph,
    bindings: &Bindings,
    step: f64,
) -> Result<GradientReport, GraphError> {
    let output = graph
        .outputs()
        .first()
        .map(|(_, id)| *id)
        .ok_or_else(|| GraphError::UnknownOutput("<first>".into()))?;
    check_gradient_of(graph, bindings, output, step, EvalOptions::default())
}

/// As [`check_gradient`] but for an explicit output node and evaluation mode.
/// Inputs whose values are not real-valued parameters (labels) can be left
/// out by binding them and listing only `wrt`.
pub fn check_gradient_of(
    graph: &ExprGraph,
    bindings: &Bindings,
    output: NodeId,
    step: f64,
    opts: EvalOptions,
) -> Result<GradientReport, GraphError> {
    let label_inputs: Vec<NodeId> = graph
        .nodes()
        .iter()
        .filter_map(|op| match op {
            Op::SoftmaxNll { labels, .. } => Some(*labels),
            _ => None,
        })
        .collect();
    let wrt: Vec<String> = graph
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(id, op)| match op {
            Op::Input(n) if !label_inputs.contains(&id) => Some(n.clone()),
            _ => None,
        })
        .collect();
    let wrt_refs: Vec<&str> = wrt.iter().map(String::as_str).collect();
    let base = forward(graph, bindings, opts)?;
    let analytic = gradients_wrt(graph, &base, output, &wrt_refs)?;
    let kinks = kink_nodes(graph);

    let mut inputs = Vec::with_capacity(wrt.len());
    for name in &wrt {
        let grad = &analytic[name];
        let floor = RELATIVE_FLOOR * grad.max_abs();
        let mut probe = bindings.clone();
        let mut entry = InputGradientError {
            name: name.clone(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            compared: 0,
            excluded: 0,
        };
        for i in 0..grad.len() {
            let original = bindings[name].data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + step;
            let plus = forward(graph, &probe, opts)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - step;
            let minus = forward(graph, &probe, opts)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            if crosses_kink(&kinks, &base, &plus, &minus) {
                entry.excluded += 1;
                continue;
            }
            let numeric = (plus.value(output).data()[0] - minus.value(output).data()[0]) / (2.0 * step);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = if denom > 0.0 { abs / denom } else { 0.0 };
            entry.max_abs_error = entry.max_abs_error.max(abs);
            entry.max_rel_error = entry.max_rel_error.max(rel);
            entry.compared += 1;
        }
        inputs.push(entry);
    }
    Ok(GradientReport { inputs, step })
}
