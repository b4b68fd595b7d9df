//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Graphs are built once with the [`ExprGraph`] builder methods and then
//! evaluated against named bindings. Evaluation never mutates the graph, so
//! a single graph can be shared across threads.

mod eval;
mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

use std::collections::HashMap;

use thiserror::Error;

pub use eval::{forward, Bindings, EvalOptions, Trace, SIGMA_FLOOR};
pub use gradcheck::{check_gradient, check_gradient_of, GradientReport, InputGradientError};
pub use graph::{ExprGraph, NodeId, Op};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has no output named `{0}`")]
    UnknownOutput(String),
}

/// Evaluates every marked output in inference mode.
pub fn evaluate(graph: &ExprGraph, bindings: &Bindings) -> Result<HashMap<String, Tensor>, GraphError> {
    evaluate_with(graph, bindings, EvalOptions::default())
}

pub fn evaluate_with(
    graph: &ExprGraph,
    bindings: &Bindings,
    opts: EvalOptions,
) -> Result<HashMap<String, Tensor>, GraphError> {
    let trace = forward(graph, bindings, opts)?;
    Ok(graph
        .outputs()
        .iter()
        .map(|(name, id)| (name.clone(), trace.value(*id).clone()))
        .collect())
}

/// Gradient of the scalar node `output` with respect to every free input.
pub fn backward(
    graph: &ExprGraph,
    bindings: &Bindings,
    output: NodeId,
) -> Result<HashMap<String, Tensor>, GraphError> {
    let names: Vec<String> = graph.input_names().into_iter().map(String::from).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let trace = forward(graph, bindings, EvalOptions::default())?;
    gradients_wrt(graph, &trace, output, &names)
}

/// Gradients of `output` for the named inputs, reusing an existing trace.
pub fn gradients_wrt(
    graph: &ExprGraph,
    trace: &Trace,
    output: NodeId,
    inputs: &[&str],
) -> Result<HashMap<String, Tensor>, GraphError> {
    let ids: Vec<(String, NodeId)> = graph
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(id, op)| match op {
            Op::Input(n) if inputs.contains(&n.as_str()) => Some((n.clone(), id)),
            _ => None,
        })
        .collect();
    let targets: Vec<NodeId> = ids.iter().map(|(_, id)| *id).collect();
    let grads = node_gradients(graph, trace, output, &targets)?;
    Ok(ids
        .into_iter()
        .map(|(name, id)| {
            let g = grads
                .get(&id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(trace.value(id).shape()));
            (name, g)
        })
        .collect())
}

/// Gradients of `output` with respect to arbitrary nodes (inputs or intermediates).
/// Nodes the output does not depend on get no entry.
pub fn node_gradients(
    graph: &ExprGraph,
    trace: &Trace,
    output: NodeId,
    targets: &[NodeId],
) -> Result<HashMap<NodeId, Tensor>, GraphError> {
    let needs = eval::grad_mask(graph, targets);
    eval::backward_trace(graph, trace, output, &needs, targets)
}
