use super::Tensor;

/// Index of a node inside an [`ExprGraph`].
pub type NodeId = usize;

/// Operation recorded at a graph node.
///
/// Every input id refers to an earlier node, so insertion order is a valid
/// topological order.
#[derive(Clone, Debug)]
pub enum Op {
    /// Free input resolved from the bindings by name.
    Input(String),
    Const(Tensor),
    /// Elementwise sum. Either operand may hold a single value, which is broadcast.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    /// `[n, k] x [k, m] -> [n, m]`.
    MatMul(NodeId, NodeId),
    /// Adds a vector along `axis` of the input (bias of dense and conv layers).
    AddBias { x: NodeId, bias: NodeId, axis: usize },
    /// `x: [N, C, H, W]`, `kernel: [O, C, kh, kw]`, stride 1, zero padding.
    Conv2d { x: NodeId, kernel: NodeId, padding: usize },
    Relu(NodeId),
    Abs(NodeId),
    /// `x^exponent`; inputs are expected to be nonnegative.
    Pow(NodeId, f64),
    /// Sum over the listed axes, which are removed from the shape.
    Sum { x: NodeId, axes: Vec<usize> },
    Mean { x: NodeId, axes: Vec<usize> },
    /// Sum of every element, producing a scalar.
    SumAll(NodeId),
    /// `[N, C, H, W] -> [N, C]`.
    GlobalAvgPool(NodeId),
    /// Non-overlapping 2x2 average pooling; odd trailing rows/columns are dropped.
    AvgPool2(NodeId),
    /// Inverted dropout; identity outside train mode.
    Dropout { x: NodeId, prob: f64, stream: u64 },
    /// Per-row negative log-likelihood of `softmax(logits)`: `[N, K] -> [N]`.
    /// `labels` holds class indices as real values and receives no gradient.
    SoftmaxNll { logits: NodeId, labels: NodeId },
    /// Standardizes every vector along the last axis to mean 0 and
    /// population standard deviation 1.
    Standardize(NodeId),
    Reshape { x: NodeId, shape: Vec<usize> },
    /// Gathers rows of the leading axis.
    SelectRows { x: NodeId, rows: Vec<usize> },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input(_) | Const(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            AddBias { x, bias, .. } => vec![*x, *bias],
            Conv2d { x, kernel, .. } => vec![*x, *kernel],
            SoftmaxNll { logits, labels } => vec![*logits, *labels],
            ScalarMul(x, _) | Relu(x) | Abs(x) | Pow(x, _) | SumAll(x) | GlobalAvgPool(x)
            | AvgPool2(x) | Standardize(x) => vec![*x],
            Sum { x, .. }
            | Mean { x, .. }
            | Dropout { x, .. }
            | Reshape { x, .. }
            | SelectRows { x, .. } => vec![*x],
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input(_) => "input",
            Const(_) => "const",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            ScalarMul(..) => "scalar_mul",
            MatMul(..) => "matmul",
            AddBias { .. } => "add_bias",
            Conv2d { .. } => "conv2d",
            Relu(_) => "relu",
            Abs(_) => "abs",
            Pow(..) => "pow",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            SumAll(_) => "sum_all",
            GlobalAvgPool(_) => "global_avg_pool",
            AvgPool2(_) => "avg_pool2",
            Dropout { .. } => "dropout",
            SoftmaxNll { .. } => "softmax_nll",
            Standardize(_) => "standardize",
            Reshape { .. } => "reshape",
            SelectRows { .. } => "select_rows",
        }
    }
}

/// Differentiable computation graph built once and evaluated against bindings.
#[derive(Clone, Debug, Default)]
pub struct ExprGraph {
    nodes: Vec<Op>,
    outputs: Vec<(String, NodeId)>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Names of all free inputs in insertion order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Input(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        assert!(id < self.nodes.len(), "output refers to unknown node {id}");
        self.outputs.push((name.into(), id));
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(
                i < self.nodes.len(),
                "{} refers to node {i} which does not exist yet",
                op.name()
            );
        }
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    /// Returns the existing input node with this name, or creates it.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(id) = self
            .nodes
            .iter()
            .position(|op| matches!(op, Op::Input(n) if *n == name))
        {
            return id;
        }
        self.push(Op::Input(name))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::ScalarMul(x, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId, axis: usize) -> NodeId {
        self.push(Op::AddBias { x, bias, axis })
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, padding: usize) -> NodeId {
        self.push(Op::Conv2d { x, kernel, padding })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs(x))
    }

    pub fn pow(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(x, exponent))
    }

    pub fn sum(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        self.push(Op::Sum {
            x,
            axes: axes.to_vec(),
        })
    }

    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        self.push(Op::Mean {
            x,
            axes: axes.to_vec(),
        })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::AvgPool2(x))
    }

    pub fn dropout(&mut self, x: NodeId, prob: f64, stream: u64) -> NodeId {
        self.push(Op::Dropout { x, prob, stream })
    }

    pub fn softmax_nll(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxNll { logits, labels })
    }

    pub fn standardize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Standardize(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        self.push(Op::SelectRows {
            x,
            rows: rows.to_vec(),
        })
    }
}
