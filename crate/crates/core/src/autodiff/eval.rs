use std::collections::HashMap;

use rand::Rng;

use super::graph::{ExprGraph, NodeId, Op};
use super::kernels::{col2im, gemm, im2col, reduction_map, ConvGeom, MatRef};
use super::{GraphError, Tensor};
use crate::rng;

/// Standard deviations below this standardize to the zero vector.
pub const SIGMA_FLOOR: f64 = 1e-12;

pub type Bindings = HashMap<String, Tensor>;

/// Evaluation mode. `train` enables dropout masks drawn from `seed`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub train: bool,
    pub seed: u64,
}

impl EvalOptions {
    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Every node value of one forward pass plus per-node auxiliaries
/// (dropout masks, row standard deviations).
#[derive(Clone, Debug)]
pub struct Trace {
    values: Vec<Tensor>,
    aux: Vec<Vec<f64>>,
}

impl Trace {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

fn shape_err(id: NodeId, op: &Op, msg: impl std::fmt::Display) -> GraphError {
    GraphError::Shape(format!("node {id} ({}): {msg}", op.name()))
}

fn broadcast_shape(id: NodeId, op: &Op, a: &Tensor, b: &Tensor) -> Result<Vec<usize>, GraphError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(shape_err(
            id,
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = match (ad.len() == n, bd.len() == n) {
        (true, true) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        (false, true) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        (false, false) => vec![f(ad[0], bd[0]); n],
    };
    Tensor::from_parts(shape, data)
}

fn check_axes(id: NodeId, op: &Op, shape: &[usize], axes: &[usize]) -> Result<(), GraphError> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(shape_err(id, op, format!("bad axes {axes:?} for shape {shape:?}")));
        }
    }
    Ok(())
}

fn rank4(id: NodeId, op: &Op, t: &Tensor) -> Result<[usize; 4], GraphError> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err(id, op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

fn label_index(v: f64, classes: usize) -> Option<usize> {
    (v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes).then_some(v as usize)
}

/// Runs the graph forward and keeps every intermediate value.
pub fn forward(graph: &ExprGraph, bindings: &Bindings, opts: EvalOptions) -> Result<Trace, GraphError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    let mut aux: Vec<Vec<f64>> = Vec::with_capacity(graph.len());
    for (id, op) in graph.nodes().iter().enumerate() {
        let mut extra = Vec::new();
        let v = |i: NodeId| &values[i];
        let out = match op {
            Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| GraphError::Unbound(name.clone()))?,
            Op::Const(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                let shape = broadcast_shape(id, op, a, b)?;
                match op {
                    Op::Add(..) => zip_broadcast(a, b, shape, |x, y| x + y),
                    Op::Sub(..) => zip_broadcast(a, b, shape, |x, y| x - y),
                    _ => zip_broadcast(a, b, shape, |x, y| x * y),
                }
            }
            Op::ScalarMul(x, c) => v(*x).map(|e| e * c),
            Op::MatMul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                let (&[n, k], &[k2, m]) = (a.shape(), b.shape()) else {
                    return Err(shape_err(id, op, "matmul needs rank-2 operands"));
                };
                if k != k2 {
                    return Err(shape_err(id, op, format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let mut out = vec![0.0; n * m];
                gemm(MatRef::new(a.data(), n, k), MatRef::new(b.data(), k, m), 0.0, &mut out);
                Tensor::from_parts(vec![n, m], out)
            }
            Op::AddBias { x, bias, axis } => {
                let (x, b) = (v(*x), v(*bias));
                if *axis >= x.rank() || b.len() != x.shape()[*axis] {
                    return Err(shape_err(
                        id,
                        op,
                        format!("bias of {} along axis {axis} of {:?}", b.len(), x.shape()),
                    ));
                }
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let c = x.shape()[*axis];
                let mut out = x.clone();
                for (i, e) in out.data_mut().iter_mut().enumerate() {
                    *e += b.data()[(i / inner) % c];
                }
                out
            }
            Op::Conv2d { x, kernel, padding } => {
                let (x, k) = (v(*x), v(*kernel));
                let [n, c, h, w] = rank4(id, op, x)?;
                let [o, kc, kh, kw] = rank4(id, op, k)?;
                if kc != c || h + 2 * padding < kh || w + 2 * padding < kw {
                    return Err(shape_err(
                        id,
                        op,
                        format!("kernel {:?} against input {:?}", k.shape(), x.shape()),
                    ));
                }
                let g = ConvGeom {
                    channels: c,
                    height: h,
                    width: w,
                    kh,
                    kw,
                    padding: *padding,
                };
                let (oh, ow) = (g.out_h(), g.out_w());
                let mut out = vec![0.0; n * o * oh * ow];
                let mut cols = vec![0.0; g.patch_len() * oh * ow];
                let kmat = MatRef::new(k.data(), o, g.patch_len());
                for s in 0..n {
                    im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], &g, &mut cols);
                    gemm(
                        kmat,
                        MatRef::new(&cols, g.patch_len(), oh * ow),
                        0.0,
                        &mut out[s * o * oh * ow..(s + 1) * o * oh * ow],
                    );
                }
                Tensor::from_parts(vec![n, o, oh, ow], out)
            }
            Op::Relu(x) => v(*x).map(|e| e.max(0.0)),
            Op::Abs(x) => v(*x).map(f64::abs),
            Op::Pow(x, e) => v(*x).map(|b| b.powf(*e)),
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let x = v(*x);
                check_axes(id, op, x.shape(), axes)?;
                let (map, shape) = reduction_map(x.shape(), axes);
                let mut out = vec![0.0; shape.iter().product()];
                for (&dst, &e) in map.iter().zip(x.data()) {
                    out[dst] += e;
                }
                if matches!(op, Op::Mean { .. }) {
                    let count = (x.len() / out.len()) as f64;
                    out.iter_mut().for_each(|e| *e /= count);
                }
                Tensor::from_parts(shape, out)
            }
            Op::SumAll(x) => Tensor::scalar(v(*x).data().iter().sum()),
            Op::GlobalAvgPool(x) => {
                let x = v(*x);
                let [n, c, h, w] = rank4(id, op, x)?;
                let area = (h * w) as f64;
                let data = x
                    .data()
                    .chunks(h * w)
                    .map(|plane| plane.iter().sum::<f64>() / area)
                    .collect();
                Tensor::from_parts(vec![n, c], data)
            }
            Op::AvgPool2(x) => {
                let x = v(*x);
                let [n, c, h, w] = rank4(id, op, x)?;
                if h < 2 || w < 2 {
                    return Err(shape_err(id, op, format!("cannot pool {:?}", x.shape())));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; n * c * oh * ow];
                for (p, plane) in x.data().chunks(h * w).enumerate() {
                    let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let i = 2 * y * w + 2 * xx;
                            dst[y * ow + xx] =
                                0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
                        }
                    }
                }
                Tensor::from_parts(vec![n, c, oh, ow], out)
            }
            Op::Dropout { x, prob, stream } => {
                let x = v(*x);
                if !(0.0..1.0).contains(prob) {
                    return Err(shape_err(id, op, format!("dropout probability {prob}")));
                }
                if opts.train && *prob > 0.0 {
                    let mut r = rng::stream(opts.seed, *stream);
                    let keep = 1.0 - prob;
                    extra = (0..x.len())
                        .map(|_| if r.gen::<f64>() < *prob { 0.0 } else { 1.0 / keep })
                        .collect();
                    let data = x.data().iter().zip(&extra).map(|(a, m)| a * m).collect();
                    Tensor::from_parts(x.shape().to_vec(), data)
                } else {
                    x.clone()
                }
            }
            Op::SoftmaxNll { logits, labels } => {
                let (z, y) = (v(*logits), v(*labels));
                let &[n, k] = z.shape() else {
                    return Err(shape_err(id, op, "logits must be [N, K]"));
                };
                if y.len() != n {
                    return Err(shape_err(id, op, format!("{} labels for {n} rows", y.len())));
                }
                let mut probs = vec![0.0; k];
                let mut out = Vec::with_capacity(n);
                for (row, &label) in z.data().chunks(k).zip(y.data()) {
                    let idx = label_index(label, k)
                        .ok_or_else(|| shape_err(id, op, format!("label {label} outside 0..{k}")))?;
                    let lse = softmax_row(row, &mut probs);
                    out.push(lse - row[idx]);
                }
                Tensor::from_parts(vec![n], out)
            }
            Op::Standardize(x) => {
                let x = v(*x);
                let m = *x.shape().last().ok_or_else(|| shape_err(id, op, "scalar input"))?;
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(m) {
                    let mu = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / m as f64;
                    let sigma = var.sqrt();
                    if sigma < SIGMA_FLOOR {
                        row.iter_mut().for_each(|e| *e = 0.0);
                    } else {
                        row.iter_mut().for_each(|e| *e = (*e - mu) / sigma);
                    }
                    extra.push(sigma);
                }
                out
            }
            Op::Reshape { x, shape } => v(*x)
                .clone()
                .reshape(shape.clone())
                .map_err(|e| shape_err(id, op, e))?,
            Op::SelectRows { x, rows } => {
                let x = v(*x);
                let n = *x.shape().first().ok_or_else(|| shape_err(id, op, "scalar input"))?;
                let stride = x.len() / n;
                let mut data = Vec::with_capacity(rows.len() * stride);
                for &r in rows {
                    if r >= n {
                        return Err(shape_err(id, op, format!("row {r} of {n}")));
                    }
                    data.extend_from_slice(&x.data()[r * stride..(r + 1) * stride]);
                }
                if rows.is_empty() {
                    return Err(shape_err(id, op, "no rows selected"));
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows.len();
                Tensor::from_parts(shape, data)
            }
        };
        if !out.is_finite() {
            return Err(GraphError::NonFinite { node: id, op: op.name() });
        }
        values.push(out);
        aux.push(extra);
    }
    Ok(Trace { values, aux })
}

/// Marks nodes whose gradient is needed to reach any of `targets`.
pub(crate) fn grad_mask(graph: &ExprGraph, targets: &[NodeId]) -> Vec<bool> {
    let mut needs = vec![false; graph.len()];
    for &t in targets {
        needs[t] = true;
    }
    for (id, op) in graph.nodes().iter().enumerate() {
        if !needs[id] && op.inputs().iter().any(|&i| needs[i]) {
            needs[id] = true;
        }
    }
    needs
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reduces a broadcast gradient back onto an operand of `len` elements.
fn unbroadcast(g: Tensor, operand: &Tensor) -> Tensor {
    if g.len() == operand.len() {
        Tensor::from_parts(operand.shape().to_vec(), g.into_data())
    } else {
        Tensor::from_parts(operand.shape().to_vec(), vec![g.data().iter().sum()])
    }
}

/// Reverse sweep from the scalar `output`. Only nodes flagged in `needs`
/// receive gradients; those listed in `keep` are returned.
pub(crate) fn backward_trace(
    graph: &ExprGraph,
    trace: &Trace,
    output: NodeId,
    needs: &[bool],
    keep: &[NodeId],
) -> Result<HashMap<NodeId, Tensor>, GraphError> {
    let out_val = &trace.values[output];
    if out_val.len() != 1 {
        return Err(GraphError::NotScalar(out_val.shape().to_vec()));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    let mut kept = HashMap::new();
    grads[output] = Some(Tensor::full(out_val.shape(), 1.0));
    for id in (0..=output).rev() {
        let Some(g) = grads[id].take() else { continue };
        if keep.contains(&id) {
            kept.insert(id, g.clone());
        }
        let op = &graph.nodes()[id];
        let val = |i: NodeId| &trace.values[i];
        match op {
            Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if needs[*a] {
                    accumulate(&mut grads[*a], unbroadcast(g.clone(), val(*a)));
                }
                if needs[*b] {
                    let gb = if matches!(op, Op::Sub(..)) { g.map(|e| -e) } else { g.clone() };
                    accumulate(&mut grads[*b], unbroadcast(gb, val(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs[*a] {
                    let ga = zip_broadcast(&g, bv, g.shape().to_vec(), |x, y| x * y);
                    accumulate(&mut grads[*a], unbroadcast(ga, av));
                }
                if needs[*b] {
                    let gb = zip_broadcast(&g, av, g.shape().to_vec(), |x, y| x * y);
                    accumulate(&mut grads[*b], unbroadcast(gb, bv));
                }
            }
            Op::ScalarMul(x, c) => {
                if needs[*x] {
                    accumulate(&mut grads[*x], g.map(|e| e * c));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let gm = MatRef::new(g.data(), n, m);
                if needs[*a] {
                    let mut ga = vec![0.0; n * k];
                    gemm(gm, MatRef::new(bv.data(), k, m).t(), 0.0, &mut ga);
                    accumulate(&mut grads[*a], Tensor::from_parts(vec![n, k], ga));
                }
                if needs[*b] {
                    let mut gb = vec![0.0; k * m];
                    gemm(MatRef::new(av.data(), n, k).t(), gm, 0.0, &mut gb);
                    accumulate(&mut grads[*b], Tensor::from_parts(vec![k, m], gb));
                }
            }
            Op::AddBias { x, bias, axis } => {
                let xv = val(*x);
                if needs[*bias] {
                    let inner: usize = xv.shape()[axis + 1..].iter().product();
                    let c = xv.shape()[*axis];
                    let mut gb = vec![0.0; c];
                    for (i, e) in g.data().iter().enumerate() {
                        gb[(i / inner) % c] += e;
                    }
                    accumulate(&mut grads[*bias], Tensor::from_parts(vec![c], gb));
                }
                if needs[*x] {
                    accumulate(&mut grads[*x], g);
                }
            }
            Op::Conv2d { x, kernel, padding } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let [n, c, h, w] = rank4(id, op, xv)?;
                let [o, _, kh, kw] = rank4(id, op, kv)?;
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: w,
                    kh,
                    kw,
                    padding: *padding,
                };
                let (plen, area) = (geom.patch_len(), geom.out_h() * geom.out_w());
                let mut cols = vec![0.0; plen * area];
                let mut gk = vec![0.0; o * plen];
                let mut gx = if needs[*x] { vec![0.0; xv.len()] } else { Vec::new() };
                let mut gcols = vec![0.0; if needs[*x] { plen * area } else { 0 }];
                for s in 0..n {
                    let gout = MatRef::new(&g.data()[s * o * area..(s + 1) * o * area], o, area);
                    if needs[*kernel] {
                        im2col(&xv.data()[s * c * h * w..(s + 1) * c * h * w], &geom, &mut cols);
                        gemm(gout, MatRef::new(&cols, plen, area).t(), 1.0, &mut gk);
                    }
                    if needs[*x] {
                        gemm(MatRef::new(kv.data(), o, plen).t(), gout, 0.0, &mut gcols);
                        col2im(&gcols, &geom, &mut gx[s * c * h * w..(s + 1) * c * h * w]);
                    }
                }
                if needs[*kernel] {
                    accumulate(&mut grads[*kernel], Tensor::from_parts(kv.shape().to_vec(), gk));
                }
                if needs[*x] {
                    accumulate(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::Relu(x) | Op::Abs(x) | Op::Pow(x, _) => {
                if needs[*x] {
                    let xv = val(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| {
                            gi * match op {
                                Op::Relu(_) => {
                                    if xi > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Op::Abs(_) => {
                                    if xi > 0.0 {
                                        1.0
                                    } else if xi < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Op::Pow(_, e) => {
                                    if *e == 1.0 {
                                        1.0
                                    } else {
                                        e * xi.powf(e - 1.0)
                                    }
                                }
                                _ => unreachable!(),
                            }
                        })
                        .collect();
                    accumulate(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                if needs[*x] {
                    let xv = val(*x);
                    let (map, _) = reduction_map(xv.shape(), axes);
                    let scale = if matches!(op, Op::Mean { .. }) {
                        g.len() as f64 / xv.len() as f64
                    } else {
                        1.0
                    };
                    let data = map.iter().map(|&i| g.data()[i] * scale).collect();
                    accumulate(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::SumAll(x) => {
                if needs[*x] {
                    accumulate(&mut grads[*x], Tensor::full(val(*x).shape(), g.data()[0]));
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs[*x] {
                    let xv = val(*x);
                    let area = xv.shape()[2] * xv.shape()[3];
                    let mut data = Vec::with_capacity(xv.len());
                    for &gi in g.data() {
                        data.extend(std::iter::repeat(gi / area as f64).take(area));
                    }
                    accumulate(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::AvgPool2(x) => {
                if needs[*x] {
                    let xv = val(*x);
                    let [_, _, h, w] = rank4(id, op, xv)?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut data = vec![0.0; xv.len()];
                    for (p, gp) in g.data().chunks(oh * ow).enumerate() {
                        let dst = &mut data[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let q = 0.25 * gp[y * ow + xx];
                                let i = 2 * y * w + 2 * xx;
                                dst[i] = q;
                                dst[i + 1] = q;
                                dst[i + w] = q;
                                dst[i + w + 1] = q;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::Dropout { x, .. } => {
                if needs[*x] {
                    let mask = &trace.aux[id];
                    let gx = if mask.is_empty() {
                        g
                    } else {
                        let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                        Tensor::from_parts(g.shape().to_vec(), data)
                    };
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::SoftmaxNll { logits, labels } => {
                if needs[*logits] {
                    let (z, y) = (val(*logits), val(*labels));
                    let k = z.shape()[1];
                    let mut data = vec![0.0; z.len()];
                    for (r, (row, dst)) in z.data().chunks(k).zip(data.chunks_mut(k)).enumerate() {
                        softmax_row(row, dst);
                        dst[y.data()[r] as usize] -= 1.0;
                        let gr = g.data()[r];
                        dst.iter_mut().for_each(|e| *e *= gr);
                    }
                    accumulate(&mut grads[*logits], Tensor::from_parts(z.shape().to_vec(), data));
                }
            }
            Op::Standardize(x) => {
                if needs[*x] {
                    let zhat = &trace.values[id];
                    let m = *zhat.shape().last().unwrap();
                    let mut data = vec![0.0; zhat.len()];
                    let rows = zhat.data().chunks(m).zip(g.data().chunks(m));
                    for (r, ((zr, gr), dst)) in rows.zip(data.chunks_mut(m)).enumerate() {
                        let sigma = trace.aux[id][r];
                        if sigma < SIGMA_FLOOR {
                            continue;
                        }
                        let gmean = gr.iter().sum::<f64>() / m as f64;
                        let gz = gr.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for ((d, &gi), &zi) in dst.iter_mut().zip(gr).zip(zr) {
                            *d = (gi - gmean - zi * gz) / sigma;
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_parts(zhat.shape().to_vec(), data));
                }
            }
            Op::Reshape { x, .. } => {
                if needs[*x] {
                    let shape = val(*x).shape().to_vec();
                    accumulate(&mut grads[*x], Tensor::from_parts(shape, g.into_data()));
                }
            }
            Op::SelectRows { x, rows } => {
                if needs[*x] {
                    let xv = val(*x);
                    let stride = xv.len() / xv.shape()[0];
                    let mut data = vec![0.0; xv.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, s) in data[r * stride..(r + 1) * stride]
                            .iter_mut()
                            .zip(&g.data()[k * stride..(k + 1) * stride])
                        {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
        }
    }
    Ok(kept)
}
