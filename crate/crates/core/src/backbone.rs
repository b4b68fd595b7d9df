//! Tiny convolutional backbone: conv blocks, a 1x1 latent projection,
//! global average pooling to the latent `z`, an optional 3-unit layer and a
//! linear classifier. Also checkpoint persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    evaluate, forward, node_gradients, Bindings, EvalOptions, ExprGraph, GraphError, NodeId, Tensor,
};
use crate::data::Dataset;
use crate::latent::LatentVector;
use crate::rng::Pcg32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint truncated: need {need} payload bytes, found {found}")]
    Truncated { need: usize, found: usize },
    #[error("image has {got} values, model expects {expected}")]
    ImageSize { got: usize, expected: usize },
}

pub const DEFAULT_DROPOUT: f64 = 0.15;

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    /// Output channels of each 3x3 conv block.
    pub blocks: Vec<usize>,
    /// 2x2 average pooling after every block except the last.
    #[serde(default)]
    pub pool: bool,
    pub latent_dim: usize,
    pub classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Linear 3-unit layer between `z` and the classifier.
    #[serde(default)]
    pub viz_layer: bool,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Spec(m));
        if self.latent_dim < 2 {
            return err(format!("latent dim {} must be >= 2", self.latent_dim));
        }
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return err("need at least one conv block with nonzero width".into());
        }
        if self.classes < 1 || self.input.contains(&0) {
            return err("classes and input extents must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let (_, h, w) = self.input_shape();
        let pools = if self.pool { self.blocks.len() - 1 } else { 0 };
        if h >> pools == 0 || w >> pools == 0 {
            return err("input too small for the pooling stages".into());
        }
        Ok(())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.input[0], self.input[1], self.input[2])
    }

    pub fn image_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Spatial extent of the final feature maps.
    pub fn feature_extent(&self) -> (usize, usize) {
        let pools = if self.pool { self.blocks.len() - 1 } else { 0 };
        (self.input[1] >> pools, self.input[2] >> pools)
    }

    /// Names and shapes of all weights, in initialization order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.input[0];
        for (i, &o) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.w"), vec![o, c, 3, 3]));
            out.push((format!("conv{i}.b"), vec![o]));
            c = o;
        }
        let m = self.latent_dim;
        out.push(("latent.w".into(), vec![m, c, 1, 1]));
        out.push(("latent.b".into(), vec![m]));
        let head_in = if self.viz_layer {
            out.push(("viz.w".into(), vec![m, 3]));
            out.push(("viz.b".into(), vec![3]));
            3
        } else {
            m
        };
        out.push(("fc.w".into(), vec![head_in, self.classes]));
        out.push(("fc.b".into(), vec![self.classes]));
        out
    }

    /// Builds the network over a bound input `x` of shape `[N, C, H, W]`.
    pub fn build_graph(&self, dropout_stream: u64) -> Net {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let mut h = x;
        for i in 0..self.blocks.len() {
            let w = g.input(format!("conv{i}.w"));
            let b = g.input(format!("conv{i}.b"));
            let c = g.conv2d(h, w, 1);
            let c = g.add_bias(c, b, 1);
            h = g.relu(c);
            if self.pool && i + 1 < self.blocks.len() {
                h = g.avg_pool2(h);
            }
        }
        let w = g.input("latent.w");
        let b = g.input("latent.b");
        let f = g.conv2d(h, w, 0);
        let f = g.add_bias(f, b, 1);
        let features = g.relu(f);
        let latent = g.global_avg_pool(features);
        let (head_in, viz) = if self.viz_layer {
            let w = g.input("viz.w");
            let b = g.input("viz.b");
            let v = g.matmul(latent, w);
            let v = g.add_bias(v, b, 1);
            (v, Some(v))
        } else {
            (latent, None)
        };
        let dropped = g.dropout(head_in, self.dropout, dropout_stream);
        let w = g.input("fc.w");
        let b = g.input("fc.b");
        let logits = g.matmul(dropped, w);
        let logits = g.add_bias(logits, b, 1);
        g.mark_output("features", features);
        g.mark_output("latent", latent);
        if let Some(v) = viz {
            g.mark_output("viz", v);
        }
        g.mark_output("logits", logits);
        Net {
            graph: g,
            x,
            features,
            latent,
            viz,
            logits,
        }
    }
}

/// Network graph with handles to its named stages.
pub struct Net {
    pub graph: ExprGraph,
    pub x: NodeId,
    pub features: NodeId,
    pub latent: NodeId,
    pub viz: Option<NodeId>,
    pub logits: NodeId,
}

/// Results of an inference pass over a batch.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[N, m, h, w]`.
    pub features: Tensor,
    /// `[N, m]`.
    pub latent: Tensor,
    /// `[N, 3]` when the model has the visualization layer.
    pub viz: Option<Tensor>,
    /// `[N, K]`.
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: BackboneSpec,
    pub weights: BTreeMap<String, Tensor>,
    pub training: bool,
}

/// Fan-in-scaled uniform initialization with bound `sqrt(6 / fan_in)`;
/// biases start at zero.
pub fn build_backbone(spec: &BackboneSpec, rng: &mut Pcg32) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut weights = BTreeMap::new();
    for (name, shape) in spec.weight_shapes() {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::new(shape, data)?
        };
        weights.insert(name, t);
    }
    Ok(Model {
        spec: spec.clone(),
        weights,
        training: false,
    })
}

pub const INFERENCE_CHUNK: usize = 64;

impl Model {
    pub fn bindings(&self, x: Tensor) -> Bindings {
        let mut b: Bindings = self.weights.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        b.insert("x".into(), x);
        b
    }

    /// Inference-mode pass over `[N, C, H, W]` images.
    pub fn forward(&self, x: Tensor) -> Result<Outputs, ModelError> {
        let net = self.spec.build_graph(0);
        let mut out = evaluate(&net.graph, &self.bindings(x))?;
        Ok(Outputs {
            features: out.remove("features").expect("marked"),
            latent: out.remove("latent").expect("marked"),
            viz: out.remove("viz"),
            logits: out.remove("logits").expect("marked"),
        })
    }

    /// Inference over a dataset in chunks; yields `(first index, outputs)`.
    pub fn predict_chunks(&self, ds: &Dataset) -> Result<Vec<(usize, Outputs)>, ModelError> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < ds.len() {
            let end = (start + INFERENCE_CHUNK).min(ds.len());
            let idx: Vec<usize> = (start..end).collect();
            out.push((start, self.forward(ds.batch(&idx))?));
            start = end;
        }
        Ok(out)
    }

    fn single(&self, image: &[f64]) -> Result<Tensor, ModelError> {
        let expected = self.spec.image_len();
        if image.len() != expected {
            return Err(ModelError::ImageSize {
                got: image.len(),
                expected,
            });
        }
        let (c, h, w) = self.spec.input_shape();
        Ok(Tensor::new(vec![1, c, h, w], image.to_vec())?)
    }

    /// Final feature maps `[m, h, w]` of one image, flattened.
    pub fn feature_map(&self, image: &[f64]) -> Result<(Vec<f64>, (usize, usize)), ModelError> {
        let out = self.forward(self.single(image)?)?;
        let hw = (out.features.shape()[2], out.features.shape()[3]);
        Ok((out.features.into_data(), hw))
    }

    /// Feature maps of one image and the gradient of the `class` logit with
    /// respect to them.
    pub fn feature_gradients(
        &self,
        image: &[f64],
        class: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, (usize, usize)), ModelError> {
        let mut net = self.spec.build_graph(0);
        let mut onehot = vec![0.0; self.spec.classes];
        onehot[class] = 1.0;
        let sel = net.graph.constant(Tensor::new(vec![1, self.spec.classes], onehot)?);
        let picked = net.graph.mul(net.logits, sel);
        let score = net.graph.sum_all(picked);
        let trace = forward(&net.graph, &self.bindings(self.single(image)?), EvalOptions::default())?;
        let mut grads = node_gradients(&net.graph, &trace, score, &[net.features])?;
        let features = trace.value(net.features).clone();
        let s = features.shape().to_vec();
        let g = grads
            .remove(&net.features)
            .unwrap_or_else(|| Tensor::zeros(&s));
        Ok((features.into_data(), g.into_data(), (s[2], s[3])))
    }

    /// Effective linear map from pooled features to logits, `[K, m]`
    /// row-major. The visualization layer, being linear, is folded in.
    pub fn cam_weights(&self) -> Vec<f64> {
        let (m, k) = (self.spec.latent_dim, self.spec.classes);
        let fc = self.weights["fc.w"].data();
        let mut out = vec![0.0; k * m];
        if self.spec.viz_layer {
            let viz = self.weights["viz.w"].data();
            for c in 0..k {
                for f in 0..m {
                    out[c * m + f] = (0..3).map(|j| viz[f * 3 + j] * fc[j * k + c]).sum();
                }
            }
        } else {
            for c in 0..k {
                for f in 0..m {
                    out[c * m + f] = fc[f * k + c];
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }
}

/// Indices of the `k` largest entries of `row`, best first; ties keep the
/// lower index first.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-5 predictions and raw latents of every sample of a dataset.
pub struct Predictions {
    pub top5: Vec<Vec<usize>>,
    pub latents: Vec<LatentVector>,
}

impl Predictions {
    pub fn top1_accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.top5.iter().zip(labels).filter(|(t, l)| t.first() == Some(l)).count();
        100.0 * hits as f64 / labels.len().max(1) as f64
    }

    pub fn top5_accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.top5.iter().zip(labels).filter(|(t, l)| t.contains(l)).count();
        100.0 * hits as f64 / labels.len().max(1) as f64
    }

    /// Latents grouped by the given labels.
    pub fn by_class(&self, labels: &[usize], classes: usize) -> Vec<Vec<LatentVector>> {
        let mut out = vec![Vec::new(); classes];
        for (z, &l) in self.latents.iter().zip(labels) {
            out[l].push(z.clone());
        }
        out
    }
}

pub fn predict(model: &Model, ds: &Dataset) -> Result<Predictions, ModelError> {
    let mut top5 = Vec::with_capacity(ds.len());
    let mut latents = Vec::with_capacity(ds.len());
    let (m, k) = (model.spec.latent_dim, model.spec.classes);
    for (_, out) in model.predict_chunks(ds)? {
        for row in out.logits.data().chunks(k) {
            top5.push(top_k(row, 5));
        }
        for z in out.latent.data().chunks(m) {
            latents.push(LatentVector::new(z.to_vec()).map_err(|e| ModelError::Spec(e.to_string()))?);
        }
    }
    Ok(Predictions { top5, latents })
}

const MAGIC: &[u8; 8] = b"CKFRCKPT";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    spec: BackboneSpec,
    precision: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: usize,
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut offset = 0;
    let tensors = model
        .weights
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 8;
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        spec: model.spec.clone(),
        precision: "f64le".into(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.weights.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<Model, ModelError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| ModelError::Manifest("manifest extends past end of file".into()))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.precision != "f64le" {
        return Err(ModelError::Manifest(format!("unsupported precision {}", manifest.precision)));
    }
    manifest.spec.validate()?;
    let expected = manifest.spec.weight_shapes();
    if expected.len() != manifest.tensors.len() {
        return Err(ModelError::Manifest(format!(
            "{} tensors listed, spec needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let payload = &bytes[16 + len..];
    let mut weights = BTreeMap::new();
    for e in &manifest.tensors {
        match expected.iter().find(|(n, _)| *n == e.name) {
            Some((_, shape)) if *shape == e.shape => {}
            _ => return Err(ModelError::Manifest(format!("unexpected tensor {} {:?}", e.name, e.shape))),
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > payload.len() {
            return Err(ModelError::Truncated {
                need: end,
                found: payload.len(),
            });
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        weights.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Model {
        spec: manifest.spec,
        weights,
        training: false,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_checkpoint(&bytes)
}
