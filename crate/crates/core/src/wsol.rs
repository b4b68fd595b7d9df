//! Weakly-supervised localization: class activation maps, box estimation,
//! the dual-threshold filter and MaxBoxAcc-style scoring.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Model, ModelError};
use crate::data::{resize_region, Dataset};

#[derive(Debug, Error)]
pub enum WsolError {
    #[error("class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("evaluation set is empty")]
    Empty,
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("model has no 3-unit visualization layer")]
    NoVizLayer,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn is_valid_within(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMethod {
    Cam,
    GradCam,
}

/// Normalized `height x width` map in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class: usize,
    pub method: MapMethod,
}

impl ActivationMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn upsample_bilinear(values: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return values.to_vec();
    }
    resize_region(values, (1, h, w), (0.0, 0.0, h as f64, w as f64), (oh, ow))
}

/// `sum_k weights[k] * features[k]` over `m` maps of `h x w`.
pub fn cam_lowres(features: &[f64], weights: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw];
    for (k, &wk) in weights.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(&features[k * hw..(k + 1) * hw]) {
            *o += wk * f;
        }
    }
    out
}

/// `relu(sum_k mean(grads[k]) * features[k])`.
pub fn gradcam_lowres(features: &[f64], grads: &[f64], hw: usize) -> Vec<f64> {
    let weights: Vec<f64> = grads.chunks(hw).map(|g| g.iter().sum::<f64>() / hw as f64).collect();
    cam_lowres(features, &weights, hw)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect()
}

/// Upsamples a low-resolution map to the image grid and normalizes it.
pub fn finish_map(lowres: &[f64], from: (usize, usize), to: (usize, usize), class: usize, method: MapMethod) -> ActivationMap {
    ActivationMap {
        values: normalize_minmax(&upsample_bilinear(lowres, from, to)),
        height: to.0,
        width: to.1,
        class,
        method,
    }
}

/// Activation map of `class` for one CHW image.
pub fn compute_activation_map(
    model: &Model,
    image: &[f64],
    class: usize,
    method: MapMethod,
) -> Result<ActivationMap, WsolError> {
    let classes = model.spec.classes;
    if class >= classes {
        return Err(WsolError::BadClass { class, classes });
    }
    let (_, h, w) = model.spec.input_shape();
    let (features, (fh, fw)) = match method {
        MapMethod::Cam => {
            let (features, hw) = model.feature_map(image)?;
            let weights = model.cam_weights();
            let m = model.spec.latent_dim;
            let low = cam_lowres(&features, &weights[class * m..(class + 1) * m], hw.0 * hw.1);
            (low, hw)
        }
        MapMethod::GradCam => {
            let (features, grads, hw) = model.feature_gradients(image, class)?;
            (gradcam_lowres(&features, &grads, hw.0 * hw.1), hw)
        }
    };
    Ok(finish_map(&features, (fh, fw), (h, w), class, method))
}

/// Tight boxes of the 4-connected components of `{map >= tau}`, in scan
/// order of each component's first pixel.
pub fn extract_boxes(map: &ActivationMap, tau: f64) -> Vec<BBox> {
    let (h, w) = (map.height, map.width);
    let on: Vec<bool> = map.values.iter().map(|&v| v >= tau).collect();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut b = BBox::new(usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x + 1);
            b.y1 = b.y1.max(y + 1);
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        boxes.push(b);
    }
    boxes
}

/// Keeps each `g1` box whose area covered by the union of `g2` boxes is at
/// least `overlap_keep` of its own area.
pub fn filter_dual_threshold(g1: &[BBox], g2: &[BBox], overlap_keep: f64) -> Vec<BBox> {
    g1.iter()
        .filter(|b| {
            let mut covered = 0usize;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    if g2.iter().any(|o| o.contains(x, y)) {
                        covered += 1;
                    }
                }
            }
            covered as f64 / b.area() as f64 >= overlap_keep
        })
        .copied()
        .collect()
}

/// Percentage of images where some candidate reaches IoU `>= delta` with
/// some ground-truth box.
pub fn max_box_acc(per_image: &[(Vec<BBox>, Vec<BBox>)], delta: f64) -> Result<f64, WsolError> {
    if per_image.is_empty() {
        return Err(WsolError::Empty);
    }
    let hits = per_image.iter().filter(|(c, g)| localized(c, g, delta)).count();
    Ok(100.0 * hits as f64 / per_image.len() as f64)
}

pub fn localized(candidates: &[BBox], gt: &[BBox], delta: f64) -> bool {
    candidates
        .iter()
        .any(|c| gt.iter().any(|g| iou(c, g) >= delta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tau_g1: f64,
    pub tau_g2: f64,
    pub delta: f64,
    pub overlap_keep: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::convnet()
    }
}

impl EvalConfig {
    pub fn convnet() -> Self {
        Self {
            tau_g1: 0.4,
            tau_g2: 0.6,
            delta: 0.25,
            overlap_keep: 0.4,
        }
    }

    pub fn vit() -> Self {
        Self {
            tau_g1: 0.6,
            tau_g2: 0.7,
            delta: 0.15,
            overlap_keep: 0.4,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "convnet" => Some(Self::convnet()),
            "vit" => Some(Self::vit()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), WsolError> {
        let ok = 0.0 <= self.tau_g1
            && self.tau_g1 < self.tau_g2
            && self.tau_g2 <= 1.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.overlap_keep > 0.0
            && self.overlap_keep <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(WsolError::Config(format!("{self:?}")))
        }
    }
}

/// How candidate boxes are formed from a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Every component at `tau_g1`.
    Single,
    /// `tau_g1` components filtered by the `tau_g2` components.
    Dual,
}

pub fn candidate_boxes(map: &ActivationMap, cfg: &EvalConfig, protocol: Protocol) -> Vec<BBox> {
    let g1 = extract_boxes(map, cfg.tau_g1);
    match protocol {
        Protocol::Single => g1,
        Protocol::Dual => {
            let g2 = extract_boxes(map, cfg.tau_g2);
            filter_dual_threshold(&g1, &g2, cfg.overlap_keep)
        }
    }
}

/// Percentages over the evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocMetrics {
    pub gt_loc: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
}

/// `top5[i]` lists predicted classes best first, `maps[i]` is the map of
/// the ground-truth class.
pub fn localization_metrics(
    top5: &[Vec<usize>],
    labels: &[usize],
    maps: &[ActivationMap],
    gt_boxes: &[Vec<BBox>],
    cfg: &EvalConfig,
    protocol: Protocol,
) -> Result<LocMetrics, WsolError> {
    let n = top5.len();
    if n == 0 {
        return Err(WsolError::Empty);
    }
    if labels.len() != n || maps.len() != n || gt_boxes.len() != n {
        return Err(WsolError::Misaligned(format!(
            "{n} predictions, {} labels, {} maps, {} box lists",
            labels.len(),
            maps.len(),
            gt_boxes.len()
        )));
    }
    let (mut gt, mut t1, mut t5) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let hit = localized(&candidate_boxes(&maps[i], cfg, protocol), &gt_boxes[i], cfg.delta);
        if hit {
            gt += 1;
            if top5[i].first() == Some(&labels[i]) {
                t1 += 1;
            }
            if top5[i].iter().take(5).any(|&c| c == labels[i]) {
                t5 += 1;
            }
        }
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(LocMetrics {
        gt_loc: pct(gt),
        top1_loc: pct(t1),
        top5_loc: pct(t5),
    })
}

/// Share of a map's total activation that falls outside every gt box;
/// `None` for an all-zero map.
pub fn mass_outside(map: &ActivationMap, gt: &[BBox]) -> Option<f64> {
    let total: f64 = map.values.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut outside = 0.0;
    for y in 0..map.height {
        for x in 0..map.width {
            if !gt.iter().any(|b| b.contains(x, y)) {
                outside += map.get(x, y);
            }
        }
    }
    Some(outside / total)
}

/// Classification and localization summary over a dataset with gt boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub top1_acc: f64,
    pub top5_acc: f64,
    pub single: LocMetrics,
    pub dual: LocMetrics,
    /// Mean share of map mass outside the gt box, over maps with mass.
    pub mass_outside: f64,
}

/// Ground-truth-class maps for every sample of `ds`, with top-5 predictions.
pub fn dataset_maps(model: &Model, ds: &Dataset, method: MapMethod) -> Result<(Vec<Vec<usize>>, Vec<ActivationMap>), WsolError> {
    let (_, h, w) = model.spec.input_shape();
    let (m, k) = (model.spec.latent_dim, model.spec.classes);
    let weights = model.cam_weights();
    let mut top5 = Vec::with_capacity(ds.len());
    let mut maps = Vec::with_capacity(ds.len());
    for (start, out) in model.predict_chunks(ds)? {
        let fs = out.features.shape();
        let (fh, fw) = (fs[2], fs[3]);
        let per = m * fh * fw;
        for (r, row) in out.logits.data().chunks(k).enumerate() {
            let i = start + r;
            top5.push(crate::backbone::top_k(row, 5));
            let class = ds.labels[i];
            let map = match method {
                MapMethod::Cam => {
                    let f = &out.features.data()[r * per..(r + 1) * per];
                    let low = cam_lowres(f, &weights[class * m..(class + 1) * m], fh * fw);
                    finish_map(&low, (fh, fw), (h, w), class, method)
                }
                MapMethod::GradCam => compute_activation_map(model, ds.image(i), class, method)?,
            };
            maps.push(map);
        }
    }
    Ok((top5, maps))
}

pub fn evaluate_localization(
    model: &Model,
    ds: &Dataset,
    cfg: &EvalConfig,
    method: MapMethod,
) -> Result<LocalizationReport, WsolError> {
    cfg.validate()?;
    let gt = ds
        .boxes
        .as_ref()
        .ok_or_else(|| WsolError::Misaligned("dataset has no gt boxes".into()))?;
    let (top5, maps) = dataset_maps(model, ds, method)?;
    let single = localization_metrics(&top5, &ds.labels, &maps, gt, cfg, Protocol::Single)?;
    let dual = localization_metrics(&top5, &ds.labels, &maps, gt, cfg, Protocol::Dual)?;
    let n = ds.len() as f64;
    let top1_acc = 100.0 * top5.iter().zip(&ds.labels).filter(|(t, l)| t[0] == **l).count() as f64 / n;
    let top5_acc = 100.0 * top5.iter().zip(&ds.labels).filter(|(t, l)| t.contains(l)).count() as f64 / n;
    let masses: Vec<f64> = maps.iter().zip(gt).filter_map(|(m, b)| mass_outside(m, b)).collect();
    let mass_outside = if masses.is_empty() {
        0.0
    } else {
        masses.iter().sum::<f64>() / masses.len() as f64
    };
    Ok(LocalizationReport {
        top1_acc,
        top5_acc,
        single,
        dual,
        mass_outside,
    })
}

/// CSV with header `id,label,v1,v2,v3`, one row per sample.
pub fn latent3d_csv(model: &Model, ds: &Dataset) -> Result<String, WsolError> {
    if !model.spec.viz_layer {
        return Err(WsolError::NoVizLayer);
    }
    let mut out = String::from("id,label,v1,v2,v3\n");
    for (chunk_start, outputs) in model.predict_chunks(ds)? {
        let viz = outputs.viz.as_ref().ok_or(WsolError::NoVizLayer)?;
        for (r, v) in viz.data().chunks(3).enumerate() {
            let i = chunk_start + r;
            let _ = writeln!(out, "{},{},{:.9},{:.9},{:.9}", ds.ids[i], ds.labels[i], v[0], v[1], v[2]);
        }
    }
    Ok(out)
}

pub fn export_latent3d(model: &Model, ds: &Dataset, path: &Path) -> Result<(), WsolError> {
    let csv = latent3d_csv(model, ds)?;
    std::fs::write(path, csv).map_err(|source| WsolError::Io {
        path: path.display().to_string(),
        source,
    })
}
