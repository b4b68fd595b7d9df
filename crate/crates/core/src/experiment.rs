//! End-to-end runs driven by a JSON [`RunConfig`]: data preparation,
//! training, evaluation, sweeps and the CSV/SVG artifacts they leave behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{load_checkpoint, predict, save_checkpoint, BackboneSpec, Model, ModelError};
use crate::data::{load_cifar_binary, load_dataset, DataError, Dataset};
use crate::knowledge::{build_distance_matrix, build_mapped_distance_matrix, parse_mapping, parse_tree, DistanceMatrix, TreeError, DEFAULT_EDGE_WEIGHT};
use crate::qtr::measure_alignment;
use crate::synth::{generate_tree_blobs, SynthConfig, SynthError};
use crate::train::{train, TrainConfig, TrainError, TrainHistory};
use crate::wsol::{candidate_boxes, dataset_maps, evaluate_localization, ActivationMap, BBox, EvalConfig, LocalizationReport, MapMethod, Protocol, WsolError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Wsol(#[from] WsolError),
}

impl ExperimentError {
    /// True for problems with the configuration rather than the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Train and val locations of an on-disk dataset. Paths ending in `.bin`
/// are read as CIFAR binaries, anything else as a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    /// Label range of CIFAR binaries; defaults to the class mapping length.
    #[serde(default)]
    pub class_count: Option<usize>,
}

/// Backbone settings; input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneOptions {
    pub blocks: Vec<usize>,
    pub pool: bool,
    pub latent_dim: usize,
    pub dropout: f64,
    pub viz_layer: bool,
}

impl Default for BackboneOptions {
    fn default() -> Self {
        Self {
            blocks: vec![8, 16],
            pool: true,
            latent_dim: 16,
            dropout: 0.15,
            viz_layer: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Synthetic tree-blobs data; used when `dataset` is absent.
    pub synth: Option<SynthConfig>,
    pub dataset: Option<DatasetPaths>,
    /// Tree file and `dataset_class<TAB>tree_node` mapping for `dataset`.
    pub tree: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    pub backbone: BackboneOptions,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub map_method: MapMethod,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: None,
            dataset: None,
            tree: None,
            classes: None,
            backbone: BackboneOptions::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::convnet(),
            map_method: MapMethod::Cam,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.synth.is_some() && self.dataset.is_some() {
            return bad("give either `synth` or `dataset`, not both".into());
        }
        if self.dataset.is_some() && self.tree.is_some() != self.classes.is_some() {
            return bad("`tree` and `classes` go together".into());
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.eval.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.train.loss.alpha > 0.0 && self.dataset.is_some() && self.tree.is_none() {
            return bad("alpha > 0 needs a `tree` and `classes` prior".into());
        }
        Ok(())
    }

    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn synth_or_default(&self) -> Option<SynthConfig> {
        match (&self.synth, &self.dataset) {
            (Some(s), _) => Some(s.clone()),
            (None, None) => Some(SynthConfig::default()),
            (None, Some(_)) => None,
        }
    }
}

/// Loaded splits plus the class distance prior, when one is available.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub prior: Option<DistanceMatrix>,
}

fn load_split(path: &Path, class_count: Option<usize>) -> Result<Dataset, ExperimentError> {
    if path.extension().is_some_and(|e| e == "bin") {
        let k = class_count.ok_or_else(|| ExperimentError::Config("CIFAR binaries need `class_count` or a class mapping".into()))?;
        Ok(load_cifar_binary(path, k)?)
    } else {
        Ok(load_dataset(path)?)
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, ExperimentError> {
    if let Some(s) = cfg.synth_or_default() {
        let g = generate_tree_blobs(&s)?;
        let leaves = g.tree.leaves();
        let prior = build_distance_matrix(&g.tree, &leaves)?;
        return Ok(Prepared {
            train: g.train,
            val: g.val,
            prior: Some(prior),
        });
    }
    let paths = cfg.dataset.as_ref().expect("synth or dataset");
    let (prior, mapping) = match (&cfg.tree, &cfg.classes) {
        (Some(t), Some(c)) => {
            let tree = parse_tree(&read_text(t)?, DEFAULT_EDGE_WEIGHT)?;
            let mapping = parse_mapping(&read_text(c)?)?;
            (Some(build_mapped_distance_matrix(&tree, &mapping)?), Some(mapping))
        }
        _ => (None, None),
    };
    let k = paths.class_count.or(mapping.as_ref().map(Vec::len));
    let mut train = load_split(&paths.train, k)?;
    let mut val = load_split(&paths.val, k)?;
    val.split = crate::data::Split::Val;
    if let Some(d) = &prior {
        for ds in [&mut train, &mut val] {
            align_class_names(ds, d.classes())?;
        }
    }
    Ok(Prepared { train, val, prior })
}

// CIFAR binaries carry no names; they take the mapping's order.
fn align_class_names(ds: &mut Dataset, names: &[String]) -> Result<(), ExperimentError> {
    if ds.class_names == names {
        return Ok(());
    }
    let generic = ds.class_names.iter().enumerate().all(|(i, n)| *n == format!("class{i}"));
    if generic && ds.class_names.len() == names.len() {
        ds.class_names = names.to_vec();
        return Ok(());
    }
    Err(ExperimentError::Config(format!(
        "dataset classes {:?} do not match the mapping {:?}",
        ds.class_names, names
    )))
}

pub fn backbone_spec(opts: &BackboneOptions, data: &Dataset) -> BackboneSpec {
    let (c, h, w) = data.image_shape();
    BackboneSpec {
        input: [c, h, w],
        blocks: opts.blocks.clone(),
        pool: opts.pool,
        latent_dim: opts.latent_dim,
        classes: data.class_names.len(),
        dropout: opts.dropout,
        viz_layer: opts.viz_layer,
    }
}

/// Evaluation of one model on the val split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub top1_acc: f64,
    pub top5_acc: f64,
    /// Present when the val split has gt boxes.
    pub localization: Option<LocalizationReport>,
    pub pearson: Option<f64>,
}

pub fn evaluate(
    model: &Model,
    val: &Dataset,
    prior: Option<&DistanceMatrix>,
    eval: &EvalConfig,
    method: MapMethod,
    ell: f64,
) -> Result<EvalSummary, ExperimentError> {
    let p = predict(model, val)?;
    let pearson = match prior {
        Some(d) => measure_alignment(&p.by_class(&val.labels, val.class_count()), d, ell)
            .ok()
            .map(|r| r.pearson),
        None => None,
    };
    let localization = match val.boxes {
        Some(_) => Some(evaluate_localization(model, val, eval, method)?),
        None => None,
    };
    Ok(EvalSummary {
        top1_acc: p.top1_accuracy(&val.labels),
        top5_acc: p.top5_accuracy(&val.labels),
        localization,
        pearson,
    })
}

fn cell4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Both localization protocols side by side, one row each.
pub fn eval_csv(s: &EvalSummary) -> String {
    let mut out = String::from("protocol,top1_acc,top5_acc,gt_loc,top1_loc,top5_loc,mass_outside,pearson\n");
    for (name, protocol) in [("single", Protocol::Single), ("dual", Protocol::Dual)] {
        let loc = s.localization.as_ref().map(|r| match protocol {
            Protocol::Single => r.single,
            Protocol::Dual => r.dual,
        });
        let _ = writeln!(
            out,
            "{name},{:.4},{:.4},{},{},{},{},{}",
            s.top1_acc,
            s.top5_acc,
            cell4(loc.map(|l| l.gt_loc)),
            cell4(loc.map(|l| l.top1_loc)),
            cell4(loc.map(|l| l.top5_loc)),
            cell4(s.localization.as_ref().map(|r| r.mass_outside)),
            cell4(s.pearson),
        );
    }
    out
}

/// Trains on prepared data with `cfg.train`.
pub fn fit(cfg: &RunConfig, data: &Prepared) -> Result<(Model, TrainHistory), ExperimentError> {
    let spec = backbone_spec(&cfg.backbone, &data.train);
    if cfg.train.loss.alpha > 0.0 && data.prior.is_none() {
        return Err(ExperimentError::Config("alpha > 0 needs a class distance prior".into()));
    }
    Ok(train(&cfg.train, &spec, &data.train, Some(&data.val), data.prior.as_ref())?)
}

pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const RESOLVED: &str = "resolved-config.json";

/// Trains and writes checkpoint, history and resolved config under `dir`.
pub fn run_train(cfg: &RunConfig, data: &Prepared, dir: &Path) -> Result<(Model, TrainHistory), ExperimentError> {
    write_file(&dir.join(RESOLVED), cfg.resolved_json())?;
    let (model, history) = fit(cfg, data)?;
    save_checkpoint(&model, &dir.join(CHECKPOINT))?;
    write_file(&dir.join(HISTORY), history.to_csv())?;
    Ok((model, history))
}

pub fn load_model(dir: &Path) -> Result<Model, ExperimentError> {
    Ok(load_checkpoint(&dir.join(CHECKPOINT))?)
}

/// One trained and evaluated setting of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub ell: f64,
    pub eval: EvalSummary,
}

pub const SWEEP_HEADER: &str = "alpha,ell,top1_acc,top5_acc,gt_loc_single,gt_loc_dual,top1_loc_dual,mass_outside,pearson";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let loc = r.eval.localization.as_ref();
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{},{},{},{}",
            r.alpha,
            r.ell,
            r.eval.top1_acc,
            r.eval.top5_acc,
            cell4(loc.map(|l| l.single.gt_loc)),
            cell4(loc.map(|l| l.dual.gt_loc)),
            cell4(loc.map(|l| l.dual.top1_loc)),
            cell4(loc.map(|l| l.mass_outside)),
            cell4(r.eval.pearson),
        );
    }
    out
}

/// Trains one model per `(alpha, ell)` pair, each in its own subdirectory.
pub fn run_sweep(cfg: &RunConfig, alphas: &[f64], ells: &[f64], dir: &Path) -> Result<Vec<SweepRow>, ExperimentError> {
    let data = prepare(cfg)?;
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &ell in ells {
            let mut c = cfg.clone();
            c.train.loss.alpha = alpha;
            c.train.loss.ell = ell;
            c.validate()?;
            let sub = dir.join(format!("alpha-{alpha}_ell-{ell}"));
            let (model, _) = run_train(&c, &data, &sub)?;
            let eval = evaluate(&model, &data.val, data.prior.as_ref(), &c.eval, c.map_method, ell)?;
            write_file(&sub.join("eval.csv"), eval_csv(&eval))?;
            rows.push(SweepRow { alpha, ell, eval });
        }
    }
    write_file(&dir.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

/// Parses a comma-separated list of reals.
pub fn parse_list(s: &str) -> Result<Vec<f64>, ExperimentError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| ExperimentError::Config(format!("bad list value `{v}`: {e}")))
        })
        .collect()
}

/// Named numeric columns of a CSV with a header row; empty cells become NaN.
pub fn parse_numeric_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), ExperimentError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| ExperimentError::Config("empty CSV".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(ExperimentError::Config(format!("CSV row {} has {} cells, header has {}", i + 2, cells.len(), header.len())));
        }
        for (col, c) in cols.iter_mut().zip(cells) {
            let c = c.trim();
            col.push(if c.is_empty() {
                f64::NAN
            } else {
                c.parse().map_err(|_| ExperimentError::Config(format!("non-numeric cell `{c}` in row {}", i + 2)))?
            });
        }
    }
    Ok((header, cols))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot with categorical x positions; NaN points are skipped.
pub fn line_plot_svg(title: &str, x_label: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (60.0, 150.0, 40.0, 50.0);
    let finite = series.iter().flat_map(|(_, ys)| ys.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let n = xs.len().max(1);
    let px = |i: usize| l + (w - l - r) * if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    let py = |v: f64| t + (h - t - b) * (1.0 - (v - lo) / (hi - lo));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{l}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{}\" stroke=\"black\"/>",
        h - b,
        w - r,
        h - b,
        h - b
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>", l - 6.0, py(v) + 4.0);
    }
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", px(i), h - b + 16.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", l + (w - l - r) / 2.0, h - 12.0, escape(x_label));
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", px(i), py(*v)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("pair");
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
        }
        let ly = t + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text>",
            w - r + 10.0,
            w - r + 30.0,
            w - r + 35.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const REPORT_COLUMNS: [&str; 3] = ["top1_acc", "gt_loc_single", "gt_loc_dual"];

/// Plots accuracy and GT-loc against whichever of alpha or ell varies.
pub fn sweep_report_svg(csv: &str) -> Result<String, ExperimentError> {
    let (header, cols) = parse_numeric_csv(csv)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .map(|i| &cols[i])
            .ok_or_else(|| ExperimentError::Config(format!("sweep CSV lacks column `{name}`")))
    };
    let alphas = col("alpha")?;
    let ells = col("ell")?;
    let varies = |v: &[f64]| v.iter().any(|x| *x != v[0]);
    let (x_name, xs) = if alphas.is_empty() || varies(alphas) || !varies(ells) {
        ("alpha", alphas)
    } else {
        ("ell", ells)
    };
    let mut series = Vec::new();
    for name in REPORT_COLUMNS {
        series.push((name.to_string(), col(name)?.clone()));
    }
    Ok(line_plot_svg(&format!("sweep over {x_name}"), x_name, xs, &series))
}

/// Image with its activation map, gt boxes (green) and dual-protocol boxes (blue).
pub fn overlay_svg(image: &[f64], map: &ActivationMap, gt: &[BBox], predicted: &[BBox]) -> String {
    let (h, w) = (map.height, map.width);
    let scale = 8;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" shape-rendering=\"crispEdges\">\n",
        w * scale,
        h * scale
    );
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{scale}\" height=\"{scale}\" fill=\"rgb({},{},{})\"/>",
                x * scale,
                y * scale,
                px(0),
                px(1),
                px(2)
            );
        }
    }
    for y in 0..h {
        for x in 0..w {
            let v = map.get(x, y);
            if v > 0.0 {
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{scale}\" height=\"{scale}\" fill=\"red\" fill-opacity=\"{:.3}\"/>",
                    x * scale,
                    y * scale,
                    0.6 * v
                );
            }
        }
    }
    for (boxes, color) in [(gt, "lime"), (predicted, "blue")] {
        for bx in boxes {
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                bx.x0 * scale,
                bx.y0 * scale,
                (bx.x1 - bx.x0) * scale,
                (bx.y1 - bx.y0) * scale
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `map_<id>.csv` and `overlay_<id>.svg` for the first `limit`
/// samples of `ds`; returns the number written.
pub fn write_cam_artifacts(
    model: &Model,
    ds: &Dataset,
    eval: &EvalConfig,
    method: MapMethod,
    dir: &Path,
    limit: usize,
) -> Result<usize, ExperimentError> {
    let n = ds.len().min(limit);
    let subset = ds.subset(&(0..n).collect::<Vec<_>>());
    let (_, maps) = dataset_maps(model, &subset, method)?;
    for (i, map) in maps.iter().enumerate() {
        let id = subset.ids[i];
        write_file(&dir.join(format!("map_{id}.csv")), map.to_csv())?;
        let gt = subset.boxes.as_ref().map(|b| b[i].clone()).unwrap_or_default();
        let predicted = candidate_boxes(map, eval, Protocol::Dual);
        write_file(&dir.join(format!("overlay_{id}.svg")), overlay_svg(subset.image(i), map, &gt, &predicted))?;
    }
    Ok(n)
}
