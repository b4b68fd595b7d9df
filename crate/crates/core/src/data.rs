//! Image datasets, their on-disk layout, the CIFAR binary loader and
//! training-time augmentation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::Pcg32;
use crate::wsol::BBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {file}: {msg}")]
    Format { file: String, msg: String },
    #[error("cifar file length {0} is not a multiple of 3073")]
    Truncated(usize),
    #[error("label {label} at record {record} is not below the class count {classes}")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Images `[n, C, H, W]` with labels, optional ground-truth boxes per image,
/// class names and a split tag. `ids` are dataset-wide sample identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub boxes: Option<Vec<Vec<BBox>>>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        boxes: Option<Vec<Vec<BBox>>>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self, DataError> {
        let n = labels.len();
        let ids = (0..n).collect();
        let ds = Self {
            images,
            labels,
            ids,
            boxes,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!("images must be [n, C, H, W], got {shape:?}")));
        }
        if shape[0] != self.labels.len() || self.ids.len() != self.labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images, {} labels, {} ids",
                shape[0],
                self.labels.len(),
                self.ids.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(DataError::Invalid(format!(
                "label {l} with {} classes",
                self.class_names.len()
            )));
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != self.labels.len() {
                return Err(DataError::Invalid("one box list per image required".into()));
            }
            let (h, w) = (shape[2], shape[3]);
            for b in boxes.iter().flatten() {
                if !b.is_valid_within(w, h) {
                    return Err(DataError::Invalid(format!("box {b:?} outside {w}x{h}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let (c, h, w) = self.image_shape();
        let len = c * h * w;
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Copies the listed images into a `[k, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape")
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Samples grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Keeps the listed samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            boxes: self
                .boxes
                .as_ref()
                .map(|b| indices.iter().map(|&i| b[i].clone()).collect()),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    class_names: Vec<String>,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    split: Split,
    dtype: String,
    has_boxes: bool,
    #[serde(default)]
    seed: Option<u64>,
}

/// Writes `manifest.json`, `images.bin` (little-endian f64), `labels.csv`
/// and `boxes.csv` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path, seed: Option<u64>) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (c, h, w) = ds.image_shape();
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        count: ds.len(),
        channels: c,
        height: h,
        width: w,
        split: ds.split,
        dtype: "f64le".into(),
        has_boxes: ds.boxes.is_some(),
        seed,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;

    let path = dir.join("images.bin");
    let mut bytes = Vec::with_capacity(ds.images.len() * 8);
    for v in ds.images.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(io_err(&path))?;

    let mut labels = String::from("id,label\n");
    for (id, l) in ds.ids.iter().zip(&ds.labels) {
        labels.push_str(&format!("{id},{l}\n"));
    }
    let path = dir.join("labels.csv");
    fs::write(&path, labels).map_err(io_err(&path))?;

    if let Some(boxes) = &ds.boxes {
        let mut out = String::from("image_id,x0,y0,x1,y1\n");
        for (id, list) in ds.ids.iter().zip(boxes) {
            for b in list {
                out.push_str(&format!("{id},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
            }
        }
        let path = dir.join("boxes.csv");
        fs::write(&path, out).map_err(io_err(&path))?;
    }
    Ok(())
}

fn csv_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file = path.display().to_string();
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(DataError::Format {
            file,
            msg: format!("expected header `{header}`"),
        });
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() == width {
                Ok(cells)
            } else {
                Err(DataError::Format {
                    file: file.clone(),
                    msg: format!("row `{l}` has {} cells", cells.len()),
                })
            }
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(cell: &str, file: &Path) -> Result<T, DataError> {
    cell.parse().map_err(|_| DataError::Format {
        file: file.display().to_string(),
        msg: format!("bad number `{cell}`"),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Format {
        file: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if m.dtype != "f64le" {
        return Err(DataError::Format {
            file: path.display().to_string(),
            msg: format!("unsupported dtype {}", m.dtype),
        });
    }
    let path = dir.join("images.bin");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let expected = m.count * m.channels * m.height * m.width;
    if bytes.len() != expected * 8 {
        return Err(DataError::Format {
            file: path.display().to_string(),
            msg: format!("{} bytes, expected {}", bytes.len(), expected * 8),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let images = Tensor::new(vec![m.count, m.channels, m.height, m.width], data).expect("sized");

    let path = dir.join("labels.csv");
    let rows = csv_rows(&path, "id,label")?;
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for r in &rows {
        ids.push(parse_num::<usize>(&r[0], &path)?);
        labels.push(parse_num::<usize>(&r[1], &path)?);
    }
    let boxes = if m.has_boxes {
        let path = dir.join("boxes.csv");
        let mut lists = vec![Vec::new(); ids.len()];
        for r in csv_rows(&path, "image_id,x0,y0,x1,y1")? {
            let id: usize = parse_num(&r[0], &path)?;
            let slot = ids.iter().position(|&i| i == id).ok_or_else(|| DataError::Format {
                file: path.display().to_string(),
                msg: format!("unknown image id {id}"),
            })?;
            let v: Vec<usize> = r[1..]
                .iter()
                .map(|c| parse_num(c, &path))
                .collect::<Result<_, _>>()?;
            lists[slot].push(BBox::new(v[0], v[1], v[2], v[3]));
        }
        Some(lists)
    } else {
        None
    };
    let ds = Dataset {
        images,
        labels,
        ids,
        boxes,
        class_names: m.class_names,
        split: m.split,
    };
    ds.validate()?;
    Ok(ds)
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses CIFAR-10-style records: one label byte, then 3 planes of 32x32
/// bytes mapped to `[0, 1]`.
pub fn parse_cifar_binary(bytes: &[u8], class_count: usize) -> Result<Dataset, DataError> {
    if bytes.len() % CIFAR_RECORD != 0 || bytes.is_empty() {
        return Err(DataError::Truncated(bytes.len()));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label >= class_count {
            return Err(DataError::LabelOutOfRange {
                record,
                label,
                classes: class_count,
            });
        }
        labels.push(label);
        data.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], data).expect("sized");
    let names = (0..class_count).map(|i| format!("class{i}")).collect();
    Dataset::new(images, labels, None, names, Split::Train)
}

pub fn load_cifar_binary(path: &Path, class_count: usize) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_cifar_binary(&bytes, class_count)
}

/// Writes a CIFAR-format file; used to build fixtures.
pub fn write_cifar_binary(path: &Path, records: &[(u8, [u8; 3072])]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for (label, pixels) in records {
        f.write_all(&[*label]).map_err(io_err(path))?;
        f.write_all(pixels).map_err(io_err(path))?;
    }
    Ok(())
}

/// Training-time augmentation. Probabilities of 0 and `crop == false`
/// disable the corresponding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub blur_prob: f64,
    /// Output `(height, width)`; `None` keeps the input size.
    pub size: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            rotation_deg: 15.0,
            blur_prob: 0.1,
            size: None,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            crop: false,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.0,
            rotation_deg: 0.0,
            blur_prob: 0.0,
            size: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.crop && self.flip_prob <= 0.0 && self.rotation_deg <= 0.0 && self.blur_prob <= 0.0
    }
}

/// Bilinear sample of channel plane `p` (`h x w`) at real coordinates with
/// edge clamping.
fn sample_bilinear(p: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
    let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the region `[top, top + ch) x [left, left + cw)` of a CHW image
/// to `oh x ow` with pixel-center alignment.
pub fn resize_region(
    image: &[f64],
    (c, h, w): (usize, usize, usize),
    (top, left, ch, cw): (f64, f64, f64, f64),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    let (sy, sx) = (ch / oh as f64, cw / ow as f64);
    for k in 0..c {
        let plane = &image[k * h * w..(k + 1) * h * w];
        for i in 0..oh {
            let y = top + (i as f64 + 0.5) * sy - 0.5;
            for j in 0..ow {
                let x = left + (j as f64 + 0.5) * sx - 0.5;
                out[k * oh * ow + i * ow + j] = sample_bilinear(plane, h, w, y, x);
            }
        }
    }
    out
}

pub fn hflip(image: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = image.to_vec();
    for k in 0..c {
        for i in 0..h {
            out[(k * h + i) * w..(k * h + i + 1) * w].reverse();
        }
    }
    out
}

pub fn rotate(image: &[f64], (c, h, w): (usize, usize, usize), degrees: f64) -> Vec<f64> {
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; image.len()];
    for k in 0..c {
        let plane = &image[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let y = cy + co * dy - s * dx;
                let x = cx + s * dy + co * dx;
                out[k * h * w + i * w + j] = sample_bilinear(plane, h, w, y, x);
            }
        }
    }
    out
}

/// Separable 3-tap Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &[f64], (c, h, w): (usize, usize, usize), sigma: f64) -> Vec<f64> {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let taps = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let mut tmp = vec![0.0; image.len()];
    let mut out = vec![0.0; image.len()];
    for k in 0..c {
        let base = k * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, d) in taps.iter().zip([-1isize, 0, 1]) {
                    let jj = (j as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += t * image[base + i * w + jj];
                }
                tmp[base + i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, d) in taps.iter().zip([-1isize, 0, 1]) {
                    let ii = (i as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += t * tmp[base + ii * w + j];
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    out
}

/// Applies crop, flip, rotation and blur in that order. Returns an image of
/// the configured size.
pub fn augment(image: &[f64], shape: (usize, usize, usize), cfg: &AugmentConfig, rng: &mut Pcg32) -> Vec<f64> {
    let (c, h, w) = shape;
    let (oh, ow) = cfg.size.unwrap_or((h, w));
    let mut img = if cfg.crop {
        let area = (h * w) as f64;
        let frac = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let log_ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (area * frac * ratio).sqrt().min(w as f64);
        let ch = (area * frac / ratio).sqrt().min(h as f64);
        let top = rng.gen_range(0.0..=(h as f64 - ch));
        let left = rng.gen_range(0.0..=(w as f64 - cw));
        resize_region(image, shape, (top, left, ch, cw), (oh, ow))
    } else if (oh, ow) != (h, w) {
        resize_region(image, shape, (0.0, 0.0, h as f64, w as f64), (oh, ow))
    } else {
        image.to_vec()
    };
    let shape = (c, oh, ow);
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0)) {
        img = hflip(&img, shape);
    }
    if cfg.rotation_deg > 0.0 {
        let deg = rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg);
        img = rotate(&img, shape, deg);
    }
    if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob.min(1.0)) {
        let sigma = rng.gen_range(0.1..=2.0);
        img = gaussian_blur(&img, shape, sigma);
    }
    img
}
