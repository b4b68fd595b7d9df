//! Tree-structured synthetic images ("tree-blobs").
//!
//! Leaf classes of a balanced tree draw one object each. The depth-1
//! ancestor picks the shape, the depth-2 ancestor the texture and the leaf
//! the hue, so visual similarity follows tree distance. Train backgrounds
//! carry a class-indicative hue with probability `confound_prob`; val
//! backgrounds never do.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{DataError, Dataset, Split};
use crate::knowledge::{KnowledgeTree, TreeError};
use crate::rng::{self, Pcg32};
use crate::wsol::BBox;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub const MIN_OBJECT_PIXELS: usize = 4;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub branching: usize,
    pub depth: usize,
    pub images_per_class: usize,
    /// Square image side in pixels; images have 3 channels.
    pub image_size: usize,
    /// Probability that a train background hue encodes the class.
    pub confound_prob: f64,
    /// Object side as a fraction of the image side.
    pub object_scale: (f64, f64),
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            branching: 2,
            depth: 3,
            images_per_class: 200,
            image_size: 32,
            confound_prob: 0.0,
            object_scale: (0.3, 0.5),
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.branching < 2 || self.depth < 1 {
            return err(format!("need b >= 2 and d >= 1, got b = {}, d = {}", self.branching, self.depth));
        }
        if !(0.0..=1.0).contains(&self.confound_prob) {
            return err(format!("confound_prob {} outside [0, 1]", self.confound_prob));
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return err(format!("object scale range {lo}..{hi} must satisfy 0 < lo <= hi <= 1"));
        }
        if ((lo * self.image_size as f64).round() as usize) < MIN_OBJECT_PIXELS {
            return err(format!(
                "image side {} too small for minimum object scale {lo}",
                self.image_size
            ));
        }
        if self.images_per_class < 2 {
            return err("need at least 2 images per class".into());
        }
        if !(self.noise >= 0.0) {
            return err("noise must be >= 0".into());
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Hourglass,
    Frame,
}

pub const SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Disk,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::Hourglass,
    Shape::Frame,
];

impl Shape {
    /// Membership at normalized coordinates `u, v` in `[-1, 1]`, `v` downward.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
            Shape::Disk => r2 <= 1.0,
            Shape::Triangle => v.abs() <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            Shape::Cross => u.abs() <= 0.35 || v.abs() <= 0.35,
            Shape::Ring => (0.3..=1.0).contains(&r2),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Hourglass => u.abs() <= v.abs() + 0.1,
            Shape::Frame => u.abs().max(v.abs()) >= 0.55,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Solid,
    HStripes,
    VStripes,
    Checker,
    Diagonal,
    Dots,
    Grid,
    AntiDiagonal,
}

pub const TEXTURES: [Texture; 8] = [
    Texture::Solid,
    Texture::HStripes,
    Texture::VStripes,
    Texture::Checker,
    Texture::Diagonal,
    Texture::Dots,
    Texture::Grid,
    Texture::AntiDiagonal,
];

impl Texture {
    /// Whether the object-relative pixel `(x, y)` takes the full color.
    pub fn lit(self, x: usize, y: usize) -> bool {
        match self {
            Texture::Solid => true,
            Texture::HStripes => (y / 2) % 2 == 0,
            Texture::VStripes => (x / 2) % 2 == 0,
            Texture::Checker => (x / 2 + y / 2) % 2 == 0,
            Texture::Diagonal => ((x + y) / 2) % 2 == 0,
            Texture::Dots => !(x % 3 == 1 && y % 3 == 1),
            Texture::Grid => x % 4 != 0 && y % 4 != 0,
            Texture::AntiDiagonal => ((x + 64 - y % 64) / 2) % 2 == 0,
        }
    }
}

/// Visual attributes of one leaf class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub shape: Shape,
    pub texture: Texture,
    /// In `[0, 1)`.
    pub hue: f64,
}

/// Styles of the tree's leaves in [`KnowledgeTree::leaves`] order.
pub fn class_styles(tree: &KnowledgeTree) -> Vec<ClassStyle> {
    let leaves = tree.leaves();
    let at_depth = |d: usize| -> Vec<usize> { (0..tree.len()).filter(|&i| tree.depth(i) == d).collect() };
    let (d1, d2) = (at_depth(1), at_depth(2));
    let k = leaves.len();
    leaves
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let id = tree.id(name).expect("leaf exists");
            let depth = tree.depth(id);
            let shape = if depth >= 1 {
                d1.iter().position(|&n| n == tree.ancestor_at(id, 1)).unwrap_or(0)
            } else {
                0
            };
            let texture = if depth >= 2 {
                d2.iter().position(|&n| n == tree.ancestor_at(id, 2)).unwrap_or(0)
            } else {
                0
            };
            ClassStyle {
                shape: SHAPES[shape % SHAPES.len()],
                texture: TEXTURES[texture % TEXTURES.len()],
                hue: i as f64 / k as f64,
            }
        })
        .collect()
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h / 6.0
}

pub const OBJECT_SV: (f64, f64) = (0.85, 0.95);
pub const BACKGROUND_SV: (f64, f64) = (0.35, 0.55);
pub const SHADED_FACTOR: f64 = 0.45;

/// Renders one image; returns CHW pixels and the object's tight box.
pub fn render(style: &ClassStyle, background_hue: f64, cfg: &SynthConfig, rng: &mut Pcg32) -> (Vec<f64>, BBox) {
    let s = cfg.image_size;
    let frac = rng.gen_range(cfg.object_scale.0..=cfg.object_scale.1);
    let size = ((frac * s as f64).round() as usize).clamp(MIN_OBJECT_PIXELS, s);
    let ox = rng.gen_range(0..=s - size);
    let oy = rng.gen_range(0..=s - size);
    let bg = hsv_to_rgb(background_hue, BACKGROUND_SV.0, BACKGROUND_SV.1);
    let fg = hsv_to_rgb(style.hue, OBJECT_SV.0, OBJECT_SV.1);
    let mut img = vec![0.0; 3 * s * s];
    let mut b = BBox::new(usize::MAX, usize::MAX, 0, 0);
    for y in 0..s {
        for x in 0..s {
            let inside = (ox..ox + size).contains(&x) && (oy..oy + size).contains(&y) && {
                let u = ((x - ox) as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let v = ((y - oy) as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                style.shape.contains(u, v)
            };
            let color = if inside {
                b.x0 = b.x0.min(x);
                b.y0 = b.y0.min(y);
                b.x1 = b.x1.max(x + 1);
                b.y1 = b.y1.max(y + 1);
                let k = if style.texture.lit(x - ox, y - oy) { 1.0 } else { SHADED_FACTOR };
                fg.map(|c| c * k)
            } else {
                bg
            };
            for (ch, c) in color.iter().enumerate() {
                let n = if cfg.noise > 0.0 { cfg.noise * rng::normal(rng) } else { 0.0 };
                img[ch * s * s + y * s + x] = (c + n).clamp(0.0, 1.0);
            }
        }
    }
    (img, b)
}

/// Generated split pair with the tree and per-class styles.
pub struct TreeBlobs {
    pub train: Dataset,
    pub val: Dataset,
    pub tree: KnowledgeTree,
    pub styles: Vec<ClassStyle>,
    /// Class whose indicative background hue is `k / K` sits at index `k`.
    pub background_of: Vec<usize>,
}

pub fn generate_tree_blobs(cfg: &SynthConfig) -> Result<TreeBlobs, SynthError> {
    cfg.validate()?;
    let tree = KnowledgeTree::balanced(cfg.branching, cfg.depth, 1.0)?;
    let styles = class_styles(&tree);
    let names: Vec<String> = tree.leaves().iter().map(|s| s.to_string()).collect();
    let k = names.len();
    let mut background_of: Vec<usize> = (0..k).collect();
    rng::shuffle(&mut background_of, &mut rng::stream(cfg.seed, 0xB6));
    let n_train = ((cfg.images_per_class as f64 * TRAIN_FRACTION).round() as usize).clamp(1, cfg.images_per_class - 1);
    let n_val = cfg.images_per_class - n_train;
    let s = cfg.image_size;
    let mut parts = [
        (Vec::with_capacity(k * n_train * 3 * s * s), Vec::new(), Vec::new()),
        (Vec::with_capacity(k * n_val * 3 * s * s), Vec::new(), Vec::new()),
    ];
    for (class, style) in styles.iter().enumerate() {
        let mut r = rng::stream(rng::derive_seed(cfg.seed, class as u64), 1);
        let indicative = background_of.iter().position(|&c| c == class).expect("permutation") as f64 / k as f64;
        for j in 0..cfg.images_per_class {
            let is_train = j < n_train;
            let hue = if is_train && r.gen_bool(cfg.confound_prob) {
                indicative
            } else {
                r.gen_range(0.0..1.0)
            };
            let (img, b) = render(style, hue, cfg, &mut r);
            let part = &mut parts[usize::from(!is_train)];
            part.0.extend(img);
            part.1.push(class);
            part.2.push(vec![b]);
        }
    }
    let [(tx, ty, tb), (vx, vy, vb)] = parts;
    let mut train = Dataset::new(
        Tensor::new(vec![ty.len(), 3, s, s], tx).expect("sized"),
        ty,
        Some(tb),
        names.clone(),
        Split::Train,
    )?;
    let mut val = Dataset::new(
        Tensor::new(vec![vy.len(), 3, s, s], vx).expect("sized"),
        vy,
        Some(vb),
        names,
        Split::Val,
    )?;
    train.ids = (0..train.len()).collect();
    val.ids = (train.len()..train.len() + val.len()).collect();
    Ok(TreeBlobs {
        train,
        val,
        tree,
        styles,
        background_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::build_distance_matrix;

    fn small() -> SynthConfig {
        SynthConfig {
            images_per_class: 10,
            image_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn counts_for_binary_depth_three() {
        let g = generate_tree_blobs(&small()).unwrap();
        assert_eq!(g.tree.len(), 15);
        assert_eq!(g.tree.leaves().len(), 8);
        assert_eq!(g.train.len(), 64);
        assert_eq!(g.val.len(), 16);
        assert_eq!(g.train.class_count(), 8);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_tree_blobs(&small()).unwrap();
        let b = generate_tree_blobs(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let c = generate_tree_blobs(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn splits_are_disjoint() {
        let g = generate_tree_blobs(&small()).unwrap();
        let max_train = *g.train.ids.iter().max().unwrap();
        assert!(g.val.ids.iter().all(|&i| i > max_train));
    }

    #[test]
    fn styles_follow_tree_distance() {
        let tree = KnowledgeTree::balanced(2, 3, 1.0).unwrap();
        let styles = class_styles(&tree);
        let d = build_distance_matrix(&tree, &tree.leaves()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if i == j {
                    continue;
                }
                let (a, b) = (styles[i], styles[j]);
                match d.get(i, j) as usize {
                    2 => assert!(a.shape == b.shape && a.texture == b.texture),
                    4 => assert!(a.shape == b.shape && a.texture != b.texture),
                    6 => assert!(a.shape != b.shape && a.texture != b.texture),
                    other => panic!("unexpected distance {other}"),
                }
                assert_ne!(a.hue, b.hue);
            }
        }
    }

    #[test]
    fn boxes_bound_the_object_tightly() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small()
        };
        let g = generate_tree_blobs(&cfg).unwrap();
        let s = cfg.image_size;
        for ds in [&g.train, &g.val] {
            for i in 0..ds.len() {
                let img = ds.image(i);
                let b = ds.boxes.as_ref().unwrap()[i][0];
                let style = g.styles[ds.labels[i]];
                let fg = hsv_to_rgb(style.hue, OBJECT_SV.0, OBJECT_SV.1);
                let shaded = fg.map(|c| c * SHADED_FACTOR);
                let is_object = |x: usize, y: usize| {
                    let px = [0, 1, 2].map(|c| img[c * s * s + y * s + x]);
                    px == fg || px == shaded
                };
                let mut seen = BBox::new(usize::MAX, usize::MAX, 0, 0);
                for y in 0..s {
                    for x in 0..s {
                        if is_object(x, y) {
                            seen.x0 = seen.x0.min(x);
                            seen.y0 = seen.y0.min(y);
                            seen.x1 = seen.x1.max(x + 1);
                            seen.y1 = seen.y1.max(y + 1);
                        }
                    }
                }
                assert!(b.is_valid_within(s, s));
                // Background pixels can coincide with object colors only by
                // accident of hue; allow one pixel of slack.
                assert!(seen.x0 + 1 >= b.x0 && seen.y0 + 1 >= b.y0 && seen.x1 <= b.x1 + 1 && seen.y1 <= b.y1 + 1);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_tree_blobs(&SynthConfig { branching: 1, ..small() }).is_err());
        assert!(generate_tree_blobs(&SynthConfig { confound_prob: 1.5, ..small() }).is_err());
        assert!(generate_tree_blobs(&SynthConfig { image_size: 8, ..small() }).is_err());
    }

    #[test]
    fn hue_round_trip() {
        for h in [0.0, 0.1, 0.3, 0.5, 0.77, 0.95] {
            assert!((rgb_to_hue(hsv_to_rgb(h, 0.4, 0.6)) - h).abs() < 1e-12);
        }
    }
}
