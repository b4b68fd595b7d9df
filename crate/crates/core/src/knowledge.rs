//! Category trees and the pairwise class distance prior derived from them.
//!
//! Tree files are UTF-8 and line oriented. The first non-comment line names
//! the root; every later line is `parent<TAB>child[<TAB>weight]`, the weight
//! defaulting to the caller's uniform edge length. `#` starts a comment.
//!
//! ```text
//! # tiny tree
//! entity
//! entity	animal
//! animal	cat	1.0
//! animal	dog
//! ```

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

/// Uniform edge length assigned when a tree line carries no weight.
pub const DEFAULT_EDGE_WEIGHT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("tree file names no root")]
    MissingRoot,
    #[error("node `{0}` is declared more than once")]
    DuplicateName(String),
    #[error("parent `{0}` is never attached to the root")]
    Orphan(String),
    #[error("node `{0}` lies on a cycle")]
    Cycle(String),
    #[error("edge into `{child}` has nonpositive weight {weight}")]
    NonPositiveWeight { child: String, weight: f64 },
    #[error("unknown node `{0}`")]
    UnknownName(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub name: String,
    pub parent: Option<usize>,
    /// Length of the edge to the parent; zero for the root.
    pub weight: f64,
}

/// Rooted, weighted category tree. Node ids index `nodes()`, and every
/// parent precedes its children.
#[derive(Clone, Debug)]
pub struct KnowledgeTree {
    nodes: Vec<TreeNode>,
    index: HashMap<String, usize>,
    depth: Vec<usize>,
    weighted_depth: Vec<f64>,
    children: Vec<Vec<usize>>,
}

impl KnowledgeTree {
    /// Builds a tree from `(parent, child, weight)` edges given in any order.
    pub fn from_edges(root: &str, edges: &[(String, String, f64)]) -> Result<Self, TreeError> {
        let mut child_edge: HashMap<&str, (&str, f64)> = HashMap::new();
        for (parent, child, weight) in edges {
            if child == root {
                return Err(TreeError::Cycle(root.to_string()));
            }
            if child_edge.insert(child, (parent, *weight)).is_some() {
                return Err(TreeError::DuplicateName(child.clone()));
            }
            if !(*weight > 0.0) || !weight.is_finite() {
                return Err(TreeError::NonPositiveWeight {
                    child: child.clone(),
                    weight: *weight,
                });
            }
        }
        for (parent, _, _) in edges {
            if parent != root && !child_edge.contains_key(parent.as_str()) {
                return Err(TreeError::Orphan(parent.clone()));
            }
        }
        let mut kids: HashMap<&str, Vec<&str>> = HashMap::new();
        for (parent, child, _) in edges {
            kids.entry(parent).or_default().push(child);
        }

        let mut tree = Self {
            nodes: vec![TreeNode {
                name: root.to_string(),
                parent: None,
                weight: 0.0,
            }],
            index: HashMap::from([(root.to_string(), 0)]),
            depth: vec![0],
            weighted_depth: vec![0.0],
            children: vec![Vec::new()],
        };
        let mut queue = VecDeque::from([root]);
        while let Some(name) = queue.pop_front() {
            let pid = tree.index[name];
            for &child in kids.get(name).map(Vec::as_slice).unwrap_or_default() {
                let weight = child_edge[child].1;
                let id = tree.nodes.len();
                tree.nodes.push(TreeNode {
                    name: child.to_string(),
                    parent: Some(pid),
                    weight,
                });
                tree.index.insert(child.to_string(), id);
                tree.depth.push(tree.depth[pid] + 1);
                tree.weighted_depth.push(tree.weighted_depth[pid] + weight);
                tree.children.push(Vec::new());
                tree.children[pid].push(id);
                queue.push_back(child);
            }
        }
        if tree.nodes.len() != edges.len() + 1 {
            // Edges that were never reached from the root close a loop.
            let stray = edges
                .iter()
                .map(|(_, c, _)| c)
                .find(|c| !tree.index.contains_key(c.as_str()))
                .expect("unreached edge exists");
            return Err(TreeError::Cycle(stray.clone()));
        }
        Ok(tree)
    }

    /// Complete `branching`-ary tree of the given depth with uniform edge
    /// length. Nodes are named by their path: `root`, `n0`, `n0_1`, ...
    pub fn balanced(branching: usize, depth: usize, weight: f64) -> Result<Self, TreeError> {
        let mut edges = Vec::new();
        let mut level = vec!["root".to_string()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for parent in &level {
                for b in 0..branching {
                    let child = if parent == "root" {
                        format!("n{b}")
                    } else {
                        format!("{parent}_{b}")
                    };
                    edges.push((parent.clone(), child.clone(), weight));
                    next.push(child);
                }
            }
            level = next;
        }
        Self::from_edges("root", &edges)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn root(&self) -> &str {
        &self.nodes[0].name
    }

    pub fn id(&self, name: &str) -> Result<usize, TreeError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TreeError::UnknownName(name.to_string()))
    }

    pub fn depth(&self, id: usize) -> usize {
        self.depth[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// Leaf names in id order (breadth-first).
    pub fn leaves(&self) -> Vec<&str> {
        (0..self.nodes.len())
            .filter(|&i| self.children[i].is_empty())
            .map(|i| self.nodes[i].name.as_str())
            .collect()
    }

    /// Ancestor of `id` at `depth` (the node itself when already that shallow).
    pub fn ancestor_at(&self, mut id: usize, depth: usize) -> usize {
        while self.depth[id] > depth {
            id = self.nodes[id].parent.expect("non-root has a parent");
        }
        id
    }

    /// Lowest common ancestor by parent walks after equalizing depths.
    pub fn lca(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.depth[a] > self.depth[b] {
            a = self.nodes[a].parent.unwrap();
        }
        while self.depth[b] > self.depth[a] {
            b = self.nodes[b].parent.unwrap();
        }
        while a != b {
            a = self.nodes[a].parent.unwrap();
            b = self.nodes[b].parent.unwrap();
        }
        a
    }

    /// Sum of edge weights along the unique path between two nodes.
    pub fn distance(&self, a: &str, b: &str) -> Result<f64, TreeError> {
        let (a, b) = (self.id(a)?, self.id(b)?);
        Ok(self.distance_by_id(a, b))
    }

    pub fn distance_by_id(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let l = self.lca(a, b);
        self.weighted_depth[a] + self.weighted_depth[b] - 2.0 * self.weighted_depth[l]
    }

    /// Copy with every edge weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for n in out.nodes.iter_mut() {
            n.weight *= factor;
        }
        for d in out.weighted_depth.iter_mut() {
            *d *= factor;
        }
        out
    }

    /// Serializes back into the tree file format.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.root());
        for n in &self.nodes[1..] {
            let parent = &self.nodes[n.parent.unwrap()].name;
            let _ = writeln!(s, "{parent}\t{}\t{}", n.name, n.weight);
        }
        s
    }
}

/// Parses the tree file format. `default_weight` applies to lines without
/// an explicit weight.
pub fn parse_tree(text: &str, default_weight: f64) -> Result<KnowledgeTree, TreeError> {
    let mut root = None;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if root.is_none() {
            if fields.len() != 1 || fields[0].is_empty() {
                return Err(TreeError::MissingRoot);
            }
            root = Some(fields[0].to_string());
            continue;
        }
        let (parent, child, weight) = match fields.as_slice() {
            [p, c] => (*p, *c, default_weight),
            [p, c, w] => {
                let w = w.parse::<f64>().map_err(|e| TreeError::Format {
                    line: line_no,
                    msg: format!("bad weight `{w}`: {e}"),
                })?;
                (*p, *c, w)
            }
            _ => {
                return Err(TreeError::Format {
                    line: line_no,
                    msg: "expected `parent<TAB>child[<TAB>weight]`".into(),
                })
            }
        };
        if parent.is_empty() || child.is_empty() {
            return Err(TreeError::Format {
                line: line_no,
                msg: "empty node name".into(),
            });
        }
        edges.push((parent.to_string(), child.to_string(), weight));
    }
    let root = root.ok_or(TreeError::MissingRoot)?;
    KnowledgeTree::from_edges(&root, &edges)
}

/// Parses a `dataset_class<TAB>tree_node` mapping file, preserving order.
pub fn parse_mapping(text: &str) -> Result<Vec<(String, String)>, TreeError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [class, node] = fields.as_slice() else {
            return Err(TreeError::Format {
                line: i + 1,
                msg: "expected `dataset_class<TAB>tree_node`".into(),
            });
        };
        if out.iter().any(|(c, _)| c == class) {
            return Err(TreeError::DuplicateName(class.to_string()));
        }
        out.push((class.to_string(), node.to_string()));
    }
    Ok(out)
}

/// Symmetric, zero-diagonal table of class distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    classes: Vec<String>,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a precomputed square table. Symmetry, zero diagonal and
    /// nonnegativity are checked; tree-metric structure is not required.
    pub fn from_values(classes: Vec<String>, values: Vec<f64>) -> Result<Self, TreeError> {
        let n = classes.len();
        if values.len() != n * n {
            return Err(TreeError::Format {
                line: 0,
                msg: format!("{} values for {n} classes", values.len()),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                let bad = if i == j {
                    v != 0.0
                } else {
                    !(v >= 0.0) || v != values[j * n + i]
                };
                if bad {
                    return Err(TreeError::Format {
                        line: i + 1,
                        msg: format!("entry ({i}, {j}) = {v} breaks symmetry/zero diagonal"),
                    });
                }
            }
        }
        Ok(Self { classes, values })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.classes.len() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            classes: self.classes.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// CSV with a header row and a leading column of class names; values
    /// carry 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(c);
            for j in 0..self.classes.len() {
                let _ = write!(s, ",{}", format_sig9(self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TreeError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(TreeError::Format {
            line: 1,
            msg: "empty matrix file".into(),
        })?;
        let classes: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut values = Vec::with_capacity(classes.len() * classes.len());
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let name = cells.next().unwrap_or("").trim();
            if classes.get(i).map(String::as_str) != Some(name) {
                return Err(TreeError::Format {
                    line: i + 2,
                    msg: format!("row `{name}` does not match header order"),
                });
            }
            for cell in cells {
                values.push(cell.trim().parse::<f64>().map_err(|e| TreeError::Format {
                    line: i + 2,
                    msg: format!("bad value `{cell}`: {e}"),
                })?);
            }
        }
        Self::from_values(classes, values)
    }
}

/// Formats a value with 9 significant digits in plain notation.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Pairwise tree distances between `classes` (tree node names), in order.
pub fn build_distance_matrix(tree: &KnowledgeTree, classes: &[&str]) -> Result<DistanceMatrix, TreeError> {
    let ids = classes
        .iter()
        .map(|c| tree.id(c))
        .collect::<Result<Vec<_>, _>>()?;
    let n = ids.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = tree.distance_by_id(ids[i], ids[j]);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        values,
    })
}

/// Distance matrix labeled by dataset class names, looking each class up
/// through `mapping`.
pub fn build_mapped_distance_matrix(
    tree: &KnowledgeTree,
    mapping: &[(String, String)],
) -> Result<DistanceMatrix, TreeError> {
    let nodes: Vec<&str> = mapping.iter().map(|(_, n)| n.as_str()).collect();
    let mut m = build_distance_matrix(tree, &nodes)?;
    m.classes = mapping.iter().map(|(c, _)| c.clone()).collect();
    Ok(m)
}

/// Sample hierarchy for the CIFAR-10 categories.
pub const CIFAR10_TREE: &str = include_str!("../data/cifar10_tree.txt");
/// `dataset_class<TAB>tree_node` mapping for [`CIFAR10_TREE`].
pub const CIFAR10_MAPPING: &str = include_str!("../data/cifar10_map.tsv");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn edge(p: &str, c: &str) -> (String, String, f64) {
        (p.into(), c.into(), 1.0)
    }

    #[test]
    fn minimal_tree() {
        let t = parse_tree("root\nroot\ta\n", 1.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.distance("root", "a").unwrap(), 1.0);
    }

    #[test]
    fn comments_blank_lines_and_weights() {
        let t = parse_tree("# header\n\nroot # the root\nroot\ta\t2.5\na\tb\n", 1.0).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.distance("root", "b").unwrap(), 3.5);
    }

    #[test]
    fn node_count_is_edge_lines_plus_root() {
        let text = "r\nr\ta\nr\tb\na\tc\n";
        let lines = text.lines().count() - 1;
        assert_eq!(parse_tree(text, 1.0).unwrap().len(), lines + 1);
    }

    #[test]
    fn duplicate_child_is_rejected() {
        let err = parse_tree("root\nroot\ta\nroot\ta\n", 1.0).unwrap_err();
        assert_eq!(err, TreeError::DuplicateName("a".into()));
    }

    #[test]
    fn orphan_parent_is_rejected() {
        let err = parse_tree("root\nroot\ta\nghost\tb\n", 1.0).unwrap_err();
        assert_eq!(err, TreeError::Orphan("ghost".into()));
    }

    #[test]
    fn cycle_is_rejected() {
        let err = parse_tree("root\nroot\ta\nb\tc\nc\tb\n", 1.0).unwrap_err();
        assert!(matches!(err, TreeError::Cycle(_)), "{err:?}");
        let err = parse_tree("root\na\troot\nroot\ta\n", 1.0).unwrap_err();
        assert_eq!(err, TreeError::Cycle("root".into()));
    }

    #[test]
    fn nonpositive_weight_is_rejected() {
        let err = parse_tree("root\nroot\ta\t0\n", 1.0).unwrap_err();
        assert!(matches!(err, TreeError::NonPositiveWeight { .. }));
        let err = parse_tree("root\nroot\ta\n", -1.0).unwrap_err();
        assert!(matches!(err, TreeError::NonPositiveWeight { .. }));
    }

    #[test]
    fn missing_root_is_rejected() {
        assert_eq!(parse_tree("# nothing\n\n", 1.0).unwrap_err(), TreeError::MissingRoot);
        assert_eq!(parse_tree("a\tb\n", 1.0).unwrap_err(), TreeError::MissingRoot);
    }

    #[test]
    fn sibling_and_self_distances() {
        let t = KnowledgeTree::from_edges("r", &[edge("r", "p"), edge("p", "a"), edge("p", "b")]).unwrap();
        assert_eq!(t.distance("a", "a").unwrap(), 0.0);
        assert_eq!(t.distance("a", "b").unwrap(), 2.0);
        assert_eq!(t.distance("a", "r").unwrap(), 2.0);
        assert!(matches!(t.distance("a", "zzz"), Err(TreeError::UnknownName(_))));
    }

    #[test]
    fn star_and_singleton_matrices() {
        let t = KnowledgeTree::from_edges("r", &[edge("r", "a"), edge("r", "b"), edge("r", "c")]).unwrap();
        let single = build_distance_matrix(&t, &["a"]).unwrap();
        assert_eq!(single.values(), &[0.0]);
        let m = build_distance_matrix(&t, &["a", "b", "c"]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if i == j { 0.0 } else { 2.0 });
            }
        }
        assert!(build_distance_matrix(&t, &["a", "nope"]).is_err());
    }

    #[test]
    fn balanced_tree_counts() {
        let t = KnowledgeTree::balanced(2, 3, 1.0).unwrap();
        assert_eq!(t.len(), 15);
        assert_eq!(t.leaves().len(), 8);
        assert_eq!(t.distance("n0_0_0", "n0_0_1").unwrap(), 2.0);
        assert_eq!(t.distance("n0_0_0", "n0_1_0").unwrap(), 4.0);
        assert_eq!(t.distance("n0_0_0", "n1_1_1").unwrap(), 6.0);
    }

    #[test]
    fn shipped_cifar10_mapping_has_ten_leaves() {
        let t = parse_tree(CIFAR10_TREE, DEFAULT_EDGE_WEIGHT).unwrap();
        let map = parse_mapping(CIFAR10_MAPPING).unwrap();
        assert_eq!(map.len(), 10);
        let leaves = t.leaves();
        let mapped: Vec<&str> = map.iter().map(|(_, n)| n.as_str()).collect();
        assert_eq!(leaves.iter().filter(|l| mapped.contains(l)).count(), 10);
        let m = build_mapped_distance_matrix(&t, &map).unwrap();
        assert_eq!(m.classes()[0], "airplane");
        let cat = m.index_of("cat").unwrap();
        let dog = m.index_of("dog").unwrap();
        let truck = m.index_of("truck").unwrap();
        assert!(m.get(cat, dog) < m.get(cat, truck));
    }

    #[test]
    fn csv_round_trip_and_significant_digits() {
        let t = KnowledgeTree::from_edges(
            "r",
            &[("r".into(), "a".into(), 1.0 / 3.0), ("r".into(), "b".into(), 12.5)],
        )
        .unwrap();
        let m = build_distance_matrix(&t, &["a", "b"]).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv, "class,a,b\na,0,12.8333333\nb,12.8333333,0\n");
        let back = DistanceMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.classes(), m.classes());
        assert!((back.get(0, 1) - m.get(0, 1)).abs() < 1e-6);
        assert_eq!(format_sig9(2.0), "2.00000000");
        assert_eq!(format_sig9(0.5), "0.500000000");
    }

    #[test]
    fn from_values_rejects_asymmetry() {
        let err = DistanceMatrix::from_values(vec!["a".into(), "b".into()], vec![0.0, 1.0, 2.0, 0.0]);
        assert!(err.is_err());
    }

    /// Random tree with `n` nodes: node i attaches to a uniformly chosen earlier node.
    fn random_tree(n: usize, seed: u64, weighted: bool) -> KnowledgeTree {
        let mut r = crate::rng::stream(seed, 0);
        let edges: Vec<(String, String, f64)> = (1..n)
            .map(|i| {
                let p = r.gen_range(0..i);
                let w = if weighted { r.gen_range(0.1..3.0) } else { 1.0 };
                (format!("v{p}"), format!("v{i}"), w)
            })
            .collect();
        KnowledgeTree::from_edges("v0", &edges).unwrap()
    }

    proptest! {
        #[test]
        fn uniform_scaling_scales_matrix(seed in 0u64..1000, c in 0.01f64..50.0) {
            let t = random_tree(20, seed, true);
            let names: Vec<&str> = t.nodes().iter().map(|n| n.name.as_str()).collect();
            let m = build_distance_matrix(&t, &names).unwrap();
            let ms = build_distance_matrix(&t.scaled(c), &names).unwrap();
            for (a, b) in m.values().iter().zip(ms.values()) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn tree_distance_axioms(seed in 0u64..1000) {
            let t = random_tree(30, seed, true);
            let mut r = crate::rng::stream(seed, 1);
            for _ in 0..50 {
                let (a, b, c) = (r.gen_range(0..30), r.gen_range(0..30), r.gen_range(0..30));
                let ab = t.distance_by_id(a, b);
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab == 0.0, a == b);
                prop_assert_eq!(ab, t.distance_by_id(b, a));
                prop_assert!(ab <= t.distance_by_id(a, c) + t.distance_by_id(c, b) + 1e-12);
            }
        }
    }
}
