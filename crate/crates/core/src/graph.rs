//! Facial connectivity graphs and the masked, symmetrically normalized
//! adjacency used by every graph-convolution unit.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::normalize_masked;
use crate::error::{Error, Result};
use crate::landmarks::Point;
use crate::tensor::{Scalar, Tensor};

/// Degree floor applied before `Λ^{-1/2}`.
pub const DEGREE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flip_permutation: Option<Vec<usize>>,
}

impl FaceGraph {
    /// Validates and canonicalizes edges to `(min, max)`.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        flip_permutation: Option<Vec<usize>>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let mut seen = BTreeSet::new();
        let mut canon = Vec::with_capacity(edges.len());
        for &(i, j) in &edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::Graph(format!(
                    "edge [{i}, {j}] out of range for {num_nodes} nodes"
                )));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop on node {i}")));
            }
            let e = (i.min(j), i.max(j));
            if !seen.insert(e) {
                return Err(Error::Graph(format!("duplicate edge [{}, {}]", e.0, e.1)));
            }
            canon.push(e);
        }
        if let Some(p) = &flip_permutation {
            if p.len() != num_nodes {
                return Err(Error::Graph(format!(
                    "flip permutation has {} entries for {num_nodes} nodes",
                    p.len()
                )));
            }
            if p.iter().any(|&v| v >= num_nodes) {
                return Err(Error::Graph("flip permutation index out of range".into()));
            }
            if (0..num_nodes).any(|i| p[p[i]] != i) {
                return Err(Error::Graph("flip permutation is not an involution".into()));
            }
        }
        Ok(Self {
            num_nodes,
            edges: canon,
            flip_permutation,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn flip_permutation(&self) -> Option<&[usize]> {
        self.flip_permutation.as_deref()
    }

    /// `A + I` as a dense matrix.
    pub fn adjacency_with_self_loops<T: Scalar>(&self) -> Tensor<T> {
        let n = self.num_nodes;
        let mut a = Tensor::zeros(&[n, n]);
        let d = a.data_mut();
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        for &(i, j) in &self.edges {
            d[i * n + j] = T::one();
            d[j * n + i] = T::one();
        }
        a
    }

    /// Relabels nodes: old node `i` becomes node `new_of_old[i]`.
    pub fn relabel(&self, new_of_old: &[usize]) -> Result<Self> {
        if new_of_old.len() != self.num_nodes {
            return Err(Error::Graph("relabeling has the wrong length".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(i, j)| (new_of_old[i], new_of_old[j]))
            .collect();
        let flip = self.flip_permutation.as_ref().map(|p| {
            let mut out = vec![0; self.num_nodes];
            for i in 0..self.num_nodes {
                out[new_of_old[i]] = new_of_old[p[i]];
            }
            out
        });
        Self::new(self.num_nodes, edges, flip)
    }

    /// Whether every node is reachable from node 0.
    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    pub fn hash(&self) -> String {
        crate::hash::json_digest(self)
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<FaceGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: FaceGraph = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    FaceGraph::new(raw.num_nodes, raw.edges, raw.flip_permutation)
}

pub fn write_graph(path: impl AsRef<Path>, graph: &FaceGraph) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(graph)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `Λ^{-1/2} ((A + I) ⊙ M) Λ^{-1/2}` for a particular mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedOperator<T>(pub Tensor<T>);

impl<T: Scalar> NormalizedOperator<T> {
    pub fn matrix(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Masked symmetric normalization with `Λ_ii = max(Σ_j M_ij (A+I)_ij, ε)`.
pub fn normalized_adjacency<T: Scalar>(graph: &FaceGraph, mask: &Tensor<T>) -> Result<NormalizedOperator<T>> {
    let n = graph.num_nodes();
    if mask.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "mask {:?} for a {n}-node graph",
            mask.shape()
        )));
    }
    mask.ensure_finite("adjacency mask")?;
    let base = graph.adjacency_with_self_loops::<T>();
    let (out, _) = normalize_masked(base.data(), mask.data(), n, T::of(DEGREE_EPS));
    Ok(NormalizedOperator(Tensor::new(vec![n, n], out)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LeftEye,
    RightEye,
    LeftBrow,
    RightBrow,
    Mouth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub region: Region,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bridge {
    pub a: Anchor,
    pub b: Anchor,
}

/// Region sizes for the generated ring template: two eye rings, two brow
/// arcs and one mouth ring, laid out in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub num_nodes: usize,
    pub eye: usize,
    pub brow: usize,
    pub mouth: usize,
    /// Cross-region edges; `None` uses [`TemplateConfig::default_bridges`].
    #[serde(default)]
    pub bridges: Option<Vec<Bridge>>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TemplateConfig {
    /// 48 landmarks for quick experiments.
    pub fn desk() -> Self {
        Self {
            num_nodes: 48,
            eye: 12,
            brow: 6,
            mouth: 12,
            bridges: None,
        }
    }

    /// 246 landmarks around the eyes and mouth.
    pub fn full() -> Self {
        Self {
            num_nodes: 246,
            eye: 73,
            brow: 20,
            mouth: 60,
            bridges: None,
        }
    }

    pub fn region_size(&self, region: Region) -> usize {
        match region {
            Region::LeftEye | Region::RightEye => self.eye,
            Region::LeftBrow | Region::RightBrow => self.brow,
            Region::Mouth => self.mouth,
        }
    }

    pub fn region_offset(&self, region: Region) -> usize {
        match region {
            Region::LeftEye => 0,
            Region::RightEye => self.eye,
            Region::LeftBrow => 2 * self.eye,
            Region::RightBrow => 2 * self.eye + self.brow,
            Region::Mouth => 2 * self.eye + 2 * self.brow,
        }
    }

    /// Global node range of a region.
    pub fn region_nodes(&self, region: Region) -> std::ops::Range<usize> {
        let o = self.region_offset(region);
        o..o + self.region_size(region)
    }

    fn validate(&self) -> Result<()> {
        let total = 2 * self.eye + 2 * self.brow + self.mouth;
        if total != self.num_nodes {
            return Err(Error::Graph(format!(
                "region sizes sum to {total}, expected {}",
                self.num_nodes
            )));
        }
        if self.eye < 4 || self.mouth < 4 || self.brow < 2 {
            return Err(Error::Graph(
                "eye and mouth rings need >= 4 nodes, brows >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Brow-to-eye, eye-to-eye and eye-to-mouth links, mirror-symmetric.
    pub fn default_bridges(&self) -> Vec<Bridge> {
        let at = |region, index| Anchor { region, index };
        let eye_top = 0;
        let eye_inner = (3 * self.eye).div_ceil(4) % self.eye;
        let eye_bottom = self.eye / 2;
        let brow_mid = self.brow / 2;
        let mouth_left = self.mouth / 4;
        let mouth_right = (self.mouth - mouth_left) % self.mouth;
        vec![
            Bridge { a: at(Region::LeftBrow, brow_mid), b: at(Region::LeftEye, eye_top) },
            Bridge { a: at(Region::RightBrow, brow_mid), b: at(Region::RightEye, eye_top) },
            Bridge { a: at(Region::LeftEye, eye_inner), b: at(Region::RightEye, eye_inner) },
            Bridge { a: at(Region::LeftEye, eye_bottom), b: at(Region::Mouth, mouth_left) },
            Bridge { a: at(Region::RightEye, eye_bottom), b: at(Region::Mouth, mouth_right) },
        ]
    }
}

/// Ring angle for node `k` of `n`, starting at the top and running
/// counter-clockwise, so mirroring maps `k` to `(n - k) mod n`.
fn ring_angle(k: usize, n: usize) -> f64 {
    FRAC_PI_2 + 2.0 * PI * k as f64 / n as f64
}

pub const LEFT_EYE_CENTER: Point = [-0.3, 0.2];
pub const EYE_RADII: Point = [0.12, 0.05];
pub const MOUTH_CENTER: Point = [0.0, -0.35];
pub const MOUTH_RADII: Point = [0.2, 0.07];

/// Builds the ring template graph and its canonical landmark positions
/// (x to the right, y up).
pub fn build_template_graph(config: &TemplateConfig) -> Result<(FaceGraph, Vec<Point>)> {
    config.validate()?;
    let n = config.num_nodes;
    let mut pos = vec![[0.0; 2]; n];
    let mut edges = Vec::new();
    let mut flip = vec![0usize; n];

    let (le, re) = (config.region_offset(Region::LeftEye), config.region_offset(Region::RightEye));
    for k in 0..config.eye {
        let a = ring_angle(k, config.eye);
        let p = [
            LEFT_EYE_CENTER[0] + EYE_RADII[0] * a.cos(),
            LEFT_EYE_CENTER[1] + EYE_RADII[1] * a.sin(),
        ];
        pos[le + k] = p;
        pos[re + k] = [-p[0], p[1]];
        flip[le + k] = re + k;
        flip[re + k] = le + k;
        let next = (k + 1) % config.eye;
        edges.push((le + k, le + next));
        edges.push((re + k, re + next));
    }

    let (lb, rb) = (config.region_offset(Region::LeftBrow), config.region_offset(Region::RightBrow));
    for k in 0..config.brow {
        let u = 2.0 * k as f64 / (config.brow - 1) as f64 - 1.0;
        let p = [LEFT_EYE_CENTER[0] + 0.15 * u, LEFT_EYE_CENTER[1] + 0.13 + 0.04 * (1.0 - u * u)];
        pos[lb + k] = p;
        pos[rb + k] = [-p[0], p[1]];
        flip[lb + k] = rb + k;
        flip[rb + k] = lb + k;
        if k + 1 < config.brow {
            edges.push((lb + k, lb + k + 1));
            edges.push((rb + k, rb + k + 1));
        }
    }

    let mo = config.region_offset(Region::Mouth);
    for k in 0..config.mouth {
        let a = ring_angle(k, config.mouth);
        pos[mo + k] = [
            MOUTH_CENTER[0] + MOUTH_RADII[0] * a.cos(),
            MOUTH_CENTER[1] + MOUTH_RADII[1] * a.sin(),
        ];
        flip[mo + k] = mo + (config.mouth - k) % config.mouth;
        edges.push((mo + k, mo + (k + 1) % config.mouth));
    }

    let bridges = config
        .bridges
        .clone()
        .unwrap_or_else(|| config.default_bridges());
    for b in &bridges {
        let mut ends = [0usize; 2];
        for (slot, anchor) in ends.iter_mut().zip([b.a, b.b]) {
            if anchor.index >= config.region_size(anchor.region) {
                return Err(Error::Graph(format!(
                    "bridge anchor {:?}[{}] out of range",
                    anchor.region, anchor.index
                )));
            }
            *slot = config.region_offset(anchor.region) + anchor.index;
        }
        edges.push((ends[0], ends[1]));
    }

    let graph = FaceGraph::new(n, edges, Some(flip))?;
    Ok((graph, pos))
}
