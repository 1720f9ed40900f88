//! Audio-visual pattern discovery: matchmap components are pooled into paired
//! image/audio vectors, clustered with a CF-tree (Birch) followed by an
//! average-linkage agglomerative merge, and scored for label purity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::compute_matchmap;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{eval_input, eval_labels, INPUT_FRAME_RATE};
use crate::image::ImageStats;
use crate::model::{AudioFeatureMap, ImageFeatureMap, Model};
use crate::par::Exec;
use crate::post::{binarize_sigma, connected_components, temporal_smooth, ComponentRecord, SmoothKind};
use crate::tensor::Scalar;

/// Mean image vector over the component's spatial projection and mean audio
/// vector over its frame interval.
pub fn pool_component_features<T: Scalar>(
    comp: &ComponentRecord,
    img: &ImageFeatureMap<T>,
    aud: &AudioFeatureMap<T>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cells: Vec<usize> = comp.image_mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if cells.is_empty() || comp.voxels.is_empty() {
        return Err(Error::InvalidArgument(format!("component {} has an empty mask", comp.id)));
    }
    if (comp.rows, comp.cols) != (img.rows(), img.cols()) || comp.t_end >= aud.len() {
        return Err(Error::InvalidArgument(format!(
            "component {} does not fit the {}x{} grid / {} frames",
            comp.id,
            img.rows(),
            img.cols(),
            aud.len()
        )));
    }
    let (d, rc) = (img.dim(), img.rows() * img.cols());
    let g = img.grid.data();
    let image = (0..d)
        .map(|k| cells.iter().map(|&i| g[k * rc + i].to_f64()).sum::<f64>() / cells.len() as f64)
        .collect();
    let (nt, a) = (aud.len(), aud.seq.data());
    let span = comp.t_end - comp.t_start + 1;
    let audio = (0..aud.dim())
        .map(|k| (comp.t_start..=comp.t_end).map(|t| a[k * nt + t].to_f64()).sum::<f64>() / span as f64)
        .collect();
    Ok((image, audio))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Divides every image vector by the mean image L2 norm and every audio vector
/// by the mean audio L2 norm, then concatenates (image first).
pub fn rescale_by_avg_norm(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no component features to rescale".into()));
    }
    let n = pairs.len() as f64;
    let mi = pairs.iter().map(|p| norm(&p.0)).sum::<f64>() / n;
    let ma = pairs.iter().map(|p| norm(&p.1)).sum::<f64>() / n;
    if !(mi > 0.0) || !(ma > 0.0) {
        return Err(Error::InvalidArgument("zero mean feature norm, cannot rescale".into()));
    }
    Ok(pairs
        .iter()
        .map(|(i, a)| i.iter().map(|x| x / mi).chain(a.iter().map(|x| x / ma)).collect())
        .collect())
}

/// Clustering feature: count, linear sum and sum of squared norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cf {
    pub n: usize,
    pub ls: Vec<f64>,
    pub ss: f64,
}

impl Cf {
    pub fn point(x: &[f64]) -> Self {
        Self {
            n: 1,
            ls: x.to_vec(),
            ss: x.iter().map(|v| v * v).sum(),
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            n: 0,
            ls: vec![0.0; dim],
            ss: 0.0,
        }
    }

    pub fn add(&mut self, o: &Cf) {
        self.n += o.n;
        for (a, b) in self.ls.iter_mut().zip(&o.ls) {
            *a += b;
        }
        self.ss += o.ss;
    }

    pub fn merged(&self, o: &Cf) -> Cf {
        let mut m = self.clone();
        m.add(o);
        m
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.ls.iter().map(|v| v / self.n as f64).collect()
    }

    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        (self.ss / self.n as f64 - c.iter().map(|v| v * v).sum::<f64>()).max(0.0).sqrt()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BirchConfig {
    pub threshold: f64,
    pub branching: usize,
    /// Maximum number of leaf subclusters; the threshold grows until it holds.
    pub max_leaves: usize,
}

impl Default for BirchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            branching: 50,
            max_leaves: 64,
        }
    }
}

/// A leaf subcluster with the indices of the points it absorbed.
#[derive(Clone, Debug, PartialEq)]
pub struct Subcluster {
    pub cf: Cf,
    pub members: Vec<usize>,
}

struct Entry {
    cf: Cf,
    child: Option<usize>,
    members: Vec<usize>,
}

struct Node {
    entries: Vec<Entry>,
    leaf: bool,
}

struct CfTree {
    nodes: Vec<Node>,
    root: usize,
    threshold: f64,
    branching: usize,
}

impl CfTree {
    fn new(threshold: f64, branching: usize) -> Self {
        Self {
            nodes: vec![Node {
                entries: Vec::new(),
                leaf: true,
            }],
            root: 0,
            threshold,
            branching,
        }
    }

    fn nearest(&self, node: usize, x: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.nodes[node].entries.iter().enumerate() {
            let d = dist2(&e.cf.centroid(), x);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|b| b.0)
    }

    fn insert(&mut self, id: usize, x: &[f64]) {
        let point = Cf::point(x);
        if let Some(split) = self.insert_at(self.root, id, &point) {
            let old = self.root;
            let mut cf_a = Cf::empty(x.len());
            for e in &self.nodes[old].entries {
                cf_a.add(&e.cf);
            }
            let mut cf_b = Cf::empty(x.len());
            for e in &self.nodes[split].entries {
                cf_b.add(&e.cf);
            }
            self.nodes.push(Node {
                entries: vec![
                    Entry {
                        cf: cf_a,
                        child: Some(old),
                        members: Vec::new(),
                    },
                    Entry {
                        cf: cf_b,
                        child: Some(split),
                        members: Vec::new(),
                    },
                ],
                leaf: false,
            });
            self.root = self.nodes.len() - 1;
        }
    }

    /// Inserts below `node`; returns a new sibling node when `node` split.
    fn insert_at(&mut self, node: usize, id: usize, point: &Cf) -> Option<usize> {
        if self.nodes[node].leaf {
            match self.nearest(node, &point.ls) {
                Some(i) if self.nodes[node].entries[i].cf.merged(point).radius() <= self.threshold => {
                    let e = &mut self.nodes[node].entries[i];
                    e.cf.add(point);
                    e.members.push(id);
                }
                _ => self.nodes[node].entries.push(Entry {
                    cf: point.clone(),
                    child: None,
                    members: vec![id],
                }),
            }
        } else {
            let i = self.nearest(node, &point.ls).expect("internal node has entries");
            let child = self.nodes[node].entries[i].child.expect("internal entry has a child");
            let split = self.insert_at(child, id, point);
            match split {
                None => self.nodes[node].entries[i].cf.add(point),
                Some(sib) => {
                    let dim = point.ls.len();
                    let recompute = |nodes: &Vec<Node>, n: usize| {
                        let mut cf = Cf::empty(dim);
                        for e in &nodes[n].entries {
                            cf.add(&e.cf);
                        }
                        cf
                    };
                    self.nodes[node].entries[i].cf = recompute(&self.nodes, child);
                    let cf = recompute(&self.nodes, sib);
                    self.nodes[node].entries.insert(
                        i + 1,
                        Entry {
                            cf,
                            child: Some(sib),
                            members: Vec::new(),
                        },
                    );
                }
            }
        }
        if self.nodes[node].entries.len() > self.branching {
            Some(self.split(node))
        } else {
            None
        }
    }

    /// Farthest-pair seeding: each entry joins the closer seed.
    fn split(&mut self, node: usize) -> usize {
        let entries = std::mem::take(&mut self.nodes[node].entries);
        let cents: Vec<Vec<f64>> = entries.iter().map(|e| e.cf.centroid()).collect();
        let (mut sa, mut sb, mut far) = (0, 1, -1.0);
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let d = dist2(&cents[i], &cents[j]);
                if d > far {
                    (sa, sb, far) = (i, j, d);
                }
            }
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, e) in entries.into_iter().enumerate() {
            let to_b = i == sb || (i != sa && dist2(&cents[i], &cents[sb]) < dist2(&cents[i], &cents[sa]));
            if to_b {
                b.push(e);
            } else {
                a.push(e);
            }
        }
        let leaf = self.nodes[node].leaf;
        self.nodes[node].entries = a;
        self.nodes.push(Node { entries: b, leaf });
        self.nodes.len() - 1
    }

    fn leaves(&self) -> Vec<Subcluster> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.leaf {
                out.extend(node.entries.iter().map(|e| Subcluster {
                    cf: e.cf.clone(),
                    members: e.members.clone(),
                }));
            } else {
                stack.extend(node.entries.iter().rev().filter_map(|e| e.child));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BirchResult {
    pub subclusters: Vec<Subcluster>,
    /// Threshold of the final (accepted) tree.
    pub threshold: f64,
}

/// Single-pass CF-tree build; rebuilt with a larger threshold while the leaf
/// count exceeds `max_leaves`.
pub fn birch_fit(vectors: &[Vec<f64>], cfg: &BirchConfig) -> Result<BirchResult> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("birch_fit needs at least one vector".into()));
    }
    if !(cfg.threshold > 0.0) || cfg.branching < 2 || cfg.max_leaves == 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid Birch settings (threshold {}, branching {}, max leaves {})",
            cfg.threshold, cfg.branching, cfg.max_leaves
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidArgument("birch_fit vectors must be finite and equally sized".into()));
    }
    let mut threshold = cfg.threshold;
    loop {
        let mut tree = CfTree::new(threshold, cfg.branching);
        for (i, v) in vectors.iter().enumerate() {
            tree.insert(i, v);
        }
        let subclusters = tree.leaves();
        if subclusters.len() <= cfg.max_leaves {
            return Ok(BirchResult { subclusters, threshold });
        }
        log::debug!("birch: {} leaves at threshold {threshold:.4}, growing", subclusters.len());
        threshold *= 1.25;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Point indices of the members.
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Average-linkage merging over count-weighted subcluster centroids until
/// `target_k` clusters remain; ties merge the lowest index pair.
pub fn agglomerative_merge(subclusters: &[Subcluster], target_k: usize) -> Result<Vec<Cluster>> {
    if target_k == 0 {
        return Err(Error::InvalidArgument("target cluster count must be positive".into()));
    }
    if target_k > subclusters.len() {
        return Err(Error::InvalidArgument(format!(
            "target of {target_k} clusters exceeds the {} subclusters",
            subclusters.len()
        )));
    }
    let m = subclusters.len();
    let cents: Vec<Vec<f64>> = subclusters.iter().map(|s| s.cf.centroid()).collect();
    let mut weight: Vec<f64> = subclusters.iter().map(|s| s.cf.n as f64).collect();
    let mut d = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let v = dist2(&cents[i], &cents[j]).sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    let mut groups: Vec<Option<Vec<usize>>> = (0..m).map(|i| Some(vec![i])).collect();
    let mut alive = m;
    while alive > target_k {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..m {
            if groups[i].is_none() {
                continue;
            }
            for j in i + 1..m {
                if groups[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, bd)| d[i][j] < bd) {
                    best = Some((i, j, d[i][j]));
                }
            }
        }
        let (i, j, _) = best.expect("at least two clusters alive");
        let (wi, wj) = (weight[i], weight[j]);
        for k in 0..m {
            if k != i && k != j && groups[k].is_some() {
                let v = (wi * d[i][k] + wj * d[j][k]) / (wi + wj);
                d[i][k] = v;
                d[k][i] = v;
            }
        }
        weight[i] = wi + wj;
        let moved = groups[j].take().unwrap();
        groups[i].as_mut().unwrap().extend(moved);
        alive -= 1;
    }
    Ok(groups
        .into_iter()
        .flatten()
        .map(|g| {
            let mut cf = Cf::empty(cents.first().map_or(0, |c| c.len()));
            let mut members = Vec::new();
            for s in g {
                cf.add(&subclusters[s].cf);
                members.extend(&subclusters[s].members);
            }
            members.sort_unstable();
            Cluster {
                members,
                centroid: cf.centroid(),
            }
        })
        .collect())
}

/// Word and object ground truth attached to a component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentLabels {
    pub word: Option<String>,
    /// Labeled (non-background) pixel counts under the component's image mask.
    pub object_pixels: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCluster {
    pub id: usize,
    pub size: usize,
    pub word: String,
    pub object: String,
    pub word_precision: f64,
    pub object_precision: f64,
    pub harmonic_mean: f64,
    pub members: Vec<usize>,
    /// Members without a word or any labeled pixel.
    pub unlabeled: usize,
}

pub fn harmonic_mean(p: f64, q: f64) -> f64 {
    if p + q == 0.0 {
        0.0
    } else {
        2.0 * p * q / (p + q)
    }
}

/// Highest count, ties to the lexicographically smallest key.
fn modal<'a>(counts: &'a BTreeMap<String, usize>) -> Option<(&'a String, usize)> {
    counts
        .iter()
        .fold(None, |best: Option<(&String, usize)>, (k, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
}

pub fn label_and_score(clusters: &[Cluster], labels: &[ComponentLabels]) -> Result<Vec<ScoredCluster>> {
    clusters
        .iter()
        .enumerate()
        .map(|(id, c)| {
            let mut words: BTreeMap<String, usize> = BTreeMap::new();
            let mut pixels: BTreeMap<String, usize> = BTreeMap::new();
            let mut unlabeled = 0;
            let mut labeled = 0;
            for &m in &c.members {
                let l = labels
                    .get(m)
                    .ok_or_else(|| Error::InvalidArgument(format!("no labels for component {m}")))?;
                match &l.word {
                    Some(w) if !l.object_pixels.is_empty() => {
                        labeled += 1;
                        *words.entry(w.clone()).or_default() += 1;
                        for (k, &v) in &l.object_pixels {
                            *pixels.entry(k.clone()).or_default() += v;
                        }
                    }
                    _ => unlabeled += 1,
                }
            }
            let (word, wp) = match modal(&words) {
                Some((w, n)) => (w.clone(), n as f64 / labeled as f64),
                None => (String::new(), 0.0),
            };
            let total_px: usize = pixels.values().sum();
            let (object, op) = match modal(&pixels) {
                Some((o, n)) => (o.clone(), n as f64 / total_px as f64),
                None => (String::new(), 0.0),
            };
            Ok(ScoredCluster {
                id,
                size: c.size(),
                word,
                object,
                word_precision: wp,
                object_precision: op,
                harmonic_mean: harmonic_mean(wp, op),
                members: c.members.clone(),
                unlabeled,
            })
        })
        .collect()
}

/// Adjusted Rand index of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("ARI needs two non-empty labelings of equal length".into()));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let total = c2(a.len() as u64);
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub smooth_width: usize,
    pub smooth: SmoothKind,
    pub sigma: f64,
    pub birch: BirchConfig,
    pub final_clusters: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            smooth_width: 7,
            smooth: SmoothKind::Avg,
            sigma: 1.5,
            birch: BirchConfig::default(),
            final_clusters: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub id: usize,
    pub sample: String,
    pub t_start: usize,
    pub t_end: usize,
    pub voxels: usize,
    pub labels: ComponentLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub components: usize,
    pub subclusters: usize,
    pub birch_threshold: f64,
    /// Clusters sorted by decreasing harmonic-mean purity.
    pub clusters: Vec<ScoredCluster>,
}

/// Word with the largest temporal overlap (ties to the earlier word) with
/// matchmap frames `[t_start, t_end]`.
pub fn overlapping_word(
    alignments: &[crate::data::WordAlignment],
    t_start: usize,
    t_end: usize,
    downsample: usize,
) -> Option<String> {
    let sec = downsample as f64 / INPUT_FRAME_RATE;
    let (a, b) = (t_start as f64 * sec, (t_end + 1) as f64 * sec);
    let mut best: Option<(f64, &str)> = None;
    for al in alignments {
        let ov = b.min(al.t2) - a.max(al.t1);
        if ov > 0.0 && best.is_none_or(|(bo, _)| ov > bo) {
            best = Some((ov, &al.word));
        }
    }
    best.map(|b| b.1.to_string())
}

/// Components of every sample, their pooled features and labels.
pub fn extract_components(
    model: &Model<f32>,
    stats: &ImageStats,
    corpus: &Corpus,
    cfg: &DiscoveryConfig,
    exec: Exec,
) -> Result<Vec<(ComponentSummary, (Vec<f64>, Vec<f64>))>> {
    let ds = model.config.audio.downsample_factor();
    let per_sample = exec.try_map_range(corpus.len(), |si| -> Result<Vec<_>> {
        let s = &corpus.samples[si];
        let img = model.encode_image(&eval_input(model, stats, s)?)?;
        let aud = model.encode_audio(&s.spec)?;
        let mm = temporal_smooth(&compute_matchmap(&img, &aud)?, cfg.smooth_width, cfg.smooth)?;
        let vol = binarize_sigma(&mm, cfg.sigma)?;
        let labels = eval_labels(model, s)?;
        let size = labels.shape[1];
        connected_components(&vol)
            .into_iter()
            .map(|comp| {
                let feats = pool_component_features(&comp, &img, &aud)?;
                let mut object_pixels: BTreeMap<String, usize> = BTreeMap::new();
                for (cell, _) in comp.image_mask.iter().enumerate().filter(|(_, &b)| b) {
                    let (y0, y1, x0, x1) = img.cell_box(cell / comp.cols, cell % comp.cols);
                    for y in y0..y1.min(labels.shape[0]) {
                        for x in x0..x1.min(size) {
                            let l = labels.data[y * size + x] as usize;
                            if l != 0 {
                                *object_pixels.entry(corpus.label_names[l].clone()).or_default() += 1;
                            }
                        }
                    }
                }
                let summary = ComponentSummary {
                    id: 0,
                    sample: s.id.clone(),
                    t_start: comp.t_start,
                    t_end: comp.t_end,
                    voxels: comp.size(),
                    labels: ComponentLabels {
                        word: overlapping_word(&s.alignments, comp.t_start, comp.t_end, ds),
                        object_pixels,
                    },
                };
                Ok((summary, feats))
            })
            .collect()
    })?;
    let mut out: Vec<_> = per_sample.into_iter().flatten().collect();
    for (i, (s, _)) in out.iter_mut().enumerate() {
        s.id = i;
    }
    Ok(out)
}

/// Full pipeline from components to the purity-sorted cluster report.
pub fn discover(
    components: &[(ComponentSummary, (Vec<f64>, Vec<f64>))],
    cfg: &DiscoveryConfig,
) -> Result<DiscoveryReport> {
    let pairs: Vec<_> = components.iter().map(|c| c.1.clone()).collect();
    let vectors = rescale_by_avg_norm(&pairs)?;
    // Too coarse a threshold leaves fewer subclusters than the merge target;
    // halve the starting threshold until the target is reachable.
    let mut birch_cfg = cfg.birch.clone();
    let mut birch = birch_fit(&vectors, &birch_cfg)?;
    let mut halvings = 0;
    while birch.subclusters.len() < cfg.final_clusters.min(vectors.len()) && halvings < 20 {
        birch_cfg.threshold /= 2.0;
        halvings += 1;
        birch = birch_fit(&vectors, &birch_cfg)?;
    }
    let k = cfg.final_clusters.min(birch.subclusters.len());
    let clusters = agglomerative_merge(&birch.subclusters, k)?;
    let labels: Vec<ComponentLabels> = components.iter().map(|c| c.0.labels.clone()).collect();
    let mut scored = label_and_score(&clusters, &labels)?;
    scored.sort_by(|a, b| b.harmonic_mean.total_cmp(&a.harmonic_mean).then(a.id.cmp(&b.id)));
    Ok(DiscoveryReport {
        components: components.len(),
        subclusters: birch.subclusters.len(),
        birch_threshold: birch.threshold,
        clusters: scored,
    })
}
