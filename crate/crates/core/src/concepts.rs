//! Concept-dictionary analysis: which object classes and which spoken word
//! drive each embedding dimension, scored by Wu-Palmer similarity over a
//! label taxonomy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WordAlignment;
use crate::error::{io_err, Error, Result};
use crate::eval::INPUT_FRAME_RATE;
use crate::model::{AudioFeatureMap, ImageFeatureMap};
use crate::tensor::{LabelTensor, Scalar, Tensor};

pub const TOP_K: usize = 5;
pub const LEARNED_THRESHOLD: f64 = 0.6;
pub const NO_WORD: &str = "(none)";

/// Rooted label tree; the root has depth 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    pub root: String,
    parent: BTreeMap<String, String>,
    depth: BTreeMap<String, usize>,
}

impl Taxonomy {
    pub fn from_edges(edges: &[(String, String)]) -> Result<Self> {
        let mut parent = BTreeMap::new();
        let mut nodes = BTreeSet::new();
        for (p, c) in edges {
            if p == c {
                return Err(Error::InvalidArgument(format!("taxonomy edge `{p}` -> `{c}` is a self loop")));
            }
            if let Some(old) = parent.insert(c.clone(), p.clone()) {
                if old != *p {
                    return Err(Error::InvalidArgument(format!("`{c}` has two parents (`{old}`, `{p}`)")));
                }
            }
            nodes.insert(p.clone());
            nodes.insert(c.clone());
        }
        let roots: Vec<&String> = nodes.iter().filter(|n| !parent.contains_key(*n)).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidArgument(format!("taxonomy must have exactly one root, found {}", roots.len())));
        }
        let root = roots[0].clone();
        let mut depth = BTreeMap::new();
        for n in &nodes {
            let mut d = 1;
            let mut cur = n;
            while let Some(p) = parent.get(cur) {
                d += 1;
                if d > nodes.len() {
                    return Err(Error::InvalidArgument(format!("taxonomy has a cycle through `{n}`")));
                }
                cur = p;
            }
            depth.insert(n.clone(), d);
        }
        Ok(Self { root, parent, depth })
    }

    /// One `parent<TAB>child` edge per line.
    pub fn parse(text: &str) -> Result<Self> {
        let edges = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty())
            .map(|l| match l.split_once('\t') {
                Some((p, c)) if !p.is_empty() && !c.is_empty() && !c.contains('\t') => Ok((p.to_string(), c.to_string())),
                _ => Err(Error::InvalidArgument(format!("taxonomy line `{l}` is not `parent<TAB>child`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_edges(&edges)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.depth.contains_key(label)
    }

    pub fn depth(&self, label: &str) -> Result<usize> {
        self.depth
            .get(label)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label `{label}` is not in the taxonomy")))
    }

    /// Path from `label` up to the root, inclusive.
    pub fn ancestors(&self, label: &str) -> Result<Vec<&str>> {
        self.depth(label)?;
        let mut out = vec![self.depth.get_key_value(label).unwrap().0.as_str()];
        let mut cur = label;
        while let Some(p) = self.parent.get(cur) {
            out.push(p.as_str());
            cur = p;
        }
        Ok(out)
    }

    pub fn lcs(&self, a: &str, b: &str) -> Result<&str> {
        let up: BTreeSet<&str> = self.ancestors(a)?.into_iter().collect();
        Ok(self.ancestors(b)?.into_iter().find(|n| up.contains(n)).expect("single root"))
    }
}

/// `2·depth(lcs) / (depth(a) + depth(b))`.
pub fn wu_palmer(t: &Taxonomy, a: &str, b: &str) -> Result<f64> {
    let l = t.lcs(a, b)?;
    Ok(2.0 * t.depth(l)? as f64 / (t.depth(a)? + t.depth(b)?) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageActivation {
    pub index: usize,
    pub score: f64,
    /// Row-major `R × C` cells within 50% of the image's peak for the dimension.
    pub mask: Vec<bool>,
}

fn check_dim(d: usize, dim: usize) -> Result<()> {
    if d >= dim {
        return Err(Error::InvalidArgument(format!("dimension {d} out of range for D = {dim}")));
    }
    Ok(())
}

/// Images ranked by their peak activation of dimension `d` (stable for ties).
pub fn top_activated_images<T: Scalar>(maps: &[ImageFeatureMap<T>], d: usize, k: usize) -> Result<Vec<ImageActivation>> {
    let mut acts = Vec::with_capacity(maps.len());
    for (index, m) in maps.iter().enumerate() {
        check_dim(d, m.dim())?;
        let rc = m.rows() * m.cols();
        let plane: Vec<f64> = m.grid.data()[d * rc..(d + 1) * rc].iter().map(|v| v.to_f64()).collect();
        let peak = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cut = peak - 0.5 * peak.abs();
        acts.push(ImageActivation {
            index,
            score: peak,
            mask: plane.iter().map(|&v| v >= cut).collect(),
        });
    }
    acts.sort_by(|a, b| b.score.total_cmp(&a.score));
    acts.truncate(k);
    Ok(acts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordActivation {
    pub index: usize,
    pub score: f64,
    pub frame: usize,
    pub word: String,
}

/// Captions ranked by peak activation of `d`; the peak frame maps back to
/// input frames `[t·ds, (t+1)·ds)` and the aligned word overlapping them most.
pub fn top_activated_words<T: Scalar>(
    maps: &[AudioFeatureMap<T>],
    alignments: &[Vec<WordAlignment>],
    d: usize,
    k: usize,
) -> Result<Vec<WordActivation>> {
    if maps.len() != alignments.len() {
        return Err(Error::InvalidArgument(format!("{} captions vs {} alignment lists", maps.len(), alignments.len())));
    }
    let mut acts = Vec::with_capacity(maps.len());
    for (index, m) in maps.iter().enumerate() {
        check_dim(d, m.dim())?;
        let nt = m.len();
        let row = &m.seq.data()[d * nt..(d + 1) * nt];
        let mut frame = 0;
        for t in 1..nt {
            if row[t] > row[frame] {
                frame = t;
            }
        }
        let ds = m.frames_per_cell;
        let (a, b) = ((frame * ds) as f64 / INPUT_FRAME_RATE, ((frame + 1) * ds) as f64 / INPUT_FRAME_RATE);
        let mut best: Option<(f64, &str)> = None;
        for al in &alignments[index] {
            let ov = b.min(al.t2) - a.max(al.t1);
            if ov > 0.0 && best.is_none_or(|(bo, _)| ov > bo) {
                best = Some((ov, &al.word));
            }
        }
        acts.push(WordActivation {
            index,
            score: row[frame].to_f64(),
            frame,
            word: best.map_or(NO_WORD.to_string(), |b| b.1.to_string()),
        });
    }
    acts.sort_by(|a, b| b.score.total_cmp(&a.score));
    acts.truncate(k);
    Ok(acts)
}

/// Most frequent word among the activations, ignoring unaligned ones; ties
/// go to the lexicographically smallest word.
pub fn modal_word(acts: &[WordActivation]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in acts.iter().filter(|a| a.word != NO_WORD) {
        *counts.entry(&a.word).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(w, _)| w.to_string())
}

/// Normalized IoU weight of every object class against the activation masks
/// of the given images; unlabeled pixels are excluded throughout.
pub fn object_weights(
    acts: &[ImageActivation],
    labels: &[LabelTensor],
    label_names: &[String],
    cell_size: usize,
) -> Result<Vec<(String, f64)>> {
    let mut inter: BTreeMap<u16, usize> = BTreeMap::new();
    let mut class_px: BTreeMap<u16, usize> = BTreeMap::new();
    let mut per_image: Vec<(usize, BTreeMap<u16, usize>)> = Vec::new();
    for a in acts {
        let lab = labels
            .get(a.index)
            .ok_or_else(|| Error::InvalidArgument(format!("no label map for image {}", a.index)))?;
        let (h, w) = (lab.shape[0], lab.shape[1]);
        let cols = w.div_ceil(cell_size);
        let mut masked_labeled = 0;
        let mut in_mask: BTreeMap<u16, usize> = BTreeMap::new();
        for y in 0..h {
            for x in 0..w {
                let l = lab.data[y * w + x];
                if l == 0 {
                    continue;
                }
                *class_px.entry(l).or_default() += 1;
                let cell = (y / cell_size) * cols + x / cell_size;
                if a.mask.get(cell).copied().unwrap_or(false) {
                    masked_labeled += 1;
                    *in_mask.entry(l).or_default() += 1;
                }
            }
        }
        for (&l, &n) in &in_mask {
            *inter.entry(l).or_default() += n;
        }
        per_image.push((masked_labeled, in_mask));
    }
    let masked_total: usize = per_image.iter().map(|p| p.0).sum();
    let mut weights = Vec::new();
    for (&l, &i) in &inter {
        // |mask ∪ class| = |mask| + |class| - |mask ∩ class| over labeled pixels
        let union = masked_total + class_px[&l] - i;
        let name = label_names
            .get(l as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} has no name")))?;
        weights.push((name.clone(), i as f64 / union as f64));
    }
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if total > 0.0 {
        for w in &mut weights {
            w.1 /= total;
        }
    }
    weights.retain(|w| w.1 > 0.0);
    Ok(weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub dimension: usize,
    pub word: Option<String>,
    pub objects: Vec<(String, f64)>,
    pub value: f64,
}

/// `c = Σ w_i · wu_palmer(o_i, word)`.
pub fn concept_value(objects: &[(String, f64)], word: &str, t: &Taxonomy) -> Result<f64> {
    t.depth(word)?;
    if objects.is_empty() {
        log::warn!("empty object set for word `{word}`, concept value 0");
        return Ok(0.0);
    }
    let mut c = 0.0;
    for (o, w) in objects {
        c += w * wu_palmer(t, o, word)?;
    }
    Ok(c)
}

/// Dimensions with `c > threshold` (strict).
pub fn count_learned_concepts(scores: &[f64], threshold: f64) -> usize {
    scores.iter().filter(|&&c| c > threshold).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub k: usize,
    pub threshold: f64,
    pub dimensions: Vec<ConceptScore>,
    pub learned: usize,
}

/// Scores every embedding dimension.
pub fn concept_report<T: Scalar>(
    images: &[ImageFeatureMap<T>],
    audio: &[AudioFeatureMap<T>],
    alignments: &[Vec<WordAlignment>],
    labels: &[LabelTensor],
    label_names: &[String],
    taxonomy: &Taxonomy,
    k: usize,
    threshold: f64,
) -> Result<ConceptReport> {
    let dim = images
        .first()
        .map(|m| m.dim())
        .ok_or_else(|| Error::InvalidArgument("no images to analyse".into()))?;
    let mut dims = Vec::with_capacity(dim);
    for d in 0..dim {
        let img = top_activated_images(images, d, k)?;
        let words = top_activated_words(audio, alignments, d, k)?;
        let word = modal_word(&words);
        let objects = object_weights(&img, labels, label_names, images[0].cell_size)?;
        let value = match &word {
            Some(w) if taxonomy.contains(w) => concept_value(&objects, w, taxonomy)?,
            Some(w) => {
                log::warn!("dimension {d}: word `{w}` is not in the taxonomy, scored 0");
                0.0
            }
            None => 0.0,
        };
        dims.push(ConceptScore {
            dimension: d,
            word,
            objects,
            value,
        });
    }
    let values: Vec<f64> = dims.iter().map(|s| s.value).collect();
    Ok(ConceptReport {
        k,
        threshold,
        learned: count_learned_concepts(&values, threshold),
        dimensions: dims,
    })
}

/// Ground-truth feature maps: image dimension `l - 1` is the fraction of each
/// cell covered by label `l`, audio dimension `l - 1` is 1 on the frames
/// inside that label's spoken word.
pub fn oracle_features(
    labels: &LabelTensor,
    alignments: &[WordAlignment],
    label_names: &[String],
    cell_size: usize,
    frames: usize,
    downsample: usize,
) -> Result<(ImageFeatureMap<f64>, AudioFeatureMap<f64>)> {
    let dim = label_names.len() - 1;
    let (h, w) = (labels.shape[0], labels.shape[1]);
    let (rows, cols) = (h.div_ceil(cell_size), w.div_ceil(cell_size));
    let mut grid = vec![0.0; dim * rows * cols];
    let area = (cell_size * cell_size) as f64;
    for y in 0..h {
        for x in 0..w {
            let l = labels.data[y * w + x] as usize;
            if l > 0 {
                grid[((l - 1) * rows + y / cell_size) * cols + x / cell_size] += 1.0 / area;
            }
        }
    }
    let nt = frames.div_ceil(downsample);
    let mut seq = vec![0.0; dim * nt];
    for a in alignments {
        let Some(l) = label_names.iter().position(|n| *n == a.word).filter(|&l| l > 0) else {
            continue;
        };
        for t in 0..nt {
            let mid = (t as f64 + 0.5) * downsample as f64 / INPUT_FRAME_RATE;
            if mid >= a.t1 && mid < a.t2 {
                seq[(l - 1) * nt + t] = 1.0;
            }
        }
    }
    Ok((
        ImageFeatureMap::new(Tensor::new(vec![dim, rows, cols], grid)?, cell_size)?,
        AudioFeatureMap::new(Tensor::new(vec![dim, nt], seq)?, downsample)?,
    ))
}
