//! Matchmaps, the SISA/MISA/SIMA similarities and the sampled margin ranking
//! objective.
//!
//! The matchmap of an image grid `I[r,c,:]` and an audio sequence `A[t,:]` is
//! `M[r,c,t] = I[r,c,:]·A[t,:]`. The similarity functions reduce it:
//!
//! * SISA: mean over every cell (equal to the dot product of the globally
//!   average-pooled embeddings),
//! * MISA: mean over time of the spatial maximum,
//! * SIMA: mean over space of the temporal maximum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{AudioFeatureMap, ImageFeatureMap};
use crate::tensor::{matmul_into, Scalar, Tensor};

/// Fixed margin of the ranking objective.
pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Sisa,
    Misa,
    Sima,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 3] = [SimilarityKind::Sisa, SimilarityKind::Misa, SimilarityKind::Sima];
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::Sisa => "sisa",
            SimilarityKind::Misa => "misa",
            SimilarityKind::Sima => "sima",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            // "avg" is the retrieval-table name of the all-cells mean.
            "sisa" | "avg" => Ok(SimilarityKind::Sisa),
            "misa" => Ok(SimilarityKind::Misa),
            "sima" => Ok(SimilarityKind::Sima),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity `{other}` (expected sisa, misa or sima)"
            ))),
        }
    }
}

/// `Nr × Nc × Nt` similarity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Matchmap<T: Scalar = f32> {
    pub m: Tensor<T>,
}

impl<T: Scalar> Matchmap<T> {
    pub fn new(m: Tensor<T>) -> Result<Self> {
        if m.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "matchmap must be Nr x Nc x Nt, got {:?}",
                m.shape()
            )));
        }
        Ok(Self { m })
    }

    pub fn rows(&self) -> usize {
        self.m.shape()[0]
    }
    pub fn cols(&self) -> usize {
        self.m.shape()[1]
    }
    pub fn frames(&self) -> usize {
        self.m.shape()[2]
    }

    pub fn get(&self, r: usize, c: usize, t: usize) -> T {
        self.m.data()[(r * self.cols() + c) * self.frames() + t]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { m: self.m.map(f) }
    }
}

pub fn compute_matchmap<T: Scalar>(img: &ImageFeatureMap<T>, aud: &AudioFeatureMap<T>) -> Result<Matchmap<T>> {
    if img.dim() != aud.dim() {
        return Err(Error::Shape {
            op: "compute_matchmap",
            lhs: img.grid.shape().to_vec(),
            rhs: aud.seq.shape().to_vec(),
        });
    }
    let (d, nr, nc, nt) = (img.dim(), img.rows(), img.cols(), aud.len());
    let mut out = vec![T::zero(); nr * nc * nt];
    matmul_into(nr * nc, d, nt, img.grid.data(), true, aud.seq.data(), false, &mut out, false);
    Matchmap::new(Tensor::new(vec![nr, nc, nt], out)?)
}

pub fn sisa<T: Scalar>(mm: &Matchmap<T>) -> T {
    mm.m.mean()
}

pub fn misa<T: Scalar>(mm: &Matchmap<T>) -> T {
    let (cells, nt) = (mm.rows() * mm.cols(), mm.frames());
    let d = mm.m.data();
    let mut acc = T::zero();
    for t in 0..nt {
        let mut best = d[t];
        for cell in 1..cells {
            let v = d[cell * nt + t];
            if v > best {
                best = v;
            }
        }
        acc += best;
    }
    acc / T::from_f64(nt as f64)
}

pub fn sima<T: Scalar>(mm: &Matchmap<T>) -> T {
    let nt = mm.frames();
    let mut acc = T::zero();
    let mut count = 0usize;
    for row in mm.m.data().chunks_exact(nt) {
        acc += row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        count += 1;
    }
    acc / T::from_f64(count as f64)
}

pub fn similarity<T: Scalar>(mm: &Matchmap<T>, kind: SimilarityKind) -> T {
    match kind {
        SimilarityKind::Sisa => sisa(mm),
        SimilarityKind::Misa => misa(mm),
        SimilarityKind::Sima => sima(mm),
    }
}

/// `S(I, A)` straight from the feature maps.
pub fn score<T: Scalar>(img: &ImageFeatureMap<T>, aud: &AudioFeatureMap<T>, kind: SimilarityKind) -> Result<T> {
    Ok(similarity(&compute_matchmap(img, aud)?, kind))
}

/// Globally average-pooled image and audio embeddings.
pub fn pooled_embeddings<T: Scalar>(img: &ImageFeatureMap<T>, aud: &AudioFeatureMap<T>) -> (Vec<T>, Vec<T>) {
    let pool = |t: &Tensor<T>| -> Vec<T> {
        let d = t.shape()[0];
        let inner = t.len() / d;
        t.data()
            .chunks_exact(inner)
            .map(|row| {
                let mut s = T::zero();
                for &v in row {
                    s += v;
                }
                s / T::from_f64(inner as f64)
            })
            .collect()
    };
    (pool(&img.grid), pool(&aud.seq))
}

/// Matchmap node `(R·C) × T` from a `D × R × C` image node and a `D × T` audio node.
pub fn matchmap_graph<T: Scalar>(g: &mut Graph<T>, img: NodeId, aud: NodeId) -> Result<NodeId> {
    let s = g.shape(img).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "matchmap_graph",
            lhs: s,
            rhs: g.shape(aud).to_vec(),
        });
    }
    let flat = g.reshape(img, &[s[0], s[1] * s[2]])?;
    g.matmul(flat, aud, true, false)
}

/// Scalar similarity node of a `(R·C) × T` matchmap node.
pub fn similarity_graph<T: Scalar>(g: &mut Graph<T>, mm: NodeId, kind: SimilarityKind) -> Result<NodeId> {
    Ok(match kind {
        SimilarityKind::Sisa => g.mean(mm),
        SimilarityKind::Misa => {
            let per_frame = g.max_axis(mm, 0)?;
            g.mean(per_frame)
        }
        SimilarityKind::Sima => {
            let per_cell = g.max_axis(mm, 1)?;
            g.mean(per_cell)
        }
    })
}

/// Imposter indices drawn for batch item `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Imposters {
    pub image: usize,
    pub caption: usize,
}

/// One imposter image and one imposter caption per item, uniform over the
/// other `B - 1` items of the batch.
pub fn sample_imposters<R: Rng>(batch: usize, rng: &mut R) -> Result<Vec<Imposters>> {
    if batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin ranking needs a batch of at least 2, got {batch}"
        )));
    }
    let mut other = |j: usize| {
        let k = rng.gen_range(0..batch - 1);
        if k >= j {
            k + 1
        } else {
            k
        }
    };
    Ok((0..batch)
        .map(|j| Imposters {
            image: other(j),
            caption: other(j),
        })
        .collect())
}

/// Sum over the batch of
/// `max(0, S(I_j, A_imp) - S(I_j, A_j) + η) + max(0, S(I_imp, A_j) - S(I_j, A_j) + η)`.
pub fn margin_rank_loss<T: Scalar>(
    g: &mut Graph<T>,
    images: &[NodeId],
    captions: &[NodeId],
    kind: SimilarityKind,
    margin: f64,
    imposters: &[Imposters],
) -> Result<NodeId> {
    let b = images.len();
    if b < 2 || captions.len() != b || imposters.len() != b {
        return Err(Error::InvalidArgument(format!(
            "margin ranking needs matching batches of at least 2 (images {b}, captions {}, imposters {})",
            captions.len(),
            imposters.len()
        )));
    }
    if margin <= 0.0 {
        return Err(Error::InvalidArgument("margin must be positive".into()));
    }
    let eta = T::from_f64(margin);
    let sim = |g: &mut Graph<T>, i: usize, a: usize| -> Result<NodeId> {
        let mm = matchmap_graph(g, images[i], captions[a])?;
        similarity_graph(g, mm, kind)
    };
    let mut terms = Vec::with_capacity(2 * b);
    for (j, imp) in imposters.iter().enumerate() {
        if imp.image == j || imp.caption == j || imp.image >= b || imp.caption >= b {
            return Err(Error::InvalidArgument(format!("invalid imposter {imp:?} for item {j}")));
        }
        let matched = sim(g, j, j)?;
        for s_imp in [sim(g, j, imp.caption)?, sim(g, imp.image, j)?] {
            let diff = g.sub(s_imp, matched)?;
            let shifted = g.add_scalar(diff, eta);
            terms.push(g.relu(shifted));
        }
    }
    g.add_n(&terms)
}

/// Loss from precomputed scores `(matched, image-vs-imposter-caption, imposter-image-vs-caption)`.
pub fn margin_rank_value(scores: &[(f64, f64, f64)], margin: f64) -> f64 {
    scores
        .iter()
        .map(|&(m, ia, ai)| (ia - m + margin).max(0.0) + (ai - m + margin).max(0.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm(data: Vec<f64>, shape: [usize; 3]) -> Matchmap<f64> {
        Matchmap::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    #[test]
    fn worked_reductions() {
        let m = mm(vec![1.0, 2.0, 3.0, 4.0], [1, 2, 2]);
        assert_eq!(sisa(&m), 2.5);
        assert_eq!(misa(&m), 3.5);
        assert_eq!(sima(&m), 3.0);
    }

    #[test]
    fn constant_and_single_cell() {
        let c = mm(vec![0.75; 12], [2, 3, 2]);
        for k in SimilarityKind::ALL {
            assert_eq!(similarity(&c, k), 0.75);
        }
        let one = mm(vec![-4.5], [1, 1, 1]);
        for k in SimilarityKind::ALL {
            assert_eq!(similarity(&one, k), -4.5);
        }
        let single_frame = mm(vec![1.0, 5.0, -2.0, 0.5], [2, 2, 1]);
        assert_eq!(sima(&single_frame), sisa(&single_frame));
    }

    #[test]
    fn orthogonal_and_basis_maps() {
        let img = ImageFeatureMap::new(Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 }), 1).unwrap();
        let orth = AudioFeatureMap::new(Tensor::from_fn(&[2, 3], |i| if i < 3 { 0.0 } else { 1.0 }), 8).unwrap();
        assert!(compute_matchmap(&img, &orth).unwrap().m.data().iter().all(|&v| v == 0.0));
        let same = AudioFeatureMap::new(Tensor::from_fn(&[2, 3], |i| if i < 3 { 1.0 } else { 0.0 }), 8).unwrap();
        assert!(compute_matchmap(&img, &same).unwrap().m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let img = ImageFeatureMap::new(Tensor::<f32>::zeros(&[3, 2, 2]), 1).unwrap();
        let aud = AudioFeatureMap::new(Tensor::<f32>::zeros(&[4, 5]), 8).unwrap();
        assert!(compute_matchmap(&img, &aud).is_err());
    }

    #[test]
    fn loss_worked_example() {
        assert!((margin_rank_value(&[(1.0, 0.2, 0.1)], 1.0) - 0.3).abs() < 1e-12);
        assert_eq!(margin_rank_value(&[(3.0, 1.0, 2.0)], 1.0), 0.0);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("MISA".parse::<SimilarityKind>().unwrap(), SimilarityKind::Misa);
        assert_eq!("avg".parse::<SimilarityKind>().unwrap(), SimilarityKind::Sisa);
        assert!("max".parse::<SimilarityKind>().is_err());
        assert_eq!(SimilarityKind::Sima.to_string(), "sima");
    }

    #[test]
    fn single_item_batch_rejected() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(sample_imposters(1, &mut rng).is_err());
        let mut g = Graph::<f32>::new();
        let i = g.param(Tensor::zeros(&[2, 1, 1]));
        let a = g.param(Tensor::zeros(&[2, 1]));
        let imp = [Imposters { image: 0, caption: 0 }];
        assert!(margin_rank_loss(&mut g, &[i], &[a], SimilarityKind::Sisa, 1.0, &imp).is_err());
    }
}
