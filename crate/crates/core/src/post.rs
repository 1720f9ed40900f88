//! Matchmap post-processing: temporal smoothing, binarization, top-p mass
//! selection and 6-connected volumetric components.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::Matchmap;
use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothKind {
    Avg,
    Max,
}

impl fmt::Display for SmoothKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmoothKind::Avg => "avg",
            SmoothKind::Max => "max",
        })
    }
}

impl FromStr for SmoothKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(SmoothKind::Avg),
            "max" => Ok(SmoothKind::Max),
            _ => Err(Error::InvalidArgument(format!("unknown smoothing `{s}` (expected avg or max)"))),
        }
    }
}

/// Centered sliding window along `t` only; the window shrinks at the edges.
pub fn temporal_smooth<T: Scalar>(mm: &Matchmap<T>, width: usize, kind: SmoothKind) -> Result<Matchmap<T>> {
    if width == 0 || width % 2 == 0 {
        return Err(Error::InvalidArgument(format!("smoothing width must be odd and positive, got {width}")));
    }
    let half = width / 2;
    let nt = mm.frames();
    let mut out = Vec::with_capacity(mm.m.len());
    for row in mm.m.data().chunks_exact(nt) {
        for t in 0..nt {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(nt - 1);
            let win = &row[lo..=hi];
            out.push(match kind {
                SmoothKind::Avg => {
                    let mut s = T::zero();
                    for &v in win {
                        s += v;
                    }
                    s / T::from_f64(win.len() as f64)
                }
                SmoothKind::Max => win.iter().copied().fold(win[0], |a, b| if b > a { b } else { a }),
            });
        }
    }
    Matchmap::new(Tensor::new(mm.m.shape().to_vec(), out)?)
}

/// `Nr × Nc × Nt` boolean volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryVolume {
    pub shape: [usize; 3],
    pub bits: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(shape: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume shape {shape:?} does not match {} cells",
                bits.len()
            )));
        }
        Ok(Self { shape, bits })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            shape,
            bits: vec![false; shape.iter().product()],
        }
    }

    pub fn get(&self, r: usize, c: usize, t: usize) -> bool {
        self.bits[(r * self.shape[1] + c) * self.shape[2] + t]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape == other.shape && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// 0/1 `u16` export.
    pub fn to_labels(&self) -> LabelTensor {
        LabelTensor {
            shape: self.shape.to_vec(),
            data: self.bits.iter().map(|&b| b as u16).collect(),
        }
    }

    /// `Nr × Nc` mask of frame `t`.
    pub fn frame(&self, t: usize) -> Vec<bool> {
        let [nr, nc, _] = self.shape;
        (0..nr * nc).map(|i| self.get(i / nc, i % nc, t)).collect()
    }
}

/// Cells strictly above `mean + k·std` (population std).
///
/// Evaluated as `n·x − Σx > k·sqrt(Σ(n·x_j − Σx)² / n)`, which is exactly
/// invariant to shifts and power-of-two scalings that are representable.
pub fn binarize_sigma<T: Scalar>(mm: &Matchmap<T>, k: f64) -> Result<BinaryVolume> {
    if !k.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma multiplier must be finite, got {k}")));
    }
    let data = mm.m.data();
    let n = data.len() as f64;
    let total: f64 = data.iter().map(|v| v.to_f64()).sum();
    let dev = |v: T| n * v.to_f64() - total;
    let q: f64 = data.iter().map(|&v| dev(v) * dev(v)).sum();
    let cut = k * (q / n).sqrt();
    let shape = [mm.rows(), mm.cols(), mm.frames()];
    BinaryVolume::new(shape, data.iter().map(|&v| dev(v) > cut).collect())
}

/// Smallest set of highest cells holding at least a `p` fraction of the
/// min-shifted mass, plus every cell tied with the cutoff value.
pub fn top_p_mass<T: Scalar>(mm: &Matchmap<T>, p: f64) -> Result<BinaryVolume> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("mass fraction must lie in (0, 1], got {p}")));
    }
    let shape = [mm.rows(), mm.cols(), mm.frames()];
    let data: Vec<f64> = mm.m.data().iter().map(|v| v.to_f64()).collect();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = data.iter().map(|v| v - min).collect();
    let total: f64 = shifted.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        log::warn!("top_p_mass: degenerate matchmap (no mass after shifting by the minimum), empty selection");
        return Ok(BinaryVolume::empty(shape));
    }
    if p >= 1.0 {
        return BinaryVolume::new(shape, vec![true; data.len()]);
    }
    let mut order: Vec<usize> = (0..shifted.len()).collect();
    order.sort_by(|&a, &b| shifted[b].total_cmp(&shifted[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut cutoff = 0.0;
    for &i in &order {
        acc += shifted[i];
        cutoff = shifted[i];
        if acc / total >= p {
            break;
        }
    }
    BinaryVolume::new(shape, shifted.iter().map(|&v| v >= cutoff).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub id: usize,
    /// `(r, c, t)` voxels.
    pub voxels: Vec<(usize, usize, usize)>,
    /// Row-major `Nr × Nc` spatial projection.
    pub image_mask: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
    pub t_start: usize,
    pub t_end: usize,
}

impl ComponentRecord {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

/// Face-adjacent components, ordered by each component's minimal voxel in
/// `(t, r, c)` order.
pub fn connected_components(v: &BinaryVolume) -> Vec<ComponentRecord> {
    let [nr, nc, nt] = v.shape;
    let idx = |r: usize, c: usize, t: usize| (r * nc + c) * nt + t;
    let mut seen = vec![false; v.bits.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for t in 0..nt {
        for r in 0..nr {
            for c in 0..nc {
                let start = idx(r, c, t);
                if !v.bits[start] || seen[start] {
                    continue;
                }
                seen[start] = true;
                queue.push_back((r, c, t));
                let mut voxels = Vec::new();
                while let Some((r, c, t)) = queue.pop_front() {
                    voxels.push((r, c, t));
                    let mut visit = |r: usize, c: usize, t: usize| {
                        let i = idx(r, c, t);
                        if v.bits[i] && !seen[i] {
                            seen[i] = true;
                            queue.push_back((r, c, t));
                        }
                    };
                    if r > 0 {
                        visit(r - 1, c, t);
                    }
                    if r + 1 < nr {
                        visit(r + 1, c, t);
                    }
                    if c > 0 {
                        visit(r, c - 1, t);
                    }
                    if c + 1 < nc {
                        visit(r, c + 1, t);
                    }
                    if t > 0 {
                        visit(r, c, t - 1);
                    }
                    if t + 1 < nt {
                        visit(r, c, t + 1);
                    }
                }
                voxels.sort_unstable_by_key(|&(r, c, t)| (t, r, c));
                let mut image_mask = vec![false; nr * nc];
                for &(r, c, _) in &voxels {
                    image_mask[r * nc + c] = true;
                }
                let t_start = voxels.iter().map(|v| v.2).min().unwrap();
                let t_end = voxels.iter().map(|v| v.2).max().unwrap();
                out.push(ComponentRecord {
                    id: out.len(),
                    voxels,
                    image_mask,
                    rows: nr,
                    cols: nc,
                    t_start,
                    t_end,
                });
            }
        }
    }
    out
}
