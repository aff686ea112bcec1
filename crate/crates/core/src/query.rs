//! Post-processing of decoded feature maps: relevancy against a text-query
//! embedding, box filtering, semantic-level selection, localization and
//! segmentation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::Framebuffer;
use crate::{Error, Result};

pub const DEFAULT_FILTER_WINDOW: usize = 11;
pub const DEFAULT_SEGMENT_THRESHOLD: f32 = 0.5;

/// Largest f32 strictly below one; relevancy scores are kept in (0, 1).
const SCORE_CEIL: f32 = 1.0 - f32::EPSILON / 2.0;

/// A precomputed text-query embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub name: String,
    pub vector: Vec<f32>,
    /// Identifier of the canonical phrase set the query is scored against.
    #[serde(default)]
    pub canonical_set: String,
}

impl QueryEmbedding {
    pub fn new(name: impl Into<String>, vector: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            vector,
            canonical_set: "default".into(),
        }
    }
}

/// Per-pixel score grid with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
    pub query: String,
    pub level: usize,
    pub filtered: bool,
    pub window: usize,
}

impl RelevancyMap {
    pub fn from_scores(width: usize, height: usize, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "relevancy scores",
                expected: width * height,
                actual: scores.len(),
            });
        }
        Ok(Self {
            width,
            height,
            scores,
            query: String::new(),
            level: 0,
            filtered: false,
            window: 1,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.scores.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn stats(&self) -> ScoreStats {
        let mean = self.scores.iter().map(|&s| s as f64).sum::<f64>() / self.scores.len().max(1) as f64;
        ScoreStats {
            min: self.min(),
            max: self.max(),
            mean: mean as f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

/// Products accumulate in 16 independent f32 lanes so the loop vectorizes;
/// lanes and the tail are summed in f64.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x as f64 * y as f64).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().map(|&v| v as f64).sum::<f64>() + tail
}

/// score(f) = min over canonicals c of exp(f·q) / (exp(f·q) + exp(f·c)).
///
/// Each pairwise term is σ(f·q − f·c), so the minimum is attained at the
/// canonical with the largest logit.
pub fn relevancy_map(features: &Framebuffer, query: &QueryEmbedding, canonicals: &[Vec<f32>]) -> Result<RelevancyMap> {
    let dim = features.channels;
    if canonicals.is_empty() {
        return Err(Error::validation("at least one canonical embedding is required"));
    }
    if query.vector.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "query embedding",
            expected: dim,
            actual: query.vector.len(),
        });
    }
    if let Some(c) = canonicals.iter().find(|c| c.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "canonical embedding",
            expected: dim,
            actual: c.len(),
        });
    }
    if query.vector.iter().chain(canonicals.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::validation("embeddings must be finite"));
    }
    let scores = features
        .data
        .par_chunks_exact(dim)
        .map(|f| {
            let q = dot(f, &query.vector);
            let c_max = canonicals.iter().map(|c| dot(f, c)).fold(f64::NEG_INFINITY, f64::max);
            let s = 1.0 / (1.0 + (c_max - q).exp());
            (s as f32).clamp(f32::MIN_POSITIVE, SCORE_CEIL)
        })
        .collect();
    let mut map = RelevancyMap::from_scores(features.width, features.height, scores)?;
    map.query = query.name.clone();
    Ok(map)
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::validation(format!("filter window must be odd and positive, got {window}")));
    }
    Ok(())
}

/// Box filter of odd size with edge-clamped borders. Window 1 is identity.
pub fn mean_filter(map: &RelevancyMap, window: usize) -> Result<RelevancyMap> {
    check_window(window)?;
    let (w, h) = (map.width, map.height);
    let r = (window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = map.clone();
    out.filtered = true;
    out.window = window;
    if window == 1 || w == 0 || h == 0 {
        return Ok(out);
    }
    // horizontal pass, kept in f64
    let horizontal: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|row| {
            let src = &map.scores[row * w..(row + 1) * w];
            (0..w as isize).map(move |col| (-r..=r).map(|k| src[clamp(col + k, w)] as f64).sum::<f64>())
        })
        .collect();
    let norm = (window * window) as f64;
    out.scores
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, dst)| {
            for (col, d) in dst.iter_mut().enumerate() {
                let sum: f64 = (-r..=r).map(|k| horizontal[clamp(row as isize + k, h) * w + col]).sum();
                *d = (sum / norm) as f32;
            }
        });
    Ok(out)
}

/// Picks the level whose map has the highest maximum; ties go to the lowest
/// level index. `None` only for an empty slice.
pub fn select_level(maps: &[RelevancyMap]) -> Option<(usize, &RelevancyMap)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, m) in maps.iter().enumerate() {
        let v = m.max();
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| (i, &maps[i]))
}

/// (row, col) of the highest score, first in row-major order on ties.
pub fn localize(map: &RelevancyMap) -> (usize, usize) {
    let mut best = 0;
    for (i, &s) in map.scores.iter().enumerate() {
        if s > map.scores[best] {
            best = i;
        }
    }
    (best / map.width.max(1), best % map.width.max(1))
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major run lengths, alternating, starting with a (possibly empty)
    /// run of unset pixels.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                len = 0;
                current = b;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for (i, &n) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, n as usize));
        }
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "mask run lengths",
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }
}

/// |A ∩ B| / |A ∪ B|, with two empty masks scoring 1.
pub fn iou(a: &Mask, b: &Mask) -> f64 {
    assert_eq!(a.bits.len(), b.bits.len(), "masks differ in size");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub threshold: f32,
    /// Set when the map is constant and cannot be normalized; the mask is
    /// then empty.
    pub degenerate: bool,
}

/// Min-max normalizes the map and keeps pixels strictly above `threshold`.
pub fn segment(map: &RelevancyMap, threshold: f32) -> Segmentation {
    let (lo, hi) = (map.min(), map.max());
    let degenerate = !(hi > lo);
    let bits = if degenerate {
        vec![false; map.scores.len()]
    } else {
        let span = hi - lo;
        map.scores.iter().map(|&s| (s - lo) / span > threshold).collect()
    };
    Segmentation {
        mask: Mask {
            width: map.width,
            height: map.height,
            bits,
        },
        threshold,
        degenerate,
    }
}
