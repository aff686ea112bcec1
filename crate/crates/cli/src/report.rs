//! Query execution shared by the `query` command and the HTTP server.

use anyhow::{bail, Result};
use serde::Serialize;
use sparsesplat::query::{localize, segment, QueryEmbedding, ScoreStats, DEFAULT_SEGMENT_THRESHOLD};
use sparsesplat::raster::{render_dense, ChannelSource, RenderOptions};
use sparsesplat::sparse::{query_pipeline, LevelChoice, QuerySettings, StageTimings};
use sparsesplat::{Camera, Scene};

use crate::overlay::{encode_png, overlay_bytes};

/// "auto" or a level index.
pub fn parse_level(s: &str) -> Result<LevelChoice> {
    match s {
        "auto" => Ok(LevelChoice::Auto),
        n => match n.parse() {
            Ok(level) => Ok(LevelChoice::Fixed(level)),
            Err(_) => bail!("level must be \"auto\" or an index, got {s:?}"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Localization {
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub stats: ScoreStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryReport {
    pub query: String,
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub chosen_level: usize,
    pub timings: TimingsJson,
    pub stats: ScoreStats,
    pub levels: Vec<LevelSummary>,
    pub localization: Localization,
    pub threshold: f32,
    pub mask_pixels: usize,
    /// Row-major run lengths starting with unset pixels.
    pub mask_rle: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth_iou: Option<f64>,
    #[serde(skip)]
    pub mask: sparsesplat::query::Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingsJson {
    pub render_ms: f64,
    pub decode_ms: f64,
    pub post_ms: f64,
    pub total_ms: f64,
}

impl From<StageTimings> for TimingsJson {
    fn from(t: StageTimings) -> Self {
        Self {
            render_ms: t.render_ms,
            decode_ms: t.decode_ms,
            post_ms: t.post_ms,
            total_ms: t.total_ms(),
        }
    }
}

/// Runs the pipeline and, when asked, composes the overlay PNG on a color
/// render from the same camera.
pub fn run_query(
    scene: &Scene,
    cam: &Camera,
    query: &QueryEmbedding,
    canonicals: &[Vec<f32>],
    settings: &QuerySettings,
    with_overlay: bool,
) -> Result<(QueryReport, Option<Vec<u8>>)> {
    let out = query_pipeline(
        scene,
        cam,
        query,
        canonicals,
        &QuerySettings {
            instrument: true,
            ..settings.clone()
        },
    )?;
    let chosen = out.chosen();
    let (row, col) = localize(chosen);
    let seg = segment(chosen, DEFAULT_SEGMENT_THRESHOLD);
    let overlay = if with_overlay {
        let color = render_dense(scene, cam, &ChannelSource::Color, &RenderOptions::default())?;
        Some(encode_png(cam.width, cam.height, &overlay_bytes(&color, chosen)?)?)
    } else {
        None
    };
    let report = QueryReport {
        query: query.name.clone(),
        width: cam.width,
        height: cam.height,
        window: settings.window,
        chosen_level: out.chosen_level,
        timings: out.timings.unwrap_or_default().into(),
        stats: chosen.stats(),
        levels: out
            .maps
            .iter()
            .enumerate()
            .map(|(level, m)| LevelSummary { level, stats: m.stats() })
            .collect(),
        localization: Localization {
            row,
            col,
            score: chosen.at(row, col),
        },
        threshold: seg.threshold,
        mask_pixels: seg.mask.count(),
        mask_rle: seg.mask.to_rle(),
        ground_truth_iou: None,
        mask: seg.mask,
    };
    Ok((report, overlay))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_words() {
        assert_eq!(parse_level("auto").unwrap(), LevelChoice::Auto);
        assert_eq!(parse_level("2").unwrap(), LevelChoice::Fixed(2));
        assert!(parse_level("top").is_err());
        assert!(parse_level("-1").is_err());
    }
}
