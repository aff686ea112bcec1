//! Render → decode → post-process, with optional per-stage timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{decode_into, render_coefficients_dense_into, CoefficientMap, FeatureMapSet, Provenance, SparsePayload};
use crate::camera::Camera;
use crate::query::{self, QueryEmbedding, RelevancyMap, DEFAULT_FILTER_WINDOW};
use crate::projection;
use crate::raster::{self, ChannelTag, Framebuffer, RenderOptions};
use crate::scene::Scene;
use crate::stats::median;
use crate::{Error, Result};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_REPETITIONS: usize = 31;

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub render_ms: f64,
    pub decode_ms: f64,
    pub post_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.render_ms + self.decode_ms + self.post_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMethod {
    /// Blend only the K stored coefficients per Gaussian and level.
    Sparse,
    /// Blend all L coefficient channels per level.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelChoice {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySettings {
    pub window: usize,
    pub level: LevelChoice,
    pub method: RenderMethod,
    pub render: RenderOptions,
    /// Record stage timings.
    pub instrument: bool,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_FILTER_WINDOW,
            level: LevelChoice::Auto,
            method: RenderMethod::Sparse,
            render: RenderOptions::default(),
            instrument: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Filtered relevancy per level, indexed by level.
    pub maps: Vec<RelevancyMap>,
    pub chosen_level: usize,
    pub timings: Option<StageTimings>,
}

impl QueryOutcome {
    pub fn chosen(&self) -> &RelevancyMap {
        &self.maps[self.chosen_level]
    }
}

struct Stopwatch {
    enabled: bool,
    last: Option<Instant>,
}

impl Stopwatch {
    fn start(enabled: bool) -> Self {
        Self {
            enabled,
            last: enabled.then(Instant::now),
        }
    }

    fn lap(&mut self) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let now = Instant::now();
        let ms = self.last.map_or(0.0, |t| (now - t).as_secs_f64() * 1e3);
        self.last = Some(now);
        ms
    }
}

/// Buffers reused across frames, so repeated queries do not pay for fresh
/// multi-megabyte allocations each time.
#[derive(Debug, Clone)]
pub struct QueryWorkspace {
    coefficients: CoefficientMap,
    features: FeatureMapSet,
}

impl Default for QueryWorkspace {
    fn default() -> Self {
        Self {
            coefficients: CoefficientMap {
                num_atoms: 0,
                top_k: 0,
                levels: Vec::new(),
                fb: Framebuffer::zeros(0, 0, 0, ChannelTag::Coefficient),
            },
            features: FeatureMapSet {
                levels: Vec::new(),
                maps: Vec::new(),
                provenance: Provenance::DecodedFromCoefficients,
            },
        }
    }
}

impl QueryWorkspace {
    /// Coefficient map of the most recent query.
    pub fn coefficients(&self) -> &CoefficientMap {
        &self.coefficients
    }

    /// Decoded features of the most recent query.
    pub fn features(&self) -> &FeatureMapSet {
        &self.features
    }
}

fn render_stage(scene: &Scene, cam: &Camera, settings: &QuerySettings, out: &mut CoefficientMap) -> Result<()> {
    let levels: Vec<usize> = (0..scene.config.num_levels).collect();
    match settings.method {
        RenderMethod::Sparse => {
            let payload = SparsePayload::new(scene, &levels)?;
            let binning = projection::prepare(scene, cam)?;
            raster::rasterize_into(&binning, &payload, ChannelTag::Coefficient, None, &mut out.fb);
        }
        RenderMethod::Dense => {
            render_coefficients_dense_into(scene, cam, &levels, &settings.render, &mut out.fb)?;
        }
    }
    out.num_atoms = scene.config.num_atoms;
    out.top_k = scene.config.top_k;
    out.levels = levels;
    Ok(())
}

fn post_stage(
    features: &FeatureMapSet,
    query: &QueryEmbedding,
    canonicals: &[Vec<f32>],
    settings: &QuerySettings,
) -> Result<(Vec<RelevancyMap>, usize)> {
    let mut maps = Vec::with_capacity(features.maps.len());
    for (fb, &level) in features.maps.iter().zip(&features.levels) {
        let raw = query::relevancy_map(fb, query, canonicals)?;
        let mut filtered = query::mean_filter(&raw, settings.window)?;
        filtered.level = level;
        maps.push(filtered);
    }
    let chosen = match settings.level {
        LevelChoice::Auto => query::select_level(&maps).map(|(i, _)| i).unwrap_or(0),
        LevelChoice::Fixed(l) if l < maps.len() => l,
        LevelChoice::Fixed(l) => {
            return Err(Error::validation(format!("level {l} not available ({} levels)", maps.len())))
        }
    };
    Ok((maps, chosen))
}

/// Runs the three query stages in order. Timing, when enabled, does not
/// alter any output.
pub fn query_pipeline(
    scene: &Scene,
    cam: &Camera,
    query: &QueryEmbedding,
    canonicals: &[Vec<f32>],
    settings: &QuerySettings,
) -> Result<QueryOutcome> {
    query_pipeline_with(&mut QueryWorkspace::default(), scene, cam, query, canonicals, settings)
}

/// [`query_pipeline`] rendering and decoding into `ws`.
pub fn query_pipeline_with(
    ws: &mut QueryWorkspace,
    scene: &Scene,
    cam: &Camera,
    query: &QueryEmbedding,
    canonicals: &[Vec<f32>],
    settings: &QuerySettings,
) -> Result<QueryOutcome> {
    let mut clock = Stopwatch::start(settings.instrument);
    render_stage(scene, cam, settings, &mut ws.coefficients)?;
    let render_ms = clock.lap();
    decode_into(&ws.coefficients, &scene.codebooks, &mut ws.features)?;
    let decode_ms = clock.lap();
    let (maps, chosen_level) = post_stage(&ws.features, query, canonicals, settings)?;
    let post_ms = clock.lap();
    Ok(QueryOutcome {
        maps,
        chosen_level,
        timings: settings.instrument.then_some(StageTimings {
            render_ms,
            decode_ms,
            post_ms,
        }),
    })
}

/// Per-stage medians over `repetitions` timed runs after `warmup` untimed
/// ones, plus the outcome of the last run.
pub fn measure_query_pipeline(
    scene: &Scene,
    cam: &Camera,
    query: &QueryEmbedding,
    canonicals: &[Vec<f32>],
    settings: &QuerySettings,
    warmup: usize,
    repetitions: usize,
) -> Result<(QueryOutcome, StageTimings, Vec<StageTimings>)> {
    if repetitions == 0 {
        return Err(Error::validation("need at least one timed repetition"));
    }
    let settings = QuerySettings {
        instrument: true,
        ..settings.clone()
    };
    let mut ws = QueryWorkspace::default();
    for _ in 0..warmup {
        query_pipeline_with(&mut ws, scene, cam, query, canonicals, &settings)?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    let mut last = None;
    for _ in 0..repetitions {
        let out = query_pipeline_with(&mut ws, scene, cam, query, canonicals, &settings)?;
        samples.push(out.timings.unwrap_or_default());
        last = Some(out);
    }
    let pick = |f: fn(&StageTimings) -> f64| median(&samples.iter().map(f).collect::<Vec<_>>());
    let medians = StageTimings {
        render_ms: pick(|t| t.render_ms),
        decode_ms: pick(|t| t.decode_ms),
        post_ms: pick(|t| t.post_ms),
    };
    Ok((last.expect("repetitions > 0"), medians, samples))
}

/// One CSV row of a stage breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub num_atoms: usize,
    pub top_k: usize,
    pub levels: usize,
    pub timings: StageTimings,
}

impl TimingRow {
    pub const HEADER: &'static str = "scene_id,H,W,L,K,levels,render_ms,decode_ms,post_ms";

    pub fn new(scene_id: impl Into<String>, scene: &Scene, cam: &Camera, timings: StageTimings) -> Self {
        Self {
            scene_id: scene_id.into(),
            height: cam.height,
            width: cam.width,
            num_atoms: scene.config.num_atoms,
            top_k: scene.config.top_k,
            levels: scene.config.num_levels,
            timings,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.scene_id,
            self.height,
            self.width,
            self.num_atoms,
            self.top_k,
            self.levels,
            self.timings.render_ms,
            self.timings.decode_ms,
            self.timings.post_ms
        )
    }
}
