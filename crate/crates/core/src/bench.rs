//! Dimension sweeps and stage breakdowns, written out as CSV and SVG.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::synthetic::{default_camera, random_scene_with, RandomSceneParams};
use crate::query::QueryEmbedding;
use crate::raster::{RenderOptions, DEFAULT_MEMORY_BUDGET};
use crate::scene::SceneConfig;
use crate::sparse::{measure_query_pipeline, LevelChoice, QuerySettings, RenderMethod};
use crate::stats::iqr;
use crate::{Error, Result};

pub const CSV_COLUMNS: &str = "method,L,K,levels,H,W,render_ms,decode_ms,post_ms,iqr_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub seed: u64,
    pub num_gaussians: usize,
    pub scene: RandomSceneParams,
    pub feature_dim: usize,
    pub levels: usize,
    /// (H, W) pairs.
    pub image_sizes: Vec<(usize, usize)>,
    pub atom_sweep: Vec<usize>,
    pub k_sweep: Vec<usize>,
    pub methods: Vec<RenderMethod>,
    pub repetitions: usize,
    pub warmup: usize,
    pub memory_budget: usize,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            num_gaussians: 30_000,
            // translucent-heavy, so pixels see a few hundred contributors
            scene: RandomSceneParams {
                opacity: (0.02, 0.3),
                ..Default::default()
            },
            feature_dim: 512,
            levels: 3,
            image_sizes: vec![(128, 128)],
            atom_sweep: vec![16, 64, 256],
            k_sweep: vec![4],
            methods: vec![RenderMethod::Dense, RenderMethod::Sparse],
            repetitions: 11,
            warmup: 2,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 5 || self.repetitions.is_multiple_of(2) {
            return Err(Error::validation("repetitions must be odd and at least 5"));
        }
        if self.image_sizes.is_empty() || self.atom_sweep.is_empty() || self.k_sweep.is_empty() || self.methods.is_empty() {
            return Err(Error::validation("every sweep must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// The dense render would exceed the memory budget.
    Oom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: RenderMethod,
    pub num_atoms: usize,
    pub top_k: usize,
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    pub render_ms: f64,
    pub decode_ms: f64,
    pub post_ms: f64,
    /// Interquartile range of the render samples.
    pub iqr_ms: f64,
    pub status: CellStatus,
}

impl BenchRecord {
    pub fn total_ms(&self) -> f64 {
        self.render_ms + self.decode_ms + self.post_ms
    }

    fn csv_row(&self) -> String {
        let method = method_name(self.method);
        let head = format!(
            "{method},{},{},{},{},{}",
            self.num_atoms, self.top_k, self.levels, self.height, self.width
        );
        match self.status {
            CellStatus::Ok => format!(
                "{head},{:.6},{:.6},{:.6},{:.6}",
                self.render_ms, self.decode_ms, self.post_ms, self.iqr_ms
            ),
            CellStatus::Oom => format!("{head},OOM,OOM,OOM,OOM"),
        }
    }
}

pub fn method_name(m: RenderMethod) -> &'static str {
    match m {
        RenderMethod::Sparse => "sparse",
        RenderMethod::Dense => "dense",
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub records: Vec<BenchRecord>,
    pub csv: String,
    pub svg: String,
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    use rand::Rng;
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Measures one cell.
pub fn run_cell(plan: &BenchPlan, method: RenderMethod, (h, w): (usize, usize), l: usize, k: usize) -> Result<BenchRecord> {
    let cfg = SceneConfig {
        num_levels: plan.levels,
        num_atoms: l,
        top_k: k,
        feature_dim: plan.feature_dim,
    };
    let scene = random_scene_with(plan.seed, plan.num_gaussians, cfg, &plan.scene)?;
    let cam = default_camera(w, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let query = QueryEmbedding::new("bench", random_vector(&mut rng, plan.feature_dim));
    let canonicals: Vec<Vec<f32>> = (0..4).map(|_| random_vector(&mut rng, plan.feature_dim)).collect();
    let settings = QuerySettings {
        level: LevelChoice::Auto,
        method,
        render: RenderOptions {
            memory_budget: plan.memory_budget,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut record = BenchRecord {
        method,
        num_atoms: l,
        top_k: k,
        levels: plan.levels,
        height: h,
        width: w,
        render_ms: f64::NAN,
        decode_ms: f64::NAN,
        post_ms: f64::NAN,
        iqr_ms: f64::NAN,
        status: CellStatus::Oom,
    };
    match measure_query_pipeline(&scene, &cam, &query, &canonicals, &settings, plan.warmup, plan.repetitions) {
        Ok((_, med, samples)) => {
            record.render_ms = med.render_ms;
            record.decode_ms = med.decode_ms;
            record.post_ms = med.post_ms;
            record.iqr_ms = iqr(&samples.iter().map(|s| s.render_ms).collect::<Vec<_>>());
            record.status = CellStatus::Ok;
            Ok(record)
        }
        Err(Error::ResourceExhausted { .. }) => Ok(record),
        Err(e) => Err(e),
    }
}

/// Every (size, method, K, L) cell, in that nesting order.
pub fn run_benchmark(plan: &BenchPlan) -> Result<BenchOutput> {
    plan.validate()?;
    let mut records = Vec::new();
    for &size in &plan.image_sizes {
        for &method in &plan.methods {
            for &k in &plan.k_sweep {
                for &l in &plan.atom_sweep {
                    records.push(run_cell(plan, method, size, l, k)?);
                }
            }
        }
    }
    Ok(BenchOutput {
        csv: to_csv(plan, &records),
        svg: to_svg(&records),
        records,
    })
}

pub fn machine_summary() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {} cpus={cpus}", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn to_csv(plan: &BenchPlan, records: &[BenchRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# machine: {}", machine_summary());
    let _ = writeln!(out, "# workers: {}", rayon::current_num_threads());
    let _ = writeln!(
        out,
        "# scene: seed={} gaussians={} opacity={}..{} D={} repetitions={} warmup={}",
        plan.seed,
        plan.num_gaussians,
        plan.scene.opacity.0,
        plan.scene.opacity.1,
        plan.feature_dim,
        plan.repetitions,
        plan.warmup
    );
    out.push_str(CSV_COLUMNS);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

const SERIES_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Median render time against L, one polyline per (method, K, size),
/// log-scaled y axis.
pub fn to_svg(records: &[BenchRecord]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 50.0);
    let ok: Vec<&BenchRecord> = records
        .iter()
        .filter(|r| r.status == CellStatus::Ok && r.render_ms > 0.0)
        .collect();
    let mut ls: Vec<usize> = records.iter().map(|r| r.num_atoms).collect();
    ls.sort_unstable();
    ls.dedup();
    let (mut lo, mut hi) = ok
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.render_ms), b.max(r.render_ms)));
    if !lo.is_finite() {
        (lo, hi) = (0.1, 10.0);
    }
    let (ylo, yhi) = (lo.log10().floor(), hi.log10().ceil().max(lo.log10().floor() + 1.0));
    let px = |i: usize| left + (w - left - right) * if ls.len() > 1 { i as f64 / (ls.len() - 1) as f64 } else { 0.5 };
    let py = |ms: f64| top + (h - top - bottom) * (1.0 - (ms.log10() - ylo) / (yhi - ylo));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">median render time vs L</text>"#, w / 2.0);
    for dec in ylo as i32..=yhi as i32 {
        let y = py(10f64.powi(dec));
        let _ = writeln!(s, r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - right);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">1e{dec} ms</text>"#, left - 6.0, y + 4.0);
    }
    for (i, l) in ls.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{l}</text>"#, px(i), h - bottom + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">L (codebook size)</text>"#, (left + w - right) / 2.0, h - 10.0);

    let mut series: Vec<(RenderMethod, usize, usize, usize)> = Vec::new();
    for r in &ok {
        let key = (r.method, r.top_k, r.height, r.width);
        if !series.contains(&key) {
            series.push(key);
        }
    }
    for (n, key) in series.iter().enumerate() {
        let color = SERIES_COLORS[n % SERIES_COLORS.len()];
        let mut pts: Vec<(usize, f64)> = ok
            .iter()
            .filter(|r| (r.method, r.top_k, r.height, r.width) == *key)
            .map(|r| (ls.binary_search(&r.num_atoms).unwrap(), r.render_ms))
            .collect();
        pts.sort_by_key(|p| p.0);
        let path: Vec<String> = pts.iter().map(|&(i, ms)| format!("{:.1},{:.1}", px(i), py(ms))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(i, ms) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(i), py(ms));
        }
        let ly = top + 16.0 * n as f64;
        let label = format!("{} K={} {}x{}", method_name(key.0), key.1, key.2, key.3);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" fill="{color}">{label}</text>"#, w - right + 10.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum SpeedupReport {
    Pass { ratio: f64, sparse_ms: f64, dense_ms: f64 },
    Fail { ratio: f64, sparse_ms: f64, dense_ms: f64 },
    /// Only one method was measured.
    Incomparable,
}

/// Compares total query time of the two methods at L=64, K=4, 3 levels.
pub fn verify_speedup(records: &[BenchRecord]) -> Result<SpeedupReport> {
    let has = |m| records.iter().any(|r| r.method == m);
    if !has(RenderMethod::Sparse) || !has(RenderMethod::Dense) {
        return Ok(SpeedupReport::Incomparable);
    }
    let find = |m| {
        records
            .iter()
            .find(|r| r.method == m && r.num_atoms == 64 && r.top_k == 4 && r.levels == 3 && r.status == CellStatus::Ok)
            .ok_or_else(|| Error::validation(format!("no {} record at L=64, K=4, 3 levels", method_name(m))))
    };
    let sparse = find(RenderMethod::Sparse)?;
    let dense = records
        .iter()
        .find(|r| {
            r.method == RenderMethod::Dense
                && (r.num_atoms, r.top_k, r.levels, r.height, r.width) == (64, 4, 3, sparse.height, sparse.width)
                && r.status == CellStatus::Ok
        })
        .map_or_else(|| find(RenderMethod::Dense), Ok)?;
    let (sparse_ms, dense_ms) = (sparse.total_ms(), dense.total_ms());
    let ratio = dense_ms / sparse_ms;
    Ok(if sparse_ms < dense_ms {
        SpeedupReport::Pass {
            ratio,
            sparse_ms,
            dense_ms,
        }
    } else {
        SpeedupReport::Fail {
            ratio,
            sparse_ms,
            dense_ms,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: RenderMethod, l: usize, ms: f64) -> BenchRecord {
        BenchRecord {
            method,
            num_atoms: l,
            top_k: 4,
            levels: 3,
            height: 32,
            width: 32,
            render_ms: ms,
            decode_ms: 0.5,
            post_ms: 0.25,
            iqr_ms: 0.1,
            status: CellStatus::Ok,
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = BenchPlan::default();
        p.validate().unwrap();
        p.repetitions = 4;
        assert!(p.validate().is_err());
        p.repetitions = 5;
        p.atom_sweep.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn speedup_ratio_is_quotient_of_medians() {
        let recs = vec![record(RenderMethod::Dense, 64, 8.0), record(RenderMethod::Sparse, 64, 1.0)];
        match verify_speedup(&recs).unwrap() {
            SpeedupReport::Pass { ratio, sparse_ms, dense_ms } => {
                assert_eq!(ratio, dense_ms / sparse_ms);
                assert!((ratio - 8.75 / 1.75).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_method_is_incomparable() {
        let recs = vec![record(RenderMethod::Sparse, 64, 1.0)];
        assert_eq!(verify_speedup(&recs).unwrap(), SpeedupReport::Incomparable);
    }

    #[test]
    fn missing_cell_is_an_error() {
        let recs = vec![record(RenderMethod::Dense, 16, 8.0), record(RenderMethod::Sparse, 16, 1.0)];
        assert!(verify_speedup(&recs).is_err());
    }

    #[test]
    fn slower_sparse_fails() {
        let recs = vec![record(RenderMethod::Dense, 64, 1.0), record(RenderMethod::Sparse, 64, 2.0)];
        assert!(matches!(verify_speedup(&recs).unwrap(), SpeedupReport::Fail { .. }));
    }

    #[test]
    fn csv_schema_and_oom_cells() {
        let plan = BenchPlan {
            num_gaussians: 30,
            feature_dim: 8,
            image_sizes: vec![(16, 16)],
            repetitions: 5,
            warmup: 0,
            memory_budget: 300_000,
            ..Default::default()
        };
        let out = run_benchmark(&plan).unwrap();
        assert_eq!(out.records.len(), 6);
        let rows: Vec<&str> = out.csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], CSV_COLUMNS);
        assert_eq!(rows.len(), 7);
        let dense256 = &out.records[2];
        assert_eq!((dense256.method, dense256.num_atoms), (RenderMethod::Dense, 256));
        assert_eq!(dense256.status, CellStatus::Oom);
        assert!(rows[3].ends_with("OOM,OOM,OOM,OOM"));
        for r in out.records.iter().filter(|r| r.status == CellStatus::Ok) {
            assert!(r.render_ms > 0.0 && r.decode_ms > 0.0 && r.post_ms > 0.0);
        }
        assert!(out.svg.starts_with("<svg") && out.svg.contains("polyline"));
    }
}
