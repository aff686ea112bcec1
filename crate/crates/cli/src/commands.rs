use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use sparsesplat::bench::{run_benchmark, verify_speedup, BenchPlan, CellStatus, SpeedupReport};
use sparsesplat::camera::CameraPose;
use sparsesplat::io::{generate_synthetic, load_query_set, load_scene, save_scene, Layout, SyntheticSpec};
use sparsesplat::query::{iou, QueryEmbedding, DEFAULT_FILTER_WINDOW};
use sparsesplat::sparse::{QuerySettings, RenderMethod};
use sparsesplat::train::{evaluate, train_field, AdamConfig, TrainConfig, TrainingBatch, DEFAULT_ITERATIONS};
use sparsesplat::Camera;

use crate::bundle::{load_manifest, read_json, write_bundle, MaskFile};
use crate::report::parse_level;
use crate::server::{router, ServeSession, DEFAULT_MAX_PIXELS, DEFAULT_PORT};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// One item per line; a closed pipe (`| head`) is not an error.
fn print_lines<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for item in items {
        match writeln!(out, "{item}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            r => r?,
        }
    }
    Ok(())
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected x,y,z, got {s:?}"))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    Ok((h.parse().map_err(|e| format!("{h:?}: {e}"))?, w.parse().map_err(|e| format!("{w:?}: {e}"))?))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Grid,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Sparse,
    Dense,
}

impl From<MethodArg> for RenderMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sparse => RenderMethod::Sparse,
            MethodArg::Dense => RenderMethod::Dense,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the bundle.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, value_enum, default_value = "grid")]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Feature dimension D.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Codebook size L.
    #[arg(long, default_value_t = 64)]
    pub atoms: usize,
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 5)]
    pub cameras: usize,
    #[arg(long, default_value_t = 1.0)]
    pub atom_scale: f32,
    #[arg(long, default_value_t = 4)]
    pub canonicals: usize,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: a.seed,
        num_gaussians: a.gaussians,
        num_classes: a.classes,
        layout: match a.layout {
            LayoutArg::Grid => Layout::Grid,
            LayoutArg::Clustered => Layout::Clustered,
        },
        width: a.width,
        height: a.height,
        feature_dim: a.dim,
        num_atoms: a.atoms,
        top_k: a.top_k,
        num_levels: a.levels,
        num_cameras: a.cameras,
        atom_scale: a.atom_scale,
        num_canonicals: a.canonicals,
        class_atoms: None,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let bundle = generate_synthetic(&spec)?;
    let paths: Vec<String> = write_bundle(&a.out, &bundle)?.iter().map(|p| p.display().to_string()).collect();
    print_lines(paths)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Bundle directory holding cameras and target feature maps.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Scene whose geometry is trained on; defaults to the bundle's scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the (1 − cos) term.
    #[arg(long, default_value_t = 0.0)]
    pub cosine_weight: f64,
    #[arg(long)]
    pub lr_logits: Option<f64>,
    #[arg(long)]
    pub lr_codebook: Option<f64>,
    /// Keep the last N cameras out of training and report their error.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Start from the scene's codebooks instead of a fresh initialization.
    #[arg(long)]
    pub keep_codebooks: bool,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.bundle).map_err(|e| usage(format!("cannot read bundle manifest: {e:#}")))?;
    let scene_path = a.scene.clone().unwrap_or_else(|| a.bundle.join(&manifest.scene));
    let scene = load_scene(&scene_path).with_context(|| format!("loading {}", scene_path.display()))?;
    if manifest.cameras.is_empty() {
        return Err(usage("bundle lists no cameras"));
    }
    if a.holdout >= manifest.cameras.len() {
        return Err(usage(format!(
            "holding out {} of {} cameras leaves nothing to train on",
            a.holdout,
            manifest.cameras.len()
        )));
    }
    let mut batches = Vec::with_capacity(manifest.cameras.len());
    for (i, entry) in manifest.cameras.iter().enumerate() {
        let targets = manifest.load_targets(&a.bundle, i).map_err(|e| usage(format!("missing targets: {e:#}")))?;
        batches.push(TrainingBatch {
            camera: Camera::look_at(&entry.pose)?,
            targets,
            mask: None,
        });
    }
    let (fit, held) = batches.split_at(batches.len() - a.holdout);
    let defaults = AdamConfig::default();
    let cfg = TrainConfig {
        iterations: a.iters,
        optimizer: AdamConfig {
            lr_logits: a.lr_logits.unwrap_or(defaults.lr_logits),
            lr_codebook: a.lr_codebook.unwrap_or(defaults.lr_codebook),
            ..defaults
        },
        cosine_weight: a.cosine_weight,
        seed: a.seed,
        keep_codebooks: a.keep_codebooks,
    };
    let report = train_field(&scene, fit, &cfg)?;
    save_scene(&a.out, &report.scene)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    std::fs::write(&csv_path, report.curve_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("checkpoint {}", a.out.display());
    println!("loss curve {}", csv_path.display());
    if let Some(last) = report.curve.last() {
        println!("final loss {:.6e} after {} iterations", last.loss, report.curve.len());
    }
    for (i, batch) in held.iter().enumerate() {
        let before = evaluate(&report.initial_scene, batch, 0.0)?;
        let after = evaluate(&report.scene, batch, 0.0)?;
        println!(
            "held-out camera {}: error {after:.6e} (initial {before:.6e}, ratio {:.4})",
            fit.len() + i,
            after / before
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Query set JSON.
    #[arg(long)]
    pub queries: PathBuf,
    /// Print the query names and exit.
    #[arg(long)]
    pub list_queries: bool,
    /// Scene or checkpoint to query.
    #[arg(long, required_unless_present = "list_queries")]
    pub scene: Option<PathBuf>,
    /// Query by name.
    #[arg(long, conflicts_with = "vector_file")]
    pub name: Option<String>,
    /// JSON array holding a raw D-vector.
    #[arg(long)]
    pub vector_file: Option<PathBuf>,
    /// Take the camera from a bundle instead of the pose flags.
    #[arg(long, requires = "camera")]
    pub bundle: Option<PathBuf>,
    /// Camera index within the bundle.
    #[arg(long, requires = "bundle")]
    pub camera: Option<usize>,
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,-2.7")]
    pub eye: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    pub target: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "0,-1,0")]
    pub up: [f64; 3],
    #[arg(long, default_value_t = 45.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// "auto" or a level index.
    #[arg(long, default_value = "auto")]
    pub level: String,
    #[arg(long, default_value_t = DEFAULT_FILTER_WINDOW)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "sparse")]
    pub method: MethodArg,
    /// Result JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overlay PNG path.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn query(a: &QueryArgs) -> Result<()> {
    let set = load_query_set(&a.queries)?;
    if a.list_queries {
        return print_lines(set.names());
    }
    let scene_path = a.scene.as_ref().expect("clap enforces --scene");
    let scene = load_scene(scene_path).with_context(|| format!("loading {}", scene_path.display()))?;
    let (embedding, gt_path) = match (&a.name, &a.vector_file) {
        (Some(name), _) => {
            let e = set.find(name).map_err(|e| usage(e.to_string()))?;
            let gt = set.queries.iter().find(|q| &q.name == name).and_then(|q| q.gt_mask_path.clone());
            (e, gt)
        }
        (None, Some(path)) => {
            let v: Vec<f32> = read_json(path)?;
            (QueryEmbedding::new(path.display().to_string(), v), None)
        }
        (None, None) => return Err(usage("give --name or --vector-file")),
    };
    let pose = match (&a.bundle, a.camera) {
        (Some(dir), Some(i)) => {
            let manifest = load_manifest(dir)?;
            manifest
                .cameras
                .get(i)
                .map(|c| c.pose.clone())
                .ok_or_else(|| usage(format!("bundle has {} cameras, asked for {i}", manifest.cameras.len())))?
        }
        _ => CameraPose {
            eye: a.eye,
            target: a.target,
            up: a.up,
            fov_y_deg: a.fov,
            width: a.width,
            height: a.height,
        },
    };
    let cam = Camera::look_at(&pose)?;
    let settings = QuerySettings {
        window: a.window,
        level: parse_level(&a.level).map_err(|e| usage(e.to_string()))?,
        method: a.method.into(),
        ..Default::default()
    };
    let (mut report, png) =
        crate::report::run_query(&scene, &cam, &embedding, &set.canonicals, &settings, a.overlay.is_some())?;
    if let (Some(rel), Some(i)) = (gt_path, a.camera) {
        let file: MaskFile = read_json(&resolve(&a.queries, &rel))?;
        report.ground_truth_iou = Some(iou(&report.mask, &file.mask(i)?));
    }
    if let (Some(path), Some(png)) = (&a.overlay, png) {
        std::fs::write(path, png).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match &a.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "bench.csv")]
    pub csv: PathBuf,
    #[arg(long, default_value = "bench.svg")]
    pub svg: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Image sizes as HxW, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    pub sizes: Vec<(usize, usize)>,
    /// Codebook sizes L to sweep.
    #[arg(long, value_delimiter = ',')]
    pub atoms: Vec<usize>,
    /// Sparsity levels K to sweep.
    #[arg(long, value_delimiter = ',')]
    pub top_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Vec<MethodArg>,
    /// Timed repetitions per cell (odd, at least 5).
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Per-render allocation cap in bytes; larger dense cells are recorded as OOM.
    #[arg(long)]
    pub memory_budget: Option<usize>,
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let mut plan = BenchPlan::default();
    plan.seed = a.seed.unwrap_or(plan.seed);
    plan.num_gaussians = a.gaussians.unwrap_or(plan.num_gaussians);
    plan.feature_dim = a.dim.unwrap_or(plan.feature_dim);
    plan.levels = a.levels.unwrap_or(plan.levels);
    plan.repetitions = a.reps.unwrap_or(plan.repetitions);
    plan.warmup = a.warmup.unwrap_or(plan.warmup);
    plan.memory_budget = a.memory_budget.unwrap_or(plan.memory_budget);
    if !a.sizes.is_empty() {
        plan.image_sizes = a.sizes.clone();
    }
    if !a.atoms.is_empty() {
        plan.atom_sweep = a.atoms.clone();
    }
    if !a.top_k.is_empty() {
        plan.k_sweep = a.top_k.clone();
    }
    if !a.methods.is_empty() {
        plan.methods = a.methods.iter().map(|&m| m.into()).collect();
    }
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let out = run_benchmark(&plan)?;
    std::fs::write(&a.csv, &out.csv).with_context(|| format!("writing {}", a.csv.display()))?;
    std::fs::write(&a.svg, &out.svg).with_context(|| format!("writing {}", a.svg.display()))?;
    for r in &out.records {
        let method = sparsesplat::bench::method_name(r.method);
        match r.status {
            CellStatus::Ok => println!(
                "{method:>6} L={:<4} K={} {}x{}  render {:.2} ms  decode {:.2} ms  post {:.2} ms",
                r.num_atoms, r.top_k, r.height, r.width, r.render_ms, r.decode_ms, r.post_ms
            ),
            CellStatus::Oom => println!("{method:>6} L={:<4} K={} {}x{}  OOM", r.num_atoms, r.top_k, r.height, r.width),
        }
    }
    match verify_speedup(&out.records) {
        Ok(SpeedupReport::Pass { ratio, .. }) => println!("sparse faster than dense at L=64: {ratio:.2}x"),
        Ok(SpeedupReport::Fail { ratio, .. }) => println!("sparse NOT faster than dense at L=64: {ratio:.2}x"),
        Ok(SpeedupReport::Incomparable) | Err(_) => {}
    }
    println!("wrote {} and {}", a.csv.display(), a.svg.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, env = "SPARSESPLAT_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Largest width·height accepted per request.
    #[arg(long, default_value_t = DEFAULT_MAX_PIXELS)]
    pub max_pixels: usize,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let scene = load_scene(&a.scene).with_context(|| format!("loading {}", a.scene.display()))?;
    let queries = load_query_set(&a.queries)?;
    let session = Arc::new(ServeSession::new(scene, queries, a.max_pixels)?);
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(session)).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    bail!("server stopped")
}
