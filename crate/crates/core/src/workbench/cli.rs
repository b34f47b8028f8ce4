//! Command-line surface of the workbench.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::GaussianCloud;
use crate::image::PosedView;
use crate::imperfect::{perturb_cloud_report, Effect, NoiseConfig};
use crate::model::FlexModel;
use crate::raster::rasterize;
use crate::select::{select_views, train_quality_classifier, FeatureExtractor, HistogramFeatures, MatchConfig, QualityClassifier, SvmConfig};
use crate::train::{begin_finetune, begin_stage2, run_steps, Phase, SceneViews, TrainConfig, TrainState};
use crate::workbench::checkpoint::{load_train_state, save_train_state, Checkpoint};
use crate::workbench::dataset::{list_scenes, read_scene, save_png, write_atomic, write_scene, CAMERAS_FILE};
use crate::workbench::metrics::{chamfer, psnr, ssim};
use crate::workbench::ply::{export_ply, import_ply};
use crate::workbench::pool::{quality_samples, synth_candidate_pool, PoolConfig};
use crate::workbench::scene::{gen_scene, pick_views, render_views, ColorScheme, PoseConfig, SceneKind, SceneSpec};

/// Ground-truth cloud stored next to generated views.
pub const SCENE_PLY: &str = "scene.ply";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneDefaults {
    pub kind: SceneKind,
    pub scheme: ColorScheme,
    pub count: usize,
}

impl Default for SceneDefaults {
    fn default() -> Self {
        Self {
            kind: SceneKind::SphereShell,
            scheme: ColorScheme::TwoTone,
            count: 800,
        }
    }
}

/// Everything a command may read from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkbenchConfig {
    pub train: TrainConfig,
    pub poses: PoseConfig,
    pub scene: SceneDefaults,
    pub pool: PoolConfig,
    pub matcher: MatchConfig,
    pub svm: SvmConfig,
    /// Synthetic scenes used to fit a quality classifier when none is given.
    pub classifier_scenes: usize,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            poses: PoseConfig::default(),
            scene: SceneDefaults::default(),
            pool: PoolConfig::default(),
            matcher: MatchConfig::default(),
            svm: SvmConfig::default(),
            classifier_scenes: 8,
        }
    }
}

impl WorkbenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.matcher.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "viewsplat", version, about = "Multi-view to 3D Gaussian workbench")]
pub struct Cli {
    /// TOML config; defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural scene and render its dataset.
    GenScene(GenSceneArgs),
    /// Render a PLY cloud at the configured poses.
    Render(RenderArgs),
    /// Run or resume one training phase.
    Train(TrainArgs),
    /// Reconstruct a scene from N input views.
    Reconstruct(ReconstructArgs),
    /// Build a candidate pool and curate it.
    SelectViews(SelectArgs),
    /// Render one image per imperfect-input effect.
    Simulate(SimulateArgs),
    /// Held-out metrics table.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Scene name; the dataset lands in `<out>/<scene>`.
    #[arg(long, default_value = "scene")]
    pub scene: String,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Generate this many mixed-family scenes instead of one.
    #[arg(long)]
    pub family: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// PLY file to render.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// 1, 2 or finetune.
    #[arg(long)]
    pub phase: String,
    /// Dataset root holding one directory per scene.
    #[arg(long)]
    pub scene: PathBuf,
    /// Checkpoint written at the end.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint of the previous phase.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint of this phase to continue.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Steps to run now; defaults to the rest of the phase.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Start stage 2 with freshly initialized decoder heads.
    #[arg(long)]
    pub fresh_heads: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Model whose perturbed reconstructions supply corrupted candidates.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Quality classifier checkpoint; fitted on synthetic scenes if absent.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A scene directory or a dataset root.
    #[arg(long)]
    pub scene: PathBuf,
    /// Comma-separated input view counts.
    #[arg(long, default_value = "1,8", value_delimiter = ',')]
    pub views: Vec<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Ctx {
    cfg: WorkbenchConfig,
    seed: u64,
}

impl Ctx {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Trained weights when a checkpoint is given, else a seeded init.
    fn model(&self, checkpoint: Option<&Path>) -> Result<FlexModel> {
        match checkpoint {
            Some(p) => Ok(load_train_state(p)?.0.model),
            None => FlexModel::new(self.cfg.train.model, &mut self.rng(1)),
        }
    }

    fn input_views(&self, views: &[PosedView], n: usize) -> Result<Vec<PosedView>> {
        check_layout(views, &self.cfg.poses)?;
        Ok(pick_views(views, &self.cfg.poses.input_order(n)?))
    }
}

fn check_layout(views: &[PosedView], poses: &PoseConfig) -> Result<()> {
    if views.len() != poses.view_count() {
        return Err(invalid(format!(
            "scene has {} views, the pose layout expects {}",
            views.len(),
            poses.view_count()
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => WorkbenchConfig::load(p)?,
        None => WorkbenchConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let mut ctx = Ctx { cfg, seed };
    ctx.cfg.train.seed = seed;
    match cli.command {
        Command::GenScene(a) => gen_scene_cmd(&ctx, a),
        Command::Render(a) => render_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Reconstruct(a) => reconstruct_cmd(&ctx, a),
        Command::SelectViews(a) => select_cmd(&ctx, a),
        Command::Simulate(a) => simulate_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
    }
}

fn write_dataset(dir: &Path, cloud: &GaussianCloud, poses: &PoseConfig) -> Result<()> {
    write_scene(dir, &render_views(cloud, poses)?)?;
    export_ply(cloud, &dir.join(SCENE_PLY))
}

fn gen_scene_cmd(ctx: &Ctx, a: GenSceneArgs) -> Result<()> {
    let d = ctx.cfg.scene;
    let count = a.count.unwrap_or(d.count);
    if let Some(n) = a.family {
        for i in 0..n {
            let spec = SceneSpec::family(i, count, ctx.seed);
            let dir = a.out.join(format!("{}_{i:03}", a.scene));
            write_dataset(&dir, &gen_scene(&spec)?, &ctx.cfg.poses)?;
            println!("{}", dir.display());
        }
        return Ok(());
    }
    let spec = SceneSpec {
        kind: a.kind.as_deref().map(SceneKind::from_name).transpose()?.unwrap_or(d.kind),
        scheme: a.scheme.as_deref().map(ColorScheme::from_name).transpose()?.unwrap_or(d.scheme),
        count,
        seed: ctx.seed,
    };
    let dir = a.out.join(&a.scene);
    write_dataset(&dir, &gen_scene(&spec)?, &ctx.cfg.poses)?;
    println!("{}", dir.display());
    Ok(())
}

fn render_cmd(ctx: &Ctx, a: RenderArgs) -> Result<()> {
    let cloud = import_ply(&a.scene)?;
    write_scene(&a.out, &render_views(&cloud, &ctx.cfg.poses)?)?;
    println!("{}", a.out.display());
    Ok(())
}

fn load_dataset(root: &Path) -> Result<Vec<SceneViews>> {
    let dirs = if root.join(CAMERAS_FILE).exists() {
        vec![root.to_path_buf()]
    } else {
        list_scenes(root)?
    };
    if dirs.is_empty() {
        return Err(invalid(format!("no scenes under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            Ok(SceneViews {
                name: d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                views: read_scene(d)?,
            })
        })
        .collect()
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let phase = Phase::from_name(&a.phase)?;
    let (mut state, cfg) = if let Some(p) = &a.resume {
        let (s, cfg) = load_train_state(p)?;
        if s.phase != phase {
            return Err(invalid(format!("{} holds a {} state", p.display(), s.phase.name())));
        }
        (s, cfg)
    } else {
        let cfg = ctx.cfg.train.clone();
        cfg.validate()?;
        let state = match (phase, &a.init) {
            (Phase::Stage1, None) => TrainState::new(&cfg)?,
            (Phase::Stage1, Some(_)) => return Err(invalid("stage 1 starts from scratch; use --resume")),
            (_, None) => return Err(invalid("--init must name the previous phase's checkpoint")),
            (Phase::Stage2, Some(p)) => {
                let (prev, _) = load_train_state(p)?;
                if prev.phase != Phase::Stage1 {
                    return Err(invalid("stage 2 starts from a stage 1 checkpoint"));
                }
                begin_stage2(&prev, &cfg, !a.fresh_heads)?
            }
            (Phase::Finetune, Some(p)) => {
                let (prev, _) = load_train_state(p)?;
                if prev.phase != Phase::Stage2 {
                    return Err(invalid("fine-tuning starts from a stage 2 checkpoint"));
                }
                begin_finetune(&prev)
            }
        };
        (state, cfg)
    };
    let ds = load_dataset(&a.scene)?;
    run_steps(&mut state, &ds, &cfg, a.steps.unwrap_or(u64::MAX), &mut |r| println!("{}", r.log_line()))?;
    save_train_state(&a.out, &state, &cfg)
}

#[derive(Debug, Serialize)]
struct ViewMetrics {
    views: usize,
    psnr: f64,
    ssim: f64,
    chamfer: Option<f64>,
}

/// Reconstructs from `n` inputs and scores held-out renders.
fn score(
    ctx: &Ctx,
    model: &FlexModel,
    views: &[PosedView],
    n: usize,
    reference: Option<&GaussianCloud>,
) -> Result<(GaussianCloud, ViewMetrics, Vec<(usize, crate::image::Image)>)> {
    let cloud = model.reconstruct(&ctx.input_views(views, n)?)?;
    let bg = ctx.cfg.poses.background;
    let held = ctx.cfg.poses.heldout();
    let (mut p, mut s) = (0.0, 0.0);
    let mut renders = Vec::new();
    for &i in &held {
        let v = &views[i];
        let r = rasterize(&cloud, &v.camera, bg)?;
        let truth = v.image.composite(bg);
        p += psnr(&r.rgb, &truth)?;
        s += ssim(&r.rgb, &truth, v.image.width, v.image.height, 3)?;
        renders.push((i, r.to_image(bg)));
    }
    let k = held.len() as f64;
    let chamfer = reference.map(|c| chamfer(&cloud, c)).transpose()?;
    Ok((cloud, ViewMetrics { views: n, psnr: p / k, ssim: s / k, chamfer }, renders))
}

fn reference_cloud(dir: &Path) -> Result<Option<GaussianCloud>> {
    let p = dir.join(SCENE_PLY);
    if p.exists() {
        Ok(Some(import_ply(&p)?))
    } else {
        Ok(None)
    }
}

fn reconstruct_cmd(ctx: &Ctx, a: ReconstructArgs) -> Result<()> {
    let model = ctx.model(a.checkpoint.as_deref())?;
    let views = read_scene(&a.scene)?;
    let reference = reference_cloud(&a.scene)?;
    let (cloud, m, renders) = score(ctx, &model, &views, a.views, reference.as_ref())?;
    fs::create_dir_all(&a.out)?;
    export_ply(&cloud, &a.out.join("cloud.ply"))?;
    for (i, img) in renders {
        save_png(&a.out.join(format!("novel_{i}.png")), &img)?;
    }
    write_atomic(&a.out.join("metrics.json"), &serde_json::to_vec_pretty(&m)?)?;
    println!("views={} psnr={:.3} ssim={:.4}", m.views, m.psnr, m.ssim);
    Ok(())
}

fn fit_classifier(ctx: &Ctx, model: &FlexModel) -> Result<QualityClassifier> {
    let ex = HistogramFeatures::default();
    let mut rng = ctx.rng(3);
    let mut samples = Vec::new();
    for i in 0..ctx.cfg.classifier_scenes.max(1) {
        let spec = SceneSpec::family(i, ctx.cfg.scene.count, ctx.seed.wrapping_add(1000));
        let views = render_views(&gen_scene(&spec)?, &ctx.cfg.poses)?;
        samples.extend(quality_samples(&views, &ctx.cfg.poses, model, &mut rng, &ctx.cfg.pool, &ex)?);
    }
    train_quality_classifier(&samples, &SvmConfig { seed: ctx.seed, ..ctx.cfg.svm }, ex.id())
}

#[derive(Debug, Serialize)]
struct SelectionOutput {
    counts: Vec<usize>,
    mean: f64,
    std: f64,
    threshold: f64,
    queries: Vec<usize>,
    selected: Vec<usize>,
    corrupted: Vec<usize>,
}

fn select_cmd(ctx: &Ctx, a: SelectArgs) -> Result<()> {
    let model = ctx.model(a.checkpoint.as_deref())?;
    let views = read_scene(&a.scene)?;
    check_layout(&views, &ctx.cfg.poses)?;
    fs::create_dir_all(&a.out)?;
    let clf = match &a.classifier {
        Some(p) => QualityClassifier::from_checkpoint(&Checkpoint::load(p)?)?,
        None => {
            let clf = fit_classifier(ctx, &model)?;
            clf.to_checkpoint()?.save(&a.out.join("classifier.flxr"))?;
            clf
        }
    };
    let pool = synth_candidate_pool(&views, &ctx.cfg.poses, &model, &mut ctx.rng(2), &ctx.cfg.pool)?;
    for (i, v) in pool.set.views.iter().enumerate() {
        save_png(&a.out.join(format!("candidate_{i:02}.png")), &v.image)?;
    }
    let r = select_views(&pool.set, &clf, &HistogramFeatures::default(), &ctx.cfg.matcher)?;
    let out = SelectionOutput {
        counts: r.counts,
        mean: r.mean,
        std: r.std,
        threshold: r.threshold,
        queries: r.queries,
        selected: r.selected,
        corrupted: (0..pool.corrupted.len()).filter(|i| pool.corrupted[*i]).collect(),
    };
    write_atomic(&a.out.join("selection.json"), &serde_json::to_vec_pretty(&out)?)?;
    println!("selected={:?} corrupted={:?} threshold={:.3}", out.selected, out.corrupted, out.threshold);
    Ok(())
}

fn simulate_cmd(ctx: &Ctx, a: SimulateArgs) -> Result<()> {
    let model = ctx.model(a.checkpoint.as_deref())?;
    let views = read_scene(&a.scene)?;
    let inputs = ctx.input_views(&views, a.views)?;
    let cloud = model.reconstruct(&inputs)?;
    let bg = ctx.cfg.poses.background;
    let cam = &inputs[0].camera;
    fs::create_dir_all(&a.out)?;
    save_png(&a.out.join("clean.png"), &rasterize(&cloud, cam, bg)?.to_image(bg))?;
    let mut rng = ctx.rng(4);
    let mut report = Vec::new();
    for (e, effect) in Effect::ALL.into_iter().enumerate() {
        let mut probability = [0.0; 4];
        probability[e] = 1.0;
        let ncfg = NoiseConfig {
            probability,
            ..ctx.cfg.train.noise
        };
        let (noisy, applied) = perturb_cloud_report(&cloud, &mut rng, &ncfg, &model.cfg.activation)?;
        save_png(
            &a.out.join(format!("effect_{}.png", effect.name())),
            &rasterize(&noisy, cam, bg)?.to_image(bg),
        )?;
        report.extend(applied);
    }
    write_atomic(&a.out.join("noise.json"), &serde_json::to_vec_pretty(&report)?)?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let model = ctx.model(a.checkpoint.as_deref())?;
    let dirs = if a.scene.join(CAMERAS_FILE).exists() {
        vec![a.scene.clone()]
    } else {
        list_scenes(&a.scene)?
    };
    if dirs.is_empty() || a.views.is_empty() {
        return Err(invalid("eval needs at least one scene and one view count"));
    }
    let mut lines = vec![format!("{:<24} {:>5} {:>8} {:>7} {:>9}", "scene", "views", "psnr", "ssim", "chamfer")];
    let mut sums = vec![(0.0, 0.0); a.views.len()];
    for d in &dirs {
        let views = read_scene(d)?;
        let reference = reference_cloud(d)?;
        let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, &n) in a.views.iter().enumerate() {
            let (_, m, _) = score(ctx, &model, &views, n, reference.as_ref())?;
            sums[k].0 += m.psnr;
            sums[k].1 += m.ssim;
            let cd = m.chamfer.map(|c| format!("{c:.5}")).unwrap_or_else(|| "-".into());
            lines.push(format!("{name:<24} {n:>5} {:>8.3} {:>7.4} {cd:>9}", m.psnr, m.ssim));
        }
    }
    let k = dirs.len() as f64;
    for (&n, (p, s)) in a.views.iter().zip(&sums) {
        lines.push(format!("{:<24} {n:>5} {:>8.3} {:>7.4} {:>9}", "mean", p / k, s / k, "-"));
    }
    let table = lines.join("\n") + "\n";
    print!("{table}");
    if let Some(p) = &a.out {
        write_atomic(p, table.as_bytes())?;
    }
    Ok(())
}
