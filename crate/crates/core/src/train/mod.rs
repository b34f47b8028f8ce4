//! The three-phase training program: radiance-field pretraining, Gaussian
//! training from transferred heads, and fine-tuning on imperfect inputs.

pub mod config;
pub mod loss;
pub mod optim;
pub mod sampling;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{activate_backward, GaussianGrad, RawGaussianParams, RAW_DIM};
use crate::image::{PosedView, RenderedImage};
use crate::imperfect::simulate_imperfect_inputs;
use crate::model::FlexModel;
use crate::nn::Parameters;
use crate::raster::{rasterize, rasterize_grad};
use crate::tape::{Grads, Mat, Tape};
use crate::triplane::{activate_rows, transfer_nerf_heads, DecoderMlp};
use crate::volume::{build_rays, volume_on_tape, RayBatch, VolumeConfig};
use crate::workbench::metrics::psnr;

pub use config::{DataConfig, StepCounts, TrainConfig};
pub use loss::{composite_loss, composite_loss_target, LossConfig, LossParts, LossTarget};
pub use optim::{clip_global_norm, global_norm, lr_at, AdamW, OptimConfig, ParamGrads, Schedule};
pub use sampling::{elevation_probabilities, sample_distinct, weighted_elevation_sampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Stage2,
    Finetune,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Finetune => "finetune",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Phase::Stage1),
            "2" | "stage2" => Ok(Phase::Stage2),
            "finetune" => Ok(Phase::Finetune),
            other => Err(invalid(format!("unknown phase {other:?}"))),
        }
    }

    fn base_lr(&self, cfg: &OptimConfig) -> f64 {
        match self {
            Phase::Stage1 => cfg.lr_stage1,
            Phase::Stage2 => cfg.lr_stage2,
            Phase::Finetune => cfg.lr_finetune,
        }
    }

    fn total_steps(&self, steps: &StepCounts) -> u64 {
        match self {
            Phase::Stage1 => steps.stage1,
            Phase::Stage2 => steps.stage2,
            Phase::Finetune => steps.finetune,
        }
    }
}

/// The clean views of one training scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneViews {
    pub name: String,
    pub views: Vec<PosedView>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: FlexModel,
    pub optim: AdamW,
    /// Steps taken in the current phase.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub phase: Phase,
}

impl TrainState {
    /// Fresh model at the start of pretraining.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = FlexModel::new(cfg.model, &mut rng)?;
        Ok(Self {
            optim: AdamW::for_model(&model),
            model,
            step: 0,
            rng,
            phase: Phase::Stage1,
        })
    }

    pub fn learning_rate(&self, cfg: &TrainConfig) -> f64 {
        lr_at(
            self.step,
            &Schedule {
                base_lr: self.phase.base_lr(&cfg.optim),
                warmup: cfg.optim.warmup_steps,
                total: self.phase.total_steps(&cfg.steps),
            },
        )
    }
}

/// One optimizer step's summary; [`StepRecord::log_line`] is the metrics
/// log format.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub loss: LossParts,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Input view count per scene in the batch.
    pub input_views: Vec<usize>,
    /// Replaced inputs per scene (fine-tuning only).
    pub corrupted_views: Vec<usize>,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let views: Vec<String> = self.input_views.iter().map(|v| v.to_string()).collect();
        let corrupted: Vec<String> = self.corrupted_views.iter().map(|v| v.to_string()).collect();
        format!(
            "phase={} step={} loss={} l2={} perceptual={} opacity={} lr={} grad_norm={} clipped_norm={} views={} corrupted={}",
            self.phase.name(),
            self.step,
            self.loss.total,
            self.loss.l2,
            self.loss.perceptual,
            self.loss.opacity,
            self.lr,
            self.grad_norm,
            self.clipped_norm,
            views.join(","),
            corrupted.join(","),
        )
    }
}

/// Gradients of every model parameter in visit order; parameters absent
/// from the tape get zeros.
pub fn collect_grads(model: &impl Parameters, tape: &Tape, grads: &Grads) -> ParamGrads {
    let mut out = Vec::new();
    model.visit(&mut |p| {
        let g = tape
            .param_var(&p.name)
            .and_then(|v| grads.get(v))
            .map(|m| m.data.clone())
            .unwrap_or_else(|| vec![0.0; p.len()]);
        out.push(g);
    });
    out
}

/// Averaged loss over `targets` for the Gaussian path, forward only.
pub fn gs_loss(model: &FlexModel, inputs: &[PosedView], targets: &[PosedView], cfg: &TrainConfig) -> Result<LossParts> {
    let cloud = model.reconstruct(inputs)?;
    let mut parts = LossParts::default();
    for t in targets {
        let render = rasterize(&cloud, &t.camera, cfg.data.background)?;
        let (l, _) = composite_loss(&render, t, cfg.data.background, &cfg.loss)?;
        parts.add_scaled(&l, 1.0 / targets.len() as f64);
    }
    Ok(parts)
}

/// Averaged loss over `targets` for the Gaussian path and its gradient
/// with respect to every model parameter.
pub fn gs_loss_and_grads(
    model: &FlexModel,
    inputs: &[PosedView],
    targets: &[PosedView],
    cfg: &TrainConfig,
) -> Result<(LossParts, ParamGrads)> {
    if targets.is_empty() {
        return Err(invalid("at least one supervision view is required"));
    }
    let act = model.cfg.activation;
    let bg = cfg.data.background;
    let mut tape = Tape::new();
    let (_, raw) = model.forward_raw(&mut tape, inputs)?;
    let raw_m = tape.value(raw).clone();
    let cloud = activate_rows(&raw_m, model.grid(), &act)?;
    let n = cloud.count();
    let mut g_acc = vec![GaussianGrad::default(); n];
    let mut parts = LossParts::default();
    let w = 1.0 / targets.len() as f64;
    for t in targets {
        let render = rasterize(&cloud, &t.camera, bg)?;
        let (l, mut adj) = composite_loss(&render, t, bg, &cfg.loss)?;
        parts.add_scaled(&l, w);
        adj.iter_mut().for_each(|a| *a *= w);
        let g = rasterize_grad(&cloud, &t.camera, bg, &adj)?;
        for (acc, gi) in g_acc.iter_mut().zip(&g) {
            for k in 0..3 {
                acc.position[k] += gi.position[k];
                acc.color[k] += gi.color[k];
                acc.scale[k] += gi.scale[k];
            }
            acc.opacity += gi.opacity;
            for k in 0..4 {
                acc.rotation[k] += gi.rotation[k];
            }
        }
    }
    let mut seed = Mat::zeros(n, RAW_DIM);
    for (i, g) in g_acc.iter().enumerate() {
        let r = RawGaussianParams::from_slice(raw_m.row(i))?;
        seed.row_mut(i).copy_from_slice(&activate_backward(&r, g, &act));
    }
    let grads = tape.backward(&[(raw, seed)])?;
    Ok((parts, collect_grads(model, &tape, &grads)))
}

/// A strided square of pixels in one supervision view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayPatch {
    pub x0: usize,
    pub y0: usize,
}

fn volume_config(model: &FlexModel, cfg: &TrainConfig) -> VolumeConfig {
    VolumeConfig {
        samples_per_ray: cfg.data.ray_samples,
        background: cfg.data.background,
        activation: model.cfg.activation,
        ..VolumeConfig::default()
    }
}

/// Radiance-field loss on one ray patch per target, and its gradient.
pub fn nerf_loss_and_grads(
    model: &FlexModel,
    inputs: &[PosedView],
    targets: &[(PosedView, RayPatch)],
    cfg: &TrainConfig,
) -> Result<(LossParts, ParamGrads)> {
    if targets.is_empty() {
        return Err(invalid("at least one supervision view is required"));
    }
    let d = &cfg.data;
    let (size, stride) = (d.patch_size, d.patch_stride);
    let vcfg = volume_config(model, cfg);
    let mut tape = Tape::new();
    let tri = model.encoder.encode_on_tape(&mut tape, inputs)?;
    let mut batch = RayBatch::default();
    for (view, patch) in targets {
        let pixels: Vec<(f64, f64)> = (0..size)
            .flat_map(|j| (0..size).map(move |i| ((patch.x0 + i * stride) as f64, (patch.y0 + j * stride) as f64)))
            .collect();
        let rays = build_rays(&view.camera, &pixels, &vcfg)?;
        let offset = batch.points.len();
        batch.points.extend(rays.points);
        batch
            .segments
            .extend(rays.segments.into_iter().map(|mut s| {
                s.start += offset;
                s
            }));
    }
    let out = volume_on_tape(&mut tape, tri, model.cfg.encoder.resolution, &model.decoder, &batch, &vcfg)?;
    let vals = tape.value(out).clone();
    let per = size * size;
    let w = 1.0 / targets.len() as f64;
    let mut seed = Mat::zeros(vals.rows, 4);
    let mut parts = LossParts::default();
    for (t, (view, patch)) in targets.iter().enumerate() {
        let mut render = RenderedImage {
            width: size,
            height: size,
            rgb: Vec::with_capacity(per * 3),
            alpha: Vec::with_capacity(per),
        };
        for r in t * per..(t + 1) * per {
            render.rgb.extend_from_slice(&vals.row(r)[..3]);
            render.alpha.push(vals.row(r)[3]);
        }
        let target = LossTarget::from_view(view, d.background).patch(patch.x0, patch.y0, size, stride);
        let (l, adj) = composite_loss_target(&render, &target, &cfg.loss)?;
        parts.add_scaled(&l, w);
        for (i, a) in adj.iter().enumerate() {
            seed.data[t * per * 4 + i] = a * w;
        }
    }
    let grads = tape.backward(&[(out, seed)])?;
    Ok((parts, collect_grads(model, &tape, &grads)))
}

fn check_dataset(dataset: &[SceneViews], min_views: usize, phase: Phase) -> Result<()> {
    if dataset.is_empty() {
        return Err(invalid(format!("{} needs at least one scene", phase.name())));
    }
    if let Some(s) = dataset.iter().find(|s| s.views.len() < min_views) {
        return Err(invalid(format!(
            "{} needs at least {min_views} views per scene; {} has {}",
            phase.name(),
            s.name,
            s.views.len()
        )));
    }
    Ok(())
}

fn min_views(phase: Phase, cfg: &TrainConfig) -> usize {
    match phase {
        Phase::Stage1 => cfg.data.stage1_max_views,
        Phase::Stage2 => cfg.data.targets_per_step,
        Phase::Finetune => cfg.sim.max_inputs.max(cfg.data.targets_per_step),
    }
}

/// One optimizer step of the state's current phase.
pub fn train_step(state: &mut TrainState, dataset: &[SceneViews], cfg: &TrainConfig) -> Result<StepRecord> {
    check_dataset(dataset, min_views(state.phase, cfg), state.phase)?;
    let lr = state.learning_rate(cfg);
    let d = &cfg.data;
    let mut total: Option<ParamGrads> = None;
    let mut parts = LossParts::default();
    let mut input_views = Vec::with_capacity(d.batch_scenes);
    let mut corrupted_views = Vec::new();
    let wb = 1.0 / d.batch_scenes as f64;
    for _ in 0..d.batch_scenes {
        let scene = &dataset[state.rng.random_range(0..dataset.len())];
        let views = &scene.views;
        let n_targets = d.targets_per_step.min(views.len());
        let (l, g) = match state.phase {
            Phase::Stage1 => {
                let k = state.rng.random_range(1..=d.stage1_max_views.min(views.len()));
                let inputs = pick(views, &sample_distinct(views, k, &mut state.rng)?);
                let tidx = sample_distinct(views, n_targets, &mut state.rng)?;
                let span = (d.patch_size - 1) * d.patch_stride + 1;
                let mut targets = Vec::with_capacity(tidx.len());
                for i in tidx {
                    let v = &views[i];
                    let patch = RayPatch {
                        x0: state.rng.random_range(0..=v.image.width - span),
                        y0: state.rng.random_range(0..=v.image.height - span),
                    };
                    targets.push((v.clone(), patch));
                }
                input_views.push(k);
                nerf_loss_and_grads(&state.model, &inputs, &targets, cfg)?
            }
            Phase::Stage2 => {
                let k = state.rng.random_range(1..=d.stage2_max_views.min(views.len()));
                let inputs = pick(views, &sample_distinct(views, k, &mut state.rng)?);
                let targets = pick(views, &sample_distinct(views, n_targets, &mut state.rng)?);
                input_views.push(k);
                gs_loss_and_grads(&state.model, &inputs, &targets, cfg)?
            }
            Phase::Finetune => {
                let batch = simulate_imperfect_inputs(&state.model, views, &mut state.rng, &cfg.noise, &cfg.sim)?;
                let targets = pick(views, &sample_distinct(views, n_targets, &mut state.rng)?);
                input_views.push(batch.inputs.len());
                corrupted_views.push(batch.corrupted.iter().filter(|c| **c).count());
                gs_loss_and_grads(&state.model, &batch.inputs, &targets, cfg)?
            }
        };
        parts.add_scaled(&l, wb);
        match &mut total {
            None => total = Some(g.into_iter().map(|v| v.into_iter().map(|x| x * wb).collect()).collect()),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y * wb;
                    }
                }
            }
        }
    }
    let mut grads = total.expect("batch_scenes is positive");
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{} gradients", state.phase.name())));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.optim.grad_clip);
    let clipped_norm = global_norm(&grads);
    state.optim.update(&mut state.model, &grads, lr, &cfg.optim)?;
    let record = StepRecord {
        phase: state.phase,
        step: state.step,
        loss: parts,
        lr,
        grad_norm,
        clipped_norm,
        input_views,
        corrupted_views,
    };
    state.step += 1;
    Ok(record)
}

fn pick(views: &[PosedView], idx: &[usize]) -> Vec<PosedView> {
    idx.iter().map(|&i| views[i].clone()).collect()
}

/// Runs `steps` steps (or until the phase's step budget is used up).
pub fn run_steps(
    state: &mut TrainState,
    dataset: &[SceneViews],
    cfg: &TrainConfig,
    steps: u64,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<()> {
    let budget = state.phase.total_steps(&cfg.steps);
    for _ in 0..steps {
        if state.step >= budget {
            break;
        }
        let r = train_step(state, dataset, cfg)?;
        on_step(&r);
    }
    Ok(())
}

/// Runs the rest of the current phase.
pub fn run_phase(
    state: &mut TrainState,
    dataset: &[SceneViews],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<()> {
    run_steps(state, dataset, cfg, u64::MAX, on_step)
}

pub fn train_stage1(dataset: &[SceneViews], cfg: &TrainConfig, on_step: &mut dyn FnMut(&StepRecord)) -> Result<TrainState> {
    check_dataset(dataset, cfg.data.stage1_max_views, Phase::Stage1)?;
    let mut state = TrainState::new(cfg)?;
    run_phase(&mut state, dataset, cfg, on_step)?;
    Ok(state)
}

/// Starts Gaussian training from a pretrained state. With `transfer`, the
/// trunk and color/opacity heads carry over and the remaining heads are
/// fresh; without it the whole decoder is fresh. The encoder always
/// carries over.
pub fn begin_stage2(state1: &TrainState, cfg: &TrainConfig, transfer: bool) -> Result<TrainState> {
    let mut rng = state1.rng.clone();
    let fresh = DecoderMlp::new(3 * cfg.model.encoder.channels, &cfg.model.decoder, &mut rng)?;
    let mut model = state1.model.clone();
    model.decoder = if transfer {
        transfer_nerf_heads(&state1.model.decoder, &fresh)?
    } else {
        fresh
    };
    Ok(TrainState {
        optim: AdamW::for_model(&model),
        model,
        step: 0,
        rng,
        phase: Phase::Stage2,
    })
}

pub fn train_stage2(
    dataset: &[SceneViews],
    state1: &TrainState,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainState> {
    let mut state = begin_stage2(state1, cfg, true)?;
    run_phase(&mut state, dataset, cfg, on_step)?;
    Ok(state)
}

pub fn begin_finetune(state2: &TrainState) -> TrainState {
    TrainState {
        optim: AdamW::for_model(&state2.model),
        model: state2.model.clone(),
        step: 0,
        rng: state2.rng.clone(),
        phase: Phase::Finetune,
    }
}

pub fn finetune_imperfect(
    dataset: &[SceneViews],
    state2: &TrainState,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainState> {
    let mut state = begin_finetune(state2);
    run_phase(&mut state, dataset, cfg, on_step)?;
    Ok(state)
}

/// Mean PSNR of renders from `inputs` against each held-out view, both
/// composited over `background`.
pub fn heldout_psnr(model: &FlexModel, inputs: &[PosedView], heldout: &[PosedView], background: [f64; 3]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(invalid("no held-out views"));
    }
    let cloud = model.reconstruct(inputs)?;
    let mut sum = 0.0;
    for v in heldout {
        let r = rasterize(&cloud, &v.camera, background)?;
        sum += psnr(&r.rgb, &v.image.composite(background))?;
    }
    Ok(sum / heldout.len() as f64)
}
