//! Variable-view transformer that turns posed images into a tri-plane.
//!
//! Each view is cut into patches and linearly embedded. A camera embedding
//! `e = MLP(camera_vec)` modulates the patch features per channel,
//! `tok = (P W) * (1 + gamma(e)) + beta(e) + PE`, and is also appended as an
//! explicit camera token. Per-view encoder blocks run over the `P + 1`
//! tokens, then learnable tri-plane query tokens cross-attend to the
//! concatenation of every view's tokens. Views carry no cross-view position
//! code, so the result does not depend on view order.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{invalid, shape, Error, Result};
use crate::image::PosedView;
use crate::nn::{round_f32, LayerNorm, Linear, Param, Parameters};
use crate::tape::{Mat, Tape, Var};
use crate::triplane::TriPlane;

pub const CAMERA_VEC_DIM: usize = 20;

/// Flattened row-major extrinsic followed by `(fx/W, fy/H, cx/W, cy/H)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraVec(pub [f64; CAMERA_VEC_DIM]);

pub fn camera_to_vec(cam: &Camera) -> CameraVec {
    let mut v = [0.0; CAMERA_VEC_DIM];
    for i in 0..4 {
        v[i * 4..i * 4 + 4].copy_from_slice(&cam.extrinsic[i]);
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    v[16] = cam.fx / w;
    v[17] = cam.fy / h;
    v[18] = cam.cx / w;
    v[19] = cam.cy / h;
    CameraVec(v)
}

impl CameraVec {
    pub fn to_camera(&self, width: usize, height: usize) -> Camera {
        let v = &self.0;
        let (w, h) = (width as f64, height as f64);
        Camera {
            extrinsic: std::array::from_fn(|i| [v[i * 4], v[i * 4 + 1], v[i * 4 + 2], v[i * 4 + 3]]),
            fx: v[16] * w,
            fy: v[17] * h,
            cx: v[18] * w,
            cy: v[19] * h,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub triplane_layers: usize,
    /// Tri-plane resolution `R` and channel count `d`.
    pub resolution: usize,
    pub channels: usize,
    /// Query tokens per plane side; each token expands to an
    /// `(R / plane_tokens)^2` texel block.
    pub plane_tokens: usize,
    pub max_views: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            heads: 4,
            encoder_layers: 1,
            triplane_layers: 2,
            resolution: 32,
            channels: 16,
            plane_tokens: 8,
            max_views: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid("image size must be a positive multiple of the patch size"));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(invalid("model dim must be divisible by the head count"));
        }
        if self.dim % 4 != 0 {
            return Err(invalid("model dim must be divisible by 4 for 2D position codes"));
        }
        if self.plane_tokens == 0 || self.resolution == 0 || self.resolution % self.plane_tokens != 0 {
            return Err(invalid("tri-plane resolution must be a multiple of plane_tokens"));
        }
        if self.channels == 0 || self.max_views == 0 {
            return Err(invalid("channels and max_views must be positive"));
        }
        Ok(())
    }

    pub fn patches_per_view(&self) -> usize {
        let s = self.image_size / self.patch_size;
        s * s
    }

    pub fn tokens_per_view(&self) -> usize {
        self.patches_per_view() + 1
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * 4
    }

    fn block(&self) -> usize {
        self.resolution / self.plane_tokens
    }
}

/// 2D sinusoidal code: `[sin(x w), cos(x w), sin(y w), cos(y w)]` over
/// `dim / 4` geometric frequencies.
pub fn position_code(dim: usize, x: f64, y: f64) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = vec![0.0; dim];
    for k in 0..quarter {
        let w = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
        out[k] = (x * w).sin();
        out[quarter + k] = (x * w).cos();
        out[2 * quarter + k] = (y * w).sin();
        out[3 * quarter + k] = (y * w).cos();
    }
    out
}

fn patch_position_codes(cfg: &EncoderConfig) -> Mat {
    let s = cfg.image_size / cfg.patch_size;
    let mut m = Mat::zeros(s * s, cfg.dim);
    for py in 0..s {
        for px in 0..s {
            m.row_mut(py * s + px)
                .copy_from_slice(&position_code(cfg.dim, px as f64, py as f64));
        }
    }
    m
}

/// `P x (p^2 * 4)` patch matrix of premultiplied RGB and alpha.
pub fn patchify(view: &PosedView, cfg: &EncoderConfig) -> Result<Mat> {
    let img = &view.image;
    if img.width != cfg.image_size || img.height != cfg.image_size {
        return Err(shape(format!(
            "view is {}x{}, encoder expects {}x{}",
            img.width, img.height, cfg.image_size, cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let s = cfg.image_size / p;
    let mut m = Mat::zeros(s * s, cfg.patch_features());
    for py in 0..s {
        for px in 0..s {
            let row = m.row_mut(py * s + px);
            let mut i = 0;
            for y in 0..p {
                for x in 0..p {
                    let px_ = img.pixel(px * p + x, py * p + y);
                    let a = px_[3];
                    row[i] = px_[0] * a;
                    row[i + 1] = px_[1] * a;
                    row[i + 2] = px_[2] * a;
                    row[i + 3] = a;
                    i += 4;
                }
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(&format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(&format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(&format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(&format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    /// Exact softmax attention of `queries` over `context`.
    pub fn forward(&self, tape: &mut Tape, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(tape, queries)?;
        let k = self.k.forward(tape, context)?;
        let v = self.v.forward(tape, context)?;
        let dim = tape.shape(q).1;
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, vh)?);
        }
        let o = tape.concat_cols(&outs)?;
        self.out.forward(tape, o)
    }
}

impl Parameters for Attention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

const LEAKY: f64 = 0.01;

impl FeedForward {
    fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(&format!("{name}.up"), dim, 2 * dim, true, rng),
            down: Linear::new(&format!("{name}.down"), 2 * dim, dim, true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.leaky_relu(h, LEAKY);
        self.down.forward(tape, h)
    }
}

impl Parameters for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.up.visit(f);
        self.down.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}

/// Pre-norm self-attention block used within a single view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBlock {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl ViewBlock {
    fn new(name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(&format!("{name}.norm_attn"), cfg.dim),
            attn: Attention::new(&format!("{name}.attn"), cfg.dim, cfg.heads, rng),
            norm_ff: LayerNorm::new(&format!("{name}.norm_ff"), cfg.dim),
            ff: FeedForward::new(&format!("{name}.ff"), cfg.dim, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = self.norm_attn.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, x)?;
        let f = self.ff.forward(tape, n)?;
        tape.add(x, f)
    }
}

impl Parameters for ViewBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm_attn.visit(f);
        self.attn.visit(f);
        self.norm_ff.visit(f);
        self.ff.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm_attn.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm_ff.visit_mut(f);
        self.ff.visit_mut(f);
    }
}

/// Tri-plane token block: cross-attention to the view tokens, then
/// self-attention among plane tokens, then a feed-forward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneBlock {
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub cross: Attention,
    pub norm_self: LayerNorm,
    pub attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl PlaneBlock {
    fn new(name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm_query: LayerNorm::new(&format!("{name}.norm_query"), cfg.dim),
            norm_context: LayerNorm::new(&format!("{name}.norm_context"), cfg.dim),
            cross: Attention::new(&format!("{name}.cross"), cfg.dim, cfg.heads, rng),
            norm_self: LayerNorm::new(&format!("{name}.norm_self"), cfg.dim),
            attn: Attention::new(&format!("{name}.attn"), cfg.dim, cfg.heads, rng),
            norm_ff: LayerNorm::new(&format!("{name}.norm_ff"), cfg.dim),
            ff: FeedForward::new(&format!("{name}.ff"), cfg.dim, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, context: Var) -> Result<Var> {
        let q = self.norm_query.forward(tape, x)?;
        let c = self.norm_context.forward(tape, context)?;
        let a = self.cross.forward(tape, q, c)?;
        let x = tape.add(x, a)?;
        let n = self.norm_self.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, x)?;
        let f = self.ff.forward(tape, n)?;
        tape.add(x, f)
    }
}

impl Parameters for PlaneBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm_query.visit(f);
        self.norm_context.visit(f);
        self.cross.visit(f);
        self.norm_self.visit(f);
        self.attn.visit(f);
        self.norm_ff.visit(f);
        self.ff.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm_query.visit_mut(f);
        self.norm_context.visit_mut(f);
        self.cross.visit_mut(f);
        self.norm_self.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm_ff.visit_mut(f);
        self.ff.visit_mut(f);
    }
}

/// Ordered view tokens with the row where each view's segment starts.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub boundaries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub camera_in: Linear,
    pub camera_out: Linear,
    pub ada_scale: Linear,
    pub ada_shift: Linear,
    pub view_blocks: Vec<ViewBlock>,
    pub queries: Param,
    pub plane_blocks: Vec<PlaneBlock>,
    pub norm_out: LayerNorm,
    pub head: Linear,
    patch_codes: Rc<Mat>,
    query_map: Rc<Vec<usize>>,
}

impl ViewEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let t = cfg.plane_tokens;
        let mut queries = Param::zeros("enc.queries", 3 * t * t, d, false);
        for plane in 0..3 {
            for ty in 0..t {
                for tx in 0..t {
                    let code = position_code(d, tx as f64, ty as f64);
                    let row = (plane * t + ty) * t + tx;
                    for (c, v) in code.iter().enumerate() {
                        queries.data[row * d + c] = round_f32(0.5 * v + rng.random_range(-0.5..0.5));
                    }
                }
            }
        }
        let b = cfg.block();
        Ok(Self {
            cfg,
            patch_embed: Linear::new("enc.patch_embed", cfg.patch_features(), d, false, rng),
            camera_in: Linear::new("enc.camera_in", CAMERA_VEC_DIM, d, true, rng),
            camera_out: Linear::new("enc.camera_out", d, d, true, rng),
            ada_scale: Linear::new("enc.ada_scale", d, d, false, rng),
            ada_shift: Linear::new("enc.ada_shift", d, d, false, rng),
            view_blocks: (0..cfg.encoder_layers)
                .map(|l| ViewBlock::new(&format!("enc.view{l}"), &cfg, rng))
                .collect(),
            queries,
            plane_blocks: (0..cfg.triplane_layers)
                .map(|l| PlaneBlock::new(&format!("enc.plane{l}"), &cfg, rng))
                .collect(),
            norm_out: LayerNorm::new("enc.norm_out", d),
            head: Linear::new("enc.head", d, b * b * cfg.channels, true, rng),
            patch_codes: Rc::new(patch_position_codes(&cfg)),
            query_map: Rc::new(query_map(&cfg)),
        })
    }

    /// Camera embedding `e`, `1 x D`.
    pub fn camera_embedding(&self, tape: &mut Tape, cam: &CameraVec) -> Result<Var> {
        let c = tape.constant(Mat::from_vec(1, CAMERA_VEC_DIM, cam.0.to_vec()));
        let h = self.camera_in.forward(tape, c)?;
        let h = tape.leaky_relu(h, LEAKY);
        self.camera_out.forward(tape, h)
    }

    /// Modulated patch tokens followed by the camera token, `(P + 1) x D`,
    /// before any attention.
    pub fn tokenize_on_tape(&self, tape: &mut Tape, patches: &Mat, embedding: Var) -> Result<Var> {
        let x = tape.constant(patches.clone());
        let feat = self.patch_embed.forward(tape, x)?;
        let gamma = self.ada_scale.forward(tape, embedding)?;
        let beta = self.ada_shift.forward(tape, embedding)?;
        let modulated = tape.mul_row(feat, gamma)?;
        let feat = tape.add(feat, modulated)?;
        let feat = tape.add_row(feat, beta)?;
        let pe = tape.constant((*self.patch_codes).clone());
        let feat = tape.add(feat, pe)?;
        tape.concat_rows(&[feat, embedding])
    }

    pub fn tokenize_view(&self, view: &PosedView) -> Result<Mat> {
        let patches = patchify(view, &self.cfg)?;
        let mut tape = Tape::new();
        let e = self.camera_embedding(&mut tape, &camera_to_vec(&view.camera))?;
        let t = self.tokenize_on_tape(&mut tape, &patches, e)?;
        Ok(tape.value(t).clone())
    }

    pub fn tokenize_views(&self, views: &[PosedView]) -> Result<TokenSequence> {
        let mut parts = Vec::with_capacity(views.len());
        let mut boundaries = Vec::with_capacity(views.len());
        let mut rows = 0;
        for v in views {
            boundaries.push(rows);
            let t = self.tokenize_view(v)?;
            rows += t.rows;
            parts.push(t);
        }
        let mut data = Vec::with_capacity(rows * self.cfg.dim);
        for p in &parts {
            data.extend_from_slice(&p.data);
        }
        Ok(TokenSequence {
            tokens: Mat::from_vec(rows, self.cfg.dim, data),
            boundaries,
        })
    }

    /// Tri-plane as a `(3 R^2) x d` tape node.
    pub fn encode_on_tape(&self, tape: &mut Tape, views: &[PosedView]) -> Result<Var> {
        if views.is_empty() {
            return Err(invalid("at least one input view is required"));
        }
        if views.len() > self.cfg.max_views {
            return Err(invalid(format!("{} views exceed the limit of {}", views.len(), self.cfg.max_views)));
        }
        let mut segments = Vec::with_capacity(views.len());
        for view in views {
            let patches = patchify(view, &self.cfg)?;
            let e = self.camera_embedding(tape, &camera_to_vec(&view.camera))?;
            let mut x = self.tokenize_on_tape(tape, &patches, e)?;
            for b in &self.view_blocks {
                x = b.forward(tape, x)?;
            }
            segments.push(x);
        }
        let context = tape.concat_rows(&segments)?;
        if tape.shape(context).0 != views.len() * self.cfg.tokens_per_view() {
            return Err(shape("token count does not match the number of views"));
        }
        let mut x = self.queries.bind(tape);
        for b in &self.plane_blocks {
            x = b.forward(tape, x, context)?;
        }
        let x = self.norm_out.forward(tape, x)?;
        let y = self.head.forward(tape, x)?;
        let r = self.cfg.resolution;
        tape.permute(y, 3 * r * r, self.cfg.channels, self.query_map.clone())
    }

    pub fn encode_views(&self, views: &[PosedView]) -> Result<TriPlane> {
        let mut tape = Tape::new();
        let t = self.encode_on_tape(&mut tape, views)?;
        let r = self.cfg.resolution;
        let m = tape.value(t).clone();
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoded tri-plane".into()));
        }
        TriPlane::from_mat(r, self.cfg.channels, m)
    }
}

/// Flat source index of every tri-plane entry within the head output
/// `(3 T^2) x (b^2 d)`: token `(plane, ty, tx)` covers texels
/// `u = tx b + px`, `v = ty b + py`.
fn query_map(cfg: &EncoderConfig) -> Vec<usize> {
    let (r, t, d, b) = (cfg.resolution, cfg.plane_tokens, cfg.channels, cfg.block());
    let cols = b * b * d;
    let mut map = vec![0; 3 * r * r * d];
    for plane in 0..3 {
        for v in 0..r {
            for u in 0..r {
                let token = (plane * t + v / b) * t + u / b;
                let sub = (v % b) * b + u % b;
                for c in 0..d {
                    map[((plane * r * r) + v * r + u) * d + c] = token * cols + sub * d + c;
                }
            }
        }
    }
    map
}

impl Parameters for ViewEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.patch_embed.visit(f);
        self.camera_in.visit(f);
        self.camera_out.visit(f);
        self.ada_scale.visit(f);
        self.ada_shift.visit(f);
        for b in &self.view_blocks {
            b.visit(f);
        }
        f(&self.queries);
        for b in &self.plane_blocks {
            b.visit(f);
        }
        self.norm_out.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        self.camera_in.visit_mut(f);
        self.camera_out.visit_mut(f);
        self.ada_scale.visit_mut(f);
        self.ada_shift.visit_mut(f);
        for b in &mut self.view_blocks {
            b.visit_mut(f);
        }
        f(&mut self.queries);
        for b in &mut self.plane_blocks {
            b.visit_mut(f);
        }
        self.norm_out.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_camera_vector() {
        let cam = Camera {
            extrinsic: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        let v = camera_to_vec(&cam);
        assert_eq!(
            v.0,
            [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5]
        );
        assert_eq!(camera_to_vec(&v.to_camera(64, 64)), v);
    }

    #[test]
    fn query_map_is_a_permutation() {
        let cfg = EncoderConfig::default();
        let mut m = query_map(&cfg);
        m.sort_unstable();
        assert!(m.iter().enumerate().all(|(i, v)| i == *v));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.plane_tokens = 5;
        assert!(cfg.validate().is_err());
    }
}
