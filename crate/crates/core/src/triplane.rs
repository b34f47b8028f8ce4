//! Tri-plane feature volume, the initial-position grid and the decoder MLP
//! that maps sampled features onto raw Gaussian parameters.

use std::rc::Rc;

use rand::Rng;

use crate::error::{shape, Error, Result};
use crate::gaussian::{activate, ActivationConfig, Gaussian, GaussianCloud, RawGaussianParams, RAW_DIM};
use crate::nn::{Linear, Param, Parameters};
use crate::tape::{GatherTaps, Mat, Tape, Var};

/// Three axis-aligned `R x R` grids of `d`-channel features, stored as one
/// `(3 R^2) x d` matrix. Plane order is xy, xz, yz; within a plane, row
/// `v * R + u` holds texel `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    resolution: usize,
    channels: usize,
    data: Mat,
}

pub const PLANE_XY: usize = 0;
pub const PLANE_XZ: usize = 1;
pub const PLANE_YZ: usize = 2;

impl TriPlane {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            data: Mat::zeros(3 * resolution * resolution, channels),
        }
    }

    pub fn from_mat(resolution: usize, channels: usize, data: Mat) -> Result<Self> {
        if data.rows != 3 * resolution * resolution || data.cols != channels {
            return Err(shape(format!(
                "tri-plane {resolution}x{resolution}x{channels} from {}x{} matrix",
                data.rows, data.cols
            )));
        }
        if data.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tri-plane".into()));
        }
        Ok(Self {
            resolution,
            channels,
            data,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn texel(&self, plane: usize, u: usize, v: usize) -> &[f64] {
        self.data.row(plane * self.resolution * self.resolution + v * self.resolution + u)
    }

    pub fn texel_mut(&mut self, plane: usize, u: usize, v: usize) -> &mut [f64] {
        let r = self.resolution;
        self.data.row_mut(plane * r * r + v * r + u)
    }

    /// Feature dimension seen by the decoder (planes concatenated).
    pub fn feature_dim(&self) -> usize {
        3 * self.channels
    }
}

/// Maps `c` in `[-1, 1]` to two texel indices and the weight of the second.
/// Texel centers sit at `-1 + (2k + 1) / R`; outside them the edge is clamped.
fn texel_coord(c: f64, r: usize) -> (usize, usize, f64) {
    if r == 1 {
        return (0, 0, 0.0);
    }
    let t = (((c + 1.0) * 0.5) * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
    let i0 = (t.floor() as usize).min(r - 2);
    (i0, i0 + 1, t - i0 as f64)
}

fn plane_taps(r: usize, plane: usize, a: f64, b: f64) -> [(u32, f64); 4] {
    let (u0, u1, fu) = texel_coord(a, r);
    let (v0, v1, fv) = texel_coord(b, r);
    let base = plane * r * r;
    let idx = |u: usize, v: usize| (base + v * r + u) as u32;
    [
        (idx(u0, v0), (1.0 - fu) * (1.0 - fv)),
        (idx(u1, v0), fu * (1.0 - fv)),
        (idx(u0, v1), (1.0 - fu) * fv),
        (idx(u1, v1), fu * fv),
    ]
}

fn check_in_cube(p: [f64; 3]) -> Result<()> {
    if p.iter().any(|c| !(-1.0..=1.0).contains(c)) {
        return Err(Error::OutOfDomain(format!("sample point {p:?} outside [-1, 1]^3")));
    }
    Ok(())
}

/// Bilinear taps for a batch of points, three groups (xy, xz, yz) per point.
pub fn point_taps(resolution: usize, points: &[[f64; 3]]) -> Result<GatherTaps> {
    let mut taps = Vec::with_capacity(points.len() * 3);
    for p in points {
        check_in_cube(*p)?;
        taps.push(plane_taps(resolution, PLANE_XY, p[0], p[1]));
        taps.push(plane_taps(resolution, PLANE_XZ, p[0], p[2]));
        taps.push(plane_taps(resolution, PLANE_YZ, p[1], p[2]));
    }
    Ok(GatherTaps { groups: 3, taps })
}

/// Concatenated bilinear samples of the three planes at `p`.
pub fn sample_feature(tri: &TriPlane, p: [f64; 3]) -> Result<Vec<f64>> {
    let taps = point_taps(tri.resolution, &[p])?;
    let d = tri.channels;
    let mut out = vec![0.0; 3 * d];
    for (g, t) in taps.taps.iter().enumerate() {
        for &(row, w) in t {
            for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(tri.data.row(row as usize)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Cell centers of a uniform `n^3` partition of `[-1, 1]^3`. Point
/// `(ix * n + iy) * n + iz` is the center of cell `(ix, iy, iz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitGrid {
    n: usize,
    positions: Vec<[f64; 3]>,
}

impl InitGrid {
    pub fn side(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.n + iy) * self.n + iz
    }

    pub fn cell_of(&self, i: usize) -> (usize, usize, usize) {
        let n = self.n;
        (i / (n * n), (i / n) % n, i % n)
    }
}

pub fn make_init_grid(n: usize) -> Result<InitGrid> {
    if n == 0 {
        return Err(Error::InvalidArgument("grid side must be at least 1".into()));
    }
    let center = |i: usize| -1.0 + (2 * i + 1) as f64 / n as f64;
    let mut positions = Vec::with_capacity(n * n * n);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                positions.push([center(ix), center(iy), center(iz)]);
            }
        }
    }
    Ok(InitGrid { n, positions })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub leaky_slope: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 4,
            leaky_slope: 0.01,
        }
    }
}

/// Fully-connected trunk followed by five linear heads whose outputs
/// concatenate into the 14 raw Gaussian channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderMlp {
    pub trunk: Vec<Linear>,
    pub offset: Linear,
    pub color: Linear,
    pub opacity: Linear,
    pub scale: Linear,
    pub rotation: Linear,
    pub leaky_slope: f64,
}

const HEAD_INIT: f64 = 0.01;

impl DecoderMlp {
    /// Fresh decoder: offset head zero, other heads small random, rotation
    /// bias pointing at the identity quaternion.
    pub fn new(feature_dim: usize, cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::with_zero_heads(feature_dim, cfg, rng)?;
        let h = cfg.hidden;
        mlp.color = Linear::with_bound("dec.color", h, 3, true, HEAD_INIT, rng);
        mlp.opacity = Linear::with_bound("dec.opacity", h, 1, true, HEAD_INIT, rng);
        mlp.reinit_gs_heads(rng);
        Ok(mlp)
    }

    /// Random trunk, all head weights zero. Head biases are zero except the
    /// rotation bias `(1, 0, 0, 0)`.
    pub fn with_zero_heads(feature_dim: usize, cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one nonempty layer".into()));
        }
        let mut trunk = Vec::with_capacity(cfg.layers);
        let mut fan_in = feature_dim;
        for l in 0..cfg.layers {
            let bound = (6.0 / fan_in as f64).sqrt();
            trunk.push(Linear::with_bound(&format!("dec.trunk{l}"), fan_in, cfg.hidden, true, bound, rng));
            fan_in = cfg.hidden;
        }
        let h = cfg.hidden;
        let mut rotation = Linear::zeros("dec.rotation", h, 4, true);
        if let Some(b) = &mut rotation.bias {
            b.data[0] = 1.0;
        }
        Ok(Self {
            trunk,
            offset: Linear::zeros("dec.offset", h, 3, true),
            color: Linear::zeros("dec.color", h, 3, true),
            opacity: Linear::zeros("dec.opacity", h, 1, true),
            scale: Linear::zeros("dec.scale", h, 3, true),
            rotation,
            leaky_slope: cfg.leaky_slope,
        })
    }

    /// Fresh offset, scale and rotation heads (the parts not shared with a
    /// radiance-field decoder).
    pub fn reinit_gs_heads(&mut self, rng: &mut impl Rng) {
        let h = self.hidden();
        self.offset = Linear::zeros("dec.offset", h, 3, true);
        self.scale = Linear::with_bound("dec.scale", h, 3, true, HEAD_INIT, rng);
        let mut rotation = Linear::with_bound("dec.rotation", h, 4, true, HEAD_INIT, rng);
        if let Some(b) = &mut rotation.bias {
            b.data[0] = 1.0;
        }
        self.rotation = rotation;
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk[0].fan_in()
    }

    pub fn hidden(&self) -> usize {
        self.trunk.last().map(|l| l.fan_out()).unwrap_or(0)
    }

    pub fn trunk_on_tape(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let (_, cols) = tape.shape(features);
        if cols != self.feature_dim() {
            return Err(shape(format!(
                "decoder expects {} feature channels, got {cols}",
                self.feature_dim()
            )));
        }
        let mut x = features;
        for layer in &self.trunk {
            let y = layer.forward(tape, x)?;
            x = tape.leaky_relu(y, self.leaky_slope);
        }
        Ok(x)
    }

    /// `N x 14` raw parameters in the fixed channel order.
    pub fn raw_on_tape(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let h = self.trunk_on_tape(tape, features)?;
        let heads = [
            self.offset.forward(tape, h)?,
            self.color.forward(tape, h)?,
            self.opacity.forward(tape, h)?,
            self.scale.forward(tape, h)?,
            self.rotation.forward(tape, h)?,
        ];
        tape.concat_cols(&heads)
    }

    /// `(N x 3 raw color, N x 1 raw opacity)` for radiance-field rendering.
    pub fn color_opacity_on_tape(&self, tape: &mut Tape, features: Var) -> Result<(Var, Var)> {
        let h = self.trunk_on_tape(tape, features)?;
        Ok((self.color.forward(tape, h)?, self.opacity.forward(tape, h)?))
    }

    /// Raw parameters for a batch of feature rows, without gradient tracking.
    pub fn raw_params(&self, features: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = self.raw_on_tape(&mut tape, f)?;
        Ok(tape.value(out).clone())
    }
}

impl Parameters for DecoderMlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.trunk {
            l.visit(f);
        }
        self.offset.visit(f);
        self.color.visit(f);
        self.opacity.visit(f);
        self.scale.visit(f);
        self.rotation.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.trunk {
            l.visit_mut(f);
        }
        self.offset.visit_mut(f);
        self.color.visit_mut(f);
        self.opacity.visit_mut(f);
        self.scale.visit_mut(f);
        self.rotation.visit_mut(f);
    }
}

/// Samples the tri-plane at every grid point and runs the decoder, all on
/// the tape. Returns the `N x 14` raw node.
pub fn decode_on_tape(
    tape: &mut Tape,
    tri: Var,
    resolution: usize,
    mlp: &DecoderMlp,
    grid: &InitGrid,
) -> Result<Var> {
    let taps = Rc::new(point_taps(resolution, grid.positions())?);
    let features = tape.gather(tri, taps)?;
    mlp.raw_on_tape(tape, features)
}

/// Activates every row of an `N x 14` raw matrix at its grid point.
pub fn activate_rows(raw: &Mat, grid: &InitGrid, cfg: &ActivationConfig) -> Result<GaussianCloud> {
    if raw.rows != grid.count() || raw.cols != RAW_DIM {
        return Err(shape(format!(
            "{}x{} raw parameters for a grid of {}",
            raw.rows,
            raw.cols,
            grid.count()
        )));
    }
    let gaussians = grid
        .positions()
        .iter()
        .enumerate()
        .map(|(i, p0)| activate(&RawGaussianParams::from_slice(raw.row(i))?, *p0, cfg))
        .collect::<Result<Vec<Gaussian>>>()?;
    GaussianCloud::on_grid(gaussians, grid.side())
}

pub fn decode_cloud(
    tri: &TriPlane,
    mlp: &DecoderMlp,
    grid: &InitGrid,
    cfg: &ActivationConfig,
) -> Result<GaussianCloud> {
    if mlp.feature_dim() != tri.feature_dim() {
        return Err(shape(format!(
            "decoder input {} does not match tri-plane feature {}",
            mlp.feature_dim(),
            tri.feature_dim()
        )));
    }
    let mut tape = Tape::new();
    let t = tape.constant(tri.data.clone());
    let raw = decode_on_tape(&mut tape, t, tri.resolution, mlp, grid)?;
    activate_rows(tape.value(raw), grid, cfg)
}

/// Copies the trunk and the color and opacity heads of `src` into a copy of
/// `dst`; offset, scale and rotation heads keep `dst`'s values.
pub fn transfer_nerf_heads(src: &DecoderMlp, dst: &DecoderMlp) -> Result<DecoderMlp> {
    let trunk_ok = src.trunk.len() == dst.trunk.len()
        && src.trunk.iter().zip(&dst.trunk).all(|(a, b)| a.same_shape(b));
    if !trunk_ok || !src.color.same_shape(&dst.color) || !src.opacity.same_shape(&dst.opacity) {
        return Err(shape("source and destination decoders differ in transferable shapes"));
    }
    let mut out = dst.clone();
    for (o, s) in out.trunk.iter_mut().zip(&src.trunk) {
        o.copy_values_from(s);
    }
    out.color.copy_values_from(&src.color);
    out.opacity.copy_values_from(&src.opacity);
    out.leaky_slope = src.leaky_slope;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tri(r: usize, d: usize, seed: u64) -> TriPlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * r * r * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        TriPlane::from_mat(r, d, Mat::from_vec(3 * r * r, d, data)).unwrap()
    }

    fn node(r: usize, k: usize) -> f64 {
        -1.0 + (2 * k + 1) as f64 / r as f64
    }

    #[test]
    fn sample_at_node_returns_stored_features() {
        let tri = random_tri(8, 3, 1);
        let (i, j, k) = (2, 5, 7);
        let f = sample_feature(&tri, [node(8, i), node(8, j), node(8, k)]).unwrap();
        let expected: Vec<f64> = [tri.texel(PLANE_XY, i, j), tri.texel(PLANE_XZ, i, k), tri.texel(PLANE_YZ, j, k)].concat();
        for (a, b) in f.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_planes_sample_constant() {
        let mut tri = TriPlane::zeros(5, 2);
        let c = [0.3, -1.25];
        for p in 0..3 {
            for u in 0..5 {
                for v in 0..5 {
                    tri.texel_mut(p, u, v).copy_from_slice(&c);
                }
            }
        }
        for p in [[-1.0, 1.0, 0.3], [0.123, -0.77, 0.999], [0.0; 3]] {
            let f = sample_feature(&tri, p).unwrap();
            for g in 0..3 {
                assert!((f[2 * g] - c[0]).abs() < 1e-14 && (f[2 * g + 1] - c[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn midpoint_between_nodes_averages() {
        let tri = random_tri(6, 2, 2);
        // halfway between u=1 and u=2 along x, on-node in y and z
        let x = 0.5 * (node(6, 1) + node(6, 2));
        let f = sample_feature(&tri, [x, node(6, 3), node(6, 4)]).unwrap();
        for c in 0..2 {
            let xy = 0.5 * (tri.texel(PLANE_XY, 1, 3)[c] + tri.texel(PLANE_XY, 2, 3)[c]);
            let xz = 0.5 * (tri.texel(PLANE_XZ, 1, 4)[c] + tri.texel(PLANE_XZ, 2, 4)[c]);
            let yz = tri.texel(PLANE_YZ, 3, 4)[c];
            assert!((f[c] - xy).abs() < 1e-12);
            assert!((f[2 + c] - xz).abs() < 1e-12);
            assert!((f[4 + c] - yz).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_rejects_outside_points() {
        let tri = random_tri(4, 1, 3);
        assert!(sample_feature(&tri, [1.01, 0.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_is_lipschitz_continuous() {
        let tri = random_tri(8, 4, 4);
        let range = tri.as_mat().data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // each plane sample moves by at most 2 * range * R/2 * |dp| per axis
        let lip = 2.0 * range * 8.0;
        let p = [0.11, -0.42, 0.67];
        let base = sample_feature(&tri, p).unwrap();
        for eps in [1e-1, 1e-2, 1e-3, 1e-5] {
            let q = [p[0] + eps, p[1] - eps, p[2] + eps];
            let f = sample_feature(&tri, q).unwrap();
            let diff = f.iter().zip(&base).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff <= lip * 2.0 * eps, "eps {eps}: {diff}");
        }
    }

    #[test]
    fn init_grid_layouts() {
        let g = make_init_grid(2).unwrap();
        assert_eq!(g.count(), 8);
        for p in g.positions() {
            assert!(p.iter().all(|c| c.abs() == 0.5));
        }
        assert_eq!(make_init_grid(1).unwrap().positions(), &[[0.0; 3]]);
        let g = make_init_grid(100).unwrap();
        assert_eq!(g.count(), 1_000_000);
        assert!((g.positions()[0][0] - (-1.0 + 0.01)).abs() < 1e-15);
        assert!((g.positions()[1][2] - g.positions()[0][2] - 0.02).abs() < 1e-12);
        assert!(make_init_grid(0).is_err());
        let g = make_init_grid(3).unwrap();
        assert_eq!(g.cell_of(g.index(2, 0, 1)), (2, 0, 1));
    }

    #[test]
    fn zero_heads_decode_to_shrunken_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tri = random_tri(4, 2, 6);
        let mlp = DecoderMlp::with_zero_heads(6, &DecoderConfig::default(), &mut rng).unwrap();
        let grid = make_init_grid(3).unwrap();
        let cfg = ActivationConfig::default();
        let cloud = decode_cloud(&tri, &mlp, &grid, &cfg).unwrap();
        assert_eq!(cloud.count(), 27);
        // straight-line reference: raw channels are the head biases
        let o0 = 1.0 / (1.0 + 2.0f64.exp());
        for (g, p0) in cloud.iter().zip(grid.positions()) {
            for k in 0..3 {
                assert_eq!(g.position[k], 0.75 * p0[k]);
            }
            assert!((g.opacity - o0).abs() < 1e-15);
            assert!((g.opacity - 0.1192).abs() < 1e-4);
        }
    }

    #[test]
    fn decode_count_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = DecoderMlp::new(6, &DecoderConfig::default(), &mut rng).unwrap();
        let grid = make_init_grid(1).unwrap();
        let cfg = ActivationConfig::default();
        let a = decode_cloud(&random_tri(4, 2, 8), &mlp, &grid, &cfg).unwrap();
        assert_eq!(a.count(), 1);
        let grid = make_init_grid(4).unwrap();
        let a = decode_cloud(&random_tri(4, 2, 8), &mlp, &grid, &cfg).unwrap();
        let b = decode_cloud(&random_tri(4, 2, 8), &mlp, &grid, &cfg).unwrap();
        let c = decode_cloud(&random_tri(4, 2, 9), &mlp, &grid, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), c.count());
        assert!(decode_cloud(&random_tri(4, 3, 8), &mlp, &grid, &cfg).is_err());
    }

    #[test]
    fn head_transfer_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = DecoderConfig::default();
        let src = DecoderMlp::new(6, &cfg, &mut rng).unwrap();
        let dst = DecoderMlp::new(6, &cfg, &mut rng).unwrap();
        let out = transfer_nerf_heads(&src, &dst).unwrap();
        for (a, b) in out.trunk.iter().zip(&src.trunk) {
            assert_eq!(a.weight.data, b.weight.data);
        }
        assert_eq!(out.rotation, dst.rotation);
        assert_eq!(out.scale, dst.scale);
        assert_eq!(out.offset, dst.offset);

        let features = Mat::from_vec(2, 6, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = src.raw_params(&features).unwrap();
        let b = out.raw_params(&features).unwrap();
        for r in 0..2 {
            assert_eq!(&a.row(r)[3..7], &b.row(r)[3..7]);
        }

        let other = DecoderMlp::new(6, &DecoderConfig { hidden: 32, ..cfg }, &mut rng).unwrap();
        assert!(transfer_nerf_heads(&other, &dst).is_err());
    }
}
