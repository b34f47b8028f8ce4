//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! trainable parameters (bound by name, so a parameter used twice shares one
//! node) or constants. [`Tape::backward`] seeds adjoints on any set of nodes
//! and sweeps the tape once in reverse.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // a is stored as (m x k) or, transposed, as (k x m); likewise b.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover every index addressed through the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Bilinear taps for a gather: each output row, for each group, combines up
/// to four weighted input rows.
#[derive(Debug, Clone)]
pub struct GatherTaps {
    pub groups: usize,
    /// `taps[row * groups + g]`
    pub taps: Vec<[(u32, f64); 4]>,
}

/// One ray's contiguous block of samples in a [`Tape::composite_rays`] call.
#[derive(Debug, Clone, Copy)]
pub struct RaySegment {
    pub start: usize,
    pub len: usize,
    /// Step length divided by the reference step.
    pub step_ratio: f64,
}

/// Activation constants used by ray compositing.
#[derive(Debug, Clone, Copy)]
pub struct CompositeParams {
    pub color_gain: f64,
    pub color_bias: f64,
    pub opacity_shift: f64,
    pub alpha_max: f64,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    RowNorm { a: Var, inv_std: Vec<f64> },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Gather { a: Var, taps: Rc<GatherTaps> },
    Permute { a: Var, map: Rc<Vec<usize>> },
    Composite {
        color: Var,
        opacity: Var,
        segments: Rc<Vec<RaySegment>>,
        params: CompositeParams,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter; repeated binds return the same node.
    pub fn param(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let v = self.variable(Mat::from_vec(rows, cols, data.to_vec()));
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape(format!("matmul ({m}x{k}) by ({br}x{bc}), trans_b={trans_b}")));
        }
        let mut out = Mat::zeros(m, n);
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            trans_b,
            &mut out.data,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn row_vector_for(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(shape(format!(
                "{what}: row vector {:?} for {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_vector_for(a, row, "add_row")?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for chunk in out.data.chunks_mut(r.len()) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (x, y) in out.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_vector_for(a, row, "mul_row")?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for chunk in out.data.chunks_mut(r.len()) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data
            .iter_mut()
            .for_each(|x| *x = if *x >= 0.0 { *x } else { *x * slope });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + 1e-5)` with no affine part.
    pub fn row_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let src = self.value(a);
        let (rows, cols) = (src.rows, src.cols);
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::RowNorm { a, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(shape("concat_cols row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(shape("concat_rows column counts differ"));
        }
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(shape(format!("slice_cols {start}+{len} of {cols}")));
        }
        let src = self.value(a);
        let mut out = Mat::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    /// Output row `i`, group `g` is `sum_t w_t * a[row_t, :]`; groups are
    /// concatenated along columns.
    pub fn gather(&mut self, a: Var, taps: Rc<GatherTaps>) -> Result<Var> {
        let (in_rows, d) = self.shape(a);
        if taps.groups == 0 || taps.taps.len() % taps.groups != 0 {
            return Err(shape("gather tap table is not a whole number of rows"));
        }
        if taps
            .taps
            .iter()
            .any(|t| t.iter().any(|(r, _)| *r as usize >= in_rows))
        {
            return Err(shape("gather tap row out of range"));
        }
        let rows = taps.taps.len() / taps.groups;
        let mut out = Mat::zeros(rows, taps.groups * d);
        let src = self.value(a);
        for (i, t) in taps.taps.iter().enumerate() {
            let (r, g) = (i / taps.groups, i % taps.groups);
            let dst = &mut out.data[r * taps.groups * d + g * d..][..d];
            for &(row, w) in t {
                if w != 0.0 {
                    for (o, s) in dst.iter_mut().zip(src.row(row as usize)) {
                        *o += w * s;
                    }
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gather { a, taps }, ng))
    }

    /// Reorders elements: `out.data[i] = a.data[map[i]]`.
    pub fn permute(&mut self, a: Var, rows: usize, cols: usize, map: Rc<Vec<usize>>) -> Result<Var> {
        let n = self.value(a).data.len();
        if map.len() != rows * cols || map.iter().any(|&m| m >= n) {
            return Err(shape("permute map does not fit"));
        }
        let src = &self.value(a).data;
        let data = map.iter().map(|&m| src[m]).collect();
        let ng = self.ng(a);
        Ok(self.push(Mat::from_vec(rows, cols, data), Op::Permute { a, map }, ng))
    }

    /// Front-to-back volumetric compositing of per-sample raw color (`M x 3`)
    /// and raw opacity (`M x 1`). Output is `rays x 4`: background-filled RGB
    /// and accumulated alpha.
    pub fn composite_rays(
        &mut self,
        color: Var,
        opacity: Var,
        segments: Rc<Vec<RaySegment>>,
        params: CompositeParams,
    ) -> Result<Var> {
        let (m, c3) = self.shape(color);
        if c3 != 3 || self.shape(opacity) != (m, 1) {
            return Err(shape("composite_rays expects M x 3 color and M x 1 opacity"));
        }
        if segments.iter().any(|s| s.start + s.len > m) {
            return Err(shape("ray segment out of range"));
        }
        let cv = &self.value(color).data;
        let ov = &self.value(opacity).data;
        let mut out = Mat::zeros(segments.len(), 4);
        for (r, seg) in segments.iter().enumerate() {
            let (rgb, t_final) = composite_forward(cv, ov, seg, &params, |_, _, _, _| {});
            let row = out.row_mut(r);
            for k in 0..3 {
                row[k] = rgb[k];
            }
            row[3] = 1.0 - t_final;
        }
        let ng = self.ng(color) || self.ng(opacity);
        Ok(self.push(
            out,
            Op::Composite {
                color,
                opacity,
                segments,
                params,
            },
            ng,
        ))
    }

    /// Sweeps the tape in reverse from the given seeds.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Result<Grads> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            let (r, c) = self.shape(*v);
            if (g.rows, g.cols) != (r, c) {
                return Err(shape(format!(
                    "seed {}x{} for node {r}x{c}",
                    g.rows, g.cols
                )));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows, av.cols);
                let n = g.cols;
                if self.ng(*a) {
                    // dA = dC * op(B)ᵀ
                    let mut da = Mat::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &bv.data, !trans_b, &mut da.data, 0.0);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = if *trans_b {
                        // C = A Bᵀ, B is n x k: dB = dCᵀ A
                        let mut db = Mat::zeros(n, k);
                        gemm(n, m, k, &g.data, true, &av.data, false, &mut db.data, 0.0);
                        db
                    } else {
                        let mut db = Mat::zeros(k, n);
                        gemm(k, m, n, &av.data, true, &g.data, false, &mut db.data, 0.0);
                        db
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let mut da = g.clone();
                    da.data
                        .iter_mut()
                        .zip(&self.value(*b).data)
                        .for_each(|(x, y)| *x *= y);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = g.clone();
                    db.data
                        .iter_mut()
                        .zip(&self.value(*a).data)
                        .for_each(|(x, y)| *x *= y);
                    accumulate(grads, *b, db);
                }
            }
            Op::MulRow(a, row) => {
                let rv = &self.value(*row).data;
                if self.ng(*a) {
                    let mut da = g.clone();
                    for chunk in da.data.chunks_mut(rv.len()) {
                        chunk.iter_mut().zip(rv).for_each(|(x, y)| *x *= y);
                    }
                    accumulate(grads, *a, da);
                }
                if self.ng(*row) {
                    let av = &self.value(*a).data;
                    let mut dr = Mat::zeros(1, rv.len());
                    for (gc, ac) in g.data.chunks(rv.len()).zip(av.chunks(rv.len())) {
                        for ((d, x), y) in dr.data.iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Scale(a, s) => {
                let mut da = g.clone();
                da.data.iter_mut().for_each(|x| *x *= s);
                accumulate(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let mut da = g.clone();
                da.data
                    .iter_mut()
                    .zip(&self.value(*a).data)
                    .for_each(|(d, x)| {
                        if *x < 0.0 {
                            *d *= slope
                        }
                    });
                accumulate(grads, *a, da);
            }
            Op::RowNorm { a, inv_std } => {
                let y = &node.value;
                let cols = y.cols as f64;
                let mut da = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gy, yy) = (g.row(r), y.row(r));
                    let mg = gy.iter().sum::<f64>() / cols;
                    let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(gy).zip(yy) {
                        *d = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gy, yy) = (g.row(r), y.row(r));
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(gy).zip(yy) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.ng(*p) {
                        let mut dp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(grads, *p, dp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.ng(*p) {
                        let data = g.data[off * cols..(off + rows) * cols].to_vec();
                        accumulate(grads, *p, Mat::from_vec(rows, cols, data));
                    }
                    off += rows;
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = self.shape(*a);
                let mut da = Mat::zeros(rows, cols);
                for r in 0..rows {
                    da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, da);
            }
            Op::Gather { a, taps } => {
                let (rows, d) = self.shape(*a);
                let mut da = Mat::zeros(rows, d);
                for (i, t) in taps.taps.iter().enumerate() {
                    let (r, gi) = (i / taps.groups, i % taps.groups);
                    let src = &g.data[r * taps.groups * d + gi * d..][..d];
                    for &(row, w) in t {
                        if w != 0.0 {
                            for (o, s) in da.row_mut(row as usize).iter_mut().zip(src) {
                                *o += w * s;
                            }
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Permute { a, map } => {
                let (rows, cols) = self.shape(*a);
                let mut da = Mat::zeros(rows, cols);
                for (i, &m) in map.iter().enumerate() {
                    da.data[m] += g.data[i];
                }
                accumulate(grads, *a, da);
            }
            Op::Composite {
                color,
                opacity,
                segments,
                params,
            } => {
                let cv = &self.value(*color).data;
                let ov = &self.value(*opacity).data;
                let m = ov.len();
                let mut dc = Mat::zeros(m, 3);
                let mut d_o = Mat::zeros(m, 1);
                for (r, seg) in segments.iter().enumerate() {
                    composite_backward(cv, ov, seg, params, g.row(r), &mut dc.data, &mut d_o.data);
                }
                if self.ng(*color) {
                    accumulate(grads, *color, dc);
                }
                if self.ng(*opacity) {
                    accumulate(grads, *opacity, d_o);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for row in g.data.chunks(g.cols.max(1)) {
        for (o, v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

struct SampleState {
    color: [f64; 3],
    color_live: [bool; 3],
    alpha: f64,
    alpha_live: bool,
    opacity: f64,
}

fn sample_state(cv: &[f64], ov: &[f64], i: usize, ratio: f64, p: &CompositeParams) -> SampleState {
    let mut color = [0.0; 3];
    let mut color_live = [false; 3];
    for k in 0..3 {
        let c = crate::gaussian::sigmoid(cv[i * 3 + k]) * p.color_gain - p.color_bias;
        color_live[k] = (0.0..=1.0).contains(&c);
        color[k] = c.clamp(0.0, 1.0);
    }
    let opacity = crate::gaussian::sigmoid(ov[i] - p.opacity_shift);
    let a = opacity * ratio;
    SampleState {
        color,
        color_live,
        alpha: a.min(p.alpha_max),
        alpha_live: a < p.alpha_max,
        opacity,
    }
}

/// Returns background-filled RGB and final transmittance. `visit` sees
/// `(sample index, state, transmittance before the sample, prefix color)`.
fn composite_forward(
    cv: &[f64],
    ov: &[f64],
    seg: &RaySegment,
    p: &CompositeParams,
    mut visit: impl FnMut(usize, &SampleState, f64, [f64; 3]),
) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut acc = [0.0; 3];
    for i in seg.start..seg.start + seg.len {
        let s = sample_state(cv, ov, i, seg.step_ratio, p);
        let w = s.alpha * t;
        for k in 0..3 {
            acc[k] += w * s.color[k];
        }
        visit(i, &s, t, acc);
        t *= 1.0 - s.alpha;
    }
    let rgb = std::array::from_fn(|k| acc[k] + t * p.background[k]);
    (rgb, t)
}

fn composite_backward(
    cv: &[f64],
    ov: &[f64],
    seg: &RaySegment,
    p: &CompositeParams,
    g: &[f64],
    dc: &mut [f64],
    d_o: &mut [f64],
) {
    let (rgb, t_final) = composite_forward(cv, ov, seg, p, |_, _, _, _| {});
    let g_rgb = [g[0], g[1], g[2]];
    let g_a = g[3];
    composite_forward(cv, ov, seg, p, |i, s, t, prefix| {
        for k in 0..3 {
            if s.color_live[k] {
                let sg = crate::gaussian::sigmoid(cv[i * 3 + k]);
                dc[i * 3 + k] += g_rgb[k] * s.alpha * t * p.color_gain * sg * (1.0 - sg);
            }
        }
        if s.alpha_live {
            let one_minus = 1.0 - s.alpha;
            let mut d_alpha = 0.0;
            for k in 0..3 {
                // everything composited behind this sample, background included
                let suffix = rgb[k] - prefix[k];
                d_alpha += g_rgb[k] * (t * s.color[k] - suffix / one_minus);
            }
            d_alpha += g_a * t_final / one_minus;
            d_o[i] += d_alpha * seg.step_ratio * s.opacity * (1.0 - s.opacity);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_mat(rows: usize, cols: usize, seed: &mut u64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| lcg(seed)).collect())
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for every leaf.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<Mat>) {
        let mut seed = 99u64;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
        let out = build(&mut tape, &leaves);
        let (r, c) = tape.shape(out);
        let w = rand_mat(r, c, &mut seed);
        let grads = tape.backward(&[(out, w.clone())]).unwrap();
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let ls: Vec<Var> = ins.iter().map(|m| t.variable(m.clone())).collect();
            let o = build(&mut t, &ls);
            t.value(o).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(*leaf).cloned().unwrap_or(Mat::zeros(inputs[li].rows, inputs[li].cols));
            for e in 0..inputs[li].data.len() {
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[li].data[e] += h;
                let mut minus = inputs.clone();
                minus[li].data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[e];
                assert!(
                    (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs(),
                    "leaf {li} entry {e}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn matmul_variants() {
        let mut s = 1u64;
        check(|t, v| t.matmul(v[0], v[1]).unwrap(), vec![rand_mat(3, 4, &mut s), rand_mat(4, 2, &mut s)]);
        check(|t, v| t.matmul_bt(v[0], v[1]).unwrap(), vec![rand_mat(3, 4, &mut s), rand_mat(5, 4, &mut s)]);
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut s = 2u64;
        check(
            |t, v| {
                let a = t.add_row(v[0], v[1]).unwrap();
                let b = t.mul_row(a, v[2]).unwrap();
                let c = t.mul(b, v[0]).unwrap();
                let d = t.add(c, v[0]).unwrap();
                let e = t.leaky_relu(d, 0.1);
                t.scale(e, 1.7)
            },
            vec![rand_mat(4, 3, &mut s), rand_mat(1, 3, &mut s), rand_mat(1, 3, &mut s)],
        );
    }

    #[test]
    fn norm_and_softmax() {
        let mut s = 3u64;
        check(|t, v| t.row_norm(v[0]), vec![rand_mat(3, 5, &mut s)]);
        check(|t, v| t.softmax_rows(v[0]), vec![rand_mat(3, 5, &mut s)]);
    }

    #[test]
    fn reshaping_ops() {
        let mut s = 4u64;
        check(
            |t, v| {
                let a = t.concat_cols(&[v[0], v[1]]).unwrap();
                let b = t.concat_rows(&[a, a]).unwrap();
                t.slice_cols(b, 1, 3).unwrap()
            },
            vec![rand_mat(2, 2, &mut s), rand_mat(2, 3, &mut s)],
        );
        let map = Rc::new(vec![5, 0, 3, 3, 1, 2]);
        check(move |t, v| t.permute(v[0], 3, 2, map.clone()).unwrap(), vec![rand_mat(2, 3, &mut s)]);
    }

    #[test]
    fn gather_taps() {
        let mut s = 5u64;
        let taps = Rc::new(GatherTaps {
            groups: 2,
            taps: vec![
                [(0, 0.25), (1, 0.25), (2, 0.5), (3, 0.0)],
                [(3, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)],
                [(1, 0.1), (1, 0.2), (2, 0.3), (0, 0.4)],
                [(2, 0.6), (3, 0.4), (0, 0.0), (0, 0.0)],
            ],
        });
        check(move |t, v| t.gather(v[0], taps.clone()).unwrap(), vec![rand_mat(4, 3, &mut s)]);
    }

    #[test]
    fn composite_matches_differences() {
        let mut s = 6u64;
        let segments = Rc::new(vec![
            RaySegment { start: 0, len: 4, step_ratio: 0.8 },
            RaySegment { start: 4, len: 0, step_ratio: 1.0 },
            RaySegment { start: 4, len: 3, step_ratio: 1.3 },
        ]);
        let params = CompositeParams {
            color_gain: 1.002,
            color_bias: 0.001,
            opacity_shift: 2.0,
            alpha_max: 0.99,
            background: [1.0, 0.5, 0.2],
        };
        check(
            move |t, v| t.composite_rays(v[0], v[1], segments.clone(), params).unwrap(),
            vec![rand_mat(7, 3, &mut s), {
                let mut m = rand_mat(7, 1, &mut s);
                m.data.iter_mut().for_each(|x| *x = *x * 3.0 + 1.0);
                m
            }],
        );
    }

    #[test]
    fn empty_ray_is_background() {
        let mut t = Tape::new();
        let c = t.constant(Mat::zeros(0, 3));
        let o = t.constant(Mat::zeros(0, 1));
        let params = CompositeParams {
            color_gain: 1.002,
            color_bias: 0.001,
            opacity_shift: 2.0,
            alpha_max: 0.99,
            background: [0.1, 0.2, 0.3],
        };
        let out = t
            .composite_rays(c, o, Rc::new(vec![RaySegment { start: 0, len: 0, step_ratio: 1.0 }]), params)
            .unwrap();
        assert_eq!(t.value(out).data, vec![0.1, 0.2, 0.3, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(2, 3));
        let b = t.constant(Mat::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        let r = t.constant(Mat::zeros(1, 2));
        assert!(t.add_row(a, r).is_err());
        assert!(t.backward(&[(a, Mat::zeros(3, 2))]).is_err());
    }

    #[test]
    fn params_bind_once() {
        let mut t = Tape::new();
        let a = t.param("w", 1, 2, &[1.0, 2.0]);
        let b = t.param("w", 1, 2, &[9.0, 9.0]);
        assert_eq!(a, b);
        assert_eq!(t.value(a).data, vec![1.0, 2.0]);
    }
}
