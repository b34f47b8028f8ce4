//! Named parameters, linear layers and the visitor used by the optimizer and
//! checkpointing.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};

/// A named dense tensor. Values are kept representable in single precision
/// so that checkpoints round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Whether weight decay applies. False for biases and normalization gains.
    pub decay: bool,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize, decay: bool) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
            decay,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        decay: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(name, rows, cols, decay);
        for v in &mut p.data {
            *v = round_f32(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.param(&self.name, self.rows, self.cols, &self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic traversal over every parameter of a model component.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Uniform fan-in initialization with a zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_bound(name, fan_in, fan_out, bias, bound, rng)
    }

    pub fn with_bound(
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.weight"), fan_in, fan_out, bound, true, rng),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), 1, fan_out, false)),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), fan_in, fan_out, true),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), 1, fan_out, false)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = b.bind(tape);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn same_shape(&self, other: &Linear) -> bool {
        self.weight.rows == other.weight.rows
            && self.weight.cols == other.weight.cols
            && self.bias.is_some() == other.bias.is_some()
    }

    /// Copies values, keeping this layer's parameter names.
    pub fn copy_values_from(&mut self, other: &Linear) {
        self.weight.data.clone_from(&other.weight.data);
        if let (Some(b), Some(ob)) = (&mut self.bias, &other.bias) {
            b.data.clone_from(&ob.data);
        }
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Learned per-channel gain and shift applied after a row normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub shift: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gain = Param::zeros(format!("{name}.gain"), 1, dim, false);
        gain.data.iter_mut().for_each(|v| *v = 1.0);
        Self {
            gain,
            shift: Param::zeros(format!("{name}.shift"), 1, dim, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.row_norm(x);
        let g = self.gain.bind(tape);
        let s = self.shift.bind(tape);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, s)
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}
