//! Parameterized building blocks shared by the quantizer and the transformer.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var, NORM_EPS};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform([d_in, d_out], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.get(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform([kernel, c_in, c_out], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p.get(self.weight), self.stride, self.pad)?;
        tape.add_row(y, p.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel / stride.max(1)) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform([kernel, c_in, c_out], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose1d(x, p.get(self.weight), self.stride, self.pad)?;
        tape.add_row(y, p.get(self.bias))
    }
}

/// Per-feature gain and bias applied after a normalization.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.mul_row(x, p.get(self.gain))?;
        tape.add_row(y, p.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm(pub Affine);

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self(Affine::new(store, name, dim))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, NORM_EPS)?;
        self.0.forward(tape, p, y)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub affine: Affine,
    pub channels_per_group: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, channels_per_group: usize) -> Self {
        Self {
            affine: Affine::new(store, name, channels),
            channels_per_group,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.group_norm(x, self.channels_per_group, NORM_EPS)?;
        self.affine.forward(tape, p, y)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: store.add(format!("{name}.table"), Tensor::randn([vocab, dim], 1.0 / (dim as f64).sqrt(), rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(p.get(self.table), ids)
    }
}
