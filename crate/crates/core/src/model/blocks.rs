//! Transformer building blocks: linear layers, layer norm, multi-head
//! attention, and the encoder/decoder residual blocks.

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal_init(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone)]
pub struct LinearParams {
    pub w: Param,
    pub b: Param,
}

impl LinearParams {
    pub fn init(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha20Rng) -> Self {
        let w = Param::new(format!("{name}.w"), &[d_in, d_out], normal_init(rng, d_in * d_out, INIT_STD))
            .expect("sized by construction");
        let b = Param::zeros(format!("{name}.b"), &[d_out]);
        LinearParams { w, b }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        x.matmul(&tape.param(&self.w))?.add_row_vec(&tape.param(&self.b))
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init(name: &str, dim: usize, eps: f64) -> Self {
        let gamma = Param::new(format!("{name}.gamma"), &[dim], vec![1.0; dim])
            .expect("sized by construction");
        let beta = Param::zeros(format!("{name}.beta"), &[dim]);
        LayerNormParams { gamma, beta, eps }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&tape.param(&self.gamma), &tape.param(&self.beta), self.eps)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

#[derive(Clone)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn init(name: &str, dim: usize, num_heads: usize, rng: &mut ChaCha20Rng) -> Self {
        AttentionParams {
            q: LinearParams::init(&format!("{name}.q"), dim, dim, rng),
            k: LinearParams::init(&format!("{name}.k"), dim, dim, rng),
            v: LinearParams::init(&format!("{name}.v"), dim, dim, rng),
            o: LinearParams::init(&format!("{name}.o"), dim, dim, rng),
            num_heads,
        }
    }

    /// Multi-head scaled dot-product attention. Queries come from `q_in`
    /// `[Tq, D]`, keys and values from `kv_in` `[Tk, D]`. Returns the output
    /// `[Tq, D]` and the attention weights `[heads, Tq, Tk]`.
    pub fn apply(&self, tape: &Tape, q_in: &Tensor, kv_in: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = *q_in.shape().last().unwrap_or(&0);
        if d == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::domain(
                "attention",
                format!("dim {d} not divisible by {} heads", self.num_heads),
            ));
        }
        let (tq, tk) = (q_in.shape()[0], kv_in.shape()[0]);
        let h = self.num_heads;
        let dh = d / h;
        let q = self.q.apply(tape, q_in)?;
        let k = self.k.apply(tape, kv_in)?;
        let v = self.v.apply(tape, kv_in)?;
        let qh = q.reshape(&[tq, h, dh])?.permute3([1, 0, 2])?;
        let kht = k.reshape(&[tk, h, dh])?.permute3([1, 2, 0])?;
        let vh = v.reshape(&[tk, h, dh])?.permute3([1, 0, 2])?;
        let scores = qh.batch_matmul(&kht)?.mul_scalar(1.0 / (dh as f64).sqrt())?;
        let attn = scores.softmax_last()?;
        let ctx = attn.batch_matmul(&vh)?;
        let merged = ctx.permute3([1, 0, 2])?.reshape(&[tq, d])?;
        let out = self.o.apply(tape, &merged)?;
        Ok((out, attn))
    }

    pub fn params(&self) -> Vec<Param> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Clone)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn init(name: &str, dim: usize, hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        MlpParams {
            fc1: LinearParams::init(&format!("{name}.fc1"), dim, hidden, rng),
            fc2: LinearParams::init(&format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.fc2.apply(tape, &self.fc1.apply(tape, x)?.gelu()?)
    }

    pub fn params(&self) -> Vec<Param> {
        [&self.fc1, &self.fc2].iter().flat_map(|l| l.params()).collect()
    }
}

/// Pre-norm self-attention block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

impl EncoderBlock {
    pub fn init(name: &str, dim: usize, heads: usize, hidden: usize, eps: f64, rng: &mut ChaCha20Rng) -> Self {
        EncoderBlock {
            norm1: LayerNormParams::init(&format!("{name}.norm1"), dim, eps),
            attn: AttentionParams::init(&format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNormParams::init(&format!("{name}.norm2"), dim, eps),
            mlp: MlpParams::init(&format!("{name}.mlp"), dim, hidden, rng),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let normed = self.norm1.apply(tape, x)?;
        let (attn_out, attn_w) = self.attn.apply(tape, &normed, &normed)?;
        let x = x.add(&attn_out)?;
        let out = x.add(&self.mlp.apply(tape, &self.norm2.apply(tape, &x)?)?)?;
        Ok((out, attn_w))
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.mlp.params());
        p
    }
}

/// Decoder block: self-attention over own tokens, cross-attention with the
/// other view's tokens as keys/values, then the MLP. All pre-norm residual.
#[derive(Clone)]
pub struct DecoderBlock {
    pub norm1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub norm_q: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

pub struct DecoderBlockOut {
    pub out: Tensor,
    pub self_weights: Tensor,
    pub cross_weights: Tensor,
}

impl DecoderBlock {
    pub fn init(name: &str, dim: usize, heads: usize, hidden: usize, eps: f64, rng: &mut ChaCha20Rng) -> Self {
        DecoderBlock {
            norm1: LayerNormParams::init(&format!("{name}.norm1"), dim, eps),
            self_attn: AttentionParams::init(&format!("{name}.self_attn"), dim, heads, rng),
            norm_q: LayerNormParams::init(&format!("{name}.norm_q"), dim, eps),
            cross_attn: AttentionParams::init(&format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNormParams::init(&format!("{name}.norm2"), dim, eps),
            mlp: MlpParams::init(&format!("{name}.mlp"), dim, hidden, rng),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor, context: &Tensor) -> Result<DecoderBlockOut> {
        let normed = self.norm1.apply(tape, x)?;
        let (self_out, self_weights) = self.self_attn.apply(tape, &normed, &normed)?;
        let x = x.add(&self_out)?;
        let q = self.norm_q.apply(tape, &x)?;
        let (cross_out, cross_weights) = self.cross_attn.apply(tape, &q, context)?;
        let x = x.add(&cross_out)?;
        let out = x.add(&self.mlp.apply(tape, &self.norm2.apply(tape, &x)?)?)?;
        Ok(DecoderBlockOut { out, self_weights, cross_weights })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.norm1.params();
        p.extend(self.self_attn.params());
        p.extend(self.norm_q.params());
        p.extend(self.cross_attn.params());
        p.extend(self.norm2.params());
        p.extend(self.mlp.params());
        p
    }
}
