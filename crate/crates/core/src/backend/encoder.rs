//! Source encoder shared by the tiny backend and the encoder classifier.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::MASK_ID;
use super::TokenId;
use crate::error::{Error, Result};

/// Seeded parameter initialisation.
pub(crate) struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    pub fn uniform(&mut self, rows: usize, cols: usize, scale: f64) -> Result<Var> {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.rng.gen_range(-scale..=scale)).collect();
        Ok(Var::from_tensor(&Tensor::from_vec(data, (rows, cols), &Device::Cpu)?)?)
    }

    pub fn glorot(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt())
    }

    pub fn zeros(&mut self, n: usize) -> Result<Var> {
        Ok(Var::zeros(n, DType::F64, &Device::Cpu)?)
    }
}

/// Word plus mask-relative position embeddings, a three-token local window
/// and one residual self-attention layer.
pub(crate) struct SourceEncoder {
    pub emb: Var,
    pos: Var,
    w_local: Var,
    b_local: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    embed_dim: usize,
    hidden_dim: usize,
    max_relative: usize,
}

impl SourceEncoder {
    pub fn new(init: &mut Init, vocab: usize, embed_dim: usize, hidden_dim: usize, max_relative: usize) -> Result<Self> {
        let (d, h) = (embed_dim, hidden_dim);
        Ok(SourceEncoder {
            emb: init.uniform(vocab, d, 0.1)?,
            pos: init.uniform(2 * max_relative + 1, d, 0.1)?,
            w_local: init.glorot(3 * d, h)?,
            b_local: init.zeros(h)?,
            w_q: init.glorot(h, h)?,
            w_k: init.glorot(h, h)?,
            w_v: init.glorot(h, h)?,
            embed_dim,
            hidden_dim,
            max_relative,
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Var)> {
        vec![
            ("emb", &self.emb),
            ("pos", &self.pos),
            ("w_local", &self.w_local),
            ("b_local", &self.b_local),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
        ]
    }

    /// States `[n, hidden]` and the index of the first mask (0 without one).
    pub fn forward(&self, source: &[TokenId]) -> Result<(Tensor, usize)> {
        if source.is_empty() {
            return Err(Error::Backend("empty source sequence".into()));
        }
        let dev = Device::Cpu;
        let n = source.len();
        let anchor = source.iter().position(|t| *t == MASK_ID).unwrap_or(0);
        let r = self.max_relative as i64;
        let rel: Vec<u32> = (0..n)
            .map(|i| ((i as i64 - anchor as i64).clamp(-r, r) + r) as u32)
            .collect();
        let ids = Tensor::new(source, &dev)?;
        let x = (self.emb.index_select(&ids, 0)? + self.pos.index_select(&Tensor::new(rel, &dev)?, 0)?)?;
        let pad = Tensor::zeros((1, self.embed_dim), DType::F64, &dev)?;
        let xp = Tensor::cat(&[&pad, &x, &pad], 0)?;
        let window = Tensor::cat(&[xp.narrow(0, 0, n)?, xp.narrow(0, 1, n)?, xp.narrow(0, 2, n)?], 1)?;
        let local = window.matmul(&self.w_local)?.broadcast_add(&self.b_local)?.tanh()?;
        let q = local.matmul(&self.w_q)?;
        let k = local.matmul(&self.w_k)?;
        let scores = (q.matmul(&k.t()?)? / (self.hidden_dim as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = attn.matmul(&local)?.matmul(&self.w_v)?.tanh()?;
        Ok(((local + mixed)?, anchor))
    }
}

/// Restores `vars` from a safetensors file, checking names and shapes.
pub(crate) fn load_vars(path: &std::path::Path, vars: &[(&'static str, &Var)]) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    for (name, var) in vars {
        let t = tensors
            .get(*name)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks tensor `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::InvalidConfig(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(DType::F64)?)?;
    }
    Ok(())
}

pub(crate) fn save_vars(path: &std::path::Path, vars: &[(&'static str, &Var)]) -> Result<()> {
    let tensors: std::collections::HashMap<String, Tensor> =
        vars.iter().map(|(n, v)| (n.to_string(), v.as_tensor().clone())).collect();
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}
