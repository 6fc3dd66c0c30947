//! Token-split multi-head cross-attention.
//!
//! Every `d`-vector entering an attention block is cut into `m` tokens of
//! `d/m` values, and each token is further split across `heads`. With `m = 1`
//! a block attends over a single key, so its softmax is identically 1.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSplit {
    pub dim: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl TokenSplit {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.tokens == 0 || self.dim % (self.heads * self.tokens) != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads·tokens = {}·{}",
                self.dim, self.heads, self.tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / (self.heads * self.tokens)
    }

    /// (B, P, d) → (B, heads, P·m, head_dim)
    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, p, d) = x.dims3()?;
        if d != self.dim {
            return Err(shape_err(format!("attention expects {}-vectors, got {d}", self.dim)));
        }
        Ok(x.reshape((b, p * self.tokens, self.heads, self.head_dim()))?.transpose(1, 2)?.contiguous()?)
    }

    /// (B, heads, P·m, head_dim) → (B, P, d)
    fn merge(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, pm, _) = x.dims4()?;
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, pm / self.tokens, self.dim))?)
    }

    /// Softmax weights (B, heads, P·m, K·m) of projected queries (B, P, d)
    /// against projected keys (B, K, d).
    pub fn weights(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let logits = (self.split(q)?.matmul(&self.split(k)?.transpose(2, 3)?)? * scale)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// Scaled dot-product attention of projected queries over projected
    /// keys/values, heads concatenated back into (B, P, d).
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let weights = self.weights(q, k)?;
        self.merge(&weights.matmul(&self.split(v)?)?)
    }
}

/// Cross-attention with bias-free projections: queries come from a
/// `query_dim`-vector stream, keys and values from `d`-vectors, and the
/// output projection maps back to `query_dim`. The output projection starts
/// at zero so a freshly built block contributes nothing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CrossAttention {
    pub prefix: String,
    pub query_dim: usize,
    pub split: TokenSplit,
}

impl CrossAttention {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, query_dim: usize, split: TokenSplit) -> Result<Self> {
        split.validate()?;
        let d = split.dim;
        store.normal(rng, &format!("{prefix}.q"), &[query_dim, d], 1.0 / (query_dim as f64).sqrt())?;
        store.normal(rng, &format!("{prefix}.k"), &[d, d], 1.0 / (d as f64).sqrt())?;
        store.normal(rng, &format!("{prefix}.v"), &[d, d], 1.0 / (d as f64).sqrt())?;
        store.zeros(&format!("{prefix}.out"), &[d, query_dim])?;
        Ok(Self { prefix: prefix.to_string(), query_dim, split })
    }

    fn p(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        store.get(&format!("{}.{name}", self.prefix))
    }

    /// Queries (B, P, query_dim) attending over sources (B, K, d); returns (B, P, query_dim).
    pub fn forward(&self, store: &ParamStore, queries: &Tensor, sources: &Tensor) -> Result<Tensor> {
        let q = nn::linear(queries, &self.p(store, "q")?, None)?;
        let k = nn::linear(sources, &self.p(store, "k")?, None)?;
        let v = nn::linear(sources, &self.p(store, "v")?, None)?;
        let a = self.split.attend(&q, &k, &v)?;
        Ok(nn::linear(&a, &self.p(store, "out")?, None)?)
    }

    /// Attention weights for inspection, (B, heads, P·m, K·m).
    pub fn weights(&self, store: &ParamStore, queries: &Tensor, sources: &Tensor) -> Result<Tensor> {
        let q = nn::linear(queries, &self.p(store, "q")?, None)?;
        let k = nn::linear(sources, &self.p(store, "k")?, None)?;
        self.split.weights(&q, &k)
    }
}
