//! Causal transformer without positional encodings.
//!
//! Pre-norm residual blocks: LayerNorm → multi-head scaled dot-product
//! attention with a causal mask, then LayerNorm → two dense layers with the
//! configured nonlinearity, plus a final LayerNorm. No position information
//! is injected anywhere; order enters only through the causal mask.

use serde::{Deserialize, Serialize};

use crate::codec::Activation;
use crate::ndgrad::array::LAYER_NORM_EPS;
use crate::ndgrad::{Array, GradError, Graph, NodeId, ParamStore, Rng};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Maximum context length L; sequences carry L+2 tokens at most.
    pub l_max: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    // Desk-scale defaults. The reference setup runs 16 layers, 24 heads,
    // d_model 1536, d_ff 6144 and context length 4096.
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            l_max: 128,
            activation: Activation::Gelu,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), GradError> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(GradError::BadShape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.l_max == 0 {
            return Err(GradError::BadShape("n_layers and l_max must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Boolean causal mask: entry [i][j] allows attention iff j ≤ i.
pub fn causal_mask(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
}

/// Additive form of the causal mask: 0 where allowed, −1e30 where blocked.
fn additive_causal_mask(n: usize) -> Array {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = -1e30;
        }
    }
    Array::from_vec(&[n, n], data).expect("mask shape")
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn init(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut Rng) -> Self {
        cfg.validate().expect("backbone config");
        let d = cfg.d_model;
        let mut r = rng.stream("backbone");
        for layer in 0..cfg.n_layers {
            let p = format!("backbone.layer{layer}");
            store.insert(&format!("{p}.ln1.gain"), Array::full(&[d], 1.0));
            store.insert(&format!("{p}.ln1.bias"), Array::zeros(&[d]));
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("{p}.attn.{name}"), xavier(&[d, d], &mut r));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                store.insert(&format!("{p}.attn.{name}"), Array::zeros(&[d]));
            }
            store.insert(&format!("{p}.ln2.gain"), Array::full(&[d], 1.0));
            store.insert(&format!("{p}.ln2.bias"), Array::zeros(&[d]));
            store.insert(&format!("{p}.ff.w1"), xavier(&[d, cfg.d_ff], &mut r));
            store.insert(&format!("{p}.ff.b1"), Array::zeros(&[cfg.d_ff]));
            store.insert(&format!("{p}.ff.w2"), xavier(&[cfg.d_ff, d], &mut r));
            store.insert(&format!("{p}.ff.b2"), Array::zeros(&[d]));
        }
        store.insert("backbone.final_ln.gain", Array::full(&[d], 1.0));
        store.insert("backbone.final_ln.bias", Array::zeros(&[d]));
        Backbone { cfg }
    }

    pub fn attach(cfg: BackboneConfig) -> Self {
        Backbone { cfg }
    }

    /// Hidden states for a token sequence [n, d_model]; h_j depends only on
    /// tokens 0..j.
    pub fn forward(&self, g: &mut Graph, seq: NodeId) -> Result<NodeId, GradError> {
        let n = g.value(seq).rows();
        let d = self.cfg.d_model;
        if g.value(seq).cols() != d {
            return Err(GradError::BadShape(format!(
                "sequence width {} does not match d_model {d}",
                g.value(seq).cols()
            )));
        }
        if n > self.cfg.l_max + 2 {
            return Err(GradError::BadShape(format!(
                "sequence length {n} exceeds maximum {} (l_max {} + 2)",
                self.cfg.l_max + 2,
                self.cfg.l_max
            )));
        }
        let mask = g.constant(additive_causal_mask(n));
        let mut x = seq;
        for layer in 0..self.cfg.n_layers {
            let p = format!("backbone.layer{layer}");
            let attn = self.attention(g, &p, x, mask)?;
            x = g.add(x, attn)?;
            let ff = self.feed_forward(g, &p, x)?;
            x = g.add(x, ff)?;
        }
        let gain = g.param_named("backbone.final_ln.gain");
        let bias = g.param_named("backbone.final_ln.bias");
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    fn attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: NodeId,
        mask: NodeId,
    ) -> Result<NodeId, GradError> {
        let dh = self.cfg.head_dim();
        let ln_gain = g.param_named(&format!("{prefix}.ln1.gain"));
        let ln_bias = g.param_named(&format!("{prefix}.ln1.bias"));
        let xn = g.layer_norm(x, ln_gain, ln_bias, LAYER_NORM_EPS)?;

        let project = |g: &mut Graph, w: &str, b: &str| -> Result<NodeId, GradError> {
            let w = g.param_named(w);
            let b = g.param_named(b);
            let y = g.matmul(xn, w)?;
            g.add_bias(y, b)
        };
        let q = project(g, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
        let k = project(g, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
        let v = project(g, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;

        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.add(scores, mask)?;
            let weights = g.softmax_rows(scores);
            heads.push(g.matmul(weights, vh)?);
        }
        let concat = g.concat_cols(&heads)?;
        let wo = g.param_named(&format!("{prefix}.attn.wo"));
        let bo = g.param_named(&format!("{prefix}.attn.bo"));
        let out = g.matmul(concat, wo)?;
        g.add_bias(out, bo)
    }

    fn feed_forward(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId, GradError> {
        let ln_gain = g.param_named(&format!("{prefix}.ln2.gain"));
        let ln_bias = g.param_named(&format!("{prefix}.ln2.bias"));
        let xn = g.layer_norm(x, ln_gain, ln_bias, LAYER_NORM_EPS)?;
        let w1 = g.param_named(&format!("{prefix}.ff.w1"));
        let b1 = g.param_named(&format!("{prefix}.ff.b1"));
        let w2 = g.param_named(&format!("{prefix}.ff.w2"));
        let b2 = g.param_named(&format!("{prefix}.ff.b2"));
        let h = g.matmul(xn, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = self.cfg.activation.apply(g, h);
        let y = g.matmul(h, w2)?;
        g.add_bias(y, b2)
    }
}

fn xavier(shape: &[usize], rng: &mut Rng) -> Array {
    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("xavier shape")
}
