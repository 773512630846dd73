//! Pre-norm transformer blocks and the two encoders built from them.
//!
//! The fusion encoder runs full self-attention over
//! `concat(prompts, template, search)` and ends with a layer norm. The
//! spatio-temporal encoder normalizes `concat(state, template, search)`,
//! runs its own (shallow) stack, and keeps the template-position segment
//! of the output as the next state.

use crate::error::{shape_err, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    dim: usize,
    heads: usize,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            dim,
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), group, dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), group, dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
            mlp: Mlp::feed_forward(store, &format!("{name}.mlp"), group, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_inner(tape, p, x, None)
    }

    /// Forward pass that also returns the per-head attention matrices.
    pub fn forward_with_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut maps = Vec::with_capacity(self.heads);
        let y = self.forward_inner(tape, p, x, Some(&mut maps))?;
        Ok((y, maps))
    }

    fn forward_inner<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return shape_err(
                "encoder_layer",
                format!("input {shape:?}, width {}", self.dim),
            );
        }
        let head_dim = self.dim / self.heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());

        let h = self.norm1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = tape.slice_cols(qkv, i * head_dim, head_dim)?;
            let k = tape.slice_cols(qkv, self.dim + i * head_dim, head_dim)?;
            let v = tape.slice_cols(qkv, 2 * self.dim + i * head_dim, head_dim)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.softmax_rows(logits)?;
            if let Some(maps) = maps.as_deref_mut() {
                maps.push(attn);
            }
            heads.push(tape.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn_out = self.proj.forward(tape, p, merged)?;
        let x = tape.add(x, attn_out)?;

        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Segment sizes of a fused token sequence, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub prompts: usize,
    pub template: usize,
    pub search: usize,
}

impl Segments {
    pub fn total(&self) -> usize {
        self.prompts + self.template + self.search
    }
}

/// Output of the fusion encoder together with its segment layout.
#[derive(Clone, Copy, Debug)]
pub struct FusedTokens {
    pub tokens: Var,
    pub segments: Segments,
}

impl FusedTokens {
    /// `(prompts, template, search)`; the prompt part is `None` when there
    /// are no prompt tokens.
    pub fn split<T: Real>(&self, tape: &mut Tape<T>) -> Result<(Option<Var>, Var, Var)> {
        let s = self.segments;
        let prompts = match s.prompts {
            0 => None,
            n => Some(tape.slice_rows(self.tokens, 0, n)?),
        };
        let template = tape.slice_rows(self.tokens, s.prompts, s.template)?;
        let search = tape.slice_rows(self.tokens, s.prompts + s.template, s.search)?;
        Ok((prompts, template, search))
    }
}

/// Fusion encoder over prompts, template and search tokens.
#[derive(Clone, Debug)]
pub struct ImagePromptEncoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl ImagePromptEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut Rng,
    ) -> Self {
        let group = ParamGroup::Backbone;
        Self {
            layers: (0..depth)
                .map(|i| EncoderLayer::new(store, &format!("encoder.{i}"), group, dim, heads, rng))
                .collect(),
            norm: LayerNorm::new(store, "encoder.norm", group, dim),
        }
    }

    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        prompts: Option<Var>,
        template: Var,
        search: Var,
    ) -> Result<FusedTokens> {
        let segments = Segments {
            prompts: prompts.map_or(0, |v| tape.shape(v)[0]),
            template: tape.shape(template)[0],
            search: tape.shape(search)[0],
        };
        let parts: Vec<Var> = prompts.into_iter().chain([template, search]).collect();
        let mut x = tape.concat_rows(&parts)?;
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
        }
        let tokens = self.norm.forward(tape, p, x)?;
        Ok(FusedTokens { tokens, segments })
    }
}

/// Encoder that propagates the spatio-temporal state.
#[derive(Clone, Debug)]
pub struct SpatioTemporalEncoder {
    pub norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

impl SpatioTemporalEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut Rng,
    ) -> Self {
        let group = ParamGroup::Other;
        Self {
            norm: LayerNorm::new(store, "st_encoder.norm", group, dim),
            layers: (0..depth)
                .map(|i| {
                    EncoderLayer::new(store, &format!("st_encoder.{i}"), group, dim, heads, rng)
                })
                .collect(),
        }
    }

    /// Next state from the previous state and the current template and
    /// search tokens.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: Var,
        template: Var,
        search: Var,
    ) -> Result<Var> {
        if tape.shape(state) != tape.shape(template) {
            return shape_err(
                "spatio_temporal_encode",
                format!(
                    "state {:?} vs template {:?}",
                    tape.shape(state),
                    tape.shape(template)
                ),
            );
        }
        let n_z = tape.shape(template)[0];
        let n_x = tape.shape(search)[0];
        let joined = tape.concat_rows(&[state, template, search])?;
        let mut x = self.norm.forward(tape, p, joined)?;
        for layer in &self.layers {
            x = layer.forward(tape, p, x)?;
        }
        let parts = tape.split_rows(x, &[n_z, n_z, n_x])?;
        Ok(parts[1])
    }
}
