//! Explicit visual prompts and the spatio-temporal state they read from.
//!
//! Multi-scale prompts: the template is patchified at 14, 16 and 18 pixel
//! patches, each projection is mean-pooled to one token, and the three
//! tokens go through a shared `D -> 4D -> D` feed-forward network.
//!
//! Spatio-temporal prompt: the state tokens are mean-pooled to a single
//! token and passed through a second feed-forward network.
//!
//! The state starts as the template tokens and is replaced on every frame by
//! the spatio-temporal encoder; there is no gate that can skip an update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{multiscale_patchify, PixelNorm, PROMPT_SCALES};
use crate::encoder::SpatioTemporalEncoder;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::nn::{Mlp, INIT_STD};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Var};

/// Which prompt tokens are fed to the fusion encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Template and search tokens only.
    None,
    /// Multi-scale prompts only (three tokens).
    Ms,
    /// Spatio-temporal prompt only (one token).
    St,
    /// Both generators (four tokens).
    #[default]
    Both,
    /// Four free parameter tokens, no generators.
    Learnable,
}

impl PromptMode {
    pub fn uses_multiscale(self) -> bool {
        matches!(self, Self::Ms | Self::Both)
    }

    pub fn uses_spatiotemporal(self) -> bool {
        matches!(self, Self::St | Self::Both)
    }

    pub fn prompt_count(self) -> usize {
        match self {
            Self::None => 0,
            Self::Ms => PROMPT_SCALES.len(),
            Self::St => 1,
            Self::Both | Self::Learnable => PROMPT_SCALES.len() + 1,
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Ms => "ms",
            Self::St => "st",
            Self::Both => "both",
            Self::Learnable => "learnable",
        })
    }
}

impl FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "ms" => Self::Ms,
            "st" => Self::St,
            "both" => Self::Both,
            "learnable" => Self::Learnable,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown prompt mode {other:?}"
                )))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct MultiScalePromptGenerator {
    projections: Vec<(usize, ParamId)>,
    ffn: Mlp,
}

impl MultiScalePromptGenerator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut Rng) -> Self {
        let group = ParamGroup::Other;
        let projections = PROMPT_SCALES
            .iter()
            .map(|&p| {
                let id = store.add_normal(
                    format!("prompt_ms.proj{p}"),
                    group,
                    &[3 * p * p, dim],
                    INIT_STD,
                    rng,
                );
                (p, id)
            })
            .collect();
        Self {
            projections,
            ffn: Mlp::feed_forward(store, "prompt_ms.ffn", group, dim, rng),
        }
    }

    pub fn projection(&self, scale: usize) -> Option<ParamId> {
        self.projections
            .iter()
            .find(|(p, _)| *p == scale)
            .map(|&(_, id)| id)
    }

    /// Per-scale pooled projections, concatenated along the token axis
    /// (`[3, D]`), before the feed-forward network.
    pub fn pooled<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        template: &Image,
        norm: &PixelNorm,
    ) -> Result<Var> {
        let pooled = self
            .projections
            .iter()
            .map(|&(scale, id)| {
                let tokens = multiscale_patchify(tape, template, norm, scale, p[id])?;
                tape.mean_rows(tokens)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&pooled)
    }

    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        template: &Image,
        norm: &PixelNorm,
    ) -> Result<Var> {
        let pooled = self.pooled(tape, p, template, norm)?;
        self.ffn.forward(tape, p, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct SpatioTemporalPromptGenerator {
    ffn: Mlp,
}

impl SpatioTemporalPromptGenerator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut Rng) -> Self {
        Self {
            ffn: Mlp::feed_forward(store, "prompt_st.ffn", ParamGroup::Other, dim, rng),
        }
    }

    pub fn ffn(&self) -> &Mlp {
        &self.ffn
    }

    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: &SpatioTemporalState,
    ) -> Result<Var> {
        let pooled = tape.mean_rows(state.tokens)?;
        self.ffn.forward(tape, p, pooled)
    }
}

/// Prompt tokens in encoder order: multi-scale first, then spatio-temporal.
#[derive(Clone, Copy, Debug)]
pub struct PromptSet {
    pub tokens: Var,
    pub multiscale: usize,
    pub spatiotemporal: usize,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.multiscale + self.spatiotemporal
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenates whichever prompt parts are present. Returns `None` when
/// both are absent.
pub fn assemble_prompts<T: Real>(
    tape: &mut Tape<T>,
    multiscale: Option<Var>,
    spatiotemporal: Option<Var>,
) -> Result<Option<PromptSet>> {
    let rows = |tape: &Tape<T>, v: Option<Var>| v.map_or(0, |v| tape.shape(v)[0]);
    let (n_ms, n_st) = (rows(tape, multiscale), rows(tape, spatiotemporal));
    let parts: Vec<Var> = multiscale.into_iter().chain(spatiotemporal).collect();
    let tokens = match parts.len() {
        0 => return Ok(None),
        1 => parts[0],
        _ => tape.concat_rows(&parts)?,
    };
    Ok(Some(PromptSet {
        tokens,
        multiscale: n_ms,
        spatiotemporal: n_st,
    }))
}

/// Propagated token block of one video.
#[derive(Clone, Copy, Debug)]
pub struct SpatioTemporalState {
    pub tokens: Var,
    pub frame_index: usize,
    pub video: u64,
}

/// `f_0 = f_z`: the state starts as the template tokens themselves.
pub fn init_state(template_tokens: Var, video: u64) -> SpatioTemporalState {
    SpatioTemporalState {
        tokens: template_tokens,
        frame_index: 0,
        video,
    }
}

/// Runs the spatio-temporal encoder and advances the frame index. With
/// `detach`, gradients do not flow into earlier frames through the state.
pub fn update_state<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    encoder: &SpatioTemporalEncoder,
    state: &SpatioTemporalState,
    template: Var,
    search: Var,
    detach: bool,
) -> Result<SpatioTemporalState> {
    let before = tape.shape(state.tokens).to_vec();
    let mut next = encoder.encode(tape, p, state.tokens, template, search)?;
    if tape.shape(next) != before.as_slice() {
        return shape_err("update_state", format!("state drifted from {before:?}"));
    }
    if detach {
        next = tape.detach(next)?;
    }
    Ok(SpatioTemporalState {
        tokens: next,
        frame_index: state.frame_index + 1,
        video: state.video,
    })
}

/// Free prompt tokens used by the [`PromptMode::Learnable`] comparison arm.
pub fn learnable_tokens<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut Rng) -> ParamId {
    store.add_normal(
        "prompt_learnable.tokens",
        ParamGroup::Other,
        &[PromptMode::Learnable.prompt_count(), dim],
        INIT_STD,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn prompt_counts_per_mode() {
        assert_eq!(PromptMode::None.prompt_count(), 0);
        assert_eq!(PromptMode::Ms.prompt_count(), 3);
        assert_eq!(PromptMode::St.prompt_count(), 1);
        assert_eq!(PromptMode::Both.prompt_count(), 4);
        for m in ["none", "ms", "st", "both", "learnable"] {
            assert_eq!(m.parse::<PromptMode>().unwrap().to_string(), m);
        }
        assert!("all".parse::<PromptMode>().is_err());
    }

    #[test]
    fn assemble_orders_and_counts() {
        let mut tape = Tape::<f64>::new();
        let ms = tape
            .constant(Tensor::from_fn([3, 4], |i| i as f64))
            .unwrap();
        let st = tape
            .constant(Tensor::from_fn([1, 4], |i| -(i as f64)))
            .unwrap();
        let set = assemble_prompts(&mut tape, Some(ms), Some(st))
            .unwrap()
            .unwrap();
        assert_eq!(tape.shape(set.tokens), &[4, 4]);
        let parts = tape.split_rows(set.tokens, &[3, 1]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(ms));
        assert_eq!(tape.value(parts[1]), tape.value(st));

        let only_ms = assemble_prompts(&mut tape, Some(ms), None)
            .unwrap()
            .unwrap();
        assert_eq!(only_ms.len(), 3);
        let only_st = assemble_prompts(&mut tape, None, Some(st))
            .unwrap()
            .unwrap();
        assert_eq!(only_st.len(), 1);
        assert!(assemble_prompts(&mut tape, None, None).unwrap().is_none());

        let narrow = tape.constant(Tensor::zeros([1, 3])).unwrap();
        assert!(assemble_prompts(&mut tape, Some(ms), Some(narrow)).is_err());
    }

    #[test]
    fn init_state_is_the_template() {
        let mut tape = Tape::<f32>::new();
        let fz = tape
            .constant(Tensor::from_fn([9, 4], |i| i as f32 * 0.5))
            .unwrap();
        let a = init_state(fz, 0);
        let b = init_state(fz, 1);
        assert_eq!(a.frame_index, 0);
        assert_eq!(tape.value(a.tokens), tape.value(fz));
        assert_eq!(tape.value(a.tokens), tape.value(b.tokens));
    }
}
