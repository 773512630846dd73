//! The full tracking network and its per-video forward pass.

use serde::{Deserialize, Serialize};

use crate::embed::{patch_embed, token_count, PixelNorm, PATCH};
use crate::encoder::{FusedTokens, ImagePromptEncoder, SpatioTemporalEncoder};
use crate::error::{Error, Result};
use crate::head::{Head, HeadVars};
use crate::image::Image;
use crate::nn::INIT_STD;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::prompts::{
    assemble_prompts, init_state, learnable_tokens, update_state, MultiScalePromptGenerator,
    PromptMode, PromptSet, SpatioTemporalPromptGenerator, SpatioTemporalState,
};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Var};

/// Which token sets feed the spatio-temporal encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateInput {
    /// Template and search segments of the fusion encoder output.
    #[default]
    Fused,
    /// Raw patch embeddings.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Fusion encoder depth.
    pub depth: usize,
    /// Spatio-temporal encoder depth.
    pub state_depth: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub prompts: PromptMode,
    pub state_input: StateInput,
    /// Stop gradients through the state between frames during training.
    pub detach_state: bool,
    pub pixel_norm: PixelNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            depth: 4,
            state_depth: 1,
            template_size: 48,
            search_size: 96,
            prompts: PromptMode::Both,
            state_input: StateInput::Fused,
            detach_state: false,
            pixel_norm: PixelNorm::default(),
        }
    }
}

impl ModelConfig {
    /// 112/224 crops at width 512 with a 12-layer fusion encoder.
    pub fn full_scale() -> Self {
        Self {
            dim: 512,
            heads: 8,
            depth: 12,
            template_size: 112,
            search_size: 224,
            ..Self::default()
        }
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / PATCH).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / PATCH).pow(2)
    }

    /// Side of the score map.
    pub fn grid(&self) -> usize {
        self.search_size / PATCH
    }

    /// Token count entering the fusion encoder.
    pub fn fused_tokens(&self) -> usize {
        self.prompts.prompt_count() + self.template_tokens() + self.search_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        token_count(self.template_size, self.template_size)?;
        token_count(self.search_size, self.search_size)?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Architecture: parameter handles for every component.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub patch_proj: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub encoder: ImagePromptEncoder,
    pub state_encoder: SpatioTemporalEncoder,
    pub multiscale: MultiScalePromptGenerator,
    pub spatiotemporal: SpatioTemporalPromptGenerator,
    pub learnable: Option<ParamId>,
    pub head: Head,
}

/// Network plus its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

/// Per-video quantities computed once from the template.
#[derive(Clone, Copy, Debug)]
pub struct VideoContext {
    pub template: Var,
    pub multiscale: Option<Var>,
    pub state: SpatioTemporalState,
}

#[derive(Clone, Copy, Debug)]
pub struct FrameOutput {
    pub head: HeadVars,
    pub fused: FusedTokens,
    pub prompts: Option<PromptSet>,
}

impl Network {
    pub fn new<T: Real>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let bb = ParamGroup::Backbone;
        let patch_proj = store.add_normal("embed.proj", bb, &[3 * PATCH * PATCH, d], INIT_STD, rng);
        let pos_template = store.add_normal(
            "embed.pos_template",
            bb,
            &[config.template_tokens(), d],
            INIT_STD,
            rng,
        );
        let pos_search = store.add_normal(
            "embed.pos_search",
            bb,
            &[config.search_tokens(), d],
            INIT_STD,
            rng,
        );
        let encoder = ImagePromptEncoder::new(store, d, config.heads, config.depth, rng);
        let state_encoder =
            SpatioTemporalEncoder::new(store, d, config.heads, config.state_depth, rng);
        let multiscale = MultiScalePromptGenerator::new(store, d, rng);
        let spatiotemporal = SpatioTemporalPromptGenerator::new(store, d, rng);
        let learnable =
            (config.prompts == PromptMode::Learnable).then(|| learnable_tokens(store, d, rng));
        let head = Head::new(store, d, rng);
        Ok(Self {
            config,
            patch_proj,
            pos_template,
            pos_search,
            encoder,
            state_encoder,
            multiscale,
            spatiotemporal,
            learnable,
            head,
        })
    }

    fn check_size(img: &Image, size: usize, what: &str) -> Result<()> {
        if img.height() != size || img.width() != size {
            return Err(Error::InvalidArgument(format!(
                "{what} crop is {}x{}, expected {size}x{size}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub fn embed_template<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        img: &Image,
    ) -> Result<Var> {
        Self::check_size(img, self.config.template_size, "template")?;
        let pixels = self.config.pixel_norm.apply::<T>(img);
        patch_embed(tape, &pixels, p[self.patch_proj], p[self.pos_template])
    }

    pub fn embed_search<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, img: &Image) -> Result<Var> {
        Self::check_size(img, self.config.search_size, "search")?;
        let pixels = self.config.pixel_norm.apply::<T>(img);
        patch_embed(tape, &pixels, p[self.patch_proj], p[self.pos_search])
    }

    /// Embeds the template, builds the multi-scale prompt (if enabled) and
    /// initializes the state to the template tokens.
    pub fn begin_video<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        template: &Image,
        video: u64,
    ) -> Result<VideoContext> {
        let fz = self.embed_template(tape, p, template)?;
        let multiscale = if self.config.prompts.uses_multiscale() {
            Some(
                self.multiscale
                    .generate(tape, p, template, &self.config.pixel_norm)?,
            )
        } else {
            None
        };
        Ok(VideoContext {
            template: fz,
            multiscale,
            state: init_state(fz, video),
        })
    }

    /// Prompt tokens for the current frame.
    pub fn prompts<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ctx: &VideoContext,
    ) -> Result<Option<PromptSet>> {
        if let Some(id) = self.learnable {
            let n = tape.shape(p[id])[0];
            return Ok(Some(PromptSet {
                tokens: p[id],
                multiscale: 0,
                spatiotemporal: n,
            }));
        }
        let st = if self.config.prompts.uses_spatiotemporal() {
            Some(self.spatiotemporal.generate(tape, p, &ctx.state)?)
        } else {
            None
        };
        assemble_prompts(tape, ctx.multiscale, st)
    }

    /// One frame: prompts, fusion encoder, head, then the (unconditional)
    /// state update. `ctx.state` is replaced by the new state.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ctx: &mut VideoContext,
        search: &Image,
        detach_state: bool,
    ) -> Result<FrameOutput> {
        let fx = self.embed_search(tape, p, search)?;
        let prompts = self.prompts(tape, p, ctx)?;
        let fused = self
            .encoder
            .encode(tape, p, prompts.map(|s| s.tokens), ctx.template, fx)?;
        let (_, fused_z, fused_x) = fused.split(tape)?;
        let head = self.head.forward(tape, p, fused_x)?;
        let (sz, sx) = match self.config.state_input {
            StateInput::Fused => (fused_z, fused_x),
            StateInput::Raw => (ctx.template, fx),
        };
        ctx.state = update_state(
            tape,
            p,
            &self.state_encoder,
            &ctx.state,
            sz,
            sx,
            detach_state,
        )?;
        Ok(FrameOutput {
            head,
            fused,
            prompts,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::new(config, &mut params, &mut Rng::new(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}
