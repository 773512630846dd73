//! Online one-pass tracking.
//!
//! A session is initialized from the first frame and box: the template crop
//! is embedded and the multi-scale prompt computed once. Every later frame
//! is cropped around the previous box, run through the network, scored
//! with a Hann-window penalty, decoded at the best cell and mapped back to
//! image coordinates. The spatio-temporal state is updated on every frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::decode_box;
use crate::image::{CropKind, Image, ImageCrop, Region};
use crate::model::{Model, VideoContext};
use crate::prompts::SpatioTemporalState;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Template crop side as a multiple of `sqrt(w h)`.
    pub template_factor: f64,
    /// Search crop side as a multiple of `sqrt(w h)`.
    pub search_factor: f64,
    /// Blend weight of the Hann window in `[0, 1]`.
    pub window_weight: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            window_weight: 0.49,
        }
    }
}

/// Affine map between image pixels and normalized crop coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMapping {
    pub region: Region,
}

impl CropMapping {
    /// Image box to normalized crop box.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        let r = &self.region;
        BBox::new(
            (b.x - r.x0) / r.side,
            (b.y - r.y0) / r.side,
            b.w / r.side,
            b.h / r.side,
        )
    }

    /// Normalized crop box to image box.
    pub fn to_image(&self, b: &BBox) -> BBox {
        let r = &self.region;
        BBox::new(
            b.x * r.side + r.x0,
            b.y * r.side + r.y0,
            b.w * r.side,
            b.h * r.side,
        )
    }
}

/// Square region of side `factor * sqrt(w h)` centered on `b`.
pub fn crop_region(b: &BBox, factor: f64) -> Region {
    let (cx, cy) = b.center();
    let side = factor * (b.w * b.h).sqrt();
    Region {
        x0: cx - 0.5 * side,
        y0: cy - 0.5 * side,
        side,
    }
}

/// Crops `factor * sqrt(w h)` around `prev` and resamples it to
/// `out x out`; pixels outside the frame take the frame's channel mean.
pub fn crop_search_region(
    frame: &Image,
    prev: &BBox,
    factor: f64,
    out: usize,
    kind: CropKind,
) -> Result<(ImageCrop, CropMapping)> {
    crop_with_region(frame, crop_region(prev, factor), out, kind).map(|(c, m, _)| (c, m))
}

/// Like [`crop_search_region`] for an explicit region; also returns the
/// filled fraction.
pub fn crop_with_region(
    frame: &Image,
    region: Region,
    out: usize,
    kind: CropKind,
) -> Result<(ImageCrop, CropMapping, f64)> {
    if !(region.side > 0.0
        && region.side.is_finite()
        && region.x0.is_finite()
        && region.y0.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "invalid crop region {region:?}"
        )));
    }
    let (pixels, fill) = frame.crop_square(region, out, frame.channel_mean());
    Ok((ImageCrop { pixels, kind }, CropMapping { region }, fill))
}

/// Outer product of two periodic-free Hann vectors
/// `w[n] = 0.5 (1 - cos(2 pi n / (S - 1)))`.
pub fn hann_window(side: usize) -> Tensor<f64> {
    let w: Vec<f64> = if side <= 1 {
        vec![1.0; side.max(1)]
    } else {
        (0..side)
            .map(|n| {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (side - 1) as f64).cos())
            })
            .collect()
    };
    let s = w.len();
    Tensor::from_fn([s, s], |k| w[k / s] * w[k % s])
}

/// `score * ((1 - weight) + weight * window)`.
pub fn apply_penalty(
    score: &Tensor<f64>,
    window: &Tensor<f64>,
    weight: f64,
) -> Result<Tensor<f64>> {
    if score.shape() != window.shape() {
        return Err(Error::Shape {
            op: "apply_penalty",
            detail: format!("{:?} vs {:?}", score.shape(), window.shape()),
        });
    }
    let data = score
        .data()
        .iter()
        .zip(window.data())
        .map(|(&s, &w)| s * ((1.0 - weight) + weight * w))
        .collect();
    Tensor::new(score.shape().to_vec(), data)
}

/// Row and column of the largest entry of an `S x S` map.
pub fn best_cell(map: &Tensor<f64>) -> (usize, usize) {
    let s = map.shape()[1];
    let k = map.argmax();
    (k / s, k % s)
}

/// Tracking state of one video.
#[derive(Clone, Debug)]
pub struct TrackerSession<'m, T> {
    model: &'m Model<T>,
    config: TrackerConfig,
    template_tokens: Tensor<T>,
    multiscale: Option<Tensor<T>>,
    state: Tensor<T>,
    frame_index: usize,
    updates: usize,
    prev: BBox,
    frame_size: (usize, usize),
    window: Tensor<f64>,
}

/// Diagnostics of one tracked frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub bbox: BBox,
    pub cell: (usize, usize),
    pub score: f64,
}

impl<'m, T: Real> TrackerSession<'m, T> {
    pub fn new(
        model: &'m Model<T>,
        config: TrackerConfig,
        first: &Image,
        init: BBox,
    ) -> Result<Self> {
        if !(init.w > 0.0 && init.h > 0.0 && init.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid initial box {init:?}"
            )));
        }
        let cfg = model.config();
        let (template, _) = crop_search_region(
            first,
            &init,
            config.template_factor,
            cfg.template_size,
            CropKind::Template,
        )?;
        let mut tape = Tape::new();
        let p = model.params.bind_with(&mut tape, false)?;
        let ctx = model.net.begin_video(&mut tape, &p, &template.pixels, 0)?;
        let template_tokens = tape.value(ctx.template).clone();
        Ok(Self {
            model,
            config,
            multiscale: ctx.multiscale.map(|v| tape.value(v).clone()),
            state: template_tokens.clone(),
            template_tokens,
            frame_index: 0,
            updates: 0,
            prev: init,
            frame_size: (first.height(), first.width()),
            window: hann_window(cfg.grid()),
        })
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    /// Number of state updates performed so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn state(&self) -> &Tensor<T> {
        &self.state
    }

    pub fn template_tokens(&self) -> &Tensor<T> {
        &self.template_tokens
    }

    pub fn previous_box(&self) -> BBox {
        self.prev
    }

    pub fn track_frame(&mut self, frame: &Image) -> Result<BBox> {
        self.track_frame_detailed(frame).map(|r| r.bbox)
    }

    pub fn track_frame_detailed(&mut self, frame: &Image) -> Result<FrameResult> {
        if frame.height() == 0 || frame.width() == 0 {
            return Err(Error::InvalidArgument("empty frame".into()));
        }
        let cfg = self.model.config();
        let (search, mapping) = crop_search_region(
            frame,
            &self.prev,
            self.config.search_factor,
            cfg.search_size,
            CropKind::Search,
        )?;

        let mut tape = Tape::new();
        let p = self.model.params.bind_with(&mut tape, false)?;
        let template = tape.constant(self.template_tokens.clone())?;
        let multiscale = match &self.multiscale {
            Some(t) => Some(tape.constant(t.clone())?),
            None => None,
        };
        let state = tape.constant(self.state.clone())?;
        let mut ctx = VideoContext {
            template,
            multiscale,
            state: SpatioTemporalState {
                tokens: state,
                frame_index: self.frame_index,
                video: 0,
            },
        };
        let out = self
            .model
            .net
            .step(&mut tape, &p, &mut ctx, &search.pixels, true)?;
        let maps = out.head.output(&tape);
        if !maps.score.is_finite() {
            return Err(Error::NonFinite { op: "track_frame" });
        }
        let penalized = apply_penalty(&maps.score, &self.window, self.config.window_weight)?;
        let (i, j) = best_cell(&penalized);
        let local = decode_box(&maps, i, j)?;
        let (h, w) = self.frame_size;
        let bbox = mapping.to_image(&local).clip(w as f64, h as f64, 1.0);

        self.state = tape.value(ctx.state.tokens).clone();
        self.frame_index = ctx.state.frame_index;
        self.updates += 1;
        self.prev = bbox;
        Ok(FrameResult {
            bbox,
            cell: (i, j),
            score: maps.score.at2(i, j),
        })
    }
}

/// One-pass tracking: the first output is `init`, then one box per frame.
pub fn track_video<T: Real>(
    model: &Model<T>,
    config: TrackerConfig,
    frames: &[Image],
    init: BBox,
) -> Result<Vec<BBox>> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("video has no frames".into()));
    };
    let mut session = TrackerSession::new(model, config, first, init)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(init);
    for frame in &frames[1..] {
        out.push(session.track_frame(frame)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_closed_form() {
        let w = hann_window(7);
        let row: Vec<f64> = (0..7).map(|j| w.at2(3, j)).collect();
        let want = [0.0, 0.25, 0.75, 1.0, 0.75, 0.25, 0.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(hann_window(1).data(), &[1.0]);
        assert_eq!(w.transpose().unwrap(), w);
    }

    #[test]
    fn penalty_limits() {
        let s = 5;
        let score = Tensor::from_fn([s, s], |k| 0.1 + 0.01 * k as f64);
        let w = hann_window(s);
        assert_eq!(apply_penalty(&score, &w, 0.0).unwrap(), score);
        let uniform = Tensor::full([s, s], 0.3);
        let pen = apply_penalty(&uniform, &w, 1.0).unwrap();
        assert_eq!(best_cell(&pen), (2, 2));
        assert!(apply_penalty(&score, &hann_window(4), 0.5).is_err());
    }

    #[test]
    fn mapping_round_trip() {
        let b = BBox::new(37.25, 12.5, 20.0, 14.0);
        let m = CropMapping {
            region: crop_region(&b, 4.0),
        };
        let back = m.to_image(&m.to_crop(&b));
        for (x, y) in back.xyxy().iter().zip(b.xyxy()) {
            assert!((x - y).abs() < 1e-9);
        }
        let (cx, cy) = m.to_crop(&b).center();
        assert!((cx - 0.5).abs() < 1e-12 && (cy - 0.5).abs() < 1e-12);
    }
}
