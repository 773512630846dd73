//! Synthetic videos and sequential batch sampling.
//!
//! A synthetic video shows one textured rectangle or ellipse moving over a
//! smooth procedural background. Motion is a damped random walk that
//! bounces off the frame edges; the size can oscillate and the target hue
//! can drift a fixed number of degrees per frame. Everything is a pure
//! function of the spec and the seed.
//!
//! Training batches follow the sequential regime: `M` distinct videos, each
//! contributing one template frame and `N` consecutive later frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{CropKind, Image, ImageCrop};
use crate::rng::Rng;
use crate::tracker::{crop_region, crop_with_region, CropMapping, TrackerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    #[default]
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoSpec {
    pub height: usize,
    pub width: usize,
    pub shape: TargetShape,
    /// Base target width and height in pixels.
    pub target_size: (f64, f64),
    /// Standard deviation of the per-frame velocity change, pixels.
    pub motion_std: f64,
    pub max_speed: f64,
    /// Relative amplitude of the size oscillation.
    pub scale_amplitude: f64,
    /// Period of the size oscillation, in frames.
    pub scale_period: f64,
    /// Hue shift per frame, degrees.
    pub drift_rate: f64,
    /// Checkerboard cell size on the target, pixels.
    pub texture_cell: f64,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            shape: TargetShape::Rectangle,
            target_size: (24.0, 20.0),
            motion_std: 0.8,
            max_speed: 3.0,
            scale_amplitude: 0.0,
            scale_period: 24.0,
            drift_rate: 0.0,
            texture_cell: 6.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
    pub spec: VideoSpec,
    pub seed: u64,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

struct Background {
    base: [f64; 3],
    waves: Vec<([f64; 3], f64, f64, f64)>,
}

impl Background {
    fn new(rng: &mut Rng) -> Self {
        let base = [
            rng.uniform(0.3, 0.6),
            rng.uniform(0.3, 0.6),
            rng.uniform(0.3, 0.6),
        ];
        let waves = (0..4)
            .map(|_| {
                let amp = [
                    rng.uniform(-0.12, 0.12),
                    rng.uniform(-0.12, 0.12),
                    rng.uniform(-0.12, 0.12),
                ];
                let theta = rng.uniform(0.0, std::f64::consts::TAU);
                let freq = rng.uniform(0.02, 0.12);
                let phase = rng.uniform(0.0, std::f64::consts::TAU);
                (amp, theta, freq, phase)
            })
            .collect();
        Self { base, waves }
    }

    fn render(&self, h: usize, w: usize) -> Image {
        let mut img = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut px = self.base;
                for (amp, theta, freq, phase) in &self.waves {
                    let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) * freq + phase;
                    let s = t.sin();
                    for c in 0..3 {
                        px[c] += amp[c] * s;
                    }
                }
                for (c, &v) in px.iter().enumerate() {
                    img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        img
    }
}

/// Renders a synthetic video of `frames` frames.
pub fn synth_video(spec: &VideoSpec, seed: u64, frames: usize) -> Result<VideoSequence> {
    if frames < 2 {
        return Err(Error::InvalidArgument(
            "a video needs at least 2 frames".into(),
        ));
    }
    let max_scale = 1.0 + spec.scale_amplitude.abs();
    let (bw, bh) = spec.target_size;
    if bw * max_scale + 2.0 > spec.width as f64
        || bh * max_scale + 2.0 > spec.height as f64
        || bw < 1.0
        || bh < 1.0
    {
        return Err(Error::InvalidArgument(format!(
            "target {bw}x{bh} does not fit a {}x{} frame",
            spec.width, spec.height
        )));
    }
    let mut rng = Rng::new(seed);
    let background = Background::new(&mut rng).render(spec.height, spec.width);
    let hue = rng.uniform(0.0, 360.0);
    let hue2 = hue + rng.uniform(100.0, 260.0);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);

    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut cx = rng.uniform(bw * max_scale, fw - bw * max_scale);
    let mut cy = rng.uniform(bh * max_scale, fh - bh * max_scale);
    let mut vx = rng.normal() * spec.motion_std;
    let mut vy = rng.normal() * spec.motion_std;

    let mut images = Vec::with_capacity(frames);
    let mut boxes = Vec::with_capacity(frames);
    for t in 0..frames {
        let s = 1.0
            + spec.scale_amplitude
                * (std::f64::consts::TAU * t as f64 / spec.scale_period + phase).sin();
        let w = (bw * s).round().max(1.0);
        let h = (bh * s).round().max(1.0);
        let x0 = (cx - w / 2.0).round().clamp(0.0, fw - w);
        let y0 = (cy - h / 2.0).round().clamp(0.0, fh - h);
        let bbox = BBox::new(x0, y0, w, h);

        let shift = spec.drift_rate * t as f64;
        let c1 = hsv_to_rgb(hue + shift, 0.85, 0.95);
        let c2 = hsv_to_rgb(hue2 + shift, 0.7, 0.35);
        let mut img = background.clone();
        let (xi, yi, wi, hi) = (x0 as usize, y0 as usize, w as usize, h as usize);
        for dy in 0..hi {
            for dx in 0..wi {
                if spec.shape == TargetShape::Ellipse {
                    let u = (dx as f64 + 0.5) / w * 2.0 - 1.0;
                    let v = (dy as f64 + 0.5) / h * 2.0 - 1.0;
                    if u * u + v * v > 1.0 {
                        continue;
                    }
                }
                let checker = ((dx as f64 / spec.texture_cell) as usize
                    + (dy as f64 / spec.texture_cell) as usize)
                    % 2;
                let col = if checker == 0 { c1 } else { c2 };
                for (c, &v) in col.iter().enumerate() {
                    img.set(c, yi + dy, xi + dx, v);
                }
            }
        }
        images.push(img);
        boxes.push(bbox);

        vx = (0.9 * vx + rng.normal() * spec.motion_std).clamp(-spec.max_speed, spec.max_speed);
        vy = (0.9 * vy + rng.normal() * spec.motion_std).clamp(-spec.max_speed, spec.max_speed);
        cx += vx;
        cy += vy;
        let (mx, my) = (bw * max_scale / 2.0 + 1.0, bh * max_scale / 2.0 + 1.0);
        if cx < mx || cx > fw - mx {
            vx = -vx;
            cx = cx.clamp(mx, fw - mx);
        }
        if cy < my || cy > fh - my {
            vy = -vy;
            cy = cy.clamp(my, fh - my);
        }
    }
    Ok(VideoSequence {
        name: format!("synth_{seed:08x}"),
        frames: images,
        boxes,
        spec: spec.clone(),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub videos: usize,
    pub frames: usize,
    pub seed: u64,
    pub spec: VideoSpec,
    /// Alternate rectangle and ellipse targets.
    pub mix_shapes: bool,
    /// Randomize the base target size by up to this relative amount.
    pub size_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            videos: 2,
            frames: 24,
            seed: 7,
            spec: VideoSpec::default(),
            mix_shapes: true,
            size_jitter: 0.2,
        }
    }
}

/// Deterministic set of synthetic videos; video `i` uses its own stream.
pub fn synth_dataset(cfg: &DatasetConfig) -> Result<Vec<VideoSequence>> {
    let root = Rng::new(cfg.seed);
    (0..cfg.videos)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let mut spec = cfg.spec.clone();
            if cfg.mix_shapes && i % 2 == 1 {
                spec.shape = TargetShape::Ellipse;
            }
            let k = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter);
            spec.target_size = (spec.target_size.0 * k, spec.target_size.1 * k);
            let seed = rng.fork(1).seed();
            let mut video = synth_video(&spec, seed, cfg.frames)?;
            video.name = format!("video_{i:03}");
            Ok(video)
        })
        .collect()
}

/// Cropping and augmentation used when sampling training frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Crop geometry follows the model and tracker settings and is filled
    /// in by [`crate::config::Config::sampling`].
    #[serde(skip)]
    pub template_size: usize,
    #[serde(skip)]
    pub search_size: usize,
    #[serde(skip)]
    pub template_factor: f64,
    #[serde(skip)]
    pub search_factor: f64,
    /// Uniform search-center shift per axis, in units of `sqrt(w h)`.
    pub center_jitter: f64,
    /// Log-uniform jitter of the search crop side.
    pub scale_jitter: f64,
    pub flip: bool,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let t = TrackerConfig::default();
        Self {
            template_size: 48,
            search_size: 96,
            template_factor: t.template_factor,
            search_factor: t.search_factor,
            center_jitter: 0.75,
            scale_jitter: 0.15,
            flip: true,
            brightness: 0.2,
        }
    }
}

/// One training frame: the search crop and the target box inside it.
#[derive(Clone, Debug)]
pub struct SearchSample {
    pub frame: usize,
    pub crop: ImageCrop,
    /// Target box in normalized crop coordinates.
    pub target: BBox,
}

#[derive(Clone, Debug)]
pub struct VideoSample {
    pub video: usize,
    pub template_frame: usize,
    pub template: ImageCrop,
    pub search: Vec<SearchSample>,
}

/// `M` videos with one template and `N` ordered search frames each.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub videos: Vec<VideoSample>,
}

impl TrainBatch {
    /// Number of search frames, `N * M`.
    pub fn size(&self) -> usize {
        self.videos.iter().map(|v| v.search.len()).sum()
    }
}

/// Augmentation shared by all frames of one sampled video.
#[derive(Clone, Copy, Debug)]
struct Augment {
    flip: bool,
    brightness: f32,
}

impl Augment {
    fn apply(&self, img: &Image, b: &BBox) -> (Image, BBox) {
        let mut img = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        if self.brightness != 1.0 {
            img = img.scale_brightness(self.brightness);
        }
        let b = if self.flip {
            BBox::new(img.width() as f64 - b.x - b.w, b.y, b.w, b.h)
        } else {
            *b
        };
        (img, b)
    }
}

fn search_sample(
    img: &Image,
    gt: &BBox,
    frame: usize,
    cfg: &SampleConfig,
    rng: &mut Rng,
) -> Result<SearchSample> {
    let side = (gt.w * gt.h).sqrt();
    let (cx, cy) = gt.center();
    let jx = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * side;
    let jy = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * side;
    let scale = rng.uniform(-cfg.scale_jitter, cfg.scale_jitter).exp();
    let anchor = BBox::from_center(cx + jx, cy + jy, gt.w * scale, gt.h * scale);
    let region = crop_region(&anchor, cfg.search_factor);
    let (crop, mapping, _) = crop_with_region(img, region, cfg.search_size, CropKind::Search)?;
    let target = mapping.to_crop(gt).clip(1.0, 1.0, 1e-3);
    Ok(SearchSample {
        frame,
        crop,
        target,
    })
}

/// Template crop plus `n` consecutive search frames from one video.
pub fn sample_video(
    video: &VideoSequence,
    index: usize,
    n: usize,
    cfg: &SampleConfig,
    rng: &mut Rng,
) -> Result<VideoSample> {
    if video.len() < n + 1 {
        return Err(Error::InsufficientData(format!(
            "video {} has {} frames, need {}",
            video.name,
            video.len(),
            n + 1
        )));
    }
    let aug = Augment {
        flip: cfg.flip && rng.coin(0.5),
        brightness: if cfg.brightness > 0.0 {
            rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness) as f32
        } else {
            1.0
        },
    };
    let template_frame = rng.below(video.len() - n);
    let start = template_frame + 1 + rng.below(video.len() - n - template_frame);

    let (img, b) = aug.apply(&video.frames[template_frame], &video.boxes[template_frame]);
    let (template, _) = crate::tracker::crop_search_region(
        &img,
        &b,
        cfg.template_factor,
        cfg.template_size,
        CropKind::Template,
    )?;
    let search = (start..start + n)
        .map(|f| {
            let (img, b) = aug.apply(&video.frames[f], &video.boxes[f]);
            search_sample(&img, &b, f, cfg, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoSample {
        video: index,
        template_frame,
        template,
        search,
    })
}

/// Draws `m` distinct videos and `n` consecutive search frames from each.
pub fn sample_batch(
    dataset: &[VideoSequence],
    m: usize,
    n: usize,
    cfg: &SampleConfig,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "batch needs m >= 1 and n >= 1".into(),
        ));
    }
    if dataset.len() < m {
        return Err(Error::InsufficientData(format!(
            "{} videos available, {m} requested",
            dataset.len()
        )));
    }
    if let Some(short) = dataset.iter().find(|v| v.len() < n + 1) {
        return Err(Error::InsufficientData(format!(
            "video {} has {} frames, need {}",
            short.name,
            short.len(),
            n + 1
        )));
    }
    let mut picks = rng.choose_distinct(dataset.len(), m);
    picks.sort_unstable();
    let videos = picks
        .into_iter()
        .map(|i| sample_video(&dataset[i], i, n, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainBatch { videos })
}

/// Crop mapping for the template of a box, exposed for callers that need
/// template-space coordinates.
pub fn template_mapping(b: &BBox, cfg: &SampleConfig) -> CropMapping {
    CropMapping {
        region: crop_region(b, cfg.template_factor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_oversized_target_and_short_video() {
        let spec = VideoSpec {
            target_size: (200.0, 10.0),
            ..VideoSpec::default()
        };
        assert!(synth_video(&spec, 1, 4).is_err());
        assert!(synth_video(&VideoSpec::default(), 1, 1).is_err());
    }
}
