//! One-pass evaluation metrics and the baseline-versus-prompts comparison.
//!
//! * Success AUC: the fraction of frames with IoU `>= t`, averaged over the
//!   21 thresholds `t = 0, 0.05, ..., 1`.
//! * Precision: the fraction of frames whose center error is `<= 20` pixels.
//! * Normalized precision: the center error's x and y components are divided
//!   by the ground-truth width and height; the fraction of frames within
//!   `t` is averaged over the 51 thresholds `t = 0, 0.01, ..., 0.5`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{synth_dataset, VideoSequence};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Model;
use crate::prompts::PromptMode;
use crate::tensor::Real;
use crate::tracker::{track_video, TrackerConfig};
use crate::train::train_loop;

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const NORM_THRESHOLDS: usize = 51;
pub const PRECISION_RADIUS: f64 = 20.0;
/// Pixel radii `0..=50` of the reported precision curve.
pub const PRECISION_CURVE_MAX: usize = 50;

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    Ok(())
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_THRESHOLDS - 1) as f64
}

pub fn norm_threshold(i: usize) -> f64 {
    0.5 * i as f64 / (NORM_THRESHOLDS - 1) as f64
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

fn center_distance(p: &BBox, g: &BBox) -> f64 {
    let (pc, gc) = (p.center(), g.center());
    (pc.0 - gc.0).hypot(pc.1 - gc.1)
}

fn norm_distance(p: &BBox, g: &BBox) -> f64 {
    let (pc, gc) = (p.center(), g.center());
    ((pc.0 - gc.0) / g.w).hypot((pc.1 - gc.1) / g.h)
}

pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    Ok((0..SUCCESS_THRESHOLDS)
        .map(|i| fraction(&ious, |v| v >= success_threshold(i)))
        .collect())
}

pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let curve = success_curve(pred, gt)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

pub fn precision_at(pred: &[BBox], gt: &[BBox], radius: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    let d: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_distance(p, g))
        .collect();
    Ok(fraction(&d, |v| v <= radius))
}

pub fn precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    precision_at(pred, gt, PRECISION_RADIUS)
}

pub fn norm_precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    if let Some(g) = gt.iter().find(|g| g.w <= 0.0 || g.h <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate ground-truth box {g:?}"
        )));
    }
    let d: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| norm_distance(p, g))
        .collect();
    Ok((0..NORM_THRESHOLDS)
        .map(|i| fraction(&d, |v| v <= norm_threshold(i)))
        .collect())
}

pub fn norm_precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let curve = norm_precision_curve(pred, gt)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

pub fn mean_iou(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| p.iou(g)).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub name: String,
    pub frames: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub success_curve: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub norm_precision_curve: Vec<f64>,
}

impl VideoMetrics {
    pub fn compute(name: impl Into<String>, pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        let success_curve = success_curve(pred, gt)?;
        let norm_precision_curve = norm_precision_curve(pred, gt)?;
        let precision_curve = (0..=PRECISION_CURVE_MAX)
            .map(|r| precision_at(pred, gt, r as f64))
            .collect::<Result<Vec<_>>>()?;
        let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
        Ok(Self {
            name: name.into(),
            frames: pred.len(),
            auc: mean(&success_curve),
            precision: precision(pred, gt)?,
            norm_precision: mean(&norm_precision_curve),
            mean_iou: mean_iou(pred, gt)?,
            success_curve,
            precision_curve,
            norm_precision_curve,
        })
    }
}

/// Aggregate values are plain means over videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub videos: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub success_curve: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub norm_precision_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoMetrics>,
    pub aggregate: Aggregate,
}

fn mean_curve(curves: impl Iterator<Item = Vec<f64>>, n: usize) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    for c in curves {
        if sum.is_empty() {
            sum = vec![0.0; c.len()];
        }
        for (s, v) in sum.iter_mut().zip(c) {
            *s += v;
        }
    }
    sum.into_iter().map(|s| s / n as f64).collect()
}

impl EvalReport {
    /// Builds the report with videos sorted by name.
    pub fn new(mut videos: Vec<VideoMetrics>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::InvalidArgument("no videos to aggregate".into()));
        }
        videos.sort_by(|a, b| a.name.cmp(&b.name));
        let n = videos.len();
        let mean = |f: fn(&VideoMetrics) -> f64| videos.iter().map(f).sum::<f64>() / n as f64;
        let aggregate = Aggregate {
            videos: n,
            auc: mean(|v| v.auc),
            precision: mean(|v| v.precision),
            norm_precision: mean(|v| v.norm_precision),
            mean_iou: mean(|v| v.mean_iou),
            success_curve: mean_curve(videos.iter().map(|v| v.success_curve.clone()), n),
            precision_curve: mean_curve(videos.iter().map(|v| v.precision_curve.clone()), n),
            norm_precision_curve: mean_curve(
                videos.iter().map(|v| v.norm_precision_curve.clone()),
                n,
            ),
        };
        Ok(Self { videos, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>7} {:>7} {:>7} {:>7}",
            "video", "frames", "AUC", "P", "P_norm", "mIoU"
        );
        let row =
            |s: &mut String, name: &str, frames: usize, auc: f64, p: f64, pn: f64, iou: f64| {
                let _ = writeln!(
                    s,
                    "{name:<24} {frames:>6} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
                    auc, p, pn, iou
                );
            };
        for v in &self.videos {
            row(
                &mut s,
                &v.name,
                v.frames,
                v.auc,
                v.precision,
                v.norm_precision,
                v.mean_iou,
            );
        }
        let a = &self.aggregate;
        let frames = self.videos.iter().map(|v| v.frames).sum();
        row(
            &mut s,
            "mean",
            frames,
            a.auc,
            a.precision,
            a.norm_precision,
            a.mean_iou,
        );
        s
    }
}

/// Tracks every video of `suite` from its first ground-truth box and scores
/// the tracked frames (the initialization frame is excluded).
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    tracker: TrackerConfig,
    suite: &[VideoSequence],
) -> Result<EvalReport> {
    let videos = suite
        .iter()
        .map(|v| {
            let pred = track_video(model, tracker, &v.frames, v.boxes[0])?;
            VideoMetrics::compute(v.name.clone(), &pred[1..], &v.boxes[1..])
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(videos)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mean_iou: f64,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub prompts: PromptMode,
    pub seeds: Vec<SeedResult>,
    pub mean_iou: f64,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
}

impl ArmReport {
    fn new(prompts: PromptMode, seeds: Vec<SeedResult>) -> Self {
        let n = seeds.len().max(1) as f64;
        let mean = |f: fn(&SeedResult) -> f64| seeds.iter().map(f).sum::<f64>() / n;
        Self {
            prompts,
            mean_iou: mean(|s| s.mean_iou),
            auc: mean(|s| s.auc),
            precision: mean(|s| s.precision),
            norm_precision: mean(|s| s.norm_precision),
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: ArmReport,
    pub treatment: ArmReport,
    /// Treatment minus baseline.
    pub delta_mean_iou: f64,
    pub delta_auc: f64,
    pub suite_videos: usize,
}

impl AblationReport {
    pub fn new(baseline: ArmReport, treatment: ArmReport, suite_videos: usize) -> Self {
        Self {
            delta_mean_iou: treatment.mean_iou - baseline.mean_iou,
            delta_auc: treatment.auc - baseline.auc,
            baseline,
            treatment,
            suite_videos,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8}",
            "arm", "seed", "mIoU", "AUC", "P", "P_norm"
        );
        for arm in [&self.baseline, &self.treatment] {
            for r in &arm.seeds {
                let _ = writeln!(
                    s,
                    "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    arm.prompts.to_string(),
                    r.seed,
                    r.mean_iou,
                    r.auc,
                    r.precision,
                    r.norm_precision
                );
            }
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                arm.prompts.to_string(),
                "mean",
                arm.mean_iou,
                arm.auc,
                arm.precision,
                arm.norm_precision
            );
        }
        let _ = writeln!(
            s,
            "delta ({} - {}): mIoU {:+.4}, AUC {:+.4} over {} videos",
            self.treatment.prompts,
            self.baseline.prompts,
            self.delta_mean_iou,
            self.delta_auc,
            self.suite_videos
        );
        s
    }
}

/// Evaluates already trained models of both arms, `(seed, model)` pairs,
/// on the same suite.
pub fn compare_models<T: Real>(
    baseline: &[(u64, &Model<T>)],
    treatment: &[(u64, &Model<T>)],
    tracker: TrackerConfig,
    suite: &[VideoSequence],
) -> Result<AblationReport> {
    let arm = |models: &[(u64, &Model<T>)]| -> Result<ArmReport> {
        let Some((_, first)) = models.first() else {
            return Err(Error::InvalidArgument("an arm has no models".into()));
        };
        let prompts = first.config().prompts;
        let seeds = models
            .iter()
            .map(|&(seed, m)| {
                let r = evaluate_model(m, tracker, suite)?.aggregate;
                Ok(SeedResult {
                    seed,
                    mean_iou: r.mean_iou,
                    auc: r.auc,
                    precision: r.precision,
                    norm_precision: r.norm_precision,
                    final_loss: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArmReport::new(prompts, seeds))
    };
    Ok(AblationReport::new(
        arm(baseline)?,
        arm(treatment)?,
        suite.len(),
    ))
}

/// Trains one model per arm and seed on the ablation training videos, then
/// evaluates all of them on the held-out suite. `progress` receives one
/// line per finished model.
pub fn run_ablation(cfg: &Config, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let ab = &cfg.ablation;
    if ab.seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one seed".into(),
        ));
    }
    let train_videos = synth_dataset(&ab.train_data)?;
    let suite = synth_dataset(&ab.suite)?;
    let sampling = cfg.sampling();
    let mut arms = Vec::with_capacity(2);
    for prompts in [ab.baseline, ab.treatment] {
        let mut results = Vec::with_capacity(ab.seeds.len());
        for &seed in &ab.seeds {
            let model_cfg = crate::model::ModelConfig {
                prompts,
                ..cfg.model.clone()
            };
            let mut model = Model::<f32>::new(model_cfg, seed)?;
            let train_cfg = crate::train::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let trace = train_loop(
                &mut model,
                &train_videos,
                &train_cfg,
                &sampling,
                &cfg.loss,
                |_, _, _| Ok(()),
            )?;
            let tail = trace.len().saturating_sub(20);
            let final_loss = trace[tail..].iter().map(|e| e.loss).sum::<f64>()
                / (trace.len() - tail).max(1) as f64;
            let r = evaluate_model(&model, cfg.tracker, &suite)?.aggregate;
            progress(&format!(
                "prompts={prompts} seed={seed} loss={final_loss:.4} mIoU={:.4} AUC={:.4}",
                r.mean_iou, r.auc
            ));
            results.push(SeedResult {
                seed,
                mean_iou: r.mean_iou,
                auc: r.auc,
                precision: r.precision,
                norm_precision: r.norm_precision,
                final_loss: (!trace.is_empty()).then_some(final_loss),
            });
        }
        arms.push(ArmReport::new(prompts, results));
    }
    let treatment = arms.pop().expect("two arms");
    let baseline = arms.pop().expect("two arms");
    Ok(AblationReport::new(baseline, treatment, suite.len()))
}
