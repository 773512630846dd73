//! Center-point head and its training losses.
//!
//! The fused search tokens are laid out on an `S x S` grid (row-major) and
//! three per-token MLP branches predict a score, a sub-cell center offset
//! and a box size, all squashed by a sigmoid. Training uses a
//! penalty-reduced focal loss against a Gaussian heatmap plus L1 and GIoU
//! losses on the box decoded at the ground-truth center cell:
//!
//! ```text
//! L = L_cls + 5 * L_1 + 2 * L_giou
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::BBox;
use crate::nn::Mlp;
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal exponent on the prediction.
    pub alpha: f64,
    /// Focal exponent reducing the penalty near the peak.
    pub beta: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    /// Probability clamp applied before taking logarithms.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    score: Mlp,
    offset: Mlp,
    size: Mlp,
}

/// Head predictions on the tape, token-major: `score [N, 1]`,
/// `offset [N, 2]`, `size [N, 2]` with `N = side^2`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
    pub side: usize,
}

/// Plain-value head maps: `score [S, S]`, `offset [2, S, S]` (x then y) and
/// `size [2, S, S]` (w then h).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub score: Tensor<f64>,
    pub offset: Tensor<f64>,
    pub size: Tensor<f64>,
}

impl Head {
    pub fn new<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut Rng) -> Self {
        let g = ParamGroup::Other;
        Self {
            score: Mlp::new(store, "head.score", g, (dim, dim, 1), rng),
            offset: Mlp::new(store, "head.offset", g, (dim, dim, 2), rng),
            size: Mlp::new(store, "head.size", g, (dim, dim, 2), rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, search: Var) -> Result<HeadVars> {
        let n = tape.shape(search)[0];
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return shape_err(
                "head_forward",
                format!("{n} search tokens is not a square grid"),
            );
        }
        let score = self.score.forward(tape, p, search)?;
        let offset = self.offset.forward(tape, p, search)?;
        let size = self.size.forward(tape, p, search)?;
        Ok(HeadVars {
            score: tape.sigmoid(score)?,
            offset: tape.sigmoid(offset)?,
            size: tape.sigmoid(size)?,
            side,
        })
    }
}

impl HeadVars {
    pub fn output<T: Real>(&self, tape: &Tape<T>) -> HeadOutput {
        let n = self.side * self.side;
        let to_f64 = |v: Var| -> Vec<f64> {
            tape.value(v)
                .data()
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .collect()
        };
        let planar = |v: Var| {
            let d = to_f64(v);
            Tensor::from_fn([2, self.side, self.side], |i| d[(i % n) * 2 + i / n])
        };
        HeadOutput {
            score: Tensor::new([self.side, self.side], to_f64(self.score)).expect("square"),
            offset: planar(self.offset),
            size: planar(self.size),
        }
    }
}

impl HeadOutput {
    pub fn side(&self) -> usize {
        self.score.shape()[0]
    }

    pub fn offset_at(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.side();
        (
            self.offset.data()[i * s + j],
            self.offset.data()[s * s + i * s + j],
        )
    }

    pub fn size_at(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.side();
        (
            self.size.data()[i * s + j],
            self.size.data()[s * s + i * s + j],
        )
    }
}

/// Box predicted at cell `(i, j)` (row, column), in normalized search-crop
/// coordinates, clamped to the unit square.
pub fn decode_box(out: &HeadOutput, i: usize, j: usize) -> Result<BBox> {
    let s = out.side();
    if i >= s || j >= s {
        return Err(Error::InvalidArgument(format!(
            "cell ({i}, {j}) outside {s}x{s} grid"
        )));
    }
    let (ox, oy) = out.offset_at(i, j);
    let (w, h) = out.size_at(i, j);
    let cx = (j as f64 + ox) / s as f64;
    let cy = (i as f64 + oy) / s as f64;
    Ok(BBox::from_center(cx, cy, w, h).clip(1.0, 1.0, 1e-6))
}

/// Gaussian classification target with a single peak of value 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    pub heatmap: Tensor<f64>,
    pub peak: (usize, usize),
    pub sigma: f64,
}

/// Grid cell containing a normalized point.
pub fn center_cell(cx: f64, cy: f64, side: usize) -> (usize, usize) {
    let cell = |v: f64| ((v * side as f64).floor().max(0.0) as usize).min(side - 1);
    (cell(cy), cell(cx))
}

/// Heatmap with value 1 at the cell holding the box center and
/// `exp(-d^2 / (2 sigma^2))` elsewhere, `d` measured in cells and
/// `sigma = max(1, S * max(w, h) / 6)`.
pub fn make_gaussian_target(gt: &BBox, side: usize) -> Result<GaussianTarget> {
    if !(gt.w > 0.0 && gt.h > 0.0 && gt.is_finite()) || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate target box {gt:?}"
        )));
    }
    let (cx, cy) = gt.center();
    let (ci, cj) = center_cell(cx, cy, side);
    let sigma = (side as f64 * gt.w.max(gt.h) / 6.0).max(1.0);
    let heatmap = Tensor::from_fn([side, side], |k| {
        let (i, j) = (k / side, k % side);
        if (i, j) == (ci, cj) {
            1.0
        } else {
            let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        }
    });
    Ok(GaussianTarget {
        heatmap,
        peak: (ci, cj),
        sigma,
    })
}

/// Penalty-reduced focal loss of a `[N, 1]` (or `[S, S]`) score variable:
/// `-(1-p)^a log p` at peak cells and `-(1-y)^b p^a log(1-p)` elsewhere,
/// summed and divided by the number of peaks.
pub fn focal_loss<T: Real>(
    tape: &mut Tape<T>,
    score: Var,
    target: &GaussianTarget,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = tape.value(score).numel();
    if n != target.heatmap.numel() {
        return shape_err(
            "focal_loss",
            format!(
                "score {:?} vs target {:?}",
                tape.shape(score),
                target.heatmap.shape()
            ),
        );
    }
    let shape = tape.shape(score).to_vec();
    let y = target.heatmap.data();
    let pos_w = Tensor::from_fn(shape.clone(), |k| {
        if y[k] == 1.0 {
            T::one()
        } else {
            T::zero()
        }
    });
    let peaks = pos_w.data().iter().filter(|&&v| v == T::one()).count();
    let neg_w = Tensor::from_fn(shape, |k| {
        if y[k] == 1.0 {
            T::zero()
        } else {
            T::of((1.0 - y[k]).powf(cfg.beta))
        }
    });

    let p = tape.clamp(score, T::of(cfg.eps), T::of(1.0 - cfg.eps))?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -T::one(), T::one())?;
    let log_q = tape.log(q)?;

    let a = T::of(cfg.alpha);
    let q_pow = tape.scale(log_q, a)?;
    let q_pow = tape.exp(q_pow)?;
    let p_pow = tape.scale(log_p, a)?;
    let p_pow = tape.exp(p_pow)?;

    let pos_w = tape.constant(pos_w)?;
    let neg_w = tape.constant(neg_w)?;
    let pos = tape.mul(q_pow, log_p)?;
    let pos = tape.mul(pos, pos_w)?;
    let neg = tape.mul(p_pow, log_q)?;
    let neg = tape.mul(neg, neg_w)?;
    let all = tape.add(pos, neg)?;
    let total = tape.sum(all)?;
    tape.scale(total, T::of(-1.0 / peaks.max(1) as f64))
}

/// Focal loss of a plain score map.
pub fn focal_loss_value(
    score: &Tensor<f64>,
    target: &GaussianTarget,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(score.clone())?;
    let l = focal_loss(&mut tape, s, target, cfg)?;
    Ok(tape.value(l).item())
}

/// Generalized IoU of two boxes; errors on a zero-area box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::InvalidArgument("giou of a zero-area box".into()));
    }
    let inter = a.intersection(b);
    let union = a.corner_area() + b.corner_area() - inter;
    let [a1, b1, a2, b2] = a.xyxy();
    let [c1, d1, c2, d2] = b.xyxy();
    let hull = (a2.max(c2) - a1.min(c1)) * (b2.max(d2) - b1.min(d1));
    Ok(inter / union - (hull - union) / hull)
}

/// GIoU between a predicted `[1, 4]` xyxy variable and a fixed box.
pub fn giou_var<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &BBox) -> Result<Var> {
    let g = gt.xyxy();
    let c = |tape: &mut Tape<T>, v: f64| tape.constant(Tensor::new([1, 1], vec![T::of(v)])?);
    let px1 = tape.slice_cols(pred, 0, 1)?;
    let py1 = tape.slice_cols(pred, 1, 1)?;
    let px2 = tape.slice_cols(pred, 2, 1)?;
    let py2 = tape.slice_cols(pred, 3, 1)?;
    let (gx1, gy1, gx2, gy2) = (
        c(tape, g[0])?,
        c(tape, g[1])?,
        c(tape, g[2])?,
        c(tape, g[3])?,
    );
    let zero = c(tape, 0.0)?;

    let pw = tape.sub(px2, px1)?;
    let ph = tape.sub(py2, py1)?;
    let area_p = tape.mul(pw, ph)?;

    let ix1 = tape.maximum(px1, gx1)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;

    let sum = tape.affine(area_p, T::one(), T::of(gt.area()))?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(px1, gx1)?;
    let hy1 = tape.minimum(py1, gy1)?;
    let hx2 = tape.maximum(px2, gx2)?;
    let hy2 = tape.maximum(py2, gy2)?;
    let hw = tape.sub(hx2, hx1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    let out = tape.sub(iou, penalty)?;
    tape.reshape(out, [1])
}

/// Components of the total loss for one frame.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Predicted xyxy box `[1, 4]` at `cell`, still on the tape.
pub fn decode_box_var<T: Real>(
    tape: &mut Tape<T>,
    head: &HeadVars,
    cell: (usize, usize),
) -> Result<Var> {
    let s = head.side;
    let idx = cell.0 * s + cell.1;
    let inv = T::of(1.0 / s as f64);
    let off = tape.slice_rows(head.offset, idx, 1)?;
    let size = tape.slice_rows(head.size, idx, 1)?;
    let ox = tape.slice_cols(off, 0, 1)?;
    let oy = tape.slice_cols(off, 1, 1)?;
    let cx = tape.affine(ox, inv, T::of(cell.1 as f64) * inv)?;
    let cy = tape.affine(oy, inv, T::of(cell.0 as f64) * inv)?;
    let half = tape.scale(size, T::of(0.5))?;
    let hw = tape.slice_cols(half, 0, 1)?;
    let hh = tape.slice_cols(half, 1, 1)?;
    let x1 = tape.sub(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let x2 = tape.add(cx, hw)?;
    let y2 = tape.add(cy, hh)?;
    tape.concat_cols(&[x1, y1, x2, y2])
}

/// `L_cls + l1_weight * L_1 + giou_weight * (1 - GIoU)` for one frame.
/// The regression terms use the box decoded at the ground-truth center
/// cell; `L_1` is the mean absolute error over the four xyxy coordinates.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    head: &HeadVars,
    gt: &BBox,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let target = make_gaussian_target(gt, head.side)?;
    let cls = focal_loss(tape, head.score, &target, cfg)?;

    let pred = decode_box_var(tape, head, target.peak)?;
    let gt_xyxy = Tensor::new([1, 4], gt.xyxy().iter().map(|&v| T::of(v)).collect())?;
    let gt_var = tape.constant(gt_xyxy)?;
    let diff = tape.sub(pred, gt_var)?;
    let diff = tape.abs(diff)?;
    let l1 = tape.mean(diff)?;

    let g = giou_var(tape, pred, gt)?;
    let giou_loss = tape.affine(g, -T::one(), T::one())?;

    let w1 = tape.scale(l1, T::of(cfg.l1_weight))?;
    let w2 = tape.scale(giou_loss, T::of(cfg.giou_weight))?;
    let total = tape.add_all(&[cls, w1, w2])?;
    Ok(LossTerms {
        total,
        cls,
        l1,
        giou: giou_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_peak_and_sigma_rule() {
        let t = make_gaussian_target(&BBox::from_center(0.5, 0.5, 0.2, 0.2), 14).unwrap();
        assert_eq!(t.peak, (7, 7));
        assert_eq!(t.heatmap.at2(7, 7), 1.0);

        let s = 14.0;
        let b = BBox::from_center(0.5, 0.5, 6.0 / s, 6.0 / s);
        let t = make_gaussian_target(&b, 14).unwrap();
        assert!((t.sigma - 1.0).abs() < 1e-12);
        assert!((t.heatmap.at2(7, 8) - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(t.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 1);

        assert!(make_gaussian_target(&BBox::new(0.1, 0.1, 0.0, 0.2), 14).is_err());
    }

    #[test]
    fn focal_single_cell_values() {
        let cfg = LossConfig::default();
        let target = GaussianTarget {
            heatmap: Tensor::full([1, 1], 1.0),
            peak: (0, 0),
            sigma: 1.0,
        };
        let half = focal_loss_value(&Tensor::full([1, 1], 0.5), &target, &cfg).unwrap();
        assert!((half - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = focal_loss_value(&Tensor::full([1, 1], 1.0), &target, &cfg).unwrap();
        assert!(perfect < 1e-11, "{perfect}");
    }

    #[test]
    fn giou_worked_example() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let g = giou(&a, &b).unwrap();
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert!((g + 5.0 / 63.0).abs() < 1e-15);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        assert!(giou(&a, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn decode_at_center_cell() {
        let s = 14;
        let out = HeadOutput {
            score: Tensor::zeros([s, s]),
            offset: Tensor::full([2, s, s], 0.5),
            size: Tensor::full([2, s, s], 0.25),
        };
        let b = decode_box(&out, 7, 7).unwrap();
        let (cx, cy) = b.center();
        assert!((cx - 7.5 / 14.0).abs() < 1e-12 && (cy - 7.5 / 14.0).abs() < 1e-12);
        assert!((b.w - 0.25).abs() < 1e-12);
        assert!(decode_box(&out, 14, 0).is_err());

        let zero = HeadOutput {
            offset: Tensor::zeros([2, s, s]),
            ..out
        };
        let b = decode_box(&zero, 3, 5).unwrap();
        let (cx, cy) = b.center();
        assert!((cx - 5.0 / 14.0).abs() < 1e-12 && (cy - 3.0 / 14.0).abs() < 1e-12);
    }
}
