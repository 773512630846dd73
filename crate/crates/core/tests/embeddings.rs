//! Patch embedding and multi-scale patchify.

use prompt_track::embed::{
    multiscale_patchify, patch_embed, patch_origin, patchify, token_count, PixelNorm, PATCH,
    PROMPT_SCALES,
};
use prompt_track::image::Image;
use prompt_track::rng::Rng;
use prompt_track::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn random_pixels(h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn([3, h, w], |_| rng.uniform(-1.0, 1.0))
}

fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    Image::new(
        h,
        w,
        (0..3 * h * w)
            .map(|_| rng.uniform(0.0, 1.0) as f32)
            .collect(),
    )
    .unwrap()
}

#[test]
fn full_crop_sizes() {
    assert_eq!(token_count(224, 224).unwrap(), 196);
    assert_eq!(token_count(112, 112).unwrap(), 49);
    assert!(token_count(120, 112).is_err());
    assert!(token_count(0, 16).is_err());
}

#[test]
fn zero_image_zero_weights_gives_zero_tokens() {
    let mut tape = Tape::<f64>::new();
    let w = tape
        .constant(Tensor::zeros([3 * PATCH * PATCH, 8]))
        .unwrap();
    let pos = tape.constant(Tensor::zeros([9, 8])).unwrap();
    let out = patch_embed(&mut tape, &Tensor::zeros([3, 48, 48]), w, pos).unwrap();
    assert_eq!(tape.shape(out), &[9, 8]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_is_linear_in_pixels() {
    let mut rng = Rng::new(3);
    let pixels = random_pixels(32, 48, &mut rng);
    let weight = Tensor::from_fn([768, 6], |_| rng.normal());
    let pos_t = Tensor::from_fn([6, 6], |_| rng.normal());
    let a = -1.75;

    let mut tape = Tape::<f64>::new();
    let w = tape.constant(weight).unwrap();
    let pos = tape.constant(pos_t.clone()).unwrap();
    let e1 = patch_embed(&mut tape, &pixels, w, pos).unwrap();
    let e2 = patch_embed(&mut tape, &pixels.map(|v| a * v), w, pos).unwrap();
    for k in 0..36 {
        let lhs = tape.value(e2).data()[k];
        let rhs = a * (tape.value(e1).data()[k] - pos_t.data()[k]) + pos_t.data()[k];
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn patch_order_round_trip() {
    // Each pixel stores its own coordinates, so every flattened value tells
    // where it came from.
    let (h, w) = (48, 64);
    let pixels = Tensor::<f64>::from_fn([3, h, w], |k| k as f64);
    let patches = patchify(&pixels, PATCH).unwrap();
    let gw = w / PATCH;
    assert_eq!(patches.shape(), &[(h / PATCH) * gw, 3 * PATCH * PATCH]);
    for idx in 0..patches.shape()[0] {
        let (py, px) = patch_origin(idx, gw, PATCH);
        for c in 0..3 {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let col = (c * PATCH + dy) * PATCH + dx;
                    let got = patches.at2(idx, col) as usize;
                    assert_eq!(got, (c * h + py + dy) * w + px + dx);
                }
            }
        }
    }
}

#[test]
fn multiscale_grids_at_full_template() {
    let mut rng = Rng::new(1);
    let img = random_image(112, 112, &mut rng);
    let norm = PixelNorm::default();
    let mut tape = Tape::<f32>::new();
    for p in PROMPT_SCALES {
        let w = tape
            .constant(Tensor::from_fn([3 * p * p, 4], |_| rng.normal() as f32))
            .unwrap();
        let out = multiscale_patchify(&mut tape, &img, &norm, p, w).unwrap();
        assert_eq!(tape.shape(out), &[49, 4], "P = {p}");
    }
    let w = tape.constant(Tensor::zeros([3 * 15 * 15, 4])).unwrap();
    assert!(multiscale_patchify(&mut tape, &img, &norm, 15, w).is_err());
}

#[test]
fn native_scale_uses_pixels_unchanged() {
    let mut rng = Rng::new(2);
    let img = random_image(48, 48, &mut rng);
    let norm = PixelNorm::default();
    let weight = Tensor::<f64>::from_fn([768, 5], |_| rng.normal());
    let mut tape = Tape::new();
    let w = tape.constant(weight.clone()).unwrap();
    let ms = multiscale_patchify(&mut tape, &img, &norm, 16, w).unwrap();
    let direct = patchify(&norm.apply::<f64>(&img), 16)
        .unwrap()
        .matmul(&weight)
        .unwrap();
    assert!(tape.value(ms).max_abs_diff(&direct) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn token_count_is_area_over_stride_squared(gh in 1usize..12, gw in 1usize..12) {
        let (h, w) = (gh * PATCH, gw * PATCH);
        prop_assert_eq!(token_count(h, w).unwrap(), h * w / (PATCH * PATCH));
        let patches = patchify(&Tensor::<f32>::zeros([3, h, w]), PATCH).unwrap();
        prop_assert_eq!(patches.shape()[0], gh * gw);
    }

    #[test]
    fn all_scales_share_the_grid(g in 1usize..6) {
        let img = Image::filled(g * PATCH, g * PATCH, [0.2, 0.5, 0.7]);
        let mut tape = Tape::<f32>::new();
        for p in PROMPT_SCALES {
            let w = tape.constant(Tensor::zeros([3 * p * p, 2])).unwrap();
            let out = multiscale_patchify(&mut tape, &img, &PixelNorm::default(), p, w).unwrap();
            prop_assert_eq!(tape.shape(out)[0], g * g);
        }
    }
}
