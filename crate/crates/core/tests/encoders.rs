//! Encoder layer, fusion encoder and spatio-temporal encoder.

use prompt_track::encoder::{EncoderLayer, ImagePromptEncoder, SpatioTemporalEncoder};
use prompt_track::params::{ParamGroup, ParamStore};
use prompt_track::rng::Rng;
use prompt_track::tensor::{grad_check, Tape, Tensor};

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Zeroes the output projections of attention and MLP, making every
/// residual branch contribute nothing.
fn zero_residual_branches(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains("attn.proj") || p.name.contains("mlp.fc2"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(shape);
    }
}

fn layer_norm_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = x.dims2().unwrap();
    let mut out = x.clone();
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.data_mut()[i * d + j] = (row[j] - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

#[test]
fn single_token_attends_to_itself() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(1);
    let layer = EncoderLayer::new(&mut store, "l", ParamGroup::Other, 8, 2, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let x = tape.constant(randn(&[1, 8], &mut rng)).unwrap();
    let (_, maps) = layer.forward_with_attention(&mut tape, &p, x).unwrap();
    for m in maps {
        assert_eq!(tape.value(m).data(), &[1.0]);
    }
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..5 {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(seed);
        let layer = EncoderLayer::new(&mut store, "l", ParamGroup::Other, 16, 4, &mut rng);
        // Larger weights make the attention maps far from uniform.
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.normal() as f32 * 0.5;
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape
            .constant(Tensor::from_fn([6, 16], |_| rng.normal() as f32))
            .unwrap();
        let (_, maps) = layer.forward_with_attention(&mut tape, &p, x).unwrap();
        assert_eq!(maps.len(), 4);
        for m in maps {
            let a = tape.value(m);
            assert_eq!(a.shape(), &[6, 6]);
            for i in 0..6 {
                let row: f32 = (0..6).map(|j| a.at2(i, j)).sum();
                assert!((row - 1.0).abs() < 1e-6, "row sum {row}");
                assert!((0..6).all(|j| a.at2(i, j) >= 0.0));
            }
        }
    }
}

#[test]
fn zero_depth_fusion_is_layer_norm_of_concat() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(2);
    let enc = ImagePromptEncoder::new(&mut store, 8, 2, 0, &mut rng);
    let (pr, z, x) = (
        randn(&[4, 8], &mut rng),
        randn(&[9, 8], &mut rng),
        randn(&[16, 8], &mut rng),
    );
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let vars = [pr.clone(), z.clone(), x.clone()].map(|t| tape.constant(t).unwrap());
    let fused = enc
        .encode(&mut tape, &p, Some(vars[0]), vars[1], vars[2])
        .unwrap();
    let joined = Tensor::new([29, 8], [pr.data(), z.data(), x.data()].concat()).unwrap();
    assert!(
        tape.value(fused.tokens)
            .max_abs_diff(&layer_norm_rows(&joined))
            < 1e-10
    );
    assert_eq!(fused.segments.total(), 29);
}

#[test]
fn fused_length_at_full_token_counts() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(3);
    let enc = ImagePromptEncoder::new(&mut store, 16, 2, 1, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let mk = |tape: &mut Tape<f32>, n| tape.constant(Tensor::full([n, 16], 0.1)).unwrap();
    let (pr, z, x) = (mk(&mut tape, 4), mk(&mut tape, 49), mk(&mut tape, 196));
    let fused = enc.encode(&mut tape, &p, Some(pr), z, x).unwrap();
    assert_eq!(tape.shape(fused.tokens), &[249, 16]);
    let (ps, zs, xs) = fused.split(&mut tape).unwrap();
    assert_eq!(tape.shape(ps.unwrap())[0], 4);
    assert_eq!(tape.shape(zs)[0], 49);
    assert_eq!(tape.shape(xs)[0], 196);
}

#[test]
fn fusion_is_permutation_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(4);
    let enc = ImagePromptEncoder::new(&mut store, 8, 2, 2, &mut rng);
    let z = randn(&[4, 8], &mut rng);
    let x = randn(&[9, 8], &mut rng);
    let mut swapped = x.clone();
    let (a, b) = (2, 7);
    for j in 0..8 {
        swapped.data_mut().swap(a * 8 + j, b * 8 + j);
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let vz = tape.constant(z).unwrap();
    let (vx, vs) = (tape.constant(x).unwrap(), tape.constant(swapped).unwrap());
    let f1 = enc.encode(&mut tape, &p, None, vz, vx).unwrap();
    let f2 = enc.encode(&mut tape, &p, None, vz, vs).unwrap();
    let (o1, o2) = (tape.value(f1.tokens), tape.value(f2.tokens));
    for i in 0..13 {
        let src = match i {
            i if i == 4 + a => 4 + b,
            i if i == 4 + b => 4 + a,
            i => i,
        };
        for j in 0..8 {
            assert!((o2.at2(i, j) - o1.at2(src, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn state_encoder_shapes_and_identity_case() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(5);
    let enc = SpatioTemporalEncoder::new(&mut store, 8, 2, 1, &mut rng);
    zero_residual_branches(&mut store);
    let (s, z, x) = (
        randn(&[49, 8], &mut rng),
        randn(&[49, 8], &mut rng),
        randn(&[196, 8], &mut rng),
    );
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let vars = [s, z.clone(), x].map(|t| tape.constant(t).unwrap());
    let next = enc
        .encode(&mut tape, &p, vars[0], vars[1], vars[2])
        .unwrap();
    assert_eq!(tape.shape(next), &[49, 8]);
    assert!(tape.value(next).max_abs_diff(&layer_norm_rows(&z)) < 1e-10);

    let bad = tape.constant(Tensor::zeros([48, 8])).unwrap();
    assert!(enc.encode(&mut tape, &p, bad, vars[1], vars[2]).is_err());
}

#[test]
fn state_depends_on_search() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(6);
    let enc = SpatioTemporalEncoder::new(&mut store, 8, 2, 1, &mut rng);
    let (s, z) = (randn(&[4, 8], &mut rng), randn(&[4, 8], &mut rng));
    let (x1, x2) = (randn(&[9, 8], &mut rng), randn(&[9, 8], &mut rng));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let [vs, vz, v1, v2] = [s, z, x1, x2].map(|t| tape.constant(t).unwrap());
    let a = enc.encode(&mut tape, &p, vs, vz, v1).unwrap();
    let b = enc.encode(&mut tape, &p, vs, vz, v2).unwrap();
    let c = enc.encode(&mut tape, &p, vs, vz, v1).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-6);
    assert_eq!(tape.value(a), tape.value(c));
}

#[test]
fn whole_encoder_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(7);
    let enc = ImagePromptEncoder::new(&mut store, 8, 2, 2, &mut rng);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let z = randn(&[4, 8], &mut rng);
    let x = randn(&[9, 8], &mut rng);
    let w = randn(&[13, 8], &mut rng);
    let err = grad_check(
        |tape, xv| {
            let p = store.bind_with(tape, false)?;
            let zv = tape.constant(z.clone())?;
            let f = enc.encode(tape, &p, None, zv, xv)?;
            let wv = tape.constant(w.clone())?;
            let prod = tape.mul(f.tokens, wv)?;
            tape.sum(prod)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}
