//! Checkpoint byte layout and reload.

use prompt_track::data::{synth_dataset, DatasetConfig, SampleConfig};
use prompt_track::head::LossConfig;
use prompt_track::model::{Model, ModelConfig};
use prompt_track::tracker::{track_video, TrackerConfig};
use prompt_track::train::{train_loop, TrainConfig};
use prompt_track::Error;

fn small() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        depth: 1,
        ..ModelConfig::default()
    }
}

fn trained() -> Model<f32> {
    let data = synth_dataset(&DatasetConfig {
        videos: 2,
        frames: 8,
        ..DatasetConfig::default()
    })
    .unwrap();
    let mut model = Model::<f32>::new(small(), 1).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        videos_per_batch: 2,
        frames_per_video: 2,
        ..TrainConfig::default()
    };
    train_loop(
        &mut model,
        &data,
        &cfg,
        &SampleConfig::default(),
        &LossConfig::default(),
        |_, _, _| Ok(()),
    )
    .unwrap();
    model
}

fn u32_at(bytes: &[u8], pos: usize) -> u32 {
    u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap())
}

#[test]
fn layout_is_sorted_names_and_f32_little_endian() {
    let model = Model::<f32>::new(small(), 2).unwrap();
    let bytes = model.params.to_bytes();
    assert_eq!(&bytes[..8], b"PTCKPT01");
    assert_eq!(u32_at(&bytes, 8) as usize, model.params.len());

    let mut names: Vec<&str> = model.params.iter().map(|(_, p)| p.name.as_str()).collect();
    names.sort_unstable();
    let mut pos = 12;
    for name in names {
        let len = u32_at(&bytes, pos) as usize;
        assert_eq!(&bytes[pos + 4..pos + 4 + len], name.as_bytes());
        pos += 4 + len;
        let rank = u32_at(&bytes, pos) as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|k| u32_at(&bytes, pos + 4 + 4 * k) as usize)
            .collect();
        pos += 4 + 4 * rank;
        let value = model.params.get(model.params.find(name).unwrap());
        assert_eq!(shape, value.shape());
        for v in value.data() {
            assert_eq!(&bytes[pos..pos + 4], &v.to_le_bytes());
            pos += 4;
        }
    }
    assert_eq!(pos, bytes.len());
}

#[test]
fn save_load_is_byte_stable_and_reproduces_tracking() {
    let model = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.params.save(&path).unwrap();

    let mut reloaded = Model::<f32>::new(small(), 99).unwrap();
    assert_ne!(reloaded.params.to_bytes(), model.params.to_bytes());
    reloaded.params.load(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    reloaded.params.save(&again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );

    let suite = synth_dataset(&DatasetConfig {
        videos: 1,
        frames: 6,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap();
    let v = &suite[0];
    let a = track_video(&model, TrackerConfig::default(), &v.frames, v.boxes[0]).unwrap();
    let b = track_video(&reloaded, TrackerConfig::default(), &v.frames, v.boxes[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn f64_models_store_f32_values() {
    let model = Model::<f64>::new(small(), 3).unwrap();
    let narrowed = Model::<f32>::new(small(), 3).unwrap();
    assert_eq!(
        model.params.to_bytes(),
        model.params.cast::<f32>().to_bytes()
    );
    let mut back = Model::<f64>::new(small(), 4).unwrap();
    back.params.load_bytes(&narrowed.params.to_bytes()).unwrap();
    assert_eq!(back.params.to_bytes(), narrowed.params.to_bytes());
}

#[test]
fn corrupt_or_mismatched_checkpoints_are_rejected() {
    let model = Model::<f32>::new(small(), 5).unwrap();
    let bytes = model.params.to_bytes();
    let mut target = Model::<f32>::new(small(), 6).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        target.params.load_bytes(&bad_magic),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        target.params.load_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));

    let mut wider = Model::<f32>::new(ModelConfig { dim: 32, ..small() }, 7).unwrap();
    assert!(matches!(
        wider.params.load_bytes(&bytes),
        Err(Error::Checkpoint(_))
    ));

    let mut deeper = Model::<f32>::new(
        ModelConfig {
            depth: 2,
            ..small()
        },
        7,
    )
    .unwrap();
    assert!(matches!(
        deeper.params.load_bytes(&bytes),
        Err(Error::Checkpoint(_))
    ));
    assert!(target.params.load_bytes(&bytes).is_ok());
}
