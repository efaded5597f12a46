use std::fs;

use tcam::model::{Backbone, BackboneConfig, Class};
use tcam::preprocess::{expand_three_class, DEFAULT_TAU};
use tcam::synthdata::{generate, generate_video, manifest_path, SceneSpec, VideoDataset};
use tcam::tensor::{load_checkpoint, save_checkpoint, NamedTensor};
use tcam::{Error, ErrorCategory};

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        frames: 5,
        seed,
        ..SceneSpec::default()
    }
}

#[test]
fn dataset_roundtrip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let data = expand_three_class(&generate(&small_spec(3), 2, 2).unwrap(), DEFAULT_TAU).unwrap();
    assert_eq!(data.count(Class::Background), 4);
    data.save(dir.path()).unwrap();
    let back = VideoDataset::load(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn wrong_manifest_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_spec(0), 1, 1).unwrap().save(dir.path()).unwrap();
    let path = manifest_path(dir.path());
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["version"] = 99.into();
    fs::write(&path, manifest.to_string()).unwrap();
    let err = VideoDataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Version { found: 99, expected: 1, .. }), "{err}");
    assert_eq!(err.category(), ErrorCategory::Io);
}

#[test]
fn unknown_label_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_spec(0), 1, 1).unwrap().save(dir.path()).unwrap();
    let path = manifest_path(dir.path());
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["videos"][0]["label"] = "sideways".into();
    fs::write(&path, manifest.to_string()).unwrap();
    assert!(matches!(VideoDataset::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = VideoDataset::load(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn missing_frame_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&small_spec(1), 1, 1).unwrap();
    data.save(dir.path()).unwrap();
    fs::remove_file(dir.path().join(&data.videos[0].id).join("frame_0002.png")).unwrap();
    assert_eq!(VideoDataset::load(dir.path()).unwrap_err().category(), ErrorCategory::Io);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tckp");
    let b = Backbone::<f32>::new(BackboneConfig::default(), 5).unwrap();
    save_checkpoint(&path, b.params()).unwrap();
    let tensors: Vec<NamedTensor<f32>> = load_checkpoint(&path).unwrap();
    assert_eq!(Backbone::from_named(BackboneConfig::default(), tensors).unwrap(), b);

    let mut bytes = fs::read(&path).unwrap();
    bytes[4] = 7;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Version { found: 7, .. })));

    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format { .. })));

    fs::write(&path, &fs::read(&path).unwrap()[..40]).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn illegal_masks_move_rigidly_with_the_belt() {
    let spec = SceneSpec::default();
    let [vx, vy] = spec.velocity;
    let (vx, vy) = (vx as i64, vy as i64);
    for index in 0..4 {
        let video = generate_video(&spec, index, Class::Before);
        let masks = video.gt_masks.as_ref().unwrap();
        assert!(masks.iter().all(|m| !m.is_empty_mask()));
        for t in 0..masks.len() - 1 {
            let (a, b) = (&masks[t], &masks[t + 1]);
            for y in 2..a.height() as i64 - 2 {
                for x in 2..a.width() as i64 - 2 {
                    let (sy, sx) = (y - vy, x - vx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < a.height() && (sx as usize) < a.width() {
                        assert_eq!(b.get(y as usize, x as usize), a.get(sy as usize, sx as usize));
                    }
                }
            }
        }
    }
}

#[test]
fn after_videos_have_no_illegal_pixels() {
    let data = generate(&small_spec(2), 1, 3).unwrap();
    for v in data.videos.iter().filter(|v| v.label == Class::After) {
        assert!(v.gt_masks.iter().flatten().all(|m| m.is_empty_mask()));
    }
}
