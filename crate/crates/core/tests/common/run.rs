use std::fs;
use std::path::Path;

use tcam::preprocess::{expand_three_class, DEFAULT_TAU};
use tcam::synthdata::{generate, SceneSpec, VideoDataset};
use tcam::train::{fit, RunConfig, CHECKPOINT_FILE, METRICS_FILE};

/// Three-class train/validation split of the default scene.
pub fn three_class(before: usize, after: usize, frames: usize, seed: u64) -> (VideoDataset, VideoDataset) {
    let spec = SceneSpec {
        frames,
        seed,
        ..SceneSpec::default()
    };
    let data = expand_three_class(&generate(&spec, before, after).unwrap(), DEFAULT_TAU).unwrap();
    data.split(0.8, seed).unwrap()
}

/// Trains twice into separate directories and compares the written metrics
/// and checkpoint byte for byte.
pub fn trains_identically(root: &Path, train: &VideoDataset, config: &RunConfig) -> Result<(), String> {
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        fit(train, None, config, Some(&dir)).map_err(|e| e.to_string())?;
        let read = |f: &str| fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
        outputs.push((read(METRICS_FILE)?, read(CHECKPOINT_FILE)?));
    }
    if outputs[0].0 != outputs[1].0 {
        return Err("metrics differ between runs".into());
    }
    if outputs[0].1 != outputs[1].1 {
        return Err("checkpoints differ between runs".into());
    }
    Ok(())
}
