//! Dataset loading. A dataset root holds `visible/{id}.ppm`,
//! `infrared/{id}.pgm`, and `labels/{id}.txt` with matching stems, plus an
//! optional `manifest.csv` of per-id illumination values.

mod pnm;
pub mod synth;

pub use pnm::{read_pnm, write_pgm, write_ppm, PnmImage};
pub use synth::generate;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class: usize,
    /// Center/size, normalized to [0, 1] image coordinates.
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [3, S, S], values in [0, 1].
    pub visible: Tensor,
    /// [1, S, S], values in [0, 1].
    pub infrared: Tensor,
    pub boxes: Vec<GtBox>,
    /// From manifest.csv; NaN when no manifest entry exists.
    pub illumination: f32,
}

/// Parses one label line: `class cx cy w h`, all coordinates normalized.
pub fn parse_label(line: &str, context: &str) -> Result<GtBox> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(Error::Data(format!(
            "{context}: label line needs 5 fields (class cx cy w h), got {}: {line:?}",
            toks.len()
        )));
    }
    let class: usize = toks[0]
        .parse()
        .map_err(|_| Error::Data(format!("{context}: bad class {:?}", toks[0])))?;
    let mut vals = [0.0f32; 4];
    for (i, tok) in toks[1..].iter().enumerate() {
        vals[i] = tok
            .parse()
            .map_err(|_| Error::Data(format!("{context}: bad coordinate {tok:?}")))?;
    }
    let [cx, cy, w, h] = vals;
    if !(0.0..=1.0).contains(&cx)
        || !(0.0..=1.0).contains(&cy)
        || w <= 0.0
        || h <= 0.0
        || w > 1.0
        || h > 1.0
    {
        return Err(Error::Data(format!(
            "{context}: box ({cx}, {cy}, {w}, {h}) out of normalized range"
        )));
    }
    Ok(GtBox { class, cx, cy, w, h })
}

fn u8_to_unit(data: &[u8]) -> Vec<f32> {
    data.iter().map(|v| *v as f32 / 255.0).collect()
}

/// Loads one sample by stem. `visible/{id}.ppm`, `infrared/{id}.pgm`, and
/// `labels/{id}.txt` must all exist under `root`, be consistent in size,
/// and parse.
pub fn load_sample(root: &Path, id: &str, illumination: f32) -> Result<Sample> {
    load_sample_inner(root, id, illumination, true)
}

/// Like [`load_sample`] but tolerates an absent label file (empty box list),
/// for running inference on unlabeled pairs.
pub fn load_unlabeled(root: &Path, id: &str) -> Result<Sample> {
    load_sample_inner(root, id, f32::NAN, false)
}

fn load_sample_inner(
    root: &Path,
    id: &str,
    illumination: f32,
    require_labels: bool,
) -> Result<Sample> {
    let vis_path = root.join("visible").join(format!("{id}.ppm"));
    let ir_path = root.join("infrared").join(format!("{id}.pgm"));
    let label_path = root.join("labels").join(format!("{id}.txt"));
    if !ir_path.exists() {
        return Err(Error::Data(format!(
            "{id}: missing infrared counterpart {}",
            ir_path.display()
        )));
    }
    if require_labels && !label_path.exists() {
        return Err(Error::Data(format!(
            "{id}: missing label file {}",
            label_path.display()
        )));
    }
    let vis = read_pnm(&vis_path)?;
    let ir = read_pnm(&ir_path)?;
    if vis.channels != 3 {
        return Err(Error::Data(format!(
            "{id}: visible image must be RGB (P6), got {} channel(s)",
            vis.channels
        )));
    }
    if ir.channels != 1 {
        return Err(Error::Data(format!(
            "{id}: infrared image must be grayscale (P5), got {} channel(s)",
            ir.channels
        )));
    }
    if (vis.width, vis.height) != (ir.width, ir.height) {
        return Err(Error::Data(format!(
            "{id}: visible is {}x{} but infrared is {}x{}",
            vis.width, vis.height, ir.width, ir.height
        )));
    }
    let boxes = if label_path.exists() {
        let labels =
            std::fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
        labels
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| parse_label(l, &format!("{id}.txt:{}", n + 1)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let visible =
        Tensor::new(vec![vis.height, vis.width, 3], u8_to_unit(&vis.data))?.hwc_to_chw()?;
    let infrared = Tensor::new(vec![1, ir.height, ir.width], u8_to_unit(&ir.data))?;
    Ok(Sample {
        id: id.to_string(),
        visible,
        infrared,
        boxes,
        illumination,
    })
}

fn read_manifest(dir: &Path) -> Result<HashMap<String, f32>> {
    let path = dir.join("manifest.csv");
    let mut map = HashMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("id,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, val) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("manifest.csv line {}: expected id,value", i + 1))
        })?;
        let illum: f32 = val
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest.csv line {}: bad value {val:?}", i + 1)))?;
        map.insert(id.trim().to_string(), illum);
    }
    Ok(map)
}

/// Loads every paired sample under a dataset root, sorted by id. A root
/// with no visible images yields an empty set with a warning rather than
/// an error, so "point it at a fresh directory" stays usable.
pub fn load_dir(root: &Path) -> Result<Vec<Sample>> {
    let vis_dir = root.join("visible");
    let mut ids: Vec<String> = Vec::new();
    if vis_dir.is_dir() {
        let entries = std::fs::read_dir(&vis_dir).map_err(|e| Error::io(&vis_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&vis_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".ppm") {
                ids.push(stem.to_string());
            }
        }
    }
    if ids.is_empty() {
        log::warn!("no visible/*.ppm samples under {}", root.display());
        return Ok(Vec::new());
    }
    ids.sort();
    let manifest = read_manifest(root)?;
    ids.iter()
        .map(|id| {
            let illum = manifest.get(id).copied().unwrap_or(f32::NAN);
            load_sample(root, id, illum)
        })
        .collect()
}

fn fnv1a(id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable hash split: roughly 20% of ids land in the validation set,
/// independent of load order or sample count.
pub fn is_validation(id: &str) -> bool {
    fnv1a(id) % 5 == 0
}

/// Partitions samples into (train, validation) by stable id hash.
pub fn split(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| !is_validation(&s.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn small_set(n: usize) -> (tempfile::TempDir, Vec<Sample>) {
        let mut cfg = Config::default();
        cfg.num_samples = n;
        cfg.image_size = 32;
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &cfg).unwrap();
        let samples = load_dir(dir.path()).unwrap();
        (dir, samples)
    }

    #[test]
    fn generated_set_loads_with_shapes_and_illumination() {
        let (_dir, samples) = small_set(4);
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.visible.shape, vec![3, 32, 32]);
            assert_eq!(s.infrared.shape, vec![1, 32, 32]);
            assert!(!s.boxes.is_empty());
            assert!(s.illumination.is_finite());
            assert!(s.visible.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // sorted by id
        let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn missing_infrared_names_the_stem() {
        let (dir, _samples) = small_set(2);
        std::fs::remove_file(dir.path().join("infrared/scene_00001.pgm")).unwrap();
        let err = load_dir(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("scene_00001"), "got: {msg}");
        assert!(msg.contains("infrared"), "got: {msg}");
    }

    #[test]
    fn empty_root_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dir(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (dir, _samples) = small_set(1);
        // overwrite the ir image with a smaller one
        write_pgm(&dir.path().join("infrared/scene_00000.pgm"), 16, 16, &vec![0; 256]).unwrap();
        let err = load_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("32x32"));
    }

    #[test]
    fn label_parsing_rejects_malformed_lines() {
        assert!(parse_label("0 0.5 0.5 0.2 0.4", "t").is_ok());
        assert!(parse_label("0 0.5 0.5 0.2", "t").is_err());
        assert!(parse_label("x 0.5 0.5 0.2 0.4", "t").is_err());
        assert!(parse_label("0 1.5 0.5 0.2 0.4", "t").is_err());
        assert!(parse_label("0 0.5 0.5 0.0 0.4", "t").is_err());
    }

    #[test]
    fn split_is_stable_and_nontrivial() {
        let ids: Vec<String> = (0..200).map(|i| format!("scene_{i:05}")).collect();
        let val: Vec<&String> = ids.iter().filter(|i| is_validation(i)).collect();
        assert!(val.len() > 20 && val.len() < 80, "val fraction {}", val.len());
        // stable across calls
        assert_eq!(is_validation("scene_00000"), is_validation("scene_00000"));
    }
}
