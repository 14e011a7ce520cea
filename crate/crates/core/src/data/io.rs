//! On-disk sample format.
//!
//! A sample `<stem>` is two files:
//!
//! * `<stem>.json`: a [`SampleManifest`] with the scene metadata, thing
//!   annotations (category, box, mass center, RLE mask) and the stuff label
//!   map as `(label, run)` pairs in row-major order.
//! * `<stem>.f32`: the `[3, H, W]` image as little-endian `f32`, channel-major.
//!
//! A directory of samples carries `index.json`, a [`SampleIndex`] listing the
//! stems in order together with the generator config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::{BBox, LabelMap, Mask, Rle};
use super::synth::{DataConfig, InstanceAnnotation, PanopticSample};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SAMPLE_FORMAT: &str = "kernelpan-sample";
pub const INDEX_FORMAT: &str = "kernelpan-sample-index";
pub const SAMPLE_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThingRecord {
    pub category: usize,
    pub bbox: BBox,
    pub mass_center: (f64, f64),
    pub mask: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_things: usize,
    pub n_stuff: usize,
    /// File name of the raw image buffer, relative to the manifest.
    pub image: String,
    pub things: Vec<ThingRecord>,
    pub stuff_runs: Vec<(u16, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleIndex {
    pub format: String,
    pub version: u32,
    pub data: DataConfig,
    pub samples: Vec<String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_sample(dir: &Path, stem: &str, s: &PanopticSample) -> Result<()> {
    let image = format!("{stem}.f32");
    let manifest = SampleManifest {
        format: SAMPLE_FORMAT.to_string(),
        version: SAMPLE_VERSION,
        seed: s.seed,
        height: s.height(),
        width: s.width(),
        n_things: s.n_things,
        n_stuff: s.n_stuff,
        image: image.clone(),
        things: s
            .things
            .iter()
            .map(|t| ThingRecord {
                category: t.category,
                bbox: t.bbox,
                mass_center: t.mass_center,
                mask: t.mask.to_rle(),
            })
            .collect(),
        stuff_runs: s.stuff_map.to_runs(),
    };
    let mut buf = Vec::with_capacity(s.image.len() * 4);
    for &v in s.image.data() {
        v.write_le(&mut buf);
    }
    write(&dir.join(&image), &buf)?;
    write(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_sample(dir: &Path, stem: &str) -> Result<PanopticSample> {
    let path = dir.join(format!("{stem}.json"));
    let m: SampleManifest = serde_json::from_slice(&read(&path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format != SAMPLE_FORMAT || m.version != SAMPLE_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported sample format {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    let (h, w) = (m.height, m.width);
    let bytes = read(&dir.join(&m.image))?;
    if bytes.len() != 3 * h * w * 4 {
        return Err(Error::Data(format!(
            "{}: image holds {} bytes, expected {}",
            m.image,
            bytes.len(),
            3 * h * w * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(f32::read_le).collect();
    let image = Tensor::new(&[3, h, w], data)?;
    let mut things = Vec::with_capacity(m.things.len());
    for (i, t) in m.things.iter().enumerate() {
        let mask = Mask::from_rle(&t.mask, h, w)?;
        let ann = InstanceAnnotation::from_mask(t.category, mask)
            .ok_or_else(|| Error::Data(format!("{}: thing {i} has an empty mask", path.display())))?;
        if ann.bbox != t.bbox || ann.mass_center != t.mass_center || t.category >= m.n_things {
            return Err(Error::Data(format!(
                "{}: thing {i} metadata disagrees with its mask",
                path.display()
            )));
        }
        things.push(ann);
    }
    let stuff_map = LabelMap::from_runs(&m.stuff_runs, h, w)?;
    if stuff_map.labels.iter().any(|&l| l as usize >= m.n_stuff) {
        return Err(Error::Data(format!("{}: stuff label out of range", path.display())));
    }
    Ok(PanopticSample {
        image,
        things,
        stuff_map,
        n_things: m.n_things,
        n_stuff: m.n_stuff,
        seed: m.seed,
    })
}

pub fn sample_stem(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Writes `count` samples with seeds `first_seed..first_seed + count` plus the index.
pub fn write_dataset(dir: &Path, cfg: &DataConfig, first_seed: u64, count: usize) -> Result<SampleIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let s = super::synth::generate_sample(first_seed + i as u64, cfg)?;
        let stem = sample_stem(i);
        save_sample(dir, &stem, &s)?;
        samples.push(stem);
    }
    let index = SampleIndex {
        format: INDEX_FORMAT.to_string(),
        version: SAMPLE_VERSION,
        data: cfg.clone(),
        samples,
    };
    write(
        &dir.join(INDEX_FILE),
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<SampleIndex> {
    let path = dir.join(INDEX_FILE);
    let index: SampleIndex = serde_json::from_slice(&read(&path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if index.format != INDEX_FORMAT || index.version != SAMPLE_VERSION {
        return Err(Error::Data(format!("{}: unsupported index format", path.display())));
    }
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PanopticSample>> {
    read_index(dir)?
        .samples
        .iter()
        .map(|stem| load_sample(dir, stem))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_sample;

    #[test]
    fn samples_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            allow_overlap: true,
            max_things: 5,
            ..DataConfig::default()
        };
        for seed in 0..40 {
            let s = generate_sample(seed, &cfg).unwrap();
            save_sample(dir.path(), "s", &s).unwrap();
            let back = load_sample(dir.path(), "s").unwrap();
            assert_eq!(back, s);
            let bits: Vec<u32> = back.image.data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u32> = s.image.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, orig);
        }
    }

    #[test]
    fn truncated_image_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(1, &DataConfig::default()).unwrap();
        save_sample(dir.path(), "s", &s).unwrap();
        fs::write(dir.path().join("s.f32"), [0u8; 12]).unwrap();
        assert!(matches!(load_sample(dir.path(), "s"), Err(Error::Data(_))));
    }

    #[test]
    fn empty_dataset_has_index_only() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_dataset(dir.path(), &DataConfig::default(), 0, 0).unwrap();
        assert!(index.samples.is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }
}
