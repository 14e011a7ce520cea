//! Panoptic label maps and their file format.
//!
//! A prediction `<stem>` is stored as:
//!
//! * `<stem>.png`: 8-bit RGB, segment id `id = R + 256 G + 65536 B`, 0 = void.
//! * `<stem>.json`: [`SegmentsFile`], one record per segment with its id,
//!   kind, per-kind category index, pixel area and score.
//!
//! [`PanopticLabel::colorize`] renders a separate visualization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::PanopticSample;
use crate::error::{Error, Result};

pub const SEGMENTS_FORMAT: &str = "kernelpan-panoptic";
pub const SEGMENTS_VERSION: u32 = 1;
/// Largest id representable in 24-bit RGB.
pub const MAX_ID: u32 = (1 << 24) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Thing,
    Stuff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub id: u32,
    pub kind: Kind,
    /// Category index within its kind.
    pub category: usize,
    pub area: usize,
    pub score: f64,
}

/// Non-overlapping segmentation: every pixel carries at most one segment id.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticLabel {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentsFile {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub file_name: String,
    pub segments: Vec<Segment>,
}

pub fn encode_id(id: u32) -> [u8; 3] {
    [(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, ((id >> 16) & 0xff) as u8]
}

pub fn decode_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

impl PanopticLabel {
    pub fn empty(height: usize, width: usize) -> Self {
        PanopticLabel {
            height,
            width,
            ids: vec![0; height * width],
            segments: Vec::new(),
        }
    }

    /// Checks that segment ids are unique and non-zero, and that the table
    /// and the id map agree on which ids exist and on their areas.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.height * self.width {
            return Err(Error::Data("id map size does not match its shape".into()));
        }
        let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in &self.ids {
            if id != 0 {
                *areas.entry(id).or_default() += 1;
            }
        }
        let mut seen = BTreeMap::new();
        for s in &self.segments {
            if s.id == 0 || s.id > MAX_ID {
                return Err(Error::Data(format!("invalid segment id {}", s.id)));
            }
            if seen.insert(s.id, ()).is_some() {
                return Err(Error::Data(format!("duplicate segment id {}", s.id)));
            }
            if areas.get(&s.id).copied().unwrap_or(0) != s.area {
                return Err(Error::Data(format!(
                    "segment {} declares area {} but covers {}",
                    s.id,
                    s.area,
                    areas.get(&s.id).copied().unwrap_or(0)
                )));
            }
        }
        if let Some(id) = areas.keys().find(|id| !seen.contains_key(id)) {
            return Err(Error::Data(format!("id {id} in map has no segment record")));
        }
        Ok(())
    }

    /// Ground-truth label of a generated sample: things get ids `1..=n`
    /// in annotation order, then each stuff class present on non-thing
    /// pixels gets the next id.
    pub fn from_sample(s: &PanopticSample) -> Self {
        let (h, w) = (s.height(), s.width());
        let mut label = PanopticLabel::empty(h, w);
        let mut next = 1u32;
        for t in &s.things {
            let mut area = 0;
            for (o, &b) in label.ids.iter_mut().zip(&t.mask.bits) {
                if b {
                    *o = next;
                    area += 1;
                }
            }
            label.segments.push(Segment {
                id: next,
                kind: Kind::Thing,
                category: t.category,
                area,
                score: 1.0,
            });
            next += 1;
        }
        for c in 0..s.n_stuff {
            let mut area = 0;
            for (o, &l) in label.ids.iter_mut().zip(&s.stuff_map.labels) {
                if *o == 0 && l as usize == c {
                    *o = next;
                    area += 1;
                }
            }
            if area == 0 {
                continue;
            }
            label.segments.push(Segment {
                id: next,
                kind: Kind::Stuff,
                category: c,
                area,
                score: 1.0,
            });
            next += 1;
        }
        label
    }

    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Visualization RGB bytes: a fixed colour per `(kind, category)`,
    /// thing instances shaded by id, void black.
    pub fn colorize(&self) -> Vec<u8> {
        let colors: BTreeMap<u32, [u8; 3]> = self
            .segments
            .iter()
            .map(|s| (s.id, segment_color(s)))
            .collect();
        let mut out = Vec::with_capacity(self.ids.len() * 3);
        for id in &self.ids {
            out.extend_from_slice(&colors.get(id).copied().unwrap_or([0, 0, 0]));
        }
        out
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.validate()?;
        let rgb: Vec<u8> = self.ids.iter().flat_map(|&id| encode_id(id)).collect();
        let png_name = format!("{stem}.png");
        write_png(&dir.join(&png_name), self.width, self.height, &rgb)?;
        let file = SegmentsFile {
            format: SEGMENTS_FORMAT.to_string(),
            version: SEGMENTS_VERSION,
            height: self.height,
            width: self.width,
            file_name: png_name,
            segments: self.segments.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let file: SegmentsFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if file.format != SEGMENTS_FORMAT || file.version != SEGMENTS_VERSION {
            return Err(Error::Data(format!("{}: unsupported segments format", path.display())));
        }
        let (w, h, rgb) = read_png(&dir.join(&file.file_name))?;
        if (w, h) != (file.width, file.height) {
            return Err(Error::Data(format!(
                "{}: png is {w}x{h}, table says {}x{}",
                file.file_name, file.width, file.height
            )));
        }
        let ids = rgb.chunks_exact(3).map(|p| decode_id([p[0], p[1], p[2]])).collect();
        let label = PanopticLabel {
            height: h,
            width: w,
            ids,
            segments: file.segments,
        };
        label.validate()?;
        Ok(label)
    }

    pub fn save_colorized(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, &self.colorize())
    }
}

const THING_PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [240, 200, 30],
    [200, 60, 210],
    [30, 200, 200],
    [250, 130, 20],
    [120, 220, 60],
    [240, 240, 240],
    [90, 110, 250],
];

const STUFF_PALETTE: [[u8; 3]; 6] = [
    [50, 80, 160],
    [60, 130, 60],
    [120, 90, 50],
    [100, 100, 110],
    [40, 40, 70],
    [150, 120, 150],
];

pub fn segment_color(s: &Segment) -> [u8; 3] {
    match s.kind {
        Kind::Stuff => STUFF_PALETTE[s.category % STUFF_PALETTE.len()],
        Kind::Thing => {
            let base = THING_PALETTE[s.category % THING_PALETTE.len()];
            // Neighbouring instances of one category differ in brightness.
            let shade = [1.0, 0.78, 0.6][(s.id as usize) % 3];
            base.map(|v| (v as f64 * shade).round() as u8)
        }
    }
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Reads an 8-bit RGB PNG as `(width, height, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "{}: expected 8-bit RGB, got {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
