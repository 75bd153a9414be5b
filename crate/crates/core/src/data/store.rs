//! Dataset directories: `manifest.json`, `img_%06d.png` (8-bit gray) and
//! `msk_%06d_%d.png` (1-bit) per object. Pixels are stored as
//! `round(v · 255)`.

use super::synth::{Placement, SynthConfig};
use super::{Sample, Split};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::masks::ObjectMask;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "compnet-dataset-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub image: String,
    pub masks: Vec<String>,
    pub labels: Vec<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub placements: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub name: String,
    pub variant: String,
    pub split: Split,
    pub count: usize,
    pub classes: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub samples: Vec<SampleEntry>,
}

/// Describes a dataset before it is written.
#[derive(Clone, Debug)]
pub struct DatasetInfo {
    pub name: String,
    pub variant: String,
    pub split: Split,
    pub seed: u64,
    pub synth: Option<SynthConfig>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `samples` under `dir` and returns the manifest written.
pub fn write_dataset(dir: &Path, info: &DatasetInfo, samples: &[Sample]) -> Result<DatasetManifest> {
    let first = samples.first().ok_or_else(|| invalid!("refusing to write an empty dataset"))?;
    let (height, width, _) = first.image().hwc()?;
    io::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.image().hwc()? != (height, width, 1) {
            return Err(invalid!("sample {i} has a different frame size"));
        }
        let image = format!("img_{i:06}.png");
        let px: Vec<u8> = s.image().data().iter().map(|&v| to_u8(v)).collect();
        io::write_png_gray8(&dir.join(&image), width, height, &px)?;
        let mut masks = Vec::with_capacity(s.k());
        for (k, o) in s.objects().iter().enumerate() {
            let name = format!("msk_{i:06}_{k}.png");
            let bits: Vec<bool> = o.mask().data().iter().map(|&v| v != 0.0).collect();
            io::write_png_1bit(&dir.join(&name), width, height, &bits)?;
            masks.push(name);
        }
        entries.push(SampleEntry {
            image,
            masks,
            labels: s.labels(),
            seed: s.seed(),
            placements: s.placements().to_vec(),
        });
    }
    let manifest = DatasetManifest {
        format: FORMAT.to_string(),
        name: info.name.clone(),
        variant: info.variant.clone(),
        split: info.split,
        count: samples.len(),
        classes: 10,
        seed: info.seed,
        height,
        width,
        synth: info.synth.clone(),
        samples: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    io::write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("{}: unknown format {:?}", path.display(), m.format)));
    }
    if m.count != m.samples.len() {
        return Err(Error::Format(format!(
            "{}: count {} but {} sample entries",
            path.display(),
            m.count,
            m.samples.len()
        )));
    }
    Ok(m)
}

fn read_png_checked(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let (w, h, px) = io::read_png_gray(path)?;
    if (w, h) != (width, height) {
        return Err(Error::Format(format!("{}: {w}x{h}, expected {width}x{height}", path.display())));
    }
    Ok(px)
}

/// Loads the manifest and every sample of a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let m = read_manifest(dir)?;
    let (h, w) = (m.height, m.width);
    let mut samples = Vec::with_capacity(m.count);
    for (i, e) in m.samples.iter().enumerate() {
        if e.masks.len() != e.labels.len() {
            return Err(Error::Format(format!("sample {i}: {} masks for {} labels", e.masks.len(), e.labels.len())));
        }
        if let Some(&l) = e.labels.iter().find(|&&l| l >= m.classes) {
            return Err(Error::Format(format!("sample {i}: label {l} out of range")));
        }
        let px = read_png_checked(&dir.join(&e.image), w, h)?;
        let image = Tensor::new([h, w, 1], px.iter().map(|&b| b as f64 / 255.0).collect())?;
        let objects = e
            .masks
            .iter()
            .zip(&e.labels)
            .enumerate()
            .map(|(k, (name, &label))| {
                let bits = read_png_checked(&dir.join(name), w, h)?;
                let mask = Tensor::new([h, w], bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect())?;
                ObjectMask::new(mask, k, label)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample::new(image, objects, m.split, e.seed)?.with_placements(e.placements.clone()));
    }
    Ok((m, samples))
}
