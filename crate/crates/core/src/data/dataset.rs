use std::path::Path;

use super::segt::{read_tensor, write_tensor, SegtTensor};
use super::shapes::{SegSample, ShapesConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "seglab-shapes";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ShapesConfig,
    pub counts: SplitCounts,
}

impl Manifest {
    pub fn for_config(config: &ShapesConfig) -> Self {
        Self {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: config.clone(),
            counts: SplitCounts {
                train: config.train,
                val: config.val,
                total: config.total(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn train(&self) -> &[SegSample] {
        &self.samples[..self.manifest.counts.train]
    }

    pub fn val(&self) -> &[SegSample] {
        &self.samples[self.manifest.counts.train..]
    }

    pub fn classes(&self) -> usize {
        self.manifest.config.classes
    }

    pub fn channels(&self) -> usize {
        self.manifest.config.channels
    }
}

fn image_name(i: usize) -> String {
    format!("img_{i:06}.segt")
}

fn label_name(i: usize) -> String {
    format!("lab_{i:06}.segt")
}

/// Writes `img_%06d.segt`, `lab_%06d.segt` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, config: &ShapesConfig, samples: &[SegSample]) -> Result<()> {
    if samples.len() != config.total() {
        return Err(Error::config(format!(
            "config declares {} samples, got {}",
            config.total(),
            samples.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_tensor(dir.join(image_name(i)), &SegtTensor::from(&s.image))?;
        write_tensor(dir.join(label_name(i)), &SegtTensor::from(&s.labels))?;
    }
    let manifest = serde_json::to_string_pretty(&Manifest::for_config(config))?;
    std::fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported dataset format {} v{}", manifest.format, manifest.version),
        ));
    }
    let counts = manifest.counts;
    if counts.train + counts.val != counts.total {
        return Err(Error::format(manifest_path, "split counts do not add up"));
    }
    let samples = (0..counts.total)
        .map(|i| {
            let image = read_tensor(dir.join(image_name(i)))?.into_f32()?;
            let labels = read_tensor(dir.join(label_name(i)))?.into_labels()?;
            labels.check_classes(manifest.config.classes)?;
            Ok(SegSample { image, labels })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, samples })
}
