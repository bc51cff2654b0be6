//! Manifest files on disk and the image-to-sample loading chain.

use std::fs;
use std::path::{Path, PathBuf};

use densepipe_core::error::{Error, Result};
use densepipe_core::image::{hist_equalize, resize_letterbox, to_tensor, ImageGray};
use densepipe_core::manifest::{CueBox, DatasetManifest, ManifestEntry};
use densepipe_core::synth::{class_name, SynthSample};
use densepipe_core::tensor::Tensor;
use densepipe_core::train::Sample;

use crate::imageio;

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    DatasetManifest::parse_csv(&text)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_csv())
        .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))
}

/// Entry paths are relative to the manifest's directory.
pub fn resolve_entry_path(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

/// Decode -> histogram equalization -> letterbox -> [0,1] tensor.
pub fn preprocess(img: &ImageGray, resolution: usize, channels: usize) -> Result<Tensor> {
    let eq = hist_equalize(img);
    let boxed = resize_letterbox(&eq, resolution)?;
    to_tensor(&boxed, channels)
}

/// The letterboxed (but still 8-bit) image, for overlays.
pub fn preprocess_image(img: &ImageGray, resolution: usize) -> Result<ImageGray> {
    resize_letterbox(&hist_equalize(img), resolution)
}

/// Load every manifest entry as a ready model input, labels taken from
/// the manifest's class table.
pub fn load_samples(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    resolution: usize,
    channels: usize,
) -> Result<Vec<Sample>> {
    let classes = manifest.classes();
    let mut out = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let img = imageio::load_image(&resolve_entry_path(manifest_path, &e.path))?;
        let input = preprocess(&img, resolution, channels)?;
        let label = classes
            .iter()
            .position(|c| c == &e.label)
            .expect("label in class table");
        out.push(Sample { input, label });
    }
    Ok(out)
}

/// Write generated samples as PGM files plus `manifest.csv`; returns the
/// manifest path.
pub fn write_synth_dataset(out_dir: &Path, samples: &[SynthSample]) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.pgm");
        imageio::save_pgm(&out_dir.join(&name), &s.image)?;
        entries.push(ManifestEntry {
            path: name,
            label: class_name(s.label).to_string(),
            cue: Some(s.cue),
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    let path = out_dir.join("manifest.csv");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

/// In-memory counterpart of the loading chain for generated samples.
pub fn synth_to_samples(
    samples: &[SynthSample],
    resolution: usize,
    channels: usize,
) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            Ok(Sample {
                input: preprocess(&s.image, resolution, channels)?,
                label: s.label,
            })
        })
        .collect()
}

/// Cue boxes for entries, in manifest order (None where absent).
pub fn cue_boxes(manifest: &DatasetManifest) -> Vec<Option<CueBox>> {
    manifest.entries.iter().map(|e| e.cue).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use densepipe_core::synth::{generate, SynthParams};

    #[test]
    fn synth_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&SynthParams {
            resolution: 32,
            count: 6,
            seed: 3,
        })
        .unwrap();
        let mpath = write_synth_dataset(dir.path(), &samples).unwrap();
        let manifest = read_manifest(&mpath).unwrap();
        assert_eq!(manifest.len(), 6);
        assert_eq!(manifest.class_counts(), vec![3, 3]);
        let loaded = load_samples(&mpath, &manifest, 32, 1).unwrap();
        let direct = synth_to_samples(&samples, 32, 1).unwrap();
        for (a, b) in loaded.iter().zip(&direct) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.input.data(), b.input.data());
        }
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let p = resolve_entry_path(Path::new("/data/set/manifest.csv"), "imgs/a.pgm");
        assert_eq!(p, Path::new("/data/set/imgs/a.pgm"));
        let abs = resolve_entry_path(Path::new("/data/set/manifest.csv"), "/other/a.pgm");
        assert_eq!(abs, Path::new("/other/a.pgm"));
    }

    #[test]
    fn preprocess_shapes() {
        let img = ImageGray {
            width: 40,
            height: 20,
            pixels: vec![100; 800],
        };
        let t = preprocess(&img, 32, 1).unwrap();
        assert_eq!(t.shape(), &[1, 32, 32]);
        let t3 = preprocess(&img, 32, 3).unwrap();
        assert_eq!(t3.shape(), &[3, 32, 32]);
    }
}
