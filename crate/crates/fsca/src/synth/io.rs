//! Bit-exact dataset directory format.
//!
//! Layout: `manifest.json` plus, per sample id, `<id>.img` (magic `FSCAIMG1`,
//! u32 H/W/C little-endian, then H*W*C little-endian f32) and
//! `<id>.points.json` (array of `[x, y]`).

use super::{DomainData, DomainSpec, Scene};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const IMG_MAGIC: &[u8; 8] = b"FSCAIMG1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub domain: u32,
    pub split: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<SampleEntry>,
    pub domains: Vec<DomainSpec>,
    pub version: u32,
}

fn sample_id(domain: u32, split: &str, index: usize) -> String {
    format!("d{domain}_{split}_{index:04}")
}

/// Write scenes and their manifest; scene order must match `manifest.samples`.
pub fn write_dataset(dir: &Path, scenes: &[Scene], manifest: &Manifest) -> Result<()> {
    if scenes.len() != manifest.samples.len() {
        return Err(Error::Contract(format!(
            "write_dataset: {} scenes but {} manifest entries",
            scenes.len(),
            manifest.samples.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    for (scene, entry) in scenes.iter().zip(manifest.samples.iter()) {
        let img_path = dir.join(format!("{}.img", entry.id));
        let mut buf = Vec::with_capacity(8 + 12 + scene.image.len() * 4);
        buf.extend_from_slice(IMG_MAGIC);
        buf.extend_from_slice(&(scene.height as u32).to_le_bytes());
        buf.extend_from_slice(&(scene.width as u32).to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        for &v in &scene.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(&img_path)?.write_all(&buf)?;

        let pts: Vec<[f64; 2]> = scene.points.iter().map(|&(x, y)| [x, y]).collect();
        let pts_path = dir.join(format!("{}.points.json", entry.id));
        std::fs::write(&pts_path, serde_json::to_string(&pts).expect("points json"))?;
    }
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(manifest).expect("manifest json"),
    )?;
    Ok(())
}

fn read_img(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let display = path.display().to_string();
    let mut file = std::fs::File::open(path)
        .map_err(|_| Error::format(&display, "sample file listed in manifest is missing"))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 20 {
        return Err(Error::format(&display, "truncated header"));
    }
    if &bytes[0..8] != IMG_MAGIC {
        return Err(Error::format(&display, "bad magic bytes"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if c != 1 {
        return Err(Error::format(&display, format!("expected 1 channel, got {c}")));
    }
    let expect = 20 + h * w * c * 4;
    if bytes.len() != expect {
        return Err(Error::format(
            &display,
            format!("expected {expect} bytes for {h}x{w}x{c}, got {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(h * w);
    for chunk in bytes[20..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((h, w, data))
}

/// Read a dataset directory back into scenes plus its manifest.
pub fn read_dataset(dir: &Path) -> Result<(Vec<Scene>, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_str = std::fs::read_to_string(&manifest_path).map_err(|_| {
        Error::format(manifest_path.display().to_string(), "manifest missing or unreadable")
    })?;
    let manifest: Manifest = serde_json::from_str(&manifest_str)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported version {}", manifest.version),
        ));
    }

    let mut scenes = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let (height, width, image) = read_img(&dir.join(format!("{}.img", entry.id)))?;
        let pts_path = dir.join(format!("{}.points.json", entry.id));
        let display = pts_path.display().to_string();
        let pts_str = std::fs::read_to_string(&pts_path)
            .map_err(|_| Error::format(&display, "points file listed in manifest is missing"))?;
        let pts: Vec<[f64; 2]> = serde_json::from_str(&pts_str)
            .map_err(|e| Error::format(&display, e.to_string()))?;
        scenes.push(Scene {
            height,
            width,
            image,
            points: pts.iter().map(|p| (p[0], p[1])).collect(),
            domain_id: entry.domain,
            seed: entry.seed,
        });
    }
    Ok((scenes, manifest))
}

/// Persist per-domain data as one dataset directory.
pub fn write_domains(dir: &Path, domains: &[DomainData]) -> Result<()> {
    let mut scenes = Vec::new();
    let mut samples = Vec::new();
    for d in domains {
        for (i, s) in d.train.iter().enumerate() {
            samples.push(SampleEntry {
                id: sample_id(d.spec.domain_id, "train", i),
                domain: d.spec.domain_id,
                split: "train".into(),
                seed: s.seed,
            });
            scenes.push(s.clone());
        }
        for (i, s) in d.test.iter().enumerate() {
            samples.push(SampleEntry {
                id: sample_id(d.spec.domain_id, "test", i),
                domain: d.spec.domain_id,
                split: "test".into(),
                seed: s.seed,
            });
            scenes.push(s.clone());
        }
    }
    let manifest = Manifest {
        samples,
        domains: domains.iter().map(|d| d.spec.clone()).collect(),
        version: MANIFEST_VERSION,
    };
    write_dataset(dir, &scenes, &manifest)
}

/// Group a dataset directory's scenes back into per-domain train/test splits.
pub fn read_domains(dir: &Path) -> Result<Vec<DomainData>> {
    let (scenes, manifest) = read_dataset(dir)?;
    let mut out: Vec<DomainData> = manifest
        .domains
        .iter()
        .map(|spec| DomainData {
            spec: spec.clone(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for (scene, entry) in scenes.into_iter().zip(manifest.samples.iter()) {
        let slot = out
            .iter_mut()
            .find(|d| d.spec.domain_id == entry.domain)
            .ok_or_else(|| {
                Error::format(
                    dir.join("manifest.json").display().to_string(),
                    format!("sample {} references unknown domain {}", entry.id, entry.domain),
                )
            })?;
        match entry.split.as_str() {
            "train" => slot.train.push(scene),
            "test" => slot.test.push(scene),
            other => {
                return Err(Error::format(
                    dir.join("manifest.json").display().to_string(),
                    format!("sample {} has unknown split {other:?}", entry.id),
                ))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_domains, generate_domain};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("fsca_io_{tag}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let spec = default_domains(1).unwrap().remove(0);
        let data = generate_domain(&spec, 5, 6, 4, 32, 32).unwrap();
        let dir = tmpdir("roundtrip");
        write_domains(&dir, &[data.clone()]).unwrap();
        let back = read_domains(&dir).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].train, data.train);
        assert_eq!(back[0].test, data.test);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_magic_is_format_error_naming_the_file() {
        let spec = default_domains(1).unwrap().remove(0);
        let data = generate_domain(&spec, 5, 1, 0, 16, 16).unwrap();
        let dir = tmpdir("magic");
        write_domains(&dir, &[data]).unwrap();
        let img = dir.join("d0_train_0000.img");
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[0] = b'X';
        std::fs::write(&img, bytes).unwrap();
        match read_domains(&dir) {
            Err(Error::Format { path, .. }) => assert!(path.contains("d0_train_0000.img")),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_sample_listed_in_manifest_is_format_error() {
        let spec = default_domains(1).unwrap().remove(0);
        let data = generate_domain(&spec, 5, 2, 0, 16, 16).unwrap();
        let dir = tmpdir("missing");
        write_domains(&dir, &[data]).unwrap();
        std::fs::remove_file(dir.join("d0_train_0001.img")).unwrap();
        assert!(matches!(read_domains(&dir), Err(Error::Format { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_image_is_format_error() {
        let spec = default_domains(1).unwrap().remove(0);
        let data = generate_domain(&spec, 5, 1, 0, 16, 16).unwrap();
        let dir = tmpdir("trunc");
        write_domains(&dir, &[data]).unwrap();
        let img = dir.join("d0_train_0000.img");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_domains(&dir), Err(Error::Format { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
