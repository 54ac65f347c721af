//! Dataset manifests: one `id<TAB>image_path<TAB>mask_path` line per image.
//! Relative paths resolve against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_pgm, read_ppm, write_pgm, write_ppm, LabeledImage, SegDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub image_path: String,
    pub mask_path: String,
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.tsv` under `dir`.
pub fn write_dataset(dir: &Path, dataset: &SegDataset) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for item in dataset.iter() {
        let image_path = format!("images/{:06}.ppm", item.id);
        let mask_path = format!("masks/{:06}.pgm", item.id);
        write_ppm(&dir.join(&image_path), &item.image)?;
        write_pgm(&dir.join(&mask_path), &item.mask)?;
        writeln!(manifest, "{}\t{}\t{}", item.id, image_path, mask_path).expect("string write");
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn parse_manifest(text: &str, name: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        if !body.is_empty() {
            let err = |msg: &str| Error::Format { path: name.into(), offset, msg: msg.into() };
            let fields: Vec<&str> = body.split('\t').collect();
            if fields.len() != 3 {
                return Err(err("expected 3 tab-separated fields"));
            }
            let id = fields[0].parse().map_err(|_| err("id is not an integer"))?;
            entries.push(ManifestEntry { id, image_path: fields[1].into(), mask_path: fields[2].into() });
        }
        offset += line.len();
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<SegDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, &path.display().to_string())?;
    let items = entries
        .into_iter()
        .map(|e| {
            let image = read_ppm(&base.join(&e.image_path))?;
            let mask = read_pgm(&base.join(&e.mask_path))?;
            if image.shape()[1..] != [mask.height(), mask.width()] {
                return Err(Error::Format { path: e.mask_path.clone(), offset: 0, msg: "mask size differs from image".into() });
            }
            Ok(LabeledImage { id: e.id, image, mask })
        })
        .collect::<Result<_>>()?;
    Ok(SegDataset::new(items))
}
