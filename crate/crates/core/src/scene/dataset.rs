//! On-disk datasets: `manifest.json` plus one binary PPM per scene under
//! `images/`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSchema, Relation, Scene, SceneObject, Triplet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    /// Path relative to the dataset directory.
    pub image: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub principal: Triplet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: DatasetSchema,
    pub seed: u64,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn schema(&self) -> &DatasetSchema {
        &self.manifest.schema
    }
}

/// Encodes an H×W×3 image in [0, 1] as binary PPM, `round(v·255)` per channel.
pub fn write_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[2] == 3, "write_ppm: need H×W×3, got {:?}", s);
    let mut buf = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    buf.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    buf
}

pub fn read_ppm(buf: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, "PPM maxval must be 255"));
    }
    let raster = buf.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * 3 {
        return Err(Error::format(path, format!("PPM raster has {} bytes, expected {}", raster.len(), w * h * 3)));
    }
    Ok(Tensor::new(vec![h, w, 3], raster.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn image_file_name(id: u64) -> String {
    format!("images/scene_{id}.ppm")
}

pub fn save_dataset(dir: &Path, schema: &DatasetSchema, seed: u64, scenes: &[Scene]) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let name = image_file_name(s.id);
        let path = dir.join(&name);
        fs::write(&path, write_ppm(&s.image)).map_err(|e| Error::io(&path, e))?;
        records.push(SceneRecord {
            id: s.id,
            image: name,
            objects: s.objects.clone(),
            relations: s.relations.clone(),
            principal: s.principal,
        });
    }
    let manifest = DatasetManifest { schema: schema.clone(), seed, scenes: records };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&path, format!("invalid manifest: {e}")))?;
    manifest.schema.validate()?;

    let mut ids = HashSet::new();
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for rec in &manifest.scenes {
        if !ids.insert(rec.id) {
            return Err(Error::format(&path, format!("duplicate scene id {}", rec.id)));
        }
        let img_path = dir.join(&rec.image);
        let buf = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = read_ppm(&buf, &img_path)?;
        if image.shape() != manifest.schema.image_size {
            return Err(Error::format(&img_path, format!("image shape {:?} does not match schema", image.shape())));
        }
        let scene = Scene {
            id: rec.id,
            image,
            objects: rec.objects.clone(),
            relations: rec.relations.clone(),
            principal: rec.principal,
        };
        scene
            .check_invariants(&manifest.schema)
            .map_err(|m| Error::format(&path, format!("scene {}: {m}", rec.id)))?;
        scenes.push(scene);
    }
    Ok(Dataset { manifest, scenes })
}
