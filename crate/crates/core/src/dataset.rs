//! Triplet datasets and their JSON-lines manifests.
//!
//! A manifest line looks like
//! `{"id":"r0001","x":"x/r0001.mskt","y_hat":"y_hat/r0001.mskt","y":"y/r0001.mskt","split":"test"}`
//! with an optional `"mask"` key. Paths are relative to the manifest file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{read_image, read_mask, write_atomic, write_image};
use crate::tensor::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "calibration" | "calib" => Ok(Split::Calibration),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub x: String,
    pub y_hat: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub id: String,
    pub x: Image,
    pub y_hat: Image,
    pub y: Image,
    pub heuristic_mask: Option<Mask>,
    pub split: Split,
}

impl TripletRecord {
    pub fn new(id: impl Into<String>, x: Image, y_hat: Image, y: Image, split: Split) -> Result<Self> {
        y_hat.shape().check_same(&y.shape())?;
        Ok(Self {
            id: id.into(),
            x,
            y_hat,
            y,
            heuristic_mask: None,
            split,
        })
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        self.y.shape().check_same(&mask.shape())?;
        self.heuristic_mask = Some(mask);
        Ok(self)
    }
}

/// A collection of triplets kept in ascending id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletDataset {
    records: Vec<TripletRecord>,
}

impl TripletDataset {
    pub fn new(mut records: Vec<TripletRecord>) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Self { records }
    }

    pub fn records(&self) -> &[TripletRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [TripletRecord] {
        &mut self.records
    }

    pub fn into_records(self) -> Vec<TripletRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> TripletDataset {
        TripletDataset {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &TripletRecord> {
        self.records.iter()
    }
}

impl FromIterator<TripletRecord> for TripletDataset {
    fn from_iter<I: IntoIterator<Item = TripletRecord>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn render_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Load every record of a manifest, optionally restricted to one split.
pub fn load_dataset(path: impl AsRef<Path>, split: Option<Split>) -> Result<TripletDataset> {
    let path = path.as_ref();
    let base = base_dir(path);
    let entries = read_manifest(path)?;
    let mut records = Vec::new();
    for e in entries {
        if split.is_some_and(|s| s != e.split) {
            continue;
        }
        let mut rec = TripletRecord::new(
            e.id.clone(),
            read_image(base.join(&e.x))?,
            read_image(base.join(&e.y_hat))?,
            read_image(base.join(&e.y))?,
            e.split,
        )?;
        if let Some(m) = &e.mask {
            rec = rec.with_mask(read_mask(base.join(m))?)?;
        }
        records.push(rec);
    }
    Ok(TripletDataset::new(records))
}

/// Write tensors under `dir/{x,y_hat,y,mask}/<id>.mskt` and the manifest at
/// `dir/<manifest_name>`. Returns the manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, manifest_name: &str, data: &TripletDataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(data.len());
    for r in data.iter() {
        let rel = |kind: &str| format!("{kind}/{}.mskt", r.id);
        write_image(dir.join(rel("x")), &r.x)?;
        write_image(dir.join(rel("y_hat")), &r.y_hat)?;
        write_image(dir.join(rel("y")), &r.y)?;
        let mask = match &r.heuristic_mask {
            Some(m) => {
                write_image(dir.join(rel("mask")), m)?;
                Some(rel("mask"))
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: r.id.clone(),
            x: rel("x"),
            y_hat: rel("y_hat"),
            y: rel("y"),
            mask,
            split: r.split,
        });
    }
    let path = dir.join(manifest_name);
    write_atomic(&path, render_manifest(&entries)?.as_bytes())?;
    Ok(path)
}

/// Rewrite a manifest so that each listed record points at `mask_dir/<id>.mskt`.
/// Entries whose id has no mask in `ids` are dropped. Paths stay relative to
/// the new manifest's directory.
pub fn attach_masks(
    manifest: &Path,
    out_manifest: &Path,
    mask_dir: &Path,
    ids: &[String],
) -> Result<()> {
    let src_base = base_dir(manifest);
    let dst_base = base_dir(out_manifest);
    let entries = read_manifest(manifest)?;
    let rebase = |p: &str| -> String { relative_to(&src_base.join(p), &dst_base) };
    let mut out = Vec::new();
    for e in entries {
        if !ids.contains(&e.id) {
            continue;
        }
        out.push(ManifestEntry {
            mask: Some(relative_to(&mask_dir.join(format!("{}.mskt", e.id)), &dst_base)),
            x: rebase(&e.x),
            y_hat: rebase(&e.y_hat),
            y: rebase(&e.y),
            ..e
        });
    }
    write_atomic(out_manifest, render_manifest(&out)?.as_bytes())
}

fn relative_to(target: &Path, base: &Path) -> String {
    let abs = |p: &Path| -> PathBuf {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        normalize(&p)
    };
    let t = abs(target);
    let b = abs(base);
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &tc[common..] {
        rel.push(c);
    }
    rel.to_string_lossy().replace('\\', "/")
}

fn normalize(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}
