//! Manifest format: UTF-8 CSV with header `id,path,domain,task,label_ref,split`,
//! a `<file>.meta.json` sidecar holding the seed, and one JSON label sidecar
//! per labeled sample (masks stored as PNG next to the sidecar).

use crate::data::sample::{
    BoundingBox, Domain, ImageSample, LabelData, LabelOrigin, LabelPayload, TaskKind,
};
use crate::error::{Error, Result};
use crate::imgio::{self, RgbArray};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_HEADER: [&str; 6] = ["id", "path", "domain", "task", "label_ref", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Split, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub domain: Domain,
    pub task: TaskKind,
    pub label_ref: Option<String>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    origin: LabelOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_dist: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BoundingBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ignore_path: Option<String>,
}

fn meta_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    name.push_str(".meta.json");
    manifest_path.with_file_name(name)
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, seed: u64) -> DatasetManifest {
        DatasetManifest {
            root: root.into(),
            seed,
            entries: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn push(&mut self, entry: ManifestEntry) {
        self.entries.push(entry);
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn with_domain(&self, domain: Domain) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.domain == domain)
    }

    pub fn with_task(&self, task: TaskKind) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.task == task)
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        {
            let headers = reader
                .headers()
                .map_err(|e| Error::ManifestParse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            let got: Vec<&str> = headers.iter().collect();
            if got != MANIFEST_HEADER {
                return Err(Error::ManifestParse {
                    line: 1,
                    message: format!("bad header {got:?}, expected {MANIFEST_HEADER:?}"),
                });
            }
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::ManifestParse {
                line: e
                    .position()
                    .map(|p| p.line() as usize)
                    .unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
            let parse_err = |message: String| Error::ManifestParse { line, message };

            let id = field(0);
            if id.is_empty() {
                return Err(parse_err("missing id".into()));
            }
            let img_path = field(1);
            if img_path.is_empty() {
                return Err(parse_err(format!("row for {id:?} is missing a path")));
            }
            let domain = Domain::from_str(&field(2)).map_err(parse_err)?;
            let task = TaskKind::from_str(&field(3)).map_err(parse_err)?;
            let label_ref = match field(4) {
                s if s.is_empty() => None,
                s => Some(s),
            };
            let split = match field(5) {
                s if s.is_empty() => None,
                s => Some(Split::from_str(&s).map_err(parse_err)?),
            };
            entries.push(ManifestEntry {
                id,
                path: img_path,
                domain,
                task,
                label_ref,
                split,
            });
        }

        for entry in &entries {
            let img = root.join(&entry.path);
            if !img.is_file() {
                return Err(Error::sample(
                    &entry.id,
                    format!("image file missing: {}", img.display()),
                ));
            }
            if let Some(label_ref) = &entry.label_ref {
                let lp = root.join(label_ref);
                if !lp.is_file() {
                    return Err(Error::sample(
                        &entry.id,
                        format!("label file missing: {}", lp.display()),
                    ));
                }
            }
        }

        let seed = match std::fs::read(meta_path(path)) {
            Ok(bytes) => serde_json::from_slice::<ManifestMeta>(&bytes)?.seed,
            Err(_) => 0,
        };
        Ok(DatasetManifest {
            root,
            seed,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        writer
            .write_record(MANIFEST_HEADER)
            .map_err(|e| Error::Serde(e.to_string()))?;
        for e in &self.entries {
            writer
                .write_record([
                    e.id.as_str(),
                    e.path.as_str(),
                    &e.domain.to_string(),
                    &e.task.to_string(),
                    e.label_ref.as_deref().unwrap_or(""),
                    &e.split.map(|s| s.to_string()).unwrap_or_default(),
                ])
                .map_err(|e| Error::Serde(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_vec_pretty(&ManifestMeta { seed: self.seed })?;
        std::fs::write(meta_path(path), meta).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Writes an image under the manifest root and returns its relative path.
    pub fn save_image(&self, subdir: &str, id: &str, image: &RgbArray) -> Result<String> {
        let rel = format!("{subdir}/{id}.png");
        let full = self.root.join(&rel);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        imgio::save_rgb(image, &full)?;
        Ok(rel)
    }

    /// Writes a label sidecar (and mask PNGs when present), returning the
    /// relative `label_ref` to store in the entry.
    pub fn save_label(&self, id: &str, payload: &LabelPayload) -> Result<String> {
        let labels_dir = self.root.join("labels");
        std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
        let rel = format!("labels/{id}.json");
        let mut record = LabelRecord {
            origin: payload.origin,
            class_dist: None,
            boxes: None,
            mask_path: None,
            ignore_path: None,
        };
        match &payload.data {
            LabelData::ClassDist(p) => record.class_dist = Some(p.clone()),
            LabelData::Boxes(b) => record.boxes = Some(b.clone()),
            LabelData::Mask { mask, ignore } => {
                let mask_rel = format!("labels/{id}_mask.png");
                imgio::save_mask(mask, &self.root.join(&mask_rel))?;
                record.mask_path = Some(mask_rel);
                if let Some(ig) = ignore {
                    let ig_rel = format!("labels/{id}_ignore.png");
                    imgio::save_mask(ig, &self.root.join(&ig_rel))?;
                    record.ignore_path = Some(ig_rel);
                }
            }
        }
        let full = self.root.join(&rel);
        std::fs::write(&full, serde_json::to_vec_pretty(&record)?)
            .map_err(|e| Error::io(&full, e))?;
        Ok(rel)
    }

    pub fn load_label(&self, entry: &ManifestEntry) -> Result<Option<LabelPayload>> {
        let Some(label_ref) = &entry.label_ref else {
            return Ok(None);
        };
        let full = self.root.join(label_ref);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        let record: LabelRecord = serde_json::from_slice(&bytes)?;
        let data = if let Some(p) = record.class_dist {
            LabelData::ClassDist(p)
        } else if let Some(b) = record.boxes {
            LabelData::Boxes(b)
        } else if let Some(mask_path) = record.mask_path {
            let mask = imgio::load_mask(&self.root.join(&mask_path))?;
            let ignore = match record.ignore_path {
                Some(p) => Some(imgio::load_mask(&self.root.join(&p))?),
                None => None,
            };
            LabelData::Mask { mask, ignore }
        } else {
            return Err(Error::sample(&entry.id, "label sidecar has no payload"));
        };
        Ok(Some(LabelPayload {
            origin: record.origin,
            data,
        }))
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<ImageSample> {
        let image = imgio::load_rgb(&self.root.join(&entry.path))?;
        let label = self.load_label(entry)?;
        let sample = ImageSample {
            id: entry.id.clone(),
            image,
            domain: entry.domain,
            task: entry.task,
            label,
        };
        sample.validate()?;
        Ok(sample)
    }
}
