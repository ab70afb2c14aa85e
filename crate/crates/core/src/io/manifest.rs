//! Line-delimited JSON dataset manifest.
//!
//! The first line is a header with the schema version and a snapshot of the
//! generating configuration; every further line describes one sample.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::sample::SampleFiles;
use crate::error::{Error, Result};
use crate::scene::Provenance;

pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = concat!("flowsynth ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub generator: String,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub index: u64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    #[serde(flatten)]
    pub files: SampleFiles,
    /// Source and auxiliary images, relative to the corpus directory.
    pub source: Option<String>,
    pub auxiliary: Option<String>,
    pub generator: String,
    pub params: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Sample(Box<SampleRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub samples: Vec<SampleRecord>,
}

fn to_line(line: &Line) -> Result<String> {
    let mut s = serde_json::to_string(line).map_err(|e| Error::Encode(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Appends records to a manifest file; each record is one `write` of a
/// complete line followed by a flush.
pub struct ManifestWriter {
    file: File,
    path: PathBuf,
}

impl ManifestWriter {
    /// Creates (truncating) the manifest and writes its header.
    pub fn create(path: &Path, config: serde_json::Value) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            file,
            path: path.to_path_buf(),
        };
        w.write_line(&Line::Header(ManifestHeader {
            schema_version: SCHEMA_VERSION,
            generator: GENERATOR_VERSION.into(),
            config,
        }))?;
        Ok(w)
    }

    /// Reopens an existing manifest for appending.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn write_line(&mut self, line: &Line) -> Result<()> {
        let text = to_line(line)?;
        self.file
            .write_all(text.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, record: &SampleRecord) -> Result<()> {
        self.write_line(&Line::Sample(Box::new(record.clone())))
    }

    /// Forces the manifest to stable storage.
    pub fn sync(&self) -> Result<()> {
        self.file.sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

impl DatasetManifest {
    /// Parses a manifest. A final line without its newline is an interrupted
    /// append and is skipped with a warning.
    pub fn parse(text: &str) -> Result<Self> {
        let complete = match text.rfind('\n') {
            Some(i) => {
                if i + 1 < text.len() {
                    warn!("ignoring truncated final manifest line");
                }
                &text[..=i]
            }
            None => {
                if !text.is_empty() {
                    warn!("ignoring truncated final manifest line");
                }
                ""
            }
        };
        let mut lines = complete.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |n: usize, e: serde_json::Error| Error::Format(format!("manifest line {}: {e}", n + 1));
        let header = match lines.next() {
            Some((n, l)) => match serde_json::from_str(l).map_err(|e| bad(n, e))? {
                Line::Header(h) => h,
                Line::Sample(_) => {
                    return Err(Error::Format("manifest does not start with a header".into()))
                }
            },
            None => return Err(Error::EmptyCorpus("manifest is empty".into())),
        };
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest schema version {} is not supported (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let mut samples = Vec::new();
        for (n, l) in lines {
            match serde_json::from_str(l).map_err(|e| bad(n, e))? {
                Line::Sample(s) => samples.push(*s),
                Line::Header(_) => {
                    return Err(Error::Format(format!("manifest line {}: second header", n + 1)))
                }
            }
        }
        Ok(Self { header, samples })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks that every referenced file exists and has the recorded
    /// dimensions, and that seeds and ids are unique.
    pub fn verify_files(&self, dir: &Path) -> Result<()> {
        let mut seeds = std::collections::HashSet::new();
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !seeds.insert(s.seed) {
                return Err(Error::Format(format!("sample {}: duplicate seed {}", s.id, s.seed)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Format(format!("duplicate sample id {}", s.id)));
            }
            for name in s.files.all() {
                let path = dir.join(name);
                let (w, h) = if name.ends_with(".flo") {
                    flo_dims(&path)?
                } else {
                    let d = image::image_dimensions(&path).map_err(|e| Error::codec(&path, e))?;
                    (d.0 as usize, d.1 as usize)
                };
                if (w, h) != (s.width, s.height) {
                    return Err(Error::Format(format!(
                        "sample {}: {name} is {w}x{h}, manifest says {}x{}",
                        s.id, s.width, s.height
                    )));
                }
            }
        }
        Ok(())
    }
}

fn flo_dims(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; 12];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if f32::from_le_bytes(head[0..4].try_into().expect("4 bytes")) != super::flo::FLO_MAGIC {
        return Err(Error::Format(format!("{}: bad .flo magic", path.display())));
    }
    let w = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    Ok((w, h))
}
