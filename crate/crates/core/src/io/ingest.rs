//! Source-image corpus discovery and loading.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::png::{decode_file, image_from_dynamic};
use crate::error::{Error, Result};
use crate::imaging::Image;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl Size {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub path: PathBuf,
    /// Native size of the file.
    pub size: Size,
}

/// Usable images of a directory tree in lexicographic path order. Pixels are
/// decoded on demand so large corpora stay out of memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    target: Option<Size>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn target(&self) -> Option<Size> {
        self.target
    }

    /// Loads image `i` as RGB, fitted to the target size if one is set.
    pub fn load(&self, i: usize) -> Result<Image> {
        let entry = self.entries.get(i).ok_or_else(|| {
            Error::InvalidParameter(format!("corpus index {i} out of range ({})", self.len()))
        })?;
        let mut img = decode_file(&entry.path)?;
        if let Some(t) = self.target {
            if (img.width() as usize, img.height() as usize) != (t.width, t.height) {
                img = img.resize_to_fill(t.width as u32, t.height as u32, FilterType::Triangle);
            }
        }
        image_from_dynamic(&img)
    }

    pub fn load_all(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Walks `dir` for PNG/JPEG files, skipping images smaller than `min_size`
/// and files whose header cannot be read. With `target_size`, every image is
/// scaled to cover the target and center-cropped to it on load.
pub fn ingest_images(dir: &Path, min_size: Size, target_size: Option<Size>) -> Result<Corpus> {
    if !dir.is_dir() {
        let e = std::fs::metadata(dir).err().unwrap_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory")
        });
        return Err(Error::io(dir, e));
    }
    if let Some(t) = target_size {
        if t.width == 0 || t.height == 0 {
            return Err(Error::InvalidParameter("target size must be at least 1x1".into()));
        }
    }
    let mut entries = Vec::new();
    for item in WalkDir::new(dir).sort_by_file_name() {
        let item = item.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        let path = item.path();
        if !item.file_type().is_file() || !has_image_extension(path) {
            continue;
        }
        let (w, h) = match image::image_dimensions(path) {
            Ok(d) => (d.0 as usize, d.1 as usize),
            Err(e) => {
                warn!("skipping unreadable image {}: {e}", path.display());
                continue;
            }
        };
        if w < min_size.width || h < min_size.height {
            debug!(
                "skipping {} ({w}x{h} is below {}x{})",
                path.display(),
                min_size.width,
                min_size.height
            );
            continue;
        }
        entries.push(CorpusEntry {
            path: path.to_path_buf(),
            size: Size::new(w, h),
        });
    }
    // walkdir sorts per directory; the contract is a global path order
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if entries.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no usable images under {}",
            dir.display()
        )));
    }
    Ok(Corpus {
        entries,
        target: target_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_image_png;
    use crate::synthetic::procedural_image;

    fn put(dir: &Path, name: &str, h: usize, w: usize, seed: u64) {
        write_image_png(&procedural_image(h, w, seed).unwrap(), &dir.join(name)).unwrap();
    }

    #[test]
    fn single_image_corpus() {
        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), "a.png", 20, 30, 1);
        let corpus = ingest_images(dir.path(), Size::new(1, 1), None).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.load(0).unwrap().dims(), (20, 30));
    }

    #[test]
    fn small_images_are_dropped_and_order_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("b")).unwrap();
        put(dir.path(), "c.png", 20, 30, 1);
        put(&dir.path().join("b"), "z.png", 25, 35, 2);
        put(dir.path(), "a.png", 8, 30, 3);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        std::fs::write(dir.path().join("broken.png"), "x").unwrap();
        let corpus = ingest_images(dir.path(), Size::new(16, 16), None).unwrap();
        let names: Vec<_> = corpus
            .entries()
            .iter()
            .map(|e| e.path.strip_prefix(dir.path()).unwrap().to_path_buf())
            .collect();
        assert_eq!(names, vec![PathBuf::from("b/z.png"), PathBuf::from("c.png")]);
    }

    #[test]
    fn mixed_sizes_fit_the_target() {
        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), "a.png", 400, 1300, 1);
        put(dir.path(), "b.png", 380, 1250, 2);
        put(dir.path(), "c.png", 500, 1242, 3);
        let corpus = ingest_images(dir.path(), Size::new(1, 1), Some(Size::new(1242, 375))).unwrap();
        for img in corpus.load_all().unwrap() {
            assert_eq!(img.dims(), (375, 1242));
        }
    }

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_images(dir.path(), Size::new(1, 1), None),
            Err(Error::EmptyCorpus(_))
        ));
        let err = ingest_images(&dir.path().join("nope"), Size::new(1, 1), None).unwrap_err();
        assert!(err.is_io());
    }
}
