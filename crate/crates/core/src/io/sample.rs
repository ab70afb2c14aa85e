//! On-disk layout of one sample.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::flo::{read_flo, write_flo};
use super::kitti::{read_kitti_png, write_kitti_png};
use super::png::{read_image, read_mask_png, write_image_png, write_mask_png};
use crate::error::{Error, Result};
use crate::imaging::{dim_mismatch, FlowField, Image, Mask};
use crate::scene::SceneSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFormat {
    Flo,
    Kitti,
}

impl FromStr for FlowFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flo" => Ok(FlowFormat::Flo),
            "kitti" => Ok(FlowFormat::Kitti),
            other => Err(Error::InvalidParameter(format!(
                "unknown flow format {other:?} (expected flo or kitti)"
            ))),
        }
    }
}

impl fmt::Display for FlowFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowFormat::Flo => "flo",
            FlowFormat::Kitti => "kitti",
        })
    }
}

/// File names of one sample, relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub frame0: String,
    pub frame1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_flo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_kitti: Option<String>,
    pub occlusion: String,
    pub shadow: String,
}

impl SampleFiles {
    pub fn named(id: &str, formats: &[FlowFormat]) -> Self {
        Self {
            frame0: format!("{id}_img1.png"),
            frame1: format!("{id}_img2.png"),
            flow_flo: formats.contains(&FlowFormat::Flo).then(|| format!("{id}_flow.flo")),
            flow_kitti: formats.contains(&FlowFormat::Kitti).then(|| format!("{id}_flow.png")),
            occlusion: format!("{id}_occ.png"),
            shadow: format!("{id}_shadow.png"),
        }
    }

    pub fn all(&self) -> Vec<&str> {
        let mut v = vec![self.frame0.as_str(), self.frame1.as_str()];
        v.extend(self.flow_flo.as_deref());
        v.extend(self.flow_kitti.as_deref());
        v.extend([self.occlusion.as_str(), self.shadow.as_str()]);
        v
    }
}

/// Writes every raster of `sample` into `dir` and returns the
/// names used. Each file appears atomically.
pub fn write_sample(sample: &SceneSample, dir: &Path, id: &str, formats: &[FlowFormat]) -> Result<SampleFiles> {
    if formats.is_empty() {
        return Err(Error::InvalidParameter("at least one flow format is required".into()));
    }
    let files = SampleFiles::named(id, formats);
    write_image_png(&sample.frame0, &dir.join(&files.frame0))?;
    write_image_png(&sample.frame1, &dir.join(&files.frame1))?;
    if let Some(name) = &files.flow_flo {
        write_flo(&sample.flow, &dir.join(name))?;
    }
    if let Some(name) = &files.flow_kitti {
        let (h, w) = sample.dims();
        write_kitti_png(&sample.flow, &Mask::filled(h, w, 1.0)?, &dir.join(name))?;
    }
    write_mask_png(&sample.occlusion, &dir.join(&files.occlusion))?;
    write_mask_png(&sample.shadow_region, &dir.join(&files.shadow))?;
    Ok(files)
}

/// A sample read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub frame0: Image,
    pub frame1: Image,
    pub flow: FlowField,
    pub occlusion: Mask,
    pub shadow_region: Mask,
}

/// Reads the files of a sample; `.flo` flow is preferred over KITTI PNG.
pub fn read_sample(dir: &Path, files: &SampleFiles) -> Result<StoredSample> {
    let frame0 = read_image(&dir.join(&files.frame0))?;
    let frame1 = read_image(&dir.join(&files.frame1))?;
    let flow = match (&files.flow_flo, &files.flow_kitti) {
        (Some(name), _) => read_flo(&dir.join(name))?,
        (None, Some(name)) => read_kitti_png(&dir.join(name))?.0,
        (None, None) => return Err(Error::Format("sample lists no flow file".into())),
    };
    let occlusion = read_mask_png(&dir.join(&files.occlusion))?;
    let shadow_region = read_mask_png(&dir.join(&files.shadow))?;
    let dims = frame0.dims();
    for (what, d) in [
        ("frame 1", frame1.dims()),
        ("flow", flow.dims()),
        ("occlusion mask", occlusion.dims()),
        ("shadow mask", shadow_region.dims()),
    ] {
        if d != dims {
            return Err(Error::Format(dim_mismatch(what, dims, d).to_string()));
        }
    }
    Ok(StoredSample {
        frame0,
        frame1,
        flow,
        occlusion,
        shadow_region,
    })
}
