//! Corpus ingestion, flow and image file formats, visualization and dataset
//! manifests.

mod colorize;
mod flo;
mod ingest;
mod kitti;
mod manifest;
mod png;
mod sample;

pub use colorize::{colorize_flow, magnitude_percentile};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use ingest::{ingest_images, Corpus, CorpusEntry, Size};
pub use kitti::{encode_kitti_png, read_kitti_png, write_kitti_png, KITTI_MAX_FLOW};
pub use manifest::{
    DatasetManifest, ManifestHeader, ManifestWriter, SampleRecord, GENERATOR_VERSION,
    MANIFEST_FILE, SCHEMA_VERSION,
};
pub use png::{
    encode_image_png, encode_mask_png, image_from_dynamic, read_image, read_mask_png,
    write_image_png, write_mask_png,
};
pub use sample::{read_sample, write_sample, FlowFormat, SampleFiles, StoredSample};
