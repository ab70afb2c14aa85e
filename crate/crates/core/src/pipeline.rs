//! End-to-end runs: dataset generation, validation, evaluation, previews
//! and throughput measurement.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::imaging::{FlowField, Image, Mask};
use crate::io::{
    colorize_flow, encode_flo, encode_image_png, encode_mask_png, ingest_images, read_flo,
    read_kitti_png, read_sample, write_image_png, write_sample, Corpus, DatasetManifest,
    FlowFormat, ManifestWriter, SampleRecord, Size, GENERATOR_VERSION, MANIFEST_FILE,
};
use crate::metrics::{audit_parts, AuditReport, AuditThresholds, EvalReport, FlowErrorStats, OutlierRule};
use crate::par;
use crate::rng::{sample_seed, stage_rng, Stage};
use crate::scene::{generate_sample, SceneSample, SynthesisConfig};
use crate::segmentation::{SegmentationCache, SegmentationStack};
use crate::synthetic::procedural_image;

/// Everything that defines a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub workers: usize,
    /// Smaller corpus images are skipped.
    pub min_size: Size,
    /// Every source is scaled and center-cropped to this size.
    pub target_size: Option<Size>,
    pub synthesis: SynthesisConfig,
    /// Applied to every sample when set.
    pub augment: Option<AugmentConfig>,
    pub formats: Vec<FlowFormat>,
    /// Directory for segmentation label maps reused across runs.
    pub cache_dir: Option<PathBuf>,
    pub audit: AuditThresholds,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output: PathBuf::new(),
            count: 1,
            seed: 0,
            workers: default_workers(),
            min_size: Size::new(64, 64),
            target_size: Some(Size::new(1280, 544)),
            synthesis: SynthesisConfig::default(),
            augment: None,
            formats: vec![FlowFormat::Flo],
            cache_dir: None,
            audit: AuditThresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.count == 0 {
            return bad("sample count must be at least 1");
        }
        if self.workers == 0 {
            return bad("worker count must be at least 1");
        }
        if self.formats.is_empty() {
            return bad("at least one flow format is required");
        }
        if self.input.as_os_str().is_empty() {
            return bad("an input directory is required");
        }
        if self.output.as_os_str().is_empty() {
            return bad("an output directory is required");
        }
        self.synthesis.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// The parts of the configuration that determine output bytes; worker
    /// count and paths are left out so they cannot change the manifest.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "count": self.count,
            "seed": self.seed,
            "min_size": self.min_size,
            "target_size": self.target_size,
            "synthesis": self.synthesis,
            "augment": self.augment,
            "formats": self.formats,
            "audit": self.audit,
        })
    }
}

/// Segmentation stacks of recently used sources. Each slot has its own lock
/// so a stack is computed once even when several workers want it.
struct StackMemo {
    cap: usize,
    slots: Mutex<(HashMap<usize, Arc<Mutex<Option<Arc<SegmentationStack>>>>>, VecDeque<usize>)>,
}

impl StackMemo {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            slots: Mutex::new((HashMap::new(), VecDeque::new())),
        }
    }

    fn get(&self, key: usize, compute: impl FnOnce() -> Result<SegmentationStack>) -> Result<Arc<SegmentationStack>> {
        let slot = {
            let mut guard = self.slots.lock().expect("memo lock");
            let (map, order) = &mut *guard;
            if let Some(s) = map.get(&key) {
                s.clone()
            } else {
                if map.len() >= self.cap {
                    if let Some(old) = order.pop_front() {
                        map.remove(&old);
                    }
                }
                let s = Arc::new(Mutex::new(None));
                map.insert(key, s.clone());
                order.push_back(key);
                s
            }
        };
        let mut entry = slot.lock().expect("slot lock");
        if let Some(stack) = &*entry {
            return Ok(stack.clone());
        }
        let stack = Arc::new(compute()?);
        *entry = Some(stack.clone());
        Ok(stack)
    }
}

/// Source and auxiliary corpus indices of a sample; the auxiliary image
/// differs from the source whenever the corpus has two or more images.
pub fn draw_pair(seed: u64, n: usize) -> (usize, usize) {
    let mut rng = stage_rng(seed, Stage::Corpus);
    let src = rng.random_range(0..n);
    if n < 2 {
        return (src, src);
    }
    let aux = rng.random_range(0..n - 1);
    (src, if aux >= src { aux + 1 } else { aux })
}

fn relative_name(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Writes records in index order as they complete.
struct OrderedManifest {
    writer: ManifestWriter,
    next: usize,
    pending: BTreeMap<usize, Option<SampleRecord>>,
}

impl OrderedManifest {
    fn finish(&mut self, index: usize, record: Option<SampleRecord>) -> Result<()> {
        self.pending.insert(index, record);
        while let Some(r) = self.pending.remove(&self.next) {
            if let Some(r) = r {
                self.writer.append(&r)?;
            }
            self.next += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub written: usize,
    pub failed: Vec<SampleFailure>,
    pub elapsed_secs: f64,
    pub samples_per_sec: f64,
    pub manifest: PathBuf,
}

/// Builds sample `index` of a run: pair draw, synthesis, optional
/// augmentation.
pub fn build_sample(
    corpus: &Corpus,
    stack_for: &(dyn Fn(usize, &Image) -> Result<Arc<SegmentationStack>> + Sync),
    config: &RunConfig,
    index: usize,
) -> Result<(SceneSample, usize, usize)> {
    let seed = sample_seed(config.seed, index as u64);
    let (src, aux) = draw_pair(seed, corpus.len());
    let source = corpus.load(src)?;
    let auxiliary = if aux == src { source.clone() } else { corpus.load(aux)? };
    if auxiliary.dims() != source.dims() {
        return Err(Error::InvalidDimension(format!(
            "source and auxiliary images differ in size ({:?} vs {:?}); set a target size",
            source.dims(),
            auxiliary.dims()
        )));
    }
    let stack = stack_for(src, &source)?;
    let mut sample = generate_sample(&source, &auxiliary, &stack, &config.synthesis, seed)?;
    if let Some(a) = &config.augment {
        sample = augment(sample, a, &mut stage_rng(seed, Stage::Augment))?;
    }
    Ok((sample, src, aux))
}

/// Generates `config.count` samples into `config.output` with a manifest.
/// Output bytes depend only on the corpus, the configuration and the seed.
/// Failed samples are reported and left out of the manifest.
pub fn generate_dataset(config: &RunConfig) -> Result<GenerateSummary> {
    config.validate()?;
    let corpus = ingest_images(&config.input, config.min_size, config.target_size)?;
    if corpus.len() < 2 {
        warn!("corpus has a single image; it doubles as its own auxiliary image");
    }
    std::fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let manifest_path = config.output.join(MANIFEST_FILE);
    let writer = ManifestWriter::create(&manifest_path, config.snapshot())?;
    let ordered = Mutex::new(OrderedManifest {
        writer,
        next: 0,
        pending: BTreeMap::new(),
    });
    let cache = match &config.cache_dir {
        Some(d) => SegmentationCache::at(d),
        None => SegmentationCache::in_memory(),
    };
    let memo = StackMemo::new(2 * config.workers + 8);
    let stack_for = |i: usize, img: &Image| {
        memo.get(i, || {
            cache.stack(img, &config.synthesis.component_counts, &config.synthesis.slic)
        })
    };
    let failures = Mutex::new(Vec::new());
    let done = std::sync::atomic::AtomicUsize::new(0);
    let start = Instant::now();

    let run_one = |index: usize| -> Result<SampleRecord> {
        let (sample, src, aux) = build_sample(&corpus, &stack_for, config, index)?;
        let id = format!("{index:06}");
        let files = write_sample(&sample, &config.output, &id, &config.formats)?;
        let (h, w) = sample.dims();
        Ok(SampleRecord {
            id,
            index: index as u64,
            seed: sample.provenance.seed,
            width: w,
            height: h,
            files,
            source: Some(relative_name(&corpus.entries()[src].path, &config.input)),
            auxiliary: Some(relative_name(&corpus.entries()[aux].path, &config.input)),
            generator: GENERATOR_VERSION.into(),
            params: sample.provenance,
        })
    };

    let first_io_error: Mutex<Option<Error>> = Mutex::new(None);
    par::with_workers(config.workers, || {
        par::for_each_index(config.count, |index| {
            let record = match run_one(index) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!("sample {index} failed: {e}");
                    failures.lock().expect("failure list").push(SampleFailure {
                        index,
                        error: e.to_string(),
                    });
                    if e.is_io() {
                        first_io_error.lock().expect("io error slot").get_or_insert(e);
                    }
                    None
                }
            };
            if let Err(e) = ordered.lock().expect("manifest lock").finish(index, record) {
                first_io_error.lock().expect("io error slot").get_or_insert(e);
            }
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if n % 50 == 0 || n == config.count {
                let secs = start.elapsed().as_secs_f64();
                info!("{n}/{} samples, {:.2} samples/s", config.count, n as f64 / secs.max(1e-9));
            }
        })
    });
    let ordered = ordered.into_inner().expect("manifest lock");
    ordered.writer.sync()?;
    if let Some(e) = first_io_error.into_inner().expect("io error slot") {
        return Err(e);
    }
    let mut failed = failures.into_inner().expect("failure list");
    failed.sort_by_key(|f| f.index);
    let elapsed_secs = start.elapsed().as_secs_f64();
    let written = config.count - failed.len();
    Ok(GenerateSummary {
        written,
        failed,
        elapsed_secs,
        samples_per_sec: written as f64 / elapsed_secs.max(1e-9),
        manifest: manifest_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub id: String,
    pub report: Option<AuditReport>,
    pub error: Option<String>,
}

impl SampleAudit {
    pub fn passed(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: Vec<SampleAudit>,
    pub n_passed: usize,
    pub passed: bool,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &SampleAudit> {
        self.samples.iter().filter(|s| !s.passed())
    }
}

/// Re-reads every sample of a manifest and runs the photometric audit on
/// it. Samples with missing or inconsistent files fail with an error.
pub fn validate_dataset(manifest_path: &Path, thresholds: &AuditThresholds) -> Result<ValidationReport> {
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.samples.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{} lists no samples",
            manifest_path.display()
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let duplicate: Vec<bool> = manifest.samples.iter().map(|s| !seen.insert(s.seed)).collect();
    let samples: Vec<SampleAudit> = par::map_range(manifest.samples.len(), |i| {
        let rec = &manifest.samples[i];
        let result = (|| {
            if duplicate[i] {
                return Err(Error::Format(format!("duplicate seed {}", rec.seed)));
            }
            let s = read_sample(dir, &rec.files)?;
            if s.frame0.dims() != (rec.height, rec.width) {
                return Err(Error::Format(format!(
                    "files are {}x{}, manifest says {}x{}",
                    s.frame0.width(),
                    s.frame0.height(),
                    rec.width,
                    rec.height
                )));
            }
            audit_parts(&s.frame0, &s.frame1, &s.flow, &s.occlusion, &s.shadow_region, thresholds)
        })();
        match result {
            Ok(r) => SampleAudit {
                id: rec.id.clone(),
                report: Some(r),
                error: None,
            },
            Err(e) => SampleAudit {
                id: rec.id.clone(),
                report: None,
                error: Some(e.to_string()),
            },
        }
    });
    let n_passed = samples.iter().filter(|s| s.passed()).count();
    Ok(ValidationReport {
        passed: n_passed == samples.len(),
        n_passed,
        samples,
    })
}

/// Middlebury marks unknown flow with huge values.
const UNKNOWN_FLOW: f32 = 1e9;

fn read_flow_with_validity(path: &Path) -> Result<(FlowField, Mask)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("flo")) {
        let flow = read_flo(path)?;
        let (h, w) = flow.dims();
        let alpha = flow
            .vectors()
            .iter()
            .map(|[u, v]| (u.abs() < UNKNOWN_FLOW && v.abs() < UNKNOWN_FLOW) as u8 as f32)
            .collect();
        Ok((flow, Mask::from_data(h, w, alpha)?))
    } else {
        read_kitti_png(path)
    }
}

/// Flow files of a directory keyed by file stem. Dataset directories are
/// recognized by their `_flow` suffix so frames and masks are skipped; a
/// `.flo` wins over a KITTI PNG with the same stem.
fn flow_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("flo" | "png")) {
            paths.push(path);
        }
    }
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if paths.iter().any(|p| stem(p).ends_with("_flow")) {
        paths.retain(|p| stem(p).ends_with("_flow"));
    }
    paths.sort();
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in paths {
        let is_flo = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("flo"));
        let key = stem(&p);
        match out.get(&key) {
            Some(_) if !is_flo => {}
            _ => {
                out.insert(key, p);
            }
        }
    }
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the ground truth file with
/// the same stem in `gt_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, rule: OutlierRule) -> Result<EvalReport> {
    let gt = flow_files(gt_dir)?;
    let pred = flow_files(pred_dir)?;
    let missing: Vec<&str> = gt.keys().filter(|k| !pred.contains_key(*k)).map(String::as_str).collect();
    let extra: Vec<&str> = pred.keys().filter(|k| !gt.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("no prediction for {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("no ground truth for {}", extra.join(", ")));
        }
        return Err(Error::Unmatched(parts.join("; ")));
    }
    if gt.is_empty() {
        return Err(Error::EmptyCorpus(format!("no flow files in {}", gt_dir.display())));
    }
    let keys: Vec<&String> = gt.keys().collect();
    let stats: Vec<Result<(String, FlowErrorStats)>> = par::map_slice(&keys, |k| {
        let (g, valid) = read_flow_with_validity(&gt[*k])?;
        let (p, _) = read_flow_with_validity(&pred[*k])?;
        Ok(((*k).clone(), FlowErrorStats::compute(&p, &g, &valid, rule)?))
    });
    EvalReport::from_stats(stats.into_iter().collect::<Result<_>>()?, rule)
}

/// Frame 0, frame 1 and the colorized flow side by side.
pub fn preview_montage(manifest_path: &Path, id: &str) -> Result<Image> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let rec = manifest
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::UnknownSample(format!("{id} is not in {}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let s = read_sample(dir, &rec.files)?;
    montage(&[&s.frame0, &s.frame1, &colorize_flow(&s.flow, None)])
}

fn montage(panels: &[&Image]) -> Result<Image> {
    let (h, w) = panels[0].dims();
    let rgb: Vec<Image> = panels.iter().map(|p| p.to_rgb()).collect();
    if rgb.iter().any(|p| p.dims() != (h, w)) {
        return Err(Error::InvalidDimension("montage panels differ in size".into()));
    }
    Image::from_fn(h, w * panels.len(), 3, |x, y, c| rgb[x / w].get(x % w, y, c))
}

pub fn write_preview(manifest_path: &Path, id: &str, out: &Path) -> Result<()> {
    write_image_png(&preview_montage(manifest_path, id)?, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub size: Size,
    pub samples: usize,
    pub workers: usize,
    pub seed: u64,
    /// Distinct procedural source images; their segmentation is computed
    /// before timing starts.
    pub sources: usize,
    pub synthesis: SynthesisConfig,
    /// Corpus to draw sources from instead of procedural images.
    pub input: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            size: Size::new(1280, 544),
            samples: 20,
            workers: default_workers(),
            seed: 0,
            sources: 2,
            synthesis: SynthesisConfig::default(),
            input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub size: Size,
    pub samples: usize,
    pub workers: usize,
    /// Worker threads that can actually run at once.
    pub cores: usize,
    /// One-off segmentation cost per source image, excluded from throughput.
    pub segmentation_secs_per_source: f64,
    pub synthesis_secs: f64,
    /// Synthesized samples per second across all workers.
    pub samples_per_sec: f64,
    pub samples_per_sec_per_core: f64,
    /// Default augmentation, per sample, measured separately.
    pub augment_secs_per_sample: f64,
    /// PNG and `.flo` encoding, per sample, measured separately.
    pub encode_secs_per_sample: f64,
}

/// Times `generate_sample` on prepared sources. Segmentation is computed up
/// front because it is cached per source image in real runs.
pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    if config.samples == 0 || config.workers == 0 || config.sources == 0 {
        return Err(Error::InvalidParameter("bench needs samples, workers and sources >= 1".into()));
    }
    config.synthesis.validate()?;
    let images: Vec<Image> = match &config.input {
        Some(dir) => {
            let corpus = ingest_images(dir, Size::new(1, 1), Some(config.size))?;
            (0..config.sources.min(corpus.len()))
                .map(|i| corpus.load(i))
                .collect::<Result<_>>()?
        }
        None => (0..config.sources.max(2))
            .map(|i| procedural_image(config.size.height, config.size.width, config.seed + i as u64))
            .collect::<Result<_>>()?,
    };
    let n_src = images.len();
    let cfg = &config.synthesis;
    let t = Instant::now();
    let stacks: Vec<SegmentationStack> = par::with_workers(config.workers, || {
        par::map_slice(&images, |img| SegmentationStack::compute(img, &cfg.component_counts, &cfg.slic))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let segmentation_secs_per_source = t.elapsed().as_secs_f64() / n_src as f64;

    let one = |i: usize| -> Result<SceneSample> {
        let seed = sample_seed(config.seed, i as u64);
        let (src, aux) = draw_pair(seed, n_src);
        generate_sample(&images[src], &images[aux], &stacks[src], cfg, seed)
    };
    let t = Instant::now();
    let samples: Vec<SceneSample> = par::with_workers(config.workers, || par::map_range(config.samples, one))
        .into_iter()
        .collect::<Result<_>>()?;
    let synthesis_secs = t.elapsed().as_secs_f64();

    let probe = samples.len().min(4);
    let aug = AugmentConfig::default();
    let t = Instant::now();
    for (i, s) in samples.iter().take(probe).enumerate() {
        augment(s.clone(), &aug, &mut stage_rng(i as u64, Stage::Augment))?;
    }
    let augment_secs_per_sample = t.elapsed().as_secs_f64() / probe as f64;
    let t = Instant::now();
    for s in samples.iter().take(probe) {
        encode_image_png(&s.frame0)?;
        encode_image_png(&s.frame1)?;
        encode_flo(&s.flow)?;
        encode_mask_png(&s.occlusion)?;
        encode_mask_png(&s.shadow_region)?;
    }
    let encode_secs_per_sample = t.elapsed().as_secs_f64() / probe as f64;

    let cores = if cfg!(feature = "parallel") {
        config.workers.min(default_workers())
    } else {
        1
    };
    let samples_per_sec = config.samples as f64 / synthesis_secs.max(1e-9);
    Ok(BenchReport {
        size: config.size,
        samples: config.samples,
        workers: config.workers,
        cores,
        segmentation_secs_per_source,
        synthesis_secs,
        samples_per_sec,
        samples_per_sec_per_core: samples_per_sec / cores as f64,
        augment_secs_per_sample,
        encode_secs_per_sample,
    })
}
