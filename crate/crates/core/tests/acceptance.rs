//! Acceptance criteria. Each test writes one `[PASS]` or `[FAIL]` line to
//! stdout (bypassing the harness capture) and then asserts.
//!
//! Run with `cargo test -p flowsynth-core --test acceptance`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use flowsynth_core::augment::{crop, erase, flip, resize, scale, AugmentConfig, Region};
use flowsynth_core::io::{
    decode_flo, encode_flo, read_flo, read_kitti_png, write_flo, write_image_png, write_kitti_png, FlowFormat,
    MANIFEST_FILE,
};
use flowsynth_core::metrics::{audit_parts, photometric_audit, AuditThresholds, FlowErrorStats, OutlierRule};
use flowsynth_core::pipeline::{bench, draw_pair, generate_dataset, BenchConfig, RunConfig};
use flowsynth_core::rng::{sample_seed, stage_rng, Stage};
use flowsynth_core::scene::{
    composite_scene, synthesize_background, generate_sample, render_layer, BackgroundSpec, LayerKind,
    LayerSpec, SceneSample, ScenePlan, SynthesisConfig,
};
use flowsynth_core::segmentation::SegmentationStack;
use flowsynth_core::synthetic::procedural_image;
use flowsynth_core::tps::{fit_tps, sample_control_grid, ControlGrid, ControlNoise, TpsWarp, DEFAULT_REGULARIZATION};
use flowsynth_core::{par, FlowField, Image, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Default output size of `generate`.
const H: usize = 544;
const W: usize = 1280;

fn report(name: &str, pass: bool, detail: String) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

/// Default-size sources with their segmentation, shared by the tests that
/// synthesize at the default config.
struct Sources {
    images: Vec<Image>,
    stacks: Vec<SegmentationStack>,
}

fn sources() -> &'static Sources {
    static SOURCES: OnceLock<Sources> = OnceLock::new();
    SOURCES.get_or_init(|| {
        let cfg = SynthesisConfig::default();
        let images: Vec<Image> = (0..4).map(|i| procedural_image(H, W, 1000 + i).unwrap()).collect();
        let stacks = par::map_slice(&images, |im| {
            SegmentationStack::compute(im, &cfg.component_counts, &cfg.slic).unwrap()
        });
        Sources { images, stacks }
    })
}

fn synthesize(cfg: &SynthesisConfig, global_seed: u64, index: usize) -> SceneSample {
    let s = sources();
    let seed = sample_seed(global_seed, index as u64);
    let (src, aux) = draw_pair(seed, s.images.len());
    generate_sample(&s.images[src], &s.images[aux], &s.stacks[src], cfg, seed).unwrap()
}

#[test]
fn ground_truth_exactness() {
    let n = 200;
    let cfg = SynthesisConfig::default();
    let thresholds = AuditThresholds::default();
    let t = Instant::now();
    let reports = par::map_range(n, |i| photometric_audit(&synthesize(&cfg, 2024, i), &thresholds).unwrap());
    let passed = reports.iter().filter(|r| r.passed).count();
    let worst_mean = reports.iter().map(|r| r.mean).fold(0.0, f64::max);
    let worst_p99 = reports.iter().map(|r| r.p99).fold(0.0, f64::max);
    report(
        "ground-truth exactness",
        passed == n,
        format!(
            "{passed}/{n} samples at {W}x{H} pass (worst mean {worst_mean:.4} <= 0.02, worst p99 {worst_p99:.4} <= 0.1) in {:.0} s",
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn tps_correctness() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_interp, mut worst_kernel) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let l = 3 + i % 3;
        let grid = sample_control_grid(H, W, l, 25.0, ControlNoise::Gaussian, &mut rng).unwrap();
        for reg in [0.0, DEFAULT_REGULARIZATION] {
            let warp = fit_tps(&grid, reg).unwrap();
            for (s, t) in grid.source_points.iter().zip(&grid.target_points) {
                let p = warp.apply(*s);
                worst_interp = worst_interp.max((p[0] - t[0]).abs()).max((p[1] - t[1]).abs());
            }
        }

        // targets related to sources by an affine map
        let a = [
            [rng.random_range(0.8..1.2), rng.random_range(-0.2..0.2), rng.random_range(-40.0..40.0)],
            [rng.random_range(-0.2..0.2), rng.random_range(0.8..1.2), rng.random_range(-40.0..40.0)],
        ];
        let mut affine = ControlGrid::regular(H, W, l).unwrap();
        affine.target_points = affine
            .source_points
            .iter()
            .map(|&[x, y]| [a[0][0] * x + a[0][1] * y + a[0][2], a[1][0] * x + a[1][1] * y + a[1][2]])
            .collect();
        let warp = fit_tps(&affine, DEFAULT_REGULARIZATION).unwrap();
        for w in warp.kernel_weights() {
            worst_kernel = worst_kernel.max(w[0].abs()).max(w[1].abs());
        }
    }
    report(
        "tps correctness",
        worst_interp <= 1e-4 && worst_kernel < 1e-6,
        format!(
            "1000 grids, L in 3..=5, regularization 0 and default: max control-point error {worst_interp:.2e} px (<= 1e-4), max affine kernel weight {worst_kernel:.2e} (< 1e-6) in {:.1} s",
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn flow_composition_with_delta() {
    let (h, w) = (48, 96);
    let src = procedural_image(h, w, 21).unwrap();
    // a background unrelated to the layer texture, so a wrong layer flow
    // cannot land on matching pixels
    let bg = synthesize_background(
        &procedural_image(h, w, 22).unwrap(),
        &BackgroundSpec {
            warp1: TpsWarp::identity(h, w).unwrap(),
            warp0: TpsWarp::identity(h, w).unwrap(),
            shift: [0.0, 0.0],
        },
    )
    .unwrap();
    let mask = Mask::from_fn(h, w, |x, y| ((10..50).contains(&x) && (8..40).contains(&y)) as u8 as f32).unwrap();
    let spec = LayerSpec {
        mask,
        kind: LayerKind::Opaque,
        warp1: TpsWarp::identity(h, w).unwrap(),
        warp0: TpsWarp::identity(h, w).unwrap(),
        placement0: [0.0, 0.0],
        placement1: [20.0, 0.0],
        depth_rank: 0,
    };
    let render = render_layer(&src, &spec).unwrap();
    let sample = composite_scene(&bg, &[(spec, render)]).unwrap();
    let thresholds = AuditThresholds::default();
    let corrected = photometric_audit(&sample, &thresholds).unwrap();

    // the literal composition drops delta inside the layer; with identity
    // warps that leaves zero flow there
    let literal = FlowField::from_fn(h, w, |x, y| {
        if sample.depth.frame0[y * w + x] == 1 {
            [0.0, 0.0]
        } else {
            sample.flow.get(x, y)
        }
    })
    .unwrap();
    let literal =
        audit_parts(&sample.frame0, &sample.frame1, &literal, &sample.occlusion, &sample.shadow_region, &thresholds)
            .unwrap();
    let inside = sample.flow.get(30, 24);
    report(
        "flow composition with delta",
        corrected.passed && !literal.passed && inside == [20.0, 0.0],
        format!(
            "delta (20, 0): corrected flow mean {:.4} ({}), literal flow mean {:.4} ({}), layer flow {:?}",
            corrected.mean,
            if corrected.passed { "passes" } else { "fails" },
            literal.mean,
            if literal.passed { "passes" } else { "fails" },
            inside
        ),
    );
}

#[test]
fn shadow_invariance() {
    let cfg = SynthesisConfig {
        shadow_prob: 1.0,
        ..SynthesisConfig::default()
    };
    let s = sources();
    let results = par::map_range(50, |i| {
        let seed = sample_seed(77, i as u64);
        let (src, aux) = draw_pair(seed, s.images.len());
        let sample = generate_sample(&s.images[src], &s.images[aux], &s.stacks[src], &cfg, seed).unwrap();
        // rebuild the background flow from the recorded plan; with only
        // shadow layers nothing is cut out of the source
        let plan = sample.provenance.plan.as_ref().unwrap();
        let bg_spec = BackgroundSpec {
            warp1: fit_tps(&plan.background.warp1, cfg.tps_regularization).unwrap(),
            warp0: fit_tps(&plan.background.warp0, cfg.tps_regularization).unwrap(),
            shift: plan.background.shift,
        };
        let bg = flowsynth_core::scene::synthesize_background_with_stride(&s.images[src], &bg_spec, cfg.warp_stride)
            .unwrap();
        let mut checked = 0usize;
        let mut equal = true;
        for (i, (a, b)) in sample.flow.vectors().iter().zip(bg.flow.vectors()).enumerate() {
            if sample.shadow_region.data()[i] > 0.0 {
                checked += 1;
                equal &= a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits();
            }
        }
        (equal, checked, plan.layers.iter().all(|l| l.kind.is_shadow()))
    });
    let ok = results.iter().filter(|r| r.0 && r.2).count();
    let pixels: usize = results.iter().map(|r| r.1).sum();
    report(
        "shadow invariance",
        ok == results.len() && pixels > 0,
        format!("{ok}/50 samples bit-equal to the background flow over {pixels} shadow pixels"),
    );
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[test]
fn distribution_conformance() {
    let cfg = SynthesisConfig::default();
    let draws = 10_000;
    let mut n_counts = BTreeMap::new();
    let (mut m_lo, mut m_hi) = (usize::MAX, 0);
    let mut grid_sizes = BTreeMap::new();
    let (mut control, mut shifts) = (Vec::new(), Vec::new());
    let (mut layers, mut shadows) = (0usize, 0usize);
    for i in 0..draws {
        let plan = ScenePlan::draw(&cfg, H, W, &mut stage_rng(sample_seed(5, i), Stage::Plan)).unwrap();
        *n_counts.entry(plan.layers.len()).or_insert(0usize) += 1;
        let mut grids = vec![&plan.background.warp1, &plan.background.warp0];
        shifts.extend(plan.background.shift);
        for l in &plan.layers {
            m_lo = m_lo.min(l.target_size);
            m_hi = m_hi.max(l.target_size);
            grids.push(&l.warp1);
            grids.push(&l.warp0);
            shifts.extend(l.delta);
            layers += 1;
            shadows += l.kind.is_shadow() as usize;
        }
        for g in grids {
            *grid_sizes.entry(g.grid_size).or_insert(0usize) += 1;
            control.extend(g.displacements().flat_map(|d| d));
        }
    }

    // chi-square against the uniform law on 8..=14
    let expected = draws as f64 / 7.0;
    let chi2: f64 = (8..=14)
        .map(|k| (*n_counts.get(&k).unwrap_or(&0) as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(6.0).unwrap().cdf(chi2);
    let n_in_range = n_counts.keys().all(|k| (8..=14).contains(k));
    let l_in_range = grid_sizes.keys().all(|k| (3..=5).contains(k)) && grid_sizes.len() == 3;
    let m_ok = m_lo >= 6000 && m_hi <= 50000;
    let control_std = std_dev(&control);
    let shift_std = std_dev(&shifts);
    let shadow_rate = shadows as f64 / layers as f64;
    report(
        "distribution conformance",
        n_in_range
            && p > 0.01
            && m_ok
            && l_in_range
            && (control_std - 25.0).abs() <= 1.0
            && (shift_std - 30.0).abs() <= 1.0
            && (shadow_rate - 0.2).abs() <= 0.02,
        format!(
            "{draws} draws: N chi2 {chi2:.2} p {p:.3} (> 0.01), m in [{m_lo}, {m_hi}], L sizes {:?}, control std {control_std:.3}, shift std {shift_std:.3}, shadow rate {shadow_rate:.4}",
            grid_sizes.keys().collect::<Vec<_>>()
        ),
    );
}

/// Straight per-pixel loops written independently of the library.
fn brute_force(pred: &FlowField, gt: &FlowField, valid: &Mask, either: bool) -> (f64, f64) {
    let (h, w) = gt.dims();
    let (mut n, mut sum, mut out) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if valid.get(x, y) < 0.5 {
                continue;
            }
            let p = pred.get(x, y);
            let g = gt.get(x, y);
            let du = p[0] as f64 - g[0] as f64;
            let dv = p[1] as f64 - g[1] as f64;
            let e = (du * du + dv * dv).sqrt();
            let mag = ((g[0] as f64).powi(2) + (g[1] as f64).powi(2)).sqrt();
            let bad = if either {
                e > 3.0 || e > 0.05 * mag
            } else {
                e > 3.0 && e > 0.05 * mag
            };
            n += 1.0;
            sum += e;
            out += bad as u8 as f64;
        }
    }
    (sum / n, 100.0 * out / n)
}

#[test]
fn metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let gt_scale = rng.random_range(0.5..40.0);
        let err_scale = rng.random_range(0.1..8.0);
        let keep = rng.random_range(0.3..1.0);
        let gt: Vec<[f32; 2]> = (0..32 * 32)
            .map(|_| [rng.random_range(-gt_scale..gt_scale), rng.random_range(-gt_scale..gt_scale)])
            .collect();
        let pred: Vec<[f32; 2]> = gt
            .iter()
            .map(|g| [g[0] + rng.random_range(-err_scale..err_scale), g[1] + rng.random_range(-err_scale..err_scale)])
            .collect();
        let valid: Vec<f32> = (0..32 * 32).map(|_| rng.random_bool(keep) as u8 as f32).collect();
        let gt = FlowField::from_vectors(32, 32, gt).unwrap();
        let pred = FlowField::from_vectors(32, 32, pred).unwrap();
        let valid = Mask::from_data(32, 32, valid).unwrap();
        for (rule, either) in [(OutlierRule::Both, false), (OutlierRule::Either, true)] {
            let s = FlowErrorStats::compute(&pred, &gt, &valid, rule).unwrap();
            let (epe, f1) = brute_force(&pred, &gt, &valid, either);
            worst = worst.max((s.epe().unwrap() - epe).abs()).max((s.f1_all().unwrap() - f1).abs());
        }
    }

    // quarter-pixel ground truth keeps every sum exact
    let gt: Vec<[f32; 2]> = (0..32 * 32)
        .map(|_| [rng.random_range(-40..40) as f32 * 0.25, rng.random_range(-40..40) as f32 * 0.25])
        .collect();
    let pred: Vec<[f32; 2]> = gt.iter().map(|g| [g[0] + 3.0, g[1] + 4.0]).collect();
    let all = Mask::filled(32, 32, 1.0).unwrap();
    let offset_epe = flowsynth_core::metrics::epe(
        &FlowField::from_vectors(32, 32, pred).unwrap(),
        &FlowField::from_vectors(32, 32, gt).unwrap(),
        &all,
    )
    .unwrap();
    report(
        "metrics oracle",
        worst <= 1e-6 && offset_epe == 5.0,
        format!("100 fixtures, max deviation from brute force {worst:.2e} (<= 1e-6), (3, 4) offset EPE {offset_epe}"),
    );
}

#[test]
fn format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut flo_ok, mut worst_kitti, mut valid_ok) = (0, 0.0f32, true);
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..48), rng.random_range(1..64));
        let bound = [1.0f32, 30.0, 511.9][i % 3];
        let v: Vec<[f32; 2]> = (0..h * w)
            .map(|_| [rng.random_range(-bound..bound), rng.random_range(-bound..bound)])
            .collect();
        let flow = FlowField::from_vectors(h, w, v).unwrap();

        let path = dir.path().join("f.flo");
        write_flo(&flow, &path).unwrap();
        let back = read_flo(&path).unwrap();
        let mem = decode_flo(&encode_flo(&flow).unwrap()).unwrap();
        let bits = |f: &FlowField| f.vectors().iter().flat_map(|v| [v[0].to_bits(), v[1].to_bits()]).collect::<Vec<_>>();
        if bits(&back) == bits(&flow) && bits(&mem) == bits(&flow) && back.dims() == (h, w) {
            flo_ok += 1;
        }

        let path = dir.path().join("f.png");
        write_kitti_png(&flow, &Mask::filled(h, w, 1.0).unwrap(), &path).unwrap();
        let (kf, kv) = read_kitti_png(&path).unwrap();
        valid_ok &= kv.count_set() == h * w && kf.dims() == (h, w);
        for (a, b) in kf.vectors().iter().zip(flow.vectors()) {
            worst_kitti = worst_kitti.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    report(
        "format round trips",
        flo_ok == 100 && worst_kitti <= 1.0 / 128.0 && valid_ok,
        format!("{flo_ok}/100 .flo bit-identical, KITTI max error {worst_kitti:.6} px (<= {:.6})", 1.0 / 128.0),
    );
}

fn file_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn determinism_and_parallel_equivalence() {
    let root = tempfile::tempdir().unwrap();
    let input = root.path().join("images");
    std::fs::create_dir(&input).unwrap();
    for (i, img) in sources().images.iter().take(3).enumerate() {
        write_image_png(img, &input.join(format!("src_{i}.png"))).unwrap();
    }
    let run = |name: &str, workers: usize| {
        let out = root.path().join(name);
        let cfg = RunConfig {
            input: input.clone(),
            output: out.clone(),
            count: 8,
            seed: 31,
            workers,
            formats: vec![FlowFormat::Flo, FlowFormat::Kitti],
            cache_dir: Some(root.path().join("cache")),
            ..RunConfig::default()
        };
        let summary = generate_dataset(&cfg).unwrap();
        assert!(summary.failed.is_empty());
        file_tree(&out)
    };
    let one = run("w1", 1);
    let eight = run("w8", 8);
    let again = run("w1b", 1);
    let differing: Vec<_> = one
        .keys()
        .chain(eight.keys())
        .filter(|k| one.get(*k) != eight.get(*k))
        .cloned()
        .collect();
    report(
        "determinism and parallel equivalence",
        differing.is_empty() && one == again && one.contains_key(Path::new(MANIFEST_FILE)) && one.len() == 1 + 8 * 6,
        format!(
            "{} files byte-identical between 1 and 8 workers and across reruns; differing: {differing:?}",
            one.len()
        ),
    );
}

#[test]
fn throughput() {
    let r = bench(&BenchConfig::default()).unwrap();
    report(
        "throughput",
        r.samples_per_sec_per_core >= 2.0,
        format!(
            "{:.2} samples/s/core (>= 2) at {}x{} over {} samples on {} core(s); segmentation {:.2} s/source precomputed",
            r.samples_per_sec_per_core, r.size.width, r.size.height, r.samples, r.cores, r.segmentation_secs_per_source
        ),
    );
}

fn flow_mean_abs_diff(a: &FlowField, b: &FlowField) -> f64 {
    let sum: f64 = a
        .vectors()
        .iter()
        .zip(b.vectors())
        .map(|(p, q)| (p[0] as f64 - q[0] as f64).abs() + (p[1] as f64 - q[1] as f64).abs())
        .sum();
    sum / (2 * a.vectors().len()) as f64
}

fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

#[test]
fn augmentation_involutions() {
    let cfg = SynthesisConfig::default();
    let range = AugmentConfig::default().scale_range;
    let results = par::map_range(100, |i| {
        let s = synthesize(&cfg, 4242, i);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let flips = [(true, false), (false, true), (true, true)]
            .iter()
            .all(|&(h, v)| flip(flip(s.clone(), h, v), h, v) == s);

        // scale by f and by 1/f, each resized back to the original size
        let f = log_uniform(&mut rng, range);
        let (h, w) = s.dims();
        let round_trip = |a: f64| {
            let rt = resize(scale(s.clone(), a).unwrap(), h, w).unwrap();
            flow_mean_abs_diff(&rt.flow, &s.flow)
        };
        let (up, down) = (round_trip(f.max(1.0 / f)), round_trip(f.min(1.0 / f)));

        let (ch, cw) = (rng.random_range(h / 4..=h), rng.random_range(w / 4..=w));
        let window = Region {
            x: rng.random_range(0..=w - cw),
            y: rng.random_range(0..=h - ch),
            width: cw,
            height: ch,
        };
        let cropped = crop(s.clone(), window).unwrap();
        let before = s.occlusion.crop(window.x, window.y, cw, ch).unwrap();
        let crop_monotone = before
            .data()
            .iter()
            .zip(cropped.occlusion.data())
            .all(|(&a, &b)| b >= a);

        let (eh, ew) = (rng.random_range(1..=h / 3), rng.random_range(1..=w / 3));
        let rect = Region {
            x: rng.random_range(0..=w - ew),
            y: rng.random_range(0..=h - eh),
            width: ew,
            height: eh,
        };
        let erased = erase(s.clone(), rect, true).unwrap();
        let erase_monotone = s
            .occlusion
            .data()
            .iter()
            .zip(erased.occlusion.data())
            .all(|(&a, &b)| b >= a);
        (flips, f.max(1.0 / f), up, down, crop_monotone && erase_monotone)
    });
    let flips = results.iter().filter(|r| r.0).count();
    let monotone = results.iter().filter(|r| r.4).count();
    let up_ok = results.iter().filter(|r| r.2 <= 0.1).count();
    let down_ok = results.iter().filter(|r| r.3 <= 0.1).count();
    let worst_up = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let mean_down = results.iter().map(|r| r.3).sum::<f64>() / results.len() as f64;
    let worst_down = results.iter().max_by(|a, b| a.3.total_cmp(&b.3)).unwrap();
    report(
        "augmentation involutions",
        flips == 100 && monotone == 100 && up_ok == 100 && down_ok == 100,
        format!(
            "flip twice bit-exact {flips}/100, crop and erase monotone {monotone}/100, scale round trip <= 0.1 px: upscale first {up_ok}/100 (worst {worst_up:.4}), downscale first {down_ok}/100 (mean {mean_down:.4}, worst {:.4} at 1/{:.3})",
            worst_down.3, worst_down.1
        ),
    );
}
