//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line (written straight to stderr so it shows
//! without `--nocapture`). Heavy criteria share a lock so timings are not
//! disturbed by sibling tests.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nuc_core::biasfield::{coeff_count, sample_coeffs, AmplitudeSpec, CoeffVector, CoordNorm};
use nuc_core::detection::{detect, match_pairs, DetectParams};
use nuc_core::estimation::{correct, fit_blind, fit_paired, BlindParams, Brightness};
use nuc_core::losses::{br_loss, tebs_loss, BinaryMask, FeatureStack};
use nuc_core::metrics::{coeff_loss, psnr, region_stats, scr, scrg, ssim, ScrSpec};
use nuc_core::synthesis::{generate_scene, make_background, mix_seed, BBox, BackgroundKind, SceneConfig, SceneRecord};
use nuc_core::GrayImage;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn line(criterion: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion}: {verdict} {}", detail.as_ref());
}

fn within_budget(criterion: &str, started: Instant, budget: Duration) -> bool {
    let took = started.elapsed();
    if took > budget {
        line(&format!("{criterion} runtime"), false, format!("{took:.1?} > {budget:?}"));
        return false;
    }
    true
}

const W: usize = 640;
const H: usize = 512;
const UNIT: CoordNorm = CoordNorm::UnitCentered;

fn cloud_config(k: f64) -> SceneConfig {
    SceneConfig { k, backgrounds: vec![(BackgroundKind::CloudNoise, 1.0)], ..SceneConfig::default() }
}

#[test]
fn criterion_01_coefficient_counts() {
    let got: Vec<usize> = [2, 3, 4, 5].iter().map(|&d| coeff_count(d).unwrap()).collect();
    let pass = got == [6, 10, 15, 21];
    line("1", pass, format!("coeff_count(2..=5) = {got:?}"));
    assert!(pass);
}

#[test]
fn criterion_02_oracle_round_trip() {
    let _g = heavy();
    let started = Instant::now();
    let config = SceneConfig::default();
    let (mut ok, mut worst) = (0, 0.0f64);
    for i in 0..100 {
        let scene = generate_scene(&config, mix_seed(2, i)).unwrap();
        let fit = fit_paired(&scene.degraded, &scene.clear, 3, UNIT).unwrap();
        let r = correct(&scene.degraded, &fit);
        let err = r.data().iter().zip(scene.clear.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let db = psnr(&r, &scene.clear, 1.0).unwrap();
        worst = worst.max(err);
        if err < 1e-8 && (db.is_infinite() || db > 100.0) {
            ok += 1;
        }
    }
    let pass = ok == 100 && within_budget("2", started, Duration::from_secs(30));
    line("2", pass, format!("{ok}/100 samples, worst max|R-C| = {worst:.2e}, {:.1?}", started.elapsed()));
    assert!(pass);
}

#[test]
fn criterion_03_degree_trend() {
    let _g = heavy();
    let clear = GrayImage::filled(W, H, 0.0);
    let (mut under, mut over_ok) = (0, true);
    let mut worst_over = 0.0f64;
    for i in 0..100 {
        let truth = sample_coeffs(mix_seed(3, i), 3, &AmplitudeSpec::default()).unwrap();
        let y = nuc_core::synthesis::synthesize_degraded(&clear, &truth, 10.0, UNIT);
        let rms = |d: usize| fit_paired(&y, &clear, d, UNIT).unwrap().residual_rms;
        let (r2, r3, r4, r5) = (rms(2), rms(3), rms(4), rms(5));
        if r2 >= 100.0 * r3 {
            under += 1;
        }
        let gap = (r4 - r3).abs().max((r5 - r3).abs());
        worst_over = worst_over.max(gap);
        over_ok &= gap <= 1e-9;
    }
    let pass = under >= 95 && over_ok;
    line(
        "3",
        pass,
        format!("degree-2 underfit on {under}/100 draws; worst |rms(4|5) - rms(3)| = {worst_over:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_analytic_losses() {
    let maps = |v: f64| {
        FeatureStack::new(
            [(32, 24), (16, 12), (8, 6), (4, 3)].iter().map(|&(w, h)| GrayImage::filled(w, h, v)).collect(),
        )
        .unwrap()
    };
    let mask = BinaryMask::new(32, 24, vec![false; 32 * 24]).unwrap();
    let tebs = tebs_loss(&mask, &maps(0.5)).unwrap();
    let stack = FeatureStack::new(
        [(7, 5), (6, 4), (3, 3), (2, 2)]
            .iter()
            .map(|&(w, h)| GrayImage::from_fn(w, h, |x, y| (x as f64 + 1.3).sin() + 0.7 * (y as f64) - 0.4))
            .collect(),
    )
    .unwrap();
    let br_same = br_loss(&stack, &stack).unwrap();
    let br_neg = br_loss(&stack, &stack.map(|v| -v)).unwrap();
    let mut off = CoeffVector::zeros(3).unwrap();
    off.set(1, 1, 1.0);
    let coeff = coeff_loss(&off, &CoeffVector::zeros(3).unwrap()).unwrap();
    let pass = (tebs - std::f64::consts::LN_2).abs() <= 1e-9
        && br_same.abs() <= 1e-12
        && (br_neg - 2.0).abs() <= 1e-12
        && coeff == 0.1;
    line("4", pass, format!("tebs {tebs:.12}, br(same) {br_same:.1e}, br(neg) {br_neg:.12}, coeff {coeff}"));
    assert!(pass);
}

#[test]
fn criterion_05_metric_conformance() {
    let a = make_background(BackgroundKind::CloudNoise, 5, 64, 48);
    let shifted = a.map(|v| v + 0.1);
    let p = psnr(&a, &shifted, 1.0).unwrap();
    let s = ssim(&a, &a).unwrap();
    let bbox = BBox::new(5, 5, 2, 2);
    let patch = GrayImage::from_fn(12, 12, |x, y| {
        if bbox.contains(x, y) {
            10.0
        } else if (x + y) % 2 == 0 {
            4.0
        } else {
            6.0
        }
    });
    let spec = ScrSpec::new(bbox);
    let c = scr(&patch, &spec).unwrap();
    let g = scrg(&patch, &patch, &spec).unwrap();
    let pass = (p - 20.0).abs() <= 1e-9 && (s - 1.0).abs() <= 1e-12 && (c - 5.0).abs() <= 1e-12 && (g - 1.0).abs() <= 1e-12;
    line("5", pass, format!("psnr {p:.12}, ssim {s}, scr {c}, scrg {g}"));
    assert!(pass);
}

/// Mean brightness of clear training scenes whose seeds are disjoint from
/// every evaluation suite. Computed once, used for every k.
fn reference_level() -> f64 {
    let config = cloud_config(10.0);
    let n = 20;
    (0..n).map(|i| generate_scene(&config, mix_seed(0x7EA1, i)).unwrap().clear.mean()).sum::<f64>() / n as f64
}

struct Efficacy {
    gained: usize,
    gained_mean_preserving: usize,
    ssim_before: f64,
    ssim_after: f64,
}

fn blind_efficacy(k: f64, level: f64) -> Efficacy {
    let config = cloud_config(k);
    let reference = BlindParams { brightness: Brightness::Reference(level), ..BlindParams::default() };
    let preserving = BlindParams::default();
    let mut out = Efficacy { gained: 0, gained_mean_preserving: 0, ssim_before: 0.0, ssim_after: 0.0 };
    for i in 0..100 {
        let scene = generate_scene(&config, mix_seed(6, i)).unwrap();
        let before = psnr(&scene.degraded, &scene.clear, 1.0).unwrap();
        let r = correct(&scene.degraded, &fit_blind(&scene.degraded, 3, UNIT, &reference).unwrap());
        if psnr(&r, &scene.clear, 1.0).unwrap() >= before + 10.0 {
            out.gained += 1;
        }
        let r_pm = correct(&scene.degraded, &fit_blind(&scene.degraded, 3, UNIT, &preserving).unwrap());
        if psnr(&r_pm, &scene.clear, 1.0).unwrap() >= before + 10.0 {
            out.gained_mean_preserving += 1;
        }
        out.ssim_before += ssim(&scene.degraded, &scene.clear).unwrap() / 100.0;
        out.ssim_after += ssim(&r, &scene.clear).unwrap() / 100.0;
    }
    out
}

fn efficacy_line(criterion: &str, k: f64, level: f64, budget: Duration) -> bool {
    let started = Instant::now();
    let e = blind_efficacy(k, level);
    let pass = e.gained >= 90 && e.ssim_after > e.ssim_before && within_budget(criterion, started, budget);
    line(
        criterion,
        pass,
        format!(
            "k={k}: +10 dB on {}/100 scenes (reference brightness {level:.4}; mean-preserving: {}/100), mean SSIM {:.4} -> {:.4}, {:.1?}",
            e.gained,
            e.gained_mean_preserving,
            e.ssim_before,
            e.ssim_after,
            started.elapsed()
        ),
    );
    pass
}

#[test]
fn criterion_06_blind_efficacy() {
    let _g = heavy();
    assert!(efficacy_line("6", 10.0, reference_level(), Duration::from_secs(120)));
}

/// Targets whose background ring varies more through the bias than through
/// the scene itself.
fn bias_dominated(scene: &SceneRecord, kb: &GrayImage, bbox: &BBox) -> bool {
    let spec = ScrSpec::new(*bbox);
    let bias = region_stats(kb, &spec).unwrap().background_std;
    let clutter = region_stats(&scene.clear, &spec).unwrap().background_std;
    bias >= clutter
}

struct Ordering {
    scenes: usize,
    targets: usize,
    recall: [f64; 3],
}

/// Recall of direct / blind-corrected / oracle-corrected detection over the
/// bias-dominated targets of the first 200 scenes that contain one.
fn pipeline_ordering(k: f64) -> Ordering {
    let config = SceneConfig { k, ..SceneConfig::default() };
    let params = DetectParams::default();
    let mut hits = [0usize; 3];
    let (mut scenes, mut targets, mut i) = (0, 0, 0u64);
    while scenes < 200 {
        let scene = generate_scene(&config, mix_seed(7, i)).unwrap();
        i += 1;
        let kb = scene.scaled_bias();
        let selected: Vec<usize> =
            (0..scene.annotations.len()).filter(|&t| bias_dominated(&scene, &kb, &scene.annotations[t])).collect();
        if selected.is_empty() {
            continue;
        }
        scenes += 1;
        targets += selected.len();
        let blind = fit_blind(&scene.degraded, 3, UNIT, &BlindParams::default()).unwrap();
        let oracle = fit_paired(&scene.degraded, &scene.clear, 3, UNIT).unwrap();
        let images = [scene.degraded.clone(), correct(&scene.degraded, &blind), correct(&scene.degraded, &oracle)];
        for (s, img) in images.iter().enumerate() {
            let dets = detect(img, &params).unwrap();
            let matched: Vec<usize> = match_pairs(&dets, &scene.annotations, 0.5).into_iter().flatten().collect();
            hits[s] += selected.iter().filter(|t| matched.contains(t)).count();
        }
    }
    Ordering { scenes, targets, recall: hits.map(|h| h as f64 / targets as f64) }
}

fn ordering_line(criterion: &str, k: f64, budget: Duration) -> bool {
    let started = Instant::now();
    let o = pipeline_ordering(k);
    let [direct, blind, paired] = o.recall;
    let pass = paired - blind >= 0.05 && blind - direct >= 0.05 && within_budget(criterion, started, budget);
    line(
        criterion,
        pass,
        format!(
            "k={k}: recall direct {direct:.3}, blind-correct {blind:.3}, paired-correct {paired:.3} over {} targets in {} scenes (need gaps >= 0.05), {:.1?}",
            o.targets,
            o.scenes,
            started.elapsed()
        ),
    );
    pass
}

#[test]
fn criterion_07_pipeline_ordering() {
    let _g = heavy();
    assert!(ordering_line("7", 10.0, Duration::from_secs(300)));
}

#[test]
fn criterion_08_scrg_direction() {
    let _g = heavy();
    let started = Instant::now();
    let config = SceneConfig::default();
    let (mut selected, mut gained) = (0, 0);
    for i in 0..200 {
        let scene = generate_scene(&config, mix_seed(8, i)).unwrap();
        let kb = scene.scaled_bias();
        let fit = fit_paired(&scene.degraded, &scene.clear, 3, UNIT).unwrap();
        let r = correct(&scene.degraded, &fit);
        for b in &scene.annotations {
            if !bias_dominated(&scene, &kb, b) {
                continue;
            }
            if let Ok(g) = scrg(&scene.degraded, &r, &ScrSpec::new(*b)) {
                selected += 1;
                gained += (g >= 1.0) as usize;
            }
        }
    }
    let share = gained as f64 / selected.max(1) as f64;
    let pass = selected > 0 && share >= 0.95 && within_budget("8", started, Duration::from_secs(60));
    line("8", pass, format!("SCRG >= 1 on {gained}/{selected} bias-dominated targets ({:.1}%), {:.1?}", 100.0 * share, started.elapsed()));
    assert!(pass);
}

#[test]
fn criterion_09a_efficacy_across_k() {
    let _g = heavy();
    let level = reference_level();
    let low = efficacy_line("9 (criterion 6 at k=3)", 3.0, level, Duration::from_secs(300));
    let high = efficacy_line("9 (criterion 6 at k=12)", 12.0, level, Duration::from_secs(300));
    assert!(low && high);
}

#[test]
fn criterion_09b_ordering_across_k() {
    let _g = heavy();
    let low = ordering_line("9 (criterion 7 at k=3)", 3.0, Duration::from_secs(300));
    let high = ordering_line("9 (criterion 7 at k=12)", 12.0, Duration::from_secs(300));
    assert!(low && high);
}

fn nuc(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_nuc")).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "nuc {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn criterion_10_performance() {
    let _g = heavy();
    let config = SceneConfig::default();
    let params = BlindParams::default();
    let once = |seed: u64| {
        let started = Instant::now();
        let scene = generate_scene(&config, seed).unwrap();
        let fit = fit_blind(&scene.degraded, 3, UNIT, &params).unwrap();
        std::hint::black_box(correct(&scene.degraded, &fit));
        started.elapsed()
    };
    once(0); // builds the per-size basis caches
    let mut times: Vec<Duration> = (1..=9).map(once).collect();
    times.sort();
    let single = times[times.len() / 2];

    let dir = tempfile::tempdir().unwrap();
    nuc(&["synth", "--count", "100", "--seed", "10", "--out", "c", "--jobs", "8"], dir.path());
    let started = Instant::now();
    nuc(
        &["pipeline", "--strategy", "blind-correct", "--corpus", "c", "--report", "r.json", "--jobs", "8"],
        dir.path(),
    );
    let eval = started.elapsed();
    let pass = single < Duration::from_millis(50) && eval < Duration::from_secs(30);
    line(
        "10",
        pass,
        format!("synthesize + blind-correct median {single:.1?} (< 50 ms); 100-scene eval --jobs 8 {eval:.1?} (< 30 s)"),
    );
    assert!(pass);
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_determinism() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = |out: &str, jobs: &str| {
        nuc(&["synth", "--count", "12", "--size", "320x256", "--seed", "11", "--out", out, "--jobs", jobs], d)
    };
    synth("a", "1");
    synth("b", "1");
    synth("c", "5");
    let corpora_equal = files(&d.join("a")) == files(&d.join("b")) && files(&d.join("a")) == files(&d.join("c"));
    let mut reports_equal = true;
    for strategy in ["direct", "blind-correct", "paired-correct"] {
        let run = |name: &str, jobs: &str| {
            nuc(&["pipeline", "--strategy", strategy, "--corpus", "a", "--report", name, "--jobs", jobs], d);
            std::fs::read(d.join(name)).unwrap()
        };
        let base = run("r1.json", "1");
        reports_equal &= base == run("r2.json", "1") && base == run("r3.json", "3") && base == run("r8.json", "8");
    }
    let pass = corpora_equal && reports_equal;
    line("11", pass, format!("corpora identical across runs/jobs: {corpora_equal}; reports identical across runs/jobs: {reports_equal}"));
    assert!(pass);
}
