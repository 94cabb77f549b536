//! `nuc`: synthesize corpora, correct bias fields, detect targets and score them.
//!
//! Exit codes: 0 success, 2 invalid parameters, 3 I/O failure, 4 numerical failure.

mod maps;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use nuc_core::corpus::read_box_file;
use nuc_core::detection::{pr_curve, read_detections, write_detections, write_pr_csv};
use nuc_core::estimation::correct;
use nuc_core::losses::{br_loss, cos_sim, cos_sim_matrix, tebs_loss, BinaryMask, FeatureStack};
use nuc_core::metrics::{coeff_loss, coeff_loss_l1};
use nuc_core::pipeline::{evaluate_corrected, run_pipeline, EstimatorParams, PipelineConfig, Strategy};
use nuc_core::{
    detect, fit_blind, fit_paired, generate_corpus, load_image, match_and_score, save_image, BitDepth, Brightness,
    CoordNorm, CorpusConfig, DetectParams, Error, IoError, PrReport, Result, Sidecar,
};

#[derive(Parser)]
#[command(name = "nuc", version, about = "Polynomial bias-field correction and small-target evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of clear/degraded pairs with annotations.
    Synth(SynthArgs),
    /// Estimate and remove the bias field of one image.
    Correct(CorrectArgs),
    /// Run the top-hat detector on one image and write `x,y,w,h,score` rows.
    Detect(DetectArgs),
    /// Match detections to ground truth and report precision/recall.
    Score(ScoreArgs),
    /// Score a directory of corrected images against a corpus.
    Eval(EvalArgs),
    /// Evaluate a loss or similarity on feature maps or coefficient files.
    Loss(LossArgs),
    /// Run one detection strategy over a corpus and write a JSON report.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// JSON corpus config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples. [default: 10]
    #[arg(long)]
    count: Option<usize>,
    /// Image size as WxH. [default: 640x512]
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Polynomial degree of the bias field. [default: 3]
    #[arg(long)]
    degree: Option<usize>,
    /// Severity multiplier k in Y = C + k B. [default: 10]
    #[arg(long)]
    k: Option<f64>,
    /// Base seed; sample i uses a seed derived from (seed, i). [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinate normalization: unit-centered or pixel-raw. [default: unit-centered]
    #[arg(long)]
    coord: Option<CoordNorm>,
    /// Worker threads; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Default)]
struct EstimatorArgs {
    /// Polynomial degree of the fitted field. [default: 3]
    #[arg(long)]
    degree: Option<usize>,
    /// Coordinate normalization: unit-centered or pixel-raw. [default: unit-centered]
    #[arg(long)]
    coord: Option<CoordNorm>,
    /// Blind fit: Gaussian blur sigma in full-resolution pixels. [default: 25]
    #[arg(long)]
    blur_sigma: Option<f64>,
    /// Blind fit: Tukey reweighting passes. [default: 3]
    #[arg(long)]
    robust_iters: Option<usize>,
    /// Blind fit: skip the 2x downsampling step. [default: off]
    #[arg(long)]
    no_downsample: bool,
    /// Blind fit: set the corrected mean to this level instead of keeping the input mean. [default: keep input mean]
    #[arg(long)]
    reference_mean: Option<f64>,
}

impl EstimatorArgs {
    fn apply(&self, p: &mut EstimatorParams) {
        if let Some(d) = self.degree {
            p.degree = d;
        }
        if let Some(c) = self.coord {
            p.coord = c;
        }
        if let Some(s) = self.blur_sigma {
            p.blind.blur_sigma = s;
        }
        if let Some(n) = self.robust_iters {
            p.blind.robust_iters = n;
        }
        if self.no_downsample {
            p.blind.downsample_first = false;
        }
        if let Some(level) = self.reference_mean {
            p.blind.brightness = Brightness::Reference(level);
        }
    }
}

#[derive(Args)]
struct CorrectArgs {
    /// Degraded input image (PNG or PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Corrected output image; the extension picks PNG or PGM. Saved at 16 bits, clamped to [0, 1].
    #[arg(long)]
    out: PathBuf,
    /// Clear reference image: fit the field by paired least squares instead of blindly.
    #[arg(long)]
    paired: Option<PathBuf>,
    /// Corpus sidecar of the input; its scale/offset restore physical intensities before fitting.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Severity the emitted coefficients are divided by, so they compare with a corpus sidecar. [default: 1]
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    /// Write the fitted coefficients (sidecar schema plus residual_rms and method) here.
    #[arg(long)]
    emit_coeffs: Option<PathBuf>,
    /// JSON estimator config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args, Default)]
struct DetectorArgs {
    /// Radius of the disk structuring element. [default: 7]
    #[arg(long)]
    tophat_radius: Option<usize>,
    /// Threshold at median + k * MAD of the top-hat response. [default: 5]
    #[arg(long)]
    threshold_k: Option<f64>,
    /// Smallest component kept, in pixels. [default: 2]
    #[arg(long)]
    min_area: Option<usize>,
    /// Largest component kept, in pixels. [default: 2000]
    #[arg(long)]
    max_area: Option<usize>,
}

impl DetectorArgs {
    fn apply(&self, p: &mut DetectParams) {
        if let Some(v) = self.tophat_radius {
            p.tophat_radius = v;
        }
        if let Some(v) = self.threshold_k {
            p.threshold_k = v;
        }
        if let Some(v) = self.min_area {
            p.min_area = v;
        }
        if let Some(v) = self.max_area {
            p.max_area = v;
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Input image (PNG or PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV with header x,y,w,h,score.
    #[arg(long)]
    out: PathBuf,
    /// JSON detector config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args)]
struct ScoreArgs {
    /// Detections CSV (x,y,w,h,score).
    #[arg(long)]
    dets: PathBuf,
    /// Ground truth: an annotations.csv (image,x,y,w,h) or a bare x,y,w,h CSV.
    #[arg(long)]
    gt: PathBuf,
    /// Image id to select from an annotations file; needed when it lists more than one image.
    #[arg(long)]
    image: Option<String>,
    /// IoU needed for a match.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// JSON report path (precision, recall, counts and P-R area).
    #[arg(long)]
    report: PathBuf,
    /// Also write the P-R sweep as CSV (threshold,precision,recall; AUC footer).
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory (clear/, degraded/, meta/, annotations.csv).
    #[arg(long)]
    corpus: PathBuf,
    /// Directory of corrected images named like the corpus samples (NNNNN.png).
    #[arg(long)]
    corrected: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// IoU needed for a match.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Worker threads; the report does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LossOp {
    Tebs,
    Br,
    Cossim,
    Coeff,
}

#[derive(Args)]
struct LossArgs {
    /// tebs: mask vs. four stage maps in --a; br: stacks --a (clear) and --b (corrected);
    /// cossim: one map each in --a and --b; coeff: fitted (--a) vs. true (--b) coefficient JSON.
    #[arg(long, value_enum)]
    op: LossOp,
    /// First operand; repeat to list several map files.
    #[arg(long, num_args = 1..)]
    a: Vec<PathBuf>,
    /// Second operand; repeat to list several map files.
    #[arg(long, num_args = 1..)]
    b: Vec<PathBuf>,
    /// Binary mask (tebs), thresholded at 0.5.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// cossim: print the row-wise similarity matrix instead of the flattened scalar. [default: off]
    #[arg(long)]
    rows: bool,
    /// coeff: mean absolute instead of mean squared error. [default: off]
    #[arg(long)]
    l1: bool,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON pipeline config (strategy, corpus, report, detector, estimator, seed, iou); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// direct, blind-correct, or paired-correct (the oracle, reported as the upper bound for union). [default: blind-correct]
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Corpus directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seed recorded in the report. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// IoU needed for a match. [default: 0.5]
    #[arg(long)]
    iou: Option<f64>,
    /// Worker threads; the report does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::Os { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Param(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| IoError::Os { path: path.into(), source: e }.into())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut config: CorpusConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => CorpusConfig::default(),
    };
    if let Some(v) = args.count {
        config.count = v;
    }
    if let Some((w, h)) = args.size {
        config.scene.width = w;
        config.scene.height = h;
    }
    if let Some(v) = args.degree {
        config.scene.degree = v;
    }
    if let Some(v) = args.k {
        config.scene.k = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.coord {
        config.scene.coord = v;
    }
    generate_corpus(&config, &args.out, args.jobs)?;
    eprintln!("wrote {} samples to {}", config.count, args.out.display());
    Ok(())
}

fn correct_cmd(args: CorrectArgs) -> Result<()> {
    let mut params: EstimatorParams = match &args.config {
        Some(p) => read_config(p)?,
        None => EstimatorParams::default(),
    };
    args.estimator.apply(&mut params);
    if !(args.k > 0.0) || !args.k.is_finite() {
        return Err(Error::Param(format!("k must be positive, got {}", args.k)));
    }
    let mut y = load_image(&args.input)?;
    if let Some(meta) = &args.meta {
        y = Sidecar::read(meta)?.restore(&y);
    }
    let fit = match &args.paired {
        Some(c) => fit_paired(&y, &load_image(c)?, params.degree, params.coord)?,
        None => fit_blind(&y, params.degree, params.coord, &params.blind)?,
    };
    save_image(&correct(&y, &fit), &args.out, BitDepth::Sixteen)?;
    if let Some(path) = &args.emit_coeffs {
        let mut sidecar = fit.to_sidecar(args.k);
        sidecar.coeffs.iter_mut().for_each(|c| *c /= args.k);
        sidecar.write(path)?;
    }
    eprintln!(
        "{} fit: residual rms {:.3e}, condition {:.3e}",
        fit.method.as_str(),
        fit.residual_rms,
        fit.condition_estimate
    );
    Ok(())
}

fn detect_cmd(args: DetectArgs) -> Result<()> {
    let mut params: DetectParams = match &args.config {
        Some(p) => read_config(p)?,
        None => DetectParams::default(),
    };
    args.detector.apply(&mut params);
    let dets = detect(&load_image(&args.input)?, &params)?;
    write_detections(&args.out, &dets)?;
    eprintln!("{} detections", dets.len());
    Ok(())
}

#[derive(Serialize)]
struct ScoreReport {
    #[serde(flatten)]
    pr: PrReport,
    detections: usize,
    ground_truth: usize,
    auc: f64,
}

fn score_cmd(args: ScoreArgs) -> Result<()> {
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        return Err(Error::Param(format!("iou must lie in (0, 1], got {}", args.iou)));
    }
    let dets = read_detections(&args.dets)?;
    let mut by_image = read_box_file(&args.gt)?;
    let gts = match (&args.image, by_image.len()) {
        (Some(id), _) => by_image
            .remove(id)
            .ok_or_else(|| Error::Param(format!("image {id:?} not found in {}", args.gt.display())))?,
        (None, 0) => Vec::new(),
        (None, 1) => by_image.into_values().next().expect("one entry"),
        (None, n) => {
            return Err(Error::Param(format!(
                "{} lists {n} images; choose one with --image",
                args.gt.display()
            )))
        }
    };
    let pr = match_and_score(&dets, &gts, args.iou);
    let curve = pr_curve(&[(dets.clone(), gts.clone())], args.iou, None);
    if let Some(path) = &args.curve {
        let io = |e| IoError::Os { path: path.clone(), source: e };
        let file = std::fs::File::create(path).map_err(io)?;
        write_pr_csv(&curve, std::io::BufWriter::new(file)).map_err(io)?;
    }
    write_json(
        &args.report,
        &ScoreReport { pr, detections: dets.len(), ground_truth: gts.len(), auc: curve.auc },
    )?;
    println!("precision {:.4} recall {:.4} (tp {} fp {} fn {})", pr.precision, pr.recall, pr.tp, pr.fp, pr.fn_);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let mut params = DetectParams::default();
    args.detector.apply(&mut params);
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        return Err(Error::Param(format!("iou must lie in (0, 1], got {}", args.iou)));
    }
    let report = evaluate_corrected(&args.corpus, &args.corrected, &params, args.iou, args.jobs)?;
    report.write(&args.report)?;
    eprintln!("scored {} images", report.aggregate.images);
    Ok(())
}

fn loss_cmd(args: LossArgs) -> Result<()> {
    let need = |v: &[PathBuf], name: &str| -> Result<()> {
        if v.is_empty() {
            return Err(Error::Param(format!("--op needs --{name}")));
        }
        Ok(())
    };
    let value = match args.op {
        LossOp::Tebs => {
            need(&args.a, "a")?;
            let mask_path = args.mask.as_ref().ok_or_else(|| Error::Param("tebs needs --mask".into()))?;
            let mask = BinaryMask::from_image(&maps::read_single(&[mask_path], "mask")?);
            tebs_loss(&mask, &FeatureStack::new(maps::read_maps(&args.a)?)?)?
        }
        LossOp::Br => {
            need(&args.a, "a")?;
            need(&args.b, "b")?;
            let a = FeatureStack::new(maps::read_maps(&args.a)?)?;
            let b = FeatureStack::new(maps::read_maps(&args.b)?)?;
            br_loss(&a, &b)?
        }
        LossOp::Cossim => {
            need(&args.a, "a")?;
            need(&args.b, "b")?;
            let a = maps::read_single(&args.a, "--a")?;
            let b = maps::read_single(&args.b, "--b")?;
            if args.rows {
                let m = cos_sim_matrix(&a, &b)?;
                for row in m.row_iter() {
                    let cells: Vec<String> = row.iter().map(|v| maps::sig12(*v)).collect();
                    println!("{}", cells.join(" "));
                }
                return Ok(());
            }
            cos_sim(&a, &b)?
        }
        LossOp::Coeff => {
            need(&args.a, "a")?;
            need(&args.b, "b")?;
            let read = |v: &[PathBuf]| -> Result<_> {
                match v {
                    [p] => Sidecar::read(p)?.coeff_vector(),
                    _ => Err(Error::Param("coeff takes exactly one file per operand".into())),
                }
            };
            let (a, b) = (read(&args.a)?, read(&args.b)?);
            if args.l1 {
                coeff_loss_l1(&a, &b)?
            } else {
                coeff_loss(&a, &b)?
            }
        }
    };
    println!("{}", maps::sig12(value));
    Ok(())
}

fn pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => read_config::<PipelineConfig>(p)?,
        None => {
            let (Some(corpus), Some(report)) = (&args.corpus, &args.report) else {
                return Err(Error::Param("pipeline needs --corpus and --report (or --config)".into()));
            };
            PipelineConfig::new(Strategy::default(), corpus, report)
        }
    };
    if let Some(v) = args.strategy {
        config.strategy = v;
    }
    if let Some(v) = &args.corpus {
        config.corpus = v.clone();
    }
    if let Some(v) = &args.report {
        config.report = v.clone();
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.iou {
        config.iou = v;
    }
    args.detector.apply(&mut config.detector);
    args.estimator.apply(&mut config.estimator);
    let report = run_pipeline(&config, args.jobs)?;
    let agg = &report.aggregate;
    if let Some(pr) = agg.pr {
        eprintln!(
            "{} ({}): {} images, precision {:.4} recall {:.4}",
            report.strategy, report.label, agg.images, pr.precision, pr.recall
        );
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Param(_) => 2,
        Error::Io(_) => 3,
        Error::Numerical { .. } | Error::DegenerateBackground | Error::UndefinedGain | Error::DegenerateFeature(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Correct(a) => correct_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Loss(a) => loss_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
