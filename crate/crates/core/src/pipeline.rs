//! Corpus-level evaluation of the three detection strategies.
//!
//! `direct` detects on the degraded image, `blind-correct` corrects with the
//! blind estimator first, and `paired-correct` uses the paired oracle. The
//! jointly trained "union" strategy needs a learned model; the oracle stands in
//! as its upper bound and reports say so.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::biasfield::CoordNorm;
use crate::corpus::{run_indexed, Corpus, LoadedSample};
use crate::detection::{detect, match_and_score, pr_curve, DetectParams, Detection, PrReport};
use crate::error::{Error, IoError, Result};
use crate::estimation::{correct, fit_blind, fit_paired, BlindParams, FitMethod, FitResult};
use crate::image::GrayImage;
use crate::io::load_image;
use crate::metrics::{psnr, scrg, ssim, ScrSpec};
use crate::synthesis::BBox;

/// Peak value for PSNR: images are in `[0, 1]` physical units.
pub const PSNR_PEAK: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Direct,
    #[default]
    BlindCorrect,
    PairedCorrect,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::BlindCorrect => "blind-correct",
            Strategy::PairedCorrect => "paired-correct",
        }
    }

    /// What the strategy stands for in the correction-then-detection framing.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::BlindCorrect => "separate",
            Strategy::PairedCorrect => "upper bound for union",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Strategy::Direct),
            "blind-correct" => Ok(Strategy::BlindCorrect),
            "paired-correct" => Ok(Strategy::PairedCorrect),
            _ => Err(Error::param(format!(
                "unknown strategy {s:?} (expected direct, blind-correct or paired-correct)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EstimatorParams {
    pub degree: usize,
    pub coord: CoordNorm,
    pub blind: BlindParams,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self { degree: 3, coord: CoordNorm::UnitCentered, blind: BlindParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PipelineConfig {
    #[serde(default)]
    pub strategy: Strategy,
    pub corpus: PathBuf,
    pub report: PathBuf,
    #[serde(default)]
    pub detector: DetectParams,
    #[serde(default)]
    pub estimator: EstimatorParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iou")]
    pub iou: f64,
}

fn default_iou() -> f64 {
    0.5
}

impl PipelineConfig {
    pub fn new(strategy: Strategy, corpus: impl Into<PathBuf>, report: impl Into<PathBuf>) -> Self {
        Self {
            strategy,
            corpus: corpus.into(),
            report: report.into(),
            detector: DetectParams::default(),
            estimator: EstimatorParams::default(),
            seed: 0,
            iou: default_iou(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if !(0.0..=1.0).contains(&self.iou) || self.iou == 0.0 {
            return Err(Error::param(format!("iou threshold must lie in (0, 1], got {}", self.iou)));
        }
        crate::biasfield::coeff_count(self.estimator.degree)?;
        Ok(())
    }
}

/// PSNR as JSON: a number, or the string `"inf"` for identical images.
fn ser_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub method: FitMethod,
    pub residual_rms: f64,
    pub condition_estimate: f64,
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        Self { method: f.method, residual_rms: f.residual_rms, condition_estimate: f.condition_estimate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_db")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    /// Per annotated target; `null` where the ring is flat or the input SCR is zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scrg: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scrg_mean: Option<f64>,
    pub detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr: Option<PrReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_db")]
    pub psnr_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scrg_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr: Option<PrReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// `direct`, `blind-correct`, `paired-correct`, or `external` for
    /// corrections produced elsewhere.
    pub strategy: String,
    pub label: String,
    pub corpus: String,
    pub seed: u64,
    pub iou_threshold: f64,
    pub detector: DetectParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorParams>,
    pub images: Vec<ImageRow>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Writes through a temporary file so a failed run never leaves a partial report.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.partial");
        std::fs::write(&tmp, self.to_json()).map_err(|e| IoError::os(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| IoError::os(path, e).into())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One image's contribution: its row plus what the corpus-wide P-R curve needs.
struct Scored {
    row: ImageRow,
    dets: Vec<Detection>,
    gts: Vec<BBox>,
}

fn score_image(
    sample: &LoadedSample,
    corrected: Option<&GrayImage>,
    fit: Option<FitSummary>,
    annotated: bool,
    detector: &DetectParams,
    iou: f64,
) -> Result<Scored> {
    let subject = corrected.unwrap_or(&sample.degraded);
    let (mut psnr_v, mut ssim_v, mut scrg_v) = (None, None, None);
    if let Some(r) = corrected {
        if let Some(c) = &sample.clear {
            psnr_v = Some(psnr(r, c, PSNR_PEAK)?);
            ssim_v = Some(ssim(r, c)?);
        }
        if annotated {
            let gains = sample
                .annotations
                .iter()
                .map(|b| match scrg(&sample.degraded, r, &ScrSpec::new(*b)) {
                    Ok(g) => Ok(Some(g)),
                    Err(Error::DegenerateBackground | Error::UndefinedGain) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            scrg_v = Some(gains);
        }
    }
    let dets = detect(subject, detector)?;
    let pr = annotated.then(|| match_and_score(&dets, &sample.annotations, iou));
    let scrg_mean = scrg_v.as_ref().and_then(|g| mean(g.iter().flatten().copied()));
    Ok(Scored {
        row: ImageRow {
            id: sample.id.clone(),
            psnr: psnr_v,
            ssim: ssim_v,
            scrg: scrg_v,
            scrg_mean,
            detections: dets.len(),
            pr,
            fit,
        },
        dets,
        gts: sample.annotations.clone(),
    })
}

fn aggregate(scored: Vec<Scored>, annotated: bool, iou: f64) -> (Vec<ImageRow>, Aggregate) {
    let rows: Vec<&ImageRow> = scored.iter().map(|s| &s.row).collect();
    let (pr, pr_auc) = if annotated {
        let reports: Vec<PrReport> = rows.iter().filter_map(|r| r.pr).collect();
        let pairs: Vec<(Vec<Detection>, Vec<BBox>)> =
            scored.iter().map(|s| (s.dets.clone(), s.gts.clone())).collect();
        (Some(PrReport::merge(&reports, iou)), Some(pr_curve(&pairs, iou, None).auc))
    } else {
        (None, None)
    };
    let agg = Aggregate {
        images: rows.len(),
        psnr_mean: mean(rows.iter().filter_map(|r| r.psnr)),
        ssim_mean: mean(rows.iter().filter_map(|r| r.ssim)),
        scrg_mean: mean(
            rows.iter()
                .filter_map(|r| r.scrg.as_ref())
                .flat_map(|g| g.iter().flatten().copied()),
        ),
        pr,
        pr_auc,
    };
    (scored.into_iter().map(|s| s.row).collect(), agg)
}

/// Runs one strategy over a corpus. Rows follow corpus index order for any `jobs`.
pub fn evaluate(config: &PipelineConfig, jobs: usize) -> Result<EvalReport> {
    config.validate()?;
    let corpus = Corpus::open(&config.corpus)?;
    if config.strategy == Strategy::PairedCorrect {
        let missing: Vec<String> = corpus
            .ids()
            .iter()
            .map(|id| corpus.clear_path(id))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(IoError::Missing(missing).into());
        }
    }
    let annotated = corpus.has_annotations();
    let est = &config.estimator;
    let scored = run_indexed(jobs, corpus.len(), |i| {
        let sample = corpus.load(&corpus.ids()[i])?;
        let fit = match config.strategy {
            Strategy::Direct => None,
            Strategy::BlindCorrect => Some(fit_blind(&sample.degraded, est.degree, est.coord, &est.blind)?),
            Strategy::PairedCorrect => {
                let clear = sample.clear.as_ref().expect("checked above");
                Some(fit_paired(&sample.degraded, clear, est.degree, est.coord)?)
            }
        };
        let corrected = fit.as_ref().map(|f| correct(&sample.degraded, f));
        score_image(
            &sample,
            corrected.as_ref(),
            fit.as_ref().map(FitSummary::from),
            annotated,
            &config.detector,
            config.iou,
        )
    })?;
    let (images, aggregate) = aggregate(scored, annotated, config.iou);
    Ok(EvalReport {
        strategy: config.strategy.as_str().into(),
        label: config.strategy.label().into(),
        corpus: config.corpus.display().to_string(),
        seed: config.seed,
        iou_threshold: config.iou,
        detector: config.detector,
        estimator: (config.strategy != Strategy::Direct).then_some(*est),
        images,
        aggregate,
    })
}

/// [`evaluate`] and write the report to `config.report`.
pub fn run_pipeline(config: &PipelineConfig, jobs: usize) -> Result<EvalReport> {
    let report = evaluate(config, jobs)?;
    report.write(&config.report)?;
    Ok(report)
}

fn corrected_path(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "pgm"].iter().map(|ext| dir.join(format!("{id}.{ext}"))).find(|p| p.exists())
}

/// Scores externally corrected images (`DIR/NNNNN.png` or `.pgm`) against a corpus.
pub fn evaluate_corrected(
    corpus_dir: &Path,
    corrected_dir: &Path,
    detector: &DetectParams,
    iou: f64,
    jobs: usize,
) -> Result<EvalReport> {
    detector.validate()?;
    let corpus = Corpus::open(corpus_dir)?;
    let paths: Vec<Option<PathBuf>> = corpus.ids().iter().map(|id| corrected_path(corrected_dir, id)).collect();
    let missing: Vec<String> = corpus
        .ids()
        .iter()
        .zip(&paths)
        .filter(|(_, p)| p.is_none())
        .map(|(id, _)| corrected_dir.join(format!("{id}.png")).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(IoError::Missing(missing).into());
    }
    let annotated = corpus.has_annotations();
    let scored = run_indexed(jobs, corpus.len(), |i| {
        let sample = corpus.load(&corpus.ids()[i])?;
        let r = load_image(paths[i].as_ref().expect("checked above"))?;
        sample.degraded.ensure_same_dims(&r)?;
        score_image(&sample, Some(&r), None, annotated, detector, iou)
    })?;
    let (images, aggregate) = aggregate(scored, annotated, iou);
    Ok(EvalReport {
        strategy: "external".into(),
        label: "separate".into(),
        corpus: corpus_dir.display().to_string(),
        seed: 0,
        iou_threshold: iou,
        detector: *detector,
        estimator: None,
        images,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::synthesis::SceneConfig;

    fn small_corpus(dir: &Path, k: f64) {
        let config = CorpusConfig {
            count: 4,
            seed: 3,
            scene: SceneConfig { width: 128, height: 96, k, ..SceneConfig::default() },
        };
        generate_corpus(&config, dir, 1).unwrap();
    }

    #[test]
    fn strategy_names() {
        for s in [Strategy::Direct, Strategy::BlindCorrect, Strategy::PairedCorrect] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!(Strategy::PairedCorrect.label(), "upper bound for union");
        assert!("union".parse::<Strategy>().is_err());
    }

    #[test]
    fn direct_on_clean_corpus_has_no_psnr() {
        let dir = tempfile::tempdir().unwrap();
        small_corpus(dir.path(), 0.0);
        let cfg = PipelineConfig::new(Strategy::Direct, dir.path(), dir.path().join("r.json"));
        let report = evaluate(&cfg, 1).unwrap();
        assert_eq!(report.images.len(), 4);
        assert!(report.images.iter().all(|r| r.psnr.is_none() && r.scrg.is_none() && r.pr.is_some()));
        assert!(report.aggregate.psnr_mean.is_none());
        assert!(report.aggregate.pr.is_some());
        assert!(!report.to_json().contains("\"psnr\""));
    }

    #[test]
    fn paired_round_trip_is_near_lossless() {
        let dir = tempfile::tempdir().unwrap();
        small_corpus(dir.path(), 10.0);
        let cfg = PipelineConfig::new(Strategy::PairedCorrect, dir.path(), dir.path().join("r.json"));
        let report = run_pipeline(&cfg, 1).unwrap();
        assert!(report.aggregate.psnr_mean.unwrap() > 90.0, "{:?}", report.aggregate);
        assert_eq!(report.label, "upper bound for union");
        let text = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
        assert_eq!(text, report.to_json());
    }

    #[test]
    fn rows_independent_of_jobs() {
        let dir = tempfile::tempdir().unwrap();
        small_corpus(dir.path(), 10.0);
        let cfg = PipelineConfig::new(Strategy::BlindCorrect, dir.path(), dir.path().join("r.json"));
        let a = evaluate(&cfg, 1).unwrap().to_json();
        let b = evaluate(&cfg, 3).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        small_corpus(dir.path(), 10.0);
        std::fs::remove_file(dir.path().join("clear/00001.png")).unwrap();
        std::fs::remove_file(dir.path().join("clear/00002.png")).unwrap();
        let report = dir.path().join("r.json");
        let cfg = PipelineConfig::new(Strategy::PairedCorrect, dir.path(), &report);
        match run_pipeline(&cfg, 1) {
            Err(Error::Io(IoError::Missing(list))) => assert_eq!(list.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(!report.exists());
    }

    #[test]
    fn external_corrections_are_scored() {
        let dir = tempfile::tempdir().unwrap();
        small_corpus(dir.path(), 0.0);
        // With k = 0 the clear images are already the ideal corrections.
        let report = evaluate_corrected(dir.path(), &dir.path().join("clear"), &DetectParams::default(), 0.5, 1).unwrap();
        assert!(report.images.iter().all(|r| r.psnr.is_some()));
        assert!(evaluate_corrected(dir.path(), &dir.path().join("nope"), &DetectParams::default(), 0.5, 1).is_err());
    }

    #[test]
    fn inf_psnr_serializes_as_string() {
        let row = ImageRow {
            id: "x".into(),
            psnr: Some(f64::INFINITY),
            ssim: Some(1.0),
            scrg: None,
            scrg_mean: None,
            detections: 0,
            pr: None,
            fit: None,
        };
        assert!(serde_json::to_string(&row).unwrap().contains("\"psnr\":\"inf\""));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"corpus": "c", "report": "r.json"}"#).unwrap();
        assert_eq!(cfg, PipelineConfig::new(Strategy::BlindCorrect, "c", "r.json"));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"corpus": "c", "report": "r", "bogus": 1}"#).is_err());
        let bad = PipelineConfig { iou: 0.0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
