//! On-disk corpora:
//!
//! ```text
//! clear/NNNNN.png      16-bit clear image
//! degraded/NNNNN.png   16-bit degraded image, affinely rescaled to [0, 1]
//! meta/NNNNN.json      coefficient sidecar (includes the rescale)
//! annotations.csv      image,x,y,w,h
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biasfield::{AmplitudeSpec, CoeffVector, CoordNorm};
use crate::error::{Error, IoError, Result};
use crate::image::GrayImage;
use crate::io::{load_image, save_image, BitDepth};
use crate::synthesis::{generate_scene, mix_seed, BBox, SceneConfig, SceneRecord};

/// Coefficient sidecar. Fit reports reuse it with `residual_rms` and `method`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub degree: usize,
    pub coord: CoordNorm,
    pub coeffs: Vec<f64>,
    pub k: f64,
    /// Physical value = stored value * scale + offset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<AmplitudeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_rms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_constant: Option<f64>,
}

impl Sidecar {
    pub fn coeff_vector(&self) -> Result<CoeffVector> {
        CoeffVector::new(self.degree, self.coeffs.clone())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| IoError::os(path, e))?;
        serde_json::from_str(&text).map_err(|e| IoError::malformed(path, e.to_string()).into())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| IoError::os(path, e).into())
    }

    /// Maps stored `[0, 1]` values back to physical intensities.
    pub fn restore(&self, stored: &GrayImage) -> GrayImage {
        let (scale, offset) = (self.scale.unwrap_or(1.0), self.offset.unwrap_or(0.0));
        stored.map(|v| v * scale + offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub scene: SceneConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn sample_seed(&self, index: usize) -> u64 {
        mix_seed(self.seed, index as u64)
    }

    pub fn scene(&self, index: usize) -> Result<SceneRecord> {
        generate_scene(&self.scene, self.sample_seed(index))
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Affine map of `img` onto `[0, 1]`: returns `(stored, scale, offset)`.
pub fn rescale_unit(img: &GrayImage) -> (GrayImage, f64, f64) {
    let (lo, hi) = (img.min(), img.max());
    let scale = if hi > lo { hi - lo } else { 1.0 };
    (img.map(|v| (v - lo) / scale), scale, lo)
}

/// Writes `config.count` samples under `out`, using `jobs` worker threads.
pub fn generate_corpus(config: &CorpusConfig, out: &Path, jobs: usize) -> Result<()> {
    config.scene.validate()?;
    if config.count == 0 {
        return Err(Error::param("corpus count must be positive"));
    }
    for sub in ["clear", "degraded", "meta"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| IoError::os(&dir, e))?;
    }

    let work = |index: usize| -> Result<Vec<BBox>> {
        let scene = config.scene(index)?;
        write_sample(out, index, &scene, &config.scene.amplitude)?;
        Ok(scene.annotations)
    };
    let annotations: Vec<Vec<BBox>> = run_indexed(jobs, config.count, work)?;

    let path = out.join("annotations.csv");
    let mut wtr = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    wtr.write_record(["image", "x", "y", "w", "h"])
        .map_err(|e| csv_error(&path, e))?;
    for (index, boxes) in annotations.iter().enumerate() {
        for b in boxes {
            wtr.write_record([
                sample_id(index),
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    wtr.flush().map_err(|e| IoError::os(&path, e))?;
    Ok(())
}

fn write_sample(out: &Path, index: usize, scene: &SceneRecord, amplitude: &AmplitudeSpec) -> Result<()> {
    let id = sample_id(index);
    save_image(&scene.clear, out.join("clear").join(format!("{id}.png")), BitDepth::Sixteen)?;
    let (stored, scale, offset) = rescale_unit(&scene.degraded);
    save_image(&stored, out.join("degraded").join(format!("{id}.png")), BitDepth::Sixteen)?;
    Sidecar {
        degree: scene.coeffs.degree(),
        coord: scene.coord,
        coeffs: scene.coeffs.as_slice().to_vec(),
        k: scene.severity,
        scale: Some(scale),
        offset: Some(offset),
        amplitude: Some(*amplitude),
        background: Some(scene.background.as_str().to_string()),
        seed: Some(scene.seed),
        residual_rms: None,
        method: None,
        removed_constant: None,
    }
    .write(&out.join("meta").join(format!("{id}.json")))
}

/// Runs `f(0..n)` on a pool of `jobs` threads, returning results in index order.
pub fn run_indexed<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::param(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

pub(crate) fn csv_error(path: &Path, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(e) => IoError::os(path, e).into(),
        other => IoError::malformed(path, format!("{other:?}")).into(),
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    image: String,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

/// Reads an `image,x,y,w,h` file into boxes grouped by image id.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for row in rdr.deserialize::<AnnotationRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        out.entry(row.image)
            .or_default()
            .push(BBox::new(row.x, row.y, row.w, row.h));
    }
    Ok(out)
}

/// Reads ground-truth boxes from either an `image,x,y,w,h` annotation file or a
/// bare `x,y,w,h` file; boxes of the latter are keyed by the empty string.
pub fn read_box_file(path: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.get(0) == Some("image") {
        return read_annotations(path);
    }
    let mut boxes = Vec::new();
    for row in rdr.deserialize::<(usize, usize, usize, usize)>() {
        let (x, y, w, h) = row.map_err(|e| csv_error(path, e))?;
        boxes.push(BBox::new(x, y, w, h));
    }
    Ok(BTreeMap::from([(String::new(), boxes)]))
}

/// A sample loaded back from disk; `degraded` is in physical units.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub clear: Option<GrayImage>,
    pub degraded: GrayImage,
    pub sidecar: Sidecar,
    pub annotations: Vec<BBox>,
}

/// Read-side view of a corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    ids: Vec<String>,
    annotations: Option<BTreeMap<String, Vec<BBox>>>,
}

impl Corpus {
    /// Indexes a corpus by its `meta/*.json` files. Every listed sample must
    /// have a degraded image; missing files are reported together.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let meta = root.join("meta");
        let entries = fs::read_dir(&meta).map_err(|e| IoError::os(&meta, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| IoError::os(&meta, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        let missing: Vec<String> = ids
            .iter()
            .map(|id| root.join("degraded").join(format!("{id}.png")))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(IoError::Missing(missing).into());
        }
        let csv = root.join("annotations.csv");
        let annotations = if csv.exists() {
            Some(read_annotations(&csv)?)
        } else {
            None
        };
        Ok(Self {
            root,
            ids,
            annotations,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_annotations(&self) -> bool {
        self.annotations.is_some()
    }

    pub fn clear_path(&self, id: &str) -> PathBuf {
        self.root.join("clear").join(format!("{id}.png"))
    }

    pub fn load(&self, id: &str) -> Result<LoadedSample> {
        let sidecar = Sidecar::read(&self.root.join("meta").join(format!("{id}.json")))?;
        let stored = load_image(self.root.join("degraded").join(format!("{id}.png")))?;
        let degraded = sidecar.restore(&stored);
        let clear_path = self.clear_path(id);
        let clear = if clear_path.exists() {
            Some(load_image(&clear_path)?)
        } else {
            None
        };
        let annotations = self
            .annotations
            .as_ref()
            .and_then(|a| a.get(id).cloned())
            .unwrap_or_default();
        Ok(LoadedSample {
            id: id.to_string(),
            clear,
            degraded,
            sidecar,
            annotations,
        })
    }
}
