//! Classical small-target detector (white top-hat + robust threshold) and
//! precision/recall scoring against annotation boxes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoError, Result};
use crate::image::GrayImage;
use crate::synthesis::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Peak top-hat response of the component over the image's maximum response.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DetectParams {
    pub tophat_radius: usize,
    pub threshold_k: f64,
    pub min_area: usize,
    pub max_area: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self { tophat_radius: 7, threshold_k: 5.0, min_area: 2, max_area: 2000 }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if self.tophat_radius == 0 {
            return Err(Error::param("tophat-radius must be at least 1"));
        }
        if !(self.threshold_k >= 0.0) || !self.threshold_k.is_finite() {
            return Err(Error::param("threshold-k must be finite and non-negative"));
        }
        if self.min_area == 0 || self.min_area > self.max_area {
            return Err(Error::param("need 1 <= min-area <= max-area"));
        }
        Ok(())
    }
}

/// Half-widths of the disk rows, indexed by `dy + r`.
fn disk_spans(r: usize) -> Vec<usize> {
    let r2 = (r * r) as isize;
    (-(r as isize)..=r as isize)
        .map(|dy| {
            let mut h = 0;
            while ((h + 1) * (h + 1)) as isize + dy * dy <= r2 {
                h += 1;
            }
            h
        })
        .collect()
}

/// Sliding extreme over `[x - h, x + h]` clipped to the row (van Herk /
/// Gil-Werman). `padded` holds the row with `h` pad values on each side;
/// `fwd` and `bwd` are scratch of the same length.
fn sliding_extreme<F: Fn(f64, f64) -> f64>(
    padded: &[f64],
    h: usize,
    pick: F,
    fwd: &mut [f64],
    bwd: &mut [f64],
    out: &mut [f64],
) {
    let win = 2 * h + 1;
    let len = padded.len();
    fwd.copy_from_slice(padded);
    bwd.copy_from_slice(padded);
    for start in (0..len).step_by(win) {
        let end = (start + win).min(len);
        for i in start + 1..end {
            fwd[i] = pick(fwd[i - 1], padded[i]);
        }
        for i in (start..end - 1).rev() {
            bwd[i] = pick(bwd[i + 1], padded[i]);
        }
    }
    for (x, o) in out.iter_mut().enumerate() {
        *o = pick(bwd[x], fwd[x + win - 1]);
    }
}

/// Grey-level erosion (`pick = min`) or dilation (`pick = max`) with a disk;
/// pixels outside the image are ignored.
fn morph<F: Fn(f64, f64) -> f64 + Copy>(img: &GrayImage, r: usize, pick: F, pad: f64) -> GrayImage {
    let (w, h) = img.dims();
    let spans = disk_spans(r);
    let mut distinct: Vec<usize> = spans.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let kind: Vec<usize> = spans.iter().map(|hw| distinct.binary_search(hw).expect("listed")).collect();
    // Each source row's 1-D extremes are pushed into the output rows whose
    // disk covers it, so only one row of line results is live at a time.
    let mut lines = vec![vec![0.0; w]; distinct.len()];
    let mut padded = vec![pad; w + 2 * r];
    let (mut fwd, mut bwd) = (padded.clone(), padded.clone());
    let mut out = vec![pad; w * h];
    for (sy, row) in img.rows().enumerate() {
        for (line, &hw) in lines.iter_mut().zip(&distinct) {
            if hw == 0 {
                line.copy_from_slice(row);
                continue;
            }
            let n = w + 2 * hw;
            padded[..n].fill(pad);
            padded[hw..hw + w].copy_from_slice(row);
            sliding_extreme(&padded[..n], hw, pick, &mut fwd[..n], &mut bwd[..n], line);
        }
        for (i, &k) in kind.iter().enumerate() {
            // Output row y sees source row sy at offset dy = sy - y = i - r.
            let y = sy as isize + r as isize - i as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            let y = y as usize;
            for (a, &v) in out[y * w..(y + 1) * w].iter_mut().zip(&lines[k]) {
                *a = pick(*a, v);
            }
        }
    }
    GrayImage::new(w, h, out).expect("same dims")
}

/// `img - opening(img)` with a disk of radius `r`.
pub fn white_tophat(img: &GrayImage, r: usize) -> GrayImage {
    let opened = morph(&morph(img, r, f64::min, f64::INFINITY), r, f64::max, f64::NEG_INFINITY);
    img.zip_map(&opened, |a, o| (a - o).max(0.0)).expect("same dims")
}

/// Median by selection; averages the two middle values for even lengths.
fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let (lower, mid, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    let mid = *mid;
    if n % 2 == 1 {
        mid
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + mid)
    }
}

/// `median + k * MAD` of the response. When more than half the pixels share
/// the median the MAD vanishes; the population standard deviation then stands
/// in for it.
pub fn robust_threshold(response: &[f64], k: f64) -> f64 {
    let mut v = response.to_vec();
    let med = median(&mut v);
    v.iter_mut().for_each(|x| *x = (*x - med).abs());
    let mut spread = median(&mut v);
    if spread <= 0.0 {
        let n = response.len() as f64;
        let mean = response.iter().sum::<f64>() / n;
        spread = (response.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    med + k * spread
}

/// Top-hat values below this fraction of the image magnitude count as zero.
const ROUNDOFF_FLOOR: f64 = 1e-10;

pub fn detect(img: &GrayImage, params: &DetectParams) -> Result<Vec<Detection>> {
    params.validate()?;
    let (w, h) = img.dims();
    let se = 2 * params.tophat_radius + 1;
    if w <= se || h <= se {
        return Err(Error::param(format!(
            "{w}x{h} image is not larger than the {se}x{se} structuring element"
        )));
    }
    let mut response = white_tophat(img, params.tophat_radius);
    // Responses at round-off level are zero: otherwise an exactly corrected
    // flat region gets a near-zero MAD and every noise pixel clears it.
    let floor = ROUNDOFF_FLOOR * img.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for v in response.data_mut() {
        if *v <= floor {
            *v = 0.0;
        }
    }
    let peak = response.max();
    if !(peak > 0.0) {
        return Ok(Vec::new());
    }
    let thr = robust_threshold(response.data(), params.threshold_k);
    let on: Vec<bool> = response.data().iter().map(|&v| v > thr).collect();

    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let (mut area, mut best) = (0usize, 0.0f64);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            best = best.max(response.data()[i]);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if (params.min_area..=params.max_area).contains(&area) {
            out.push(Detection {
                bbox: BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                score: best / peak,
            });
        }
    }
    Ok(out)
}

/// Intersection over union; 0 when both boxes are empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub iou_threshold: f64,
}

impl PrReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, iou_threshold: f64) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            iou_threshold,
        }
    }

    /// Pools counts across images.
    pub fn merge(reports: &[PrReport], iou_threshold: f64) -> Self {
        let (tp, fp, fn_) = reports
            .iter()
            .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
        Self::from_counts(tp, fp, fn_, iou_threshold)
    }
}

/// Visit order: descending score, ties by input position.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching: for each detection (input order), the index of
/// the ground truth it claims, if any.
pub fn match_pairs(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut pairs = vec![None; dets.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= iou_threshold {
                taken[g] = true;
                pairs[i] = Some(g);
            }
        }
    }
    pairs
}

/// TP flag of each detection in input order.
pub fn match_flags(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Vec<bool> {
    match_pairs(dets, gts, iou_threshold).iter().map(Option::is_some).collect()
}

pub fn match_and_score(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> PrReport {
    let tp = match_flags(dets, gts, iou_threshold).iter().filter(|&&f| f).count();
    PrReport::from_counts(tp, dets.len() - tp, gts.len() - tp, iou_threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// Trapezoidal area under precision(recall), anchored at recall 0 with the
/// first point's precision.
pub fn trapezoid_auc(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let (mut r, mut p) = (0.0, first.precision);
    let mut area = 0.0;
    for pt in points {
        area += (pt.recall - r) * (pt.precision + p) / 2.0;
        r = pt.recall;
        p = pt.precision;
    }
    area
}

/// Score-threshold sweep over a set of images. Greedy matching in score order
/// means the matches of every threshold are a prefix of the full matching, so
/// one pass suffices. `thresholds` defaults to the distinct detection scores.
pub fn pr_curve(
    images: &[(Vec<Detection>, Vec<BBox>)],
    iou_threshold: f64,
    thresholds: Option<&[f64]>,
) -> PrCurve {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut scored: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|(d, g)| {
            let flags = match_flags(d, g, iou_threshold);
            d.iter().zip(flags).map(|(d, f)| (d.score, f)).collect::<Vec<_>>()
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut sweep: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => scored.iter().map(|s| s.0).collect(),
    };
    sweep.sort_by(|a, b| b.total_cmp(a));
    sweep.dedup();

    let mut points = Vec::with_capacity(sweep.len());
    let (mut i, mut tp) = (0, 0);
    for t in sweep {
        while i < scored.len() && scored[i].0 >= t {
            tp += scored[i].1 as usize;
            i += 1;
        }
        let r = PrReport::from_counts(tp, i - tp, total_gt - tp, iou_threshold);
        points.push(PrPoint { threshold: t, precision: r.precision, recall: r.recall });
    }
    let auc = trapezoid_auc(&points);
    PrCurve { points, auc }
}

/// `threshold,precision,recall` rows followed by a `# auc=` footer.
pub fn write_pr_csv(curve: &PrCurve, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    writeln!(out, "# auc={}", curve.auc)
}

/// Reads `x,y,w,h,score` rows.
pub fn read_detections(path: &std::path::Path) -> Result<Vec<Detection>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| crate::corpus::csv_error(path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<(usize, usize, usize, usize, f64)>() {
        let (x, y, w, h, score) = row.map_err(|e| crate::corpus::csv_error(path, e))?;
        if w == 0 || h == 0 || !(0.0..=1.0).contains(&score) {
            return Err(IoError::malformed(path, format!("invalid detection row {x},{y},{w},{h},{score}")).into());
        }
        out.push(Detection { bbox: BBox::new(x, y, w, h), score });
    }
    Ok(out)
}

pub fn write_detections(path: &std::path::Path, dets: &[Detection]) -> Result<()> {
    let io = |e: std::io::Error| IoError::os(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "x,y,w,h,score").map_err(io)?;
    for d in dets {
        let b = d.bbox;
        writeln!(f, "{},{},{},{},{}", b.x, b.y, b.w, b.h, d.score).map_err(io)?;
    }
    Ok(f.flush().map_err(io)?)
}
