//! Faithfulness and localization protocols for saliency maps.
//!
//! * recognition: Average Drop and Average Increase under top-k saliency
//!   masking of the input,
//! * deletion / insertion curves over 101 steps (0%..100% of pixels) with a
//!   trapezoidal AUC,
//! * the energy-based pointing game,
//! * the student objective `CE + α‖L_s − L_t‖²`.
//!
//! Pixel rankings sort by descending saliency and break ties by row-major
//! index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapley::{Method, SaliencyMap};
use crate::tensor::Tensor;
use crate::worth::ScoreOracle;

pub const CURVE_STEPS: usize = 100;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.5;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Axis-aligned box in pixel coordinates; covers `x0..x1` × `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn from_array(b: [usize; 4]) -> Self {
        Self {
            x0: b[0],
            y0: b[1],
            x1: b[2],
            y1: b[3],
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::InvalidValue(format!(
                "bbox {:?} invalid for a {width}x{height} image",
                [self.x0, self.y0, self.x1, self.y1]
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Pixel indices ordered from most to least salient.
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn at_image_resolution(image: &Tensor, saliency: &SaliencyMap) -> Result<SaliencyMap> {
    let (_, h, w) = image.chw()?;
    if saliency.height == h && saliency.width == w {
        Ok(saliency.clone())
    } else {
        saliency.upsample(h, w)
    }
}

fn apply_pixel_mask(image: &Tensor, keep: &[bool]) -> Tensor {
    let mut out = image.clone();
    let area = keep.len();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        if !keep[idx % area] {
            *v = 0.0;
        }
    }
    out
}

/// Binary mask keeping the `round(keep_fraction · H·W)` most salient pixels
/// that have positive saliency (bilinear upsampling first if needed).
pub fn recognition_mask(image: &Tensor, saliency: &SaliencyMap, keep_fraction: f64) -> Result<Vec<bool>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidValue(format!("keep fraction {keep_fraction} not in (0, 1]")));
    }
    let s = at_image_resolution(image, saliency)?;
    let area = s.values.len();
    let k = ((keep_fraction * area as f64).round() as usize).clamp(1, area);
    let mut keep = vec![false; area];
    for &idx in ranking(&s.values).iter().take(k) {
        if s.values[idx] > 0.0 {
            keep[idx] = true;
        }
    }
    Ok(keep)
}

/// The image multiplied by the binarized saliency mask.
pub fn masked_input(image: &Tensor, saliency: &SaliencyMap, keep_fraction: f64) -> Result<Tensor> {
    let keep = recognition_mask(image, saliency, keep_fraction)?;
    Ok(apply_pixel_mask(image, &keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    /// Percentage in `[0, 100]`.
    pub value: f64,
    pub used: usize,
    /// Images with zero base confidence.
    pub excluded: usize,
}

/// Mean of `max(0, Y − O) / Y` over `(Y, O)` pairs, as a percentage.
pub fn average_drop(pairs: &[(f64, f64)]) -> Result<DropSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidValue("average drop needs at least one image".into()));
    }
    let used: Vec<f64> = pairs
        .iter()
        .filter(|(y, _)| *y > 0.0)
        .map(|&(y, o)| (y - o).max(0.0) / y)
        .collect();
    let excluded = pairs.len() - used.len();
    if used.is_empty() {
        return Err(Error::Undefined("every image has zero base confidence".into()));
    }
    Ok(DropSummary {
        value: 100.0 * used.iter().sum::<f64>() / used.len() as f64,
        used: used.len(),
        excluded,
    })
}

/// Percentage of `(Y, O)` pairs with `O > Y`.
pub fn average_increase(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidValue("average increase needs at least one image".into()));
    }
    let increased = pairs.iter().filter(|(y, o)| o > y).count();
    Ok(100.0 * increased as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Probability at 0%, 1%, …, 100% of pixels changed.
    pub points: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area over `x ∈ [0, 1]` for evenly spaced points.
pub fn auc(points: &[f64]) -> f64 {
    if points.len() < 2 {
        return points.first().copied().unwrap_or(0.0);
    }
    let dx = 1.0 / (points.len() - 1) as f64;
    points.windows(2).map(|p| 0.5 * (p[0] + p[1]) * dx).sum()
}

fn pixels_at_step(step: usize, area: usize) -> usize {
    step * area / CURVE_STEPS
}

fn curve(
    oracle: &dyn ScoreOracle,
    image: &Tensor,
    saliency: &SaliencyMap,
    class: usize,
    insertion: bool,
) -> Result<Curve> {
    let s = at_image_resolution(image, saliency)?;
    let order = ranking(&s.values);
    let area = order.len();
    let images: Vec<Tensor> = (0..=CURVE_STEPS)
        .map(|step| {
            let changed = pixels_at_step(step, area);
            let mut keep = vec![!insertion; area];
            for &idx in &order[..changed] {
                keep[idx] = insertion;
            }
            apply_pixel_mask(image, &keep)
        })
        .collect();
    let points = oracle.score_batch(&images, class)?;
    Ok(Curve {
        auc: auc(&points),
        points,
    })
}

/// Probability as the most salient pixels are zeroed, 1% of the image per step.
pub fn deletion_curve(oracle: &dyn ScoreOracle, image: &Tensor, saliency: &SaliencyMap, class: usize) -> Result<Curve> {
    curve(oracle, image, saliency, class, false)
}

/// Probability as the most salient pixels are restored onto a zero image.
pub fn insertion_curve(oracle: &dyn ScoreOracle, image: &Tensor, saliency: &SaliencyMap, class: usize) -> Result<Curve> {
    curve(oracle, image, saliency, class, true)
}

/// Share of rectified saliency energy that falls inside `bbox`.
///
/// The saliency must be at image resolution.
pub fn pointing_proportion(saliency: &SaliencyMap, bbox: &BBox) -> Result<f64> {
    bbox.validate(saliency.width, saliency.height)?;
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..saliency.height {
        for j in 0..saliency.width {
            let e = saliency.get(i, j).max(0.0);
            total += e;
            if bbox.contains(j, i) {
                inside += e;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Undefined("rectified saliency is identically zero".into()));
    }
    Ok(inside / total)
}

/// `ce_loss + alpha · Σ (student − teacher)²`.
pub fn student_loss(ce_loss: f64, student: &SaliencyMap, teacher: &SaliencyMap, alpha: f64) -> Result<f64> {
    if student.height != teacher.height || student.width != teacher.width {
        return Err(Error::shape(
            "student_loss",
            format!(
                "student {}x{} vs teacher {}x{}",
                student.height, student.width, teacher.height, teacher.width
            ),
        ));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidValue("alpha must be non-negative".into()));
    }
    let interp: f64 = student
        .values
        .iter()
        .zip(&teacher.values)
        .map(|(s, t)| (s - t).powi(2))
        .sum();
    Ok(ce_loss + alpha * interp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Drop,
    Increase,
    Deletion,
    Insertion,
    Pointing,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Drop,
        Metric::Increase,
        Metric::Deletion,
        Metric::Insertion,
        Metric::Pointing,
    ];
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Drop => "drop",
            Metric::Increase => "increase",
            Metric::Deletion => "deletion",
            Metric::Insertion => "insertion",
            Metric::Pointing => "pointing",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown metric `{s}`")))
    }
}

/// Per-image, per-method metric outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    /// Scores `(Y, O)` of the full and the masked image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub increase_flag: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_curve: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_curve: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportion: Option<f64>,
    /// Reasons this image was left out of individual aggregates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclusions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: String,
    pub class: usize,
    pub methods: BTreeMap<Method, MethodRecord>,
}

/// Runs the selected metrics for one image and one saliency map.
///
/// `oracle` scores whole input images.
pub fn evaluate_image(
    oracle: &dyn ScoreOracle,
    image: &Tensor,
    saliency: &SaliencyMap,
    class: usize,
    bbox: Option<&BBox>,
    metrics: &[Metric],
    keep_fraction: f64,
) -> Result<MethodRecord> {
    let mut rec = MethodRecord::default();
    if metrics.iter().any(|m| matches!(m, Metric::Drop | Metric::Increase)) {
        let masked = masked_input(image, saliency, keep_fraction)?;
        let scores = oracle.score_batch(&[image.clone(), masked], class)?;
        let (y, o) = (scores[0], scores[1]);
        rec.base_score = Some(y);
        rec.masked_score = Some(o);
        if metrics.contains(&Metric::Drop) {
            if y > 0.0 {
                rec.drop_pct = Some(100.0 * (y - o).max(0.0) / y);
            } else {
                rec.exclusions.push("drop: zero base confidence".into());
            }
        }
        if metrics.contains(&Metric::Increase) {
            rec.increase_flag = Some(o > y);
        }
    }
    if metrics.contains(&Metric::Deletion) {
        let c = deletion_curve(oracle, image, saliency, class)?;
        rec.deletion_auc = Some(c.auc);
        rec.deletion_curve = Some(c.points);
    }
    if metrics.contains(&Metric::Insertion) {
        let c = insertion_curve(oracle, image, saliency, class)?;
        rec.insertion_auc = Some(c.auc);
        rec.insertion_curve = Some(c.points);
    }
    if metrics.contains(&Metric::Pointing) {
        match bbox {
            None => rec.exclusions.push("pointing: no bbox".into()),
            Some(b) => {
                let (_, h, w) = image.chw()?;
                let s = at_image_resolution(image, saliency)?;
                match b.validate(w, h).and_then(|_| pointing_proportion(&s, b)) {
                    Ok(p) => rec.proportion = Some(p),
                    Err(e) => rec.exclusions.push(format!("pointing: {e}")),
                }
            }
        }
    }
    Ok(rec)
}

/// Aggregate row for one method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Option<Method>,
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_increase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportion: Option<f64>,
    pub excluded_drop: usize,
    pub excluded_pointing: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Order-independent aggregation over per-image records of one method.
pub fn summarize(method: Method, records: &[&MethodRecord]) -> MethodSummary {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| Some((r.base_score?, r.masked_score?)))
        .collect();
    let drop_requested = records.iter().any(|r| r.drop_pct.is_some() || r.exclusions.iter().any(|e| e.starts_with("drop")));
    let increase_requested = records.iter().any(|r| r.increase_flag.is_some());
    let collect = |f: fn(&MethodRecord) -> Option<f64>| -> Vec<f64> { records.iter().filter_map(|r| f(r)).collect() };
    let (average_drop, excluded_drop) = if drop_requested && !pairs.is_empty() {
        match average_drop(&pairs) {
            Ok(s) => (Some(s.value), s.excluded),
            Err(_) => (None, pairs.len()),
        }
    } else {
        (None, 0)
    };
    MethodSummary {
        method: Some(method),
        images: records.len(),
        average_drop,
        average_increase: if increase_requested {
            average_increase(&pairs).ok()
        } else {
            None
        },
        deletion_auc: mean(&collect(|r| r.deletion_auc)),
        insertion_auc: mean(&collect(|r| r.insertion_auc)),
        proportion: mean(&collect(|r| r.proportion)),
        excluded_drop,
        excluded_pointing: records
            .iter()
            .filter(|r| r.exclusions.iter().any(|e| e.starts_with("pointing")))
            .count(),
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
    /// Precomputed feature map (JSON tensor file) for out-of-process runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<String>,
    /// 1-based line in the source file.
    #[serde(skip)]
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationError {
    pub line: usize,
    pub error: String,
}

/// Parses JSON-lines annotations; bad lines are returned with 1-based line
/// numbers instead of aborting.
pub fn parse_annotations(text: &str) -> (Vec<Annotation>, Vec<AnnotationError>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Annotation>(line) {
            Ok(a) => ok.push(Annotation { line: n + 1, ..a }),
            Err(e) => bad.push(AnnotationError {
                line: n + 1,
                error: e.to_string(),
            }),
        }
    }
    (ok, bad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub keep_fraction: f64,
    pub metrics: Vec<Metric>,
    pub config: serde_json::Value,
    pub summary: Vec<MethodSummary>,
    pub records: Vec<EvalRecord>,
    pub excluded_images: Vec<AnnotationError>,
    pub annotation_errors: Vec<AnnotationError>,
}

impl Report {
    pub fn new(keep_fraction: f64, metrics: Vec<Metric>, config: serde_json::Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            keep_fraction,
            metrics,
            config,
            summary: vec![],
            records: vec![],
            excluded_images: vec![],
            annotation_errors: vec![],
        }
    }

    /// Recomputes the per-method aggregate rows from the records.
    pub fn finalize(&mut self) {
        let mut methods: Vec<Method> = self.records.iter().flat_map(|r| r.methods.keys().copied()).collect();
        methods.sort();
        methods.dedup();
        self.summary = methods
            .into_iter()
            .map(|m| {
                let recs: Vec<&MethodRecord> = self.records.iter().filter_map(|r| r.methods.get(&m)).collect();
                summarize(m, &recs)
            })
            .collect();
    }

    /// Checks the documented report invariants; returns every violation found.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.schema_version != REPORT_SCHEMA_VERSION {
            problems.push(format!("schema_version {}", self.schema_version));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            problems.push(format!("keep_fraction {}", self.keep_fraction));
        }
        let unit = |v: Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
        for r in &self.records {
            for (m, rec) in &r.methods {
                let at = format!("{} / {m}", r.image);
                for curve in [&rec.deletion_curve, &rec.insertion_curve].into_iter().flatten() {
                    if curve.len() != CURVE_STEPS + 1 {
                        problems.push(format!("{at}: curve with {} points", curve.len()));
                    }
                    if !curve.iter().all(|p| (0.0..=1.0).contains(p)) {
                        problems.push(format!("{at}: curve value outside [0, 1]"));
                    }
                }
                if !rec.drop_pct.is_none_or(|d| (0.0..=100.0).contains(&d)) {
                    problems.push(format!("{at}: drop_pct out of range"));
                }
                if !(unit(rec.proportion) && unit(rec.deletion_auc) && unit(rec.insertion_auc)) {
                    problems.push(format!("{at}: proportion or AUC outside [0, 1]"));
                }
            }
        }
        for s in &self.summary {
            let pct = |v: Option<f64>| v.is_none_or(|x| (0.0..=100.0).contains(&x));
            if !(pct(s.average_drop) && pct(s.average_increase) && unit(s.deletion_auc) && unit(s.insertion_auc) && unit(s.proportion)) {
                problems.push(format!("summary row {:?} out of range", s.method));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Aggregate rows as CSV (LF line endings).
    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(
            "method,images,average_drop,average_increase,deletion_auc,insertion_auc,proportion,excluded_drop,excluded_pointing\n",
        );
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.method.map(|m| m.as_str()).unwrap_or(""),
                s.images,
                fmt(s.average_drop),
                fmt(s.average_increase),
                fmt(s.deletion_auc),
                fmt(s.insertion_auc),
                fmt(s.proportion),
                s.excluded_drop,
                s.excluded_pointing
            ));
        }
        out
    }
}
