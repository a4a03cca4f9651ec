//! Batch driver for the metric protocols.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::json;
use shapcam::eval::{evaluate_image, parse_annotations, Annotation, AnnotationError, EvalRecord, MethodRecord};
use shapcam::imageio::{load_image, render_curves};
use shapcam::{BBox, Error, Method, Metric, Report, ScoreOracle, Tensor};

use crate::args::EvaluateArgs;
use crate::commands::init_workers;
use crate::engine::{saliency, Engine, MethodSettings};
use crate::error::{CliError, EXIT_ORACLE};
use crate::manifest::Run;

/// Stand-in when only localization metrics run and nothing can score images.
struct NoScorer;

impl ScoreOracle for NoScorer {
    fn num_classes(&self) -> usize {
        usize::MAX
    }
    fn input_shape(&self) -> Vec<usize> {
        vec![]
    }
    fn score(&self, _: &Tensor, _: usize) -> shapcam::Result<f64> {
        Err(Error::InvalidValue("no image scorer configured".into()))
    }
}

/// Box in original-image pixels mapped onto the resized network input,
/// rounding outward. Invalid boxes pass through to be excluded later.
fn scale_bbox(b: [usize; 4], from: (usize, usize), to: (usize, usize)) -> BBox {
    let bbox = BBox::from_array(b);
    let ((fw, fh), (tw, th)) = (from, to);
    if from == to || bbox.validate(fw, fh).is_err() {
        return bbox;
    }
    let lo = |v: usize, f: usize, t: usize| (v * t) / f;
    let hi = |v: usize, f: usize, t: usize| (v * t).div_ceil(f).min(t);
    BBox {
        x0: lo(bbox.x0, fw, tw),
        y0: lo(bbox.y0, fh, th),
        x1: hi(bbox.x1, fw, tw),
        y1: hi(bbox.y1, fh, th),
    }
}

struct Job<'a> {
    engine: &'a Engine,
    scorer: &'a dyn ScoreOracle,
    methods: &'a [Method],
    metrics: &'a [Metric],
    keep_fraction: f64,
    base: &'a Path,
}

impl Job<'_> {
    fn one(&self, ann: &Annotation, settings: &MethodSettings) -> Result<EvalRecord, CliError> {
        let raw = load_image(&self.base.join(&ann.image))?;
        let image = self.engine.prepare(raw.clone())?;
        let (_, rh, rw) = raw.chw()?;
        let (_, h, w) = image.chw()?;
        let bbox = ann.bbox.map(|b| scale_bbox(b, (rw, rh), (w, h)));
        let needs_map = self.methods.iter().any(|m| matches!(m, Method::ShapCam | Method::ScoreCam));
        let fm_path = ann.feature_map.as_ref().map(|p| self.base.join(p));
        let feature_map = if needs_map {
            Some(self.engine.feature_map(Some(&image), fm_path.as_deref())?)
        } else {
            None
        };
        let mut methods = BTreeMap::new();
        for &m in self.methods {
            let map = saliency(self.engine, m, Some(&image), feature_map.as_ref(), ann.class, settings)?;
            let rec = evaluate_image(
                self.scorer,
                &image,
                &map,
                ann.class,
                bbox.as_ref(),
                self.metrics,
                self.keep_fraction,
            )?;
            methods.insert(m, rec);
        }
        Ok(EvalRecord {
            image: ann.image.clone(),
            class: ann.class,
            methods,
        })
    }
}

fn mean_curve(records: &[EvalRecord], method: Method, pick: fn(&MethodRecord) -> Option<&Vec<f64>>) -> Option<Vec<f64>> {
    let curves: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.methods.get(&method).and_then(pick)).collect();
    let first = curves.first()?;
    let mut mean = vec![0.0; first.len()];
    for c in &curves {
        for (m, v) in mean.iter_mut().zip(c.iter()) {
            *m += v;
        }
    }
    Some(mean.into_iter().map(|m| m / curves.len() as f64).collect())
}

pub fn evaluate(a: &EvaluateArgs, argv: Vec<String>, compare: bool) -> Result<(), CliError> {
    init_workers(a.sampling.workers);
    let run = Run::start(if compare { "compare" } else { "evaluate" }, argv, a.sampling.seed);
    let methods: Vec<Method> = match (a.methods.is_empty(), compare) {
        (false, _) => a.methods.clone(),
        (true, true) => Method::ALL.to_vec(),
        (true, false) => vec![Method::ShapCam],
    };
    if !(a.keep_fraction > 0.0 && a.keep_fraction <= 1.0) {
        return Err(CliError::usage(format!("--keep-fraction {} not in (0, 1]", a.keep_fraction)));
    }
    let text = fs::read_to_string(&a.annotations)?;
    let (annotations, bad) = parse_annotations(&text);
    if annotations.is_empty() {
        let detail = if bad.is_empty() {
            "annotation file is empty".to_string()
        } else {
            format!("no valid annotation lines ({} unreadable, first at line {})", bad.len(), bad[0].line)
        };
        return Err(CliError::usage(detail));
    }
    let engine = Engine::from_args(&a.model)?;
    let needs_scores = a.metrics.iter().any(|m| !matches!(m, Metric::Pointing));
    let scorer = engine.input_scorer();
    if needs_scores && scorer.is_none() {
        return Err(CliError::usage(
            "drop/increase/deletion/insertion need a model or --input-oracle-cmd",
        ));
    }
    let settings = MethodSettings::new(&a.sampling, &a.rise, run.seed);
    let base = a.annotations.parent().unwrap_or(Path::new("."));
    let job = Job {
        engine: &engine,
        scorer: scorer.as_deref().unwrap_or(&NoScorer),
        methods: &methods,
        metrics: &a.metrics,
        keep_fraction: a.keep_fraction,
        base,
    };

    let config = json!({
        "methods": methods,
        "metrics": a.metrics,
        "keep_fraction": a.keep_fraction,
        "seed": run.seed,
        "per_image_seed": "seed + image index",
        "method_settings": settings.describe(),
        "insertion_start": "zeros",
        "engine": engine.describe(),
    });
    let mut report = Report::new(a.keep_fraction, a.metrics.clone(), config.clone());
    report.annotation_errors = bad;
    for (i, ann) in annotations.iter().enumerate() {
        match job.one(ann, &settings.with_seed(run.seed.wrapping_add(i as u64))) {
            Ok(rec) => report.records.push(rec),
            Err(e) if e.exit_code == EXIT_ORACLE => return Err(e),
            Err(e) => report.excluded_images.push(AnnotationError {
                line: ann.line,
                error: e.message,
            }),
        }
    }
    report.finalize();

    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let csv = report.summary_csv();
    fs::write(a.out_dir.join("report.csv"), &csv)?;
    let mut outputs = vec!["report.json".to_string(), "report.csv".to_string()];
    if compare {
        type Pick = fn(&MethodRecord) -> Option<&Vec<f64>>;
        let picks: [(&str, Pick); 2] = [
            ("deletion", |r| r.deletion_curve.as_ref()),
            ("insertion", |r| r.insertion_curve.as_ref()),
        ];
        for (name, pick) in picks {
            let curves: Vec<(String, Vec<f64>)> = methods
                .iter()
                .filter_map(|&m| mean_curve(&report.records, m, pick).map(|c| (m.to_string(), c)))
                .collect();
            if !curves.is_empty() {
                let file = format!("curves_{name}.csv");
                render_curves(&curves, &a.out_dir.join(&file))?;
                outputs.push(file);
                outputs.push(format!("curves_{name}.png"));
            }
        }
    }
    outputs.push("manifest.json".into());
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    run.write(
        &a.out_dir,
        json!({ "args": a, "report_config": config }),
        json!({
            "images": report.records.len(),
            "excluded_images": report.excluded_images.len(),
            "annotation_errors": report.annotation_errors.len(),
            "summary": report.summary,
        }),
        json!({}),
        &outputs,
    )?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_scaling_rounds_outward() {
        let b = scale_bbox([1, 2, 3, 5], (10, 10), (24, 24));
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (2, 4, 8, 12));
        let same = scale_bbox([0, 0, 4, 4], (8, 8), (8, 8));
        assert_eq!(same, BBox::from_array([0, 0, 4, 4]));
        let full = scale_bbox([0, 0, 7, 7], (7, 7), (24, 24));
        assert_eq!(full, BBox::from_array([0, 0, 24, 24]));
    }
}
