//! Word accuracy, lexicon-constrained scoring and anchor-line quality
//! analysis (coordinate correlations plus head/tail distances), with
//! CSV / JSON / SVG report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{image_tensor, CapnetModel};
use crate::par;
use crate::pooling::{build_cal, polyline_length, CharacterAnchor, ResampleRule};
use crate::synthdata::LoadedSample;

/// Exact-match fraction over case-folded, EOS-stripped strings.
pub fn word_accuracy(predictions: &[String], labels: &[String]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::argument(
            "word_accuracy",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.to_lowercase() == l.to_lowercase())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Levenshtein edit distance (unit costs), two-row dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Closest lexicon entry by edit distance; ties go to the earlier entry.
pub fn lexicon_match<'a>(prediction: &str, lexicon: &'a [String]) -> Result<&'a str> {
    if lexicon.is_empty() {
        return Err(Error::argument("lexicon_match", "empty lexicon"));
    }
    let mut best = 0usize;
    let mut best_d = usize::MAX;
    for (i, entry) in lexicon.iter().enumerate() {
        let d = levenshtein(prediction, entry);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(&lexicon[best])
}

/// Anchor-line quality for one sample. Correlations are None (flagged
/// undefined) when a coordinate sequence is constant; distances are
/// normalized by the ground-truth arc length.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalQuality {
    pub corr_x: Option<f64>,
    pub corr_y: Option<f64>,
    pub head_dist: f64,
    pub tail_dist: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Compares predicted and ground-truth CAL markers index-by-index.
pub fn cal_quality(pred: &[(f64, f64)], gt: &[(f64, f64)], gt_arc_length: f64) -> Result<CalQuality> {
    if pred.len() != gt.len() {
        return Err(Error::argument(
            "cal_quality",
            format!("{} vs {} markers", pred.len(), gt.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::argument("cal_quality", "empty marker lists"));
    }
    if !(gt_arc_length > 0.0) {
        return Err(Error::argument("cal_quality", "ground-truth arc length must be positive"));
    }
    let px: Vec<f64> = pred.iter().map(|p| p.0).collect();
    let py: Vec<f64> = pred.iter().map(|p| p.1).collect();
    let gx: Vec<f64> = gt.iter().map(|p| p.0).collect();
    let gy: Vec<f64> = gt.iter().map(|p| p.1).collect();
    let head = (pred[0].0 - gt[0].0).hypot(pred[0].1 - gt[0].1) / gt_arc_length;
    let last = pred.len() - 1;
    let tail = (pred[last].0 - gt[last].0).hypot(pred[last].1 - gt[last].1) / gt_arc_length;
    Ok(CalQuality {
        corr_x: pearson(&px, &gx),
        corr_y: pearson(&py, &gy),
        head_dist: head,
        tail_dist: tail,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub prediction: String,
    pub label: String,
    pub correct: bool,
    pub cal: Option<CalQuality>,
    pub fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub word_accuracy: f64,
    /// lexicon size → accuracy after lexicon matching.
    pub lexicon_accuracies: BTreeMap<usize, f64>,
    pub fallback_rate: f64,
    pub records: Vec<SampleReport>,
}

impl EvalReport {
    pub fn median_corr(&self) -> (Option<f64>, Option<f64>) {
        let mut xs: Vec<f64> = self.records.iter().filter_map(|r| r.cal.and_then(|c| c.corr_x)).collect();
        let mut ys: Vec<f64> = self.records.iter().filter_map(|r| r.cal.and_then(|c| c.corr_y)).collect();
        (median(&mut xs), median(&mut ys))
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs inference over a test split and assembles the report. Ground-truth
/// CALs are rebuilt from the annotated character centers; samples without
/// annotations get no CAL-quality record.
pub fn run_eval(
    model: &CapnetModel,
    test_set: &[LoadedSample],
    lexicon: Option<&[String]>,
) -> Result<EvalReport> {
    let (ih, iw) = model.config.backbone.input_size;
    let stride = model.config.anchoring.stride;
    let m = model.config.pooling.markers;
    let per_sample: Vec<Result<SampleReport>> = par::map_indexed(test_set, |_, s| {
        let image = image_tensor(&s.pixels, ih, iw)?;
        let rec = model.recognize(&image)?;
        let cal = match s.char_centers() {
            Some(centers) => {
                let anchors: Vec<CharacterAnchor> = centers
                    .iter()
                    .map(|&(x, y)| CharacterAnchor {
                        x: x / stride as f64,
                        y: y / stride as f64,
                        mass: 1,
                    })
                    .collect();
                let grid = (iw / stride, ih / stride);
                let gt = build_cal(&anchors, m, grid, ResampleRule::ArcLength)?;
                let arc = if gt.total_arc_length > 0.0 {
                    gt.total_arc_length
                } else {
                    polyline_length(&gt.markers).max(1.0)
                };
                Some(cal_quality(&rec.cal.markers, &gt.markers, arc)?)
            }
            None => None,
        };
        Ok(SampleReport {
            id: s.id.clone(),
            prediction: rec.text,
            label: s.label.clone(),
            correct: false, // filled below after case folding
            cal,
            fallback: rec.fallback,
        })
    });
    let mut records = Vec::with_capacity(test_set.len());
    for r in per_sample {
        records.push(r?);
    }
    for r in records.iter_mut() {
        r.correct = r.prediction.to_lowercase() == r.label.to_lowercase();
    }
    let predictions: Vec<String> = records.iter().map(|r| r.prediction.clone()).collect();
    let labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
    let accuracy = word_accuracy(&predictions, &labels)?;
    let mut lexicon_accuracies = BTreeMap::new();
    if let Some(lex) = lexicon {
        if !lex.is_empty() {
            let matched: Vec<String> = predictions
                .iter()
                .map(|p| lexicon_match(p, lex).map(str::to_string))
                .collect::<Result<_>>()?;
            lexicon_accuracies.insert(lex.len(), word_accuracy(&matched, &labels)?);
        }
    }
    let fallback_rate =
        records.iter().filter(|r| r.fallback).count() as f64 / records.len().max(1) as f64;
    Ok(EvalReport { word_accuracy: accuracy, lexicon_accuracies, fallback_rate, records })
}

/// Writes report.csv, summary.json and scatter.svg into `out_dir`.
///
/// The SVG holds two panels after the paper's analysis figure: per-sample
/// (corr_x, corr_y) points (samples with a defined pair only) and
/// per-sample (head, tail) distances — one distance marker per sample.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let csv_path = out_dir.join("report.csv");
    let mut csv = String::from("id,prediction,label,correct,corr_x,corr_y,head_dist,tail_dist,fallback\n");
    for r in &report.records {
        let (cx, cy, hd, td) = match r.cal {
            Some(c) => (
                c.corr_x.map(|v| format!("{v:.6}")).unwrap_or_default(),
                c.corr_y.map(|v| format!("{v:.6}")).unwrap_or_default(),
                format!("{:.6}", c.head_dist),
                format!("{:.6}", c.tail_dist),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{},{},{},{},{cx},{cy},{hd},{td},{}\n",
            r.id, r.prediction, r.label, r.correct, r.fallback
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let summary_path = out_dir.join("summary.json");
    let (med_x, med_y) = report.median_corr();
    let summary = serde_json::json!({
        "word_accuracy": report.word_accuracy,
        "lexicon_accuracies": report.lexicon_accuracies,
        "fallback_rate": report.fallback_rate,
        "samples": report.records.len(),
        "median_corr_x": med_x,
        "median_corr_y": med_y,
    });
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(&summary_path, e))?;

    let svg_path = out_dir.join("scatter.svg");
    fs::write(&svg_path, render_scatter_svg(report)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(())
}

fn render_scatter_svg(report: &EvalReport) -> String {
    let (w, h) = (880.0, 440.0);
    let panel = 360.0;
    let pad = 50.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<style>.axis{stroke:#333;stroke-width:1} text{font:12px sans-serif;fill:#333}</style>\n");

    // panel (a): correlations in [-1, 1] × [-1, 1]
    let map_a = |x: f64, y: f64| -> (f64, f64) {
        (pad + (x + 1.0) / 2.0 * panel, pad + panel - (y + 1.0) / 2.0 * panel)
    };
    svg.push_str(&format!(
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{panel}\" height=\"{panel}\" fill=\"none\" class=\"axis\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">correlation of x vs y</text>\n",
        pad,
        pad - 10.0
    ));
    for r in &report.records {
        if let Some(c) = r.cal {
            if let (Some(x), Some(y)) = (c.corr_x, c.corr_y) {
                let (px, py) = map_a(x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0));
                svg.push_str(&format!(
                    "<circle class=\"pt-corr\" cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n"
                ));
            }
        }
    }

    // panel (b): head/tail distances, axes clipped at 1.0 — one marker per
    // sample
    let x0b = pad + panel + 60.0;
    let map_b = |x: f64, y: f64| -> (f64, f64) {
        (x0b + x.min(1.0) * panel, pad + panel - y.min(1.0) * panel)
    };
    svg.push_str(&format!(
        "<rect x=\"{x0b}\" y=\"{pad}\" width=\"{panel}\" height=\"{panel}\" fill=\"none\" class=\"axis\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">head vs tail distance (normalized)</text>\n",
        x0b,
        pad - 10.0
    ));
    for r in &report.records {
        let (hd, td) = r.cal.map(|c| (c.head_dist, c.tail_dist)).unwrap_or((1.0, 1.0));
        let (px, py) = map_b(hd, td);
        svg.push_str(&format!(
            "<circle class=\"pt-dist\" cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"#d62728\" fill-opacity=\"0.6\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> String {
        v.to_string()
    }

    #[test]
    fn word_accuracy_basics() {
        let a = vec![s("ab"), s("cd")];
        assert_eq!(word_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(word_accuracy(&a, &[s("xx"), s("yy")]).unwrap(), 0.0);
        assert_eq!(word_accuracy(&a, &[s("ab"), s("ce")]).unwrap(), 0.5);
        assert!(word_accuracy(&a, &[s("ab")]).is_err());
    }

    #[test]
    fn word_accuracy_is_case_insensitive() {
        assert_eq!(word_accuracy(&[s("AbC")], &[s("abc")]).unwrap(), 1.0);
    }

    #[test]
    fn levenshtein_classic() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
    }

    #[test]
    fn lexicon_match_rules() {
        // "kitten" → "sitting" at distance 3
        let lex = vec![s("sitting")];
        assert_eq!(lexicon_match("kitten", &lex).unwrap(), "sitting");
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        // exact hit returns itself
        let lex = vec![s("sitting"), s("kitchen")];
        assert_eq!(lexicon_match("kitchen", &lex).unwrap(), "kitchen");
        // tie → earlier entry
        let lex2 = vec![s("aa"), s("bb")];
        assert_eq!(lexicon_match("ab", &lex2).unwrap(), "aa");
        assert!(lexicon_match("x", &[]).is_err());
    }

    #[test]
    fn cal_quality_identity_and_anticorrelation() {
        let gt: Vec<(f64, f64)> = (0..8).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect();
        let arc = 7.5;
        let q = cal_quality(&gt, &gt, arc).unwrap();
        assert!((q.corr_x.unwrap() - 1.0).abs() < 1e-12);
        assert!((q.corr_y.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(q.head_dist, 0.0);
        assert_eq!(q.tail_dist, 0.0);

        // negate y about its mean → corr_y = −1
        let my: f64 = gt.iter().map(|p| p.1).sum::<f64>() / gt.len() as f64;
        let flipped: Vec<(f64, f64)> = gt.iter().map(|&(x, y)| (x, 2.0 * my - y)).collect();
        let q = cal_quality(&flipped, &gt, arc).unwrap();
        assert!((q.corr_y.unwrap() + 1.0).abs() < 1e-12);
        assert!((q.corr_x.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cal_quality_constant_sequence_is_flagged() {
        let gt: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0)).collect();
        let q = cal_quality(&gt, &gt, 4.0).unwrap();
        assert!(q.corr_y.is_none());
        assert!(q.corr_x.is_some());
    }

    #[test]
    fn cal_quality_pearson_formula_value() {
        let pred: Vec<(f64, f64)> = [0.0, 1.0, 2.0, 3.0].iter().map(|&x| (x, x)).collect();
        let gt: Vec<(f64, f64)> = [0.0, 1.0, 2.0, 4.0].iter().map(|&x| (x, x)).collect();
        let q = cal_quality(&pred, &gt, 5.0).unwrap();
        // direct-formula oracle
        let oracle = {
            let a = [0.0, 1.0, 2.0, 3.0];
            let b = [0.0, 1.0, 2.0, 4.0];
            let ma = 1.5;
            let mb = 1.75;
            let sab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let saa: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
            let sbb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
            sab / (saa * sbb).sqrt()
        };
        assert!((q.corr_x.unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.98270).abs() < 1e-4);
    }

    #[test]
    fn cal_quality_error_paths() {
        let a = vec![(0.0, 0.0), (1.0, 1.0)];
        let b = vec![(0.0, 0.0)];
        assert!(cal_quality(&a, &b, 1.0).is_err());
        assert!(cal_quality(&a, &a, 0.0).is_err());
    }

    #[test]
    fn report_files_shape() {
        let report = EvalReport {
            word_accuracy: 0.5,
            lexicon_accuracies: BTreeMap::new(),
            fallback_rate: 0.0,
            records: vec![
                SampleReport {
                    id: s("a"),
                    prediction: s("ab"),
                    label: s("ab"),
                    correct: true,
                    cal: Some(CalQuality {
                        corr_x: Some(0.99),
                        corr_y: None,
                        head_dist: 0.01,
                        tail_dist: 0.02,
                    }),
                    fallback: false,
                },
                SampleReport {
                    id: s("b"),
                    prediction: s("xx"),
                    label: s("yy"),
                    correct: false,
                    cal: Some(CalQuality {
                        corr_x: Some(0.5),
                        corr_y: Some(0.4),
                        head_dist: 0.3,
                        tail_dist: 0.1,
                    }),
                    fallback: true,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3); // header + 2 rows
        assert!(csv.starts_with("id,prediction,label,correct,corr_x,corr_y,head_dist,tail_dist,fallback"));
        let svg = fs::read_to_string(dir.path().join("scatter.svg")).unwrap();
        // one distance marker per sample; corr markers only where defined
        assert_eq!(svg.matches("pt-dist").count(), 2);
        assert_eq!(svg.matches("pt-corr").count(), 1);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["word_accuracy"], 0.5);
    }
}
