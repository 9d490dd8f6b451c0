//! Synthetic curved-text corpus: glyph strings rendered along straight and
//! curved baselines with exact character-center annotations, written as PGM
//! images plus JSON-lines manifests.

pub mod font;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchoring::CharBox;
use crate::error::{Error, Result};
use crate::par;
use crate::pooling::{build_cal, CharacterAnchor, ResampleRule};
use crate::rng::{derive_seed, rng_for};
use crate::seq2seq::Alphabet;

const STREAM_RENDER: u64 = 0x72656e64;
const STREAM_LABELS: u64 = 0x6c61626c;
const STREAM_NOISE: u64 = 0x676e6f69;
const STREAM_FLAGS: u64 = 0x666c6167;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Straight,
    Arc,
    Sine,
}

impl BaselineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::Straight => "straight",
            BaselineKind::Arc => "arc",
            BaselineKind::Sine => "sine",
        }
    }
}

/// Per-sample rendering request.
#[derive(Debug, Clone, Default)]
pub struct SampleSpec {
    /// Fixed label; random when absent.
    pub label: Option<String>,
    /// Fixed baseline shape; random when absent.
    pub baseline_kind: Option<BaselineKind>,
    /// Additive Gaussian noise σ (in [0,1] intensity units).
    pub noise_sigma: f64,
}

/// Generator geometry knobs.
#[derive(Debug, Clone)]
pub struct GenParams {
    pub image_size: (usize, usize),
    /// Glyph height range in pixels.
    pub glyph_height: (f64, f64),
    pub max_slope: f64,
    /// Minimum separation between adjacent character boxes, in pixels.
    pub min_gap: f64,
    /// Random label length range (inclusive).
    pub label_len: (usize, usize),
    /// Markers for the ground-truth CAL.
    pub markers: usize,
    pub stride: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            image_size: (64, 256),
            glyph_height: (12.0, 24.0),
            max_slope: 0.3,
            min_gap: 8.0,
            label_len: (2, 9),
            markers: 36,
            stride: 4,
        }
    }
}

/// One rendered sample with full annotations.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    /// Row-major h×w values in [0,1].
    pub image: Vec<f64>,
    pub label: String,
    pub boxes: Vec<CharBox>,
    pub baseline_kind: BaselineKind,
    /// Ground-truth CAL markers on the stride grid.
    pub gt_cal: Vec<(f64, f64)>,
}

struct Baseline {
    pts: Vec<(f64, f64)>,
    cum: Vec<f64>,
}

impl Baseline {
    fn from_fn(x0: f64, x1: f64, f: impl Fn(f64) -> f64) -> Baseline {
        let mut pts = Vec::new();
        let mut x = x0;
        while x <= x1 {
            pts.push((x, f(x)));
            x += 0.5;
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for w in pts.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cum.push(cum.last().unwrap() + d);
        }
        Baseline { pts, cum }
    }

    /// Position and tangent angle at arc-length s.
    fn at(&self, s: f64) -> (f64, f64, f64) {
        let s = s.clamp(0.0, *self.cum.last().unwrap());
        let j = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        };
        let seg = self.cum[j + 1] - self.cum[j];
        let t = if seg > 0.0 { (s - self.cum[j]) / seg } else { 0.0 };
        let (x0, y0) = self.pts[j];
        let (x1, y1) = self.pts[j + 1];
        let theta = (y1 - y0).atan2(x1 - x0);
        (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, theta)
    }
}

fn rect_gap(a: &CharBox, b: &CharBox) -> f64 {
    let (ax0, ax1) = (a.center.0 - a.width / 2.0, a.center.0 + a.width / 2.0);
    let (ay0, ay1) = (a.center.1 - a.height / 2.0, a.center.1 + a.height / 2.0);
    let (bx0, bx1) = (b.center.0 - b.width / 2.0, b.center.0 + b.width / 2.0);
    let (by0, by1) = (b.center.1 - b.height / 2.0, b.center.1 + b.height / 2.0);
    let dx = (bx0 - ax1).max(ax0 - bx1).max(0.0);
    let dy = (by0 - ay1).max(ay0 - by1).max(0.0);
    dx.hypot(dy)
}

/// Deterministically renders one sample from its seed and spec.
pub fn render_sample(seed: u64, spec: &SampleSpec, params: &GenParams) -> Result<RenderedSample> {
    let mut rng = rng_for(seed, STREAM_RENDER, 0);
    let (ih, iw) = params.image_size;

    let label = match &spec.label {
        Some(l) => l.to_ascii_lowercase(),
        None => {
            let len = rng.random_range(params.label_len.0..=params.label_len.1);
            random_label(&mut rng, len)
        }
    };
    if label.is_empty() || label.len() > 20 {
        return Err(Error::Data(format!("label length {} outside 1..=20", label.len())));
    }
    let symbols = Alphabet::encode(&label)?;

    let kind = spec.baseline_kind.unwrap_or_else(|| match rng.random_range(0..3u8) {
        0 => BaselineKind::Straight,
        1 => BaselineKind::Arc,
        _ => BaselineKind::Sine,
    });

    // per-glyph sizes; auto-shrink to fit the image width, floored at the
    // minimum glyph size
    let mut heights: Vec<f64> =
        (0..symbols.len()).map(|_| rng.random_range(params.glyph_height.0..=params.glyph_height.1)).collect();
    let needed = |hs: &[f64], gap: f64| -> f64 {
        let diags: Vec<f64> = hs.iter().map(|&h| (h * 5.0 / 7.0).hypot(h)).collect();
        diags.iter().sum::<f64>() + gap * (hs.len().saturating_sub(1)) as f64 + 4.0
    };
    let base_gap = params.min_gap + 2.5;
    let span_budget = iw as f64 - 8.0;
    if needed(&heights, base_gap) > span_budget {
        let hmin = params.glyph_height.0;
        let apply = |s: f64, hs: &[f64]| -> Vec<f64> {
            hs.iter().map(|&h| (h * s).max(hmin)).collect()
        };
        if needed(&apply(0.0, &heights), base_gap) > span_budget {
            return Err(Error::Data(format!(
                "label {label:?} cannot fit at minimum glyph size"
            )));
        }
        // largest uniform shrink (floored at the minimum size) that fits
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if needed(&apply(mid, &heights), base_gap) <= span_budget * 0.995 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        heights = apply(lo, &heights);
    }

    // baseline parameters constrained so centers plus glyph extents stay
    // inside the image
    let max_diag = heights.iter().map(|&h| (h * 5.0 / 7.0).hypot(h)).fold(0.0, f64::max);
    let allowed = (ih as f64 - max_diag - 6.0).max(2.0);
    let sgn = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let slope = sgn * rng.random_range(0.0..=params.max_slope);
    let bulge = sgn * rng.random_range(allowed.min(4.0) * 0.5..=allowed.min(14.0));
    let noise_rng = rng_for(seed, STREAM_NOISE, 0);

    let mut result = None;
    for attempt in 0..6u32 {
        let gap = base_gap + attempt as f64 * 2.0;
        if needed(&heights, gap) > span_budget && attempt > 0 {
            break;
        }
        match try_render(
            params, &symbols, &heights, kind, slope, bulge, allowed, gap, seed,
        )? {
            Some(r) => {
                result = Some(r);
                break;
            }
            None => continue,
        }
    }
    let (mut image, boxes) = result.ok_or_else(|| {
        Error::Data(format!("could not place label {label:?} with the required spacing"))
    })?;

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
        let mut nrng = noise_rng;
        for v in image.iter_mut() {
            *v = (*v + normal.sample(&mut nrng)).clamp(0.0, 1.0);
        }
    }

    let anchors: Vec<CharacterAnchor> = boxes
        .iter()
        .map(|b| CharacterAnchor {
            x: b.center.0 / params.stride as f64,
            y: b.center.1 / params.stride as f64,
            mass: 1,
        })
        .collect();
    let grid = (iw / params.stride, ih / params.stride);
    let cal = build_cal(&anchors, params.markers, grid, ResampleRule::ArcLength)?;

    Ok(RenderedSample { image, label, boxes, baseline_kind: kind, gt_cal: cal.markers })
}

fn random_label(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| Alphabet::char_at(rng.random_range(0..36)).unwrap()).collect()
}

/// One placement + raster attempt. Returns None when the spacing invariant
/// failed and the caller should retry with a wider gap.
#[allow(clippy::too_many_arguments)]
fn try_render(
    params: &GenParams,
    symbols: &[usize],
    heights: &[f64],
    kind: BaselineKind,
    slope: f64,
    bulge: f64,
    allowed: f64,
    gap: f64,
    seed: u64,
) -> Result<Option<(Vec<f64>, Vec<CharBox>)>> {
    let (ih, iw) = params.image_size;
    let diags: Vec<f64> = heights.iter().map(|&h| (h * 5.0 / 7.0).hypot(h)).collect();

    // arc positions of character centers
    let mut pos = Vec::with_capacity(symbols.len());
    let mut s = diags[0] / 2.0 + 2.0;
    for i in 0..symbols.len() {
        if i > 0 {
            s += diags[i - 1] / 2.0 + diags[i] / 2.0 + gap;
        }
        pos.push(s);
    }
    let span = s + diags[symbols.len() - 1] / 2.0 + 2.0;

    let mut xrng = rng_for(seed, STREAM_RENDER, 1000 + gap as u64);
    let max_x0 = (iw as f64 - 4.0 - span).max(4.0);
    let x0 = if max_x0 > 4.0 { xrng.random_range(4.0..max_x0) } else { 4.0 };
    let x1 = x0 + span;

    let baseline = match kind {
        BaselineKind::Straight => {
            let m = if slope.abs() * span > allowed { allowed / span * slope.signum() } else { slope };
            Baseline::from_fn(x0, x1, |x| m * (x - x0))
        }
        BaselineKind::Arc => {
            let a = bulge.abs().clamp(2.0, allowed).copysign(bulge);
            let half = span / 2.0;
            let r = (half * half + a * a) / (2.0 * a.abs());
            let cx = x0 + half;
            Baseline::from_fn(x0, x1, |x| {
                let d = (r * r - (x - cx) * (x - cx)).max(0.0).sqrt();
                -a.signum() * (d - (r - a.abs()))
            })
        }
        BaselineKind::Sine => {
            let a = bulge.abs().clamp(2.0, allowed).copysign(bulge);
            Baseline::from_fn(x0, x1, |x| -a * (std::f64::consts::PI * (x - x0) / span).sin())
        }
    };

    // vertical centering of the curve inside the image
    let ys: Vec<f64> = baseline.pts.iter().map(|p| p.1).collect();
    let (ymin, ymax) = ys.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let shift = ih as f64 / 2.0 - (ymin + ymax) / 2.0;

    let mut image = vec![0.0; ih * iw];
    let mut boxes = Vec::with_capacity(symbols.len());
    for (i, &sym) in symbols.iter().enumerate() {
        let (cx, cy0, theta) = baseline.at(pos[i]);
        let cy = cy0 + shift;
        let bitmap = font::glyph(sym).expect("symbol in alphabet");
        let h = heights[i];
        let w = h * 5.0 / 7.0;
        let ink = raster_glyph(&mut image, (ih, iw), bitmap, (cx, cy), w, h, theta);
        let Some(((min_x, min_y), (max_x, max_y))) = ink else {
            return Ok(None);
        };
        boxes.push(CharBox {
            center: ((min_x + max_x + 1) as f64 / 2.0, (min_y + max_y + 1) as f64 / 2.0),
            width: (max_x - min_x + 1) as f64,
            height: (max_y - min_y + 1) as f64,
            ch: Alphabet::char_at(sym).unwrap(),
        });
    }

    for pair in boxes.windows(2) {
        if rect_gap(&pair[0], &pair[1]) < params.min_gap {
            return Ok(None);
        }
    }
    Ok(Some((image, boxes)))
}

/// Rasterizes one rotated glyph with 2×2 supersampling; returns the ink
/// bounding box as inclusive pixel index ranges, or None if nothing landed
/// inside the image.
#[allow(clippy::type_complexity)]
fn raster_glyph(
    image: &mut [f64],
    (ih, iw): (usize, usize),
    bitmap: &[u8; 7],
    (cx, cy): (f64, f64),
    w: f64,
    h: f64,
    theta: f64,
) -> Option<((usize, usize), (usize, usize))> {
    let (sin, cos) = theta.sin_cos();
    let half_x = (cos.abs() * w + sin.abs() * h) / 2.0 + 1.0;
    let half_y = (sin.abs() * w + cos.abs() * h) / 2.0 + 1.0;
    let px0 = ((cx - half_x).floor().max(0.0)) as usize;
    let px1 = ((cx + half_x).ceil().min(iw as f64 - 1.0)) as usize;
    let py0 = ((cy - half_y).floor().max(0.0)) as usize;
    let py1 = ((cy + half_y).ceil().min(ih as f64 - 1.0)) as usize;
    let cell_w = w / font::GLYPH_COLS as f64;
    let cell_h = h / font::GLYPH_ROWS as f64;
    let mut bb: Option<((usize, usize), (usize, usize))> = None;
    for py in py0..=py1 {
        for px in px0..=px1 {
            let mut hits = 0u8;
            for (ox, oy) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = px as f64 + ox - cx;
                let dy = py as f64 + oy - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if u.abs() <= w / 2.0 && v.abs() <= h / 2.0 {
                    let col = (((u + w / 2.0) / cell_w) as usize).min(font::GLYPH_COLS - 1);
                    let row = (((v + h / 2.0) / cell_h) as usize).min(font::GLYPH_ROWS - 1);
                    if bitmap[row] >> (font::GLYPH_COLS - 1 - col) & 1 == 1 {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / 4.0;
                let idx = py * iw + px;
                image[idx] = image[idx].max(cov);
                bb = Some(match bb {
                    None => ((px, py), (px, py)),
                    Some(((x0, y0), (x1, y1))) => {
                        ((x0.min(px), y0.min(py)), (x1.max(px), y1.max(py)))
                    }
                });
            }
        }
    }
    bb
}

// ── on-disk corpus ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub label: String,
    pub baseline_kind: BaselineKind,
    pub has_char_boxes: bool,
    pub boxes: Vec<BoxRecord>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusPreset {
    Mixed,
    StraightTrainCurvedTest,
}

impl std::str::FromStr for CorpusPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(CorpusPreset::Mixed),
            "straight-train-curved-test" => Ok(CorpusPreset::StraightTrainCurvedTest),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub preset: CorpusPreset,
    /// Overrides the preset's (straight, arc, sine) proportions for both
    /// splits when set.
    pub curve_mix: Option<(f64, f64, f64)>,
    /// Fraction of training samples stored without character boxes.
    pub label_only_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub label_len: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 2000,
            n_test: 200,
            preset: CorpusPreset::Mixed,
            curve_mix: None,
            label_only_fraction: 0.1,
            noise_sigma: 0.02,
            seed: 42,
            label_len: (2, 9),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_only_fraction) {
            return Err(Error::Config("label_only_fraction must be in [0,1]".into()));
        }
        let (lo, hi) = self.label_len;
        if lo == 0 || hi < lo || hi > 20 {
            return Err(Error::Config(format!("label_len ({lo},{hi}) outside 1..=20")));
        }
        if let Some((a, b, c)) = self.curve_mix {
            if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c <= 0.0 {
                return Err(Error::Config("curve_mix must be nonnegative, not all zero".into()));
            }
        }
        Ok(())
    }

    pub fn train_mix(&self) -> (f64, f64, f64) {
        self.curve_mix.unwrap_or(match self.preset {
            CorpusPreset::Mixed => (0.5, 0.3, 0.2),
            CorpusPreset::StraightTrainCurvedTest => (0.95, 0.05, 0.0),
        })
    }

    pub fn test_mix(&self) -> (f64, f64, f64) {
        self.curve_mix.unwrap_or(match self.preset {
            CorpusPreset::Mixed => (0.5, 0.3, 0.2),
            CorpusPreset::StraightTrainCurvedTest => (0.0, 1.0, 0.0),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub dir: PathBuf,
    pub train: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
}

fn pick_kind(mix: (f64, f64, f64), u: f64) -> BaselineKind {
    let total = mix.0 + mix.1 + mix.2;
    let x = u * total;
    if x < mix.0 {
        BaselineKind::Straight
    } else if x < mix.0 + mix.1 {
        BaselineKind::Arc
    } else {
        BaselineKind::Sine
    }
}

/// Generates and writes the corpus: `images/*.pgm` plus `train.jsonl` and
/// `test.jsonl`. Fully determined by the config seed.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let params = GenParams { label_len: cfg.label_len, ..GenParams::default() };
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    // labels: train first, then coverage patching, then disjoint test labels
    let mut lrng = rng_for(cfg.seed, STREAM_LABELS, 0);
    let mut train_labels: Vec<String> = (0..cfg.n_train)
        .map(|_| {
            let len = lrng.random_range(cfg.label_len.0..=cfg.label_len.1);
            random_label(&mut lrng, len)
        })
        .collect();
    let mut present = [false; 36];
    for l in &train_labels {
        for c in l.chars() {
            present[Alphabet::index_of(c).unwrap()] = true;
        }
    }
    let missing: Vec<usize> = (0..36).filter(|&i| !present[i]).collect();
    for (k, sym) in missing.into_iter().enumerate() {
        let idx = k % cfg.n_train;
        let len = lrng.random_range(cfg.label_len.0..=cfg.label_len.1);
        let mut label = random_label(&mut lrng, len);
        label.replace_range(0..1, &Alphabet::char_at(sym).unwrap().to_string());
        train_labels[idx] = label;
    }
    let train_set: HashSet<&str> = train_labels.iter().map(|s| s.as_str()).collect();
    let test_labels: Vec<String> = (0..cfg.n_test)
        .map(|_| {
            for _ in 0..10_000 {
                let len = lrng.random_range(cfg.label_len.0..=cfg.label_len.1);
                let l = random_label(&mut lrng, len);
                if !train_set.contains(l.as_str()) {
                    return Ok(l);
                }
            }
            Err(Error::Config("cannot draw test labels disjoint from train".into()))
        })
        .collect::<Result<_>>()?;

    struct Job {
        id: String,
        label: String,
        kind: BaselineKind,
        label_only: bool,
        seed: u64,
    }
    let mut jobs = Vec::with_capacity(cfg.n_train + cfg.n_test);
    for (i, label) in train_labels.iter().enumerate() {
        let s = derive_seed(cfg.seed, STREAM_FLAGS, i as u64);
        let u = (s >> 11) as f64 / (1u64 << 53) as f64;
        let kind = pick_kind(cfg.train_mix(), u);
        let label_only = {
            let s2 = derive_seed(cfg.seed, STREAM_FLAGS, (i as u64) ^ 0x8000_0000_0000_0000);
            ((s2 >> 11) as f64 / (1u64 << 53) as f64) < cfg.label_only_fraction
        };
        jobs.push(Job {
            id: format!("train-{i:05}"),
            label: label.clone(),
            kind,
            label_only,
            seed: derive_seed(cfg.seed, crate::rng::STREAM_CORPUS, i as u64),
        });
    }
    for (i, label) in test_labels.iter().enumerate() {
        let g = (cfg.n_train + i) as u64;
        let s = derive_seed(cfg.seed, STREAM_FLAGS, g);
        let u = (s >> 11) as f64 / (1u64 << 53) as f64;
        jobs.push(Job {
            id: format!("test-{i:05}"),
            label: label.clone(),
            kind: pick_kind(cfg.test_mix(), u),
            label_only: false,
            seed: derive_seed(cfg.seed, crate::rng::STREAM_CORPUS, g),
        });
    }

    let records: Vec<Result<ManifestRecord>> = par::map_indexed(&jobs, |_, job| {
        let spec = SampleSpec {
            label: Some(job.label.clone()),
            baseline_kind: Some(job.kind),
            noise_sigma: cfg.noise_sigma,
        };
        let sample = render_sample(job.seed, &spec, &params)?;
        let rel = format!("images/{}.pgm", job.id);
        let pixels = quantize(&sample.image);
        write_pgm(&out_dir.join(&rel), params.image_size.1, params.image_size.0, &pixels)?;
        Ok(ManifestRecord {
            id: job.id.clone(),
            image_path: rel,
            label: sample.label,
            baseline_kind: sample.baseline_kind,
            has_char_boxes: !job.label_only,
            boxes: if job.label_only {
                Vec::new()
            } else {
                sample
                    .boxes
                    .iter()
                    .map(|b| BoxRecord { cx: b.center.0, cy: b.center.1, w: b.width, h: b.height })
                    .collect()
            },
            seed: job.seed,
        })
    });
    let mut train = Vec::with_capacity(cfg.n_train);
    let mut test = Vec::with_capacity(cfg.n_test);
    for r in records {
        let rec = r?;
        if rec.id.starts_with("train-") {
            train.push(rec);
        } else {
            test.push(rec);
        }
    }
    write_manifest(&out_dir.join("train.jsonl"), &train)?;
    write_manifest(&out_dir.join("test.jsonl"), &test)?;
    Ok(CorpusManifest { dir: out_dir.to_path_buf(), train, test })
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("manifest serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn quantize(image: &[f64]) -> Vec<u8> {
    image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::dimension("write_pgm", format!("{} bytes vs {w}x{h}", data.len())));
    }
    let mut buf = Vec::with_capacity(w * h + 32);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM (P5), tolerating comment lines.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 && pos < bytes.len() {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start < pos {
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
    }
    if fields.len() < 4 || fields[0] != "P5" {
        return Err(Error::Data(format!("{} is not a binary PGM", path.display())));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Data("bad PGM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Data("bad PGM height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Data("only 8-bit PGM supported".into()));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::Data(format!("{} truncated", path.display())));
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

/// Bilinear grayscale resize with sample centers at (i+0.5)·scale − 0.5,
/// matching the upsampling convention elsewhere in the crate.
pub fn resize_gray(src: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let (fh, fw) = from;
    let (th, tw) = to;
    debug_assert_eq!(src.len(), fh * fw);
    if from == to {
        return src.to_vec();
    }
    let axis = |o: usize, t: usize, f: usize| -> (usize, usize, f64) {
        let scale = f as f64 / t as f64;
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (f - 1) as f64);
        let i0 = (c.floor() as usize).min(f - 1);
        (i0, (i0 + 1).min(f - 1), c - i0 as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for oy in 0..th {
        let (y0, y1, wy) = axis(oy, th, fh);
        for ox in 0..tw {
            let (x0, x1, wx) = axis(ox, tw, fw);
            let top = src[y0 * fw + x0] * (1.0 - wx) + src[y0 * fw + x1] * wx;
            let bot = src[y1 * fw + x0] * (1.0 - wx) + src[y1 * fw + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// In-memory training/eval record.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub label: String,
    /// Alphabet indices, EOS-terminated.
    pub target: Vec<usize>,
    pub pixels: Vec<u8>,
    pub boxes: Option<Vec<CharBox>>,
    pub baseline_kind: BaselineKind,
}

impl LoadedSample {
    pub fn char_centers(&self) -> Option<Vec<(f64, f64)>> {
        self.boxes.as_ref().map(|bs| bs.iter().map(|b| b.center).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub image_size: (usize, usize),
    pub train: Vec<LoadedSample>,
    pub test: Vec<LoadedSample>,
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let train = load_split(dir, "train.jsonl")?;
    let test = load_split(dir, "test.jsonl")?;
    let mut size = None;
    for s in train.iter().chain(&test) {
        let n = s.pixels.len();
        match size {
            None => size = Some(n),
            Some(m) if m == n => {}
            _ => return Err(Error::Data("inconsistent image sizes in corpus".into())),
        }
    }
    // image dims from the first PGM
    let first = train
        .first()
        .or(test.first())
        .ok_or_else(|| Error::Data("corpus is empty".into()))?;
    let probe = dir.join("images").join(format!("{}.pgm", first.id));
    let (w, h, _) = read_pgm(&probe)?;
    Ok(Corpus { dir: dir.to_path_buf(), image_size: (h, w), train, test })
}

fn load_split(dir: &Path, manifest: &str) -> Result<Vec<LoadedSample>> {
    let path = dir.join(manifest);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad manifest record: {e}", path.display(), lineno + 1))
        })?;
        let img_path = dir.join(&rec.image_path);
        let (_, _, pixels) = read_pgm(&img_path)?;
        let target = {
            let mut t = Alphabet::encode(&rec.label)?;
            t.push(Alphabet::EOS);
            t
        };
        let boxes = if rec.has_char_boxes {
            if rec.boxes.len() != rec.label.chars().count() {
                return Err(Error::Data(format!(
                    "sample {}: {} boxes for {} label characters",
                    rec.id,
                    rec.boxes.len(),
                    rec.label.chars().count()
                )));
            }
            Some(
                rec.boxes
                    .iter()
                    .zip(rec.label.chars())
                    .map(|(b, ch)| CharBox {
                        center: (b.cx, b.cy),
                        width: b.w,
                        height: b.h,
                        ch,
                    })
                    .collect(),
            )
        } else {
            None
        };
        out.push(LoadedSample {
            id: rec.id,
            label: rec.label,
            target,
            pixels,
            boxes,
            baseline_kind: rec.baseline_kind,
        });
    }
    Ok(out)
}

/// Corpus sanity checks: unique ids, in-alphabet labels, box/label
/// correspondence, the ≥ min_gap box-spacing invariant and full symbol
/// coverage of the training split.
pub fn lint_corpus(corpus: &Corpus, min_gap: f64) -> Result<()> {
    let mut ids = HashSet::new();
    for s in corpus.train.iter().chain(&corpus.test) {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::Data(format!("duplicate sample id {}", s.id)));
        }
        if s.label.is_empty() || s.label.len() > 20 {
            return Err(Error::Data(format!("sample {}: label length out of range", s.id)));
        }
        if s.pixels.len() != corpus.image_size.0 * corpus.image_size.1 {
            return Err(Error::Data(format!("sample {}: wrong image size", s.id)));
        }
        if let Some(boxes) = &s.boxes {
            if boxes.len() != s.label.chars().count() {
                return Err(Error::Data(format!("sample {}: box/label mismatch", s.id)));
            }
            for pair in boxes.windows(2) {
                let gap = rect_gap(&pair[0], &pair[1]);
                if gap < min_gap {
                    return Err(Error::Data(format!(
                        "sample {}: adjacent boxes {:.2}px apart (< {min_gap})",
                        s.id, gap
                    )));
                }
            }
        }
    }
    let mut present = [false; 36];
    for s in &corpus.train {
        for c in s.label.chars() {
            present[Alphabet::index_of(c).unwrap()] = true;
        }
    }
    if let Some(missing) = (0..36).find(|&i| !present[i]) {
        return Err(Error::Data(format!(
            "training split never shows symbol {:?}",
            Alphabet::char_at(missing).unwrap()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let spec = SampleSpec {
            label: Some("ab3".into()),
            baseline_kind: Some(BaselineKind::Arc),
            noise_sigma: 0.05,
        };
        let p = GenParams::default();
        let a = render_sample(99, &spec, &p).unwrap();
        let b = render_sample(99, &spec, &p).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.boxes, b.boxes);
    }

    #[test]
    fn flat_baseline_aligns_centers() {
        // slope is derived from the seed; force straight and check centers
        // lie within a half pixel of one shared row when slope ≈ 0 cases
        // arise; instead verify directly that box y-extents agree with the
        // zero-rotation rasterization by rendering with max_slope = 0.
        let spec = SampleSpec {
            label: Some("7k2m".into()),
            baseline_kind: Some(BaselineKind::Straight),
            noise_sigma: 0.0,
        };
        let p = GenParams { max_slope: 0.0, ..GenParams::default() };
        let s = render_sample(5, &spec, &p).unwrap();
        let ys: Vec<f64> = s.boxes.iter().map(|b| b.center.1).collect();
        for y in &ys {
            assert!((y - ys[0]).abs() <= 1.0, "centers not aligned: {ys:?}");
        }
    }

    #[test]
    fn ink_lies_inside_recorded_boxes() {
        let p = GenParams::default();
        for seed in 0..25u64 {
            let spec = SampleSpec { label: None, baseline_kind: None, noise_sigma: 0.0 };
            let s = render_sample(seed, &spec, &p).unwrap();
            let (ih, iw) = p.image_size;
            for py in 0..ih {
                for px in 0..iw {
                    if s.image[py * iw + px] > 0.0 {
                        let cx = px as f64 + 0.5;
                        let cy = py as f64 + 0.5;
                        let inside = s.boxes.iter().any(|b| {
                            (cx - b.center.0).abs() <= b.width / 2.0
                                && (cy - b.center.1).abs() <= b.height / 2.0
                        });
                        assert!(inside, "ink at ({px},{py}) outside all boxes (seed {seed})");
                    }
                }
            }
        }
    }

    #[test]
    fn adjacent_boxes_respect_min_gap() {
        let p = GenParams::default();
        for seed in 100..160u64 {
            let spec = SampleSpec { label: None, baseline_kind: None, noise_sigma: 0.0 };
            let s = render_sample(seed, &spec, &p).unwrap();
            for pair in s.boxes.windows(2) {
                assert!(
                    rect_gap(&pair[0], &pair[1]) >= p.min_gap,
                    "seed {seed}: gap {} < {}",
                    rect_gap(&pair[0], &pair[1]),
                    p.min_gap
                );
            }
        }
    }

    #[test]
    fn unfittable_label_errors() {
        let spec = SampleSpec {
            label: Some("aaaaaaaaaaaaaaaaaaaa".into()), // 20 chars
            baseline_kind: Some(BaselineKind::Straight),
            noise_sigma: 0.0,
        };
        let err = render_sample(1, &spec, &GenParams::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn pgm_round_trip_exact() {
        let dir = std::env::temp_dir().join(format!("capnet-pgm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let data: Vec<u8> = (0..64u32 * 32).map(|i| (i * 7 % 256) as u8).collect();
        write_pgm(&path, 64, 32, &data).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (64, 32));
        assert_eq!(back, data);
        fs::remove_dir_all(&dir).ok();
    }
}
