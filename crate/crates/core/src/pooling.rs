//! Anchor pooling: groups heat-map responses into character anchors, builds
//! the character anchor line (CAL), resamples it to M evenly spaced markers
//! and bilinearly gathers an M×C feature sequence from the re-encoded maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleRule {
    /// Markers at equal arc-length steps along the polyline (default).
    ArcLength,
    /// Markers at equal steps of the fractional anchor index.
    IndexUniform,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingConfig {
    /// Number of CAL markers (M).
    pub markers: usize,
    /// Heat-map binarization threshold for anchor grouping.
    pub threshold: f64,
    /// Drop components with fewer member cells than this, when set.
    pub min_mass: Option<usize>,
    pub resample: ResampleRule,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig { markers: 36, threshold: 0.5, min_mass: None, resample: ResampleRule::ArcLength }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.markers < 2 {
            return Err(Error::Config("markers must be >= 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0,1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// One detected character center on the feature grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharacterAnchor {
    pub x: f64,
    pub y: f64,
    /// Number of member cells of the grouped component.
    pub mass: usize,
}

/// Ordered polyline through anchors plus its uniformly resampled markers.
#[derive(Debug, Clone, PartialEq)]
pub struct CharAnchorLine {
    pub anchors: Vec<CharacterAnchor>,
    pub markers: Vec<(f64, f64)>,
    pub total_arc_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    PredictedAnchors,
    GroundTruthAnchors,
    /// Default horizontal line used when no anchors were detected.
    Fallback,
}

/// M×C feature sequence gathered along a CAL, tape shape [1, M, C].
#[derive(Clone, Copy)]
pub struct FeatureSequence {
    pub seq: Var,
    pub source: FeatureSource,
}

/// Where pooling takes its anchors from.
pub enum PoolMode<'a> {
    /// Group thresholded heat-map responses.
    Predicted,
    /// Use annotated character centers, already on the feature grid.
    GroundTruth { centers: &'a [(f64, f64)] },
}

/// Binarizes the heat map at `threshold` and aggregates 8-connected positive
/// responses; each component becomes one anchor at the unweighted centroid
/// of its member cell centers. Anchors are sorted left to right (ties by y).
pub fn group_anchors(probabilities: &Tensor, threshold: f64) -> Result<Vec<CharacterAnchor>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::argument("group_anchors", format!("threshold {threshold} not in (0,1)")));
    }
    let shape = probabilities.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::dimension(
            "group_anchors",
            format!("expected a single [h,w] map, got {shape:?}"),
        ));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let data = probabilities.data();
    let mut visited = vec![false; h * w];
    let mut anchors = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if visited[start] || data[start] <= threshold {
            continue;
        }
        // flood fill one component
        let mut sum_x = 0.0;
        let mut sum_y = 0.0;
        let mut mass = 0usize;
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (cy, cx) = (idx / w, idx % w);
            sum_x += cx as f64;
            sum_y += cy as f64;
            mass += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if !visited[nidx] && data[nidx] > threshold {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        anchors.push(CharacterAnchor {
            x: sum_x / mass as f64,
            y: sum_y / mass as f64,
            mass,
        });
    }
    sort_anchors(&mut anchors);
    Ok(anchors)
}

fn sort_anchors(anchors: &mut [CharacterAnchor]) {
    anchors.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
}

/// Builds the CAL through the (internally sorted) anchors and resamples it
/// to exactly `m` markers.
///
/// With one anchor the line is a horizontal segment of half-width 4 grid
/// cells centered on it, clamped to the grid; with none it spans the full
/// grid width at the vertical center.
pub fn build_cal(
    anchors: &[CharacterAnchor],
    m: usize,
    grid: (usize, usize),
    rule: ResampleRule,
) -> Result<CharAnchorLine> {
    if m < 2 {
        return Err(Error::argument("build_cal", format!("need at least 2 markers, got {m}")));
    }
    let (gw, gh) = grid;
    let max_x = (gw - 1) as f64;
    let mut sorted = anchors.to_vec();
    sort_anchors(&mut sorted);

    let path: Vec<(f64, f64)> = match sorted.len() {
        0 => {
            let y = (gh - 1) as f64 / 2.0;
            vec![(0.0, y), (max_x, y)]
        }
        1 => {
            let a = sorted[0];
            vec![((a.x - 4.0).max(0.0), a.y), ((a.x + 4.0).min(max_x), a.y)]
        }
        _ => sorted.iter().map(|a| (a.x, a.y)).collect(),
    };

    let markers = match rule {
        ResampleRule::ArcLength => resample_arc_length(&path, m),
        ResampleRule::IndexUniform => resample_index_uniform(&path, m),
    };
    let total_arc_length = polyline_length(&path);
    Ok(CharAnchorLine { anchors: sorted, markers, total_arc_length })
}

pub fn polyline_length(path: &[(f64, f64)]) -> f64 {
    path.windows(2).map(|s| (s[1].0 - s[0].0).hypot(s[1].1 - s[0].1)).sum()
}

fn resample_arc_length(path: &[(f64, f64)], m: usize) -> Vec<(f64, f64)> {
    let mut cum = Vec::with_capacity(path.len());
    cum.push(0.0);
    for seg in path.windows(2) {
        let len = (seg[1].0 - seg[0].0).hypot(seg[1].1 - seg[0].1);
        cum.push(cum.last().unwrap() + len);
    }
    let total = *cum.last().unwrap();
    let nseg = path.len() - 1;
    let mut markers = Vec::with_capacity(m);
    let mut j = 0usize;
    for k in 0..m {
        let target = total * k as f64 / (m - 1) as f64;
        while j + 1 < nseg && cum[j + 1] < target {
            j += 1;
        }
        let seg_len = cum[j + 1] - cum[j];
        let t = if seg_len > 0.0 { ((target - cum[j]) / seg_len).clamp(0.0, 1.0) } else { 0.0 };
        let (x0, y0) = path[j];
        let (x1, y1) = path[j + 1];
        markers.push((x0 + (x1 - x0) * t, y0 + (y1 - y0) * t));
    }
    markers
}

fn resample_index_uniform(path: &[(f64, f64)], m: usize) -> Vec<(f64, f64)> {
    let last = path.len() - 1;
    (0..m)
        .map(|k| {
            let u = last as f64 * k as f64 / (m - 1) as f64;
            let i = (u.floor() as usize).min(last.saturating_sub(1));
            let t = u - i as f64;
            let (x0, y0) = path[i];
            let (x1, y1) = path[i + 1];
            (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t)
        })
        .collect()
}

/// Bilinearly samples `field` ([1,C,H,W]) at the CAL markers, concatenating
/// the per-marker vectors in order into a [1, M, C] sequence. Gradients flow
/// into the field; marker coordinates are constants.
pub fn gather_features(
    tape: &mut Tape,
    field: Var,
    cal: &CharAnchorLine,
    source: FeatureSource,
) -> Result<FeatureSequence> {
    let seq = tape.gather_bilinear(field, &cal.markers)?;
    Ok(FeatureSequence { seq, source })
}

/// Composes anchor extraction, CAL construction and feature gathering on
/// the re-encoded field. Returns the CAL alongside for analysis.
pub fn pool(
    tape: &mut Tape,
    reencoded: Var,
    heatmap: Option<&Tensor>,
    mode: PoolMode<'_>,
    cfg: &PoolingConfig,
) -> Result<(FeatureSequence, CharAnchorLine)> {
    let shape = tape.shape(reencoded);
    if shape.len() != 4 {
        return Err(Error::dimension("pool", format!("field must be 4-d, got {shape:?}")));
    }
    let grid = (shape[3], shape[2]);
    let (anchors, gt_mode) = match mode {
        PoolMode::Predicted => {
            let probs = heatmap
                .ok_or_else(|| Error::argument("pool", "Predicted mode requires a heat map"))?;
            let mut anchors = group_anchors(probs, cfg.threshold)?;
            if let Some(min_mass) = cfg.min_mass {
                anchors.retain(|a| a.mass >= min_mass);
            }
            (anchors, false)
        }
        PoolMode::GroundTruth { centers } => (
            centers
                .iter()
                .map(|&(x, y)| CharacterAnchor { x, y, mass: 1 })
                .collect(),
            true,
        ),
    };
    let source = if anchors.is_empty() {
        FeatureSource::Fallback
    } else if gt_mode {
        FeatureSource::GroundTruthAnchors
    } else {
        FeatureSource::PredictedAnchors
    };
    let cal = build_cal(&anchors, cfg.markers, grid, cfg.resample)?;
    let seq = gather_features(tape, reencoded, &cal, source)?;
    Ok((seq, cal))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(cells: &[(usize, usize)], h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; h * w];
        for &(x, y) in cells {
            data[y * w + x] = 1.0;
        }
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn group_empty_map_yields_no_anchors() {
        let map = Tensor::zeros(&[1, 16, 64]);
        assert!(group_anchors(&map, 0.5).unwrap().is_empty());
    }

    #[test]
    fn group_two_blocks_centroids_in_order() {
        // 2×2 blocks with corners at (1,1) and (10,5)
        let cells = [
            (1, 1), (2, 1), (1, 2), (2, 2),
            (10, 5), (11, 5), (10, 6), (11, 6),
        ];
        let map = map_from(&cells, 16, 64);
        let anchors = group_anchors(&map, 0.5).unwrap();
        assert_eq!(anchors.len(), 2);
        assert_eq!((anchors[0].x, anchors[0].y, anchors[0].mass), (1.5, 1.5, 4));
        assert_eq!((anchors[1].x, anchors[1].y, anchors[1].mass), (10.5, 5.5, 4));
    }

    #[test]
    fn group_l_shape_is_single_component_with_mean_centroid() {
        let cells = [(3, 3), (3, 4), (3, 5), (4, 5), (5, 5)];
        let map = map_from(&cells, 16, 64);
        let anchors = group_anchors(&map, 0.5).unwrap();
        assert_eq!(anchors.len(), 1);
        let mx = cells.iter().map(|c| c.0 as f64).sum::<f64>() / cells.len() as f64;
        let my = cells.iter().map(|c| c.1 as f64).sum::<f64>() / cells.len() as f64;
        assert!((anchors[0].x - mx).abs() < 1e-12);
        assert!((anchors[0].y - my).abs() < 1e-12);
        assert_eq!(anchors[0].mass, 5);
    }

    #[test]
    fn group_diagonal_cells_connect_under_8_connectivity() {
        let map = map_from(&[(2, 2), (3, 3), (4, 4)], 16, 64);
        assert_eq!(group_anchors(&map, 0.5).unwrap().len(), 1);
    }

    #[test]
    fn group_rejects_bad_threshold() {
        let map = Tensor::zeros(&[1, 4, 4]);
        assert!(group_anchors(&map, 0.0).is_err());
        assert!(group_anchors(&map, 1.0).is_err());
    }

    fn anchor(x: f64, y: f64) -> CharacterAnchor {
        CharacterAnchor { x, y, mass: 1 }
    }

    #[test]
    fn straight_line_markers_evenly_spaced() {
        let cal =
            build_cal(&[anchor(0.0, 8.0), anchor(63.0, 8.0)], 36, (64, 16), ResampleRule::ArcLength)
                .unwrap();
        assert_eq!(cal.markers.len(), 36);
        let step = 63.0 / 35.0;
        for (k, &(x, y)) in cal.markers.iter().enumerate() {
            assert!((x - step * k as f64).abs() < 1e-9);
            assert!((y - 8.0).abs() < 1e-12);
        }
        assert!((cal.total_arc_length - 63.0).abs() < 1e-12);
    }

    #[test]
    fn interior_collinear_anchor_changes_nothing() {
        let two = build_cal(&[anchor(0.0, 0.0), anchor(10.0, 0.0)], 36, (64, 16), ResampleRule::ArcLength)
            .unwrap();
        let three = build_cal(
            &[anchor(0.0, 0.0), anchor(5.0, 0.0), anchor(10.0, 0.0)],
            36,
            (64, 16),
            ResampleRule::ArcLength,
        )
        .unwrap();
        for (a, b) in two.markers.iter().zip(&three.markers) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn right_angle_polyline_midpoint() {
        // path (0,0)→(3,0)→(3,4), length 7; arc position 3.5 lies at (3, 0.5)
        let cal = build_cal(
            &[anchor(0.0, 0.0), anchor(3.0, 0.0), anchor(3.0, 4.0)],
            3,
            (64, 16),
            ResampleRule::ArcLength,
        )
        .unwrap();
        assert!((cal.total_arc_length - 7.0).abs() < 1e-12);
        let mid = cal.markers[1];
        assert!((mid.0 - 3.0).abs() < 1e-9 && (mid.1 - 0.5).abs() < 1e-9, "{mid:?}");
    }

    #[test]
    fn single_anchor_fallback_segment() {
        let cal = build_cal(&[anchor(30.0, 5.0)], 9, (64, 16), ResampleRule::ArcLength).unwrap();
        assert_eq!(cal.markers[0], (26.0, 5.0));
        assert_eq!(cal.markers[8], (34.0, 5.0));
        // clamped when near the border
        let cal = build_cal(&[anchor(1.0, 5.0)], 9, (64, 16), ResampleRule::ArcLength).unwrap();
        assert_eq!(cal.markers[0], (0.0, 5.0));
        assert_eq!(cal.markers[8], (5.0, 5.0));
    }

    #[test]
    fn no_anchor_fallback_spans_grid() {
        let cal = build_cal(&[], 36, (64, 16), ResampleRule::ArcLength).unwrap();
        assert_eq!(cal.markers[0], (0.0, 7.5));
        assert_eq!(cal.markers[35], (63.0, 7.5));
    }

    #[test]
    fn build_cal_rejects_m_below_two() {
        assert!(matches!(
            build_cal(&[anchor(1.0, 1.0)], 1, (64, 16), ResampleRule::ArcLength),
            Err(Error::Argument { .. })
        ));
    }

    #[test]
    fn anchor_order_does_not_matter() {
        let fwd = build_cal(
            &[anchor(2.0, 1.0), anchor(30.0, 9.0), anchor(61.0, 2.0)],
            36,
            (64, 16),
            ResampleRule::ArcLength,
        )
        .unwrap();
        let rev = build_cal(
            &[anchor(61.0, 2.0), anchor(2.0, 1.0), anchor(30.0, 9.0)],
            36,
            (64, 16),
            ResampleRule::ArcLength,
        )
        .unwrap();
        assert_eq!(fwd.markers, rev.markers);
    }

    #[test]
    fn index_uniform_rule_hits_anchor_midpoints() {
        let cal = build_cal(
            &[anchor(0.0, 0.0), anchor(1.0, 0.0), anchor(10.0, 0.0)],
            3,
            (64, 16),
            ResampleRule::IndexUniform,
        )
        .unwrap();
        // middle marker sits on the middle anchor, not at half arc length
        assert_eq!(cal.markers[1], (1.0, 0.0));
    }

    #[test]
    fn gather_at_cell_center_is_exact() {
        let (c, h, w) = (3, 8, 12);
        let data: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
        let mut tape = Tape::new();
        let field = tape.constant(data.clone(), vec![1, c, h, w]).unwrap();
        let cal = CharAnchorLine {
            anchors: vec![],
            markers: vec![(7.0, 3.0), (7.5, 3.0)],
            total_arc_length: 0.5,
        };
        let fs = gather_features(&mut tape, field, &cal, FeatureSource::PredictedAnchors).unwrap();
        assert_eq!(tape.shape(fs.seq), &[1, 2, c]);
        let vals = tape.value(fs.seq);
        for ch in 0..c {
            let exact = data[ch * h * w + 3 * w + 7];
            assert_eq!(vals[ch], exact);
            // halfway between equal rows: average of cols 7 and 8
            let avg = 0.5 * (data[ch * h * w + 3 * w + 7] + data[ch * h * w + 3 * w + 8]);
            assert!((vals[c + ch] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_ground_truth_uses_exactly_the_given_centers() {
        let mut tape = Tape::new();
        let field = tape.zeros(&[1, 4, 16, 64]);
        // heat map full of positives would give different anchors
        let noisy = Tensor::filled(&[1, 16, 64], 0.9);
        let centers = [(5.0, 8.0), (20.0, 8.0), (40.0, 8.0)];
        let cfg = PoolingConfig::default();
        let (seq, cal) = pool(
            &mut tape,
            field,
            Some(&noisy),
            PoolMode::GroundTruth { centers: &centers },
            &cfg,
        )
        .unwrap();
        assert_eq!(cal.anchors.len(), 3);
        assert_eq!(seq.source, FeatureSource::GroundTruthAnchors);
    }

    #[test]
    fn pool_all_negative_heatmap_falls_back() {
        let mut tape = Tape::new();
        let field = tape.zeros(&[1, 5, 16, 64]);
        let cold = Tensor::filled(&[1, 16, 64], 0.01);
        let cfg = PoolingConfig::default();
        let (seq, cal) = pool(&mut tape, field, Some(&cold), PoolMode::Predicted, &cfg).unwrap();
        assert_eq!(seq.source, FeatureSource::Fallback);
        assert_eq!(tape.shape(seq.seq), &[1, 36, 5]);
        assert!(cal.anchors.is_empty());
    }
}
