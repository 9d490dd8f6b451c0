//! Character anchoring: a two-layer CNN head that predicts a per-pixel
//! character-center probability map over the shared feature maps, and
//! construction of binary ground-truth maps from character boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Binder, ConvLayer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnchoringConfig {
    /// Linear scale applied to each character box about its center before
    /// rasterizing onto the stride-4 grid.
    pub shrink: f64,
    /// Stride of the heat-map grid relative to input pixels.
    pub stride: usize,
}

impl Default for AnchoringConfig {
    fn default() -> Self {
        AnchoringConfig { shrink: 0.25, stride: 4 }
    }
}

impl AnchoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::Config(format!("shrink must be in (0,1], got {}", self.shrink)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(())
    }
}

/// One annotated character: axis-aligned box in input-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharBox {
    pub center: (f64, f64),
    pub width: f64,
    pub height: f64,
    pub ch: char,
}

/// Heat map over the shared-feature grid: probabilities with the pre-sigmoid
/// logits retained for the localization loss.
#[derive(Debug, Clone)]
pub struct AnchorHeatMap {
    pub probabilities: Tensor,
    pub logits: Tensor,
}

/// Tape-resident heat map produced by [`Cam::forward`].
#[derive(Clone, Copy)]
pub struct HeatMapVars {
    pub logits: Var,
    pub probabilities: Var,
}

/// Two-layer anchoring head: 3×3 conv (shared width, ReLU) then a 1×1
/// pixel-wise classification conv to a single sigmoid channel.
#[derive(Debug, Clone)]
pub struct Cam {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

impl Cam {
    pub fn init(fpn_channels: usize, rng: &mut impl Rng) -> Self {
        Cam {
            conv1: ConvLayer::init(fpn_channels, fpn_channels, 3, 1, 1, rng),
            conv2: ConvLayer::init(fpn_channels, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, shared: Var) -> Result<HeatMapVars> {
        let y = self.conv1.forward(tape, b, "cam.conv1", shared)?;
        let y = tape.relu(y);
        let logits = self.conv2.forward(tape, b, "cam.conv2", y)?;
        let probabilities = tape.sigmoid(logits);
        Ok(HeatMapVars { logits, probabilities })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit("cam.conv1", f);
        self.conv2.visit("cam.conv2", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut("cam.conv1", f);
        self.conv2.visit_mut("cam.conv2", f);
    }
}

/// Rasterizes shrunk character boxes onto the stride grid as a binary
/// {0,1} map of shape [1, 1, H/stride, W/stride].
///
/// Each box is scaled about its center by `shrink`; a grid cell is positive
/// when its stride×stride pixel footprint overlaps the shrunk box. Every box
/// marks at least the cell containing its center, so tiny characters never
/// vanish. An empty box list yields an all-zero map.
pub fn make_gt_heatmap(
    boxes: &[CharBox],
    image_size: (usize, usize),
    shrink: f64,
    stride: usize,
) -> Result<Tensor> {
    if !(shrink > 0.0 && shrink <= 1.0) {
        return Err(Error::argument("make_gt_heatmap", format!("shrink {shrink} not in (0,1]")));
    }
    if stride == 0 {
        return Err(Error::argument("make_gt_heatmap", "stride must be positive"));
    }
    let (ih, iw) = image_size;
    let (gh, gw) = (ih / stride, iw / stride);
    let mut map = vec![0.0; gh * gw];
    let fs = stride as f64;
    for b in boxes {
        let (cx, cy) = b.center;
        let hw = b.width * shrink / 2.0;
        let hh = b.height * shrink / 2.0;
        let (x0, x1) = (cx - hw, cx + hw);
        let (y0, y1) = (cy - hh, cy + hh);
        // cells whose [c·s, (c+1)·s) footprint overlaps [x0, x1)
        let cx0 = ((x0 / fs).floor().max(0.0)) as usize;
        let cx1 = (((x1 / fs).ceil() as isize - 1).max(cx0 as isize) as usize).min(gw - 1);
        let cy0 = ((y0 / fs).floor().max(0.0)) as usize;
        let cy1 = (((y1 / fs).ceil() as isize - 1).max(cy0 as isize) as usize).min(gh - 1);
        for gy in cy0..=cy1.min(gh - 1) {
            for gx in cx0..=cx1.min(gw - 1) {
                map[gy * gw + gx] = 1.0;
            }
        }
        // minimum-one-cell rule: the cell containing the center
        let ccx = ((cx / fs).floor().max(0.0) as usize).min(gw - 1);
        let ccy = ((cy / fs).floor().max(0.0) as usize).min(gh - 1);
        map[ccy * gw + ccx] = 1.0;
    }
    Tensor::new(vec![1, 1, gh, gw], map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boxed(cx: f64, cy: f64, w: f64, h: f64) -> CharBox {
        CharBox { center: (cx, cy), width: w, height: h, ch: 'a' }
    }

    #[test]
    fn cam_output_matches_shared_map_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = Cam::init(6, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let shared = tape.zeros(&[1, 6, 16, 64]);
        let hm = cam.forward(&mut tape, &mut binder, shared).unwrap();
        assert_eq!(tape.shape(hm.probabilities), &[1, 1, 16, 64]);
        assert_eq!(tape.shape(hm.logits), &[1, 1, 16, 64]);
    }

    #[test]
    fn cam_probabilities_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = Cam::init(4, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let shared_t = Tensor::uniform_init(&[1, 4, 8, 8], 1, &mut rng);
        let shared = tape.leaf(&shared_t);
        let hm = cam.forward(&mut tape, &mut binder, shared).unwrap();
        assert!(tape.value(hm.probabilities).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn gt_heatmap_center_box_projection() {
        // 32×32 box at (128,32), shrink 0.25 → 8×8 px → 2×2 cells around (32,8)
        let map = make_gt_heatmap(&[boxed(128.0, 32.0, 32.0, 32.0)], (64, 256), 0.25, 4).unwrap();
        let data = map.data();
        let gw = 64;
        let mut positives = Vec::new();
        for gy in 0..16 {
            for gx in 0..64 {
                if data[gy * gw + gx] == 1.0 {
                    positives.push((gx, gy));
                }
            }
        }
        positives.sort();
        assert_eq!(positives, vec![(31, 7), (31, 8), (32, 7), (32, 8)]);
    }

    #[test]
    fn gt_heatmap_minimum_one_cell() {
        let map = make_gt_heatmap(&[boxed(98.0, 30.0, 0.4, 0.4)], (64, 256), 0.25, 4).unwrap();
        let ones: usize = map.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 1);
        // the one positive cell contains the center
        assert_eq!(map.data()[(30 / 4) * 64 + 98 / 4], 1.0);
    }

    #[test]
    fn gt_heatmap_disjoint_boxes_stay_disjoint() {
        let map = make_gt_heatmap(
            &[boxed(40.0, 20.0, 16.0, 16.0), boxed(200.0, 40.0, 16.0, 16.0)],
            (64, 256),
            0.25,
            4,
        )
        .unwrap();
        let data = map.data();
        // two positive regions, separated by a wide all-zero band
        let left: f64 = (0..16).map(|gy| (0..32).map(|gx| data[gy * 64 + gx]).sum::<f64>()).sum();
        let right: f64 = (0..16).map(|gy| (32..64).map(|gx| data[gy * 64 + gx]).sum::<f64>()).sum();
        assert!(left >= 1.0 && right >= 1.0);
        let mid: f64 = (0..16).map(|gy| (20..40).map(|gx| data[gy * 64 + gx]).sum::<f64>()).sum();
        assert_eq!(mid, 0.0);
    }

    #[test]
    fn gt_heatmap_empty_boxes_all_zero() {
        let map = make_gt_heatmap(&[], (64, 256), 0.25, 4).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert_eq!(map.shape(), &[1, 1, 16, 64]);
    }

    #[test]
    fn gt_positive_cells_subset_of_unshrunk_coverage() {
        // positives of the shrunk map must lie inside the unshrunk footprint
        let boxes =
            vec![boxed(50.5, 21.0, 18.0, 20.0), boxed(90.0, 33.0, 14.0, 16.0)];
        let shrunk = make_gt_heatmap(&boxes, (64, 256), 0.25, 4).unwrap();
        let full = make_gt_heatmap(&boxes, (64, 256), 1.0, 4).unwrap();
        for (s, f) in shrunk.data().iter().zip(full.data()) {
            assert!(*s <= *f);
        }
    }
}
