//! Full recognizer: backbone → anchoring head → re-encoder → anchor pooling
//! → attentional encoder-decoder, plus single-image inference.

use serde::{Deserialize, Serialize};

use crate::anchoring::{make_gt_heatmap, AnchorHeatMap, Cam, CharBox, HeatMapVars};
use crate::backbone::{Backbone, BackboneConfig, Reencoder};
use crate::error::{Error, Result};
use crate::layers::Binder;
use crate::pooling::{pool, CharAnchorLine, FeatureSequence, PoolMode, PoolingConfig};
use crate::rng::{rng_for, STREAM_INIT};
use crate::seq2seq::{DecodeResult, EncoderOutput, Seq2Seq, Seq2SeqConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::anchoring::AnchoringConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchoring: AnchoringConfig,
    pub pooling: PoolingConfig,
    pub seq2seq: Seq2SeqConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchoring.validate()?;
        self.pooling.validate()?;
        self.seq2seq.validate()
    }
}

/// How pooling obtains anchors for one training sample.
pub enum SamplePooling<'a> {
    /// Annotated character centers in input-pixel coordinates.
    GroundTruthCenters { centers: &'a [(f64, f64)] },
    Predicted,
}

/// Tape-resident intermediate results of one sample's forward pass.
pub struct SampleForward {
    pub heat: HeatMapVars,
    pub seq: FeatureSequence,
    pub cal: CharAnchorLine,
    pub enc: EncoderOutput,
}

/// Inference output for one image.
#[derive(Debug, Clone)]
pub struct Recognition {
    pub text: String,
    pub decode: DecodeResult,
    pub cal: CharAnchorLine,
    pub fallback: bool,
    pub heatmap: AnchorHeatMap,
}

#[derive(Debug, Clone)]
pub struct CapnetModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub reencoder: Reencoder,
    pub cam: Cam,
    pub seq2seq: Seq2Seq,
}

impl CapnetModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, STREAM_INIT, 0);
        let backbone = Backbone::init(config.backbone.clone(), &mut rng)?;
        let reencoder = Reencoder::init(config.backbone.fpn_channels, &mut rng);
        let cam = Cam::init(config.backbone.fpn_channels, &mut rng);
        let seq2seq =
            Seq2Seq::init(config.seq2seq.clone(), config.backbone.fpn_channels, &mut rng)?;
        Ok(CapnetModel { config, backbone, reencoder, cam, seq2seq })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(f);
        self.reencoder.visit(f);
        self.cam.visit(f);
        self.seq2seq.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(f);
        self.reencoder.visit_mut(f);
        self.cam.visit_mut(f);
        self.seq2seq.visit_mut(f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n: &str, _: &Tensor| names.push(n.to_string()));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_: &str, t: &Tensor| n += t.numel());
        n
    }

    /// Maps input-pixel coordinates onto the feature grid.
    pub fn to_grid(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.config.anchoring.stride as f64;
        (p.0 / s, p.1 / s)
    }

    /// Ground-truth heat map for annotated boxes, at this model's shrink
    /// factor and stride.
    pub fn gt_heatmap(&self, boxes: &[CharBox]) -> Result<Tensor> {
        make_gt_heatmap(
            boxes,
            self.config.backbone.input_size,
            self.config.anchoring.shrink,
            self.config.anchoring.stride,
        )
    }

    /// One sample's forward pass up to the encoder. `image` is [1, C, H, W]
    /// with values in [0,1].
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        image: &Tensor,
        pooling: SamplePooling<'_>,
    ) -> Result<SampleForward> {
        let img = tape.leaf(image);
        let shared = self.backbone.forward(tape, binder, img)?;
        let heat = self.cam.forward(tape, binder, shared)?;
        let reencoded = self.reencoder.forward(tape, binder, shared)?;

        let (seq, cal) = match pooling {
            SamplePooling::GroundTruthCenters { centers } => {
                let grid_centers: Vec<(f64, f64)> =
                    centers.iter().map(|&c| self.to_grid(c)).collect();
                pool(
                    tape,
                    reencoded,
                    None,
                    PoolMode::GroundTruth { centers: &grid_centers },
                    &self.config.pooling,
                )?
            }
            SamplePooling::Predicted => {
                // Anchor extraction reads probabilities as plain values:
                // anchor coordinates carry no gradient.
                let probs = Tensor::new(
                    tape.shape(heat.probabilities).to_vec(),
                    tape.value(heat.probabilities).to_vec(),
                )?;
                pool(tape, reencoded, Some(&probs), PoolMode::Predicted, &self.config.pooling)?
            }
        };
        let m = self.config.pooling.markers;
        let c = self.config.backbone.fpn_channels;
        let flat = tape.reshape(seq.seq, &[m, c])?;
        let enc = self.seq2seq.encode(tape, binder, flat)?;
        Ok(SampleForward { heat, seq, cal, enc })
    }

    /// Recognizes a single [1, C, H, W] image with greedy decoding.
    pub fn recognize(&self, image: &Tensor) -> Result<Recognition> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let fwd = self.forward_sample(&mut tape, &mut binder, image, SamplePooling::Predicted)?;
        let decode = self.seq2seq.decode_greedy(&mut tape, &mut binder, &fwd.enc)?;
        let heatmap = AnchorHeatMap {
            probabilities: Tensor::new(
                tape.shape(fwd.heat.probabilities).to_vec(),
                tape.value(fwd.heat.probabilities).to_vec(),
            )?,
            logits: Tensor::new(
                tape.shape(fwd.heat.logits).to_vec(),
                tape.value(fwd.heat.logits).to_vec(),
            )?,
        };
        Ok(Recognition {
            text: decode.text(),
            fallback: fwd.seq.source == crate::pooling::FeatureSource::Fallback,
            cal: fwd.cal,
            decode,
            heatmap,
        })
    }
}

/// Converts quantized grayscale pixels into a [1,1,h,w] unit-range tensor.
pub fn image_tensor(pixels: &[u8], h: usize, w: usize) -> Result<Tensor> {
    if pixels.len() != h * w {
        return Err(Error::dimension(
            "image_tensor",
            format!("{} pixels vs {h}x{w}", pixels.len()),
        ));
    }
    Tensor::new(vec![1, 1, h, w], pixels.iter().map(|&p| p as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: (16, 32),
                stage_channels: vec![3, 4, 5],
                fpn_channels: 4,
                ..BackboneConfig::default()
            },
            pooling: PoolingConfig { markers: 7, ..PoolingConfig::default() },
            seq2seq: Seq2SeqConfig {
                enc_hidden: 6,
                dec_hidden: 12,
                attn_dim: 5,
                prev_symbol: crate::seq2seq::PrevSymbolRepr::Embedding { dim: 4 },
                ..Seq2SeqConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_and_forward_tiny_model() {
        let model = CapnetModel::init(tiny_config(), 7).unwrap();
        assert!(model.num_params() > 0);
        let image = Tensor::zeros(&[1, 1, 16, 32]);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let fwd = model
            .forward_sample(&mut tape, &mut binder, &image, SamplePooling::Predicted)
            .unwrap();
        assert_eq!(tape.shape(fwd.seq.seq), &[1, 7, 4]);
        assert_eq!(tape.shape(fwd.enc.h), &[7, 12]);
    }

    #[test]
    fn recognize_is_deterministic() {
        let model = CapnetModel::init(tiny_config(), 11).unwrap();
        let pixels: Vec<u8> = (0..16 * 32).map(|i| (i * 7 % 251) as u8).collect();
        let image = image_tensor(&pixels, 16, 32).unwrap();
        let a = model.recognize(&image).unwrap();
        let b = model.recognize(&image).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.cal.markers, b.cal.markers);
    }

    #[test]
    fn ground_truth_pooling_threads_centers() {
        let model = CapnetModel::init(tiny_config(), 5).unwrap();
        let image = Tensor::zeros(&[1, 1, 16, 32]);
        let centers = [(8.0, 8.0), (24.0, 8.0)];
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let fwd = model
            .forward_sample(
                &mut tape,
                &mut binder,
                &image,
                SamplePooling::GroundTruthCenters { centers: &centers },
            )
            .unwrap();
        assert_eq!(fwd.cal.anchors.len(), 2);
        // centers mapped onto the /4 grid
        assert!((fwd.cal.anchors[0].x - 2.0).abs() < 1e-12);
        assert!((fwd.cal.anchors[1].x - 6.0).abs() < 1e-12);
    }

    #[test]
    fn param_names_are_unique() {
        let model = CapnetModel::init(tiny_config(), 3).unwrap();
        let mut names = model.param_names();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
    }
}
