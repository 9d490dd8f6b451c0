//! Residual CNN backbone with top-down feature fusion, producing shared
//! feature maps at one quarter of the input resolution, plus the two-layer
//! re-encoder applied before pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Binder, ConvLayer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Backbone hyperparameters. The desk-scale defaults replace the full-scale
/// reference design (50-layer residual net, 256 fusion channels) with a
/// gradient-checkable network; `fpn_channels: 256` is the full-scale value.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// 1 (grayscale, default) or 3.
    pub in_channels: usize,
    /// Channel widths of the strided residual stages at /2, /4, /8, ...
    pub stage_channels: Vec<usize>,
    /// Channel count of the fused output maps.
    pub fpn_channels: usize,
    /// (height, width) of input images.
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
            fpn_channels: 32,
            input_size: (64, 256),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.stage_channels.len() < 2 {
            return Err(Error::Config("need at least 2 backbone stages".into()));
        }
        if self.fpn_channels == 0 {
            return Err(Error::Config("fpn_channels must be positive".into()));
        }
        let div = 1 << self.stage_channels.len();
        let (h, w) = self.input_size;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by {div} for {} stages",
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial size of the shared feature maps (stride 4).
    pub fn map_size(&self) -> (usize, usize) {
        (self.input_size.0 / 4, self.input_size.1 / 4)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

impl ResBlock {
    fn init(ch: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: ConvLayer::init(ch, ch, 3, 1, 1, rng),
            conv2: ConvLayer::init(ch, ch, 3, 1, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, b, &format!("{prefix}.conv1"), x)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, b, &format!("{prefix}.conv2"), y)?;
        let s = tape.add(x, y)?;
        Ok(tape.relu(s))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }
}

#[derive(Debug, Clone)]
struct Stage {
    /// Strided 3×3 entry conv; the first stage reuses the stem's stride.
    down: Option<ConvLayer>,
    blocks: Vec<ResBlock>,
}

/// Feature encoder. Stage i produces features at stride 2^(i+1); laterals
/// and bilinear upsampling fuse everything from the deepest stage down to
/// stride 4, followed by a 3×3 smoothing conv.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvLayer,
    stages: Vec<Stage>,
    /// Lateral 1×1 convs for stage indices 1.. (stride 4 and deeper).
    laterals: Vec<ConvLayer>,
    smooth: ConvLayer,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let sc = &config.stage_channels;
        let stem = ConvLayer::init(config.in_channels, sc[0], 3, 2, 1, rng);
        let mut stages = Vec::new();
        for (i, &ch) in sc.iter().enumerate() {
            let down = if i == 0 {
                None
            } else {
                Some(ConvLayer::init(sc[i - 1], ch, 3, 2, 1, rng))
            };
            stages.push(Stage { down, blocks: vec![ResBlock::init(ch, rng), ResBlock::init(ch, rng)] });
        }
        let laterals = sc[1..]
            .iter()
            .map(|&ch| ConvLayer::init(ch, config.fpn_channels, 1, 1, 0, rng))
            .collect();
        let smooth = ConvLayer::init(config.fpn_channels, config.fpn_channels, 3, 1, 1, rng);
        Ok(Backbone { config, stem, stages, laterals, smooth })
    }

    /// image [N, in_channels, H, W] → shared maps [N, fpn, H/4, W/4].
    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        let (h, w) = self.config.input_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != h || s[3] != w {
            return Err(Error::dimension(
                "backbone_forward",
                format!("image {s:?}, expected [N, {}, {h}, {w}]", self.config.in_channels),
            ));
        }
        let x = self.stem.forward(tape, b, "backbone.stem", image)?;
        let mut x = tape.relu(x);
        let mut feats = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                let d = down.forward(tape, b, &format!("backbone.stage{i}.down"), x)?;
                x = tape.relu(d);
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                x = block.forward(tape, b, &format!("backbone.stage{i}.block{j}"), x)?;
            }
            feats.push(x);
        }
        // Top-down: deepest lateral first, upsample ×2 and add the next
        // lateral until the stride-4 stage (stage index 1).
        let deepest = feats.len() - 1;
        let mut p = self.laterals[deepest - 1].forward(
            tape,
            b,
            &format!("backbone.lateral{deepest}"),
            feats[deepest],
        )?;
        for i in (1..deepest).rev() {
            let up = tape.bilinear_upsample(p, 2)?;
            let lat =
                self.laterals[i - 1].forward(tape, b, &format!("backbone.lateral{i}"), feats[i])?;
            p = tape.add(lat, up)?;
        }
        self.smooth.forward(tape, b, "backbone.smooth", p)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit("backbone.stem", f);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                down.visit(&format!("backbone.stage{i}.down"), f);
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit(&format!("backbone.stage{i}.block{j}"), f);
            }
        }
        for (i, lat) in self.laterals.iter().enumerate() {
            lat.visit(&format!("backbone.lateral{}", i + 1), f);
        }
        self.smooth.visit("backbone.smooth", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut("backbone.stem", f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if let Some(down) = &mut stage.down {
                down.visit_mut(&format!("backbone.stage{i}.down"), f);
            }
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("backbone.stage{i}.block{j}"), f);
            }
        }
        for (i, lat) in self.laterals.iter_mut().enumerate() {
            lat.visit_mut(&format!("backbone.lateral{}", i + 1), f);
        }
        self.smooth.visit_mut("backbone.smooth", f);
    }
}

/// Two 3×3 conv + ReLU layers that further encode the shared maps before
/// pooling; anchoring keeps reading the un-reencoded maps.
#[derive(Debug, Clone)]
pub struct Reencoder {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

impl Reencoder {
    pub fn init(fpn_channels: usize, rng: &mut impl Rng) -> Self {
        Reencoder {
            conv1: ConvLayer::init(fpn_channels, fpn_channels, 3, 1, 1, rng),
            conv2: ConvLayer::init(fpn_channels, fpn_channels, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binder, shared: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, b, "reencode.conv1", shared)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, b, "reencode.conv2", y)?;
        Ok(tape.relu(y))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit("reencode.conv1", f);
        self.conv2.visit("reencode.conv2", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut("reencode.conv1", f);
        self.conv2.visit_mut("reencode.conv2", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = BackboneConfig {
            input_size: (16, 32),
            stage_channels: vec![4, 6, 8],
            fpn_channels: 5,
            ..BackboneConfig::default()
        };
        let bb = Backbone::init(config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let img = tape.zeros(&[2, 1, 16, 32]);
        let out = bb.forward(&mut tape, &mut binder, img).unwrap();
        assert_eq!(tape.shape(out), &[2, 5, 4, 8]);
    }

    #[test]
    fn zero_image_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = BackboneConfig {
            input_size: (16, 16),
            stage_channels: vec![3, 4],
            fpn_channels: 4,
            ..BackboneConfig::default()
        };
        let bb = Backbone::init(config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let img = tape.zeros(&[1, 1, 16, 16]);
        let out = bb.forward(&mut tape, &mut binder, img).unwrap();
        assert!(tape.value(out).iter().all(|v| v.is_finite()));
        // bias-driven: some outputs should be nonzero
        assert!(tape.value(out).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::init(BackboneConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let img = tape.zeros(&[1, 1, 32, 256]);
        assert!(matches!(
            bb.forward(&mut tape, &mut binder, img),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = BackboneConfig {
            input_size: (16, 32),
            stage_channels: vec![4, 6],
            fpn_channels: 6,
            ..BackboneConfig::default()
        };
        let bb = Backbone::init(config, &mut rng).unwrap();
        let img_data: Vec<f64> = (0..16 * 32).map(|i| (i as f64 * 0.01).sin().abs()).collect();
        let run = || {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let img = tape.constant(img_data.clone(), vec![1, 1, 16, 32]).unwrap();
            let out = bb.forward(&mut tape, &mut binder, img).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stride_invariant_for_divisible_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w) in [(16, 24), (24, 40), (32, 64)] {
            let config = BackboneConfig {
                input_size: (h, w),
                stage_channels: vec![3, 4, 5],
                fpn_channels: 4,
                ..BackboneConfig::default()
            };
            let bb = Backbone::init(config, &mut rng).unwrap();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let img = tape.zeros(&[1, 1, h, w]);
            let out = bb.forward(&mut tape, &mut binder, img).unwrap();
            assert_eq!(tape.shape(out), &[1, 4, h / 4, w / 4]);
        }
    }

    #[test]
    fn reencode_identity_kernels_equal_double_relu() {
        let fpn = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut re = Reencoder::init(fpn, &mut rng);
        // center-tap identity kernels, zero bias
        for conv in [&mut re.conv1, &mut re.conv2] {
            let mut k = vec![0.0; fpn * fpn * 9];
            for ch in 0..fpn {
                k[ch * fpn * 9 + ch * 9 + 4] = 1.0;
            }
            conv.kernel = Tensor::new(vec![fpn, fpn, 3, 3], k).unwrap().with_requires_grad(true);
            conv.bias = Tensor::zeros(&[fpn]).with_requires_grad(true);
        }
        let data: Vec<f64> = (0..fpn * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(data.clone(), vec![1, fpn, 4, 4]).unwrap();
        let y = re.forward(&mut tape, &mut binder, x).unwrap();
        let expect: Vec<f64> = data.iter().map(|&v| v.max(0.0)).collect();
        for (got, want) in tape.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reencode_preserves_shape_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let re = Reencoder::init(4, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x_t = Tensor::uniform_init(&[1, 4, 4, 8], 1, &mut rng);
        let x = tape.leaf(&x_t);
        let y = re.forward(&mut tape, &mut binder, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 8]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();
        assert!(gx.iter().any(|&v| v != 0.0));
    }
}
