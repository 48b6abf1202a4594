//! Four-stage residual encoder.
//!
//! The stem (3×3 conv at stride 2, norm, ReLU, 2×2 max-pool) brings the
//! input to stride 4; stages 2–4 halve the resolution in their first block,
//! giving strides 4/8/16/32. Only the outputs of stages 1, 3 and 4 are
//! exposed.

use crate::error::{Error, Result};
use crate::layers::{Conv, Norm};
use crate::nn::{self, NormMode};
use crate::params::{ParamStore, Session};
use crate::tensor::Var;

/// Input sizes must be multiples of the deepest stride.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub input_channels: usize,
    pub norm: NormMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_widths: [32, 64, 128, 256],
            blocks_per_stage: [1, 1, 1, 1],
            input_channels: 3,
            norm: NormMode::Batch,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }
}

/// Encoder taps: stage 1 (stride 4), stage 3 (stride 16), stage 4 (stride 32).
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub s1: Var,
    pub s3: Var,
    pub s4: Var,
}

/// Two 3×3 convolutions with a shortcut, post-activation.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    /// Zero-initialized scale so the block starts as its shortcut.
    pub norm2: Norm,
    pub down: Option<(Conv, Norm)>,
}

impl BasicBlock {
    fn new(prefix: &str, in_ch: usize, out_ch: usize, stride: usize, mode: NormMode) -> Self {
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv::new(format!("{prefix}.down.conv"), in_ch, out_ch, 1).stride(stride),
                Norm::new(format!("{prefix}.down.norm"), out_ch, mode),
            )
        });
        BasicBlock {
            conv1: Conv::new(format!("{prefix}.conv1"), in_ch, out_ch, 3).stride(stride),
            norm1: Norm::new(format!("{prefix}.norm1"), out_ch, mode),
            conv2: Conv::new(format!("{prefix}.conv2"), out_ch, out_ch, 3),
            norm2: Norm::new(format!("{prefix}.norm2"), out_ch, mode).zero_init(),
            down,
        }
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.conv1.init(store, seed)?;
        self.norm1.init(store)?;
        self.conv2.init(store, seed)?;
        self.norm2.init(store)?;
        if let Some((conv, norm)) = &self.down {
            conv.init(store, seed)?;
            norm.init(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_, '_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.norm1.forward(s, y)?;
        let y = s.tape.relu(y)?;
        let y = self.conv2.forward(s, y)?;
        let branch = self.norm2.forward(s, y)?;
        let shortcut = match &self.down {
            Some((conv, norm)) => {
                let d = conv.forward(s, x)?;
                norm.forward(s, d)?
            }
            None => x,
        };
        let sum = s.tape.add(shortcut, branch)?;
        s.tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem_conv: Conv,
    pub stem_norm: Norm,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    /// Layer layout for `config`, without parameter values.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let w = config.stage_widths;
        let mode = config.norm;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = w[0];
        for (i, (&width, &blocks)) in w.iter().zip(&config.blocks_per_stage).enumerate() {
            let stage: Vec<BasicBlock> = (0..blocks)
                .map(|j| {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let block_in = if j == 0 { in_ch } else { width };
                    BasicBlock::new(
                        &format!("stage{}.block{}", i + 1, j),
                        block_in,
                        width,
                        stride,
                        mode,
                    )
                })
                .collect();
            in_ch = width;
            stages.push(stage);
        }
        Ok(Encoder {
            stem_conv: Conv::new("stem.conv", config.input_channels, w[0], 3).stride(2),
            stem_norm: Norm::new("stem.norm", w[0], mode),
            stages,
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.stem_conv.init(store, seed)?;
        self.stem_norm.init(store)?;
        for block in self.stages.iter().flatten() {
            block.init(store, seed)?;
        }
        Ok(())
    }

    pub fn encode(&self, s: &mut Session<'_, '_>, image: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = s.tape.value(image).dims4("encode")?;
        if c != self.config.input_channels {
            return Err(Error::shape(
                "encode",
                format!(
                    "image has {} channels, encoder expects {}",
                    c, self.config.input_channels
                ),
            ));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encode",
                format!(
                    "{}×{} input is not divisible by {}; pad or crop it first",
                    h, w, OUTPUT_STRIDE
                ),
            ));
        }
        let x = self.stem_conv.forward(s, image)?;
        let x = self.stem_norm.forward(s, x)?;
        let x = s.tape.relu(x)?;
        let mut x = nn::max_pool2d(s.tape, x, 2, 2)?;
        let mut taps = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(s, x)?;
            }
            taps[i] = x;
        }
        Ok(FeaturePyramid {
            s1: taps[0],
            s3: taps[2],
            s4: taps[3],
        })
    }
}

/// Builds the encoder layout and draws its initial parameters.
pub fn build_encoder(config: EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore)> {
    let encoder = Encoder::new(config)?;
    let mut store = ParamStore::new();
    encoder.init(&mut store, seed)?;
    Ok((encoder, store))
}
