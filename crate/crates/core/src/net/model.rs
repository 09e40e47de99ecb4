use std::path::Path;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::block::{Block, BlockConfig};
use super::layers::{global_average_pool, global_average_pool_backward, softmax, BatchNorm, Linear, Mode, Param, Propagations, Rng};
use super::tensor::FeatureTensor;
use crate::centrality::Stream;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DESK_CHANNELS: [usize; 9] = [16, 16, 16, 32, 32, 32, 64, 64, 64];
pub const PAPER_CHANNELS: [usize; 9] = [64, 64, 64, 128, 128, 128, 256, 256, 256];
/// Frame stride of each block; the two halvings coincide with the channel doublings.
pub const BLOCK_STRIDES: [usize; 9] = [1, 1, 1, 2, 1, 1, 2, 1, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPlan {
    #[default]
    Desk,
    Paper,
}

impl ChannelPlan {
    pub fn channels(self) -> [usize; 9] {
        match self {
            ChannelPlan::Desk => DESK_CHANNELS,
            ChannelPlan::Paper => PAPER_CHANNELS,
        }
    }

    /// Default temporal kernel. The desk plan runs on 32-frame clips, which
    /// shrink to 8 frames in the last three blocks, so its kernel must fit.
    pub fn temporal_kernel(self) -> usize {
        match self {
            ChannelPlan::Desk => 5,
            ChannelPlan::Paper => 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
    pub dropout: f64,
    /// Subjects per sample; batch rows come in runs of this length.
    pub subjects: usize,
}

impl ModelConfig {
    pub fn new(plan: ChannelPlan, in_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            in_channels,
            num_classes,
            channels: plan.channels().to_vec(),
            strides: BLOCK_STRIDES.to_vec(),
            temporal_kernel: plan.temporal_kernel(),
            dropout: 0.5,
            subjects: 1,
        }
    }

    pub fn block_configs(&self) -> Result<Vec<BlockConfig>> {
        if self.channels.len() != self.strides.len() || self.channels.is_empty() {
            return Err(Error::Config("channels and strides must be nonempty and equally long".into()));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.subjects == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        let mut cin = self.in_channels;
        self.channels
            .iter()
            .zip(&self.strides)
            .map(|(&cout, &stride)| {
                let block = BlockConfig {
                    in_channels: cin,
                    out_channels: cout,
                    temporal_kernel: self.temporal_kernel,
                    temporal_stride: stride,
                    dropout_rate: self.dropout,
                };
                block.validate()?;
                cin = cout;
                Ok(block)
            })
            .collect()
    }
}

/// Which propagation matrix a model was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationId {
    /// Centrality matrices added to `Ã`; `[A]` means `Ã` alone.
    pub streams: Vec<Stream>,
    /// Digest of the skeleton template and centrality mode.
    pub inputs_hash: String,
}

/// Data BN, the block stack, global average pooling and a linear classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgcnModel {
    pub config: ModelConfig,
    pub propagation: PropagationId,
    pub data_bn: BatchNorm,
    pub blocks: Vec<Block>,
    pub classifier: Linear,
    #[serde(skip)]
    pooled_shape: Option<[usize; 4]>,
}

pub const CHECKPOINT_FORMAT: &str = "cgcn-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    /// Settings of the run that produced the model, echoed verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
    model: CgcnModel,
}

impl CgcnModel {
    pub fn new(config: ModelConfig, propagation: PropagationId, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let blocks = config
            .block_configs()?
            .into_iter()
            .enumerate()
            .map(|(i, c)| Block::new(&format!("block{i}"), c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let features = *config.channels.last().expect("validated nonempty");
        let classes = config.num_classes;
        let bound = (6.0 / (features + classes) as f64).sqrt();
        let weight = (0..features * classes).map(|_| rng.gen_range(-bound..bound)).collect();
        let classifier = Linear::new(
            Param::new("classifier.weight", vec![features, classes], weight),
            Param::filled("classifier.bias", vec![classes], 0.0),
        );
        Ok(CgcnModel {
            data_bn: BatchNorm::new("data_bn", config.in_channels),
            blocks,
            classifier,
            propagation,
            config,
            pooled_shape: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Class logits, one row per sample.
    pub fn forward_logits(
        &mut self,
        x: &FeatureTensor,
        rows: &[&[Matrix]],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Matrix> {
        if x.channels() != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        let mut h = self.data_bn.forward(x, mode)?;
        let mut props = Propagations::new(rows);
        for block in &mut self.blocks {
            h = block.forward(&h, props, mode, rng)?;
            props = props.with_stride(props.stride() * block.config.temporal_stride);
        }
        self.pooled_shape = Some(h.shape());
        let pooled = global_average_pool(&h, self.config.subjects)?;
        let logits = self.classifier.forward(&pooled)?;
        if !logits.is_finite() {
            return Err(Error::NonFiniteActivation("classifier"));
        }
        Ok(logits)
    }

    /// Back-propagates `d loss / d logits`; returns the gradient for the input.
    pub fn backward(&mut self, grad_logits: &Matrix, rows: &[&[Matrix]]) -> Result<FeatureTensor> {
        let shape = self.pooled_shape.ok_or(Error::MissingCache("model"))?;
        let g = self.classifier.backward(grad_logits)?;
        let mut g = global_average_pool_backward(&g, shape, self.config.subjects);
        let strides: Vec<usize> = self
            .blocks
            .iter()
            .scan(1, |acc, b| {
                let before = *acc;
                *acc *= b.config.temporal_stride;
                Some(before)
            })
            .collect();
        for (block, &stride) in self.blocks.iter_mut().zip(&strides).rev() {
            g = block.backward(&g, Propagations::new(rows).with_stride(stride))?;
        }
        self.data_bn.backward(&g)
    }

    /// Eval-mode class probabilities, one vector per sample.
    pub fn predict(&mut self, x: &FeatureTensor, rows: &[&[Matrix]]) -> Result<Vec<Vec<f64>>> {
        // Eval mode never draws from the generator.
        let mut rng = Rng::seed_from_u64(0);
        let logits = self.forward_logits(x, rows, Mode::Eval, &mut rng)?;
        Ok((0..logits.rows()).map(|r| softmax(logits.row(r))).collect())
    }

    /// Digest of every ReLU mask from the last forward pass. Two inputs with
    /// the same pattern lie in the same linear region of the ReLUs.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for b in &self.blocks {
            b.hash_activation_pattern(&mut h);
        }
        h.finish()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.data_bn.gamma, &self.data_bn.beta];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.data_bn.gamma, &mut self.data_bn.beta];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_with(None)
    }

    pub fn to_json_with(&self, run_config: Option<&serde_json::Value>) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            run_config: run_config.cloned(),
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(CgcnModel::from_json_with(text)?.0)
    }

    /// The model and the run settings stored alongside it, if any.
    pub fn from_json_with(text: &str) -> Result<(Self, Option<serde_json::Value>)> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::SchemaViolation(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        let mut model = ckpt.model;
        model.config.block_configs()?;
        model.zero_grad();
        Ok((model, ckpt.run_config))
    }

    pub fn save(&self, path: &Path, run_config: Option<&serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json_with(run_config)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CgcnModel::from_json_with(&text)
    }
}
