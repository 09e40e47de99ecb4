use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Dropout, Mode, Param, Propagations, Relu, Rng, SpatialConv, TemporalConv};
use super::tensor::FeatureTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub dropout_rate: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.temporal_kernel == 0 {
            return Err(Error::Config("block sizes must be positive".into()));
        }
        if !matches!(self.temporal_stride, 1 | 2) {
            return Err(Error::Config(format!("temporal stride {} not in {{1, 2}}", self.temporal_stride)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// S-conv → BN → ReLU → T-conv → BN → ReLU → dropout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub config: BlockConfig,
    pub spatial: SpatialConv,
    pub bn_spatial: BatchNorm,
    pub temporal: TemporalConv,
    pub bn_temporal: BatchNorm,
    #[serde(skip)]
    relu_spatial: Relu,
    #[serde(skip)]
    relu_temporal: Relu,
    #[serde(skip)]
    dropout: Option<Dropout>,
}

fn uniform(rng: &mut Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Block {
    pub fn new(prefix: &str, config: BlockConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (cin, cout, k) = (config.in_channels, config.out_channels, config.temporal_kernel);
        let theta = Param::new(
            format!("{prefix}.spatial.theta"),
            vec![cin, cout],
            uniform(rng, cin * cout, (6.0 / (cin + cout) as f64).sqrt()),
        );
        let kernel = Param::new(
            format!("{prefix}.temporal.weight"),
            vec![cout, k],
            uniform(rng, cout * k, (3.0 / k as f64).sqrt()),
        );
        Ok(Block {
            spatial: SpatialConv::new(theta),
            bn_spatial: BatchNorm::new(&format!("{prefix}.bn_spatial"), cout),
            temporal: TemporalConv::new(kernel, config.temporal_stride),
            bn_temporal: BatchNorm::new(&format!("{prefix}.bn_temporal"), cout),
            relu_spatial: Relu::default(),
            relu_temporal: Relu::default(),
            dropout: None,
            config,
        })
    }

    pub fn forward(
        &mut self,
        x: &FeatureTensor,
        props: Propagations<'_>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<FeatureTensor> {
        let h = self.spatial.forward(x, props)?;
        let h = self.bn_spatial.forward(&h, mode)?;
        let h = self.relu_spatial.forward(&h);
        let h = self.temporal.forward(&h)?;
        let h = self.bn_temporal.forward(&h, mode)?;
        let h = self.relu_temporal.forward(&h);
        let dropout = self.dropout.get_or_insert_with(|| Dropout::new(self.config.dropout_rate));
        Ok(dropout.forward(&h, mode, rng))
    }

    pub fn backward(&mut self, grad: &FeatureTensor, props: Propagations<'_>) -> Result<FeatureTensor> {
        let dropout = self.dropout.as_mut().ok_or(Error::MissingCache("block"))?;
        let g = dropout.backward(grad);
        let g = self.relu_temporal.backward(&g)?;
        let g = self.bn_temporal.backward(&g)?;
        let g = self.temporal.backward(&g)?;
        let g = self.relu_spatial.backward(&g)?;
        let g = self.bn_spatial.backward(&g)?;
        self.spatial.backward(&g, props)
    }

    /// Feeds the ReLU masks of the last forward pass into `state`.
    pub fn hash_activation_pattern(&self, state: &mut impl std::hash::Hasher) {
        use std::hash::Hash;
        self.relu_spatial.mask().hash(state);
        self.relu_temporal.mask().hash(state);
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.spatial.theta,
            &self.bn_spatial.gamma,
            &self.bn_spatial.beta,
            &self.temporal.weight,
            &self.bn_temporal.gamma,
            &self.bn_temporal.beta,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.spatial.theta,
            &mut self.bn_spatial.gamma,
            &mut self.bn_spatial.beta,
            &mut self.temporal.weight,
            &mut self.bn_temporal.gamma,
            &mut self.bn_temporal.beta,
        ]
    }
}
