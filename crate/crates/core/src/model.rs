//! The full network: shared encoder plus the three task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::backbone::{Encoder, PyramidFeatures};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::heads::{AnchorSet, DetectHead, DrivableHead, LaneHead, Pan};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct PerceptionModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub pan: Pan,
    pub detect: DetectHead,
    pub drivable: DrivableHead,
    pub lane: LaneHead,
    pub anchors: AnchorSet,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs {
    pub pyramid: PyramidFeatures,
    /// `(b, 3·(5+nc), h, w)` per stride 8/16/32.
    pub detection: [Var; 3],
    /// `(b, 2, H, W)` logits.
    pub drivable: Var,
    /// `(b, 2, H, W)` logits.
    pub lane: Var,
}

impl<T: Element> PerceptionModel<T> {
    /// Build with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let neck = encoder.neck_channels;
        let pan = Pan::new(&mut store, neck, &mut rng);
        let detect = DetectHead::new(&mut store, neck, &config, &mut rng);
        let drivable = DrivableHead::new(&mut store, config.stage_channels[1], &mut rng);
        let lane = LaneHead::new(&mut store, neck[0], 8, config.lane_decoder_kind, &mut rng);
        let anchors = AnchorSet::from_sizes(&config.anchor_sizes)?;
        Ok(Self {
            config,
            store,
            encoder,
            pan,
            detect,
            drivable,
            lane,
            anchors,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<ModelOutputs> {
        let pyramid = self.encoder.forward(g, image)?;
        let aggregated = self.pan.forward(g, &pyramid)?;
        let detection = self.detect.forward(g, &aggregated);
        let drivable = self.drivable.forward(g, pyramid.pre_fpn_tap)?;
        let lane = self.lane.forward(g, pyramid.levels[0])?;
        Ok(ModelOutputs {
            pyramid,
            detection,
            drivable,
            lane,
        })
    }

    /// Evaluation-mode forward returning owned head outputs.
    pub fn infer(&self, images: Tensor<T>) -> Result<InferenceOutputs<T>> {
        let mut g = Graph::new(&self.store, false);
        let x = g.constant(images);
        let out = self.forward(&mut g, x)?;
        Ok(InferenceOutputs {
            detection: out.detection.map(|v| g.value(v).clone()),
            drivable: g.value(out.drivable).clone(),
            lane: g.value(out.lane).clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// The same weights in another precision.
    pub fn cast<U: Element>(&self) -> PerceptionModel<U> {
        PerceptionModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            pan: self.pan.clone(),
            detect: self.detect.clone(),
            drivable: self.drivable.clone(),
            lane: self.lane.clone(),
            anchors: self.anchors.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutputs<T> {
    pub detection: [Tensor<T>; 3],
    pub drivable: Tensor<T>,
    pub lane: Tensor<T>,
}
