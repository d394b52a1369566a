use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{AUX_LABELS, TASK_LABELS};
use crate::diffcore::{checkpoint, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use std::path::Path;

/// Per-bin input width: 17 standardized values and their 17 observed-masks.
pub const EHR_INPUT_DIM: usize = 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SeqEnc,
    ImgEnc,
    HeadEhr,
    HeadCxr,
    HeadUnified,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::SeqEnc,
        ParamGroup::ImgEnc,
        ParamGroup::HeadEhr,
        ParamGroup::HeadCxr,
        ParamGroup::HeadUnified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::SeqEnc => "seq_enc",
            ParamGroup::ImgEnc => "img_enc",
            ParamGroup::HeadEhr => "head_ehr",
            ParamGroup::HeadCxr => "head_cxr",
            ParamGroup::HeadUnified => "head_unified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqEncoderSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Default for SeqEncoderSpec {
    fn default() -> Self {
        Self {
            input_dim: EHR_INPUT_DIM,
            hidden_dim: 64,
        }
    }
}

impl SeqEncoderSpec {
    pub fn feature_dim(&self) -> usize {
        self.hidden_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImgStage {
    pub channels: usize,
    pub blocks: usize,
}

/// Small residual CNN: a stride-2 stem, then stages of residual blocks with a
/// stride-2 downsample in front of every stage but the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImgEncoderSpec {
    pub in_channels: usize,
    pub image_side: usize,
    pub stages: Vec<ImgStage>,
}

impl Default for ImgEncoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_side: 64,
            stages: vec![
                ImgStage { channels: 8, blocks: 1 },
                ImgStage { channels: 16, blocks: 1 },
                ImgStage { channels: 32, blocks: 1 },
            ],
        }
    }
}

impl ImgEncoderSpec {
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub seq: SeqEncoderSpec,
    pub img: ImgEncoderSpec,
    pub unified_hidden: usize,
    pub task_labels: usize,
    pub aux_labels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            seq: SeqEncoderSpec::default(),
            img: ImgEncoderSpec::default(),
            unified_hidden: 64,
            task_labels: TASK_LABELS,
            aux_labels: AUX_LABELS,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq.input_dim", self.seq.input_dim),
            ("seq.hidden_dim", self.seq.hidden_dim),
            ("img.in_channels", self.img.in_channels),
            ("img.image_side", self.img.image_side),
            ("unified_hidden", self.unified_hidden),
            ("task_labels", self.task_labels),
            ("aux_labels", self.aux_labels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.img.stages.is_empty() {
            return Err(Error::Config("model.img.stages must not be empty".into()));
        }
        if self.img.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::Config("model.img.stages channels must be positive".into()));
        }
        let factor = 1usize << self.img.stages.len();
        if !self.img.image_side.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "model.img.image_side {} is not divisible by 2^{} = {}",
                self.img.image_side,
                self.img.stages.len(),
                factor
            )));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.seq.feature_dim() + self.img.feature_dim()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// `[in×out]`
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `[input×4H]`, gate order input, forget, cell, output.
    pub w_x: ParamId,
    /// `[H×4H]`
    pub w_h: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub conv1: ParamId,
    pub conv2: ParamId,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub downsample: Option<ParamId>,
    pub blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
pub struct ImgParams {
    pub stem: ParamId,
    pub stages: Vec<StageParams>,
}

/// Both encoders, both modality heads and the unified head.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub seq: LstmParams,
    pub img: ImgParams,
    pub head_ehr: Linear,
    pub head_cxr: Linear,
    pub unified_hidden: Linear,
    pub unified_out: Linear,
}

/// Bound of the fan-in Kaiming-uniform initializer, `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = kaiming_bound(fan_in);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }
}

fn linear(store: &mut ParamStore, init: &mut Init, group: ParamGroup, name: &str, fan_in: usize, fan_out: usize) -> Linear {
    let weight = store.add(group.name(), &format!("{name}.weight"), init.uniform(&[fan_in, fan_out], fan_in));
    let bias = store.add(group.name(), &format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    Linear { weight, bias }
}

fn conv(store: &mut ParamStore, init: &mut Init, name: &str, c_out: usize, c_in: usize) -> ParamId {
    let fan_in = c_in * 9;
    store.add(ParamGroup::ImgEnc.name(), name, init.uniform(&[c_out, c_in, 3, 3], fan_in))
}

impl ModelBundle {
    /// Deterministic initialization: Kaiming-uniform weights, zero biases and
    /// a forget-gate bias of +1.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();

        let h = spec.seq.hidden_dim;
        let seq_group = ParamGroup::SeqEnc.name();
        let w_x = store.add(seq_group, "w_x", init.uniform(&[spec.seq.input_dim, 4 * h], spec.seq.input_dim));
        let w_h = store.add(seq_group, "w_h", init.uniform(&[h, 4 * h], h));
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        let bias = store.add(seq_group, "bias", Tensor::vector(bias));
        let seq = LstmParams { w_x, w_h, bias };

        let first = spec.img.stages[0].channels;
        let stem = conv(&mut store, &mut init, "stem", first, spec.img.in_channels);
        let mut stages = Vec::new();
        let mut channels = first;
        for (s, stage) in spec.img.stages.iter().enumerate() {
            let downsample = (s > 0).then(|| conv(&mut store, &mut init, &format!("stage{s}.down"), stage.channels, channels));
            channels = stage.channels;
            let blocks = (0..stage.blocks)
                .map(|b| ResBlock {
                    conv1: conv(&mut store, &mut init, &format!("stage{s}.block{b}.conv1"), channels, channels),
                    conv2: conv(&mut store, &mut init, &format!("stage{s}.block{b}.conv2"), channels, channels),
                })
                .collect();
            stages.push(StageParams { downsample, blocks });
        }
        let img = ImgParams { stem, stages };

        let head_ehr = linear(&mut store, &mut init, ParamGroup::HeadEhr, "out", spec.seq.feature_dim(), spec.task_labels);
        let head_cxr = linear(&mut store, &mut init, ParamGroup::HeadCxr, "out", spec.img.feature_dim(), spec.aux_labels);
        let unified_hidden = linear(&mut store, &mut init, ParamGroup::HeadUnified, "hidden", spec.fused_dim(), spec.unified_hidden);
        let unified_out = linear(&mut store, &mut init, ParamGroup::HeadUnified, "out", spec.unified_hidden, spec.task_labels);

        Ok(Self {
            spec: spec.clone(),
            store,
            seq,
            img,
            head_ehr,
            head_cxr,
            unified_hidden,
            unified_out,
        })
    }

    pub fn group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.group(group.name())
    }

    pub fn groups(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        groups.iter().flat_map(|&g| self.group(g)).collect()
    }

    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        self.store.group_fingerprint(group.name())
    }

    /// Sets every value of a group to zero.
    pub fn zero_group(&mut self, group: ParamGroup) {
        for id in self.group(group) {
            self.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store)
    }

    pub fn load(spec: &ModelSpec, path: &Path) -> Result<Self> {
        let mut bundle = Self::init(spec, 0)?;
        checkpoint::load_into(path, &mut bundle.store)?;
        Ok(bundle)
    }
}
