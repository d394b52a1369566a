//! The dynamic three-phase training loop, the joint-fusion and sequence-only
//! baselines, and prediction with missing images.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Graph, NodeId, Tensor};
use crate::encoders::{
    head_forward, img_encode, img_encode_batch, seq_encode, seq_encode_batch, Head, ModelBundle, ModelSpec, ParamGroup,
    SeqBatch,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Regime};
use crate::ingest::formats::fmt_f64;
use crate::ingest::{make_streams, BatchSizes, PreparedData, Split, StreamRequest, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "unified")]
    Unified,
    #[serde(rename = "joint_i")]
    JointI,
    #[serde(rename = "joint_ii")]
    JointII,
    #[serde(rename = "ehr_only")]
    EhrOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Unified, Mode::JointI, Mode::JointII, Mode::EhrOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unified => "unified",
            Mode::JointI => "joint_i",
            Mode::JointII => "joint_ii",
            Mode::EhrOnly => "ehr_only",
        }
    }

    /// Regime the mode is evaluated in: the sequence-only baseline never
    /// sees an image.
    pub fn regime(self) -> Regime {
        match self {
            Mode::EhrOnly => Regime::Fallback,
            _ => Regime::Paired,
        }
    }

    pub fn streams(self) -> StreamRequest {
        match self {
            Mode::Unified | Mode::JointII => StreamRequest::ALL,
            Mode::JointI => StreamRequest {
                cxr: false,
                ehr: false,
                pairs: true,
            },
            Mode::EhrOnly => StreamRequest {
                cxr: false,
                ehr: true,
                pairs: false,
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected unified, joint_i, joint_ii or ehr_only")))
    }
}

/// Groups updated by the modality phase.
pub const MODALITY_GROUPS: [ParamGroup; 4] = [
    ParamGroup::SeqEnc,
    ParamGroup::ImgEnc,
    ParamGroup::HeadEhr,
    ParamGroup::HeadCxr,
];
pub const UNIFIED_GROUPS: [ParamGroup; 1] = [ParamGroup::HeadUnified];
pub const EHR_GROUPS: [ParamGroup; 2] = [ParamGroup::SeqEnc, ParamGroup::HeadEhr];
pub const JOINT_GROUPS: [ParamGroup; 3] = [ParamGroup::SeqEnc, ParamGroup::ImgEnc, ParamGroup::HeadUnified];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cxr: f64,
    pub ehr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cxr: 1.0, ehr: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    /// Per-modality pretraining iterations before joint fine-tuning
    /// (`joint_ii` only). Defaults to `iterations`.
    pub pretrain_iterations: Option<usize>,
    pub batch: BatchSizes,
    pub optimizer: AdamConfig,
    pub eval_interval: usize,
    /// Validation rounds without improvement before stopping; 0 never stops
    /// early.
    pub patience: usize,
    pub loss_weights: LossWeights,
    pub model: ModelSpec,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unified,
            iterations: 300,
            pretrain_iterations: None,
            batch: BatchSizes::default(),
            optimizer: AdamConfig::default(),
            eval_interval: 50,
            patience: 0,
            loss_weights: LossWeights::default(),
            model: ModelSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if self.batch.cxr == 0 || self.batch.ehr == 0 || self.batch.pair == 0 {
            return Err(Error::Config("train.batch sizes must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be at least 1".into()));
        }
        for (name, w) in [("cxr", self.loss_weights.cxr), ("ehr", self.loss_weights.ehr)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("train.loss_weights.{name} must be finite and non-negative")));
            }
        }
        self.optimizer.validate()?;
        self.model.validate()
    }

    pub fn pretrain_iterations(&self) -> usize {
        match self.mode {
            Mode::JointII => self.pretrain_iterations.unwrap_or(self.iterations),
            _ => 0,
        }
    }
}

/// Inputs of one modality-phase step drawn from the unpaired streams.
#[derive(Debug, Clone)]
pub struct ModalityBatch {
    pub images: Tensor,
    pub aux_targets: Tensor,
    pub seq: SeqBatch,
    pub task_targets: Tensor,
}

/// Inputs of one step on paired samples.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub seq: SeqBatch,
    pub images: Tensor,
    pub task_targets: Tensor,
}

impl ModalityBatch {
    pub fn gather(data: &PreparedData, images: &[usize], episodes: &[usize]) -> Result<Self> {
        Ok(Self {
            images: data.image_batch(images)?,
            aux_targets: data.aux_targets(images)?,
            seq: data.seq_batch(episodes)?,
            task_targets: data.task_targets(episodes)?,
        })
    }
}

impl PairBatch {
    pub fn gather(data: &PreparedData, pairs: &[usize]) -> Result<Self> {
        let (episodes, images) = data.unzip_pairs(pairs);
        Ok(Self {
            seq: data.seq_batch(&episodes)?,
            images: data.image_batch(&images)?,
            task_targets: data.task_targets(&episodes)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityLosses {
    pub cxr: f64,
    pub ehr: f64,
    pub sum: f64,
}

fn check_optimizer(bundle: &ModelBundle, opt: &Adam, groups: &[ParamGroup]) -> Result<()> {
    if opt.params() != bundle.groups(groups).as_slice() {
        return Err(Error::Contract(format!(
            "optimizer does not cover exactly the groups {:?}",
            groups.iter().map(|g| g.name()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn finite(g: &Graph, loss: NodeId, name: &str, iteration: usize) -> Result<f64> {
    let v = g.value(loss).item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            iteration,
            what: format!("{name} = {v}"),
        })
    }
}

fn apply(g: &Graph, loss: NodeId, bundle: &mut ModelBundle, opt: &mut Adam) -> Result<()> {
    bundle.store.zero_all_grads();
    g.backward(loss, &mut bundle.store)?;
    opt.step(&mut bundle.store)
}

/// Image branch against the radiology labels plus sequence branch against the
/// task labels; one step on the encoders and modality heads.
pub fn phase_modality_step(
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    batch: &ModalityBatch,
    weights: LossWeights,
    iteration: usize,
) -> Result<ModalityLosses> {
    check_optimizer(bundle, opt, &MODALITY_GROUPS)?;
    let mut g = Graph::new();
    let f_cxr = img_encode_batch(&mut g, bundle, &batch.images)?;
    let p_cxr = head_forward(&mut g, bundle, Head::Cxr, f_cxr)?;
    let l_cxr = g.bce_loss(p_cxr, &batch.aux_targets, None)?;
    let f_ehr = seq_encode_batch(&mut g, bundle, &batch.seq)?;
    let p_ehr = head_forward(&mut g, bundle, Head::Ehr, f_ehr)?;
    let l_ehr = g.bce_loss(p_ehr, &batch.task_targets, None)?;
    let a = g.scale(l_cxr, weights.cxr);
    let b = g.scale(l_ehr, weights.ehr);
    let total = g.add(a, b)?;
    let losses = ModalityLosses {
        cxr: finite(&g, l_cxr, "L_cxr", iteration)?,
        ehr: finite(&g, l_ehr, "L_ehr", iteration)?,
        sum: finite(&g, total, "L_sum", iteration)?,
    };
    apply(&g, total, bundle, opt)?;
    Ok(losses)
}

fn fused(g: &mut Graph, bundle: &ModelBundle, batch: &PairBatch, detach: bool) -> Result<NodeId> {
    let mut f_cxr = img_encode_batch(g, bundle, &batch.images)?;
    let mut f_ehr = seq_encode_batch(g, bundle, &batch.seq)?;
    if detach {
        f_cxr = g.detach(f_cxr);
        f_ehr = g.detach(f_ehr);
    }
    g.concat(f_cxr, f_ehr)
}

/// Unified head on the concatenated features of a pair batch; the encoders
/// are read but only the unified head is stepped.
pub fn phase_unified_step(bundle: &mut ModelBundle, opt: &mut Adam, batch: &PairBatch, iteration: usize) -> Result<f64> {
    check_optimizer(bundle, opt, &UNIFIED_GROUPS)?;
    let mut g = Graph::new();
    let f_cat = fused(&mut g, bundle, batch, true)?;
    let p_cat = head_forward(&mut g, bundle, Head::Unified, f_cat)?;
    let l_cat = g.bce_loss(p_cat, &batch.task_targets, None)?;
    let v = finite(&g, l_cat, "L_cat", iteration)?;
    apply(&g, l_cat, bundle, opt)?;
    Ok(v)
}

/// Sequence branch alone against the task labels.
pub fn ehr_step(
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    seq: &SeqBatch,
    targets: &Tensor,
    iteration: usize,
) -> Result<f64> {
    check_optimizer(bundle, opt, &EHR_GROUPS)?;
    let mut g = Graph::new();
    let f = seq_encode_batch(&mut g, bundle, seq)?;
    let p = head_forward(&mut g, bundle, Head::Ehr, f)?;
    let l = g.bce_loss(p, targets, None)?;
    let v = finite(&g, l, "L_ehr", iteration)?;
    apply(&g, l, bundle, opt)?;
    Ok(v)
}

/// End-to-end fusion step: both encoders and the unified head.
pub fn joint_step(bundle: &mut ModelBundle, opt: &mut Adam, batch: &PairBatch, iteration: usize) -> Result<f64> {
    check_optimizer(bundle, opt, &JOINT_GROUPS)?;
    let mut g = Graph::new();
    let f_cat = fused(&mut g, bundle, batch, false)?;
    let p_cat = head_forward(&mut g, bundle, Head::Unified, f_cat)?;
    let l_cat = g.bce_loss(p_cat, &batch.task_targets, None)?;
    let v = finite(&g, l_cat, "L_cat", iteration)?;
    apply(&g, l_cat, bundle, opt)?;
    Ok(v)
}

/// One inference input.
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    Paired { episode: &'a Tensor, image: &'a Tensor },
    EhrOnly { episode: &'a Tensor },
    ImageOnly { image: &'a Tensor },
}

/// Task-label probabilities: the unified head when an image is present, the
/// sequence head otherwise.
pub fn predict(bundle: &ModelBundle, sample: Sample<'_>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = match sample {
        Sample::Paired { episode, image } => {
            let f_cxr = img_encode(&mut g, bundle, image)?;
            let f_ehr = seq_encode(&mut g, bundle, episode)?;
            let f_cat = g.concat(f_cxr, f_ehr)?;
            head_forward(&mut g, bundle, Head::Unified, f_cat)?
        }
        Sample::EhrOnly { episode } => {
            let f = seq_encode(&mut g, bundle, episode)?;
            head_forward(&mut g, bundle, Head::Ehr, f)?
        }
        Sample::ImageOnly { .. } => {
            return Err(Error::UnsupportedInput(
                "the time-series modality is required; an image alone cannot be scored".into(),
            ))
        }
    };
    Ok(g.value(p).data().to_vec())
}

/// Batched [`predict`]: `[B × 25]` probabilities, rows equal to the
/// per-sample results.
pub fn predict_batch(bundle: &ModelBundle, seq: &SeqBatch, images: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let f_ehr = seq_encode_batch(&mut g, bundle, seq)?;
    let p = match images {
        Some(images) => {
            let f_cxr = img_encode_batch(&mut g, bundle, images)?;
            let f_cat = g.concat(f_cxr, f_ehr)?;
            head_forward(&mut g, bundle, Head::Unified, f_cat)?
        }
        None => head_forward(&mut g, bundle, Head::Ehr, f_ehr)?,
    };
    Ok(g.value(p).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HistoryRow {
    pub iter: usize,
    pub l_cxr: Option<f64>,
    pub l_ehr: Option<f64>,
    pub l_sum: Option<f64>,
    pub l_cat: Option<f64>,
    pub val_auroc_all: Option<f64>,
}

pub const HISTORY_HEADER: &str = "iter,L_cxr,L_ehr,L_sum,L_cat,val_auroc_all";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            cell(r.l_cxr),
            cell(r.l_ehr),
            cell(r.l_sum),
            cell(r.l_cat),
            cell(r.val_auroc_all)
        ));
    }
    out
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Modality,
    Unified,
    Ehr,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    Before,
    After,
}

/// Reported to an observer around every parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseEvent {
    pub iteration: usize,
    pub phase: Phase,
    pub moment: Moment,
}

/// Batches drawn from each stream over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Consumed {
    pub cxr: usize,
    pub ehr: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation round, or the final ones when no
    /// round produced a value.
    pub bundle: ModelBundle,
    pub history: Vec<HistoryRow>,
    pub best_iteration: usize,
    pub best_val: Option<f64>,
    pub consumed: Consumed,
    pub stopped_early: bool,
}

pub fn train(data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(data, config, |_, _| {})
}

pub fn train_observed(
    data: &PreparedData,
    config: &TrainConfig,
    observer: impl FnMut(PhaseEvent, &ModelBundle),
) -> Result<TrainOutcome> {
    config.validate()?;
    let streams = make_streams(data, Split::Train, config.batch, config.seed, config.mode.streams())?;
    train_with_streams(data, streams, config, observer)
}

struct Run<'a, F> {
    data: &'a PreparedData,
    config: &'a TrainConfig,
    streams: Streams,
    bundle: ModelBundle,
    observer: F,
    consumed: Consumed,
}

fn missing(mode: Mode, what: &str) -> Error {
    Error::Config(format!("mode {mode} needs the {what} stream"))
}

impl<F: FnMut(PhaseEvent, &ModelBundle)> Run<'_, F> {
    fn observe(&mut self, iteration: usize, phase: Phase, moment: Moment) {
        (self.observer)(
            PhaseEvent {
                iteration,
                phase,
                moment,
            },
            &self.bundle,
        );
    }

    fn next(&mut self, which: &str) -> Result<Vec<usize>> {
        let mode = self.config.mode;
        let b = self.streams.batch;
        let (sampler, size, counter) = match which {
            "cxr" => (self.streams.cxr.as_mut(), b.cxr, &mut self.consumed.cxr),
            "ehr" => (self.streams.ehr.as_mut(), b.ehr, &mut self.consumed.ehr),
            _ => (self.streams.pairs.as_mut(), b.pair, &mut self.consumed.pairs),
        };
        let sampler = sampler.ok_or_else(|| missing(mode, which))?;
        *counter += 1;
        Ok(sampler.next_batch(size))
    }

    fn modality(&mut self, opt: &mut Adam, iteration: usize) -> Result<ModalityLosses> {
        let cxr = self.next("cxr")?;
        let ehr = self.next("ehr")?;
        let batch = ModalityBatch::gather(self.data, &cxr, &ehr)?;
        self.observe(iteration, Phase::Modality, Moment::Before);
        let l = phase_modality_step(&mut self.bundle, opt, &batch, self.config.loss_weights, iteration)?;
        self.observe(iteration, Phase::Modality, Moment::After);
        Ok(l)
    }

    fn unified(&mut self, opt: &mut Adam, iteration: usize) -> Result<f64> {
        let pairs = self.next("pairs")?;
        let batch = PairBatch::gather(self.data, &pairs)?;
        self.observe(iteration, Phase::Unified, Moment::Before);
        let l = phase_unified_step(&mut self.bundle, opt, &batch, iteration)?;
        self.observe(iteration, Phase::Unified, Moment::After);
        Ok(l)
    }

    fn ehr(&mut self, opt: &mut Adam, iteration: usize) -> Result<f64> {
        let ehr = self.next("ehr")?;
        let seq = self.data.seq_batch(&ehr)?;
        let targets = self.data.task_targets(&ehr)?;
        self.observe(iteration, Phase::Ehr, Moment::Before);
        let l = ehr_step(&mut self.bundle, opt, &seq, &targets, iteration)?;
        self.observe(iteration, Phase::Ehr, Moment::After);
        Ok(l)
    }

    fn joint(&mut self, opt: &mut Adam, iteration: usize) -> Result<f64> {
        let pairs = self.next("pairs")?;
        let batch = PairBatch::gather(self.data, &pairs)?;
        self.observe(iteration, Phase::Joint, Moment::Before);
        let l = joint_step(&mut self.bundle, opt, &batch, iteration)?;
        self.observe(iteration, Phase::Joint, Moment::After);
        Ok(l)
    }

    fn adam(&self, groups: &[ParamGroup]) -> Adam {
        Adam::new(&self.bundle.store, self.bundle.groups(groups), self.config.optimizer)
    }
}

/// Runs the configured mode on prebuilt training streams.
///
/// `joint_ii` first pretrains both branches on their own labels, logging those
/// iterations first. Validation runs every `eval_interval` iterations and at
/// the last one, when the validation split has pairs.
pub fn train_with_streams(
    data: &PreparedData,
    streams: Streams,
    config: &TrainConfig,
    observer: impl FnMut(PhaseEvent, &ModelBundle),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mode = config.mode;
    let need = mode.streams();
    for (wanted, have, what) in [
        (need.cxr, streams.cxr.is_some(), "cxr"),
        (need.ehr, streams.ehr.is_some(), "ehr"),
        (need.pairs, streams.pairs.is_some(), "pairs"),
    ] {
        if wanted && !have {
            return Err(missing(mode, what));
        }
    }
    let mut run = Run {
        data,
        config,
        streams,
        bundle: ModelBundle::init(&config.model, config.seed)?,
        observer,
        consumed: Consumed::default(),
    };
    let mut history = Vec::new();

    let pre = config.pretrain_iterations();
    if pre > 0 {
        let mut opt = run.adam(&MODALITY_GROUPS);
        for it in 1..=pre {
            let l = run.modality(&mut opt, it)?;
            history.push(HistoryRow {
                iter: it,
                l_cxr: Some(l.cxr),
                l_ehr: Some(l.ehr),
                l_sum: Some(l.sum),
                ..Default::default()
            });
        }
    }

    let mut main = match mode {
        Mode::Unified => run.adam(&MODALITY_GROUPS),
        Mode::JointI | Mode::JointII => run.adam(&JOINT_GROUPS),
        Mode::EhrOnly => run.adam(&EHR_GROUPS),
    };
    let mut unified = run.adam(&UNIFIED_GROUPS);
    let validate = !data.pair_pool(Split::Val).is_empty();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut last = pre;
    for k in 1..=config.iterations {
        let it = pre + k;
        last = it;
        let mut row = HistoryRow {
            iter: it,
            ..Default::default()
        };
        match mode {
            Mode::Unified => {
                let l = run.modality(&mut main, it)?;
                (row.l_cxr, row.l_ehr, row.l_sum) = (Some(l.cxr), Some(l.ehr), Some(l.sum));
                row.l_cat = Some(run.unified(&mut unified, it)?);
            }
            Mode::EhrOnly => {
                let l = run.ehr(&mut main, it)?;
                (row.l_ehr, row.l_sum) = (Some(l), Some(l));
            }
            Mode::JointI | Mode::JointII => row.l_cat = Some(run.joint(&mut main, it)?),
        }
        let due = k % config.eval_interval == 0 || k == config.iterations;
        if validate && due {
            row.val_auroc_all = match evaluate(&run.bundle, data, Split::Val, mode.regime()) {
                Ok(r) => r.macro_auroc.all,
                Err(Error::DegenerateEvaluation) => None,
                Err(e) => return Err(e),
            };
            if let Some(v) = row.val_auroc_all {
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, it, run.bundle.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        history.push(row);
        if config.patience > 0 && stale >= config.patience {
            stopped_early = k < config.iterations;
            break;
        }
    }
    let (bundle, best_iteration, best_val) = match best {
        Some((v, it, b)) => (b, it, Some(v)),
        None => (run.bundle, last, None),
    };
    Ok(TrainOutcome {
        bundle,
        history,
        best_iteration,
        best_val,
        consumed: run.consumed,
        stopped_early,
    })
}
