mod common;

use std::collections::BTreeMap;

use modfuse::diffcore::{Adam, AdamConfig, Tensor};
use modfuse::encoders::{LabelSpace, ModelBundle, ParamGroup};
use modfuse::ingest::{make_streams, Dataset, EhrEpisode, EventRow, PreparedData, Split, NUM_FEATURES};
use modfuse::trainer::{
    ehr_step, phase_modality_step, phase_unified_step, predict, train, train_with_streams, Consumed,
    LossWeights, ModalityBatch, Mode, PairBatch, Sample, TrainConfig, EHR_GROUPS, MODALITY_GROUPS, UNIFIED_GROUPS,
};
use modfuse::Error;

use common::{small_cohort, small_spec, small_train};

fn fingerprints(b: &ModelBundle) -> BTreeMap<&'static str, u64> {
    ParamGroup::ALL.iter().map(|&g| (g.name(), b.fingerprint(g))).collect()
}

fn changed(before: &BTreeMap<&str, u64>, after: &BTreeMap<&str, u64>) -> Vec<&'static str> {
    ParamGroup::ALL
        .iter()
        .map(|g| g.name())
        .filter(|n| before[n] != after[n])
        .collect()
}

fn batches(data: &PreparedData) -> (ModalityBatch, PairBatch) {
    let cxr: Vec<usize> = data.cxr_pool(Split::Train).into_iter().take(4).collect();
    let ehr: Vec<usize> = data.ehr_pool(Split::Train).into_iter().take(4).collect();
    let pairs: Vec<usize> = data.pair_pool(Split::Train).into_iter().take(4).collect();
    (
        ModalityBatch::gather(data, &cxr, &ehr).unwrap(),
        PairBatch::gather(data, &pairs).unwrap(),
    )
}

#[test]
fn each_phase_step_moves_only_its_own_groups() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 51);
    let (modality, pair) = batches(&data);
    let mut bundle = ModelBundle::init(&small_spec(), 1).unwrap();
    let mut main = Adam::new(&bundle.store, bundle.groups(&MODALITY_GROUPS), AdamConfig::default());
    let mut head = Adam::new(&bundle.store, bundle.groups(&UNIFIED_GROUPS), AdamConfig::default());

    let before = fingerprints(&bundle);
    let l = phase_modality_step(&mut bundle, &mut main, &modality, LossWeights::default(), 1).unwrap();
    assert_eq!(l.sum, l.cxr + l.ehr);
    let after = fingerprints(&bundle);
    assert_eq!(changed(&before, &after), ["seq_enc", "img_enc", "head_ehr", "head_cxr"]);

    phase_unified_step(&mut bundle, &mut head, &pair, 1).unwrap();
    assert_eq!(changed(&after, &fingerprints(&bundle)), ["head_unified"]);

    // Each step checks that its optimizer covers exactly its groups.
    assert!(matches!(
        phase_unified_step(&mut bundle, &mut main, &pair, 2),
        Err(Error::Contract(_))
    ));
}

#[test]
fn weighted_sum_respects_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 52);
    let (modality, _) = batches(&data);
    let mut bundle = ModelBundle::init(&small_spec(), 1).unwrap();
    let mut opt = Adam::new(&bundle.store, bundle.groups(&MODALITY_GROUPS), AdamConfig::default());
    let l = phase_modality_step(&mut bundle, &mut opt, &modality, LossWeights { cxr: 0.5, ehr: 2.0 }, 1).unwrap();
    assert_eq!(l.sum, 0.5 * l.cxr + 2.0 * l.ehr);
}

#[test]
fn saturated_correct_predictions_barely_move_the_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 53);
    let eps: Vec<usize> = data.ehr_pool(Split::Train).into_iter().take(4).collect();
    let seq = data.seq_batch(&eps).unwrap();
    let targets = Tensor::filled(&[4, 25], 1.0);
    let mut bundle = ModelBundle::init(&small_spec(), 2).unwrap();
    bundle.store.get_mut(bundle.head_ehr.bias).value.data_mut().fill(60.0);
    let before = bundle.store.clone();
    let mut opt = Adam::new(&bundle.store, bundle.groups(&EHR_GROUPS), AdamConfig::default());
    let loss = ehr_step(&mut bundle, &mut opt, &seq, &targets, 1).unwrap();
    assert!(loss < 1e-6);
    let mut max_change: f64 = 0.0;
    for id in bundle.store.ids() {
        for (a, b) in before.value(id).data().iter().zip(bundle.store.value(id).data()) {
            max_change = max_change.max((a - b).abs());
        }
    }
    assert!(max_change < 1e-6, "{max_change}");
}

#[test]
fn a_non_finite_loss_is_a_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 54);
    let eps: Vec<usize> = data.ehr_pool(Split::Train).into_iter().take(4).collect();
    let seq = data.seq_batch(&eps).unwrap();
    let targets = data.task_targets(&eps).unwrap();
    let mut bundle = ModelBundle::init(&small_spec(), 2).unwrap();
    bundle.store.get_mut(bundle.head_ehr.weight).value.data_mut()[0] = f64::NAN;
    let mut opt = Adam::new(&bundle.store, bundle.groups(&EHR_GROUPS), AdamConfig::default());
    assert!(matches!(
        ehr_step(&mut bundle, &mut opt, &seq, &targets, 7),
        Err(Error::Divergence { iteration: 7, .. })
    ));
}

#[test]
fn one_unified_iteration_draws_one_batch_per_stream() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 55);
    let out = train(&data, &small_train(Mode::Unified, 1, 1)).unwrap();
    assert_eq!(out.consumed, Consumed { cxr: 1, ehr: 1, pairs: 1 });
    assert_eq!(out.history.len(), 1);
    let out = train(&data, &small_train(Mode::JointII, 3, 1)).unwrap();
    assert_eq!(out.consumed, Consumed { cxr: 1, ehr: 1, pairs: 3 });
    assert_eq!(out.history.iter().map(|r| r.iter).collect::<Vec<_>>(), [1, 2, 3, 4]);
}

#[test]
fn sequence_only_training_leaves_the_other_groups_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 56);
    let cfg = small_train(Mode::EhrOnly, 20, 8);
    let init = fingerprints(&ModelBundle::init(&cfg.model, cfg.seed).unwrap());
    let out = train(&data, &cfg).unwrap();
    assert_eq!(changed(&init, &fingerprints(&out.bundle)), ["seq_enc", "head_ehr"]);
    assert_eq!(out.consumed, Consumed { cxr: 0, ehr: 20, pairs: 0 });
    assert!(out.history.iter().all(|r| r.l_cat.is_none() && r.l_cxr.is_none() && r.l_sum == r.l_ehr));
}

#[test]
fn a_mode_without_its_streams_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 57);
    let cfg = small_train(Mode::Unified, 2, 1);
    let streams = make_streams(&data, Split::Train, cfg.batch, 1, Mode::EhrOnly.streams()).unwrap();
    assert!(matches!(
        train_with_streams(&data, streams, &cfg, |_, _| {}),
        Err(Error::Config(_))
    ));
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 58);
    let cfg = small_train(Mode::Unified, 15, 4);
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(fingerprints(&a.bundle), fingerprints(&b.bundle));
}

#[test]
fn prediction_contract() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_cohort(dir.path(), 40, 59);
    let mut bundle = ModelBundle::init(&small_spec(), 3).unwrap();
    let pair = data.pairs[0];
    let episode = &data.inputs[pair.episode].data;
    let image = &data.images[pair.image].pixels;

    let paired = predict(&bundle, Sample::Paired { episode, image }).unwrap();
    assert_eq!(paired.len(), 25);
    assert!(paired.iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(predict(&bundle, Sample::EhrOnly { episode }).unwrap().len(), 25);
    assert!(matches!(
        predict(&bundle, Sample::ImageOnly { image }),
        Err(Error::UnsupportedInput(_))
    ));
    assert_eq!(
        bundle.spec.fused_dim(),
        bundle.spec.seq.feature_dim() + bundle.spec.img.feature_dim()
    );

    bundle.zero_group(ParamGroup::HeadUnified);
    for p in data.pairs.iter().take(5) {
        let episode = &data.inputs[p.episode].data;
        let image = &data.images[p.image].pixels;
        assert_eq!(predict(&bundle, Sample::Paired { episode, image }).unwrap(), vec![0.5; 25]);
    }
}

/// Eight stays whose task labels are bits of the stay index, read directly
/// off three fully observed features.
fn separable_micro_dataset() -> PreparedData {
    let mut episodes = Vec::new();
    let mut splits = BTreeMap::new();
    for i in 0..8u64 {
        let bits = [i & 1, (i >> 1) & 1, (i >> 2) & 1];
        let mut values = [Some(0.0); NUM_FEATURES];
        for (j, b) in bits.iter().enumerate() {
            values[j] = Some(if *b == 1 { 1.0 } else { -1.0 });
        }
        values[NUM_FEATURES - 1] = Some(i as f64);
        let events = (0..4).map(|h| EventRow { hour: 2.0 * h as f64, values }).collect();
        episodes.push(EhrEpisode {
            stay_id: i + 1,
            subject_id: i + 1,
            start_h: 0.0,
            end_h: 8.0,
            events,
            labels: (0..25).map(|k| bits[k % 3] as u8).collect(),
        });
        splits.insert(i + 1, Split::Train);
    }
    let dataset = Dataset {
        labels: LabelSpace::phenotyping(),
        episodes,
        images: Vec::new(),
        splits,
    };
    PreparedData::prepare(dataset, 24).unwrap()
}

#[test]
fn sequence_branch_fits_a_separable_micro_dataset() {
    let data = separable_micro_dataset();
    let mut cfg = TrainConfig {
        mode: Mode::EhrOnly,
        iterations: 500,
        seed: 1,
        ..Default::default()
    };
    cfg.batch.ehr = 8;
    let out = train(&data, &cfg).unwrap();
    let best = out.history.iter().filter_map(|r| r.l_ehr).fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "lowest L_ehr {best}");
}
