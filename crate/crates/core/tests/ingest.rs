mod common;

use std::collections::BTreeSet;

use modfuse::diffcore::Tensor;
use modfuse::ingest::{
    compute_norm_stats, discretize, match_pairs, CxrSample, Dataset, EhrEpisode, EventRow, NormStats, PreparedData,
    Split, BIN_HOURS, NUM_FEATURES,
};
use proptest::prelude::*;

fn identity_stats() -> NormStats {
    NormStats {
        mean: vec![0.0; NUM_FEATURES],
        std: vec![1.0; NUM_FEATURES],
        median: vec![0.0; NUM_FEATURES],
    }
}

fn episode(stay_id: u64, subject_id: u64, start_h: f64, end_h: f64, events: Vec<EventRow>) -> EhrEpisode {
    EhrEpisode {
        stay_id,
        subject_id,
        start_h,
        end_h,
        events,
        labels: vec![0; 25],
    }
}

fn image(id: &str, subject_id: u64, taken_at_h: f64) -> CxrSample {
    CxrSample {
        image_id: id.into(),
        subject_id,
        taken_at_h,
        pixels: Tensor::zeros(&[1, 1, 1]),
        aux_labels: vec![0; 14],
    }
}

fn arb_events(length_h: f64) -> impl Strategy<Value = Vec<EventRow>> {
    let row = (0.0..=length_h, prop::collection::vec(prop::option::weighted(0.4, -50.0f64..50.0), NUM_FEATURES))
        .prop_map(|(hour, vals)| EventRow {
            hour,
            values: vals.try_into().unwrap(),
        });
    prop::collection::vec(row, 1..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Rebuilding an event list from the observed cells of a discretized
    /// episode and discretizing it again reproduces the same tensor.
    #[test]
    fn discretize_is_idempotent((length, events) in (1.0f64..60.0).prop_flat_map(|l| (Just(l), arb_events(l)))) {
        let stats = identity_stats();
        let ep = episode(1, 1, 0.0, length, events);
        let once = discretize(&ep, &stats, 24).unwrap();
        let rebuilt: Vec<EventRow> = (0..once.bins())
            .map(|k| {
                let mut values = [None; NUM_FEATURES];
                for (j, v) in values.iter_mut().enumerate() {
                    if once.mask(k, j) == 1.0 {
                        *v = Some(once.value(k, j));
                    }
                }
                EventRow { hour: k as f64 * BIN_HOURS, values }
            })
            .collect();
        let again = discretize(&episode(1, 1, 0.0, length, rebuilt), &stats, 24).unwrap();
        prop_assert_eq!(once, again);
    }

    /// Pairing depends on the set of images, not on their order.
    #[test]
    fn pairing_ignores_image_order(
        hours in prop::collection::vec((1u64..4, 0.0f64..100.0), 0..25),
        rotation in 0usize..25,
    ) {
        let stays = vec![
            episode(1, 1, 0.0, 30.0, vec![]),
            episode(2, 1, 20.0, 60.0, vec![]),
            episode(3, 2, 10.0, 50.0, vec![]),
            episode(4, 3, 0.0, 100.0, vec![]),
        ];
        // Coarse timestamps make ties on taken-at likely.
        let images: Vec<CxrSample> = hours
            .iter()
            .enumerate()
            .map(|(i, &(s, h))| image(&format!("im{i:02}"), s, (h / 5.0).round() * 5.0))
            .collect();
        let key = |imgs: &[CxrSample]| -> BTreeSet<(u64, String)> {
            match_pairs(&stays, imgs)
                .into_iter()
                .map(|p| (stays[p.episode].stay_id, imgs[p.image].image_id.clone()))
                .collect()
        };
        let mut shuffled = images.clone();
        if !shuffled.is_empty() {
            let r = rotation % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
        }
        let pairs = match_pairs(&stays, &images);
        for p in &pairs {
            let (s, i) = (&stays[p.episode], &images[p.image]);
            prop_assert_eq!(s.subject_id, i.subject_id);
            prop_assert!(s.start_h <= i.taken_at_h && i.taken_at_h <= s.end_h);
        }
        let used: BTreeSet<usize> = pairs.iter().map(|p| p.image).collect();
        prop_assert_eq!(used.len(), pairs.len());
        prop_assert_eq!(key(&images), key(&shuffled));
    }
}

#[test]
fn small_feature_sets_give_the_expected_stats() {
    let obs = |vals: &[f64]| -> Vec<EventRow> {
        vals.iter()
            .map(|&v| EventRow {
                hour: 0.0,
                values: [Some(v); NUM_FEATURES],
            })
            .collect()
    };
    let s = compute_norm_stats([&episode(1, 1, 0.0, 2.0, obs(&[1.0, 1.0, 1.0]))]).unwrap();
    assert_eq!((s.mean[0], s.std[0], s.median[0]), (1.0, 1e-6, 1.0));
    let s = compute_norm_stats([&episode(1, 1, 0.0, 2.0, obs(&[0.0, 10.0]))]).unwrap();
    assert_eq!((s.mean[3], s.median[3]), (5.0, 5.0));
}

#[test]
fn normalization_never_reads_held_out_rows() {
    let dir = tempfile::tempdir().unwrap();
    common::small_cohort(dir.path(), 60, 31);
    let clean = Dataset::load(dir.path()).unwrap();
    let mut poisoned = clean.clone();
    let mut touched = 0;
    for ep in &mut poisoned.episodes {
        if poisoned.splits[&ep.subject_id] != Split::Train {
            for row in &mut ep.events {
                for v in row.values.iter_mut().flatten() {
                    *v = 1e12;
                    touched += 1;
                }
            }
        }
    }
    assert!(touched > 0);
    let a = PreparedData::prepare(clean, 24).unwrap();
    let b = PreparedData::prepare(poisoned, 24).unwrap();
    assert_eq!(a.stats, b.stats);
}

#[test]
fn generated_pairs_respect_the_stay_window_and_the_pools() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_cohort(dir.path(), 80, 32);
    assert!(!data.pairs.is_empty());
    for p in &data.pairs {
        let (s, i) = (&data.episodes[p.episode], &data.images[p.image]);
        assert_eq!(s.subject_id, i.subject_id);
        assert!(s.start_h <= i.taken_at_h && i.taken_at_h <= s.end_h, "{} outside stay {}", i.image_id, s.stay_id);
    }
    let with_images: BTreeSet<usize> = data.pairs.iter().map(|p| p.episode).collect();
    for split in Split::ALL {
        let ehr: BTreeSet<usize> = data.ehr_pool(split).into_iter().collect();
        for p in data.pair_pool(split) {
            let e = data.pairs[p].episode;
            assert!(ehr.contains(&e) && with_images.contains(&e));
        }
    }
}
