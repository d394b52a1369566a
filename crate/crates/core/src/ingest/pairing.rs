use std::collections::{BTreeMap, HashSet};

use super::types::{CxrSample, EhrEpisode, PairedSample};

/// Matches each stay to at most one image of the same subject taken within
/// `[start, end]`.
///
/// Stays are visited in ascending stay id. Among unused candidates the
/// latest image wins; equal timestamps go to the smallest image id. The
/// result, sorted by stay id, depends only on the sets of stays and images.
pub fn match_pairs(episodes: &[EhrEpisode], images: &[CxrSample]) -> Vec<PairedSample> {
    let mut by_subject: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        by_subject.entry(img.subject_id).or_default().push(i);
    }
    let mut stays: Vec<usize> = (0..episodes.len()).collect();
    stays.sort_by_key(|&i| episodes[i].stay_id);

    let mut used = HashSet::new();
    let mut pairs = Vec::new();
    for e in stays {
        let ep = &episodes[e];
        let Some(candidates) = by_subject.get(&ep.subject_id) else {
            continue;
        };
        let best = candidates
            .iter()
            .copied()
            .filter(|i| !used.contains(i))
            .filter(|&i| images[i].taken_at_h >= ep.start_h && images[i].taken_at_h <= ep.end_h)
            .max_by(|&a, &b| {
                images[a]
                    .taken_at_h
                    .total_cmp(&images[b].taken_at_h)
                    .then_with(|| images[b].image_id.cmp(&images[a].image_id))
            });
        if let Some(i) = best {
            used.insert(i);
            pairs.push(PairedSample { episode: e, image: i });
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn stay(stay_id: u64, subject_id: u64, start_h: f64, end_h: f64) -> EhrEpisode {
        EhrEpisode {
            stay_id,
            subject_id,
            start_h,
            end_h,
            events: vec![],
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

    fn ids(eps: &[EhrEpisode], imgs: &[CxrSample], pairs: &[PairedSample]) -> Vec<(u64, String)> {
        pairs
            .iter()
            .map(|p| (eps[p.episode].stay_id, imgs[p.image].image_id.clone()))
            .collect()
    }

    #[test]
    fn inside_and_outside_the_window() {
        let eps = vec![stay(1, 7, 0.0, 48.0)];
        assert_eq!(match_pairs(&eps, &[image("a", 7, 12.0)]).len(), 1);
        assert!(match_pairs(&eps, &[image("a", 7, 49.0)]).is_empty());
        assert!(match_pairs(&eps, &[image("a", 8, 12.0)]).is_empty());
    }

    #[test]
    fn latest_image_wins() {
        let eps = vec![stay(1, 7, 0.0, 48.0)];
        let imgs = vec![image("early", 7, 10.0), image("late", 7, 30.0)];
        let pairs = match_pairs(&eps, &imgs);
        assert_eq!(ids(&eps, &imgs, &pairs), vec![(1, "late".to_string())]);
    }

    #[test]
    fn ties_go_to_the_smallest_id_and_images_are_used_once() {
        let eps = vec![stay(2, 7, 0.0, 48.0), stay(1, 7, 10.0, 40.0)];
        let imgs = vec![image("b", 7, 20.0), image("a", 7, 20.0)];
        let pairs = match_pairs(&eps, &imgs);
        assert_eq!(
            ids(&eps, &imgs, &pairs),
            vec![(1, "a".to_string()), (2, "b".to_string())]
        );
    }
}
