//! Content-grouped cross-validation splits: folds partition reference ids,
//! never individual samples, so no content leaks between train and test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::CorpusSample;

use super::TrainError;

/// `k` (train, test) index partitions over `corpus`. References are shuffled
/// by `seed` and dealt round-robin, so fold sizes differ by at most one
/// reference.
pub fn kfold_split(
    corpus: &[CorpusSample],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>, TrainError> {
    let mut refs: Vec<usize> = corpus.iter().map(|s| s.reference_id).collect();
    refs.sort_unstable();
    refs.dedup();
    if k == 0 || k > refs.len() {
        return Err(TrainError::TooFewReferences {
            references: refs.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refs.shuffle(&mut rng);
    let mut fold_of_ref = std::collections::HashMap::new();
    for (i, r) in refs.iter().enumerate() {
        fold_of_ref.insert(*r, i % k);
    }
    let mut splits = vec![(Vec::new(), Vec::new()); k];
    for (idx, sample) in corpus.iter().enumerate() {
        let fold = fold_of_ref[&sample.reference_id];
        for (fi, (train, test)) in splits.iter_mut().enumerate() {
            if fi == fold {
                test.push(idx);
            } else {
                train.push(idx);
            }
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{synthesize_corpus, CorpusConfig, ScoreScale};

    fn small_corpus(references: usize) -> Vec<CorpusSample> {
        synthesize_corpus(&CorpusConfig {
            references,
            points_per_reference: 64,
            seed: 5,
            scale: ScoreScale::default(),
        })
        .unwrap()
    }

    #[test]
    fn folds_partition_the_corpus() {
        let corpus = small_corpus(6);
        let splits = kfold_split(&corpus, 3, 0).unwrap();
        assert_eq!(splits.len(), 3);
        let mut seen = vec![false; corpus.len()];
        for (train, test) in &splits {
            assert_eq!(train.len() + test.len(), corpus.len());
            for &i in test {
                assert!(!seen[i], "sample {i} in two test folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn no_reference_leaks_between_train_and_test() {
        let corpus = small_corpus(7);
        for (train, test) in kfold_split(&corpus, 4, 9).unwrap() {
            let train_refs: std::collections::HashSet<usize> =
                train.iter().map(|&i| corpus[i].reference_id).collect();
            let test_refs: std::collections::HashSet<usize> =
                test.iter().map(|&i| corpus[i].reference_id).collect();
            assert!(train_refs.is_disjoint(&test_refs));
        }
    }

    #[test]
    fn one_reference_per_fold_when_k_equals_refs() {
        let corpus = small_corpus(9);
        let splits = kfold_split(&corpus, 9, 3).unwrap();
        for (_, test) in &splits {
            let refs: std::collections::HashSet<usize> =
                test.iter().map(|&i| corpus[i].reference_id).collect();
            assert_eq!(refs.len(), 1);
            assert_eq!(test.len(), 24); // 4 kinds x 6 levels
        }
    }

    #[test]
    fn round_robin_balances_fold_sizes() {
        let corpus = small_corpus(8);
        let splits = kfold_split(&corpus, 5, 1).unwrap();
        let sizes: Vec<usize> = splits
            .iter()
            .map(|(_, test)| {
                let refs: std::collections::HashSet<usize> =
                    test.iter().map(|&i| corpus[i].reference_id).collect();
                refs.len()
            })
            .collect();
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        assert!(max - min <= 1, "{sizes:?}");
    }

    #[test]
    fn deterministic_in_seed() {
        let corpus = small_corpus(5);
        assert_eq!(
            kfold_split(&corpus, 3, 42).unwrap(),
            kfold_split(&corpus, 3, 42).unwrap()
        );
        assert_ne!(
            kfold_split(&corpus, 3, 42).unwrap(),
            kfold_split(&corpus, 3, 43).unwrap()
        );
    }

    #[test]
    fn too_many_folds_is_an_error() {
        let corpus = small_corpus(3);
        assert!(matches!(
            kfold_split(&corpus, 4, 0),
            Err(TrainError::TooFewReferences { references: 3, k: 4 })
        ));
    }
}
