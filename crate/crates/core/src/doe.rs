//! Dual-path outlier estimation for unknown-class samples.
//!
//! Path one measures how far a sample's clean feature lies from the
//! per-class prototypes (mean labeled features). Path two measures how much
//! the classifier's top-class confidence changes between two strongly
//! augmented views. The product of the two is min-max normalized over the
//! unlabeled pool and turned into an inlier weight `w_uc = 1 - sigma(z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numerics::Matrix;
use crate::rng::Rng;
use crate::synthdata::{augment_rows, AugmentConfig};

/// Lower clamp of the pool normalization.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// One row per known class.
    pub prototypes: Matrix,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

/// Per-class mean of `features` rows. Every class in `0..num_classes` must
/// have at least one row.
pub fn compute_prototypes(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<PrototypeSet> {
    if labels.len() != features.rows() {
        return Err(Error::Length {
            what: "prototype labels",
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    let dim = features.cols();
    let mut sums = Matrix::zeros(num_classes, dim);
    let mut counts = vec![0usize; num_classes];
    for (r, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Config(format!("label {c} outside 0..{num_classes}")));
        }
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(features.row(r)) {
            *s += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(missing));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(PrototypeSet {
        prototypes: sums,
        counts,
    })
}

/// Euclidean distance to every prototype and their average.
pub fn distance_profile(v: &[f64], protos: &PrototypeSet) -> Result<(Vec<f64>, f64)> {
    if v.len() != protos.dim() {
        return Err(Error::shape("distance_profile", (1, v.len()), protos.prototypes.shape()));
    }
    let d: Vec<f64> = (0..protos.num_classes())
        .map(|j| {
            protos
                .prototypes
                .row(j)
                .iter()
                .zip(v)
                .map(|(p, x)| (x - p).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let avg = d.iter().sum::<f64>() / d.len() as f64;
    Ok((d, avg))
}

/// `|max(p1) - max(p2)|`.
pub fn prediction_disagreement(p1: &[f64], p2: &[f64]) -> f64 {
    let max = |p: &[f64]| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max(p1) - max(p2)).abs()
}

/// Min-max maps raw scores into `[SIGMA_FLOOR, 1]` over the whole pool. A
/// pool whose range is below `1e-12` maps to 0.5 everywhere.
pub fn normalize_pool(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyPool);
    }
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range < 1e-12 {
        return Ok(vec![0.5; z.len()]);
    }
    Ok(z.iter()
        .map(|&v| ((v - min) / range).clamp(SIGMA_FLOOR, 1.0))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UkcScore {
    pub d: Vec<f64>,
    pub d_avg: f64,
    pub p_ood: f64,
    pub w_uc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UkcScores {
    pub scores: Vec<UkcScore>,
}

impl UkcScores {
    pub fn weights(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.w_uc).collect()
    }

    /// `1 - w_uc`: higher means more likely an unknown class.
    pub fn outlier_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| 1.0 - s.w_uc).collect()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Combines per-sample distance profiles and disagreements into weights.
pub fn combine_scores(profiles: Vec<(Vec<f64>, f64)>, p_ood: &[f64]) -> Result<UkcScores> {
    if profiles.len() != p_ood.len() {
        return Err(Error::Length {
            what: "p_ood",
            expected: profiles.len(),
            actual: p_ood.len(),
        });
    }
    let raw: Vec<f64> = profiles.iter().zip(p_ood).map(|((_, avg), p)| avg * p).collect();
    let sigma = normalize_pool(&raw)?;
    Ok(UkcScores {
        scores: profiles
            .into_iter()
            .zip(p_ood)
            .zip(sigma)
            .map(|(((d, d_avg), &p_ood), s)| UkcScore {
                d,
                d_avg,
                p_ood,
                w_uc: 1.0 - s,
            })
            .collect(),
    })
}

/// Scores every row of `unlabeled`: distances use the clean feature, the
/// disagreement uses two independent augmentations.
pub fn score_unlabeled(
    bundle: &ModelBundle,
    protos: &PrototypeSet,
    unlabeled: &Matrix,
    aug: &AugmentConfig,
    rng: &mut Rng,
) -> Result<UkcScores> {
    let clean = bundle.features(unlabeled)?;
    let view1 = augment_rows(unlabeled, aug, rng);
    let view2 = augment_rows(unlabeled, aug, rng);
    let p1 = bundle.predict_proba(&view1)?;
    let p2 = bundle.predict_proba(&view2)?;
    let profiles = (0..clean.rows())
        .map(|r| distance_profile(clean.row(r), protos))
        .collect::<Result<Vec<_>>>()?;
    let p_ood: Vec<f64> = (0..p1.rows())
        .map(|r| prediction_disagreement(p1.row(r), p2.row(r)))
        .collect();
    combine_scores(profiles, &p_ood)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BundleConfig;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, "m");
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn prototype_is_class_mean() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [3.0, 0.0], [7.0, 7.0]], 2).unwrap();
        let p = compute_prototypes(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.prototypes.row(0), &[2.0, 0.0]);
        assert_eq!(p.prototypes.row(1), &[7.0, 7.0]);
        assert_eq!(p.counts, vec![2, 1]);
    }

    #[test]
    fn missing_class_is_reported() {
        let f = Matrix::from_rows(&[[1.0], [2.0]], 1).unwrap();
        assert!(matches!(compute_prototypes(&f, &[0, 0], 2), Err(Error::MissingClass(1))));
    }

    #[test]
    fn prototypes_match_loop_and_divide() {
        let f = random_matrix(40, 5, 1);
        let labels: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 4).collect();
        let p = compute_prototypes(&f, &labels, 4).unwrap();
        for c in 0..4 {
            for j in 0..5 {
                let mut total = 0.0;
                let mut n = 0.0;
                for r in 0..40 {
                    if labels[r] == c {
                        total += f.get(r, j);
                        n += 1.0;
                    }
                }
                assert!((p.prototypes.get(c, j) - total / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_profile_cases() {
        let protos = PrototypeSet {
            prototypes: Matrix::from_rows(&[[2.0, 0.0], [5.0, 4.0]], 2).unwrap(),
            counts: vec![1, 1],
        };
        let (d, avg) = distance_profile(&[2.0, 0.0], &protos).unwrap();
        assert_eq!(d, vec![0.0, 5.0]);
        assert_eq!(avg, 2.5);
        assert!(distance_profile(&[1.0], &protos).is_err());

        let protos = PrototypeSet {
            prototypes: random_matrix(3, 6, 2),
            counts: vec![1; 3],
        };
        let v = random_matrix(1, 6, 3);
        let (d, _) = distance_profile(v.row(0), &protos).unwrap();
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += (v.get(0, k) - protos.prototypes.get(j, k)).powi(2);
            }
            assert!((d[j] - acc.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn disagreement_cases() {
        assert_eq!(prediction_disagreement(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((prediction_disagreement(&[0.9, 0.1], &[0.6, 0.4]) - 0.3).abs() < 1e-15);
        let onehot = [1.0 - 1e-7, 1e-7];
        assert!((prediction_disagreement(&[0.5, 0.5], &onehot) - (0.5 - 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn pool_normalization_cases() {
        assert_eq!(normalize_pool(&[0.0, 1.0, 2.0]).unwrap(), vec![1e-6, 0.5, 1.0]);
        assert_eq!(normalize_pool(&[3.0, 3.0, 3.0]).unwrap(), vec![0.5; 3]);
        assert!(matches!(normalize_pool(&[]), Err(Error::EmptyPool)));
        let s = combine_scores(
            vec![(vec![1.0], 1.0), (vec![4.0], 4.0)],
            &[0.5, 0.5],
        )
        .unwrap();
        assert_eq!(s.scores[1].w_uc, 0.0);
        assert_eq!(s.scores[0].w_uc, 1.0 - 1e-6);
    }

    #[test]
    fn deterministic_views_give_half_weights() {
        let bundle = ModelBundle::new(BundleConfig::new(3, 2), &mut stream(0, "b")).unwrap();
        let x = random_matrix(10, 3, 4);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let protos = compute_prototypes(&bundle.features(&x).unwrap(), &labels, 2).unwrap();
        let s = score_unlabeled(&bundle, &protos, &x, &AugmentConfig::identity(), &mut stream(1, "a")).unwrap();
        assert!(s.scores.iter().all(|e| e.p_ood == 0.0 && e.w_uc == 0.5));
    }

    #[test]
    fn sample_at_prototype_is_an_inlier() {
        // z = 0 for the sample sitting on a prototype with identical views;
        // the rest of the pool is non-degenerate
        let protos = PrototypeSet {
            prototypes: Matrix::from_rows(&[[0.0, 0.0], [4.0, 0.0]], 2).unwrap(),
            counts: vec![1, 1],
        };
        let profiles = [[0.0, 0.0], [9.0, 9.0], [2.0, 3.0]]
            .iter()
            .map(|v| distance_profile(v, &protos).unwrap())
            .collect();
        let s = combine_scores(profiles, &[0.0, 0.4, 0.1]).unwrap();
        assert!((s.scores[0].w_uc - (1.0 - 1e-6)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weights_stay_in_range(z in proptest::collection::vec(0.0f64..100.0, 1..50)) {
            for s in normalize_pool(&z).unwrap() {
                let w = 1.0 - s;
                prop_assert!((0.0..=1.0 - 1e-6).contains(&w) || w == 0.5);
            }
        }

        #[test]
        fn pool_normalization_is_permutation_equivariant(
            z in proptest::collection::vec(0.0f64..10.0, 2..30),
            seed in any::<u64>(),
        ) {
            let mut idx: Vec<usize> = (0..z.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut stream(seed, "perm"));
            let permuted: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
            let a = normalize_pool(&z).unwrap();
            let b = normalize_pool(&permuted).unwrap();
            for (k, &i) in idx.iter().enumerate() {
                prop_assert_eq!(a[i], b[k]);
            }
        }

        #[test]
        fn distances_are_translation_and_relabel_invariant(
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            protos in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let set = PrototypeSet { prototypes: Matrix::new(3, 4, protos.clone()).unwrap(), counts: vec![1; 3] };
            let (d, avg) = distance_profile(&v, &set).unwrap();

            let shifted_v: Vec<f64> = v.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let shifted: Vec<f64> = protos.iter().enumerate().map(|(i, p)| p + shift[i % 4]).collect();
            let set2 = PrototypeSet { prototypes: Matrix::new(3, 4, shifted).unwrap(), counts: vec![1; 3] };
            let (d2, avg2) = distance_profile(&shifted_v, &set2).unwrap();
            for (a, b) in d.iter().zip(&d2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((avg - avg2).abs() < 1e-9);

            let reversed = set.prototypes.select_rows(&[2, 1, 0]);
            let set3 = PrototypeSet { prototypes: reversed, counts: vec![1; 3] };
            let (_, avg3) = distance_profile(&v, &set3).unwrap();
            prop_assert!((avg - avg3).abs() < 1e-12);
        }
    }
}
