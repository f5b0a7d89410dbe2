//! Semi-hard triplet mining.

use log::warn;

use crate::net::Embedding;
use crate::signal::Label;

use super::losses::{sq_dist, triplet_loss};

/// How a triplet's negative was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningBranch {
    /// d_ap < d_an < d_ap + margin (the semi-hard window), minimal d_an.
    SemiHard,
    /// No negative inside the window: nearest negative beyond the positive.
    NearestBeyondPositive,
    /// Every negative is at least as close as the positive: farthest one.
    FarthestNegative,
}

/// Indices into a batch forming one (anchor, positive, negative) triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub branch: MiningBranch,
}

/// Pairwise squared distances between unit-norm embeddings:
/// D[i][j] = |e_i - e_j|^2 = 2 - 2 * (e_i . e_j). Symmetric, zero diagonal.
pub fn pairwise_sq_dists(embeddings: &[Embedding]) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let mut dists = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| a * b)
                .sum();
            let d = (2.0 - 2.0 * dot).max(0.0);
            dists[i][j] = d;
            dists[j][i] = d;
        }
    }
    dists
}

/// For every ordered same-label pair (anchor, positive), select one negative:
/// the semi-hard negative with minimal d_an when one exists, otherwise the
/// nearest negative strictly beyond d_ap, otherwise the farthest negative.
/// Ties break toward the lowest index. A batch with a single class yields an
/// empty set.
pub fn mine_semi_hard(dists: &[Vec<f64>], labels: &[Label], margin: f64) -> Vec<Triplet> {
    let n = labels.len();
    debug_assert_eq!(dists.len(), n);
    let has_both = labels.iter().any(|l| l.is_peak()) && labels.iter().any(|l| !l.is_peak());
    if !has_both {
        warn!("triplet mining skipped: batch holds a single class");
        return Vec::new();
    }

    let mut triplets = Vec::new();
    for anchor in 0..n {
        for positive in 0..n {
            if positive == anchor || labels[positive] != labels[anchor] {
                continue;
            }
            let d_ap = dists[anchor][positive];

            let mut semi_hard: Option<usize> = None;
            let mut beyond: Option<usize> = None;
            let mut farthest: Option<usize> = None;
            for negative in 0..n {
                if labels[negative] == labels[anchor] {
                    continue;
                }
                let d_an = dists[anchor][negative];
                if d_ap < d_an && d_an < d_ap + margin {
                    if semi_hard.is_none_or(|best| d_an < dists[anchor][best]) {
                        semi_hard = Some(negative);
                    }
                }
                if d_an > d_ap && beyond.is_none_or(|best| d_an < dists[anchor][best]) {
                    beyond = Some(negative);
                }
                if farthest.is_none_or(|best| d_an > dists[anchor][best]) {
                    farthest = Some(negative);
                }
            }

            let (negative, branch) = match (semi_hard, beyond, farthest) {
                (Some(neg), _, _) => (neg, MiningBranch::SemiHard),
                (None, Some(neg), _) => (neg, MiningBranch::NearestBeyondPositive),
                (None, None, Some(neg)) => (neg, MiningBranch::FarthestNegative),
                (None, None, None) => unreachable!("both classes present"),
            };
            triplets.push(Triplet {
                anchor,
                positive,
                negative,
                branch,
            });
        }
    }
    triplets
}

/// Mean triplet loss over a mined set; an empty set costs zero.
pub fn batch_triplet_loss(triplets: &[Triplet], embeddings: &[Embedding], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let total: f64 = triplets
        .iter()
        .map(|t| {
            triplet_loss(
                sq_dist(&embeddings[t.anchor], &embeddings[t.positive]),
                sq_dist(&embeddings[t.anchor], &embeddings[t.negative]),
                margin,
            )
        })
        .sum();
    total / triplets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn unit(v: Vec<f64>) -> Embedding {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn random_unit(rng: &mut SplitMix64, dim: usize) -> Embedding {
        unit((0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn pairwise_examples() {
        let e = unit(vec![0.3, -0.4, 0.5]);
        let d = pairwise_sq_dists(&[e.clone(), e.clone()]);
        assert!(d[0][1].abs() < 1e-12);
        assert_eq!(d[0][0], 0.0);

        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        let d = pairwise_sq_dists(&[a, b]);
        assert!((d[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_matches_double_loop_oracle() {
        let mut rng = SplitMix64::new(10);
        let embeddings: Vec<Embedding> = (0..12).map(|_| random_unit(&mut rng, 8)).collect();
        let d = pairwise_sq_dists(&embeddings);
        for i in 0..12 {
            for j in 0..12 {
                let direct = sq_dist(&embeddings[i], &embeddings[j]);
                assert!((d[i][j] - direct).abs() < 1e-9, "d[{i}][{j}]");
                assert_eq!(d[i][j], d[j][i]);
            }
        }
    }

    /// Exhaustive oracle applying the same selection rule independently.
    fn oracle_mine(dists: &[Vec<f64>], labels: &[Label], margin: f64) -> Vec<Triplet> {
        let n = labels.len();
        if !(labels.iter().any(|l| l.is_peak()) && labels.iter().any(|l| !l.is_peak())) {
            return Vec::new();
        }
        let mut out = Vec::new();
        for a in 0..n {
            for p in 0..n {
                if a == p || labels[a] != labels[p] {
                    continue;
                }
                let d_ap = dists[a][p];
                let negatives: Vec<usize> =
                    (0..n).filter(|&x| labels[x] != labels[a]).collect();
                let in_window: Vec<usize> = negatives
                    .iter()
                    .copied()
                    .filter(|&x| d_ap < dists[a][x] && dists[a][x] < d_ap + margin)
                    .collect();
                let pick_min = |set: &[usize]| {
                    let mut best = set[0];
                    for &x in set {
                        if dists[a][x] < dists[a][best] {
                            best = x;
                        }
                    }
                    best
                };
                let (neg, branch) = if !in_window.is_empty() {
                    (pick_min(&in_window), MiningBranch::SemiHard)
                } else {
                    let strictly_beyond: Vec<usize> = negatives
                        .iter()
                        .copied()
                        .filter(|&x| dists[a][x] > d_ap)
                        .collect();
                    if !strictly_beyond.is_empty() {
                        (pick_min(&strictly_beyond), MiningBranch::NearestBeyondPositive)
                    } else {
                        let mut best = negatives[0];
                        for &x in &negatives {
                            if dists[a][x] > dists[a][best] {
                                best = x;
                            }
                        }
                        (best, MiningBranch::FarthestNegative)
                    }
                };
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: neg,
                    branch,
                });
            }
        }
        out
    }

    #[test]
    fn unique_feasible_negative_is_chosen() {
        // anchor 0, positive 1 close; negative 2 inside the window,
        // negative 3 far outside it.
        let e0 = unit(vec![1.0, 0.0, 0.0]);
        let e1 = unit(vec![0.98, 0.2, 0.0]);
        let e2 = unit(vec![0.6, 0.8, 0.0]);
        let e3 = unit(vec![-1.0, 0.0, 0.0]);
        let embeddings = vec![e0, e1, e2, e3];
        let labels = [Label::Peak, Label::Peak, Label::NonPeak, Label::NonPeak];
        let dists = pairwise_sq_dists(&embeddings);
        let d_ap = dists[0][1];
        assert!(d_ap < dists[0][2] && dists[0][2] < d_ap + 1.0);
        assert!(dists[0][3] > d_ap + 1.0);

        let triplets = mine_semi_hard(&dists, &labels, 1.0);
        let t = triplets.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
        assert_eq!(t.negative, 2);
        assert_eq!(t.branch, MiningBranch::SemiHard);
    }

    #[test]
    fn mining_matches_exhaustive_oracle() {
        let mut rng = SplitMix64::new(20);
        for round in 0..100 {
            let n = 4 + rng.next_below(13) as usize; // up to 16
            let labels: Vec<Label> = (0..n)
                .map(|i| if i % 2 == 0 { Label::Peak } else { Label::NonPeak })
                .collect();
            let embeddings: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 6)).collect();
            let dists = pairwise_sq_dists(&embeddings);
            let margin = [0.2, 1.0, 2.0][round % 3];
            assert_eq!(
                mine_semi_hard(&dists, &labels, margin),
                oracle_mine(&dists, &labels, margin),
                "round {round}"
            );
        }
    }

    #[test]
    fn fallback_when_all_negatives_closer() {
        // all negatives packed around the anchor, positive far away
        let anchor = unit(vec![1.0, 0.0, 0.0]);
        let positive = unit(vec![-1.0, 0.05, 0.0]);
        let n1 = unit(vec![0.99, 0.1, 0.0]);
        let n2 = unit(vec![0.95, -0.3, 0.0]);
        let embeddings = vec![anchor, positive, n1, n2];
        let labels = [Label::Peak, Label::Peak, Label::NonPeak, Label::NonPeak];
        let dists = pairwise_sq_dists(&embeddings);
        assert!(dists[0][2] < dists[0][1] && dists[0][3] < dists[0][1]);

        let triplets = mine_semi_hard(&dists, &labels, 1.0);
        let t = triplets.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
        assert_eq!(t.branch, MiningBranch::FarthestNegative);
        // chosen negative has the larger d_an
        let expected = if dists[0][2] >= dists[0][3] { 2 } else { 3 };
        assert_eq!(t.negative, expected);
        assert_eq!(
            mine_semi_hard(&dists, &labels, 1.0),
            oracle_mine(&dists, &labels, 1.0)
        );
    }

    #[test]
    fn single_class_batch_yields_empty_set() {
        let mut rng = SplitMix64::new(30);
        let embeddings: Vec<Embedding> = (0..6).map(|_| random_unit(&mut rng, 4)).collect();
        let labels = vec![Label::Peak; 6];
        let dists = pairwise_sq_dists(&embeddings);
        assert!(mine_semi_hard(&dists, &labels, 1.0).is_empty());
    }

    #[test]
    fn batch_loss_examples() {
        let mut rng = SplitMix64::new(40);
        let embeddings: Vec<Embedding> = (0..8).map(|_| random_unit(&mut rng, 5)).collect();
        let labels: Vec<Label> = (0..8)
            .map(|i| if i < 4 { Label::Peak } else { Label::NonPeak })
            .collect();
        let dists = pairwise_sq_dists(&embeddings);
        let triplets = mine_semi_hard(&dists, &labels, 1.0);
        assert!(!triplets.is_empty());

        // one triplet equals the scalar loss
        let one = &triplets[..1];
        let expected = triplet_loss(
            sq_dist(&embeddings[one[0].anchor], &embeddings[one[0].positive]),
            sq_dist(&embeddings[one[0].anchor], &embeddings[one[0].negative]),
            1.0,
        );
        assert_eq!(batch_triplet_loss(one, &embeddings, 1.0), expected);

        // duplicating the list leaves the mean unchanged
        let mut doubled = triplets.clone();
        doubled.extend_from_slice(&triplets);
        let a = batch_triplet_loss(&triplets, &embeddings, 1.0);
        let b = batch_triplet_loss(&doubled, &embeddings, 1.0);
        assert!((a - b).abs() < 1e-12);

        // scalar-sum oracle
        let mut total = 0.0;
        for t in &triplets {
            total += triplet_loss(
                sq_dist(&embeddings[t.anchor], &embeddings[t.positive]),
                sq_dist(&embeddings[t.anchor], &embeddings[t.negative]),
                1.0,
            );
        }
        assert!((a - total / triplets.len() as f64).abs() < 1e-12);

        // empty set costs zero
        assert_eq!(batch_triplet_loss(&[], &embeddings, 1.0), 0.0);
    }
}
