//! Retrieval metrics and pronoun stratification.

use serde::{Deserialize, Serialize};

use crate::decoder::Ranking;
use crate::error::{Error, Result};

pub const PRONOUNS: [&str; 14] = [
    "it", "its", "they", "their", "them", "these", "those", "this", "that", "he", "his", "him", "she", "her",
];

/// True if the (lowercased) question contains a pronoun.
pub fn classify_sc_si<S: AsRef<str>>(question_tokens: &[S]) -> bool {
    question_tokens.iter().any(|t| PRONOUNS.contains(&t.as_ref()))
}

fn nonempty(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::usage("metric over an empty set of rounds"));
    }
    if ranks.contains(&0) {
        return Err(Error::usage("ranks are 1-based"));
    }
    Ok(())
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    nonempty(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    nonempty(ranks)?;
    if k == 0 {
        return Err(Error::usage("recall@k needs k >= 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    nonempty(ranks)?;
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// Top-`k` DCG with `k` the number of relevant candidates, normalised by the
/// ideal ordering.
pub fn ndcg(ranking: &Ranking, relevance: &[f64]) -> Result<f64> {
    if relevance.len() != ranking.order.len() {
        return Err(Error::Dimension {
            op: "ndcg",
            lhs: vec![ranking.order.len()],
            rhs: vec![relevance.len()],
        });
    }
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Err(Error::usage("ndcg needs at least one relevant candidate"));
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    let dcg: f64 = ranking.order[..k]
        .iter()
        .enumerate()
        .map(|(i, &c)| relevance[c] / discount(i))
        .sum();
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal[..k].iter().enumerate().map(|(i, r)| r / discount(i)).sum();
    Ok(dcg / idcg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub gt_rank: usize,
    pub ranking: Ranking,
    pub relevance: Option<Vec<f64>>,
    pub is_si: bool,
}

impl RoundResult {
    pub fn new(ranking: Ranking, gt_index: usize, relevance: Option<Vec<f64>>, is_si: bool) -> Result<Self> {
        let gt_rank = *ranking
            .rank_of
            .get(gt_index)
            .ok_or_else(|| Error::usage(format!("ground-truth index {gt_index} outside the ranking")))?;
        Ok(RoundResult {
            gt_rank,
            ranking,
            relevance,
            is_si,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    /// Over rounds with relevance annotations only; `None` if there are none.
    pub ndcg: Option<f64>,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
}

impl Metrics {
    fn over(rounds: &[&RoundResult]) -> Result<Option<Self>> {
        if rounds.is_empty() {
            return Ok(None);
        }
        let ranks: Vec<usize> = rounds.iter().map(|r| r.gt_rank).collect();
        let scored = rounds
            .iter()
            .filter_map(|r| r.relevance.as_ref().map(|rel| ndcg(&r.ranking, rel)))
            .collect::<Result<Vec<f64>>>()?;
        let ndcg = if scored.is_empty() {
            None
        } else {
            Some(scored.iter().sum::<f64>() / scored.len() as f64)
        };
        Ok(Some(Metrics {
            n: ranks.len(),
            ndcg,
            mrr: mrr(&ranks)?,
            r1: recall_at_k(&ranks, 1)?,
            r5: recall_at_k(&ranks, 5)?,
            r10: recall_at_k(&ranks, 10)?,
            mean_rank: mean_rank(&ranks)?,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub sc: Option<Metrics>,
    pub si: Option<Metrics>,
}

pub fn aggregate(results: &[RoundResult]) -> Result<MetricsReport> {
    let all: Vec<&RoundResult> = results.iter().collect();
    let overall = Metrics::over(&all)?.ok_or_else(|| Error::usage("aggregate over no rounds"))?;
    let (si, sc): (Vec<&RoundResult>, Vec<&RoundResult>) = all.into_iter().partition(|r| r.is_si);
    Ok(MetricsReport {
        overall,
        sc: Metrics::over(&sc)?,
        si: Metrics::over(&si)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::encoders::tokenize;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    fn ranking(order: Vec<usize>) -> Ranking {
        let mut rank_of = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            rank_of[i] = r + 1;
        }
        Ranking { order, rank_of }
    }

    #[test]
    fn rank_metric_examples() {
        close(mrr(&[1, 1, 1]).unwrap(), 1.0);
        close(mrr(&[1, 2, 4]).unwrap(), 7.0 / 12.0);
        close(mrr(&[100]).unwrap(), 0.01);
        let r = [1, 6, 11];
        close(recall_at_k(&r, 1).unwrap(), 1.0 / 3.0);
        close(recall_at_k(&r, 5).unwrap(), 1.0 / 3.0);
        close(recall_at_k(&r, 10).unwrap(), 2.0 / 3.0);
        close(recall_at_k(&[1, 2, 3], 3).unwrap(), 1.0);
        close(mean_rank(&[1, 2, 3]).unwrap(), 2.0);
        assert!(matches!(mrr(&[]), Err(Error::Usage(_))));
        assert!(matches!(recall_at_k(&[], 1), Err(Error::Usage(_))));
        assert!(matches!(mean_rank(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn ndcg_examples() {
        let rel = [1.0, 0.5, 0.0, 0.0];
        close(ndcg(&ranking(vec![0, 1, 2, 3]), &rel).unwrap(), 1.0);
        let got = ndcg(&ranking(vec![1, 0, 2, 3]), &rel).unwrap();
        let want = (0.5 + 1.0 / 3f64.log2()) / (1.0 + 0.5 / 3f64.log2());
        close(got, want);
        assert!((got - 0.85972).abs() < 1e-5);
        let both = [1.0, 1.0, 0.0];
        close(ndcg(&ranking(vec![0, 1, 2]), &both).unwrap(), 1.0);
        close(ndcg(&ranking(vec![1, 0, 2]), &both).unwrap(), 1.0);
        assert!(matches!(ndcg(&ranking(vec![0, 1]), &[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn pronoun_classification() {
        assert!(classify_sc_si(&tokenize("Does it look like a nice one?")));
        assert!(!classify_sc_si(&tokenize("How many people are in the image?")));
        assert!(classify_sc_si(&tokenize("is that his hat")));
    }

    #[test]
    fn aggregate_single_perfect_round() {
        let r = RoundResult::new(ranking(vec![2, 0, 1]), 2, Some(vec![0.0, 0.0, 1.0]), false).unwrap();
        let rep = aggregate(&[r]).unwrap();
        assert_eq!(rep.overall.ndcg, Some(1.0));
        assert_eq!((rep.overall.mrr, rep.overall.r1, rep.overall.mean_rank), (1.0, 1.0, 1.0));
        assert!(rep.si.is_none());
        assert!(matches!(aggregate(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn mixed_fixture_matches_per_metric_oracles() {
        // Ten rounds over 12 candidates; the ground truth is candidate 0.
        let orders: [[usize; 3]; 10] = [
            [0, 1, 2],
            [1, 0, 2],
            [3, 4, 0],
            [5, 6, 7],
            [0, 2, 1],
            [2, 1, 0],
            [4, 0, 3],
            [1, 2, 3],
            [7, 8, 9],
            [0, 3, 4],
        ];
        let mut results = Vec::new();
        let mut ranks = Vec::new();
        for (i, head) in orders.iter().enumerate() {
            let mut order = head.to_vec();
            order.extend((0..12).filter(|c| !head.contains(c)));
            let r = ranking(order);
            ranks.push(r.rank_of[0]);
            let rel = (i % 3 != 2).then(|| {
                let mut v = vec![0.0; 12];
                v[0] = 1.0;
                v[1] = 0.5;
                v
            });
            results.push(RoundResult::new(r, 0, rel, i % 2 == 1).unwrap());
        }
        assert_eq!(ranks, vec![1, 2, 3, 4, 1, 3, 2, 4, 4, 1]);
        let rep = aggregate(&results).unwrap();
        close(rep.overall.mrr, ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / 10.0);
        close(rep.overall.r1, 0.3);
        close(rep.overall.r5, 1.0);
        close(rep.overall.mean_rank, 2.5);
        let (sc, si) = (rep.sc.unwrap(), rep.si.unwrap());
        assert_eq!(sc.n + si.n, rep.overall.n);
        close(sc.mrr, (1.0 + 1.0 / 3.0 + 1.0 + 0.5 + 0.25) / 5.0);
        close(si.mean_rank, (2.0 + 4.0 + 3.0 + 4.0 + 1.0) / 5.0);

        // NDCG only over annotated rounds (indices with i % 3 != 2).
        let l3 = 3f64.log2();
        let idcg = 1.0 + 0.5 / l3;
        let per_round: Vec<f64> = results
            .iter()
            .filter(|r| r.relevance.is_some())
            .map(|r| {
                let o = &r.ranking.order;
                let gain = |c: usize| match c {
                    0 => 1.0,
                    1 => 0.5,
                    _ => 0.0,
                };
                (gain(o[0]) + gain(o[1]) / l3) / idcg
            })
            .collect();
        assert_eq!(per_round.len(), 7);
        close(rep.overall.ndcg.unwrap(), per_round.iter().sum::<f64>() / 7.0);
    }

    /// Formula evaluated over every permutation of a small candidate set.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn ndcg_matches_brute_force_over_all_permutations() {
        let rel = [0.0, 1.0, 0.5, 0.0, 0.25, 1.0];
        let k = 4;
        let ideal: f64 = [1.0, 1.0, 0.5, 0.25]
            .iter()
            .enumerate()
            .map(|(i, r)| r / ((i + 2) as f64).log2())
            .sum();
        for p in permutations(rel.len()) {
            let dcg: f64 = (0..k).map(|i| rel[p[i]] / ((i + 2) as f64).log2()).sum();
            let got = ndcg(&ranking(p.clone()), &rel).unwrap();
            assert!((got - dcg / ideal).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn metric_ranges(ranks in prop::collection::vec(1usize..30, 1..40)) {
            let (r1, r5, r10) = (
                recall_at_k(&ranks, 1).unwrap(),
                recall_at_k(&ranks, 5).unwrap(),
                recall_at_k(&ranks, 10).unwrap(),
            );
            prop_assert!(r1 <= r5 && r5 <= r10);
            let m = mrr(&ranks).unwrap();
            prop_assert!(m > 0.0 && m <= 1.0);
            prop_assert!(mean_rank(&ranks).unwrap() >= 1.0);
        }

        #[test]
        fn ndcg_scale_invariant(
            rel in prop::collection::vec(0u8..4, 2..8),
            c in 0.1f64..10.0,
            seed in any::<u64>(),
        ) {
            prop_assume!(rel.iter().any(|&r| r > 0));
            let rel: Vec<f64> = rel.iter().map(|&r| r as f64 / 3.0).collect();
            let mut order: Vec<usize> = (0..rel.len()).collect();
            order.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1).rotate_left(17));
            let r = ranking(order);
            let base = ndcg(&r, &rel).unwrap();
            let scaled: Vec<f64> = rel.iter().map(|x| x * c).collect();
            prop_assert!((base - ndcg(&r, &scaled).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
        }
    }
}
