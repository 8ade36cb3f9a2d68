//! Candidate scoring, ranking and the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Graph, Scalar, Var};

/// Logits `1 × A` of every candidate: `e_find · O_tᵀ`.
pub fn candidate_logits<T: Scalar>(g: &mut Graph<'_, T>, e_find: Var, candidates: Var) -> Result<Var> {
    let a = g.shape(candidates).first().copied().unwrap_or(0);
    if a < 2 {
        return Err(Error::usage(format!("scoring needs at least 2 candidates, got {a}")));
    }
    let ot = g.transpose(candidates)?;
    g.matmul(e_find, ot)
}

/// Training loss for one round; same contract as [`cross_entropy`].
pub fn round_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, gt_index: usize) -> Result<Var> {
    g.cross_entropy(logits, gt_index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub logits: Vec<f64>,
    pub p: Vec<f64>,
}

impl ScoreDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::usage(format!(
                "scoring needs at least 2 candidates, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "score_candidates".into(),
            });
        }
        let lse = log_sum_exp(&logits);
        let p = logits.iter().map(|z| (z - lse).exp()).collect();
        Ok(ScoreDistribution { logits, p })
    }

    /// A distribution given directly as probabilities (ensemble averages).
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::usage("scoring needs at least 2 candidates"));
        }
        let logits = p.iter().map(|x| x.ln()).collect();
        Ok(ScoreDistribution { logits, p })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// `logits = O_t·e_find`, `p = softmax(logits)`, on plain vectors.
pub fn score_candidates(e_find: &[f64], candidates: &[Vec<f64>]) -> Result<ScoreDistribution> {
    let logits = candidates
        .iter()
        .map(|o| {
            if o.len() != e_find.len() {
                return Err(Error::Dimension {
                    op: "score_candidates",
                    lhs: vec![candidates.len(), o.len()],
                    rhs: vec![e_find.len()],
                });
            }
            Ok(o.iter().zip(e_find).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreDistribution::from_logits(logits)
}

/// `-log p[gt]` from the logits via log-sum-exp.
pub fn cross_entropy(dist: &ScoreDistribution, gt_index: usize) -> Result<f64> {
    if gt_index >= dist.len() {
        return Err(Error::usage(format!(
            "ground-truth index {gt_index} outside {} candidates",
            dist.len()
        )));
    }
    Ok(log_sum_exp(&dist.logits) - dist.logits[gt_index])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// 1-based rank of each candidate.
    pub rank_of: Vec<usize>,
}

impl Ranking {
    /// Descending score, ties by ascending index.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut rank_of = vec![0; scores.len()];
        for (r, &i) in order.iter().enumerate() {
            rank_of[i] = r + 1;
        }
        Ranking { order, rank_of }
    }
}

pub fn rank_candidates(dist: &ScoreDistribution) -> Ranking {
    // Same order as `p`, but distinct logits never collapse into a tie
    // through exp underflow.
    Ranking::from_scores(&dist.logits)
}
