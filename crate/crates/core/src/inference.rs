//! Majority-vote prediction over the base network and the subnetworks.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::softmax_rows;
use crate::layers::Mode;
use crate::model::EnsNet;
use crate::tensor::{Scalar, Tensor};

/// The vote for one sample. Voter 0 is the base network.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteRecord {
    pub voter_predictions: Vec<usize>,
    pub voter_probs: Vec<Vec<f64>>,
    pub winner: usize,
    /// More than one class had the top vote count.
    pub tie_broken: bool,
}

impl VoteRecord {
    /// Votes per class.
    pub fn counts(&self) -> Vec<usize> {
        let classes = self.voter_probs.first().map_or(0, Vec::len);
        let mut counts = vec![0; classes];
        for &p in &self.voter_predictions {
            counts[p] += 1;
        }
        counts
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Tally one sample from each voter's softmax output. Each voter votes
/// for its argmax. Ties on the vote count go to the tied class with the
/// largest summed probability over all voters, then to the lowest index.
pub fn tally(voter_probs: Vec<Vec<f64>>) -> VoteRecord {
    let classes = voter_probs[0].len();
    let voter_predictions: Vec<usize> = voter_probs.iter().map(|p| argmax(p)).collect();
    let mut counts = vec![0usize; classes];
    for &p in &voter_predictions {
        counts[p] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let tied: Vec<usize> = (0..classes).filter(|&c| counts[c] == top).collect();
    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        let mass = |c: usize| voter_probs.iter().map(|p| p[c]).sum::<f64>();
        tied.iter()
            .copied()
            .fold(tied[0], |best, c| if mass(c) > mass(best) { c } else { best })
    };
    VoteRecord {
        voter_predictions,
        voter_probs,
        winner,
        tie_broken: tied.len() > 1,
    }
}

/// Tally from raw logits, one row per voter.
pub fn vote_logits(voter_logits: &[Vec<f64>]) -> VoteRecord {
    tally(
        voter_logits
            .iter()
            .map(|l| softmax_rows(l, l.len()))
            .collect(),
    )
}

/// Per-voter logits `[N, classes]` → one record per sample.
pub fn vote_batch<T: Scalar>(voters: &[Tensor<T>]) -> Vec<VoteRecord> {
    let classes = voters[0].shape()[1];
    let probs: Vec<Vec<f64>> = voters
        .iter()
        .map(|t| {
            softmax_rows(&t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), classes)
        })
        .collect();
    (0..voters[0].shape()[0])
        .map(|i| {
            tally(
                probs
                    .iter()
                    .map(|p| p[i * classes..(i + 1) * classes].to_vec())
                    .collect(),
            )
        })
        .collect()
}

/// Eval-mode prediction of a batch `[N, C, H, W]`.
pub fn predict<T: Scalar>(model: &EnsNet<T>, x: &Tensor<T>) -> Result<Vec<VoteRecord>> {
    let (base, subnets) = model.forward_all(x, Mode::Eval, None)?;
    let mut voters = vec![base];
    voters.extend(subnets);
    Ok(vote_batch(&voters))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Also score the averaged-probability decision. Diagnostic only.
    pub soft_vote: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 100,
            soft_vote: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Base network first, then each subnetwork.
    pub voter_errors: Vec<f64>,
    pub ensemble_error: f64,
    /// `agreement[i][j]`: fraction of samples where voters `i` and `j`
    /// predict the same class.
    pub agreement: Vec<Vec<f64>>,
    pub ties: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_vote_error: Option<f64>,
}

impl EvalReport {
    pub fn base_error(&self) -> f64 {
        self.voter_errors[0]
    }

    pub fn subnet_errors(&self) -> &[f64] {
        &self.voter_errors[1..]
    }
}

/// Accumulates vote records against labels.
#[derive(Clone, Debug)]
pub struct Scoreboard {
    samples: usize,
    voter_wrong: Vec<usize>,
    ensemble_wrong: usize,
    soft_wrong: usize,
    agree: Vec<Vec<usize>>,
    ties: usize,
}

impl Scoreboard {
    pub fn new(voters: usize) -> Self {
        Scoreboard {
            samples: 0,
            voter_wrong: vec![0; voters],
            ensemble_wrong: 0,
            soft_wrong: 0,
            agree: vec![vec![0; voters]; voters],
            ties: 0,
        }
    }

    pub fn add(&mut self, record: &VoteRecord, label: usize) {
        self.samples += 1;
        let preds = &record.voter_predictions;
        for (i, &p) in preds.iter().enumerate() {
            self.voter_wrong[i] += usize::from(p != label);
            for (j, &q) in preds.iter().enumerate() {
                self.agree[i][j] += usize::from(p == q);
            }
        }
        self.ensemble_wrong += usize::from(record.winner != label);
        self.ties += usize::from(record.tie_broken);
        let classes = record.voter_probs[0].len();
        let mean: Vec<f64> = (0..classes)
            .map(|c| record.voter_probs.iter().map(|p| p[c]).sum())
            .collect();
        self.soft_wrong += usize::from(argmax(&mean) != label);
    }

    pub fn report(&self, soft_vote: bool) -> Result<EvalReport> {
        if self.samples == 0 {
            return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
        }
        let n = self.samples as f64;
        Ok(EvalReport {
            samples: self.samples,
            voter_errors: self.voter_wrong.iter().map(|&w| w as f64 / n).collect(),
            ensemble_error: self.ensemble_wrong as f64 / n,
            agreement: self
                .agree
                .iter()
                .map(|row| row.iter().map(|&a| a as f64 / n).collect())
                .collect(),
            ties: self.ties,
            soft_vote_error: soft_vote.then(|| self.soft_wrong as f64 / n),
        })
    }
}

pub fn evaluate<T: Scalar>(model: &EnsNet<T>, dataset: &Dataset, options: EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::Contract("evaluation batch size must be positive".into()));
    }
    let mut board = Scoreboard::new(model.voter_count());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(options.batch_size) {
        let (x, labels) = dataset.batch(chunk);
        for (record, &label) in predict(model, &x.cast::<T>())?.iter().zip(&labels) {
            board.add(record, label);
        }
    }
    board.report(options.soft_vote)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes];
        v[c] = 1.0;
        v
    }

    #[test]
    fn unanimous() {
        let r = tally(vec![one_hot(7, 10); 11]);
        assert_eq!((r.winner, r.tie_broken), (7, false));
        assert_eq!(r.counts()[7], 11);
    }

    #[test]
    fn strict_majority() {
        let mut probs = vec![one_hot(3, 10); 5];
        probs.extend(vec![one_hot(8, 10); 5]);
        probs.push(one_hot(3, 10));
        let r = tally(probs);
        assert_eq!((r.winner, r.tie_broken), (3, false));
    }

    #[test]
    fn tie_goes_to_probability_mass() {
        // Four voters split 2-2 between classes 0 and 1; class 1 carries
        // 2.1 of summed probability against 1.9.
        let probs = vec![
            vec![0.55, 0.45, 0.0],
            vec![0.55, 0.45, 0.0],
            vec![0.4, 0.6, 0.0],
            vec![0.4, 0.6, 0.0],
        ];
        let r = tally(probs);
        assert_eq!((r.winner, r.tie_broken), (1, true));
    }

    #[test]
    fn exact_tie_goes_to_lowest_index() {
        let r = tally(vec![vec![0.6, 0.4], vec![0.4, 0.6]]);
        assert_eq!((r.winner, r.tie_broken), (0, true));
    }

    #[test]
    fn scoreboard_rates() {
        let mut board = Scoreboard::new(3);
        board.add(&tally(vec![one_hot(1, 3); 3]), 1);
        board.add(&tally(vec![one_hot(1, 3), one_hot(2, 3), one_hot(2, 3)]), 2);
        let rep = board.report(true).unwrap();
        assert_eq!(rep.voter_errors, vec![0.5, 0.0, 0.0]);
        assert_eq!(rep.ensemble_error, 0.0);
        assert_eq!(rep.agreement[0][1], 0.5);
        assert_eq!(rep.agreement[1][2], 1.0);
        assert_eq!(rep.soft_vote_error, Some(0.0));
        assert!(Scoreboard::new(2).report(false).is_err());
    }
}
