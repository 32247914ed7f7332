//! Split and vote properties as proptest strategies, runnable for a
//! chosen number of cases.

use ensnet::inference::{argmax, vote_logits};
use ensnet::model::{concat_channels, split_feature_maps};
use ensnet::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// `(N, C, H, W, k)` with `k` dividing `C`, plus the tensor data.
fn feature_maps() -> impl Strategy<Value = (Vec<usize>, usize, Vec<f32>)> {
    (1usize..4, 1usize..12, 1usize..9, 1usize..5, 1usize..5).prop_flat_map(|(n, k, per, h, w)| {
        let shape = vec![n, k * per, h, w];
        let len: usize = shape.iter().product();
        (Just(shape), Just(k), prop::collection::vec(-100f32..100.0, len))
    })
}

pub fn split_concat_identity(cases: u32) -> Result<(), String> {
    run(cases, feature_maps(), |(shape, k, data)| {
        let fm = Tensor::new(shape.clone(), data).unwrap();
        let blocks = split_feature_maps(&fm, k).unwrap();
        prop_assert_eq!(blocks.len(), k);
        let per = shape[1] / k;
        let plane = shape[2] * shape[3];
        for (i, b) in blocks.iter().enumerate() {
            prop_assert_eq!(b.shape(), &[shape[0], per, shape[2], shape[3]][..]);
            for n in 0..shape[0] {
                let src = (n * shape[1] + i * per) * plane;
                let dst = n * per * plane;
                prop_assert_eq!(&b.data()[dst..dst + per * plane], &fm.data()[src..src + per * plane]);
            }
        }
        let back = concat_channels(&blocks).unwrap();
        prop_assert_eq!(back.shape(), fm.shape());
        prop_assert!(back.data().iter().zip(fm.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        Ok(())
    })
}

/// Logits for `voters` voters over `classes` classes.
fn ballots() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..12, 2usize..11).prop_flat_map(|(voters, classes)| {
        prop::collection::vec(prop::collection::vec(-8f64..8.0, classes), voters)
    })
}

pub fn vote_conservation(cases: u32) -> Result<(), String> {
    run(cases, ballots(), |logits| {
        let r = vote_logits(&logits);
        let counts = r.counts();
        prop_assert_eq!(counts.iter().sum::<usize>(), logits.len());
        prop_assert_eq!(counts.len(), logits[0].len());
        let top = *counts.iter().max().unwrap();
        prop_assert_eq!(counts[r.winner], top);
        prop_assert_eq!(r.tie_broken, counts.iter().filter(|&&c| c == top).count() > 1);
        Ok(())
    })
}

/// More than half the voters put `target` on top; the rest vote freely.
fn majority_ballots() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (1usize..12, 2usize..11)
        .prop_flat_map(|(voters, classes)| {
            let majority = voters / 2 + 1;
            (
                0..classes,
                majority..=voters,
                prop::collection::vec(prop::collection::vec(-8f64..8.0, classes), voters),
            )
        })
        .prop_map(|(target, backers, mut logits)| {
            for row in logits.iter_mut().take(backers) {
                let top = row.iter().cloned().fold(f64::MIN, f64::max);
                row[target] = top + 1.0;
            }
            (target, logits)
        })
}

pub fn majority_dominance(cases: u32) -> Result<(), String> {
    run(cases, majority_ballots(), |(target, logits)| {
        let r = vote_logits(&logits);
        prop_assert_eq!(r.winner, target);
        prop_assert!(!r.tie_broken);
        Ok(())
    })
}

/// Rescaling each voter's logits by its own positive factor keeps every
/// voter's choice. The winner is kept whenever the count has a unique
/// top; tied counts fall back to probability mass, which scaling changes.
pub fn scaling_invariance(cases: u32) -> Result<(), String> {
    let scaled = ballots().prop_flat_map(|logits| {
        let n = logits.len();
        (Just(logits), prop::collection::vec(0.05f64..20.0, n))
    });
    run(cases, scaled, |(logits, scales)| {
        let rescaled: Vec<Vec<f64>> = logits
            .iter()
            .zip(&scales)
            .map(|(row, s)| row.iter().map(|v| v * s).collect())
            .collect();
        let a = vote_logits(&logits);
        let b = vote_logits(&rescaled);
        prop_assert_eq!(&a.voter_predictions, &b.voter_predictions);
        for (row, &p) in logits.iter().zip(&a.voter_predictions) {
            prop_assert_eq!(argmax(row), p);
        }
        prop_assert_eq!(a.tie_broken, b.tie_broken);
        if !a.tie_broken {
            prop_assert_eq!(a.winner, b.winner);
        }
        Ok(())
    })
}
