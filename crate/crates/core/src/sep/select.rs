use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Selection;

/// `score[i, b]` is the mean over features of `tokens[i, b, :]²`.
pub fn activation_scores(tokens: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 3 {
        return Err(Error::dim("activation_scores", tokens.shape(), &[0, 0, 0]));
    }
    let (len, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let data = tokens
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() / d as f64)
        .collect();
    Tensor::new(&[len, n], data)
}

/// Per batch element, the source positions of the `k` representative tokens.
///
/// Activation ranks by descending score with ties going to the lower
/// position; Front takes positions `0..k` for every element.
pub fn select_indices(scores: &Tensor, k: usize, strategy: Selection) -> Result<Vec<Vec<usize>>> {
    let (len, n) = (scores.shape()[0], scores.shape()[1]);
    if k == 0 || k > len {
        return Err(Error::Config(format!("cannot select {k} of {len} tokens")));
    }
    Ok((0..n)
        .map(|b| match strategy {
            Selection::Front => (0..k).collect(),
            Selection::Activation => {
                let mut order: Vec<usize> = (0..len).collect();
                let s = |i: usize| scores.data()[i * n + b];
                order.sort_by(|&i, &j| s(j).total_cmp(&s(i)).then(i.cmp(&j)));
                order.truncate(k);
                order
            }
        })
        .collect())
}

/// Gathers `[k, N, d]` representatives from `pretrained[L, N, d]`. The
/// ranking is an index choice; gradients reach only the gathered values.
pub fn select_representative(
    tape: &mut Tape,
    pretrained: Var,
    k: usize,
    strategy: Selection,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let scores = match strategy {
        Selection::Activation => activation_scores(tape.value(pretrained))?,
        Selection::Front => {
            let s = tape.shape(pretrained);
            Tensor::zeros(&[s[0], s[1]])
        }
    };
    let rows = select_indices(&scores, k, strategy)?;
    let picked = tape.gather_rows(pretrained, &rows)?;
    Ok((picked, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_score_examples() {
        let t = Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = activation_scores(&t).unwrap();
        assert!((s.data()[0] - 14.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.data()[1], 0.0);
    }

    #[test]
    fn ranking_example() {
        let scores = Tensor::new(&[4, 1], vec![0.5, 2.0, 1.0, 3.0]).unwrap();
        // Fourth then second position.
        assert_eq!(select_indices(&scores, 2, Selection::Activation).unwrap(), vec![vec![3, 1]]);
        assert_eq!(select_indices(&scores, 3, Selection::Front).unwrap(), vec![vec![0, 1, 2]]);
        assert!(matches!(select_indices(&scores, 5, Selection::Front), Err(Error::Config(_))));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let scores = Tensor::new(&[5, 1], vec![1.0, 2.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(
            select_indices(&scores, 4, Selection::Activation).unwrap(),
            vec![vec![1, 3, 0, 2]]
        );
    }

    #[test]
    fn gathered_values_match_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&mut rng, &[17, 4, 8], -1.0, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let (picked, rows) = select_representative(&mut tape, v, 4, Selection::Activation).unwrap();
        let out = tape.value(picked);
        for (b, r) in rows.iter().enumerate() {
            for (j, &src) in r.iter().enumerate() {
                for f in 0..8 {
                    assert_eq!(out.at(&[j, b, f]), x.at(&[src, b, f]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn scaling_a_token_scales_its_score_quadratically(
            values in proptest::collection::vec(-1.0f64..1.0, 8),
            c in -3.0f64..3.0,
        ) {
            let t = Tensor::new(&[1, 1, 8], values.clone()).unwrap();
            let scaled = Tensor::new(&[1, 1, 8], values.iter().map(|v| v * c).collect()).unwrap();
            let a = activation_scores(&t).unwrap().item();
            let b = activation_scores(&scaled).unwrap().item();
            prop_assert!(a >= 0.0);
            prop_assert!((b - c * c * a).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn selection_matches_brute_force(
            len in 1usize..20,
            n in 1usize..5,
            seed in any::<u64>(),
            levels in 1u32..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Few distinct levels force ties.
            let grid = Tensor::uniform(&mut rng, &[len, n], 0.0, levels as f64)
                .map(|v| v.floor());
            let k = 1 + (seed as usize % len);
            let got = select_indices(&grid, k, Selection::Activation).unwrap();
            for b in 0..n {
                let mut pairs: Vec<(f64, usize)> = (0..len).map(|i| (grid.at(&[i, b]), i)).collect();
                for i in 0..pairs.len() {
                    for j in 0..pairs.len() - 1 - i {
                        let (a, c) = (pairs[j], pairs[j + 1]);
                        if a.0 < c.0 || (a.0 == c.0 && a.1 > c.1) {
                            pairs.swap(j, j + 1);
                        }
                    }
                }
                let expected: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
                prop_assert_eq!(&got[b], &expected);
            }
        }
    }
}
