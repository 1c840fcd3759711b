//! Softmax retrieval objectives over unit embeddings: an exact full-catalog
//! softmax (the correctness oracle), an in-batch sampled softmax with logQ
//! correction, a random-negative softmax, a mixed-denominator variant, and
//! the production objective combining in-batch and random-negative terms.
//!
//! Logits are dot products of unit vectors, optionally multiplied by a
//! learnable temperature clamped to [1, 100] before any correction is
//! subtracted. Sampling corrections arrive as plain probabilities; the
//! functions take their logs internally.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Logit offset that removes a masked entry from its row's softmax: the
/// exponential underflows to exactly zero after max subtraction.
const MASK: f64 = -1e9;

/// Sampling corrections and bookkeeping for one sampled batch.
pub struct Corrections<'a> {
    /// Batch-sampling probability of each in-batch positive.
    pub batch_q: &'a [f64],
    /// Random-negative-sampler probability of each positive.
    pub positive_q: &'a [f64],
    /// Random-negative-sampler probability of each random negative.
    pub negative_q: &'a [f64],
    /// Product ids of the positives. A duplicate of example i's product at
    /// j ≠ i is masked out of example i's in-batch denominator.
    pub ids: &'a [u64],
}

/// −mean log softmax over an enumerated catalog; the exact reference the
/// sampled losses approximate.
pub fn full_softmax_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    catalog: Var,
    positives: &[usize],
    temperature: Option<Var>,
) -> Result<Var> {
    let b = tape.value(q).shape()[0];
    let c = tape.value(catalog).shape()[0];
    if positives.len() != b {
        return Err(Error::Input(format!(
            "{} positives for {b} queries",
            positives.len()
        )));
    }
    if let Some(&bad) = positives.iter().find(|&&i| i >= c) {
        return Err(Error::Input(format!(
            "positive index {bad} outside catalog of {c}"
        )));
    }
    let ct = tape.transpose(catalog)?;
    let raw = tape.matmul(q, ct)?;
    let logits = apply_temperature(tape, raw, temperature)?;
    softmax_loss_rows(tape, logits, positives)
}

/// Sampled softmax over the batch's own positives, logits corrected by
/// −log Q of each product's batch-sampling probability.
pub fn in_batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    p: Var,
    corr: &Corrections,
    temperature: Option<Var>,
) -> Result<Var> {
    let b = check_pair(tape, q, p)?;
    check_probs(corr.batch_q, b, "batch")?;
    if corr.ids.len() != b {
        return Err(Error::Input(format!(
            "{} product ids for {b} examples",
            corr.ids.len()
        )));
    }
    let pt = tape.transpose(p)?;
    let raw = tape.matmul(q, pt)?;
    let scaled = apply_temperature(tape, raw, temperature)?;
    let offsets = in_batch_offsets::<T>(corr.batch_q, corr.ids);
    let logits = tape.add_const(scaled, &offsets)?;
    let diag: Vec<usize> = (0..b).collect();
    softmax_loss_rows(tape, logits, &diag)
}

/// Sampled softmax of each positive against shared random negatives. By
/// default the positive's corrected logit joins its own denominator; the
/// literal form instead normalizes over negatives only and leaves the
/// numerator uncorrected.
pub fn random_negative_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    p: Var,
    n: Var,
    corr: &Corrections,
    temperature: Option<Var>,
    literal: bool,
) -> Result<Var> {
    let b = check_pair(tape, q, p)?;
    let negatives = tape.value(n).shape()[0];
    if negatives == 0 {
        return Err(Error::Input("no random negatives supplied".into()));
    }
    check_probs(corr.negative_q, negatives, "negative")?;
    let pos_raw = row_dots(tape, q, p)?;
    let pos = apply_temperature(tape, pos_raw, temperature)?;
    let nt = tape.transpose(n)?;
    let neg_raw = tape.matmul(q, nt)?;
    let neg_scaled = apply_temperature(tape, neg_raw, temperature)?;
    let neg_offsets = tiled_offsets::<T>(b, corr.negative_q);
    let neg = tape.add_const(neg_scaled, &neg_offsets)?;
    if literal {
        let lse = tape.row_logsumexp(neg)?;
        let pos_flat = tape.reshape(pos, vec![b])?;
        let diff = tape.sub(lse, pos_flat)?;
        return Ok(tape.mean_all(diff));
    }
    check_probs(corr.positive_q, b, "positive")?;
    let pos_off: Vec<T> = corr
        .positive_q
        .iter()
        .map(|&v| T::from_f64(-v.ln()))
        .collect();
    let pos_corr = tape.add_const(pos, &Tensor::new(vec![b, 1], pos_off)?)?;
    let all = tape.concat_cols(&[pos_corr, neg])?;
    softmax_loss_rows(tape, all, &vec![0; b])
}

/// Single softmax whose denominator sums the corrected in-batch terms and
/// the corrected random-negative terms.
pub fn mixed_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    p: Var,
    n: Option<Var>,
    corr: &Corrections,
    temperature: Option<Var>,
) -> Result<Var> {
    let b = check_pair(tape, q, p)?;
    check_probs(corr.batch_q, b, "batch")?;
    let pt = tape.transpose(p)?;
    let raw = tape.matmul(q, pt)?;
    let scaled = apply_temperature(tape, raw, temperature)?;
    let offsets = in_batch_offsets::<T>(corr.batch_q, corr.ids);
    let batch_logits = tape.add_const(scaled, &offsets)?;
    let all = match n {
        None => batch_logits,
        Some(n) => {
            let negatives = tape.value(n).shape()[0];
            check_probs(corr.negative_q, negatives, "negative")?;
            let nt = tape.transpose(n)?;
            let neg_raw = tape.matmul(q, nt)?;
            let neg_scaled = apply_temperature(tape, neg_raw, temperature)?;
            let neg_offsets = tiled_offsets::<T>(b, corr.negative_q);
            let neg = tape.add_const(neg_scaled, &neg_offsets)?;
            tape.concat_cols(&[batch_logits, neg])?
        }
    };
    let diag: Vec<usize> = (0..b).collect();
    softmax_loss_rows(tape, all, &diag)
}

/// The production objective: in-batch loss plus random-negative loss.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    p: Var,
    n: Var,
    corr: &Corrections,
    temperature: Option<Var>,
    literal: bool,
) -> Result<Var> {
    let pos = in_batch_loss(tape, q, p, corr, temperature)?;
    let neg = random_negative_loss(tape, q, p, n, corr, temperature, literal)?;
    tape.add(pos, neg)
}

/// −mean over rows of (logits[i][target_i] − logsumexp(logits[i])).
fn softmax_loss_rows<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let lse = tape.row_logsumexp(logits)?;
    let num = tape.gather_rowwise(logits, targets)?;
    let diff = tape.sub(lse, num)?;
    Ok(tape.mean_all(diff))
}

/// Per-row dot products of two equal-shape matrices, as a [rows × 1] column.
fn row_dots<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.value(a).shape()[1];
    let prod = tape.mul(a, b)?;
    let ones = tape.leaf(Tensor::filled(vec![d, 1], T::one()));
    tape.matmul(prod, ones)
}

fn apply_temperature<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    temperature: Option<Var>,
) -> Result<Var> {
    match temperature {
        None => Ok(logits),
        Some(t) => {
            let clamped = tape.clamp(t, T::one(), T::from_f64(100.0));
            tape.mul_scalar(logits, clamped)
        }
    }
}

/// Constant [B×B] offset matrix: −log batch_q per column, with duplicate
/// positives masked out of each other's rows.
fn in_batch_offsets<T: Scalar>(batch_q: &[f64], ids: &[u64]) -> Tensor<T> {
    let b = batch_q.len();
    let mut data = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            if i != j && ids[j] == ids[i] {
                data.push(T::from_f64(MASK));
            } else {
                data.push(T::from_f64(-batch_q[j].ln()));
            }
        }
    }
    Tensor::new(vec![b, b], data).unwrap()
}

/// Constant [rows × len(q)] offset matrix repeating −log q on every row.
fn tiled_offsets<T: Scalar>(rows: usize, q: &[f64]) -> Tensor<T> {
    let row: Vec<T> = q.iter().map(|&v| T::from_f64(-v.ln())).collect();
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![rows, row.len()], data).unwrap()
}

fn check_pair<T: Scalar>(tape: &Tape<T>, q: Var, p: Var) -> Result<usize> {
    let qs = tape.value(q).shape().to_vec();
    let ps = tape.value(p).shape().to_vec();
    if qs != ps {
        return Err(Error::Shape(format!(
            "query block {qs:?} and positive block {ps:?} differ"
        )));
    }
    if qs[0] == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(qs[0])
}

fn check_probs(q: &[f64], expected: usize, kind: &str) -> Result<()> {
    if q.len() != expected {
        return Err(Error::Input(format!(
            "{} {kind} sampling probabilities for {expected} items",
            q.len()
        )));
    }
    if let Some(&bad) = q.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!(
            "{kind} sampling probability must be positive and finite, got {bad}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;

    fn run(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).data()[0]
    }

    fn mat(tape: &mut Tape<f64>, rows: usize, cols: usize, data: &[f64]) -> Var {
        tape.leaf(Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
    }

    #[test]
    fn full_softmax_single_product_is_zero() {
        let loss = run(|t| {
            let q = mat(t, 1, 2, &[1.0, 0.0]);
            let c = mat(t, 1, 2, &[1.0, 0.0]);
            full_softmax_loss(t, q, c, &[0], None)
        });
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn full_softmax_two_orthogonal_closed_form() {
        let loss = run(|t| {
            let q = mat(t, 1, 2, &[1.0, 0.0]);
            let c = mat(t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
            full_softmax_loss(t, q, c, &[0], None)
        });
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn full_softmax_uniform_logits_is_log_c() {
        for c in [2usize, 5, 17] {
            let loss = run(|t| {
                let q = mat(t, 1, 2, &[0.0, 1.0]);
                let cat = mat(
                    t,
                    c,
                    2,
                    &(0..c).flat_map(|_| [1.0, 0.0]).collect::<Vec<_>>(),
                );
                full_softmax_loss(t, q, cat, &[0], None)
            });
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_softmax_rejects_positive_outside_catalog() {
        let mut tape = Tape::<f64>::new();
        let q = mat(&mut tape, 1, 2, &[1.0, 0.0]);
        let c = mat(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            full_softmax_loss(&mut tape, q, c, &[2], None),
            Err(Error::Input(_))
        ));
    }

    const Q2: [f64; 4] = [1.0, 0.0, 0.6, 0.8];
    const P2: [f64; 4] = [0.8, -0.6, 0.0, 1.0];

    #[test]
    fn in_batch_uniform_q_matches_uncorrected() {
        let corrected = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let corr = Corrections {
                batch_q: &[0.37, 0.37],
                positive_q: &[],
                negative_q: &[],
                ids: &[1, 2],
            };
            in_batch_loss(t, q, p, &corr, None)
        });
        let uncorrected = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let corr = Corrections {
                batch_q: &[1.0, 1.0],
                positive_q: &[],
                negative_q: &[],
                ids: &[1, 2],
            };
            in_batch_loss(t, q, p, &corr, None)
        });
        assert!((corrected - uncorrected).abs() < 1e-12);
    }

    #[test]
    fn in_batch_single_example_is_zero() {
        let loss = run(|t| {
            let q = mat(t, 1, 2, &[0.6, 0.8]);
            let p = mat(t, 1, 2, &[1.0, 0.0]);
            let corr = Corrections {
                batch_q: &[0.2],
                positive_q: &[],
                negative_q: &[],
                ids: &[5],
            };
            in_batch_loss(t, q, p, &corr, None)
        });
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn in_batch_two_example_hand_expansion() {
        let bq = [0.3, 0.7];
        let loss = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let corr = Corrections {
                batch_q: &bq,
                positive_q: &[],
                negative_q: &[],
                ids: &[1, 2],
            };
            in_batch_loss(t, q, p, &corr, None)
        });
        let dot = |qi: &[f64], pj: &[f64]| qi[0] * pj[0] + qi[1] * pj[1];
        let (q0, q1, p0, p1) = (&Q2[..2], &Q2[2..], &P2[..2], &P2[2..]);
        let s = [
            [dot(q0, p0) - bq[0].ln(), dot(q0, p1) - bq[1].ln()],
            [dot(q1, p0) - bq[0].ln(), dot(q1, p1) - bq[1].ln()],
        ];
        let hand = -0.5
            * ((s[0][0] - (s[0][0].exp() + s[0][1].exp()).ln())
                + (s[1][1] - (s[1][0].exp() + s[1][1].exp()).ln()));
        assert!((loss - hand).abs() < 1e-9);
    }

    #[test]
    fn in_batch_masks_duplicate_positives() {
        let qd = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let pd = [0.8, 0.6, 0.8, 0.6, 0.0, 1.0];
        let ids = [7u64, 7, 9];
        let bq = [0.2, 0.2, 0.5];
        let loss = run(|t| {
            let q = mat(t, 3, 2, &qd);
            let p = mat(t, 3, 2, &pd);
            let corr = Corrections {
                batch_q: &bq,
                positive_q: &[],
                negative_q: &[],
                ids: &ids,
            };
            in_batch_loss(t, q, p, &corr, None)
        });
        let dot = |i: usize, j: usize| qd[2 * i] * pd[2 * j] + qd[2 * i + 1] * pd[2 * j + 1];
        let mut hand = 0.0;
        for i in 0..3 {
            let mut den = 0.0;
            for j in 0..3 {
                if i != j && ids[i] == ids[j] {
                    continue;
                }
                den += (dot(i, j) - bq[j].ln()).exp();
            }
            hand -= (dot(i, i) - bq[i].ln()) - den.ln();
        }
        hand /= 3.0;
        assert!((loss - hand).abs() < 1e-9);
    }

    #[test]
    fn random_negative_aligned_positive_high_temperature_vanishes() {
        let loss = run(|t| {
            let q = mat(t, 1, 2, &[1.0, 0.0]);
            let p = mat(t, 1, 2, &[1.0, 0.0]);
            let n = mat(t, 2, 2, &[0.0, 1.0, 0.0, -1.0]);
            let temp = t.leaf(Tensor::scalar(100.0));
            let corr = Corrections {
                batch_q: &[],
                positive_q: &[0.5],
                negative_q: &[0.5, 0.5],
                ids: &[1],
            };
            random_negative_loss(t, q, p, n, &corr, Some(temp), false)
        });
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn random_negative_duplicate_of_positive_raises_loss() {
        let base = run(|t| {
            let q = mat(t, 1, 2, &[1.0, 0.0]);
            let p = mat(t, 1, 2, &[1.0, 0.0]);
            let n = mat(t, 1, 2, &[0.0, 1.0]);
            let corr = Corrections {
                batch_q: &[],
                positive_q: &[0.5],
                negative_q: &[0.5],
                ids: &[1],
            };
            random_negative_loss(t, q, p, n, &corr, None, false)
        });
        let with_dup = run(|t| {
            let q = mat(t, 1, 2, &[1.0, 0.0]);
            let p = mat(t, 1, 2, &[1.0, 0.0]);
            let n = mat(t, 2, 2, &[0.0, 1.0, 1.0, 0.0]);
            let corr = Corrections {
                batch_q: &[],
                positive_q: &[0.5],
                negative_q: &[0.5, 0.5],
                ids: &[1],
            };
            random_negative_loss(t, q, p, n, &corr, None, false)
        });
        assert!(with_dup > base);
    }

    #[test]
    fn random_negative_uniform_q_matches_uncorrected() {
        let eval = |c: f64| {
            run(|t| {
                let q = mat(t, 2, 2, &Q2);
                let p = mat(t, 2, 2, &P2);
                let n = mat(t, 2, 2, &[0.0, 1.0, -0.6, 0.8]);
                let corr = Corrections {
                    batch_q: &[],
                    positive_q: &[c, c],
                    negative_q: &[c, c],
                    ids: &[1, 2],
                };
                random_negative_loss(t, q, p, n, &corr, None, false)
            })
        };
        assert!((eval(0.41) - eval(1.0)).abs() < 1e-12);
    }

    #[test]
    fn literal_form_matches_printed_equation() {
        let qn = [0.4, 0.1];
        let nd = [0.0, 1.0, -0.6, 0.8];
        let loss = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let n = mat(t, 2, 2, &nd);
            let corr = Corrections {
                batch_q: &[],
                positive_q: &[0.9, 0.9],
                negative_q: &qn,
                ids: &[1, 2],
            };
            random_negative_loss(t, q, p, n, &corr, None, true)
        });
        let dot = |a: &[f64], b: &[f64]| a[0] * b[0] + a[1] * b[1];
        let mut hand = 0.0;
        for (qi, pi) in [(&Q2[..2], &P2[..2]), (&Q2[2..], &P2[2..])] {
            let den: f64 = (0..2)
                .map(|k| (dot(qi, &nd[2 * k..2 * k + 2]) - qn[k].ln()).exp())
                .sum();
            hand -= dot(qi, pi) - den.ln();
        }
        hand /= 2.0;
        assert!((loss - hand).abs() < 1e-9);
    }

    #[test]
    fn mixed_without_negatives_reduces_to_in_batch() {
        let corr = Corrections {
            batch_q: &[0.3, 0.7],
            positive_q: &[],
            negative_q: &[],
            ids: &[1, 2],
        };
        let mixed = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            mixed_loss(t, q, p, None, &corr, None)
        });
        let in_batch = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            in_batch_loss(t, q, p, &corr, None)
        });
        assert_eq!(mixed, in_batch);
    }

    #[test]
    fn mixed_single_example_hand_expansion() {
        let loss = run(|t| {
            let q = mat(t, 1, 2, &[0.6, 0.8]);
            let p = mat(t, 1, 2, &[1.0, 0.0]);
            let n = mat(t, 1, 2, &[0.0, 1.0]);
            let corr = Corrections {
                batch_q: &[0.4],
                positive_q: &[],
                negative_q: &[0.25],
                ids: &[3],
            };
            mixed_loss(t, q, p, Some(n), &corr, None)
        });
        let sb = 0.6 - 0.4f64.ln();
        let sn = 0.8 - 0.25f64.ln();
        let hand = -(sb - (sb.exp() + sn.exp()).ln());
        assert!((loss - hand).abs() < 1e-9);
    }

    #[test]
    fn mixed_never_below_in_batch() {
        let corr = Corrections {
            batch_q: &[0.3, 0.7],
            positive_q: &[],
            negative_q: &[0.5, 0.1],
            ids: &[1, 2],
        };
        let mixed = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let n = mat(t, 2, 2, &[0.0, 1.0, -1.0, 0.0]);
            mixed_loss(t, q, p, Some(n), &corr, None)
        });
        let in_batch = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            in_batch_loss(t, q, p, &corr, None)
        });
        assert!(mixed >= in_batch);
    }

    #[test]
    fn combined_is_exact_sum_of_terms() {
        let corr = Corrections {
            batch_q: &[0.3, 0.7],
            positive_q: &[0.5, 0.5],
            negative_q: &[0.2, 0.8],
            ids: &[1, 2],
        };
        let nd = [0.0, 1.0, -0.6, 0.8];
        let total = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let n = mat(t, 2, 2, &nd);
            combined_loss(t, q, p, n, &corr, None, false)
        });
        let pos = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            in_batch_loss(t, q, p, &corr, None)
        });
        let neg = run(|t| {
            let q = mat(t, 2, 2, &Q2);
            let p = mat(t, 2, 2, &P2);
            let n = mat(t, 2, 2, &nd);
            random_negative_loss(t, q, p, n, &corr, None, false)
        });
        assert_eq!(total, pos + neg);
    }

    #[test]
    fn in_batch_equals_full_softmax_when_batch_is_catalog() {
        let qd = [1.0, 0.0, 0.0, 1.0, -0.6, 0.8];
        let pd = [0.8, 0.6, -1.0, 0.0, 0.0, -1.0];
        let uniform = [1.0 / 3.0; 3];
        let in_batch = run(|t| {
            let q = mat(t, 3, 2, &qd);
            let p = mat(t, 3, 2, &pd);
            let corr = Corrections {
                batch_q: &uniform,
                positive_q: &[],
                negative_q: &[],
                ids: &[1, 2, 3],
            };
            in_batch_loss(t, q, p, &corr, None)
        });
        let full = run(|t| {
            let q = mat(t, 3, 2, &qd);
            let c = mat(t, 3, 2, &pd);
            full_softmax_loss(t, q, c, &[0, 1, 2], None)
        });
        assert!((in_batch - full).abs() < 1e-12);
    }

    #[test]
    fn temperature_clamps_to_upper_bound() {
        let eval = |raw: f64| {
            run(|t| {
                let q = mat(t, 2, 2, &Q2);
                let p = mat(t, 2, 2, &P2);
                let temp = t.leaf(Tensor::scalar(raw));
                let corr = Corrections {
                    batch_q: &[0.3, 0.7],
                    positive_q: &[],
                    negative_q: &[],
                    ids: &[1, 2],
                };
                in_batch_loss(t, q, p, &corr, Some(temp))
            })
        };
        assert_eq!(eval(1000.0), eval(100.0));
        assert_eq!(eval(0.01), eval(1.0));
    }

    #[test]
    fn nonpositive_probability_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = mat(&mut tape, 1, 2, &[1.0, 0.0]);
        let p = mat(&mut tape, 1, 2, &[1.0, 0.0]);
        let corr = Corrections {
            batch_q: &[0.0],
            positive_q: &[],
            negative_q: &[],
            ids: &[1],
        };
        assert!(matches!(
            in_batch_loss(&mut tape, q, p, &corr, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn empty_negative_set_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = mat(&mut tape, 1, 2, &[1.0, 0.0]);
        let p = mat(&mut tape, 1, 2, &[1.0, 0.0]);
        let n = tape.leaf(Tensor::new(vec![0, 2], vec![]).unwrap());
        let corr = Corrections {
            batch_q: &[],
            positive_q: &[0.5],
            negative_q: &[],
            ids: &[1],
        };
        assert!(matches!(
            random_negative_loss(&mut tape, q, p, n, &corr, None, false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn combined_gradients_match_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let params = vec![
            Tensor::new(vec![4, 4], draw(16)).unwrap(),
            Tensor::new(vec![4, 4], draw(16)).unwrap(),
            Tensor::new(vec![4, 4], draw(16)).unwrap(),
            Tensor::scalar(10.0),
        ];
        let err = grad_check(
            &params,
            |tape, vars| {
                let corr = Corrections {
                    batch_q: &[0.1, 0.2, 0.3, 0.4],
                    positive_q: &[0.25, 0.25, 0.25, 0.25],
                    negative_q: &[0.4, 0.3, 0.2, 0.1],
                    ids: &[1, 2, 3, 4],
                };
                combined_loss(tape, vars[0], vars[1], vars[2], &corr, Some(vars[3]), false)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err:e}");
    }
}
