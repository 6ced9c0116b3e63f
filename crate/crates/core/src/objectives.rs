//! Detection BCE, sampled listwise retrieval loss, InfoNCE, and their weighted sum.

use crate::error::{Error, Result};
use crate::numeric::{log_softmax, softmax, Tape, Tensor, Var};
use crate::scalar::{dot, Scalar};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.2, beta: 0.04, tau: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0 && self.beta >= 0.0 && self.tau > 0.0;
        let finite = self.lambda.is_finite() && self.beta.is_finite() && self.tau.is_finite();
        if ok && finite {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Candidate tools for one query: every golden tool plus sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSlate {
    pub query_id: String,
    pub tools: Vec<String>,
    pub golden: Vec<bool>,
}

impl CandidateSlate {
    pub fn new(query_id: impl Into<String>, tools: Vec<String>, golden: Vec<bool>) -> Result<Self> {
        let query_id = query_id.into();
        if tools.len() != golden.len() {
            return Err(Error::DimMismatch { expected: tools.len(), got: golden.len() });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tools.iter().find(|t| !seen.insert(*t)) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        let n_gold = golden.iter().filter(|&&g| g).count();
        if n_gold == 0 || n_gold == tools.len() {
            return Err(Error::SlateTooSmall { m: tools.len(), golden: n_gold });
        }
        Ok(Self { query_id, tools, golden })
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn num_golden(&self) -> usize {
        self.golden.iter().filter(|&&g| g).count()
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_FLOOR);
    p.max(lo).min(T::one() - lo)
}

/// Binary cross-entropy for one prediction.
pub fn bce<T: Scalar>(y_hat: T, y: bool) -> T {
    let p = clamp_prob(y_hat);
    if y {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Mean BCE over a batch.
pub fn detection_loss<T: Scalar>(y_hat: &[T], y: &[bool]) -> Result<T> {
    if y_hat.len() != y.len() {
        return Err(Error::DimMismatch { expected: y.len(), got: y_hat.len() });
    }
    if y.is_empty() {
        return Ok(T::zero());
    }
    let total: T = y_hat.iter().zip(y).map(|(&p, &l)| bce(p, l)).sum();
    Ok(total / T::of(y.len() as f64))
}

/// Uniform mass over the golden entries of the slate.
pub fn ideal_distribution<T: Scalar>(slate: &CandidateSlate) -> Vec<T> {
    let share = T::one() / T::of(slate.num_golden() as f64);
    slate.golden.iter().map(|&g| if g { share } else { T::zero() }).collect()
}

/// Listwise cross-entropy with complement term between `softmax(scores)` and
/// the ideal distribution.
pub fn listwise_loss<T: Scalar>(scores: &[T], slate: &CandidateSlate) -> Result<T> {
    if scores.len() != slate.len() {
        return Err(Error::DimMismatch { expected: slate.len(), got: scores.len() });
    }
    let p = ideal_distribution::<T>(slate);
    let p_hat = softmax(scores);
    Ok(-p
        .iter()
        .zip(&p_hat)
        .map(|(&pi, &qi)| {
            let q = clamp_prob(qi);
            pi * q.ln() + (T::one() - pi) * (T::one() - q).ln()
        })
        .sum::<T>())
}

fn info_nce<T: Scalar>(anchor: &Tensor<T>, positive: &Tensor<T>, tau: T) -> T {
    let b = anchor.rows();
    (0..b)
        .map(|i| {
            let logits: Vec<T> = (0..b).map(|j| dot(anchor.row(i), positive.row(j)) / tau).collect();
            -log_softmax(&logits)[i]
        })
        .sum()
}

/// Symmetric-pair InfoNCE over in-batch negatives: a query term between the
/// query-scene and query-tool views of each query, plus the same for each
/// query's scene, divided by the batch size.
pub fn contrastive_loss<T: Scalar>(
    query_qs: &Tensor<T>,
    query_qt: &Tensor<T>,
    scene_qs: &Tensor<T>,
    scene_qt: &Tensor<T>,
    tau: T,
) -> Result<T> {
    let b = query_qs.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    for t in [query_qt, scene_qs, scene_qt] {
        if t.shape() != query_qs.shape() {
            return Err(Error::Shape(format!("contrastive inputs {:?} vs {:?}", query_qs.shape(), t.shape())));
        }
    }
    let total = info_nce(query_qs, query_qt, tau) + info_nce(scene_qs, scene_qt, tau);
    Ok(total / T::of(b as f64))
}

pub fn total_loss<T: Scalar>(ret: T, det: T, con: T, w: &LossWeights) -> T {
    ret + T::of(w.lambda) * det + T::of(w.beta) * con
}

/// Mean BCE on logits `z: B x 1`. Computed as softplus of the signed logit.
pub fn detection_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[bool]) -> Var {
    let signs = labels.iter().map(|&y| if y { -T::one() } else { T::one() }).collect();
    let s = tape.mul_const(logits, signs);
    let l = tape.softplus(s);
    let l = tape.sum(l);
    tape.scale(l, T::one() / T::of(labels.len().max(1) as f64))
}

/// Mean listwise loss over slate scores `B x M` given the ideal distributions.
pub fn listwise_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, scores: Var, ideal: &Tensor<T>) -> Var {
    let lo = T::of(PROB_FLOOR);
    let hi = T::one() - lo;
    let rows = ideal.rows();
    let p_hat = tape.softmax_rows(scores);
    let log_p = tape.clamp_ln(p_hat, lo, hi);
    let comp = tape.affine(p_hat, -T::one(), T::one());
    // ln(1 - q) with q clamped into [lo, hi] means 1 - q lies in [lo, hi] too.
    let log_comp = tape.clamp_ln(comp, lo, hi);
    let a = tape.mul_const(log_p, ideal.data().to_vec());
    let b = tape.mul_const(log_comp, ideal.data().iter().map(|&p| T::one() - p).collect());
    let l = tape.add(a, b);
    let l = tape.sum(l);
    tape.scale(l, -T::one() / T::of(rows as f64))
}

fn info_nce_on_tape<T: Scalar>(tape: &mut Tape<T>, anchor: Var, positive: Var, tau: T) -> Var {
    let b = tape.value(anchor).rows();
    let sim = tape.matmul_t(anchor, positive);
    let sim = tape.scale(sim, T::one() / tau);
    let ls = tape.log_softmax_rows(sim);
    let diag = Tensor::<T>::identity(b).into_data();
    let d = tape.mul_const(ls, diag);
    tape.sum(d)
}

pub fn contrastive_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    query_qs: Var,
    query_qt: Var,
    scene_qs: Var,
    scene_qt: Var,
    tau: T,
) -> Result<Var> {
    let b = tape.value(query_qs).rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let q = info_nce_on_tape(tape, query_qs, query_qt, tau);
    let s = info_nce_on_tape(tape, scene_qs, scene_qt, tau);
    let l = tape.add(q, s);
    Ok(tape.scale(l, -T::one() / T::of(b as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn slate(golden: &[bool]) -> CandidateSlate {
        let tools = (0..golden.len()).map(|i| format!("t{i}")).collect();
        CandidateSlate::new("q", tools, golden.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((detection_loss(&[0.5f64], &[true]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(bce(1.0f64, true) < 1e-11);
        for p in [0.1f64, 0.3, 0.77] {
            assert!((bce(p, true) - bce(1.0 - p, false)).abs() < 1e-12);
        }
        assert!(bce(0.0f64, true).is_finite());
    }

    #[test]
    fn ideal_examples() {
        let p: Vec<f64> = ideal_distribution(&slate(&[true, true, false, false]));
        assert_eq!(p, vec![0.5, 0.5, 0.0, 0.0]);
        let p: Vec<f64> = ideal_distribution(&slate(&[false, true, false]));
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn slate_validation() {
        let t = |n: usize| (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>();
        assert!(CandidateSlate::new("q", t(2), vec![true, true]).is_err());
        assert!(CandidateSlate::new("q", t(2), vec![false, false]).is_err());
        assert!(CandidateSlate::new("q", vec!["a".into(), "a".into()], vec![true, false]).is_err());
    }

    #[test]
    fn listwise_uniform_case() {
        let l = listwise_loss(&[0.3f64; 4], &slate(&[true, false, false, false])).unwrap();
        let expect = -(0.25f64.ln() + 3.0 * 0.75f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 2.2493).abs() < 1e-4);
        let sharp = listwise_loss(&[40.0f64, -40.0, -40.0, -40.0], &slate(&[true, false, false, false])).unwrap();
        assert!(sharp < 1e-10);
    }

    #[test]
    fn listwise_shift_invariant() {
        let s = slate(&[false, true, true, false, false]);
        let x = [0.2f64, -1.0, 0.7, 2.0, 0.1];
        let y: Vec<f64> = x.iter().map(|v| v + 13.0).collect();
        assert!((listwise_loss(&x, &s).unwrap() - listwise_loss(&y, &s).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_examples() {
        let tau = 0.1f64;
        let e = Tensor::identity(2);
        let l = contrastive_loss(&e, &e, &e, &e, tau).unwrap();
        let pair = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 1.0)).ln();
        // two pairs per term, two terms, divided by |B| = 2
        assert!((l - 2.0 * pair).abs() < 1e-12);

        let same = Tensor::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        let l = contrastive_loss(&same, &same, &same, &same, tau).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-9);

        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(contrastive_loss(&one, &one, &one, &one, tau), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn contrastive_decreases_with_positive_similarity() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let weak = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 1.0]]).unwrap();
        let strong = Tensor::from_rows(&[vec![0.9, 0.0], vec![0.0, 1.0]]).unwrap();
        let lw = contrastive_loss(&a, &weak, &a, &a, 0.5f64).unwrap();
        let ls = contrastive_loss(&a, &strong, &a, &a, 0.5f64).unwrap();
        assert!(ls < lw);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights { lambda: 0.2, beta: 0.04, tau: 0.1 };
        assert!((total_loss(1.0f64, 2.0, 3.0, &w) - 1.52).abs() < 1e-12);
        let z = LossWeights { lambda: 0.0, beta: 0.0, tau: 0.1 };
        assert_eq!(total_loss(1.25f64, 9.0, 9.0, &z), 1.25);
        assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn tape_losses_match_scalar_versions() {
        let s1 = slate(&[true, false, false, true]);
        let s2 = slate(&[false, false, true, false]);
        let scores: Tensor<f64> = Tensor::from_rows(&[vec![0.1, 0.5, -0.3, 2.0], vec![1.0, -1.0, 0.25, 0.0]]).unwrap();
        let ideal = Tensor::from_rows(&[ideal_distribution(&s1), ideal_distribution(&s2)]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(scores.clone());
        let l = listwise_loss_on_tape(&mut tape, v, &ideal);
        let expect = (listwise_loss(scores.row(0), &s1).unwrap() + listwise_loss(scores.row(1), &s2).unwrap()) / 2.0;
        assert!((tape.scalar(l) - expect).abs() < 1e-12);

        let z = tape.constant(Tensor::from_rows(&[vec![0.3], vec![-1.2], vec![2.5]]).unwrap());
        let d = detection_loss_on_tape(&mut tape, z, &[true, false, false]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = detection_loss(&[sig(0.3), sig(-1.2), sig(2.5)], &[true, false, false]).unwrap();
        assert!((tape.scalar(d) - expect).abs() < 1e-12);

        let a = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.9], vec![-0.5, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.2, 0.2], vec![-0.7, 0.3], vec![0.6, 0.1]]).unwrap();
        let vs: Vec<Var> = [&a, &b, &b, &a].iter().map(|t| tape.constant((*t).clone())).collect();
        let c = contrastive_loss_on_tape(&mut tape, vs[0], vs[1], vs[2], vs[3], 0.2).unwrap();
        let expect = contrastive_loss(&a, &b, &b, &a, 0.2).unwrap();
        assert!((tape.scalar(c) - expect).abs() < 1e-12);
    }

    #[test]
    fn listwise_and_contrastive_gradients() {
        let ideal = Tensor::from_rows(&[vec![0.5, 0.0, 0.5, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let scores = Tensor::from_rows(&[vec![0.1, 0.5, -0.3, 0.8], vec![1.0, -1.0, 0.25, 0.0]]).unwrap();
        let err = grad_check(
            |p| {
                let mut tape = Tape::new();
                let v = tape.param(&p[0]);
                let l = listwise_loss_on_tape(&mut tape, v, &ideal);
                let g = tape.backward(l);
                Ok((tape.scalar(l), vec![g.get(v).unwrap().to_vec()]))
            },
            &[scores],
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let reps: Vec<Tensor<f64>> = (0..4)
            .map(|k| Tensor::matrix(3, 2, (0..6).map(|i| ((k * 6 + i) as f64 * 0.7).sin()).collect()).unwrap())
            .collect();
        let err = grad_check(
            |p| {
                let mut tape = Tape::new();
                let v: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
                let l = contrastive_loss_on_tape(&mut tape, v[0], v[1], v[2], v[3], 0.5)?;
                let g = tape.backward(l);
                Ok((tape.scalar(l), v.iter().map(|&x| g.get(x).unwrap().to_vec()).collect()))
            },
            &reps,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
