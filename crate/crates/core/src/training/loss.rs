//! InfoNCE-family losses over cosine similarity, with analytic gradients
//! with respect to the raw (unnormalized) input embeddings.
//!
//! All losses take raw vectors: cosine normalizes internally, so each loss
//! is invariant to positive rescaling of any input.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::scalar::Scalar;

/// Loss value plus gradients aligned with the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<F> {
    pub value: F,
    pub anchors: Vec<Vec<F>>,
    pub positives: Vec<Vec<F>>,
    /// One entry per anchor; `None` where the anchor had no negative.
    pub negatives: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> LossGrad<F> {
    fn zeros(n: usize, dim: usize) -> Self {
        LossGrad {
            value: F::zero(),
            anchors: vec![vec![F::zero(); dim]; n],
            positives: vec![vec![F::zero(); dim]; n],
            negatives: vec![None; n],
        }
    }

    fn add_assign(&mut self, other: &LossGrad<F>) {
        self.value += other.value;
        add_rows(&mut self.anchors, &other.anchors);
        add_rows(&mut self.positives, &other.positives);
        for (mine, theirs) in self.negatives.iter_mut().zip(&other.negatives) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, &b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

fn add_rows<F: Scalar>(acc: &mut [Vec<F>], other: &[Vec<F>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
    }
}

/// Unit vector and original norm of each row.
struct Unit<F> {
    dir: Vec<F>,
    norm: F,
}

fn units<F: Scalar>(rows: &[Vec<F>]) -> Result<Vec<Unit<F>>> {
    rows.iter()
        .map(|r| {
            let n = norm(r);
            if !(n > F::zero()) || !n.is_finite() {
                return Err(Error::ZeroVector);
            }
            Ok(Unit {
                dir: r.iter().map(|&x| x / n).collect(),
                norm: n,
            })
        })
        .collect()
}

/// Pulls a gradient with respect to a unit vector back to the raw vector:
/// `(g − (g·u)u) / ‖x‖`.
fn through_normalization<F: Scalar>(g: &[F], u: &Unit<F>) -> Vec<F> {
    let gu = dot(g, &u.dir);
    g.iter()
        .zip(&u.dir)
        .map(|(&gi, &ui)| (gi - gu * ui) / u.norm)
        .collect()
}

fn check_batch<F>(a: &[Vec<F>], b: &[Vec<F>], min: usize) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::DegenerateBatch(format!(
            "{} anchors but {} positives",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min {
        return Err(Error::DegenerateBatch(format!(
            "batch of {} (need at least {min})",
            a.len()
        )));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch(bad.len(), dim));
    }
    Ok(a.len())
}

fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

/// `−(1/N) Σ_i log softmax_j(ψ(a_i, c_j)/τ)[i]`: each anchor against every
/// candidate in the batch, its own candidate being the target.
fn in_batch_softmax<F: Scalar>(
    anchors: &[Vec<F>],
    candidates: &[Vec<F>],
    tau: F,
) -> Result<LossGrad<F>> {
    let n = check_batch(anchors, candidates, 2)?;
    check_tau(tau)?;
    let dim = anchors[0].len();
    let ua = units(anchors)?;
    let uc = units(candidates)?;
    let inv_n = F::one() / F::of_usize(n);

    let mut grad_ua = vec![vec![F::zero(); dim]; n];
    let mut grad_uc = vec![vec![F::zero(); dim]; n];
    let mut total = F::zero();
    for i in 0..n {
        let logits: Vec<F> = uc.iter().map(|c| dot(&ua[i].dir, &c.dir) / tau).collect();
        let lse = log_sum_exp(&logits);
        total += lse - logits[i];
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            let coeff = (p - if i == j { F::one() } else { F::zero() }) * inv_n / tau;
            for d in 0..dim {
                grad_ua[i][d] += coeff * uc[j].dir[d];
                grad_uc[j][d] += coeff * ua[i].dir[d];
            }
        }
    }
    let mut out = LossGrad::zeros(n, dim);
    out.value = total * inv_n;
    for i in 0..n {
        out.anchors[i] = through_normalization(&grad_ua[i], &ua[i]);
        out.positives[i] = through_normalization(&grad_uc[i], &uc[i]);
    }
    Ok(out)
}

fn check_tau<F: Scalar>(tau: F) -> Result<()> {
    if tau > F::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Q/A-level InfoNCE. Each anchor's denominator runs over every positive
/// embedding in the batch, its own included.
pub fn local_infonce<F: Scalar>(
    anchors: &[Vec<F>],
    positives: &[Vec<F>],
    tau: F,
) -> Result<LossGrad<F>> {
    in_batch_softmax(anchors, positives, tau)
}

/// Trial-level in-batch term: anchors against all positives in the batch.
pub fn in_batch_loss<F: Scalar>(
    anchors: &[Vec<F>],
    positives: &[Vec<F>],
    tau: F,
) -> Result<LossGrad<F>> {
    in_batch_softmax(anchors, positives, tau)
}

/// Paired term: each anchor against its positive and its own hard negative.
/// Anchors without a negative are left out, and `N` counts the rest.
pub fn paired_loss<F: Scalar>(
    anchors: &[Vec<F>],
    positives: &[Vec<F>],
    negatives: &[Option<Vec<F>>],
    tau: F,
) -> Result<LossGrad<F>> {
    check_batch(anchors, positives, 1)?;
    check_tau(tau)?;
    if negatives.len() != anchors.len() {
        return Err(Error::DegenerateBatch(format!(
            "{} anchors but {} negative slots",
            anchors.len(),
            negatives.len()
        )));
    }
    let dim = anchors[0].len();
    let included: Vec<usize> = (0..anchors.len())
        .filter(|&i| negatives[i].is_some())
        .collect();
    if included.is_empty() {
        return Err(Error::DegenerateBatch(
            "no anchor has a hard negative".into(),
        ));
    }
    let inv_n = F::one() / F::of_usize(included.len());
    let mut out = LossGrad::zeros(anchors.len(), dim);
    let mut total = F::zero();
    for &i in &included {
        let neg = negatives[i].as_ref().expect("filtered");
        if neg.len() != dim {
            return Err(Error::DimensionMismatch(neg.len(), dim));
        }
        let [ua, up, un] = [&anchors[i], &positives[i], neg]
            .map(|r| units(std::slice::from_ref(r)).map(|mut v| v.pop().expect("one row")));
        let (ua, up, un) = (ua?, up?, un?);
        let sp = dot(&ua.dir, &up.dir) / tau;
        let sn = dot(&ua.dir, &un.dir) / tau;
        let lse = log_sum_exp(&[sp, sn]);
        total += lse - sp;
        // d/dsp = p_pos − 1 = −p_neg ; d/dsn = p_neg
        let p_neg = (sn - lse).exp();
        let cp = -p_neg * inv_n / tau;
        let cn = p_neg * inv_n / tau;
        let ga: Vec<F> = (0..dim).map(|d| cp * up.dir[d] + cn * un.dir[d]).collect();
        let gp: Vec<F> = ua.dir.iter().map(|&x| cp * x).collect();
        let gn: Vec<F> = ua.dir.iter().map(|&x| cn * x).collect();
        out.anchors[i] = through_normalization(&ga, &ua);
        out.positives[i] = through_normalization(&gp, &up);
        out.negatives[i] = Some(through_normalization(&gn, &un));
    }
    out.value = total * inv_n;
    Ok(out)
}

/// Trial-level objective: paired term plus in-batch term. With no hard
/// negatives in the batch the paired term is dropped.
pub fn global_loss<F: Scalar>(
    anchors: &[Vec<F>],
    positives: &[Vec<F>],
    negatives: &[Option<Vec<F>>],
    tau: F,
) -> Result<LossGrad<F>> {
    let mut total = in_batch_loss(anchors, positives, tau)?;
    match paired_loss(anchors, positives, negatives, tau) {
        Ok(paired) => total.add_assign(&paired),
        Err(Error::DegenerateBatch(msg)) if negatives.iter().all(Option::is_none) => {
            log::debug!("paired term skipped: {msg}");
        }
        Err(e) => return Err(e),
    }
    Ok(total)
}
