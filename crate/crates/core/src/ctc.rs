//! Connectionist temporal classification: alignment-marginalised negative
//! log-likelihood and greedy decoding.

use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target unalignable: {frames} frames but at least {required} needed")]
    TargetUnalignable { frames: usize, required: usize },
    #[error("blank id {0} appears in the target")]
    BlankInTarget(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Loss value and its gradient with respect to the frame log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub nll: f64,
    pub grad: Tensor,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames able to emit `targets`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `targets` given `log_probs` (`T x classes`).
pub fn ctc_loss(log_probs: &Tensor, targets: &[usize], blank: usize) -> Result<CtcOutput, CtcError> {
    let frames = log_probs.rows();
    let classes = log_probs.cols();
    if blank >= classes {
        return Err(CtcError::LabelOutOfRange { label: blank, classes });
    }
    for &y in targets {
        if y == blank {
            return Err(CtcError::BlankInTarget(y));
        }
        if y >= classes {
            return Err(CtcError::LabelOutOfRange { label: y, classes });
        }
    }
    let required = min_frames(targets);
    if log_probs.rank() != 2 || frames < required.max(1) {
        return Err(CtcError::TargetUnalignable { frames, required });
    }

    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &y in targets {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.get(t, ext[s]);
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Err(CtcError::TargetUnalignable { frames, required });
    }

    // beta includes the emission at frame t, mirroring alpha.
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occupancy = (a + b - lp(t, s) - log_p).exp();
            grad[t * classes + ext[s]] -= occupancy;
        }
    }
    Ok(CtcOutput {
        nll: -log_p,
        grad: Tensor::new(log_probs.shape().to_vec(), grad)?,
    })
}

/// Records the CTC loss of `log_probs` on the graph.
pub fn ctc_loss_var(g: &mut Graph, log_probs: Var, targets: &[usize], blank: usize) -> Result<Var, CtcError> {
    let out = ctc_loss(g.value(log_probs), targets, blank)?;
    Ok(g.scalar_fn(log_probs, out.nll, out.grad)?)
}

/// Frame-wise argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            )
            .0;
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
