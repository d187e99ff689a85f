use rand::Rng;

use super::PipelineError;
use crate::gates::Selection;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Keeps positions `k-1, 2k-1, ...`. An utterance shorter than `k` keeps
/// its last position.
pub fn fixed_rate_select(states: &Tensor, k: usize) -> Result<Selection, PipelineError> {
    let kept = fixed_rate_indices(states.rows(), k)?;
    Ok(Selection {
        features: states.select_rows(&kept),
        kept,
    })
}

pub(crate) fn fixed_rate_indices(n: usize, k: usize) -> Result<Vec<usize>, PipelineError> {
    if k == 0 {
        return Err(PipelineError::InvalidConfig("fixed-rate k must be at least 1".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let kept: Vec<usize> = (1..=n / k).map(|j| j * k - 1).collect();
    Ok(if kept.is_empty() { vec![n - 1] } else { kept })
}

/// Geometry of the strided depthwise-separable convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CnnShape {
    pub kernel: usize,
    pub stride: usize,
    /// Zero frames added on each side.
    pub padding: usize,
}

impl Default for CnnShape {
    fn default() -> Self {
        Self {
            kernel: 5,
            stride: 6,
            padding: 2,
        }
    }
}

/// Parameter names under `scope`: depthwise taps, pointwise projection, bias.
pub(crate) const CNN_DEPTHWISE: &str = "dw";
pub(crate) const CNN_POINTWISE: &str = "pw";
pub(crate) const CNN_BIAS: &str = "b";

impl CnnShape {
    pub fn param_shapes(&self, d_in: usize, d_out: usize) -> [(&'static str, Vec<usize>); 3] {
        [
            (CNN_DEPTHWISE, vec![self.kernel, d_in]),
            (CNN_POINTWISE, vec![d_in, d_out]),
            (CNN_BIAS, vec![d_out]),
        ]
    }

    /// Uniform taps with fan-in `kernel`, Xavier-uniform projection, zero bias.
    pub fn init_params<R: Rng + ?Sized>(&self, d_in: usize, d_out: usize, scope: &str, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let uniform = |rng: &mut R, n: usize, a: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-a..a)).collect() };
        let a = (3.0 / self.kernel as f64).sqrt();
        let dw = Tensor::new(vec![self.kernel, d_in], uniform(rng, self.kernel * d_in, a)).expect("shape");
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let pw = Tensor::new(vec![d_in, d_out], uniform(rng, d_in * d_out, a)).expect("shape");
        p.insert(format!("{scope}{CNN_DEPTHWISE}"), dw);
        p.insert(format!("{scope}{CNN_POINTWISE}"), pw);
        p.insert(format!("{scope}{CNN_BIAS}"), Tensor::zeros(&[d_out]));
        p
    }
}

/// `floor((n + 2p - kernel) / stride) + 1`, or 0 when the padded input is
/// shorter than one kernel.
pub fn cnn_output_len(n: usize, shape: CnnShape) -> usize {
    let padded = n + 2 * shape.padding;
    if n == 0 || padded < shape.kernel {
        0
    } else {
        (padded - shape.kernel) / shape.stride + 1
    }
}

/// Depthwise temporal convolution followed by a pointwise projection.
/// Parameters are read from `scope` + `dw`, `pw` and, when present, `b`.
pub fn cnn_select(
    g: &mut Graph,
    params: &ParamStore,
    scope: &str,
    states: Var,
    shape: CnnShape,
) -> Result<Var, PipelineError> {
    let (n, d) = (g.value(states).rows(), g.value(states).cols());
    let m = cnn_output_len(n, shape);
    if m == 0 {
        return Err(PipelineError::InvalidConfig(format!(
            "{n} frames are shorter than the {}-frame kernel",
            shape.kernel
        )));
    }
    let dw = g.param(params, &format!("{scope}{CNN_DEPTHWISE}"))?;
    let pw = g.param(params, &format!("{scope}{CNN_POINTWISE}"))?;
    let padded = if shape.padding > 0 {
        let z = g.constant(Tensor::zeros(&[shape.padding, d]));
        g.concat(&[z, states, z], 0)?
    } else {
        states
    };
    let mut acc: Option<Var> = None;
    for j in 0..shape.kernel {
        let rows = g.gather_rows(padded, (0..m).map(|o| o * shape.stride + j).collect())?;
        let tap = g.slice(dw, 0, j, 1)?;
        let term = g.mul(rows, tap)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let out = g.matmul(acc.expect("kernel >= 1"), pw)?;
    let bias_name = format!("{scope}{CNN_BIAS}");
    if params.contains(&bias_name) {
        let b = g.param(params, &bias_name)?;
        return Ok(g.add(out, b)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_rate_indices_follow_the_stride() {
        assert_eq!(fixed_rate_indices(12, 6).unwrap(), vec![5, 11]);
        assert_eq!(fixed_rate_indices(13, 6).unwrap(), vec![5, 11]);
        assert_eq!(fixed_rate_indices(5, 6).unwrap(), vec![4]);
        assert_eq!(fixed_rate_indices(4, 1).unwrap(), vec![0, 1, 2, 3]);
        assert!(fixed_rate_indices(4, 0).is_err());
    }

    #[test]
    fn cnn_lengths() {
        let s = CnnShape::default();
        for n in 1..40 {
            assert_eq!(cnn_output_len(n, s), n.div_ceil(6), "n = {n}");
        }
        assert_eq!(cnn_output_len(0, s), 0);
    }
}
