//! Actor-critic networks over a single flat parameter vector.
//!
//! Layout: policy MLP, then the state-independent log-std vector (gaussian
//! heads only), then the value MLP. Each dense layer stores its weight matrix
//! row-major as `input x output` followed by its bias.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Categorical(usize),
    DiagGaussian(usize),
}

impl HeadKind {
    /// Width of the policy network output.
    pub fn output_dim(&self) -> usize {
        match *self {
            HeadKind::Categorical(n) | HeadKind::DiagGaussian(n) => n,
        }
    }

    /// Number of columns used to store one action.
    pub fn action_width(&self) -> usize {
        match *self {
            HeadKind::Categorical(_) => 1,
            HeadKind::DiagGaussian(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    input: usize,
    output: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayout {
    layers: Vec<Dense>,
}

impl MlpLayout {
    fn new(sizes: &[usize], mut offset: usize) -> (Self, usize) {
        let layers = sizes
            .windows(2)
            .map(|io| {
                let d = Dense { input: io[0], output: io[1], w: offset, b: offset + io[0] * io[1] };
                offset = d.b + io[1];
                d
            })
            .collect();
        (Self { layers }, offset)
    }

    pub fn start(&self) -> usize {
        self.layers[0].w
    }

    pub fn end(&self) -> usize {
        let last = self.layers.last().expect("at least one layer");
        last.b + last.output
    }

    /// Activations `[x, h_1, ..., out]`; hidden layers use tanh, the output is linear.
    fn forward(&self, params: &[f64], x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, l) in self.layers.iter().enumerate() {
            let w = ArrayView2::from_shape((l.input, l.output), &params[l.w..l.b]).expect("layout");
            let mut z = acts[i].dot(&w);
            let b = &params[l.b..l.b + l.output];
            for mut row in z.rows_mut() {
                row.iter_mut().zip(b).for_each(|(z, b)| *z += b);
            }
            if i + 1 < self.layers.len() {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    fn backward(&self, params: &[f64], acts: &[Array2<f64>], dout: Array2<f64>, grad: &mut [f64]) {
        let mut d = dout;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dw = acts[i].t().dot(&d);
            for (g, x) in grad[l.w..l.b].iter_mut().zip(dw.iter()) {
                *g += x;
            }
            let db = d.sum_axis(Axis(0));
            for (g, x) in grad[l.b..l.b + l.output].iter_mut().zip(db.iter()) {
                *g += x;
            }
            if i > 0 {
                let w = ArrayView2::from_shape((l.input, l.output), &params[l.w..l.b]).expect("layout");
                let mut prev = d.dot(&w.t());
                prev.zip_mut_with(&acts[i], |g, h| *g *= 1.0 - h * h);
                d = prev;
            }
        }
    }
}

/// Shape of an actor-critic parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    obs_dim: usize,
    hidden: Vec<usize>,
    head: HeadKind,
    policy: MlpLayout,
    log_std: Option<usize>,
    value: MlpLayout,
    len: usize,
}

impl Architecture {
    pub fn new(obs_dim: usize, hidden: &[usize], head: HeadKind) -> Arc<Self> {
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let (policy, mut end) = MlpLayout::new(&sizes(head.output_dim()), 0);
        let log_std = match head {
            HeadKind::DiagGaussian(d) => {
                let off = end;
                end += d;
                Some(off)
            }
            HeadKind::Categorical(_) => None,
        };
        let (value, len) = MlpLayout::new(&sizes(1), end);
        Arc::new(Self { obs_dim, hidden: hidden.to_vec(), head, policy, log_std, value, len })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }
    pub fn head(&self) -> HeadKind {
        self.head
    }
    pub fn num_params(&self) -> usize {
        self.len
    }

    /// Index range of every parameter that shapes the action distribution.
    pub fn policy_range(&self) -> std::ops::Range<usize> {
        0..self.value.start()
    }

    pub fn value_range(&self) -> std::ops::Range<usize> {
        self.value.start()..self.len
    }

    pub fn log_std<'a>(&self, params: &'a [f64]) -> Option<&'a [f64]> {
        self.log_std.map(|o| &params[o..o + self.head.output_dim()])
    }

    /// Orthogonal initialisation: gain sqrt(2) on hidden layers, 0.01 on the
    /// policy output, 1 on the value output; zero biases and log-std.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for (mlp, out_gain) in [(&self.policy, 0.01), (&self.value, 1.0)] {
            let n = mlp.layers.len();
            for (i, l) in mlp.layers.iter().enumerate() {
                let gain = if i + 1 == n { out_gain } else { 2f64.sqrt() };
                let w = orthogonal(rng, l.input, l.output, gain);
                p[l.w..l.b].copy_from_slice(&w);
            }
        }
        p
    }

    fn batch(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if obs.ncols() != self.obs_dim {
            return Err(LabError::ShapeMismatch(format!("observation width {} != {}", obs.ncols(), self.obs_dim)));
        }
        Ok(obs.to_owned())
    }

    pub fn policy_forward(&self, params: &[f64], obs: ArrayView2<f64>) -> Result<PolicyForward> {
        let acts = self.policy.forward(params, self.batch(obs)?);
        if acts.last().expect("output").iter().any(|x| !x.is_finite()) {
            return Err(LabError::NonFiniteOutput);
        }
        let log_std = self.log_std(params).map(<[f64]>::to_vec).unwrap_or_default();
        if log_std.iter().any(|x| !x.is_finite()) {
            return Err(LabError::NonFiniteOutput);
        }
        Ok(PolicyForward { head: self.head, acts, log_std })
    }

    pub fn value_forward(&self, params: &[f64], obs: ArrayView2<f64>) -> Result<ValueForward> {
        let acts = self.value.forward(params, self.batch(obs)?);
        if acts.last().expect("output").iter().any(|x| !x.is_finite()) {
            return Err(LabError::NonFiniteOutput);
        }
        Ok(ValueForward { acts })
    }

    /// Accumulates `sum_i dlogp_i * grad log pi(a_i|s_i) + dent_i * grad H_i` into `grad`.
    pub fn policy_backward(
        &self,
        params: &[f64],
        fwd: &PolicyForward,
        actions: ArrayView2<f64>,
        dlogp: &[f64],
        dent: &[f64],
        grad: &mut [f64],
    ) {
        let out = fwd.output();
        let mut dout = Array2::<f64>::zeros(out.raw_dim());
        match self.head {
            HeadKind::Categorical(n) => {
                for (i, (row, mut drow)) in out.rows().into_iter().zip(dout.rows_mut()).enumerate() {
                    let logp = log_softmax(row.as_slice().expect("contiguous"));
                    let ent: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
                    let a = actions[[i, 0]] as usize;
                    for j in 0..n {
                        let p = logp[j].exp();
                        let onehot = if j == a { 1.0 } else { 0.0 };
                        drow[j] = dlogp[i] * (onehot - p) - dent[i] * p * (logp[j] + ent);
                    }
                }
            }
            HeadKind::DiagGaussian(d) => {
                let off = self.log_std.expect("gaussian has log-std");
                let std: Vec<f64> = fwd.log_std.iter().map(|l| l.exp()).collect();
                for (i, (row, mut drow)) in out.rows().into_iter().zip(dout.rows_mut()).enumerate() {
                    for j in 0..d {
                        let z = (actions[[i, j]] - row[j]) / std[j];
                        drow[j] = dlogp[i] * z / std[j];
                        grad[off + j] += dlogp[i] * (z * z - 1.0) + dent[i];
                    }
                }
            }
        }
        self.policy.backward(params, &fwd.acts, dout, grad);
    }

    /// Accumulates `sum_i dv_i * grad V(s_i)` into `grad`.
    pub fn value_backward(&self, params: &[f64], fwd: &ValueForward, dv: &[f64], grad: &mut [f64]) {
        let dout = Array2::from_shape_vec((dv.len(), 1), dv.to_vec()).expect("column");
        self.value.backward(params, &fwd.acts, dout, grad);
    }

    /// Text serialisation: a header with the layer sizes, then one value per line.
    /// Values are written in shortest round-trip form, so reloading is bit-exact.
    pub fn params_to_text(&self, params: &[f64]) -> String {
        let mut s = String::from("laglab-params 1\n");
        let _ = writeln!(s, "obs_dim {}", self.obs_dim);
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "hidden {}", hidden.join(" "));
        let _ = match self.head {
            HeadKind::Categorical(n) => writeln!(s, "head categorical {n}"),
            HeadKind::DiagGaussian(d) => writeln!(s, "head gaussian {d}"),
        };
        let _ = writeln!(s, "len {}", self.len);
        for p in params {
            let _ = writeln!(s, "{p:?}");
        }
        s
    }

    pub fn params_from_text(text: &str) -> Result<(Arc<Self>, Vec<f64>)> {
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<Vec<String>> {
            let (i, l) = lines.next().ok_or(LabError::Parse { line: 0, msg: "truncated header".into() })?;
            let toks: Vec<String> = l.split_whitespace().map(str::to_string).collect();
            if toks.first().map(String::as_str) != Some(expect) {
                return Err(LabError::Parse { line: i + 1, msg: format!("expected {expect:?}") });
            }
            Ok(toks[1..].to_vec())
        };
        let bad = |msg: &str| LabError::Parse { line: 0, msg: msg.to_string() };
        let int = |t: &str| t.parse::<usize>().map_err(|_| bad("bad integer"));
        if next("laglab-params")? != ["1"] {
            return Err(bad("unsupported version"));
        }
        let obs_dim = int(&next("obs_dim")?.join(""))?;
        let hidden = next("hidden")?.iter().map(|t| int(t)).collect::<Result<Vec<_>>>()?;
        let head_toks = next("head")?;
        let head = match (head_toks.first().map(String::as_str), head_toks.get(1)) {
            (Some("categorical"), Some(n)) => HeadKind::Categorical(int(n)?),
            (Some("gaussian"), Some(d)) => HeadKind::DiagGaussian(int(d)?),
            _ => return Err(bad("bad head")),
        };
        let len = int(&next("len")?.join(""))?;
        let arch = Self::new(obs_dim, &hidden, head);
        if arch.len != len {
            return Err(bad("length does not match architecture"));
        }
        let params = lines
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| LabError::Parse { line: i + 1, msg: "bad value".into() }))
            .collect::<Result<Vec<_>>>()?;
        if params.len() != len {
            return Err(bad("wrong number of values"));
        }
        Ok((arch, params))
    }
}

/// Cached policy forward pass over a batch.
#[derive(Debug, Clone)]
pub struct PolicyForward {
    head: HeadKind,
    acts: Vec<Array2<f64>>,
    log_std: Vec<f64>,
}

impl PolicyForward {
    /// Logits (categorical) or means (gaussian), one row per state.
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("output layer")
    }

    pub fn len(&self) -> usize {
        self.output().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn logprobs(&self, actions: ArrayView2<f64>) -> Vec<f64> {
        let out = self.output();
        out.rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(row, act)| match self.head {
                HeadKind::Categorical(_) => log_softmax(row.as_slice().expect("contiguous"))[act[0] as usize],
                HeadKind::DiagGaussian(_) => gaussian_logprob(row.as_slice().expect("contiguous"), &self.log_std, act.as_slice().expect("contiguous")),
            })
            .collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        match self.head {
            HeadKind::Categorical(_) => self
                .output()
                .rows()
                .into_iter()
                .map(|row| {
                    let lp = log_softmax(row.as_slice().expect("contiguous"));
                    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
                })
                .collect(),
            HeadKind::DiagGaussian(_) => {
                let h: f64 = self.log_std.iter().map(|l| l + 0.5 * (1.0 + LN_2PI)).sum();
                vec![h; self.len()]
            }
        }
    }

    /// Action probabilities for row `i` of a categorical head.
    pub fn probs(&self, i: usize) -> Vec<f64> {
        let row = self.output().row(i);
        log_softmax(row.as_slice().expect("contiguous")).iter().map(|l| l.exp()).collect()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }
}

#[derive(Debug, Clone)]
pub struct ValueForward {
    acts: Vec<Array2<f64>>,
}

impl ValueForward {
    pub fn values(&self) -> Vec<f64> {
        self.acts.last().expect("output").column(0).to_vec()
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub fn gaussian_logprob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(big, small, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            // Row-major rows x cols; q is big x small with orthonormal columns.
            let (bi, sj) = if rows >= cols { (i, j) } else { (j, i) };
            let sign = if r[(sj, sj)] < 0.0 { -1.0 } else { 1.0 };
            out[i * cols + j] = gain * sign * q[(bi, sj)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn layout_is_contiguous() {
        let arch = Architecture::new(3, &[4, 5], HeadKind::DiagGaussian(2));
        let policy = 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2;
        let value = 3 * 4 + 4 + 4 * 5 + 5 + 5 + 1;
        assert_eq!(arch.num_params(), policy + 2 + value);
        assert_eq!(arch.policy_range(), 0..policy + 2);
    }

    #[test]
    fn orthogonal_columns() {
        let mut r = rng::stream(0, 0);
        let w = orthogonal(&mut r, 6, 3, 1.0);
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..6).map(|i| w[i * 3 + a] * w[i * 3 + b]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_value_is_dot_product() {
        let arch = Architecture::new(2, &[], HeadKind::Categorical(2));
        let mut p = vec![0.0; arch.num_params()];
        let v0 = arch.value_range().start;
        p[v0..v0 + 3].copy_from_slice(&[0.5, -2.0, 0.25]);
        let fwd = arch.value_forward(&p, array![[1.0, 3.0], [0.0, 0.0]].view()).unwrap();
        assert_eq!(fwd.values(), vec![0.5 - 6.0 + 0.25, 0.25]);
    }

    #[test]
    fn params_text_roundtrip_is_exact() {
        let arch = Architecture::new(3, &[8, 8], HeadKind::DiagGaussian(2));
        let p = arch.init_params(&mut rng::stream(1, 0));
        let (back_arch, back) = Architecture::params_from_text(&arch.params_to_text(&p)).unwrap();
        assert_eq!(*back_arch, *arch);
        assert_eq!(back, p);
        assert!(Architecture::params_from_text("laglab-params 2\n").is_err());
    }
}
