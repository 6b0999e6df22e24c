//! Multi-scale attention fusion of the per-scale memory read-outs.
//!
//! Each scale's read-out is linearly projected to the decoder's latent
//! dimension. A small gate network, shared across scales, scores every
//! projected latent; a softmax over the scores gives the scale attention and
//! the fused latent is the attention-weighted blend of the projections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Param};

#[derive(Debug, Clone)]
pub struct Fuser {
    /// `P_i`, shape `D × D_i`.
    pub proj: Vec<Param>,
    /// Gate hidden layer, `hidden × D`.
    pub gate_w1: Param,
    pub gate_b1: Param,
    /// Gate output row, `1 × hidden`.
    pub gate_w2: Param,
    pub gate_b2: Param,
    in_dims: Vec<usize>,
    out_dim: usize,
    hidden: usize,
}

/// Result of one fusion with the intermediates needed for backward.
#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub fused: Vec<f64>,
    /// Softmax weights over scales.
    pub attention: Vec<f64>,
    pub scores: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    projected: Vec<Vec<f64>>,
    hidden_pre: Vec<Vec<f64>>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            m[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

impl Fuser {
    pub fn new<R: Rng>(in_dims: &[usize], out_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let proj = in_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Param::fan_in_uniform(format!("fuser.proj.{i}"), &[out_dim, d], d, rng))
            .collect();
        Fuser {
            proj,
            gate_w1: Param::fan_in_uniform("fuser.gate.w1", &[hidden, out_dim], out_dim, rng),
            gate_b1: Param::zeros("fuser.gate.b1", &[hidden]),
            gate_w2: Param::fan_in_uniform("fuser.gate.w2", &[1, hidden], hidden, rng),
            gate_b2: Param::zeros("fuser.gate.b2", &[1]),
            in_dims: in_dims.to_vec(),
            out_dim,
            hidden,
        }
    }

    /// Rebuilds a fuser from named arrays (checkpoint load).
    pub fn from_params(
        proj: Vec<Param>,
        w1: Param,
        b1: Param,
        w2: Param,
        b2: Param,
    ) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("fuser: {m}"));
        if proj.is_empty() || w1.shape.len() != 2 {
            return Err(bad("missing projections or gate"));
        }
        let out_dim = w1.shape[1];
        let hidden = w1.shape[0];
        let mut in_dims = Vec::with_capacity(proj.len());
        for p in &proj {
            if p.shape.len() != 2 || p.shape[0] != out_dim {
                return Err(bad("projection shape does not match the gate"));
            }
            in_dims.push(p.shape[1]);
        }
        if b1.len() != hidden || w2.len() != hidden || b2.len() != 1 {
            return Err(bad("gate shapes are inconsistent"));
        }
        Ok(Fuser {
            proj,
            gate_w1: w1,
            gate_b1: b1,
            gate_w2: w2,
            gate_b2: b2,
            in_dims,
            out_dim,
            hidden,
        })
    }

    pub fn scales(&self) -> usize {
        self.proj.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Gate score of one projected latent: `w2 · lrelu(W1 z + b1) + b2`.
    fn score(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let mut pre = matvec(&self.gate_w1.value, self.hidden, self.out_dim, z);
        pre.iter_mut()
            .zip(&self.gate_b1.value)
            .for_each(|(p, b)| *p += b);
        let mut act = pre.clone();
        nn::leaky_relu(&mut act);
        let s = act
            .iter()
            .zip(&self.gate_w2.value)
            .map(|(a, w)| a * w)
            .sum::<f64>()
            + self.gate_b2.value[0];
        (s, pre)
    }

    pub fn fuse(&self, f_hats: &[Vec<f64>]) -> Result<FuseOutput> {
        if f_hats.len() != self.scales() {
            return Err(Error::input(format!(
                "fuser configured for {} scales, got {}",
                self.scales(),
                f_hats.len()
            )));
        }
        for (i, (f, &d)) in f_hats.iter().zip(&self.in_dims).enumerate() {
            if f.len() != d {
                return Err(Error::input(format!(
                    "scale {i} latent has length {}, expected {d}",
                    f.len()
                )));
            }
        }
        let projected: Vec<Vec<f64>> = f_hats
            .iter()
            .zip(&self.proj)
            .zip(&self.in_dims)
            .map(|((f, p), &d)| matvec(&p.value, self.out_dim, d, f))
            .collect();
        let (scores, hidden_pre): (Vec<f64>, Vec<Vec<f64>>) =
            projected.iter().map(|z| self.score(z)).unzip();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let attention: Vec<f64> = e.iter().map(|v| v / total).collect();
        let mut fused = vec![0.0; self.out_dim];
        for (a, z) in attention.iter().zip(&projected) {
            for (o, v) in fused.iter_mut().zip(z) {
                *o += a * v;
            }
        }
        Ok(FuseOutput {
            fused,
            attention,
            scores,
            inputs: f_hats.to_vec(),
            projected,
            hidden_pre,
        })
    }

    /// Accumulates parameter gradients and returns `∂L/∂F̂_i` per scale.
    pub fn backward(&mut self, out: &FuseOutput, g_fused: &[f64]) -> Vec<Vec<f64>> {
        let k = self.scales();
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let g_att: Vec<f64> = out.projected.iter().map(|z| dot(g_fused, z)).collect();
        let inner = dot(&g_att, &out.attention);
        let g_score: Vec<f64> = (0..k)
            .map(|i| out.attention[i] * (g_att[i] - inner))
            .collect();

        let mut grads = Vec::with_capacity(k);
        for i in 0..k {
            let z = &out.projected[i];
            let mut g_z: Vec<f64> = g_fused.iter().map(|g| out.attention[i] * g).collect();

            // gate
            let pre = &out.hidden_pre[i];
            let mut act = pre.clone();
            nn::leaky_relu(&mut act);
            self.gate_b2.grad[0] += g_score[i];
            let mut g_pre: Vec<f64> = Vec::with_capacity(self.hidden);
            for h in 0..self.hidden {
                self.gate_w2.grad[h] += g_score[i] * act[h];
                g_pre.push(g_score[i] * self.gate_w2.value[h]);
            }
            nn::leaky_relu_backward(pre, &mut g_pre);
            for h in 0..self.hidden {
                self.gate_b1.grad[h] += g_pre[h];
                let row = h * self.out_dim;
                for d in 0..self.out_dim {
                    self.gate_w1.grad[row + d] += g_pre[h] * z[d];
                    g_z[d] += g_pre[h] * self.gate_w1.value[row + d];
                }
            }

            // projection
            let f = &out.inputs[i];
            let d_in = self.in_dims[i];
            let p = &mut self.proj[i];
            let mut g_f = vec![0.0; d_in];
            for r in 0..self.out_dim {
                let row = r * d_in;
                for c in 0..d_in {
                    p.grad[row + c] += g_z[r] * f[c];
                    g_f[c] += g_z[r] * p.value[row + c];
                }
            }
            grads.push(g_f);
        }
        grads
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.proj.iter().collect();
        out.extend([&self.gate_w1, &self.gate_b1, &self.gate_w2, &self.gate_b2]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.proj.iter_mut().collect();
        out.extend([
            &mut self.gate_w1,
            &mut self.gate_b1,
            &mut self.gate_w2,
            &mut self.gate_b2,
        ]);
        out
    }
}
