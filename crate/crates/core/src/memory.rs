//! Per-scale memory banks and attention-based addressing.
//!
//! A query latent is compared to every slot by cosine similarity, the
//! similarities go through a softmax, weights at or below the shrinkage
//! threshold are zeroed and the survivors are renormalized. The read-out is
//! the resulting convex combination of slots. The entropy of the final
//! weights is the sparsity regularizer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::Param;

/// Norm below which a vector counts as zero.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub scale_index: usize,
    /// `n × D`, one slot per row.
    pub slots: Param,
    n: usize,
    dim: usize,
}

impl MemoryBank {
    /// Slots drawn as independent uniformly random unit vectors.
    pub fn random_unit<R: Rng>(scale_index: usize, n: usize, dim: usize, rng: &mut R) -> Self {
        let mut slots = Param::zeros(format!("memory.{scale_index}.slots"), &[n, dim]);
        for row in slots.value.chunks_mut(dim) {
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let norm = l2(row);
                if norm > 1e-3 {
                    row.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
        }
        MemoryBank {
            scale_index,
            slots,
            n,
            dim,
        }
    }

    pub fn from_rows(scale_index: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::input("a memory bank needs at least one slot"));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("memory slots must share one dimension"));
        }
        let mut slots = Param::zeros(format!("memory.{scale_index}.slots"), &[n, dim]);
        slots.value = rows.concat();
        let bank = MemoryBank {
            scale_index,
            slots,
            n,
            dim,
        };
        bank.check_norms()?;
        Ok(bank)
    }

    /// Rebuilds a bank around an existing parameter array (checkpoint load).
    pub fn from_param(scale_index: usize, slots: Param) -> Result<Self> {
        if slots.shape.len() != 2 || slots.shape[0] == 0 {
            return Err(Error::input(format!(
                "memory slots must be a non-empty n×D array, got shape {:?}",
                slots.shape
            )));
        }
        let (n, dim) = (slots.shape[0], slots.shape[1]);
        Ok(MemoryBank {
            scale_index,
            slots,
            n,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slot(&self, j: usize) -> &[f64] {
        &self.slots.value[j * self.dim..(j + 1) * self.dim]
    }

    pub fn check_norms(&self) -> Result<()> {
        for j in 0..self.n {
            if l2(self.slot(j)) <= MIN_NORM {
                return Err(Error::NumericalDomain(format!(
                    "memory {} slot {j} has (near) zero norm",
                    self.scale_index
                )));
            }
        }
        Ok(())
    }

    /// The `1/n` default shrinkage threshold.
    pub fn default_threshold(&self) -> f64 {
        1.0 / self.n as f64
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(f: &[f64], m: &[f64]) -> Result<f64> {
    if f.len() != m.len() {
        return Err(Error::input(format!(
            "cosine similarity of vectors of length {} and {}",
            f.len(),
            m.len()
        )));
    }
    let (nf, nm) = (l2(f), l2(m));
    if nf <= MIN_NORM || nm <= MIN_NORM {
        return Err(Error::NumericalDomain(
            "cosine similarity is undefined for a zero-norm vector".into(),
        ));
    }
    Ok(dot(f, m) / (nf * nm))
}

/// Nonnegative addressing weights over the slots of one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct AddressWeights {
    weights: Vec<f64>,
}

impl AddressWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input(
                "address weights must be finite and nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "address weights sum to {total}, not 1"
            )));
        }
        Ok(AddressWeights { weights })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len())
            .filter(|&j| self.weights[j] > 0.0)
            .collect()
    }

    /// `Σ −w log w` over the support.
    pub fn entropy(&self) -> f64 {
        self.weights
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| -w * w.ln())
            .sum()
    }

    pub fn is_one_hot(&self) -> bool {
        self.support().len() == 1
    }
}

pub fn soft_address(f: &[f64], bank: &MemoryBank) -> Result<AddressWeights> {
    let sims = similarities(f, bank)?;
    Ok(AddressWeights {
        weights: softmax(&sims),
    })
}

fn similarities(f: &[f64], bank: &MemoryBank) -> Result<Vec<f64>> {
    if f.len() != bank.dim {
        return Err(Error::input(format!(
            "query has length {}, memory {} stores vectors of length {}",
            f.len(),
            bank.scale_index,
            bank.dim
        )));
    }
    (0..bank.n)
        .map(|j| cosine_similarity(f, bank.slot(j)))
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Outcome of shrinking one weight vector.
#[derive(Debug, Clone, PartialEq)]
struct Shrunk {
    weights: Vec<f64>,
    /// Sum of the surviving pre-shrinkage weights; `None` in the one-hot
    /// fallback, where the result does not depend on the input.
    kept_mass: Option<f64>,
}

fn shrink(w: &[f64], lambda: f64) -> Shrunk {
    let kept_mass: f64 = w.iter().filter(|&&v| v > lambda).sum();
    if kept_mass > 0.0 {
        let weights = w
            .iter()
            .map(|&v| if v > lambda { v / kept_mass } else { 0.0 })
            .collect();
        return Shrunk {
            weights,
            kept_mass: Some(kept_mass),
        };
    }
    // Every entry shrunk away: one-hot on the first maximum.
    let mut best = 0;
    for (j, &v) in w.iter().enumerate() {
        if v > w[best] {
            best = j;
        }
    }
    let mut weights = vec![0.0; w.len()];
    weights[best] = 1.0;
    Shrunk {
        weights,
        kept_mass: None,
    }
}

/// Zeroes every weight `<= lambda` and renormalizes the rest to sum 1.
pub fn hard_shrink(w: &AddressWeights, lambda: f64) -> AddressWeights {
    AddressWeights {
        weights: shrink(&w.weights, lambda).weights,
    }
}

/// Everything a read produces, plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct MemoryRead {
    pub f_hat: Vec<f64>,
    pub weights: AddressWeights,
    pub soft_weights: AddressWeights,
    pub entropy: f64,
    pub fallback: bool,
    query: Vec<f64>,
    similarities: Vec<f64>,
    kept_mass: Option<f64>,
}

pub fn read_memory(f: &[f64], bank: &MemoryBank, lambda: f64) -> Result<MemoryRead> {
    let similarities = similarities(f, bank)?;
    let soft = softmax(&similarities);
    let Shrunk { weights, kept_mass } = shrink(&soft, lambda);
    let mut f_hat = vec![0.0; bank.dim];
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            for (o, m) in f_hat.iter_mut().zip(bank.slot(j)) {
                *o += w * m;
            }
        }
    }
    let weights = AddressWeights { weights };
    let entropy = weights.entropy();
    Ok(MemoryRead {
        f_hat,
        entropy,
        fallback: kept_mass.is_none(),
        weights,
        soft_weights: AddressWeights { weights: soft },
        query: f.to_vec(),
        similarities,
        kept_mass,
    })
}

impl MemoryRead {
    /// Distance of the closest pre-shrinkage weight to the threshold.
    pub fn kink_distance(&self, lambda: f64) -> f64 {
        self.soft_weights
            .weights
            .iter()
            .map(|w| (w - lambda).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Backpropagates `g_f_hat` (gradient w.r.t. the read-out) and `g_entropy`
/// (gradient w.r.t. the entropy term) through one read. Slot gradients are
/// accumulated into `bank.slots.grad`; the query gradient is returned.
pub fn read_memory_backward(
    bank: &mut MemoryBank,
    read: &MemoryRead,
    g_f_hat: &[f64],
    g_entropy: f64,
) -> Vec<f64> {
    let n = bank.n;
    let dim = bank.dim;
    let w_hat = &read.weights.weights;

    // f̂ = Σ ŵ_j m_j
    let mut g_w_hat = vec![0.0; n];
    for j in 0..n {
        if w_hat[j] > 0.0 {
            g_w_hat[j] = dot(g_f_hat, bank.slot(j)) - g_entropy * (w_hat[j].ln() + 1.0);
            let row = &mut bank.slots.grad[j * dim..(j + 1) * dim];
            for (g, d) in row.iter_mut().zip(g_f_hat) {
                *g += w_hat[j] * d;
            }
        }
    }

    let Some(kept_mass) = read.kept_mass else {
        return vec![0.0; dim];
    };

    // ŵ_j = w_j / Σ_S w over the surviving set S
    let inner: f64 = (0..n)
        .filter(|&j| w_hat[j] > 0.0)
        .map(|j| g_w_hat[j] * w_hat[j])
        .sum();
    let g_w: Vec<f64> = (0..n)
        .map(|j| {
            if w_hat[j] > 0.0 {
                (g_w_hat[j] - inner) / kept_mass
            } else {
                0.0
            }
        })
        .collect();

    // softmax
    let w = &read.soft_weights.weights;
    let inner: f64 = g_w.iter().zip(w).map(|(g, v)| g * v).sum();
    let g_d: Vec<f64> = g_w.iter().zip(w).map(|(g, v)| v * (g - inner)).collect();

    // d_j = f·m_j / (‖f‖‖m_j‖)
    let f = &read.query;
    let nf = l2(f);
    let mut g_f = vec![0.0; dim];
    for j in 0..n {
        if g_d[j] == 0.0 {
            continue;
        }
        let m = &bank.slots.value[j * dim..(j + 1) * dim];
        let nm = l2(m);
        let d = read.similarities[j];
        let row = &mut bank.slots.grad[j * dim..(j + 1) * dim];
        for k in 0..dim {
            g_f[k] += g_d[j] * (m[k] / (nf * nm) - d * f[k] / (nf * nf));
            row[k] += g_d[j] * (f[k] / (nf * nm) - d * m[k] / (nm * nm));
        }
    }
    g_f
}
