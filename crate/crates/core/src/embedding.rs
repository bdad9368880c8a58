//! Small differentiable stand-in for the video/text encoders.
//!
//! A "video" is represented by the mean embedding of its observed actions,
//! a positive view by Gaussian feature jitter, and the cross-modal pair
//! representation by one affine layer with `tanh` over
//! `[video; mean action embedding of the text]`.
//!
//! Mean pooling makes [`pair_embed`] insensitive to the order of the text's
//! actions; temporal-swap counterfactuals therefore share the pair
//! representation of their originals.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{Action, ActionSequence};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, norm, Matrix, Tensor, TensorDump};

/// Norms below this make the cosine similarity undefined.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    n_nouns: usize,
    /// One row per action type (`verbs x nouns`, see [`Action::type_index`]).
    pub action_table: Matrix,
    /// `d x 2d` weight of the pair projection.
    pub pair_weight: Matrix,
    pub pair_bias: Vec<f64>,
}

impl EmbedderParams {
    pub fn zeros(n_verbs: usize, n_nouns: usize, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid(format!("embedding width {d} < 2")));
        }
        Ok(EmbedderParams {
            n_nouns,
            action_table: Matrix::zeros(n_verbs * n_nouns, d),
            pair_weight: Matrix::zeros(d, 2 * d),
            pair_bias: vec![0.0; d],
        })
    }

    pub fn random<R: Rng + ?Sized>(n_verbs: usize, n_nouns: usize, d: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(n_verbs, n_nouns, d)?;
        p.action_table = Matrix::random_normal(n_verbs * n_nouns, d, 1.0 / (d as f64).sqrt(), rng);
        p.pair_weight = Matrix::random_normal(d, 2 * d, 1.0 / (2.0 * d as f64).sqrt(), rng);
        Ok(p)
    }

    /// Same shapes, all zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        EmbedderParams {
            n_nouns: self.n_nouns,
            action_table: Matrix::zeros(self.action_table.rows(), self.action_table.cols()),
            pair_weight: Matrix::zeros(self.pair_weight.rows(), self.pair_weight.cols()),
            pair_bias: vec![0.0; self.pair_bias.len()],
        }
    }

    pub fn d(&self) -> usize {
        self.pair_bias.len()
    }

    pub fn n_nouns(&self) -> usize {
        self.n_nouns
    }

    pub fn n_action_types(&self) -> usize {
        self.action_table.rows()
    }

    pub fn action_row(&self, a: Action) -> Result<&[f64]> {
        let t = a.type_index(self.n_nouns);
        if a.noun >= self.n_nouns || t >= self.action_table.rows() {
            return Err(Error::OutOfRange { index: t, size: self.action_table.rows() });
        }
        Ok(self.action_table.row(t))
    }

    /// All parameters flattened in a fixed order: action table, weight, bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.action_table.as_slice().to_vec();
        out.extend_from_slice(self.pair_weight.as_slice());
        out.extend_from_slice(&self.pair_bias);
        out
    }

    /// Mutable views over the parameters, in [`flatten`](Self::flatten) order.
    pub fn parts_mut(&mut self) -> [&mut [f64]; 3] {
        [self.action_table.as_mut_slice(), self.pair_weight.as_mut_slice(), &mut self.pair_bias]
    }

    pub fn is_finite(&self) -> bool {
        self.action_table.is_finite() && self.pair_weight.is_finite() && self.pair_bias.iter().all(|x| x.is_finite())
    }

    pub fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor::from_matrix(&format!("{prefix}action_table"), &self.action_table),
            Tensor::from_matrix(&format!("{prefix}pair_weight"), &self.pair_weight),
            Tensor::from_vector(&format!("{prefix}pair_bias"), &self.pair_bias),
        ]
    }

    pub fn from_dump(dump: &TensorDump, prefix: &str, n_nouns: usize) -> Result<Self> {
        let p = EmbedderParams {
            n_nouns,
            action_table: dump.get(&format!("{prefix}action_table"))?.to_matrix()?,
            pair_weight: dump.get(&format!("{prefix}pair_weight"))?.to_matrix()?,
            pair_bias: dump.get(&format!("{prefix}pair_bias"))?.to_vector()?,
        };
        let d = p.d();
        if d < 2 || p.action_table.cols() != d || p.pair_weight.rows() != d || p.pair_weight.cols() != 2 * d {
            return Err(Error::dim("inconsistent embedder tensor shapes"));
        }
        if n_nouns == 0 || !p.action_table.rows().is_multiple_of(n_nouns) {
            return Err(Error::dim("action table rows are not a multiple of the noun count"));
        }
        Ok(p)
    }
}

/// Mean of the action embeddings of `seq`.
pub fn mean_action_embedding(seq: &ActionSequence, params: &EmbedderParams) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot pool an empty sequence"));
    }
    let mut acc = vec![0.0; params.d()];
    let w = 1.0 / seq.len() as f64;
    for &a in &seq.actions {
        axpy(w, params.action_row(a)?, &mut acc);
    }
    Ok(acc)
}

/// The "video" vector of an observed prefix.
pub fn encode_prefix(prefix: &ActionSequence, params: &EmbedderParams) -> Result<Vec<f64>> {
    mean_action_embedding(prefix, params)
}

/// Spread `grad` (w.r.t. a mean-pooled embedding of `seq`) onto the action
/// table rows of `acc`.
pub fn pool_backward(seq: &ActionSequence, grad: &[f64], acc: &mut EmbedderParams) {
    let w = 1.0 / seq.len() as f64;
    let n_nouns = acc.n_nouns;
    for &a in &seq.actions {
        axpy(w, grad, acc.action_table.row_mut(a.type_index(n_nouns)));
    }
}

/// Positive view: `v` plus isotropic Gaussian noise of standard deviation
/// `sigma`.
pub fn augment<R: Rng + ?Sized>(v: &[f64], rng: &mut R, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("augmentation sigma {sigma} must be positive")));
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok(v.iter().map(|x| x + normal.sample(rng)).collect())
}

/// Intermediate values of one [`pair_embed`] evaluation, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn pair_forward(v: &[f64], t: &ActionSequence, params: &EmbedderParams) -> Result<PairForward> {
    let d = params.d();
    if v.len() != d {
        return Err(Error::dim(format!("video vector has {} components, expected {d}", v.len())));
    }
    let mut input = v.to_vec();
    input.extend(mean_action_embedding(t, params)?);
    let mut output = params.pair_weight.matvec(&input);
    for (o, b) in output.iter_mut().zip(&params.pair_bias) {
        *o = (*o + b).tanh();
    }
    Ok(PairForward { input, output })
}

/// `tanh(W [v; mean(t)] + b)`
pub fn pair_embed(v: &[f64], t: &ActionSequence, params: &EmbedderParams) -> Result<Vec<f64>> {
    Ok(pair_forward(v, t, params)?.output)
}

/// Backpropagate `grad_out` through one pair evaluation. Parameter
/// gradients accumulate into `acc`; the gradient w.r.t. the video vector is
/// returned.
pub fn pair_backward(
    fwd: &PairForward,
    t: &ActionSequence,
    params: &EmbedderParams,
    grad_out: &[f64],
    acc: &mut EmbedderParams,
) -> Vec<f64> {
    let d = params.d();
    let pre: Vec<f64> = grad_out.iter().zip(&fwd.output).map(|(g, h)| g * (1.0 - h * h)).collect();
    acc.pair_weight.add_outer(1.0, &pre, &fwd.input);
    axpy(1.0, &pre, &mut acc.pair_bias);
    let grad_in = params.pair_weight.matvec_t(&pre);
    pool_backward(t, &grad_in[d..], acc);
    grad_in[..d].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had norm below [`COSINE_NORM_FLOOR`]; the value
    /// is then 0.
    pub degenerate: bool,
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Cosine {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return Cosine { value: 0.0, degenerate: true };
    }
    let value = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Cosine { value, degenerate: false }
}

/// Gradients of `cosine_sim(a, b)` w.r.t. `a` and `b` (zero when degenerate).
pub fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    (ga, gb)
}
