//! A tiny autoregressive next-action model trained with hand-derived
//! gradients.
//!
//! Actions are emitted as an alternating token stream `BOS v1 n1 v2 n2 ...`.
//! The next-token logits are `O tanh(C mean(E[context]))`, restricted to verb
//! tokens at verb slots and noun tokens at noun slots. The contrastive
//! embedder shares the token table: the embedding of action `(v, n)` is the
//! average of the two token embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, ViolationReport};
use crate::corpus::{window_examples, Action, ActionSequence, AnticipationWindow, Corpus, Example};
use crate::counterfactual::counterfactual_targets;
use crate::embedding::{augment, encode_prefix, pool_backward, EmbedderParams};
use crate::error::{Error, Result};
use crate::losses::{default_gamma_schedule, loss_plau, loss_rep_variant, LossReport, PlauSample, RepVariant};
use crate::metrics::{repetition_score, Anticipation, Anticipator};
use crate::rng::{self, StreamRng};
use crate::tensor::{axpy, dot, Matrix, Tensor, TensorDump};
use crate::{constraints::Compliance, par};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Verb,
    Noun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    n_verbs: usize,
    n_nouns: usize,
    /// `(verbs + nouns + 1) x d`; the last row is BOS.
    pub token_table: Matrix,
    /// `d x d`
    pub context_weights: Matrix,
    /// One row per token (`n_tokens x d`), i.e. the transposed output
    /// projection.
    pub output_weights: Matrix,
    /// `d x 2d` pair projection of the contrastive embedder.
    pub pair_weight: Matrix,
    pub pair_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_verbs: usize, n_nouns: usize, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid(format!("model width {d} < 2")));
        }
        if n_verbs == 0 || n_nouns == 0 {
            return Err(Error::invalid("model needs at least one verb and one noun"));
        }
        let n_tokens = n_verbs + n_nouns + 1;
        Ok(ModelParams {
            n_verbs,
            n_nouns,
            token_table: Matrix::zeros(n_tokens, d),
            context_weights: Matrix::zeros(d, d),
            output_weights: Matrix::zeros(n_tokens, d),
            pair_weight: Matrix::zeros(d, 2 * d),
            pair_bias: vec![0.0; d],
        })
    }

    pub fn random<R: Rng + ?Sized>(n_verbs: usize, n_nouns: usize, d: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(n_verbs, n_nouns, d)?;
        let n_tokens = p.n_tokens();
        let s = 1.0 / (d as f64).sqrt();
        p.token_table = Matrix::random_normal(n_tokens, d, 1.0, rng);
        p.context_weights = Matrix::random_normal(d, d, s, rng);
        p.output_weights = Matrix::random_normal(n_tokens, d, s, rng);
        p.pair_weight = Matrix::random_normal(d, 2 * d, 1.0 / (2.0 * d as f64).sqrt(), rng);
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.pair_bias.len()
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_nouns(&self) -> usize {
        self.n_nouns
    }

    pub fn n_tokens(&self) -> usize {
        self.n_verbs + self.n_nouns + 1
    }

    pub fn bos(&self) -> usize {
        self.n_verbs + self.n_nouns
    }

    pub fn verb_token(&self, verb: usize) -> usize {
        verb
    }

    pub fn noun_token(&self, noun: usize) -> usize {
        self.n_verbs + noun
    }

    /// `BOS` followed by the interleaved verb/noun tokens of `seq`.
    pub fn stream(&self, seq: &ActionSequence) -> Vec<usize> {
        let mut out = Vec::with_capacity(1 + 2 * seq.len());
        out.push(self.bos());
        for a in &seq.actions {
            out.push(self.verb_token(a.verb));
            out.push(self.noun_token(a.noun));
        }
        out
    }

    fn slot_range(&self, slot: Slot) -> std::ops::Range<usize> {
        match slot {
            Slot::Verb => 0..self.n_verbs,
            Slot::Noun => self.n_verbs..self.n_verbs + self.n_nouns,
        }
    }

    /// Contrastive-embedder view of the shared parameters.
    pub fn embedder(&self) -> EmbedderParams {
        let d = self.d();
        let mut e = EmbedderParams::zeros(self.n_verbs, self.n_nouns, d).expect("d >= 2");
        for v in 0..self.n_verbs {
            for n in 0..self.n_nouns {
                let row = e.action_table.row_mut(Action::new(v, n).type_index(self.n_nouns));
                axpy(0.5, self.token_table.row(self.verb_token(v)), row);
                axpy(0.5, self.token_table.row(self.noun_token(n)), row);
            }
        }
        e.pair_weight = self.pair_weight.clone();
        e.pair_bias = self.pair_bias.clone();
        e
    }

    fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.n_verbs, self.n_nouns, self.d()).expect("shapes already validated")
    }

    /// Fold an embedder-shaped gradient back onto the shared parameters.
    fn absorb_embedder_grad(&mut self, g: &EmbedderParams) {
        for v in 0..self.n_verbs {
            for n in 0..self.n_nouns {
                let row = g.action_table.row(Action::new(v, n).type_index(self.n_nouns));
                axpy(0.5, row, self.token_table.row_mut(v));
                axpy(0.5, row, self.token_table.row_mut(self.n_verbs + n));
            }
        }
        axpy(1.0, g.pair_weight.as_slice(), self.pair_weight.as_mut_slice());
        axpy(1.0, &g.pair_bias, &mut self.pair_bias);
    }

    fn slices(&self) -> [&[f64]; 5] {
        [
            self.token_table.as_slice(),
            self.context_weights.as_slice(),
            self.output_weights.as_slice(),
            self.pair_weight.as_slice(),
            &self.pair_bias,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.token_table.as_mut_slice(),
            self.context_weights.as_mut_slice(),
            self.output_weights.as_mut_slice(),
            self.pair_weight.as_mut_slice(),
            &mut self.pair_bias,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn norm(&self) -> f64 {
        self.slices().iter().map(|s| dot(s, s)).sum::<f64>().sqrt()
    }

    fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// `self -= lr * grad`
    fn descend(&mut self, grad: &ModelParams, lr: f64) {
        for (p, g) in self.slices_mut().into_iter().zip(grad.slices()) {
            axpy(-lr, g, p);
        }
    }

    pub fn to_dump(&self, verb_vocab: &[String], noun_vocab: &[String]) -> TensorDump {
        let mut dump = TensorDump::new(vec![
            Tensor::from_matrix("token_table", &self.token_table),
            Tensor::from_matrix("context_weights", &self.context_weights),
            Tensor::from_matrix("output_weights", &self.output_weights),
            Tensor::from_matrix("pair_weight", &self.pair_weight),
            Tensor::from_vector("pair_bias", &self.pair_bias),
        ]);
        dump.meta.insert("n_verbs".into(), self.n_verbs.into());
        dump.meta.insert("n_nouns".into(), self.n_nouns.into());
        dump.meta.insert("d".into(), self.d().into());
        dump.meta.insert("verb_vocab".into(), verb_vocab.into());
        dump.meta.insert("noun_vocab".into(), noun_vocab.into());
        dump
    }

    /// Restore parameters; also returns the vocabularies stored alongside.
    pub fn from_dump(dump: &TensorDump) -> Result<(Self, Vec<String>, Vec<String>)> {
        let meta_usize = |k: &str| {
            dump.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks {k}")))
        };
        let meta_vocab = |k: &str| -> Result<Vec<String>> {
            serde_json::from_value(dump.meta.get(k).cloned().unwrap_or_default())
                .map_err(|_| Error::invalid(format!("checkpoint metadata lacks {k}")))
        };
        let (nv, nn, d) = (meta_usize("n_verbs")?, meta_usize("n_nouns")?, meta_usize("d")?);
        let mut p = ModelParams::zeros(nv, nn, d)?;
        p.token_table = dump.get("token_table")?.to_matrix()?;
        p.context_weights = dump.get("context_weights")?.to_matrix()?;
        p.output_weights = dump.get("output_weights")?.to_matrix()?;
        p.pair_weight = dump.get("pair_weight")?.to_matrix()?;
        p.pair_bias = dump.get("pair_bias")?.to_vector()?;
        let shapes = [
            (&p.token_table, p.n_tokens(), d),
            (&p.context_weights, d, d),
            (&p.output_weights, p.n_tokens(), d),
            (&p.pair_weight, d, 2 * d),
        ];
        if shapes.iter().any(|(m, r, c)| m.rows() != *r || m.cols() != *c) || p.pair_bias.len() != d {
            return Err(Error::dim("checkpoint tensor shapes do not match its metadata"));
        }
        let (verbs, nouns) = (meta_vocab("verb_vocab")?, meta_vocab("noun_vocab")?);
        if verbs.len() != nv || nouns.len() != nn {
            return Err(Error::dim("checkpoint vocabulary sizes do not match its metadata"));
        }
        Ok((p, verbs, nouns))
    }
}

/// Next-token scores at the slot following a token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NextLogits {
    pub slot: Slot,
    /// One score per verb (verb slot) or noun (noun slot).
    pub logits: Vec<f64>,
}

/// Slot that follows a `BOS`-led stream of `len` tokens.
fn slot_after(len: usize) -> Slot {
    if (len - 1).is_multiple_of(2) {
        Slot::Verb
    } else {
        Slot::Noun
    }
}

struct Hidden {
    context: Vec<f64>,
    hidden: Vec<f64>,
}

fn hidden_from_sum(params: &ModelParams, sum: &[f64], len: usize) -> Hidden {
    let context: Vec<f64> = sum.iter().map(|x| x / len as f64).collect();
    let hidden = params.context_weights.matvec(&context).into_iter().map(f64::tanh).collect();
    Hidden { context, hidden }
}

fn slot_logits(params: &ModelParams, slot: Slot, hidden: &[f64]) -> Vec<f64> {
    params.slot_range(slot).map(|tok| dot(params.output_weights.row(tok), hidden)).collect()
}

/// Logits for the token after `tokens` (a `BOS`-led stream).
pub fn forward(tokens: &[usize], params: &ModelParams) -> Result<NextLogits> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token prefix"));
    }
    let mut sum = vec![0.0; params.d()];
    for &tok in tokens {
        if tok >= params.n_tokens() {
            return Err(Error::OutOfRange { index: tok, size: params.n_tokens() });
        }
        axpy(1.0, params.token_table.row(tok), &mut sum);
    }
    let slot = slot_after(tokens.len());
    let h = hidden_from_sum(params, &sum, tokens.len());
    Ok(NextLogits { slot, logits: slot_logits(params, slot, &h.hidden) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Plain summed negative log-likelihood.
    Nll,
    /// Position-weighted NLL with the `[0, 2]` gamma schedule.
    Rep,
    /// Focal-style position-weighted loss with the same schedule.
    RepFocal,
}

impl LossVariant {
    fn gammas(self, steps: usize) -> Result<(RepVariant, Vec<f64>)> {
        Ok(match self {
            LossVariant::Nll => (RepVariant::Linear, vec![1.0; steps]),
            LossVariant::Rep => (RepVariant::Linear, default_gamma_schedule(steps)?.values().to_vec()),
            LossVariant::RepFocal => (RepVariant::Focal, default_gamma_schedule(steps)?.values().to_vec()),
        })
    }
}

/// Teacher-forced sequence loss of one example and its parameter gradient
/// (accumulated into `grad` with weight `scale`).
fn sequence_loss(
    params: &ModelParams,
    example: &Example,
    variant: RepVariant,
    gammas: &[f64],
    scale: f64,
    grad: &mut ModelParams,
) -> Result<LossReport> {
    let d = params.d();
    let prefix = params.stream(&example.prefix);
    let target = params.stream(&example.target);
    let mut stream = prefix.clone();
    stream.extend_from_slice(&target[1..]);
    let first = prefix.len();
    let steps = stream.len() - first;

    let mut sum = vec![0.0; d];
    for &tok in &stream[..first] {
        axpy(1.0, params.token_table.row(tok), &mut sum);
    }
    let mut hiddens = Vec::with_capacity(steps);
    let mut rows = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    for t in 0..steps {
        let len = first + t;
        let slot = slot_after(len);
        let h = hidden_from_sum(params, &sum, len);
        rows.push(slot_logits(params, slot, &h.hidden));
        targets.push(stream[len] - params.slot_range(slot).start);
        hiddens.push((slot, len, h));
        axpy(1.0, params.token_table.row(stream[len]), &mut sum);
    }

    let report = loss_rep_variant(variant, &rows, &targets, gammas)?;

    // d loss / d context at step t, spread over the first len_t tokens
    let mut context_grads = vec![vec![0.0; d]; steps];
    let mut offset = 0;
    for (t, (slot, len, h)) in hiddens.iter().enumerate() {
        let range = params.slot_range(*slot);
        let dlogits = &report.gradient[offset..offset + range.len()];
        offset += range.len();
        let mut dh = vec![0.0; d];
        for (tok, &g) in range.zip(dlogits) {
            let g = scale * g;
            if g != 0.0 {
                axpy(g, &h.hidden, grad.output_weights.row_mut(tok));
                axpy(g, params.output_weights.row(tok), &mut dh);
            }
        }
        let du: Vec<f64> = dh.iter().zip(&h.hidden).map(|(g, y)| g * (1.0 - y * y)).collect();
        grad.context_weights.add_outer(1.0, &du, &h.context);
        let dc = params.context_weights.matvec_t(&du);
        context_grads[t] = dc.into_iter().map(|x| x / *len as f64).collect();
    }
    // token at position p receives the context gradients of every step whose
    // context includes it
    let mut running = vec![0.0; d];
    for t in (0..steps).rev() {
        axpy(1.0, &context_grads[t], &mut running);
        let lo = if t == 0 { 0 } else { first + t - 1 };
        for &tok in &stream[lo..first + t] {
            axpy(1.0, &running, grad.token_table.row_mut(tok));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    TopK { k: usize, temperature: f64 },
    Sample { temperature: f64 },
}

fn ranking(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

fn argmax(logits: &[f64]) -> usize {
    ranking(logits)[0]
}

fn softmax_sample<R: Rng + ?Sized>(logits: &[f64], candidates: &[usize], temperature: f64, rng: &mut R) -> usize {
    let t = temperature.max(1e-6);
    let max = candidates.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|&i| ((logits[i] - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *candidates.last().expect("non-empty candidate list")
}

fn pick<R: Rng + ?Sized>(logits: &[f64], decode: Decode, rng: &mut R) -> usize {
    match decode {
        Decode::Greedy => argmax(logits),
        Decode::TopK { k, temperature } => {
            let top: Vec<usize> = ranking(logits).into_iter().take(k.max(1)).collect();
            softmax_sample(logits, &top, temperature, rng)
        }
        Decode::Sample { temperature } => {
            let all: Vec<usize> = (0..logits.len()).collect();
            softmax_sample(logits, &all, temperature, rng)
        }
    }
}

/// Continue `stream` until it holds `z` more actions; `first_verb` forces
/// the first verb.
fn continue_stream<R: Rng + ?Sized>(
    params: &ModelParams,
    mut stream: Vec<usize>,
    z: usize,
    first_verb: Option<usize>,
    decode: Decode,
    rng: &mut R,
) -> Result<ActionSequence> {
    let mut actions = Vec::with_capacity(z);
    let mut verb = 0;
    for step in 0..2 * z {
        let next = forward(&stream, params)?;
        let choice = match (step, first_verb) {
            (0, Some(v)) => v,
            _ => pick(&next.logits, decode, rng),
        };
        match next.slot {
            Slot::Verb => {
                verb = choice;
                stream.push(params.verb_token(choice));
            }
            Slot::Noun => {
                actions.push(Action::new(verb, choice));
                stream.push(params.noun_token(choice));
            }
        }
    }
    Ok(ActionSequence::new("generated", actions))
}

/// `k` candidate continuations of `z` actions after `prefix`. Greedy decoding
/// with `k > 1` branches on the top-`k` first verbs; sampling decoders give
/// each candidate its own RNG substream.
pub fn generate<R: Rng + ?Sized>(
    prefix: &ActionSequence,
    params: &ModelParams,
    z: usize,
    k: usize,
    decode: Decode,
    rng: &mut R,
) -> Result<Vec<ActionSequence>> {
    if z == 0 || k == 0 {
        return Err(Error::invalid("generation needs Z >= 1 and K >= 1"));
    }
    let stream = params.stream(prefix);
    for &tok in &stream {
        if tok >= params.n_tokens() {
            return Err(Error::OutOfRange { index: tok, size: params.n_tokens() });
        }
    }
    let base: u64 = rng.random();
    match decode {
        Decode::Greedy if k > 1 => {
            let first = ranking(&forward(&stream, params)?.logits);
            (0..k)
                .map(|c| {
                    let mut sub = rng::stream(base, "candidate", c as u64);
                    continue_stream(params, stream.clone(), z, Some(first[c % first.len()]), decode, &mut sub)
                })
                .collect()
        }
        _ => (0..k)
            .map(|c| {
                let mut sub = rng::stream(base, "candidate", c as u64);
                continue_stream(params, stream.clone(), z, None, decode, &mut sub)
            })
            .collect(),
    }
}

impl Anticipator for ModelParams {
    fn anticipate(
        &self,
        example: &Example,
        horizon: usize,
        k: usize,
        decode: Decode,
        rng: &mut StreamRng,
    ) -> Result<Anticipation> {
        let candidates = generate(&example.prefix, self, horizon, k, decode, rng)?;
        let stream = self.stream(&example.prefix);
        let verb_logits = forward(&stream, self)?.logits;
        let verb_probs = softmax(&verb_logits);
        let mut noun_marginal = vec![0.0; self.n_nouns];
        let mut joint = Vec::with_capacity(self.n_verbs * self.n_nouns);
        let mut extended = stream.clone();
        extended.push(0);
        for (v, &pv) in verb_probs.iter().enumerate() {
            *extended.last_mut().expect("non-empty") = self.verb_token(v);
            let noun_probs = softmax(&forward(&extended, self)?.logits);
            for (n, &pn) in noun_probs.iter().enumerate() {
                noun_marginal[n] += pv * pn;
                joint.push(pv * pn);
            }
        }
        let nn = self.n_nouns;
        Ok(Anticipation {
            candidates,
            verb_ranking: ranking(&verb_logits),
            noun_ranking: ranking(&noun_marginal),
            action_ranking: ranking(&joint).into_iter().take(10).map(|t| Action::from_type_index(t, nn)).collect(),
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub sigma_jitter: f64,
    pub loss_variant: LossVariant,
    pub use_plau: bool,
    pub observation_len: usize,
    pub gap: usize,
    /// Horizon Z, in actions.
    pub horizon: usize,
    /// Candidates K per example at evaluation time.
    pub k: usize,
    /// Probability of trying a temporal counterfactual first.
    pub mix: f64,
    pub d: usize,
    pub min_support: usize,
    pub holdout_frac: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 8,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            tau: 0.1,
            sigma_jitter: 0.1,
            loss_variant: LossVariant::Rep,
            use_plau: true,
            observation_len: 2,
            gap: 0,
            horizon: 6,
            k: 5,
            mix: 0.5,
            d: 32,
            min_support: 1,
            holdout_frac: 0.2,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn window(&self) -> Result<AnticipationWindow> {
        AnticipationWindow::new(self.observation_len, self.gap, self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail("alpha and beta must be >= 0".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 || self.sigma_jitter.is_nan() || self.sigma_jitter <= 0.0 {
            return fail("tau and sigma_jitter must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.mix) || !(0.0..1.0).contains(&self.holdout_frac) {
            return fail("mix must be in [0, 1] and holdout_frac in [0, 1)".into());
        }
        if self.d < 2 || self.k == 0 || self.min_support == 0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail("d >= 2, k >= 1, min_support >= 1 and clip_norm > 0 are required".into());
        }
        self.window()?;
        Ok(())
    }
}

/// One training-history line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    pub plau: f64,
    pub rep: f64,
    pub total: f64,
    /// Held-out greedy repetition score (`None` without a held-out split).
    pub repetition: Option<f64>,
    pub followed: Option<f64>,
    pub checked: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Constraints mined from the training split.
    pub constraints: ConstraintSet,
    pub train_examples: Vec<Example>,
    pub heldout_examples: Vec<Example>,
}

/// Greedy single-candidate continuations of every example, in order.
pub fn greedy_continuations(params: &ModelParams, examples: &[Example], z: usize) -> Result<Vec<ActionSequence>> {
    par::map(examples, |ex| {
        let mut rng = rng::stream(0, "greedy", 0);
        generate(&ex.prefix, params, z, 1, Decode::Greedy, &mut rng).map(|mut c| c.remove(0))
    })
    .into_iter()
    .collect()
}

fn heldout_stats(
    params: &ModelParams,
    examples: &[Example],
    constraints: &ConstraintSet,
    z: usize,
) -> Result<(f64, Compliance)> {
    let gens = greedy_continuations(params, examples, z)?;
    let reports = examples
        .iter()
        .zip(&gens)
        .map(|(ex, g)| {
            let mut s = ex.prefix.clone();
            s.actions.extend_from_slice(&g.actions);
            constraints.check(&s)
        })
        .collect::<Result<Vec<ViolationReport>>>()?;
    Ok((repetition_score(&gens)?, Compliance::from_reports(&reports)?))
}

/// Train from a seeded random initialization. The last `holdout_frac` of the
/// sequences is held out for per-epoch monitoring; constraints and
/// counterfactuals come from the training split only.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut init_rng = rng::stream(config.seed, "init", 0);
    let params = ModelParams::random(corpus.n_verbs(), corpus.n_nouns(), config.d, &mut init_rng)?;
    train_from(corpus, config, params)
}

pub fn train_from(corpus: &Corpus, config: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    config.validate()?;
    if params.n_verbs() != corpus.n_verbs() || params.n_nouns() != corpus.n_nouns() {
        return Err(Error::dim("model vocabulary does not match the corpus"));
    }
    let window = config.window()?;
    let (train_split, held_split) = corpus.split_holdout(config.holdout_frac);
    let train_examples = window_examples(&train_split, window).examples;
    if train_examples.is_empty() {
        return Err(Error::invalid("no training examples after windowing"));
    }
    let heldout_examples = window_examples(&held_split, window).examples;
    let constraints = ConstraintSet::mine(&train_split, config.min_support)?;

    let cf_targets = if config.use_plau {
        counterfactual_targets(
            &train_examples,
            &constraints.temporal,
            &constraints.verb_noun,
            rng::derive_seed(config.seed, "cf", 0),
            config.mix,
        )?
        .into_iter()
        .map(|s| s.map(|s| s.counterfactual))
        .collect()
    } else {
        vec![None; train_examples.len()]
    };

    let (variant, gammas) = config.loss_variant.gammas(2 * window.horizon)?;
    let mut order: Vec<usize> = (0..train_examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut jitter = rng::stream(config.seed, "jitter", epoch as u64);
        let (mut sum_rep, mut sum_plau, mut sum_total, mut plau_batches) = (0.0, 0.0, 0.0, 0usize);
        let n_batches = order.len().div_ceil(config.batch_size);

        for batch in order.chunks(config.batch_size) {
            let mut grad = params.zeros_like();
            let scale = config.beta / batch.len() as f64;
            let mut rep = 0.0;
            for &i in batch {
                rep += sequence_loss(&params, &train_examples[i], variant, &gammas, scale, &mut grad)?.value;
            }
            rep /= batch.len() as f64;

            let mut plau = 0.0;
            let with_cf: Vec<usize> = batch.iter().copied().filter(|&i| cf_targets[i].is_some()).collect();
            if config.use_plau && !with_cf.is_empty() && config.alpha > 0.0 {
                let emb = params.embedder();
                let videos = with_cf
                    .iter()
                    .map(|&i| {
                        let v = encode_prefix(&train_examples[i].prefix, &emb)?;
                        let v_aug = augment(&v, &mut jitter, config.sigma_jitter)?;
                        Ok((v, v_aug))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let samples: Vec<PlauSample<'_>> = with_cf
                    .iter()
                    .zip(&videos)
                    .map(|(&i, (v, v_aug))| PlauSample {
                        v,
                        v_aug,
                        t: &train_examples[i].target,
                        t_cf: cf_targets[i].as_ref().expect("filtered"),
                    })
                    .collect();
                let out = loss_plau(&samples, &emb, config.tau)?;
                plau = out.report.value;
                let mut eg = out.param_grad;
                for (&i, (dv, dv_aug)) in with_cf.iter().zip(&out.video_grads) {
                    let total: Vec<f64> = dv.iter().zip(dv_aug).map(|(a, b)| a + b).collect();
                    pool_backward(&train_examples[i].prefix, &total, &mut eg);
                }
                for part in eg.parts_mut() {
                    part.iter_mut().for_each(|x| *x *= config.alpha);
                }
                grad.absorb_embedder_grad(&eg);
                sum_plau += plau;
                plau_batches += 1;
            }

            let gn = grad.norm();
            if gn > config.clip_norm {
                grad.scale(config.clip_norm / gn);
            }
            params.descend(&grad, config.learning_rate);
            sum_rep += rep;
            sum_total += config.beta * rep + if config.use_plau { config.alpha * plau } else { 0.0 };
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }

        let (repetition, followed, checked) = if heldout_examples.is_empty() {
            (None, None, None)
        } else {
            let (r, c) = heldout_stats(&params, &heldout_examples, &constraints, window.horizon)?;
            (Some(r), Some(c.avg_followed), Some(c.avg_checked))
        };
        history.push(EpochRecord {
            step: epoch + 1,
            plau: if plau_batches > 0 { sum_plau / plau_batches as f64 } else { 0.0 },
            rep: sum_rep / n_batches as f64,
            total: sum_total / n_batches as f64,
            repetition,
            followed,
            checked,
        });
    }

    Ok(TrainOutcome { params, history, constraints, train_examples, heldout_examples })
}

/// Mean teacher-forced sequence loss over `examples` (no parameter update).
pub fn mean_sequence_loss(params: &ModelParams, examples: &[Example], variant: LossVariant) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let mut scratch = params.zeros_like();
    let mut total = 0.0;
    for ex in examples {
        let (v, g) = variant.gammas(2 * ex.target.len())?;
        total += sequence_loss(params, ex, v, &g, 0.0, &mut scratch)?.value;
    }
    Ok(total / examples.len() as f64)
}
