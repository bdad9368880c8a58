//! Evaluation metrics for action anticipation.
//!
//! * ED@(Z, K): minimum over `K` candidates of the Damerau-Levenshtein
//!   distance to the ground truth over the next `Z` actions, normalized by
//!   `Z`, scored separately on verb and noun streams;
//! * class-mean Top-5 recall (verb, noun and action);
//! * repetition score, BLEU and constraint compliance of the top candidate.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::constraints::{Compliance, ConstraintSet, ViolationReport};
use crate::corpus::{Action, ActionSequence, Example};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::toymodel::Decode;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EditDistanceVariant {
    /// Unrestricted Damerau-Levenshtein (substrings may be edited after a
    /// transposition).
    #[default]
    Unrestricted,
    /// Optimal string alignment: no substring is edited more than once.
    OptimalStringAlignment,
}

/// Unrestricted Damerau-Levenshtein distance (insertions, deletions,
/// substitutions and transpositions of adjacent symbols, all unit cost).
pub fn damerau_levenshtein<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    let (la, lb) = (a.len(), b.len());
    let inf = la + lb;
    let w = lb + 2;
    let mut h = vec![0usize; (la + 2) * w];
    h[0] = inf;
    for i in 0..=la {
        h[(i + 1) * w] = inf;
        h[(i + 1) * w + 1] = i;
    }
    for j in 0..=lb {
        h[j + 1] = inf;
        h[w + j + 1] = j;
    }
    // last row in `a` where each symbol was seen
    let mut last_row: HashMap<&T, usize> = HashMap::new();
    for i in 1..=la {
        let mut last_match_col = 0;
        for j in 1..=lb {
            let i1 = last_row.get(&b[j - 1]).copied().unwrap_or(0);
            let j1 = last_match_col;
            let cost = if a[i - 1] == b[j - 1] {
                last_match_col = j;
                0
            } else {
                1
            };
            let substitute = h[i * w + j] + cost;
            let insert = h[(i + 1) * w + j] + 1;
            let delete = h[i * w + j + 1] + 1;
            let transpose = h[i1 * w + j1] + (i - i1 - 1) + 1 + (j - j1 - 1);
            h[(i + 1) * w + j + 1] = substitute.min(insert).min(delete).min(transpose);
        }
        last_row.insert(&a[i - 1], i);
    }
    h[(la + 1) * w + lb + 1]
}

/// Restricted (optimal string alignment) edit distance.
pub fn osa_distance<T: Eq>(a: &[T], b: &[T]) -> usize {
    let (la, lb) = (a.len(), b.len());
    let w = lb + 1;
    let mut d = vec![0usize; (la + 1) * w];
    for i in 0..=la {
        d[i * w] = i;
    }
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=la {
        for j in 1..=lb {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut best = (d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                best = best.min(d[(i - 2) * w + j - 2] + 1);
            }
            d[i * w + j] = best;
        }
    }
    d[la * w + lb]
}

pub fn edit_distance<T: Eq + Hash>(a: &[T], b: &[T], variant: EditDistanceVariant) -> usize {
    match variant {
        EditDistanceVariant::Unrestricted => damerau_levenshtein(a, b),
        EditDistanceVariant::OptimalStringAlignment => osa_distance(a, b),
    }
}

/// Best normalized verb and noun edit distances over `candidates`, each
/// stream minimized independently. Both sides are truncated to
/// `min(z, truth length)` actions.
pub fn ed_at_zk(
    candidates: &[ActionSequence],
    truth: &ActionSequence,
    z: usize,
    variant: EditDistanceVariant,
) -> Result<(f64, f64)> {
    if candidates.is_empty() {
        return Err(Error::invalid("ED@(Z,K) needs at least one candidate"));
    }
    let z = z.min(truth.len());
    if z == 0 {
        return Err(Error::invalid("ED@(Z,K) needs a non-empty ground truth and Z >= 1"));
    }
    let tv = &truth.verbs()[..z];
    let tn = &truth.nouns()[..z];
    let mut best = (usize::MAX, usize::MAX);
    for c in candidates {
        let n = z.min(c.len());
        best.0 = best.0.min(edit_distance(&c.verbs()[..n], tv, variant));
        best.1 = best.1.min(edit_distance(&c.nouns()[..n], tn, variant));
    }
    Ok((best.0 as f64 / z as f64, best.1 as f64 / z as f64))
}

/// Percentage of instances whose class is within the first five ranked
/// predictions, averaged per class over classes that occur in `truths`.
pub fn class_mean_top5_recall<C: Ord + Clone>(ranked: &[Vec<C>], truths: &[C]) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::invalid("top-5 recall over an empty set"));
    }
    if ranked.len() != truths.len() {
        return Err(Error::dim(format!("{} rankings for {} ground truths", ranked.len(), truths.len())));
    }
    let mut per_class: BTreeMap<&C, (usize, usize)> = BTreeMap::new();
    for (preds, truth) in ranked.iter().zip(truths) {
        let hit = preds.iter().take(5).any(|p| p == truth);
        let e = per_class.entry(truth).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let mean = per_class.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per_class.len() as f64;
    Ok(100.0 * mean)
}

/// Mean over sequences of `length - distinct actions`.
pub fn repetition_score(seqs: &[ActionSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::invalid("repetition score over an empty set"));
    }
    let total: usize = seqs
        .iter()
        .map(|s| s.len() - s.actions.iter().collect::<HashSet<_>>().len())
        .sum();
    Ok(total as f64 / seqs.len() as f64)
}

/// Added to zero n-gram match counts so the geometric mean stays defined.
pub const BLEU_SMOOTHING: f64 = 1e-9;

/// Sentence-level BLEU in `[0, 100]`: geometric mean of clipped n-gram
/// precisions for `n = 1..=max_n` times the brevity penalty.
pub fn bleu<T: Eq + Hash>(pred: &[T], reference: &[T], max_n: usize) -> f64 {
    if pred.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let total = pred.len().saturating_sub(n - 1);
        let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_default() += 1;
        }
        let mut matched = 0usize;
        for g in pred.windows(n) {
            if let Some(c) = ref_counts.get_mut(g) {
                if *c > 0 {
                    *c -= 1;
                    matched += 1;
                }
            }
        }
        let precision = if matched == 0 {
            BLEU_SMOOTHING / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += precision.ln();
    }
    let bp = if pred.len() < reference.len() {
        (1.0 - reference.len() as f64 / pred.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

/// Interleaved word stream `v1 n1 v2 n2 ...` with disjoint verb/noun ids.
pub fn word_stream(seq: &ActionSequence) -> Vec<usize> {
    seq.actions.iter().flat_map(|a| [2 * a.verb, 2 * a.noun + 1]).collect()
}

/// What a predictor returns for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Anticipation {
    /// `K` candidate continuations, best first.
    pub candidates: Vec<ActionSequence>,
    /// Ranked classes for the next action.
    pub verb_ranking: Vec<usize>,
    pub noun_ranking: Vec<usize>,
    pub action_ranking: Vec<Action>,
}

pub trait Anticipator: Sync {
    fn anticipate(
        &self,
        example: &Example,
        horizon: usize,
        k: usize,
        decode: Decode,
        rng: &mut StreamRng,
    ) -> Result<Anticipation>;
}

/// Predictor that echoes the ground truth; for checking the metric plumbing.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthOracle {
    pub n_verbs: usize,
    pub n_nouns: usize,
}

fn truth_first<C: PartialEq + Clone>(truth: C, others: impl Iterator<Item = C>) -> Vec<C> {
    std::iter::once(truth.clone()).chain(others.filter(|c| *c != truth).take(4)).collect()
}

impl Anticipator for GroundTruthOracle {
    fn anticipate(&self, ex: &Example, horizon: usize, k: usize, _: Decode, _: &mut StreamRng) -> Result<Anticipation> {
        let mut truth = ex.target.clone();
        truth.actions.truncate(horizon);
        let next = ex.target.actions[0];
        let nn = self.n_nouns;
        Ok(Anticipation {
            candidates: vec![truth; k.max(1)],
            verb_ranking: truth_first(next.verb, 0..self.n_verbs),
            noun_ranking: truth_first(next.noun, 0..nn),
            action_ranking: truth_first(next, (0..self.n_verbs * nn).map(|t| Action::from_type_index(t, nn))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub ed_verb: f64,
    pub ed_noun: f64,
    pub top5_verb: f64,
    pub top5_noun: f64,
    pub top5_action: f64,
    pub repetition: f64,
    pub bleu: f64,
    pub compliance: Compliance,
    pub examples: usize,
}

impl EvalReport {
    /// Mean of the verb and noun ED columns.
    pub fn ed_mean(&self) -> f64 {
        0.5 * (self.ed_verb + self.ed_noun)
    }

    pub const TABLE_HEADER: &'static str =
        "ED@Z verb | ED@Z noun | Top-5 verb | Top-5 noun | Top-5 action |  BLEU  | Repetition | Constraints followed";

    pub fn table_row(&self) -> String {
        format!(
            "{:>9.3} | {:>9.3} | {:>10.2} | {:>10.2} | {:>12.2} | {:>6.2} | {:>10.3} | {:>6.3} / {:.3}",
            self.ed_verb,
            self.ed_noun,
            self.top5_verb,
            self.top5_noun,
            self.top5_action,
            self.bleu,
            self.repetition,
            self.compliance.avg_followed,
            self.compliance.avg_checked
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub horizon: usize,
    pub k: usize,
    pub decode: Decode,
    pub variant: EditDistanceVariant,
    pub seed: u64,
}

struct ExampleScores {
    ed: (f64, f64),
    bleu: f64,
    top: Vec<ActionSequence>,
    compliance: ViolationReport,
    ranking: (Vec<usize>, Vec<usize>, Vec<Action>),
}

/// Run `model` on every example and aggregate all metrics. Examples are
/// scored in parallel, each with its own RNG substream.
pub fn evaluate<A: Anticipator + ?Sized>(
    model: &A,
    examples: &[Example],
    constraints: &ConstraintSet,
    opts: EvalOptions,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    if opts.horizon == 0 || opts.k == 0 {
        return Err(Error::invalid("horizon and K must be >= 1"));
    }
    let scored = par::map_indexed(examples, |idx, ex| -> Result<ExampleScores> {
        let mut rng = rng::stream(opts.seed, "eval", idx as u64);
        let a = model.anticipate(ex, opts.horizon, opts.k, opts.decode, &mut rng)?;
        let top = a.candidates.first().ok_or_else(|| Error::invalid("predictor returned no candidates"))?.clone();
        let ed = ed_at_zk(&a.candidates, &ex.target, opts.horizon, opts.variant)?;
        let bleu = bleu(&word_stream(&top), &word_stream(&ex.target), 4);
        let mut observed = ex.prefix.clone();
        observed.actions.extend_from_slice(&top.actions);
        let compliance = constraints.check(&observed)?;
        Ok(ExampleScores {
            ed,
            bleu,
            top: vec![top],
            compliance,
            ranking: (a.verb_ranking, a.noun_ranking, a.action_ranking),
        })
    });

    let n = examples.len() as f64;
    let (mut ed_v, mut ed_n, mut bleu_sum) = (0.0, 0.0, 0.0);
    let mut tops = Vec::with_capacity(examples.len());
    let mut reports = Vec::with_capacity(examples.len());
    let (mut rv, mut rn, mut ra) = (Vec::new(), Vec::new(), Vec::new());
    for s in scored {
        let s = s?;
        ed_v += s.ed.0;
        ed_n += s.ed.1;
        bleu_sum += s.bleu;
        tops.extend(s.top);
        reports.push(s.compliance);
        rv.push(s.ranking.0);
        rn.push(s.ranking.1);
        ra.push(s.ranking.2);
    }
    let next: Vec<Action> = examples.iter().map(|e| e.target.actions[0]).collect();
    Ok(EvalReport {
        ed_verb: ed_v / n,
        ed_noun: ed_n / n,
        top5_verb: class_mean_top5_recall(&rv, &next.iter().map(|a| a.verb).collect::<Vec<_>>())?,
        top5_noun: class_mean_top5_recall(&rn, &next.iter().map(|a| a.noun).collect::<Vec<_>>())?,
        top5_action: class_mean_top5_recall(&ra, &next)?,
        repetition: repetition_score(&tops)?,
        bleu: bleu_sum / n,
        compliance: Compliance::from_reports(&reports)?,
        examples: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn dl_examples() {
        assert_eq!(damerau_levenshtein(&chars(""), &chars("ABC")), 3);
        assert_eq!(damerau_levenshtein(&chars("AB"), &chars("BA")), 1);
        assert_eq!(damerau_levenshtein(&chars("CA"), &chars("ABC")), 2);
        assert_eq!(osa_distance(&chars("CA"), &chars("ABC")), 3);
        assert_eq!(damerau_levenshtein(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars("abc"), &chars("abc"), EditDistanceVariant::OptimalStringAlignment), 0);
    }

    fn seq(pairs: &[(usize, usize)]) -> ActionSequence {
        ActionSequence::new("s", pairs.iter().map(|&(v, n)| Action::new(v, n)).collect())
    }

    #[test]
    fn ed_examples() {
        let truth = seq(&[(0, 0), (1, 1), (2, 2)]);
        let u = EditDistanceVariant::Unrestricted;
        assert_eq!(ed_at_zk(std::slice::from_ref(&truth), &truth, 20, u).unwrap(), (0.0, 0.0));
        let wrong_verbs = seq(&[(5, 0), (6, 1), (7, 2)]);
        assert_eq!(ed_at_zk(&[wrong_verbs], &truth, 3, u).unwrap(), (1.0, 0.0));
        let verb_perfect = seq(&[(0, 9), (1, 9), (2, 9)]);
        let noun_perfect = seq(&[(9, 0), (9, 1), (9, 2)]);
        assert_eq!(ed_at_zk(&[verb_perfect, noun_perfect], &truth, 3, u).unwrap(), (0.0, 0.0));
        assert!(ed_at_zk(&[], &truth, 3, u).is_err());
    }

    #[test]
    fn ed_truncates_to_horizon() {
        let truth = seq(&[(0, 0), (1, 1), (2, 2), (3, 3)]);
        let cand = seq(&[(0, 0), (1, 1), (7, 7), (7, 7)]);
        let u = EditDistanceVariant::Unrestricted;
        assert_eq!(ed_at_zk(std::slice::from_ref(&cand), &truth, 2, u).unwrap(), (0.0, 0.0));
        assert_eq!(ed_at_zk(&[cand], &truth, 4, u).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn top5_examples() {
        let ranked = vec![vec![0, 1, 2, 3, 4]; 4];
        assert_eq!(class_mean_top5_recall(&ranked, &[0, 1, 2, 3]).unwrap(), 100.0);
        // class 0 hit three times, class 9 missed once
        assert_eq!(class_mean_top5_recall(&ranked, &[0, 0, 0, 9]).unwrap(), 50.0);
        assert_eq!(class_mean_top5_recall(&ranked[..2], &[7, 8]).unwrap(), 0.0);
        // only the first five count
        assert_eq!(class_mean_top5_recall(&[vec![1, 2, 3, 4, 5, 0]], &[0]).unwrap(), 0.0);
        assert!(class_mean_top5_recall::<usize>(&[], &[]).is_err());
    }

    #[test]
    fn repetition_examples() {
        let (a, b) = ((0, 0), (1, 0));
        assert_eq!(repetition_score(&[seq(&[a, b, a, a])]).unwrap(), 2.0);
        assert_eq!(repetition_score(&[seq(&[a, b])]).unwrap(), 0.0);
        assert_eq!(repetition_score(&[seq(&[a, b, a, a]), seq(&[a, b])]).unwrap(), 1.0);
        assert!(repetition_score(&[]).is_err());
    }

    #[test]
    fn bleu_examples() {
        let r = chars("abcde");
        assert!((bleu(&r, &r, 4) - 100.0).abs() < 1e-12);
        assert!(bleu(&chars("abcd"), &chars("wxyz"), 4) < 1e-6);
        assert_eq!(bleu(&chars(""), &r, 4), 0.0);
        // a b c vs a b c d: p1 = p2 = p3 = 1, no 4-grams, BP = exp(1 - 4/3)
        let expected = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * BLEU_SMOOTHING.powf(0.25);
        assert!((bleu(&chars("abc"), &chars("abcd"), 4) - expected).abs() < 1e-12);
        assert!((expected - 0.4029).abs() < 1e-3);
    }

    #[test]
    fn bleu_clips_counts() {
        // "aaaa" against "ab": unigram precision clipped to 1/4
        let p = bleu(&chars("aaaa"), &chars("ab"), 1);
        assert!((p - 25.0).abs() < 1e-12);
    }
}
