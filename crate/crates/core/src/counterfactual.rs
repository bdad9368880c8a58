//! Counterfactual (implausible) sequences built by a single edit that breaks
//! a mined constraint: swapping two actions whose order is constrained, or
//! substituting the verb or noun of one action so the pair becomes one that
//! never occurs.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::constraints::{TemporalConstraintMatrix, VerbNounConstraintMatrix};
use crate::corpus::{Action, ActionSequence, Corpus, Example};
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Edit {
    TemporalSwap { i: usize, j: usize },
    VerbSwap { pos: usize, verb: usize },
    NounSwap { pos: usize, noun: usize },
}

impl Edit {
    pub fn kind(&self) -> EditKind {
        match self {
            Edit::TemporalSwap { .. } => EditKind::Temporal,
            Edit::VerbSwap { .. } => EditKind::Verb,
            Edit::NounSwap { .. } => EditKind::Noun,
        }
    }

    /// Positions touched by the edit.
    pub fn positions(&self) -> Vec<usize> {
        match *self {
            Edit::TemporalSwap { i, j } => vec![i, j],
            Edit::VerbSwap { pos, .. } | Edit::NounSwap { pos, .. } => vec![pos],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EditKind {
    Temporal,
    Verb,
    Noun,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterfactualSample {
    pub original: ActionSequence,
    pub counterfactual: ActionSequence,
    pub edit: Edit,
}

/// Swap one uniformly chosen pair of positions whose action types are in a
/// constrained before-relation. `None` when the sequence has no such pair.
pub fn temporal_cf<R: Rng + ?Sized>(
    seq: &ActionSequence,
    temp: &TemporalConstraintMatrix,
    rng: &mut R,
) -> Result<Option<CounterfactualSample>> {
    if seq.len() < 2 {
        return Err(Error::invalid("temporal counterfactual needs at least 2 actions"));
    }
    let pairs = temp.forward_pairs(seq);
    let Some(&(i, j)) = pairs.choose(rng) else {
        return Ok(None);
    };
    let mut cf = seq.clone();
    cf.actions.swap(i, j);
    Ok(Some(CounterfactualSample { original: seq.clone(), counterfactual: cf, edit: Edit::TemporalSwap { i, j } }))
}

/// Replace the verb or noun (chosen with probability 1/2) of a random
/// position with one that makes the pair implausible, falling back to the
/// other side and then to other positions.
pub fn verbnoun_cf<R: Rng + ?Sized>(
    seq: &ActionSequence,
    act: &VerbNounConstraintMatrix,
    rng: &mut R,
) -> Result<Option<CounterfactualSample>> {
    if seq.is_empty() {
        return Err(Error::invalid("verb-noun counterfactual needs at least 1 action"));
    }
    let mut untried: Vec<usize> = (0..seq.len()).collect();
    while !untried.is_empty() {
        let pos = untried.swap_remove(rng.random_range(0..untried.len()));
        let a = seq.actions[pos];
        let verb_side = rng.random_bool(0.5);
        for side in [verb_side, !verb_side] {
            let (edit, replacement) = if side {
                let verbs: Vec<usize> = act.implausible_verbs_for(a.noun).into_iter().filter(|&v| v != a.verb).collect();
                match verbs.choose(rng) {
                    Some(&v) => (Edit::VerbSwap { pos, verb: v }, Action::new(v, a.noun)),
                    None => continue,
                }
            } else {
                let nouns: Vec<usize> = act.implausible_nouns_for(a.verb).into_iter().filter(|&n| n != a.noun).collect();
                match nouns.choose(rng) {
                    Some(&n) => (Edit::NounSwap { pos, noun: n }, Action::new(a.verb, n)),
                    None => continue,
                }
            };
            let mut cf = seq.clone();
            cf.actions[pos] = replacement;
            return Ok(Some(CounterfactualSample { original: seq.clone(), counterfactual: cf, edit }));
        }
    }
    Ok(None)
}

/// One entry of the counterfactual dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfRecord {
    pub id: String,
    pub prefix: ActionSequence,
    pub target: ActionSequence,
    pub target_cf: ActionSequence,
    pub edit: Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CfDataset {
    pub records: Vec<CfRecord>,
    /// Examples for which neither edit family applied.
    pub dropped: usize,
}

impl CfDataset {
    pub fn count(&self, kind: EditKind) -> usize {
        self.records.iter().filter(|r| r.edit.kind() == kind).count()
    }

    /// JSON lines: `{"id", "prefix", "target", "target_cf", "edit"}` with
    /// actions written as `[verb, noun]` strings from `corpus`'s vocabulary.
    pub fn write_jsonl<W: Write>(&self, corpus: &Corpus, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        #[allow(clippy::enum_variant_names)]
        enum EditOut<'a> {
            TemporalSwap { i: usize, j: usize },
            VerbSwap { pos: usize, verb: &'a str },
            NounSwap { pos: usize, noun: &'a str },
        }
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            prefix: Vec<[&'a str; 2]>,
            target: Vec<[&'a str; 2]>,
            target_cf: Vec<[&'a str; 2]>,
            edit: EditOut<'a>,
        }
        let names = |s: &ActionSequence| -> Vec<[&str; 2]> {
            s.actions
                .iter()
                .map(|a| [corpus.verb_vocab[a.verb].as_str(), corpus.noun_vocab[a.noun].as_str()])
                .collect()
        };
        for r in &self.records {
            let edit = match r.edit {
                Edit::TemporalSwap { i, j } => EditOut::TemporalSwap { i, j },
                Edit::VerbSwap { pos, verb } => EditOut::VerbSwap { pos, verb: &corpus.verb_vocab[verb] },
                Edit::NounSwap { pos, noun } => EditOut::NounSwap { pos, noun: &corpus.noun_vocab[noun] },
            };
            let line = Line {
                id: &r.id,
                prefix: names(&r.prefix),
                target: names(&r.target),
                target_cf: names(&r.target_cf),
                edit,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Try one family first (temporal with probability `mix`), then the other.
fn counterfactual_for<R: Rng + ?Sized>(
    target: &ActionSequence,
    temp: &TemporalConstraintMatrix,
    act: &VerbNounConstraintMatrix,
    rng: &mut R,
    mix: f64,
) -> Result<Option<CounterfactualSample>> {
    let temporal_first = rng.random_bool(mix);
    for temporal in [temporal_first, !temporal_first] {
        let sample = if temporal {
            if target.len() < 2 {
                continue;
            }
            temporal_cf(target, temp, rng)?
        } else {
            verbnoun_cf(target, act, rng)?
        };
        if sample.is_some() {
            return Ok(sample);
        }
    }
    Ok(None)
}

/// One counterfactual (or `None`) per example, aligned with `examples`.
/// Each example draws from its own RNG substream of `seed`, so output is
/// independent of scheduling.
pub fn counterfactual_targets(
    examples: &[Example],
    temp: &TemporalConstraintMatrix,
    act: &VerbNounConstraintMatrix,
    seed: u64,
    mix: f64,
) -> Result<Vec<Option<CounterfactualSample>>> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid(format!("mix {mix} not in [0, 1]")));
    }
    if temp.n_verbs() != act.n_verbs() || temp.n_nouns() != act.n_nouns() {
        return Err(Error::dim("constraint matrices were mined from different vocabularies"));
    }
    par::map_indexed(examples, |idx, ex| {
        let mut rng = rng::stream(seed, "cfgen", idx as u64);
        counterfactual_for(&ex.target, temp, act, &mut rng, mix)
    })
    .into_iter()
    .collect()
}

/// Build the counterfactual dataset for `examples`, dropping (and counting)
/// examples where neither edit family applies.
pub fn build_cf_dataset(
    examples: &[Example],
    temp: &TemporalConstraintMatrix,
    act: &VerbNounConstraintMatrix,
    seed: u64,
    mix: f64,
) -> Result<CfDataset> {
    let results = counterfactual_targets(examples, temp, act, seed, mix)?;
    let mut out = CfDataset::default();
    for (ex, res) in examples.iter().zip(results) {
        match res {
            Some(s) => out.records.push(CfRecord {
                id: ex.target.id.clone(),
                prefix: ex.prefix.clone(),
                target: s.original,
                target_cf: s.counterfactual,
                edit: s.edit,
            }),
            None => out.dropped += 1,
        }
    }
    Ok(out)
}
