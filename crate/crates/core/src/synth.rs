//! Synthetic corpora drawn from a random precedence DAG over action types.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, ActionSequence, Corpus};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_verbs: usize,
    pub n_nouns: usize,
    /// Fraction of the verb x noun grid that is compatible.
    pub compatible_frac: f64,
    /// Action types actually used; drawn from the compatible pairs.
    pub n_action_types: usize,
    pub n_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of a precedence edge between two types.
    pub edge_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_verbs: 12,
            n_nouns: 12,
            compatible_frac: 0.3,
            n_action_types: 40,
            n_sequences: 500,
            min_len: 8,
            max_len: 14,
            edge_prob: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let compatible = self.n_compatible();
        if self.n_verbs == 0 || self.n_nouns == 0 {
            return Err(Error::invalid("synthetic vocabularies must be non-empty"));
        }
        if self.n_action_types == 0 || self.n_action_types > compatible {
            return Err(Error::invalid(format!(
                "{} action types requested but only {compatible} compatible pairs",
                self.n_action_types
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > self.n_action_types {
            return Err(Error::invalid("sequence lengths must satisfy 1 <= min <= max <= action types"));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) || self.n_sequences == 0 {
            return Err(Error::invalid("edge_prob must be in [0, 1] and n_sequences >= 1"));
        }
        Ok(())
    }

    pub fn n_compatible(&self) -> usize {
        ((self.compatible_frac * (self.n_verbs * self.n_nouns) as f64).round() as usize).min(self.n_verbs * self.n_nouns)
    }
}

/// The generating process: action types with a rank and precedence edges.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecedenceDag {
    pub types: Vec<Action>,
    /// `edges[i]` lists the types that must come after type `i`.
    pub edges: Vec<Vec<usize>>,
}

impl PrecedenceDag {
    fn random<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let grid = spec.n_verbs * spec.n_nouns;
        let compatible = index::sample(rng, grid, spec.n_compatible()).into_vec();
        let mut types: Vec<Action> = index::sample(rng, compatible.len(), spec.n_action_types)
            .into_iter()
            .map(|i| Action::from_type_index(compatible[i], spec.n_nouns))
            .collect();
        // position in `types` is the topological rank
        types.shuffle(rng);
        let n = types.len();
        let edges = (0..n).map(|i| (i + 1..n).filter(|_| rng.random_bool(spec.edge_prob)).collect()).collect();
        PrecedenceDag { types, edges }
    }

    /// Random linear extension of the DAG restricted to `subset`.
    fn order<R: Rng + ?Sized>(&self, subset: &[usize], rng: &mut R) -> Vec<usize> {
        let mut member = vec![false; self.types.len()];
        subset.iter().for_each(|&i| member[i] = true);
        let mut indegree = vec![0usize; self.types.len()];
        for &i in subset {
            for &j in &self.edges[i] {
                if member[j] {
                    indegree[j] += 1;
                }
            }
        }
        let mut ready: Vec<usize> = subset.iter().copied().filter(|&i| indegree[i] == 0).collect();
        let mut out = Vec::with_capacity(subset.len());
        while !ready.is_empty() {
            ready.sort_unstable();
            let next = ready.swap_remove(rng.random_range(0..ready.len()));
            out.push(next);
            for &j in &self.edges[next] {
                if member[j] {
                    indegree[j] -= 1;
                    if indegree[j] == 0 {
                        ready.push(j);
                    }
                }
            }
        }
        out
    }
}

/// Generate a corpus; all randomness comes from `seed`.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<(Corpus, PrecedenceDag)> {
    spec.validate()?;
    let dag = PrecedenceDag::random(spec, &mut rng::stream(seed, "synth-dag", 0));
    let width = spec.n_sequences.to_string().len();
    let sequences = (0..spec.n_sequences)
        .map(|s| {
            let mut rng = rng::stream(seed, "synth-seq", s as u64);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let subset = index::sample(&mut rng, dag.types.len(), len).into_vec();
            let actions = dag.order(&subset, &mut rng).into_iter().map(|i| dag.types[i]).collect();
            ActionSequence::new(format!("synth-{s:0width$}"), actions)
        })
        .collect();
    let verbs = (0..spec.n_verbs).map(|v| format!("verb{v:02}")).collect();
    let nouns = (0..spec.n_nouns).map(|n| format!("noun{n:02}")).collect();
    Ok((Corpus::from_parts(sequences, verbs, nouns)?, dag))
}
