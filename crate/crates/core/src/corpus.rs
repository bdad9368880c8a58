//! Action-sequence corpora: parsing, vocabulary ownership and windowing.
//!
//! The on-disk format is JSON lines, one sequence per line:
//!
//! ```text
//! {"id":"s1","actions":[["crack","eggs"],["cook","omelette"]]}
//! ```
//!
//! Verb and noun vocabularies are assigned in first-appearance order, so the
//! same input bytes always produce the same indices.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single `(verb, noun)` action, as indices into the corpus vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub verb: usize,
    pub noun: usize,
}

impl Action {
    pub fn new(verb: usize, noun: usize) -> Self {
        Action { verb, noun }
    }

    /// Dense action-type index in the `verbs x nouns` cross-product.
    pub fn type_index(self, n_nouns: usize) -> usize {
        self.verb * n_nouns + self.noun
    }

    pub fn from_type_index(index: usize, n_nouns: usize) -> Self {
        Action::new(index / n_nouns, index % n_nouns)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub id: String,
    pub actions: Vec<Action>,
}

impl ActionSequence {
    pub fn new(id: impl Into<String>, actions: Vec<Action>) -> Self {
        ActionSequence { id: id.into(), actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn verbs(&self) -> Vec<usize> {
        self.actions.iter().map(|a| a.verb).collect()
    }

    pub fn nouns(&self) -> Vec<usize> {
        self.actions.iter().map(|a| a.noun).collect()
    }
}

/// A set of sequences together with the vocabularies they index into.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sequences: Vec<ActionSequence>,
    pub verb_vocab: Vec<String>,
    pub noun_vocab: Vec<String>,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    actions: Vec<serde_json::Value>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    actions: Vec<[&'a str; 2]>,
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }
}

/// Parse a JSON-lines corpus. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut verbs = Interner::default();
    let mut nouns = Interner::default();
    let mut sequences = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: format!("malformed record: {e}"),
        })?;
        if record.actions.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("sequence {:?} has an empty action list", record.id),
            });
        }
        let mut actions = Vec::with_capacity(record.actions.len());
        for (k, entry) in record.actions.iter().enumerate() {
            let pair = match entry.as_array().map(Vec::as_slice) {
                Some([serde_json::Value::String(v), serde_json::Value::String(n)]) => (v, n),
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("action {k} is not a [verb, noun] pair of strings"),
                    })
                }
            };
            if pair.0.is_empty() || pair.1.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("action {k} has an empty verb or noun"),
                });
            }
            actions.push(Action::new(verbs.intern(pair.0), nouns.intern(pair.1)));
        }
        sequences.push(ActionSequence::new(record.id, actions));
    }

    Ok(Corpus {
        sequences,
        verb_vocab: verbs.names,
        noun_vocab: nouns.names,
    })
}

pub fn parse_corpus_str(text: &str) -> Result<Corpus> {
    parse_corpus(text.as_bytes())
}

impl Corpus {
    /// Build a corpus from already-indexed parts, checking every invariant.
    pub fn from_parts(
        sequences: Vec<ActionSequence>,
        verb_vocab: Vec<String>,
        noun_vocab: Vec<String>,
    ) -> Result<Self> {
        let corpus = Corpus { sequences, verb_vocab, noun_vocab };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, vocab) in [("verb", &self.verb_vocab), ("noun", &self.noun_vocab)] {
            let mut seen = HashMap::new();
            for (i, name) in vocab.iter().enumerate() {
                if name.is_empty() {
                    return Err(Error::invalid(format!("empty {kind} at index {i}")));
                }
                if let Some(j) = seen.insert(name.as_str(), i) {
                    return Err(Error::invalid(format!("duplicate {kind} {name:?} at {j} and {i}")));
                }
            }
        }
        for seq in &self.sequences {
            if seq.is_empty() {
                return Err(Error::invalid(format!("sequence {:?} is empty", seq.id)));
            }
            self.check_actions(&seq.actions)?;
        }
        Ok(())
    }

    pub(crate) fn check_actions(&self, actions: &[Action]) -> Result<()> {
        for a in actions {
            if a.verb >= self.n_verbs() {
                return Err(Error::OutOfRange { index: a.verb, size: self.n_verbs() });
            }
            if a.noun >= self.n_nouns() {
                return Err(Error::OutOfRange { index: a.noun, size: self.n_nouns() });
            }
        }
        Ok(())
    }

    pub fn n_verbs(&self) -> usize {
        self.verb_vocab.len()
    }

    pub fn n_nouns(&self) -> usize {
        self.noun_vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Serialize back to the JSON-lines format accepted by [`parse_corpus`].
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for seq in &self.sequences {
            let record = RecordOut {
                id: &seq.id,
                actions: seq
                    .actions
                    .iter()
                    .map(|a| [self.verb_vocab[a.verb].as_str(), self.noun_vocab[a.noun].as_str()])
                    .collect(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Human-readable action label, e.g. `crack eggs`.
    pub fn label(&self, action: Action) -> String {
        format!("{} {}", self.verb_vocab[action.verb], self.noun_vocab[action.noun])
    }

    /// Split off the last `holdout_frac` of sequences (by input order). The
    /// vocabularies are shared by both halves.
    pub fn split_holdout(&self, holdout_frac: f64) -> (Corpus, Corpus) {
        let n = self.sequences.len();
        let n_hold = ((n as f64) * holdout_frac).round() as usize;
        let cut = n - n_hold.min(n);
        let with = |seqs: &[ActionSequence]| Corpus {
            sequences: seqs.to_vec(),
            verb_vocab: self.verb_vocab.clone(),
            noun_vocab: self.noun_vocab.clone(),
        };
        (with(&self.sequences[..cut]), with(&self.sequences[cut..]))
    }

    /// Re-index onto another vocabulary (e.g. a checkpoint's). Every name
    /// used by a sequence must exist in the target vocabulary.
    pub fn reindex(&self, verb_vocab: &[String], noun_vocab: &[String]) -> Result<Corpus> {
        let lookup = |kind: &str, from: &[String], to: &[String]| -> Result<Vec<Option<usize>>> {
            let index: HashMap<&str, usize> = to.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            if index.len() != to.len() {
                return Err(Error::invalid(format!("target {kind} vocabulary has duplicates")));
            }
            Ok(from.iter().map(|s| index.get(s.as_str()).copied()).collect())
        };
        let verbs = lookup("verb", &self.verb_vocab, verb_vocab)?;
        let nouns = lookup("noun", &self.noun_vocab, noun_vocab)?;
        let mut sequences = Vec::with_capacity(self.sequences.len());
        for seq in &self.sequences {
            let mut actions = Vec::with_capacity(seq.len());
            for a in &seq.actions {
                let verb = verbs[a.verb]
                    .ok_or_else(|| Error::invalid(format!("unknown verb {:?}", self.verb_vocab[a.verb])))?;
                let noun = nouns[a.noun]
                    .ok_or_else(|| Error::invalid(format!("unknown noun {:?}", self.noun_vocab[a.noun])))?;
                actions.push(Action::new(verb, noun));
            }
            sequences.push(ActionSequence::new(seq.id.clone(), actions));
        }
        Corpus::from_parts(sequences, verb_vocab.to_vec(), noun_vocab.to_vec())
    }

    pub fn summary(&self) -> CorpusSummary {
        let mut histogram = BTreeMap::new();
        for seq in &self.sequences {
            *histogram.entry(seq.len()).or_insert(0) += 1;
        }
        CorpusSummary {
            sequences: self.sequences.len(),
            verbs: self.n_verbs(),
            nouns: self.n_nouns(),
            actions: self.sequences.iter().map(ActionSequence::len).sum(),
            length_histogram: histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub sequences: usize,
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
    pub length_histogram: BTreeMap<usize, usize>,
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let plural = |n: usize, word: &str| {
            if n == 1 {
                format!("{n} {word}")
            } else {
                format!("{n} {word}s")
            }
        };
        write!(
            f,
            "{}, {}, {}",
            plural(self.sequences, "sequence"),
            plural(self.verbs, "verb"),
            plural(self.nouns, "noun")
        )
    }
}

/// Action-count anticipation window: observe `observation_len` actions, skip
/// `gap` unobserved actions, then predict the next `horizon` actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnticipationWindow {
    pub observation_len: usize,
    pub gap: usize,
    pub horizon: usize,
}

impl AnticipationWindow {
    pub fn new(observation_len: usize, gap: usize, horizon: usize) -> Result<Self> {
        let w = AnticipationWindow { observation_len, gap, horizon };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observation_len == 0 {
            return Err(Error::invalid("observation_len must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        Ok(())
    }

    /// Number of actions a sequence needs to yield at least one example.
    pub fn span(&self) -> usize {
        self.observation_len + self.gap + self.horizon
    }

    /// Index of the first predicted action relative to the stopping point.
    pub fn start_offset(&self) -> usize {
        self.observation_len + self.gap
    }
}

/// An observed prefix and the future actions to anticipate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prefix: ActionSequence,
    pub target: ActionSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Windowed {
    pub examples: Vec<Example>,
    /// Sequences too short to produce any example.
    pub skipped: usize,
}

/// Slide `window` over every sequence with stride 1.
pub fn window_examples(corpus: &Corpus, window: AnticipationWindow) -> Windowed {
    let span = window.span();
    let mut out = Windowed::default();
    for seq in &corpus.sequences {
        if seq.len() < span {
            out.skipped += 1;
            continue;
        }
        for i in 0..=(seq.len() - span) {
            let start = i + window.start_offset();
            out.examples.push(Example {
                prefix: ActionSequence::new(
                    format!("{}@{i}", seq.id),
                    seq.actions[i..i + window.observation_len].to_vec(),
                ),
                target: ActionSequence::new(
                    format!("{}@{i}", seq.id),
                    seq.actions[start..start + window.horizon].to_vec(),
                ),
            });
        }
    }
    out
}
