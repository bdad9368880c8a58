//! Mined logical constraints over action sequences.
//!
//! Two relations are mined from ground-truth sequences:
//!
//! * a temporal precedence relation between action types, where `+1` at
//!   `(a, b)` means every co-occurrence of `a` and `b` has all `a`s strictly
//!   before all `b`s, `-1` the mirror image, and `0` no evidence or mixed
//!   orders;
//! * a verb-noun relation flagging `(verb, noun)` combinations that never
//!   appear as an action.
//!
//! Action types are `(verb, noun)` pairs, indexed densely by
//! [`Action::type_index`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::corpus::{Action, ActionSequence, Corpus};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relation {
    /// `+1` (row before column) or `-1` (row after column).
    pub value: i8,
    /// Number of sequences in which both types occur.
    pub support: usize,
}

/// Antisymmetric precedence relation over action types. Only nonzero entries
/// are stored; both `(i, j)` and `(j, i)` are present for each constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalConstraintMatrix {
    n_verbs: usize,
    n_nouns: usize,
    min_support: usize,
    relations: BTreeMap<(usize, usize), Relation>,
}

impl TemporalConstraintMatrix {
    pub fn empty(n_verbs: usize, n_nouns: usize, min_support: usize) -> Self {
        TemporalConstraintMatrix { n_verbs, n_nouns, min_support, relations: BTreeMap::new() }
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_nouns(&self) -> usize {
        self.n_nouns
    }

    pub fn min_support(&self) -> usize {
        self.min_support
    }

    /// Size of the action-type space (`verbs x nouns`).
    pub fn n_actions(&self) -> usize {
        self.n_verbs * self.n_nouns
    }

    pub fn entry(&self, i: usize, j: usize) -> i8 {
        self.relations.get(&(i, j)).map_or(0, |r| r.value)
    }

    pub fn action_entry(&self, a: Action, b: Action) -> i8 {
        self.entry(a.type_index(self.n_nouns), b.type_index(self.n_nouns))
    }

    pub fn support(&self, i: usize, j: usize) -> Option<usize> {
        self.relations.get(&(i, j)).map(|r| r.support)
    }

    /// Nonzero entries in `(row, col)` order.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), Relation)> + '_ {
        self.relations.iter().map(|(&k, &v)| (k, v))
    }

    /// Number of nonzero entries (twice the number of constrained pairs).
    pub fn nonzero(&self) -> usize {
        self.relations.len()
    }

    /// Record that type `before` always precedes type `after`.
    pub fn insert_before(&mut self, before: usize, after: usize, support: usize) -> Result<()> {
        let n = self.n_actions();
        for idx in [before, after] {
            if idx >= n {
                return Err(Error::OutOfRange { index: idx, size: n });
            }
        }
        if before == after {
            return Err(Error::invalid("diagonal temporal entries must be 0"));
        }
        self.relations.insert((before, after), Relation { value: 1, support });
        self.relations.insert((after, before), Relation { value: -1, support });
        Ok(())
    }

    /// Position pairs `(i, j)`, `i < j`, of `seq` whose types carry a `+1`
    /// entry, i.e. pairs currently in the constrained order.
    pub fn forward_pairs(&self, seq: &ActionSequence) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..seq.len() {
            for j in i + 1..seq.len() {
                if self.action_entry(seq.actions[i], seq.actions[j]) == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# temporal-constraints")?;
        writeln!(
            out,
            "verbs {} nouns {} min_support {} entries {}",
            self.n_verbs,
            self.n_nouns,
            self.min_support,
            self.relations.len()
        )?;
        for (&(i, j), r) in &self.relations {
            writeln!(out, "{i} {j} {} {}", r.value, r.support)?;
        }
        Ok(())
    }
}

/// Binary implausibility relation over the full `verbs x nouns` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbNounConstraintMatrix {
    n_verbs: usize,
    n_nouns: usize,
    implausible: Vec<bool>,
}

impl VerbNounConstraintMatrix {
    /// All-zero matrix (every combination plausible).
    pub fn permissive(n_verbs: usize, n_nouns: usize) -> Self {
        VerbNounConstraintMatrix { n_verbs, n_nouns, implausible: vec![false; n_verbs * n_nouns] }
    }

    pub fn n_verbs(&self) -> usize {
        self.n_verbs
    }

    pub fn n_nouns(&self) -> usize {
        self.n_nouns
    }

    pub fn entry(&self, verb: usize, noun: usize) -> u8 {
        u8::from(self.implausible[verb * self.n_nouns + noun])
    }

    pub fn is_implausible(&self, a: Action) -> bool {
        self.implausible[a.type_index(self.n_nouns)]
    }

    pub fn set(&mut self, verb: usize, noun: usize, implausible: bool) -> Result<()> {
        if verb >= self.n_verbs {
            return Err(Error::OutOfRange { index: verb, size: self.n_verbs });
        }
        if noun >= self.n_nouns {
            return Err(Error::OutOfRange { index: noun, size: self.n_nouns });
        }
        self.implausible[verb * self.n_nouns + noun] = implausible;
        Ok(())
    }

    pub fn nonzero(&self) -> usize {
        self.implausible.iter().filter(|&&x| x).count()
    }

    /// Verbs `v` with `entry(v, noun) == 1`.
    pub fn implausible_verbs_for(&self, noun: usize) -> Vec<usize> {
        (0..self.n_verbs).filter(|&v| self.entry(v, noun) == 1).collect()
    }

    /// Nouns `n` with `entry(verb, n) == 1`.
    pub fn implausible_nouns_for(&self, verb: usize) -> Vec<usize> {
        (0..self.n_nouns).filter(|&n| self.entry(verb, n) == 1).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# verbnoun-constraints")?;
        writeln!(out, "verbs {} nouns {} entries {}", self.n_verbs, self.n_nouns, self.nonzero())?;
        for v in 0..self.n_verbs {
            for n in 0..self.n_nouns {
                if self.entry(v, n) == 1 {
                    writeln!(out, "{v} {n} 1")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairOrder {
    Before,
    After,
    Mixed,
}

/// Per-sequence observations for every unordered co-occurring type pair
/// `(lo, hi)`, `lo < hi`.
fn pair_orders(seq: &ActionSequence, n_nouns: usize) -> Vec<((usize, usize), PairOrder)> {
    let mut span: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (pos, a) in seq.actions.iter().enumerate() {
        span.entry(a.type_index(n_nouns))
            .and_modify(|s| s.1 = pos)
            .or_insert((pos, pos));
    }
    let types: Vec<(usize, (usize, usize))> = span.into_iter().collect();
    let mut out = Vec::with_capacity(types.len() * types.len().saturating_sub(1) / 2);
    for (k, &(lo, (lo_first, lo_last))) in types.iter().enumerate() {
        for &(hi, (hi_first, hi_last)) in &types[k + 1..] {
            let order = if lo_last < hi_first {
                PairOrder::Before
            } else if hi_last < lo_first {
                PairOrder::After
            } else {
                PairOrder::Mixed
            };
            out.push(((lo, hi), order));
        }
    }
    out
}

/// Mine the temporal precedence matrix. A pair is constrained only when it
/// co-occurs in at least `min_support` sequences and every occurrence of one
/// type precedes every occurrence of the other in all of them.
pub fn mine_temporal(corpus: &Corpus, min_support: usize) -> Result<TemporalConstraintMatrix> {
    if min_support == 0 {
        return Err(Error::invalid("min_support must be >= 1"));
    }
    let n_nouns = corpus.n_nouns();
    let per_seq = par::map(&corpus.sequences, |s| pair_orders(s, n_nouns));

    // (support, all_before, all_after)
    let mut tally: BTreeMap<(usize, usize), (usize, bool, bool)> = BTreeMap::new();
    for orders in per_seq {
        for (pair, order) in orders {
            let t = tally.entry(pair).or_insert((0, true, true));
            t.0 += 1;
            t.1 &= order == PairOrder::Before;
            t.2 &= order == PairOrder::After;
        }
    }

    let mut m = TemporalConstraintMatrix::empty(corpus.n_verbs(), n_nouns, min_support);
    for ((lo, hi), (support, all_before, all_after)) in tally {
        if support < min_support {
            continue;
        }
        if all_before {
            m.insert_before(lo, hi, support)?;
        } else if all_after {
            m.insert_before(hi, lo, support)?;
        }
    }
    Ok(m)
}

/// Flag every `(verb, noun)` combination that never occurs as an action.
pub fn mine_verb_noun(corpus: &Corpus) -> VerbNounConstraintMatrix {
    let observed: BTreeSet<Action> =
        corpus.sequences.iter().flat_map(|s| s.actions.iter().copied()).collect();
    let (nv, nn) = (corpus.n_verbs(), corpus.n_nouns());
    VerbNounConstraintMatrix {
        n_verbs: nv,
        n_nouns: nn,
        implausible: (0..nv * nn).map(|t| !observed.contains(&Action::from_type_index(t, nn))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ViolationReport {
    /// Position pairs `(i, j)`, `i < j`, whose order contradicts a constraint.
    pub temporal_violations: Vec<(usize, usize)>,
    /// Positions holding an implausible verb-noun combination.
    pub verbnoun_violations: Vec<usize>,
    pub constraints_checked: usize,
    pub constraints_followed: usize,
}

impl ViolationReport {
    pub fn violations(&self) -> usize {
        self.temporal_violations.len() + self.verbnoun_violations.len()
    }
}

fn check_matrix_shapes(temp: &TemporalConstraintMatrix, act: &VerbNounConstraintMatrix) -> Result<()> {
    if temp.n_verbs != act.n_verbs || temp.n_nouns != act.n_nouns {
        return Err(Error::dim(format!(
            "temporal matrix is {}x{} but verb-noun matrix is {}x{}",
            temp.n_verbs, temp.n_nouns, act.n_verbs, act.n_nouns
        )));
    }
    Ok(())
}

/// Score `seq` against both constraint families.
pub fn check_sequence(
    seq: &ActionSequence,
    temp: &TemporalConstraintMatrix,
    act: &VerbNounConstraintMatrix,
) -> Result<ViolationReport> {
    check_matrix_shapes(temp, act)?;
    for a in &seq.actions {
        if a.verb >= act.n_verbs {
            return Err(Error::OutOfRange { index: a.verb, size: act.n_verbs });
        }
        if a.noun >= act.n_nouns {
            return Err(Error::OutOfRange { index: a.noun, size: act.n_nouns });
        }
    }

    let mut report = ViolationReport::default();
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            match temp.action_entry(seq.actions[i], seq.actions[j]) {
                0 => {}
                -1 => {
                    report.constraints_checked += 1;
                    report.temporal_violations.push((i, j));
                }
                _ => report.constraints_checked += 1,
            }
        }
    }
    for (pos, &a) in seq.actions.iter().enumerate() {
        report.constraints_checked += 1;
        if act.is_implausible(a) {
            report.verbnoun_violations.push(pos);
        }
    }
    report.constraints_followed = report.constraints_checked - report.violations();
    Ok(report)
}

/// Mean constraints followed and checked per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Compliance {
    pub avg_followed: f64,
    pub avg_checked: f64,
}

impl Compliance {
    pub fn from_reports(reports: &[ViolationReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("compliance over an empty set of sequences"));
        }
        let n = reports.len() as f64;
        Ok(Compliance {
            avg_followed: reports.iter().map(|r| r.constraints_followed as f64).sum::<f64>() / n,
            avg_checked: reports.iter().map(|r| r.constraints_checked as f64).sum::<f64>() / n,
        })
    }

    /// Fraction of checked constraints that were followed (1 when nothing
    /// was checked).
    pub fn followed_fraction(&self) -> f64 {
        if self.avg_checked == 0.0 {
            1.0
        } else {
            self.avg_followed / self.avg_checked
        }
    }
}

pub fn compliance_rate(
    sequences: &[ActionSequence],
    temp: &TemporalConstraintMatrix,
    act: &VerbNounConstraintMatrix,
) -> Result<Compliance> {
    let reports = par::map(sequences, |s| check_sequence(s, temp, act))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Compliance::from_reports(&reports)
}

/// Both mined relations, as stored together on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSet {
    pub temporal: TemporalConstraintMatrix,
    pub verb_noun: VerbNounConstraintMatrix,
}

impl ConstraintSet {
    pub fn mine(corpus: &Corpus, min_support: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot mine constraints from an empty corpus"));
        }
        Ok(ConstraintSet {
            temporal: mine_temporal(corpus, min_support)?,
            verb_noun: mine_verb_noun(corpus),
        })
    }

    pub fn check(&self, seq: &ActionSequence) -> Result<ViolationReport> {
        check_sequence(seq, &self.temporal, &self.verb_noun)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        self.temporal.write(&mut out)?;
        self.verb_noun.write(&mut out)
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ASCII output")
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse { line: 0, message: format!("unexpected end of input, expected {what}") }),
            }
        };

        expect_line(next("temporal section")?, "# temporal-constraints")?;
        let (ln, header) = next("temporal header")?;
        let h = header_fields(ln, &header, &["verbs", "nouns", "min_support", "entries"])?;
        let mut temporal = TemporalConstraintMatrix::empty(h[0], h[1], h[2]);
        let mut raw = BTreeMap::new();
        for _ in 0..h[3] {
            let (ln, line) = next("temporal entry")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = match f.as_slice() {
                [i, j, v, s] => (|| Some((i.parse().ok()?, j.parse().ok()?, v.parse::<i8>().ok()?, s.parse().ok()?)))(),
                _ => None,
            };
            let (i, j, v, s): (usize, usize, i8, usize) =
                parsed.ok_or_else(|| Error::Parse { line: ln, message: format!("bad temporal entry {line:?}") })?;
            if v != 1 && v != -1 {
                return Err(Error::Parse { line: ln, message: format!("temporal value {v} not in {{-1, 1}}") });
            }
            raw.insert((i, j), (v, s, ln));
        }
        for (&(i, j), &(v, s, ln)) in &raw {
            match raw.get(&(j, i)) {
                Some(&(w, t, _)) if w == -v && t == s => {}
                _ => {
                    return Err(Error::Parse { line: ln, message: format!("entry ({i}, {j}) lacks an antisymmetric partner") })
                }
            }
            if s < temporal.min_support {
                return Err(Error::Parse { line: ln, message: format!("support {s} below min_support") });
            }
            if v == 1 {
                temporal.insert_before(i, j, s).map_err(|e| Error::Parse { line: ln, message: e.to_string() })?;
            }
        }

        expect_line(next("verb-noun section")?, "# verbnoun-constraints")?;
        let (ln, header) = next("verb-noun header")?;
        let h = header_fields(ln, &header, &["verbs", "nouns", "entries"])?;
        let mut verb_noun = VerbNounConstraintMatrix::permissive(h[0], h[1]);
        for _ in 0..h[2] {
            let (ln, line) = next("verb-noun entry")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = match f.as_slice() {
                [v, n, "1"] => (|| Some((v.parse().ok()?, n.parse().ok()?)))(),
                _ => None,
            };
            let (v, n): (usize, usize) =
                parsed.ok_or_else(|| Error::Parse { line: ln, message: format!("bad verb-noun entry {line:?}") })?;
            verb_noun.set(v, n, true).map_err(|e| Error::Parse { line: ln, message: e.to_string() })?;
        }
        let set = ConstraintSet { temporal, verb_noun };
        check_matrix_shapes(&set.temporal, &set.verb_noun)?;
        Ok(set)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }
}

fn expect_line((ln, line): (usize, String), expected: &str) -> Result<()> {
    if line.trim() != expected {
        return Err(Error::Parse { line: ln, message: format!("expected {expected:?}, found {line:?}") });
    }
    Ok(())
}

fn header_fields(ln: usize, line: &str, keys: &[&str]) -> Result<Vec<usize>> {
    let f: Vec<&str> = line.split_whitespace().collect();
    let bad = || Error::Parse { line: ln, message: format!("bad header {line:?}") };
    if f.len() != keys.len() * 2 {
        return Err(bad());
    }
    keys.iter()
        .enumerate()
        .map(|(k, key)| {
            if f[2 * k] != *key {
                return Err(bad());
            }
            f[2 * k + 1].parse().map_err(|_| bad())
        })
        .collect()
}
