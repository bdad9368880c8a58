use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use plausible::constraints::ConstraintSet;
use plausible::corpus::{window_examples, AnticipationWindow};
use plausible::counterfactual::build_cf_dataset;
use plausible::metrics::{damerau_levenshtein, evaluate, EditDistanceVariant, EvalOptions};
use plausible::synth::{synth_corpus, SynthSpec};
use plausible::toymodel::{Decode, ModelParams};
use plausible::{par, rng};
use rand::SeedableRng;

/// Runs `f` once on a single-thread pool and once on the default pool.
fn both_pools(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let mut g = c.benchmark_group(group);
    for (name, pool) in [("1-thread", &single), ("default", &default)] {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(&f)));
    }
    g.finish();
}

fn benches(c: &mut Criterion) {
    let (corpus, _) = synth_corpus(&SynthSpec::default(), 1).unwrap();
    let window = AnticipationWindow::new(2, 0, 6).unwrap();
    let examples = window_examples(&corpus, window).examples;
    let set = ConstraintSet::mine(&corpus, 1).unwrap();

    let words: Vec<Vec<u8>> = (0..400u32).map(|i| (0..24).map(|j| ((i * 7 + j * 13) % 5) as u8).collect()).collect();
    both_pools(c, "damerau_levenshtein_batch", || {
        let d = par::map(&words, |a| words.iter().take(50).map(|b| damerau_levenshtein(a, b)).sum::<usize>());
        std::hint::black_box(d);
    });
    both_pools(c, "mine_constraints", || {
        std::hint::black_box(ConstraintSet::mine(&corpus, 1).unwrap());
    });
    both_pools(c, "counterfactual_dataset", || {
        std::hint::black_box(build_cf_dataset(&examples, &set.temporal, &set.verb_noun, 3, 0.5).unwrap());
    });

    let params = ModelParams::random(12, 12, 16, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let opts = EvalOptions {
        horizon: 6,
        k: 5,
        decode: Decode::Greedy,
        variant: EditDistanceVariant::Unrestricted,
        seed: rng::derive_seed(0, "bench", 0),
    };
    both_pools(c, "evaluate", || {
        std::hint::black_box(evaluate(&params, &examples[..400], &set, opts).unwrap());
    });
}

criterion_group!(name = parallel; config = Criterion::default().sample_size(10); targets = benches);
criterion_main!(parallel);
