use criterion::{black_box, criterion_group, criterion_main, Criterion};

use evoloop::blame::OracleBlamer;
use evoloop::engine::{run_generations, NullSink, RunConfig};
use evoloop::env::ScriptedEnvironment;
use evoloop::mutation::OracleMutator;
use evoloop::prompts::default_seed_genome;
use evoloop::rollout::ScriptedRuntime;
use evoloop::testkit::convergence_suite;

fn bench_episode(c: &mut Criterion) {
    let suite = convergence_suite();
    let task = &suite.train[5];
    let env = ScriptedEnvironment::with_stage_tools();
    let genome = default_seed_genome();
    c.bench_function("scripted_episode", |b| {
        b.iter(|| {
            black_box(evoloop::execute_episode(
                black_box(&genome),
                black_box(task),
                &env,
                &ScriptedRuntime,
            ))
        })
    });
}

fn bench_fingerprint(c: &mut Criterion) {
    let genome = default_seed_genome();
    c.bench_function("genome_fingerprint", |b| {
        b.iter(|| black_box(genome.fingerprint()))
    });
}

fn bench_full_run(c: &mut Criterion) {
    let suite = convergence_suite();
    let env = ScriptedEnvironment::with_stage_tools();
    let config = RunConfig {
        max_generations: 40,
        rng_seed: 0,
        ..RunConfig::default()
    };
    c.bench_function("evolve_40_generations_scripted", |b| {
        b.iter(|| {
            let mut blamer = OracleBlamer;
            let mut mutator = OracleMutator::new(suite.all_tasks().cloned());
            let mut sink = NullSink;
            black_box(
                run_generations(
                    &config,
                    &suite,
                    &env,
                    &ScriptedRuntime,
                    &mut blamer,
                    &mut mutator,
                    &mut sink,
                )
                .unwrap(),
            )
        })
    });
}

criterion_group!(benches, bench_episode, bench_fingerprint, bench_full_run);
criterion_main!(benches);
