use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ei_core::linsys::{assemble_stage_n, assemble_stage_u, evaluate_dataset, Assembly};
use ei_core::polarize::{polarize_stage_n, Problem};
use ei_core::trainer::{extrema_census, CensusGrid, ExtremumTolerances};
use ei_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCHEDULES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn sample_cloud(rng: &mut ChaCha8Rng, m: usize, count: usize, classes: usize) -> Dataset {
    Dataset::from_pairs((0..count).map(|i| {
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, i % classes + 1)
    }))
    .unwrap()
}

fn stage_n_search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = NetSpec::new(2, vec![16, 2]).unwrap();
    let w = WeightSet::random(&spec, &mut rng);
    // One bias-free hidden layer gives z(x) + z(-x) = 2 z(0), so labels
    // (1, 2, 1) at -x, 0, x are unreachable and every draw runs.
    let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = Dataset::from_pairs(vec![
        (x.iter().map(|v| -v).collect(), 1),
        (vec![0.0, 0.0], 2),
        (x.clone(), 1),
    ])
    .unwrap();
    let mode = TerminationMode::default();
    let (traces, jacs) = evaluate_dataset(&spec, &w, &data, Execution::Sequential).unwrap();
    let sys = assemble_stage_n(&data, &traces, &jacs, &spec, Execution::Sequential).unwrap();
    let basis = sys.solve_block(linsys::DEFAULT_RANK_TOL).unwrap();
    let problem = Problem {
        spec: &spec,
        weights: &w,
        dataset: &data,
        mode: &mode,
    };
    let budget = SearchBudget {
        draws: 512,
        climb_steps: 20,
        ..SearchBudget::default()
    };
    let mut group = c.benchmark_group("stage_n_search");
    group.sample_size(10);
    for exec in SCHEDULES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| polarize_stage_n(&problem, &basis, &traces, &budget, exec).unwrap())
        });
    }
    group.finish();
}

fn assembly(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = NetSpec::new(3, vec![8, 6, 3]).unwrap();
    let w = WeightSet::random(&spec, &mut rng);
    let data = sample_cloud(&mut rng, 3, 200, 3);
    let (traces, jacs) = evaluate_dataset(&spec, &w, &data, Execution::Sequential).unwrap();
    let mut group = c.benchmark_group("stage_1_assembly");
    for exec in SCHEDULES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| assemble_stage_u(1, &data, &traces, &jacs, &spec, Assembly::CCorrected, exec).unwrap())
        });
    }
    group.finish();
}

fn census(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = NetSpec::new(2, vec![8, 1]).unwrap();
    let w = WeightSet::random(&spec, &mut rng);
    let grid = CensusGrid::cube(2, -2.0, 2.0, 120);
    let tol = ExtremumTolerances::default();
    let mut group = c.benchmark_group("census_120x120");
    group.sample_size(10);
    for exec in SCHEDULES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| extrema_census(&spec, &w, 1, &grid, None, &tol, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stage_n_search, assembly, census);
criterion_main!(benches);
