use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use powermin::inner::{self, solve_power_allocation, update_receivers};
use powermin::mse::{self, PowerProfile};
use powermin::outer::gradient_bundle;
use powermin::{project_per_user, solve_inner, ScenarioConfig};
use powermin_bench::{converged, equal_targets, problem, small_config};

fn inner_pieces(c: &mut Criterion) {
    for (name, config) in [("small", small_config(200)), ("reference", ScenarioConfig::reference())] {
        let problem = problem(&config);
        let rho = equal_targets(&config);
        let state = converged(&problem, &rho);
        let targets = state.targets();

        c.bench_function(&format!("{name}/precoder_update"), |b| {
            b.iter(|| {
                inner::update_precoders_per_sample(
                    &state.g_tilde,
                    &state.xi,
                    &problem.channels,
                    &problem.layout,
                    Some(&state.tau),
                )
                .unwrap()
            })
        });
        c.bench_function(&format!("{name}/receivers_and_powers"), |b| {
            b.iter(|| {
                let g = update_receivers(&state.moments, &PowerProfile::plain(&state.xi)).unwrap();
                solve_power_allocation(&g, &state.moments, black_box(&targets)).unwrap()
            })
        });
        c.bench_function(&format!("{name}/gradient"), |b| b.iter(|| gradient_bundle(&state).unwrap()));
        c.bench_function(&format!("{name}/mac_mmse"), |b| {
            b.iter(|| mse::mac_mmse(&state.g_tilde, &state.moments, black_box(&state.xi)).unwrap())
        });
    }
}

fn warm_inner_solve(c: &mut Criterion) {
    let config = small_config(50);
    let problem = problem(&config);
    let rho = equal_targets(&config);
    let state = converged(&problem, &rho);
    let moved = vec![rho[0] + 0.05, rho[1] - 0.05, rho[2] - 0.05, rho[3] + 0.05];
    let mut group = c.benchmark_group("small");
    group.sample_size(20);
    group.bench_function("warm_inner_solve", |b| {
        b.iter_batched(
            || state.clone(),
            |start| solve_inner(&moved, &problem, Some(&start), &Default::default()),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn projection(c: &mut Criterion) {
    let x = [5.0, 0.2, 0.2, -1.0, 3.3, 0.7];
    c.bench_function("projection/6", |b| b.iter(|| project_per_user(black_box(&x), 4.25)));
}

criterion_group!(benches, inner_pieces, warm_inner_solve, projection);
criterion_main!(benches);
