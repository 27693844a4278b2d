use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qbstick::components::{derive_data_dependent_hyper, GammaUpdate, ModelKind};
use qbstick::eppf::{log_eppf_qb, Partition};
use qbstick::experiments::{generate_dataset, Scenario};
use qbstick::numerics::log_reg_inc_beta;
use qbstick::sampler::{mh_swap, update_assignments, update_components, update_sticks_qb, ChainState};
use qbstick::{Prior, QbParams, RandomSource};

fn incomplete_beta(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_reg_inc_beta");
    for eps in [1e-12, 1e-4, 0.3] {
        group.bench_with_input(BenchmarkId::from_parameter(eps), &eps, |b, &eps| {
            b.iter(|| log_reg_inc_beta(black_box(eps), black_box(250.0), black_box(31.0)).unwrap())
        });
    }
    group.finish();
}

fn eppf(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_eppf_qb");
    for sizes in [vec![3, 2, 1], vec![40, 30, 20, 5, 3, 2], vec![9, 8, 7, 6, 5, 4, 3, 2]] {
        let part = Partition::new(sizes).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(part.t()), &part, |b, part| {
            b.iter(|| log_eppf_qb(black_box(part), 0.9, 1.0, 1e-4).unwrap())
        });
    }
    group.finish();
}

fn gibbs_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("gibbs_sweep");
    group.sample_size(20);
    for n in [200, 1000] {
        let data = generate_dataset(Scenario::Gauss1d, n, 1).unwrap().data;
        let params = QbParams::with_sample_size_epsilon(0.9, 1.0, n, 50).unwrap();
        let prior = Prior::Qb(params);
        let hyper = derive_data_dependent_hyper(ModelKind::Gaussian, &data).unwrap();
        let mut rng = RandomSource::new(7, 0);
        let mut state = ChainState::from_prior(&prior, hyper, n, &mut rng).unwrap();
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| {
                update_assignments(&mut state, &data, &mut rng).unwrap();
                update_sticks_qb(&mut state, &params, &mut rng).unwrap();
                update_components(&mut state, &data, GammaUpdate::All, &mut rng).unwrap();
                mh_swap(&mut state, &prior, &mut rng)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, incomplete_beta, eppf, gibbs_sweep);
criterion_main!(benches);
