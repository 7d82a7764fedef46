//! Benchmarks for the per-step hot paths of both racing stacks: GP fitting
//! and prediction, leave-one-out data selection, exploration target ranking,
//! the ADMM QP solver on an MPC-sized problem, and one full tracking MPC step.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racer_core::dataselect::loo_variances;
use racer_core::explore::{select_target, CandidateGrid};
use racer_core::gp::{fit, GpDataset, KernelSpec, Observation};
use racer_core::solver::{solve_qp, QpProblem, QpSettings};
use racer_core::timetrial::{mpc_step, Reference, TrackingMpcConfig};
use racer_core::track::TrackSegment;
use racer_core::{Track, VehicleParams, VehicleState};

fn random_dataset(n: usize, n_z: usize, seed: u64) -> GpDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = GpDataset::new(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..n_z).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = vec![
            (z[0] * 1.3).sin() + 0.05 * rng.gen_range(-1.0..1.0),
            (z[1] * 0.7).cos() + 0.05 * rng.gen_range(-1.0..1.0),
        ];
        ds.push(Observation::new(z, y));
    }
    ds
}

fn bench_gp(c: &mut Criterion) {
    let ds = random_dataset(150, 3, 1);
    let kernel = KernelSpec::squared_exponential(1.0, vec![1.0, 1.2, 0.8]);
    let noise = [1e-3, 2e-3];

    c.bench_function("gp_fit_150x3", |b| {
        b.iter(|| fit(black_box(&ds), &kernel, &noise).unwrap())
    });

    let model = fit(&ds, &kernel, &noise).unwrap();
    let query = [0.3, -0.7, 1.1];
    c.bench_function("gp_predict_150x3", |b| b.iter(|| model.predict(black_box(&query))));
    c.bench_function("loo_variances_150x3", |b| b.iter(|| loo_variances(black_box(&model))));
}

fn bench_explore(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 5;
    let n = 3125;
    let grid = CandidateGrid {
        candidates: (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect(),
        scales: vec![1.0; dim],
        variances: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let z_plan: Vec<f64> = vec![0.0; dim];
    c.bench_function("select_target_3125", |b| {
        b.iter(|| select_target(black_box(&z_plan), &grid, 0.7, false))
    });
}

fn bench_qp(c: &mut Criterion) {
    // MPC-sized strictly convex box QP: 120 variables, banded coupling
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 120;
    let mut h = nalgebra_identity(n);
    for i in 0..n {
        h[(i, i)] = rng.gen_range(1.0..5.0);
        if i + 1 < n {
            let v = rng.gen_range(-0.5..0.5);
            h[(i, i + 1)] = v;
            h[(i + 1, i)] = v;
        }
    }
    let g = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let lo = vec![-1.0; n];
    let up = vec![1.0; n];
    let mut p = QpProblem::new(h, g);
    p.add_box(0, &lo, &up);
    let settings = QpSettings::default();
    c.bench_function("solve_qp_120_box", |b| b.iter(|| solve_qp(black_box(&p), &settings)));
}

fn nalgebra_identity(n: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::identity(n, n)
}

fn bench_mpc(c: &mut Criterion) {
    let track = Track::new(
        vec![
            TrackSegment::straight(60.0),
            TrackSegment::arc(std::f64::consts::PI * 20.0, 0.05),
            TrackSegment::straight(60.0),
            TrackSegment::arc(std::f64::consts::PI * 20.0, 0.05),
        ],
        3.0,
        -3.0,
        true,
    )
    .unwrap();
    let params = VehicleParams::default();
    let cfg = TrackingMpcConfig::default();
    let xi = VehicleState { v_x: 8.0, v_y: 0.0, psi_dot: 0.0, e_psi: 0.0, e_y: 0.2, s: 10.0 };
    let reference = Reference {
        states: (0..cfg.n_horizon)
            .map(|k| VehicleState {
                v_x: 8.0,
                v_y: 0.0,
                psi_dot: 0.0,
                e_psi: 0.0,
                e_y: 0.0,
                s: xi.s + 8.0 * cfg.period * (k + 1) as f64,
            })
            .collect(),
        deltas: vec![0.0; cfg.n_horizon],
    };
    c.bench_function("tracking_mpc_step", |b| {
        b.iter(|| mpc_step(black_box(&xi), &reference, None, None, 0.0, &track, &params, &cfg))
    });
}

criterion_group!(benches, bench_gp, bench_explore, bench_qp, bench_mpc);
criterion_main!(benches);
