use flockyap::dynamics::{integrate, IntegrateOptions};
use flockyap::graph::{Convention, Laplacian, WeightMatrix};
use flockyap::kernel::Kernel;
use flockyap::schedule::WeightSchedule;
use flockyap::state::{from_rows, EnsembleState};
use proptest::prelude::*;

fn weights(n: usize) -> impl Strategy<Value = WeightMatrix> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], n * (n - 1) / 2).prop_map(move |w| {
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j, w[k]));
                k += 1;
            }
        }
        WeightMatrix::from_edges(n, &edges).unwrap()
    })
}

fn schedule(n: usize) -> impl Strategy<Value = WeightSchedule> {
    prop::collection::vec(weights(n), 1..4).prop_map(|slots| WeightSchedule::periodic(0.25, slots).unwrap())
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0..2.0f64, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn first_order_invariants(s in schedule(4), x in rows(4, 2)) {
        let init = EnsembleState::first_order(from_rows(&x).unwrap()).unwrap();
        let traj = integrate(&init, &s, &Kernel::constant(1.0).unwrap(), 2.0, IntegrateOptions::default()).unwrap();
        let scale = 1.0 + traj.stats[0].x;
        for m in &traj.monitors {
            prop_assert!(m.mean_drift <= 1e-12 * scale);
            prop_assert!(m.x_monotone_residual <= 1e-12 * scale);
        }
    }

    #[test]
    fn second_order_invariants(s in schedule(3), x in rows(3, 2), v in rows(3, 2), beta in 0.0..0.5f64) {
        let init = EnsembleState::second_order(from_rows(&x).unwrap(), from_rows(&v).unwrap()).unwrap();
        let kernel = Kernel::power_law(1.0, 1.0, beta).unwrap();
        let traj = integrate(&init, &s, &kernel, 2.0, IntegrateOptions::default()).unwrap();
        let scale = 1.0 + traj.stats[0].v + traj.stats[0].x;
        for m in &traj.monitors {
            prop_assert!(m.velocity_drift <= 1e-12 * scale);
            prop_assert!(m.mean_drift <= 1e-11 * scale);
            prop_assert!(m.v_monotone_residual <= 1e-12 * scale);
        }
    }

    #[test]
    fn laplacian_spectrum(w in weights(5)) {
        let l = Laplacian::from_weights(&w);
        let spec = l.spectrum(Convention::Normalized);
        prop_assert!(spec[0].abs() < 1e-12);
        prop_assert!(spec.windows(2).all(|p| p[0] <= p[1] + 1e-14));
        let un = l.algebraic_connectivity(Convention::Unnormalized);
        prop_assert!((un - 5.0 * l.algebraic_connectivity(Convention::Normalized)).abs() < 1e-10);
        // the spectral norm never exceeds twice the largest weighted degree
        let deg = (0..5).map(|i| (0..5).map(|j| w.get(i, j)).sum::<f64>()).fold(0.0, f64::max);
        prop_assert!(spec[4] <= 2.0 * deg / 5.0 + 1e-12);
    }

    #[test]
    fn window_average_is_linear(s in schedule(3), t in 0.0..3.0f64, tau in 0.1..2.0f64) {
        let avg = s.window_average(t, tau).unwrap();
        let n = 400;
        let h = tau / n as f64;
        let mut acc = nalgebra::DMatrix::<f64>::zeros(3, 3);
        for k in 0..n {
            acc += s.sample(t + (k as f64 + 0.5) * h).unwrap().matrix() * (h / tau);
        }
        // midpoint sampling misses at most one breakpoint-straddling cell per switch
        let switches = (tau / 0.25).ceil() + 1.0;
        prop_assert!((avg.matrix() - acc).amax() <= switches * h / tau + 1e-12);
    }
}
