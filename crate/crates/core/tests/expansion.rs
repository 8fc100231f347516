use srflab::ensemble::map_replicas;
use srflab::expansion::{coupled_error_study, solve_phi0, solve_phi1, ExpansionConfig, Forcing};
use srflab::gff::mode_coefficients;
use srflab::lattice::{grad_inner, ScalarField, TorusGeometry};
use srflab::stats::Estimate;

#[test]
fn constant_data_with_killing_decreases_linearly() {
    let g = TorusGeometry::square(16).unwrap();
    let cfg = ExpansionConfig {
        order: 0,
        ..ExpansionConfig::new(0.7, 1e-3, 0.2, 0.25)
    };
    let traj = solve_phi0(&ScalarField::constant(g.clone(), 0.4), &cfg).unwrap();
    for (k, f) in traj.iter().enumerate() {
        let want = 0.4 - 0.7 * k as f64 * 1e-3;
        assert!((f.mean() - want).abs() < 1e-12);
        assert!(f.zero_mean_part().max_abs() < 1e-12);
    }
}

#[test]
fn ricci_flow_energy_is_nonincreasing_and_decays() {
    let g = TorusGeometry::square(32).unwrap();
    let phi = ScalarField::mode(g.clone(), 2, 1, 0.0).scaled(0.3);
    let cfg = ExpansionConfig {
        order: 0,
        ..ExpansionConfig::new(0.0, 1e-3, 0.05, 1.0 / 16.0)
    };
    let energy: Vec<f64> = solve_phi0(&phi, &cfg)
        .unwrap()
        .iter()
        .map(|f| grad_inner(f, f).unwrap())
        .collect();
    assert!(energy.windows(2).all(|w| w[1] <= w[0]));
    assert!(energy.last().unwrap() < &(0.1 * energy[0]));
}

#[test]
fn linearization_around_flat_data_is_the_unit_stochastic_heat_equation() {
    let g = TorusGeometry::square(32).unwrap();
    let dt = 1e-3;
    let cfg = ExpansionConfig::new(0.0, dt, 0.15, 1.0 / 8.0);
    let zero = ScalarField::zero(g.clone());
    let phi0 = solve_phi0(&zero, &cfg).unwrap();
    let modes = [
        g.mode_index(1, 0),
        g.mode_index(0, 1),
        g.mode_index(1, 1),
        g.mode_index(2, 1),
    ];
    let power: Vec<Vec<f64>> = map_replicas(800, |r| {
        let traj = solve_phi1(
            &phi0,
            &zero,
            &cfg,
            Forcing::Stream {
                seed: 12,
                replica: r as u64,
            },
        )
        .unwrap();
        let c = mode_coefficients(traj.last().unwrap());
        modes.iter().map(|&k| c[k].norm_sqr()).collect()
    });
    for (j, &k) in modes.iter().enumerate() {
        let lam = g.eigenvalues()[k];
        let discrete = 1.0 / (lam * (2.0 + lam * dt));
        let est = Estimate::of_mean(&power.iter().map(|p| p[j]).collect::<Vec<_>>());
        assert!(est.within(discrete, 3.5), "mode {k}: {est:?} vs {discrete}");
        assert!((est.value * 2.0 * lam - 1.0).abs() < 0.2);
    }
}

#[test]
fn expansion_error_grows_faster_than_quadratically() {
    let g = TorusGeometry::square(16).unwrap();
    let phi = ScalarField::mode(g.clone(), 1, 0, 0.0).scaled(0.3);
    let cfg = ExpansionConfig::new(0.5, 1e-3, 0.05, 0.25);
    let st = coupled_error_study(&phi, &cfg, &[0.05, 0.1, 0.2], 40, 4).unwrap();
    assert!(st.errors.windows(2).all(|w| w[0].value < w[1].value));
    assert!(st.slope > 3.0, "slope {}", st.slope);
}
