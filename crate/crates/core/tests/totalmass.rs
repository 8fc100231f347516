use srflab::stats::Estimate;
use srflab::totalmass::{
    classify_boundary, hitting_cdf, laplace_oracle, simulate_coupled, simulate_mass,
    simulate_mass_with, BoundaryClass, MassSdeConfig, SimOptions,
};

#[test]
fn laplace_transform_matches_fine_step_monte_carlo() {
    let cfg = MassSdeConfig::phi(1.0, 0.0, 1.0)
        .unwrap()
        .with_time(1e-5, 0.1)
        .unwrap();
    let ens = simulate_mass(&cfg, 100_000, 13).unwrap();
    let finals = ens.final_values();
    for u in [0.5, 1.0, 2.0, 5.0] {
        let vals: Vec<f64> = finals.iter().map(|a| (-u * a).exp()).collect();
        let est = Estimate::of_mean(&vals);
        let oracle = laplace_oracle(&cfg, u, 0.1).unwrap();
        assert!(est.within(oracle, 3.0), "u = {u}: {est:?} vs {oracle}");
    }
}

#[test]
fn small_noise_paths_follow_exponential_decay() {
    let cfg = MassSdeConfig::phi(1e-3, 1.0, 1.0)
        .unwrap()
        .with_time(1e-3, 1.0)
        .unwrap();
    let ens = simulate_mass(&cfg, 200, 2).unwrap();
    let target = (-2.0f64).exp();
    assert!(ens.final_values().iter().all(|a| (a - target).abs() < 5e-3));
}

#[test]
fn paths_are_nonnegative_and_absorbed_at_zero() {
    let cfg = MassSdeConfig::phi(1.5, 0.5, 0.3)
        .unwrap()
        .with_time(1e-3, 3.0)
        .unwrap();
    let ens = simulate_mass(&cfg, 2000, 8).unwrap();
    assert!(ens.paths.iter().all(|p| p.min >= 0.0));
    for p in &ens.paths {
        if p.hit_time.is_some() {
            assert_eq!(p.final_value, 0.0);
        }
    }
    let f = ens.hit_fraction();
    let p = hitting_cdf(&cfg, 3.0).unwrap();
    assert!(
        (f - p).abs() <= 3.0 * (p * (1.0 - p) / 2000.0).sqrt(),
        "{f} vs {p}"
    );
}

#[test]
fn absorbed_fraction_grows_with_the_horizon() {
    let times = [0.5, 1.0, 2.0, 4.0];
    let cfg = MassSdeConfig::phi(1.0, 1.0, 1.0)
        .unwrap()
        .with_time(1e-3, 4.0)
        .unwrap();
    let opts = SimOptions {
        record_times: times.to_vec(),
        ..SimOptions::default()
    };
    let ens = simulate_mass_with(&cfg, 4000, 4, &opts).unwrap();
    let fracs: Vec<f64> = (0..times.len())
        .map(|k| ens.samples_at(k).iter().filter(|&&a| a == 0.0).count() as f64 / 4000.0)
        .collect();
    assert!(fracs.windows(2).all(|w| w[0] <= w[1]), "{fracs:?}");
    assert!(fracs[3] > 0.95, "{fracs:?}");
}

#[test]
fn continuable_class_hits_zero_and_entrance_class_never_does() {
    let mk = |alpha_bar: f64| {
        MassSdeConfig::x(1.0, 0.0, 0.2)
            .unwrap()
            .with_insertions(alpha_bar, 0.0)
            .unwrap()
            .with_time(1e-3, 2.0)
            .unwrap()
    };
    let cont = mk(0.5);
    assert_eq!(classify_boundary(&cont), BoundaryClass::HitsZeroContinuable);
    assert!(simulate_mass(&cont, 2000, 1).unwrap().hit_fraction() > 0.0);
    let never = mk(1.5);
    assert_eq!(classify_boundary(&never), BoundaryClass::NeverHitsZero);
    assert_eq!(simulate_mass(&never, 2000, 1).unwrap().hit_fraction(), 0.0);
    assert!(laplace_oracle(&cont, 1.0, 1.0).is_err());
}

#[test]
fn coupled_runs_share_the_driving_noise() {
    let a = MassSdeConfig::phi(1.0, 0.5, 1.0)
        .unwrap()
        .with_time(1e-3, 1.0)
        .unwrap();
    let b = MassSdeConfig::phi(1.0, 0.6, 1.0)
        .unwrap()
        .with_time(1e-3, 1.0)
        .unwrap();
    let opts = SimOptions {
        record_times: vec![0.5, 1.0],
        ..SimOptions::default()
    };
    let (ea, ea2) = simulate_coupled(&a, &a, 100, 3, &opts).unwrap();
    assert_eq!(ea.final_values(), ea2.final_values());
    let (ea, eb) = simulate_coupled(&a, &b, 100, 3, &opts).unwrap();
    // More killing never leaves more mass on a shared path.
    for (pa, pb) in ea.paths.iter().zip(&eb.paths) {
        assert!(pb.samples[0] <= pa.samples[0] + 1e-12);
    }
    let c = MassSdeConfig::phi(1.0, 0.5, 1.0)
        .unwrap()
        .with_time(2e-3, 1.0)
        .unwrap();
    assert!(simulate_coupled(&a, &c, 10, 3, &opts).is_err());
}
