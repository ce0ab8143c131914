use proptest::prelude::*;
use vaopf::matpower::{parse_matpower, serialize_matpower};
use vaopf::montecarlo::{sample_omega, simulate, simulate_seeded, BLOCK_SIZE};
use vaopf::opf::*;
use vaopf::stochastic::*;
use vaopf::synthetic::{random_instance, random_participation, rng};

fn instance(seed: u64, n: usize, sources: usize) -> Instance {
    let s = random_instance(seed, n, sources);
    Instance::new(s.grid, s.stoch, s.pattern).expect("synthetic instances are valid")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Solver output is balanced exactly, not just to interior-point accuracy.
    #[test]
    fn safety_solution_is_balanced_and_compatible(seed in 0u64..10_000, n in 4usize..10) {
        let inst = instance(seed, n, 3);
        let sol = solve_safety_opf(&inst, &SafetyOptions::default(), &OpfOptions::default()).unwrap();
        let alpha = sol.alpha.as_ref().unwrap();
        for sum in alpha.column_sums() {
            prop_assert!((sum - 1.0).abs() < 1e-12, "column sum {}", sum);
        }
        prop_assert!(sol.s2.iter().all(|v| *v >= 0.0));
        let report = check_compatible(&inst, &sol.f_bar, alpha).unwrap();
        prop_assert!(report.compatible, "{:?}", report.violations);
    }

    #[test]
    fn lerp_stays_balanced(seed in any::<u64>(), n in 3usize..12, t in 0.0f64..=1.0) {
        let inst = random_instance(seed, n, 4);
        let mut r = rng(seed);
        let a0 = random_participation(&mut r, &inst.stoch, false);
        let a1 = random_participation(&mut r, &inst.stoch, true);
        for sum in a0.lerp(&a1, t).column_sums() {
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        let report = validate_participation(&a1, &PatternK::default());
        prop_assert!(report.ok, "{:?}", report.violations);
    }

    #[test]
    fn montecarlo_is_deterministic_per_seed(seed in any::<u64>(), n in 1usize..3000) {
        let inst = instance(seed % 1000, 6, 3);
        let sol = solve_dcopf(&inst, true, &OpfOptions::default()).unwrap();
        let mut sol = sol;
        sol.alpha = Some(ParticipationMatrix::uniform(&inst.stoch));
        let a = simulate_seeded(&inst, &sol, n, seed).unwrap();
        let b = simulate_seeded(&inst, &sol, n, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let batch = simulate(&inst, &sol, &sample_omega(&inst.stoch, n, seed)).unwrap();
        for (x, y) in a.lines.iter().zip(&batch.lines) {
            prop_assert!((x.mean - y.mean).abs() <= 1e-9 * x.mean.abs().max(1.0));
            prop_assert!(x.variance >= 0.0);
            prop_assert!((0.0..=1.0).contains(&x.violation_rate));
        }
        prop_assert!(a.max_imbalance < 1e-6);
    }

    #[test]
    fn matpower_round_trip(seed in any::<u64>(), n in 2usize..15) {
        let grid = random_instance(seed, n, 2).grid;
        let text = serialize_matpower(&grid, "roundtrip");
        let back = parse_matpower(&text).unwrap();
        prop_assert_eq!(back.n_buses(), grid.n_buses());
        prop_assert_eq!(back.n_lines(), grid.n_lines());
        prop_assert_eq!(serialize_matpower(&back, "roundtrip"), text);
    }
}

#[test]
fn stream_blocks_are_independent_of_batch_length() {
    let inst = instance(3, 6, 2);
    let short = sample_omega(&inst.stoch, BLOCK_SIZE, 11);
    let long = sample_omega(&inst.stoch, 3 * BLOCK_SIZE, 11);
    for i in 0..BLOCK_SIZE {
        for k in 0..inst.stoch.n_sources() {
            assert_eq!(short.omega[(i, k)], long.omega[(i, k)]);
        }
    }
}
