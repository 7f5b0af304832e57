use proptest::prelude::*;
use siw_core::dataset::{enumerate_geometries, ParameterGrid};
use siw_core::eval::{trend_check, Parameter, TrendVerdict};
use siw_core::wave::{
    abcd_to_s, abcd_to_s22, cascade_at, find_resonances, simulate, simulate_with, CascadeOptions, FrequencyGrid,
    Geometry, SubstrateSpec,
};

const GOLDEN: &str = include_str!("data/reference_spectrum.csv");
const GOLDEN_RESONANCES: &str = include_str!("data/reference_resonances.txt");

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn reference_spectrum_matches_golden_file() {
    let s = simulate(
        &SubstrateSpec::default(),
        &Geometry::reference(),
        &FrequencyGrid::default(),
    )
    .unwrap();
    let rows: Vec<Vec<f64>> = GOLDEN
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 1001);
    for (i, row) in rows.iter().enumerate() {
        assert!(rel_close(row[0], s.grid.frequency(i), 1e-9));
        // The golden file carries 12 significant digits.
        assert!(
            rel_close(row[1], s.s11_mag[i], 1e-9),
            "s11 at {i}: {} vs {}",
            row[1],
            s.s11_mag[i]
        );
        assert!(
            rel_close(row[2], s.s21_mag[i], 1e-9),
            "s21 at {i}: {} vs {}",
            row[2],
            s.s21_mag[i]
        );
    }
}

#[test]
fn reference_resonances_match_golden_file() {
    let s = simulate(
        &SubstrateSpec::default(),
        &Geometry::reference(),
        &FrequencyGrid::default(),
    )
    .unwrap();
    let expected: Vec<f64> = GOLDEN_RESONANCES.lines().map(|l| l.trim().parse().unwrap()).collect();
    let found = find_resonances(&s);
    assert_eq!(found.len(), expected.len());
    for (a, b) in found.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn d1_and_d2_sweeps_lower_the_first_resonance() {
    let spec = SubstrateSpec::default();
    let grid = FrequencyGrid::default();
    let base = Geometry::reference();
    let opts = CascadeOptions::default();
    let d1 = trend_check(&spec, &base, Parameter::D1, &[4.5, 5.5, 6.5], &grid, &opts).unwrap();
    assert_eq!(
        d1.verdict,
        TrendVerdict::StrictlyDecreasing,
        "{:?}",
        d1.lowest_resonance_ghz
    );
    let d2 = trend_check(&spec, &base, Parameter::D2, &[7.0, 8.0, 9.0], &grid, &opts).unwrap();
    assert_eq!(
        d2.verdict,
        TrendVerdict::StrictlyDecreasing,
        "{:?}",
        d2.lowest_resonance_ghz
    );
}

#[test]
fn g_sweep_is_flat() {
    let spec = SubstrateSpec::default();
    let grid = FrequencyGrid::default();
    let base = Geometry::reference();
    let pinned = CascadeOptions {
        end_length_override_mm: Some(2.0),
        ..CascadeOptions::default()
    };
    for opts in [pinned, CascadeOptions::default()] {
        let r = trend_check(&spec, &base, Parameter::G, &[26.0, 30.0, 34.0], &grid, &opts).unwrap();
        assert_eq!(r.verdict, TrendVerdict::Flat);
    }
}

#[test]
fn relaxed_mode_still_rejects_unbuildable_geometry() {
    let relaxed = CascadeOptions {
        relax_g_constraint: true,
        ..CascadeOptions::default()
    };
    let spec = SubstrateSpec::default();
    let grid = FrequencyGrid::default();
    let tie = Geometry {
        d1: 6.5,
        ..Geometry::reference()
    };
    assert!(simulate(&spec, &tie, &grid).is_err());
    assert!(simulate_with(&spec, &tie, &grid, &relaxed).is_ok());
    let crowded = Geometry {
        d1: 10.0,
        d2: 10.0,
        ..Geometry::reference()
    };
    assert!(simulate_with(&spec, &crowded, &grid, &relaxed).is_err());
}

fn any_grid_geometry() -> impl Strategy<Value = Geometry> {
    let all = enumerate_geometries(&ParameterGrid::default()).unwrap();
    (0..all.len()).prop_map(move |i| all[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lossless_cascade_is_unitary(g in any_grid_geometry()) {
        let s = simulate(&SubstrateSpec::default(), &g, &FrequencyGrid::default()).unwrap();
        prop_assert!(s.max_unitarity_error() < 1e-9);
        prop_assert!(s.s11_mag.iter().chain(&s.s21_mag).all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn palindromic_cascade_is_reciprocal_and_symmetric(g in any_grid_geometry(), f in 9.0f64..20.0) {
        let m = cascade_at(&SubstrateSpec::default(), &g, f, &CascadeOptions::default()).unwrap();
        let det = m.determinant();
        prop_assert!((det.re - 1.0).abs() < 1e-9 && det.im.abs() < 1e-9);
        let (s11, _) = abcd_to_s(&m).unwrap();
        let s22 = abcd_to_s22(&m).unwrap();
        prop_assert!((s11 - s22).norm() < 1e-9);
        let (r11, r21) = abcd_to_s(&m.reversed()).unwrap();
        let (_, s21) = abcd_to_s(&m).unwrap();
        prop_assert!((r21 - s21).norm() < 1e-9);
        prop_assert!((r11.norm() - s11.norm()).abs() < 1e-9);
    }

    #[test]
    fn end_sections_only_shift_phase(g in any_grid_geometry(), l in 0.1f64..5.0) {
        let spec = SubstrateSpec::default();
        let grid = FrequencyGrid::new(9.0, 20.0, 101).unwrap();
        let a = simulate(&spec, &g, &grid).unwrap();
        let opts = CascadeOptions { end_length_override_mm: Some(l), ..CascadeOptions::default() };
        let b = simulate_with(&spec, &g, &grid, &opts).unwrap();
        for i in 0..grid.n_points {
            prop_assert!((a.s21_mag[i] - b.s21_mag[i]).abs() < 1e-9);
        }
    }
}
