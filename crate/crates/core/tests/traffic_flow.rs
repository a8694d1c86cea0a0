use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use redlight_core::signal::Phase;
use redlight_core::traffic_flow::{
    critical_density, equilibrium_speed, interpolate_speed, step, Boundary, CellGrid, FlowParams,
};

fn params() -> FlowParams {
    FlowParams::default()
}

#[test]
fn congested_branch_value() {
    let p = params();
    assert_abs_diff_eq!(p.equilibrium_speed(100.0), 3.042, epsilon = 1e-12);
    assert_eq!(p.equilibrium_speed(0.0), 24.6);
    assert_eq!(p.equilibrium_speed(130.0), 0.0);
}

#[test]
fn critical_density_values() {
    assert_abs_diff_eq!(params().critical_density(), 37.944_732_297_063_9, epsilon = 1e-9);
    assert_abs_diff_eq!(critical_density(130.0, 12.0, 12.0), 65.0, epsilon = 1e-12);
    assert_abs_diff_eq!(critical_density(130.0, 24.6, 1e12), 130.0, epsilon = 1e-6);
}

#[test]
fn diagram_is_continuous_at_critical_density() {
    let p = params();
    let rc = p.critical_density();
    let above = equilibrium_speed(rc * (1.0 + 1e-12), 130.0, 24.6, 10.14);
    assert_abs_diff_eq!(above, 24.6, epsilon = 1e-9);
}

// Values evaluated by hand from the discretised update with the default
// constants: cells (30 veh/km, 20 m/s) and (60 veh/km, 8 m/s) on a ring.
#[test]
fn two_cell_ring_one_step() {
    let grid = CellGrid {
        densities: vec![30.0, 60.0],
        speeds: vec![20.0, 8.0],
        origin: 0.0,
        signal_cell: None,
        boundary: Boundary::Periodic,
    };
    let out = step(&grid, Phase::Green, &params(), None).unwrap();
    assert_abs_diff_eq!(out.grid.densities[0], 29.4, epsilon = 1e-12);
    assert_abs_diff_eq!(out.grid.densities[1], 60.6, epsilon = 1e-12);
    assert_abs_diff_eq!(out.grid.speeds[0], 19.080_005_999_800_008, epsilon = 1e-12);
    assert_abs_diff_eq!(out.grid.speeds[1], 8.952_998_500_024_998, epsilon = 1e-12);
    assert_eq!(out.clamp_events, 0);
}

#[test]
fn red_zeroes_signal_cell_on_any_grid() {
    let mut grid = CellGrid::uniform(6, 25.0, 20.0, -100.0, Boundary::open());
    grid.signal_cell = Some(5);
    grid.speeds = vec![3.0, 9.0, 14.0, 20.0, 24.0, 17.0];
    let out = step(&grid, Phase::Red, &params(), None).unwrap();
    assert_eq!(out.grid.speeds[5], 0.0);
    let green = step(&grid, Phase::Green, &params(), None).unwrap();
    assert!(green.grid.speeds[5] > 0.0);
}

#[test]
fn interpolation_example() {
    let mut grid = CellGrid::uniform(4, 20.0, 0.0, 0.0, Boundary::open());
    grid.speeds = vec![5.0, 12.0, 18.0, 7.0];
    assert_abs_diff_eq!(interpolate_speed(&grid, 27.0, 20.0).unwrap(), 14.1, epsilon = 1e-12);
    assert_eq!(interpolate_speed(&grid, 40.0, 20.0).unwrap(), 18.0);
    assert!(interpolate_speed(&grid, -1.0, 20.0).is_err());
    assert!(interpolate_speed(&grid, 81.0, 20.0).is_err());
}

#[test]
fn midpoint_interpolation() {
    let mut grid = CellGrid::uniform(2, 20.0, 0.0, 0.0, Boundary::open());
    grid.speeds = vec![10.0, 20.0];
    assert_abs_diff_eq!(interpolate_speed(&grid, 10.0, 20.0).unwrap(), 15.0, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn uniform_equilibrium_is_a_fixed_point(rho in 0.0f64..130.0, n in 2usize..40) {
        let p = params();
        let grid = CellGrid::uniform(n, rho, p.equilibrium_speed(rho), 0.0, Boundary::Periodic);
        let out = step(&grid, Phase::Green, &p, None).unwrap();
        for j in 0..n {
            prop_assert!((out.grid.densities[j] - rho).abs() <= 1e-12);
            prop_assert!((out.grid.speeds[j] - grid.speeds[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn outputs_stay_in_physical_bounds(
        rho in proptest::collection::vec(0.0f64..130.0, 8),
        v in proptest::collection::vec(0.0f64..24.6, 8),
        red in any::<bool>(),
    ) {
        let p = params();
        let grid = CellGrid { densities: rho, speeds: v, origin: 0.0, signal_cell: Some(3), boundary: Boundary::open() };
        let phase = if red { Phase::Red } else { Phase::Green };
        let out = step(&grid, phase, &p, None).unwrap();
        for j in 0..8 {
            prop_assert!((0.0..=p.jam_density).contains(&out.grid.densities[j]));
            prop_assert!((0.0..=p.max_speed).contains(&out.grid.speeds[j]));
        }
    }

    #[test]
    fn interpolation_is_linear_between_nodes(
        v in proptest::collection::vec(0.0f64..30.0, 5),
        j in 0usize..4,
        alpha in 0.0f64..1.0,
    ) {
        let mut grid = CellGrid::uniform(5, 20.0, 0.0, -50.0, Boundary::open());
        grid.speeds = v.clone();
        let x = -50.0 + (j as f64 + alpha) * 20.0;
        let got = interpolate_speed(&grid, x, 20.0).unwrap();
        prop_assert!((got - (alpha * v[j + 1] + (1.0 - alpha) * v[j])).abs() <= 1e-12);
    }
}

#[test]
fn ring_mass_is_conserved_over_ten_thousand_steps() {
    let p = params();
    let n = 25;
    let mut grid = CellGrid::uniform(n, 0.0, 0.0, 0.0, Boundary::Periodic);
    for j in 0..n {
        let s = j as f64 / n as f64 * std::f64::consts::TAU;
        grid.densities[j] = 30.0 + 12.0 * s.sin();
        grid.speeds[j] = p.equilibrium_speed(grid.densities[j]) * (0.9 + 0.05 * s.cos());
    }
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let before = grid.mass(p.cell_length);
        let out = step(&grid, Phase::Green, &p, None).unwrap();
        assert_eq!(out.clamp_events, 0);
        let after = out.grid.mass(p.cell_length);
        worst = worst.max((after - before).abs() / before);
        grid = out.grid;
    }
    assert!(worst <= 1e-9, "worst per-step relative drift {worst}");
}
