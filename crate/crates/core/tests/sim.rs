use approx::assert_abs_diff_eq;
use redlight_core::engine::{AdvisoryEngine, EngineConfig, EngineError, Observation};
use redlight_core::sim::{
    car_following_accel, observation, run_scenario, trace_to_csv, EngineKind, IdmParams, Leader, ScenarioConfig,
    ScenarioId, UnguidedBehavior, World, TRACE_HEADER,
};
use redlight_core::vehicle::VehicleState;

fn car(x: f64, v: f64) -> VehicleState {
    VehicleState { id: 1, position: x, speed: v, accel: 0.0, length: 5.0, connected: true, is_ego: false }
}

// Evaluated by hand from the car-following law with the default parameters.
#[test]
fn car_following_hand_values() {
    let p = IdmParams::default();
    let a = car_following_accel(&car(-20.0, 10.0), 24.6, Some(Leader { rear: 0.0, speed: 0.0 }), &p);
    assert_abs_diff_eq!(a, -2.250_875_200_717_706_6, epsilon = 1e-12);
    let a = car_following_accel(&car(-50.0, 20.0), 24.6, Some(Leader { rear: 0.0, speed: 15.0 }), &p);
    assert_abs_diff_eq!(a, 0.031_239_036_761_812_125, epsilon = 1e-12);
    assert_eq!(car_following_accel(&car(0.0, 0.0), 24.6, None, &p), 2.6);
    assert_eq!(car_following_accel(&car(1.0, 5.0), 24.6, Some(Leader::stop_bar(0.0)), &p), -8.0);
}

#[test]
fn runs_are_deterministic() {
    let cfg = ScenarioConfig::canonical(ScenarioId::PlatoonSplit).variant(17);
    let a = run_scenario(&cfg, EngineKind::Advisory).unwrap();
    let b = run_scenario(&cfg, EngineKind::Advisory).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn canonical_runs_are_physical() {
    for id in ScenarioId::ALL {
        let cfg = ScenarioConfig::canonical(id);
        for engine in EngineKind::ALL {
            let m = run_scenario(&cfg, engine).unwrap().metrics;
            assert_eq!(m.overlap_incidents, 0, "{} {}", id.as_str(), engine.as_str());
            assert_eq!(m.non_ego_red_violations, 0, "{} {}", id.as_str(), engine.as_str());
        }
    }
}

#[test]
fn non_ego_vehicles_stop_before_the_bar_on_red() {
    let cfg = ScenarioConfig::canonical(ScenarioId::PlatoonQueue);
    let mut world = World::from_config(&cfg);
    for _ in 0..100 {
        world.step(None, true);
        for (i, v) in world.vehicles.iter().enumerate() {
            if i != world.ego_index {
                assert!(v.position < 0.0, "t = {}", world.t);
            }
        }
    }
}

#[test]
fn queue_discharges_on_green_before_the_ego_crosses() {
    let out = run_scenario(&ScenarioConfig::canonical(ScenarioId::PlatoonQueue), EngineKind::Advisory).unwrap();
    let m = out.metrics;
    assert!(!m.red_violation);
    let crossed = m.crossing_time.expect("ego crosses within the run");
    assert!(crossed > 15.0);
    assert!(m.min_speed_after_green.unwrap() > 0.0);
}

#[test]
fn red_runner_violates_and_lawful_driver_does_not() {
    let base = ScenarioConfig::canonical(ScenarioId::SoloRed);
    let runner = ScenarioConfig { unguided_behavior: UnguidedBehavior::RedRunner, ..base.clone() };
    assert!(run_scenario(&runner, EngineKind::None).unwrap().metrics.red_violation);
    assert!(!run_scenario(&base, EngineKind::None).unwrap().metrics.red_violation);
}

#[test]
fn trace_csv_layout() {
    let out = run_scenario(&ScenarioConfig::canonical(ScenarioId::SoloRed), EngineKind::Baseline).unwrap();
    let csv = trace_to_csv(&out.trace);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    assert_eq!(lines.count(), out.trace.len());
    assert!(out.trace.iter().any(|r| r.baseline_flag));
}

#[test]
fn engine_cadence() {
    let cfg = ScenarioConfig::canonical(ScenarioId::SoloRed);
    let world = World::from_config(&cfg);
    let obs = observation(&world, &mut || 0.0);
    let mut engine = AdvisoryEngine::new(EngineConfig::default());
    for k in 0..10 {
        engine.on_tick(k as f64 * 0.1, &obs, &world.signal).unwrap();
    }
    assert_eq!(engine.prediction_refreshes, 5);
    assert_eq!(engine.advisory_refreshes, 1);
    assert!(engine.latest_outcome().is_some());
}

#[test]
fn old_prediction_is_rejected() {
    let cfg = ScenarioConfig::canonical(ScenarioId::SoloRed);
    let world = World::from_config(&cfg);
    let obs = observation(&world, &mut || 0.0);
    let mut engine = AdvisoryEngine::new(EngineConfig { prediction_every_ticks: 3, ..EngineConfig::default() });
    for k in 0..10 {
        engine.on_tick(k as f64 * 0.1, &obs, &world.signal).unwrap();
    }
    let err = engine.on_tick(5.0, &obs, &world.signal).unwrap_err();
    assert!(matches!(err, EngineError::StalePrediction { .. }));
}

#[test]
fn empty_observation_skips_work() {
    let cfg = ScenarioConfig::canonical(ScenarioId::SoloRed);
    let world = World::from_config(&cfg);
    let mut engine = AdvisoryEngine::new(EngineConfig::default());
    engine.on_tick(0.0, &Observation::default(), &world.signal).unwrap();
    assert!(engine.latest_outcome().is_none());
    assert_eq!(engine.latest_warning().u, 0.0);
}
