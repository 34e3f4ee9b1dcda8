use super::*;
use crate::devices::{
    AgcParams, GflParams, GfmParams, GovernorMode, GovernorParams, IdealSlackParams, MachineParams,
    RlcLoadParams,
};
use crate::net::{Branch, Bus, Network};
use nalgebra::DVector;

fn bus(id: usize) -> Bus {
    Bus { id, v_mag: 1.0, theta: 0.0, base_kv: 230.0 }
}

fn line(from: usize, to: usize) -> Branch {
    Branch { from_bus: from, to_bus: to, r: 0.01, x: 0.1, b_sh: 0.02, tap: 1.0 }
}

fn net2() -> Network {
    Network::new(vec![bus(1), bus(2)], vec![line(1, 2)], 100.0, 60.0).unwrap()
}

fn net3() -> Network {
    Network::new(
        vec![bus(1), bus(2), bus(3)],
        vec![line(1, 2), line(2, 3), line(1, 3)],
        100.0,
        60.0,
    )
    .unwrap()
}

fn machine(id: &str, b: usize, gov: Option<GovernorParams>) -> Device {
    Device::Machine(
        MachineDevice::new(
            id,
            b,
            MachineParams { m: 10.0, d: 2.0, tau_e_max: 2.0, tau_m0: 0.8, omega_n: 1.0 },
            gov,
            1.02,
            2.0 * std::f64::consts::PI * 60.0,
        )
        .unwrap(),
    )
}

fn droop_gov() -> GovernorParams {
    GovernorParams { r: 0.05, t: 0.5, mode: GovernorMode::Droop, tau_m_ref: 0.8, agc_share: 1.0 }
}

fn gfm(id: &str, b: usize, variant: GfmVariant) -> Device {
    Device::Gfm(
        GfmDevice::new(
            id,
            b,
            GfmParams {
                variant,
                d_alpha: 1.0,
                h_alpha: 0.5,
                m_alpha: if variant == GfmVariant::Vsm { 4.0 } else { 0.0 },
                p_ref: 0.4,
                g_dc: 0.01,
                c_dc: 0.2,
                r_f: 0.01,
                t_dc: 0.05,
                r_dc: 0.05,
                i_dc0: 0.0,
                v_dc_ref: 1.2,
            },
            1.01,
            2.0 * std::f64::consts::PI * 60.0,
            1.0,
        )
        .unwrap(),
    )
}

fn gfl(id: &str, b: usize, p0: f64, droop: bool) -> Device {
    Device::Gfl(
        GflDevice::new(
            id,
            b,
            GflParams {
                kp_pll: 2.0,
                ki_pll: 20.0,
                r_f: 0.01,
                l_f: 0.002,
                c_f: 0.001,
                g_dc: 0.01,
                c_dc: 0.2,
                t_dc: 0.05,
                r_dc: 0.05,
                i_dc0: 0.0,
                p0,
                q0: 0.1,
                v_dc_ref: 1.2,
                k_vdc: 25.0,
                droop,
            },
            2.0 * std::f64::consts::PI * 60.0,
            1.0,
        )
        .unwrap(),
    )
}

fn rlc(id: &str, b: usize) -> Device {
    let w = 2.0 * std::f64::consts::PI * 60.0;
    // z = 1.6 + j(1.2 - 0.4): consumes ~0.5 pu at v = 1
    Device::RlcLoad(
        RlcLoadDevice::new(id, b, RlcLoadParams { r: 1.6, l: 1.2 / w, c: 1.0 / (0.4 * w) }, w)
            .unwrap(),
    )
}

fn slack_dev(id: &str, b: usize, mode: IdealSlackMode) -> Device {
    Device::IdealSlack(
        IdealSlackDevice::new(
            id,
            b,
            IdealSlackParams { mode, k: 1.0, h: 0.1, t: 0.5, theta_ref: 0.0, p0: 0.2 },
            1.0,
        )
        .unwrap(),
    )
}

fn fd_check(model: &SystemModel, state: &SystemState, dt: f64) {
    let nx = model.n_x();
    let dim = nx + model.n_y();
    let x_old = state.x.clone();
    let xd_old = model.derivs(&state.x, &state.y, &state.frozen);
    // evaluate slightly off the equilibrium so no partial is trivially zero
    let mut x = state.x.clone();
    let mut y = state.y.clone();
    for k in 0..nx {
        x[k] += 1e-3 * ((k + 1) as f64 * 0.7).sin();
    }
    for k in 0..model.n_y() {
        y[k] += 1e-3 * ((k + 3) as f64 * 1.3).sin();
    }
    let ja = model.step_jacobian(&x, &y, dt, &state.frozen);
    let h = 1e-6;
    let eval = |x: &DVector<f64>, y: &DVector<f64>| {
        model.step_residual(x, y, &x_old, &xd_old, dt, &state.frozen)
    };
    for col in 0..dim {
        let (mut xp, mut yp) = (x.clone(), y.clone());
        let (mut xm, mut ym) = (x.clone(), y.clone());
        if col < nx {
            xp[col] += h;
            xm[col] -= h;
        } else {
            yp[col - nx] += h;
            ym[col - nx] -= h;
        }
        let fd = (eval(&xp, &yp) - eval(&xm, &ym)) / (2.0 * h);
        for row in 0..dim {
            let a = ja[(row, col)];
            let f = fd[row];
            assert!(
                (a - f).abs() <= 5e-5 * a.abs().max(1.0),
                "jacobian mismatch at ({row},{col}): analytic {a}, fd {f}"
            );
        }
    }
}

#[test]
fn jacobian_matches_finite_differences_mixed_system() {
    let mut model = SystemModel::build(
        net3(),
        vec![
            machine("m1", 1, Some(droop_gov())),
            Device::Agc(AgcDevice::new("agc", AgcParams { k_o: 5.0, xi0: 0.0 }, 1.0).unwrap()),
            gfm("f1", 2, GfmVariant::Droop),
            gfl("l1", 3, 0.3, true),
            rlc("r1", 3),
        ],
        vec![
            StaticLoad { bus: 2, p: 0.5, q: 0.2, scale: 1.0 },
            StaticLoad { bus: 3, p: 0.4, q: 0.1, scale: 1.0 },
        ],
    )
    .unwrap();
    let (state, _) = model.initialize(&SlackSpec::single(1)).unwrap();
    fd_check(&model, &state, 0.01);
}

#[test]
fn jacobian_matches_finite_differences_vsm_and_ideal_slack() {
    let mut model = SystemModel::build(
        net2(),
        vec![slack_dev("s1", 1, IdealSlackMode::Droop), gfm("v1", 2, GfmVariant::Vsm)],
        vec![StaticLoad { bus: 2, p: 0.6, q: 0.2, scale: 1.0 }],
    )
    .unwrap();
    let (state, _) = model.initialize(&SlackSpec::single(1)).unwrap();
    fd_check(&model, &state, 0.01);
}

fn smib() -> (SystemModel, SystemState) {
    let mut model = SystemModel::build(
        net2(),
        vec![machine("m1", 1, None), slack_dev("s1", 2, IdealSlackMode::Integrator)],
        vec![StaticLoad { bus: 2, p: 0.9, q: 0.3, scale: 1.0 }],
    )
    .unwrap();
    let (state, _) = model.initialize(&SlackSpec::single(2)).unwrap();
    (model, state)
}

#[test]
fn equilibrium_is_preserved() {
    let (mut model, state) = smib();
    let scenario =
        Scenario { name: "hold".into(), t_end: 1.0, dt: 0.01, events: vec![] };
    let result = model.run(&state, &scenario).unwrap();
    assert!(matches!(result.outcome, RunOutcome::Completed));
    let tr = &result.trajectory;
    let first = tr.row(0).to_vec();
    let last = tr.row(tr.len() - 1);
    for (k, (a, b)) in first.iter().zip(last.iter()).enumerate() {
        assert!(
            (a - b).abs() < 1e-7,
            "channel {} drifted: {} -> {}",
            tr.names()[k],
            a,
            b
        );
    }
}

#[test]
fn trapezoidal_convergence_is_second_order() {
    // torque step away from equilibrium, integrated at three resolutions
    let run_with = |dt: f64| -> f64 {
        let (mut model, state) = smib();
        model
            .apply_event(&EventAction::SetParam {
                device: "m1".into(),
                param: "tau_m0".into(),
                value: 0.95,
            })
            .unwrap();
        let scenario = Scenario { name: "step".into(), t_end: 1.0, dt, events: vec![] };
        let result = model.run(&state, &scenario).unwrap();
        assert!(matches!(result.outcome, RunOutcome::Completed));
        result.trajectory.last("devm1.omega").unwrap()
    };
    let reference = run_with(0.000625);
    let e1 = (run_with(0.02) - reference).abs();
    let e2 = (run_with(0.01) - reference).abs();
    let order = (e1 / e2).log2();
    assert!(
        (1.7..=2.3).contains(&order),
        "observed order {order} (errors {e1:.3e}, {e2:.3e})"
    );
}

#[test]
fn load_step_settles_under_primary_frequency_control() {
    let mut model = SystemModel::build(
        net2(),
        vec![machine("m1", 1, Some(droop_gov()))],
        vec![StaticLoad { bus: 2, p: 0.5, q: 0.2, scale: 1.0 }],
    )
    .unwrap();
    let (state, _) = model.initialize(&SlackSpec::single(1)).unwrap();
    let scenario = Scenario {
        name: "load-step".into(),
        t_end: 20.0,
        dt: 0.01,
        events: vec![Event { t: 0.2, action: EventAction::ScaleLoad { bus: 2, factor: 1.3 } }],
    };
    let result = model.run(&state, &scenario).unwrap();
    assert!(matches!(result.outcome, RunOutcome::Completed));
    let tr = &result.trajectory;
    let omega_end = tr.last("devm1.omega").unwrap();
    // more load on a droop governor leaves the island under-frequency
    assert!(omega_end < 1.0 - 1e-5, "omega_end = {omega_end}");
    assert!(omega_end > 0.99, "omega_end = {omega_end}");
    let settle = detect_steady_state(tr, &model.state_channel_names(), 1e-4, 2.0);
    assert!(settle.is_some());
    assert!(settle.unwrap() < 15.0);
    // power balance holds at every sample to the Newton tolerance
    let p_m = tr.column("devm1.p").unwrap();
    let theta1 = tr.column("bus1.theta").unwrap();
    assert!(p_m.last().unwrap() > &0.6);
    assert!(theta1.iter().all(|v| v.is_finite()));
}

#[test]
fn power_balance_holds_after_events() {
    let mut model = SystemModel::build(
        net2(),
        vec![machine("m1", 1, Some(droop_gov()))],
        vec![StaticLoad { bus: 2, p: 0.5, q: 0.2, scale: 1.0 }],
    )
    .unwrap();
    let (mut state, _) = model.initialize(&SlackSpec::single(1)).unwrap();
    assert!(model.power_balance_max(&state) < 1e-8);
    model.apply_event(&EventAction::ScaleLoad { bus: 2, factor: 1.3 }).unwrap();
    model.solve_algebraic(&mut state).unwrap();
    assert!(model.power_balance_max(&state) < 1e-8);
    for _ in 0..50 {
        model.step(&mut state, 0.01).unwrap();
        assert!(model.power_balance_max(&state) < 1e-7);
    }
}

#[test]
fn overload_of_fixed_injection_converters_diverges() {
    let mut model = SystemModel::build(
        net2(),
        vec![gfl("l1", 1, 0.7, false)],
        vec![StaticLoad { bus: 2, p: 0.65, q: 0.1, scale: 1.0 }],
    )
    .unwrap();
    let (state, _) = model.initialize(&SlackSpec::single(1)).unwrap();
    let scenario = Scenario {
        name: "overload".into(),
        t_end: 2.0,
        dt: 0.01,
        events: vec![Event { t: 0.1, action: EventAction::ScaleLoad { bus: 2, factor: 3.0 } }],
    };
    let result = model.run(&state, &scenario).unwrap();
    match result.outcome {
        RunOutcome::Diverged(f) => {
            assert!(f.t >= 0.1 - 1e-9 && f.t < 0.5, "failed at t = {}", f.t);
            assert!(!f.worst_buses.is_empty());
            // partial trajectory covers the pre-event window
            assert!(result.trajectory.len() >= 10);
        }
        RunOutcome::Completed => panic!("expected divergence"),
    }
}

#[test]
fn benign_event_on_gfl_only_island_survives_gauge_freedom() {
    let mut model = SystemModel::build(
        net2(),
        vec![gfl("l1", 1, 0.7, true)],
        vec![StaticLoad { bus: 2, p: 0.65, q: 0.1, scale: 1.0 }],
    )
    .unwrap();
    let (state, _) = model.initialize(&SlackSpec::single(1)).unwrap();
    // a tiny rescale stays feasible once the dc link adjusts; the implicit
    // step after the event must absorb the discontinuity despite the
    // rotational gauge freedom of the frozen algebraic problem
    let scenario = Scenario {
        name: "nudge".into(),
        t_end: 1.0,
        dt: 0.01,
        events: vec![Event { t: 0.1, action: EventAction::ScaleLoad { bus: 2, factor: 1.01 } }],
    };
    let result = model.run(&state, &scenario).unwrap();
    assert!(matches!(result.outcome, RunOutcome::Completed));
    let tr = &result.trajectory;
    let v_dc_end = tr.last("devl1.v_dc").unwrap();
    assert!(v_dc_end.is_finite() && v_dc_end > 1.0);
}

#[test]
fn two_integral_governors_are_rejected() {
    let ig = GovernorParams {
        r: 0.05,
        t: 0.5,
        mode: GovernorMode::Integral,
        tau_m_ref: 0.4,
        agc_share: 0.0,
    };
    let err = SystemModel::build(
        net2(),
        vec![machine("m1", 1, Some(ig)), machine("m2", 2, Some(ig))],
        vec![],
    )
    .unwrap_err();
    assert!(matches!(err, DynError::Config(_)), "got {err:?}");
    assert!(err.to_string().contains("integral governor"));
}

#[test]
fn channel_names_cover_buses_devices_and_coi() {
    let (model, state) = {
        let mut model = SystemModel::build(
            net2(),
            vec![machine("m1", 1, None), slack_dev("s1", 2, IdealSlackMode::Integrator)],
            vec![StaticLoad { bus: 2, p: 0.9, q: 0.3, scale: 1.0 }],
        )
        .unwrap();
        let (state, _) = model.initialize(&SlackSpec::single(2)).unwrap();
        (model, state)
    };
    let names = model.channel_names();
    for expect in [
        "bus1.v",
        "bus1.theta",
        "bus2.v",
        "bus2.theta",
        "devm1.delta",
        "devm1.omega",
        "devm1.ps",
        "devm1.pt",
        "devm1.p",
        "devs1.sigma_hat",
        "omega_coi",
    ] {
        assert!(names.iter().any(|n| n == expect), "missing channel {expect}");
    }
    let row = model.record_row(&state);
    assert_eq!(row.len(), names.len());
    // decomposition identity for the machine at the recorded point
    let idx = |n: &str| names.iter().position(|x| x == n).unwrap();
    let p = row[idx("devm1.p")];
    let ps = row[idx("devm1.ps")];
    let pt = row[idx("devm1.pt")];
    assert!((p - (ps + pt)).abs() < 1e-12);
}

#[test]
fn initialization_matches_static_power_flow() {
    let (mut model, state) = smib();
    // omega_s starts nominal and the slack integrator is at rest
    assert!((state.y[state.y.len() - 1] - 1.0).abs() < 1e-12);
    let xd = model.derivs(&state.x, &state.y, &state.frozen);
    assert!(xd.amax() < 1e-9);
    let scenario = Scenario { name: "hold".into(), t_end: 0.1, dt: 0.01, events: vec![] };
    let r = model.run(&state, &scenario).unwrap();
    assert!(matches!(r.outcome, RunOutcome::Completed));
}
