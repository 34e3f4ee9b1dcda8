//! Newton power flow with a generalized slack formulation.
//!
//! All three slack modes share one set of equations: active power mismatch is
//! kept at every bus, the balancing power `k_h * sigma_hat` enters the
//! scheduled injections, and one extra scalar equation pins the rotational
//! degree of freedom. Single slack is the distributed form with a single
//! participant; the dynamic-equilibrium mode replaces the angle pin with the
//! steady state of the first-order droop slack, `K (theta_ref - theta_i) =
//! H * sigma_hat`, which leaves `theta_i != theta_ref` whenever `H != 0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::net::{build_admittance, AdmittanceMatrix, NetError, Network};

#[derive(Debug, Error)]
pub enum PfError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("no generator participates in the slack")]
    NoSlackParticipant,
    #[error("participation factors must sum to 1 (got {0})")]
    BadParticipationSum(f64),
    #[error("negative participation factor {k} at bus {bus} (enable allow_negative_participation)")]
    NegativeParticipation { bus: usize, k: f64 },
    #[error("participation references unknown bus {0}")]
    UnknownParticipant(usize),
    #[error("Newton did not converge in {max_iter} iterations (mismatch {mismatch:.3e})")]
    NonConvergence { max_iter: usize, mismatch: f64 },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("droop parameters required for DynamicEquilibrium mode")]
    MissingDroopParams,
}

/// Scheduled injection at one bus, in file order. Loads enter as negative
/// `p`/`q`. PV buses hold `v_set` with reactive power free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusSchedule {
    Pq { p: f64, q: f64 },
    Pv { p: f64, v_set: f64 },
}

impl BusSchedule {
    pub fn p(&self) -> f64 {
        match self {
            BusSchedule::Pq { p, .. } | BusSchedule::Pv { p, .. } => *p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlackMode {
    Single,
    Distributed,
    DynamicEquilibrium,
}

/// Steady-state parameters of the first-order droop slack
/// `T sigma' = K (theta_ref - theta_i) - H sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroopSlackParams {
    pub k: f64,
    pub h: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct SlackSpec {
    pub mode: SlackMode,
    pub reference_bus: usize,
    pub theta_ref: f64,
    /// bus id -> participation factor; Distributed mode only.
    pub participation: Vec<(usize, f64)>,
    pub droop_params: Option<DroopSlackParams>,
    pub allow_negative_participation: bool,
}

impl SlackSpec {
    pub fn single(reference_bus: usize) -> Self {
        SlackSpec {
            mode: SlackMode::Single,
            reference_bus,
            theta_ref: 0.0,
            participation: vec![],
            droop_params: None,
            allow_negative_participation: false,
        }
    }

    pub fn distributed(reference_bus: usize, participation: Vec<(usize, f64)>) -> Self {
        SlackSpec {
            mode: SlackMode::Distributed,
            reference_bus,
            theta_ref: 0.0,
            participation,
            droop_params: None,
            allow_negative_participation: false,
        }
    }

    pub fn dynamic_equilibrium(reference_bus: usize, droop: DroopSlackParams) -> Self {
        SlackSpec {
            mode: SlackMode::DynamicEquilibrium,
            reference_bus,
            theta_ref: 0.0,
            participation: vec![],
            droop_params: Some(droop),
        allow_negative_participation: false,
        }
    }

    /// Per-bus participation vector in file order.
    fn factors(&self, net: &Network) -> Result<Vec<f64>, PfError> {
        let n = net.n_buses();
        let mut k = vec![0.0; n];
        match self.mode {
            SlackMode::Single | SlackMode::DynamicEquilibrium => {
                let i = net
                    .index_of(self.reference_bus)
                    .ok_or(PfError::UnknownParticipant(self.reference_bus))?;
                k[i] = 1.0;
            }
            SlackMode::Distributed => {
                if self.participation.is_empty() {
                    return Err(PfError::NoSlackParticipant);
                }
                let mut sum = 0.0;
                for &(bus, kg) in &self.participation {
                    let i = net.index_of(bus).ok_or(PfError::UnknownParticipant(bus))?;
                    if kg < 0.0 && !self.allow_negative_participation {
                        return Err(PfError::NegativeParticipation { bus, k: kg });
                    }
                    k[i] += kg;
                    sum += kg;
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(PfError::BadParticipationSum(sum));
                }
            }
        }
        Ok(k)
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma_hat: f64,
    /// Net active injection per bus after slack allocation (file order).
    pub p_gen: Vec<f64>,
    /// Net reactive injection per bus (file order).
    pub q_gen: Vec<f64>,
    pub losses: f64,
    pub iterations: usize,
}

/// Full-Jacobian Newton power flow from a flat start.
pub fn solve_powerflow(
    net: &Network,
    schedule: &[BusSchedule],
    spec: &SlackSpec,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PfError> {
    let ybus = build_admittance(net)?;
    solve_powerflow_with(net, &ybus, schedule, spec, tol, max_iter)
}

pub fn solve_powerflow_with(
    net: &Network,
    ybus: &AdmittanceMatrix,
    schedule: &[BusSchedule],
    spec: &SlackSpec,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PfError> {
    let n = net.n_buses();
    assert_eq!(schedule.len(), n, "schedule length must match bus count");
    let k = spec.factors(net)?;
    let ref_idx = net
        .index_of(spec.reference_bus)
        .ok_or(PfError::UnknownParticipant(spec.reference_bus))?;
    let droop = match spec.mode {
        SlackMode::DynamicEquilibrium => Some(spec.droop_params.ok_or(PfError::MissingDroopParams)?),
        _ => spec.droop_params,
    };

    let pq: Vec<usize> = (0..n)
        .filter(|&i| matches!(schedule[i], BusSchedule::Pq { .. }))
        .collect();
    let npq = pq.len();
    // unknowns: theta (n), v at pq buses, sigma_hat
    let dim = n + npq + 1;

    let mut v = vec![1.0; n];
    let mut theta = vec![spec.theta_ref; n];
    for i in 0..n {
        if let BusSchedule::Pv { v_set, .. } = schedule[i] {
            v[i] = v_set;
        }
    }
    let mut sigma = 0.0;

    let mut iterations = 0;
    loop {
        let (p_calc, q_calc) = calc_injections(ybus, &v, &theta);
        let mut f = DVector::<f64>::zeros(dim);
        for i in 0..n {
            f[i] = p_calc[i] - schedule[i].p() - k[i] * sigma;
        }
        for (r, &i) in pq.iter().enumerate() {
            let qs = match schedule[i] {
                BusSchedule::Pq { q, .. } => q,
                _ => unreachable!(),
            };
            f[n + r] = q_calc[i] - qs;
        }
        f[dim - 1] = match spec.mode {
            SlackMode::DynamicEquilibrium => {
                let d = droop.unwrap();
                d.k * (spec.theta_ref - theta[ref_idx]) - d.h * sigma
            }
            _ => theta[ref_idx] - spec.theta_ref,
        };

        let mismatch = f.amax();
        if mismatch < tol {
            let p_gen: Vec<f64> = (0..n).map(|i| schedule[i].p() + k[i] * sigma).collect();
            let losses: f64 = p_calc.iter().sum();
            return Ok(PowerFlowSolution {
                v,
                theta,
                sigma_hat: sigma,
                p_gen,
                q_gen: q_calc,
                losses,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(PfError::NonConvergence { max_iter, mismatch });
        }

        let jac = jacobian(ybus, &v, &theta, &p_calc, &q_calc, &pq, &k, ref_idx, spec, droop);
        let lu = jac.lu();
        let dx = lu
            .solve(&(-f))
            .ok_or(PfError::SingularJacobian(iterations))?;
        for i in 0..n {
            theta[i] += dx[i];
        }
        for (r, &i) in pq.iter().enumerate() {
            v[i] += dx[n + r];
        }
        sigma += dx[dim - 1];
        iterations += 1;
    }
}

fn calc_injections(ybus: &AdmittanceMatrix, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = ybus.dim();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (pi, qi) = crate::net::injection_at_index(ybus, v, theta, i);
        p[i] = pi;
        q[i] = qi;
    }
    (p, q)
}

#[allow(clippy::too_many_arguments)]
fn jacobian(
    ybus: &AdmittanceMatrix,
    v: &[f64],
    theta: &[f64],
    p_calc: &[f64],
    q_calc: &[f64],
    pq: &[usize],
    k: &[f64],
    ref_idx: usize,
    spec: &SlackSpec,
    droop: Option<DroopSlackParams>,
) -> DMatrix<f64> {
    let n = ybus.dim();
    let npq = pq.len();
    let dim = n + npq + 1;
    let mut j = DMatrix::<f64>::zeros(dim, dim);
    let col_of_v = |i: usize| pq.iter().position(|&b| b == i).map(|r| n + r);

    for i in 0..n {
        for jj in 0..n {
            let y = ybus.get(i, jj);
            let (g, b) = (y.re, y.im);
            if i == jj {
                j[(i, i)] = -q_calc[i] - b * v[i] * v[i];
                if let Some(c) = col_of_v(i) {
                    j[(i, c)] = p_calc[i] / v[i] + g * v[i];
                }
            } else {
                let dth = theta[i] - theta[jj];
                let (s, c) = dth.sin_cos();
                j[(i, jj)] = v[i] * v[jj] * (g * s - b * c);
                if let Some(cv) = col_of_v(jj) {
                    j[(i, cv)] = v[i] * (g * c + b * s);
                }
            }
        }
        // sigma column for P rows
        j[(i, dim - 1)] = -k[i];
    }
    for (r, &i) in pq.iter().enumerate() {
        let row = n + r;
        for jj in 0..n {
            let y = ybus.get(i, jj);
            let (g, b) = (y.re, y.im);
            if i == jj {
                j[(row, i)] = p_calc[i] - g * v[i] * v[i];
                if let Some(cv) = col_of_v(i) {
                    j[(row, cv)] = q_calc[i] / v[i] - b * v[i];
                }
            } else {
                let dth = theta[i] - theta[jj];
                let (s, c) = dth.sin_cos();
                j[(row, jj)] = -v[i] * v[jj] * (g * c + b * s);
                if let Some(cv) = col_of_v(jj) {
                    j[(row, cv)] = v[i] * (g * s - b * c);
                }
            }
        }
    }
    // reference row
    let last = dim - 1;
    match spec.mode {
        SlackMode::DynamicEquilibrium => {
            let d = droop.unwrap();
            j[(last, ref_idx)] = -d.k;
            j[(last, last)] = -d.h;
        }
        _ => {
            j[(last, ref_idx)] = 1.0;
        }
    }
    j
}

/// Active power flow leaving `from` into each branch, in branch order.
pub fn branch_flows(net: &Network, sol: &PowerFlowSolution) -> Vec<f64> {
    net.branches()
        .iter()
        .map(|br| {
            let f = net.index_of(br.from_bus).unwrap();
            let t = net.index_of(br.to_bus).unwrap();
            let ys = br.series_admittance();
            let (g, b) = (ys.re, ys.im);
            let a = if br.tap == 0.0 { 1.0 } else { br.tap };
            let vf = sol.v[f] / a;
            let vt = sol.v[t];
            let dth = sol.theta[f] - sol.theta[t];
            let (s, c) = dth.sin_cos();
            vf * vf * g - vf * vt * (g * c + b * s)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AngleOffsetReport {
    /// theta_i of the droop solution minus theta_ref.
    pub theta_offset: f64,
    /// Predicted offset -(H/K) * sigma_hat.
    pub predicted_offset: f64,
    pub max_angle_diff_error: f64,
    pub max_flow_error: f64,
    pub sigma_hat_droop: f64,
    pub sigma_hat_single: f64,
    pub consistent: bool,
}

/// Confirms that a droop slack (H != 0) shifts absolute angles but leaves all
/// angle differences and branch flows identical to the single-slack solution.
pub fn verify_angle_offset_invariance(
    net: &Network,
    schedule: &[BusSchedule],
    spec_droop: &SlackSpec,
    spec_single: &SlackSpec,
    tol: f64,
) -> Result<AngleOffsetReport, PfError> {
    let a = solve_powerflow(net, schedule, spec_droop, 1e-10, 50)?;
    let b = solve_powerflow(net, schedule, spec_single, 1e-10, 50)?;
    let ref_idx = net
        .index_of(spec_droop.reference_bus)
        .ok_or(PfError::UnknownParticipant(spec_droop.reference_bus))?;
    let n = net.n_buses();
    let mut max_angle_diff_error: f64 = 0.0;
    for i in 0..n {
        for jj in (i + 1)..n {
            let da = a.theta[i] - a.theta[jj];
            let db = b.theta[i] - b.theta[jj];
            max_angle_diff_error = max_angle_diff_error.max((da - db).abs());
        }
    }
    let fa = branch_flows(net, &a);
    let fb = branch_flows(net, &b);
    let max_flow_error = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let droop = spec_droop.droop_params.ok_or(PfError::MissingDroopParams)?;
    let predicted = if droop.k != 0.0 {
        -(droop.h / droop.k) * a.sigma_hat
    } else {
        0.0
    };
    let theta_offset = a.theta[ref_idx] - spec_droop.theta_ref;
    Ok(AngleOffsetReport {
        theta_offset,
        predicted_offset: predicted,
        max_angle_diff_error,
        max_flow_error,
        sigma_hat_droop: a.sigma_hat,
        sigma_hat_single: b.sigma_hat,
        consistent: max_angle_diff_error < tol
            && max_flow_error < tol
            && (theta_offset - predicted).abs() < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Branch, Bus, Network};
    use approx::assert_abs_diff_eq;

    /// Independent brute-force 2-bus Newton, written before the main solver.
    /// Explicit complex-arithmetic mismatch equations, finite-difference
    /// Jacobian, no shared code with `solve_powerflow`.
    mod oracle {
        use num_complex::Complex64;

        pub struct TwoBus {
            pub r: f64,
            pub x: f64,
            pub p_load: f64,
            pub q_load: f64,
            pub v1: f64,
            pub p1_sched: f64,
            /// participation (k1, k2); (1, 0) is the single slack
            pub k: (f64, f64),
        }

        pub struct Solved {
            pub v2: f64,
            pub th2: f64,
            pub sigma: f64,
            pub p1: f64,
            pub p2: f64,
            pub losses: f64,
        }

        fn injections(c: &TwoBus, v2: f64, th2: f64) -> (f64, f64, f64, f64) {
            let y = Complex64::new(1.0, 0.0) / Complex64::new(c.r, c.x);
            let u1 = Complex64::from_polar(c.v1, 0.0);
            let u2 = Complex64::from_polar(v2, th2);
            let i1 = y * (u1 - u2);
            let i2 = y * (u2 - u1);
            let s1 = u1 * i1.conj();
            let s2 = u2 * i2.conj();
            (s1.re, s1.im, s2.re, s2.im)
        }

        fn mismatch(c: &TwoBus, z: &[f64; 3]) -> [f64; 3] {
            let (p1, _q1, p2, q2) = injections(c, z[0], z[1]);
            [
                p1 - (c.p1_sched + c.k.0 * z[2]),
                p2 - (-c.p_load + c.k.1 * z[2]),
                q2 - (-c.q_load),
            ]
        }

        pub fn solve(c: &TwoBus) -> Solved {
            let mut z = [1.0f64, 0.0, 0.0]; // v2, th2, sigma
            for _ in 0..80 {
                let f = mismatch(c, &z);
                let n = (f[0].powi(2) + f[1].powi(2) + f[2].powi(2)).sqrt();
                if n < 1e-13 {
                    break;
                }
                // finite-difference Jacobian
                let mut j = [[0.0f64; 3]; 3];
                let eps = 1e-7;
                for col in 0..3 {
                    let mut zp = z;
                    zp[col] += eps;
                    let fp = mismatch(c, &zp);
                    for row in 0..3 {
                        j[row][col] = (fp[row] - f[row]) / eps;
                    }
                }
                // 3x3 Cramer solve of J dz = -f
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                let rhs = [-f[0], -f[1], -f[2]];
                let mut dz = [0.0f64; 3];
                for col in 0..3 {
                    let mut jc = j;
                    for row in 0..3 {
                        jc[row][col] = rhs[row];
                    }
                    let d = jc[0][0] * (jc[1][1] * jc[2][2] - jc[1][2] * jc[2][1])
                        - jc[0][1] * (jc[1][0] * jc[2][2] - jc[1][2] * jc[2][0])
                        + jc[0][2] * (jc[1][0] * jc[2][1] - jc[1][1] * jc[2][0]);
                    dz[col] = d / det;
                }
                for i in 0..3 {
                    z[i] += dz[i];
                }
            }
            let (p1, _q1, p2, _q2) = injections(c, z[0], z[1]);
            Solved {
                v2: z[0],
                th2: z[1],
                sigma: z[2],
                p1,
                p2,
                losses: p1 + p2,
            }
        }
    }

    fn two_bus_net(r: f64, x: f64) -> Network {
        Network::new(
            vec![
                Bus { id: 1, v_mag: 1.0, theta: 0.0, base_kv: 230.0 },
                Bus { id: 2, v_mag: 1.0, theta: 0.0, base_kv: 230.0 },
            ],
            vec![Branch { from_bus: 1, to_bus: 2, r, x, b_sh: 0.0, tap: 1.0 }],
            100.0,
            60.0,
        )
        .unwrap()
    }

    fn two_bus_schedule() -> Vec<BusSchedule> {
        vec![
            BusSchedule::Pv { p: 1.0, v_set: 1.0 },
            BusSchedule::Pq { p: -1.0, q: -0.2 },
        ]
    }

    #[test]
    fn zero_injection_flat_solution() {
        let net = two_bus_net(0.01, 0.1);
        let sched = vec![
            BusSchedule::Pv { p: 0.0, v_set: 1.0 },
            BusSchedule::Pq { p: 0.0, q: 0.0 },
        ];
        for spec in [
            SlackSpec::single(1),
            SlackSpec::distributed(1, vec![(1, 1.0)]),
        ] {
            let sol = solve_powerflow(&net, &sched, &spec, 1e-8, 20).unwrap();
            assert_abs_diff_eq!(sol.v[0], 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sol.v[1], 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sol.theta[0], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sol.theta[1], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sol.sigma_hat, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_slack_matches_oracle() {
        let net = two_bus_net(0.01, 0.1);
        let sol = solve_powerflow(&net, &two_bus_schedule(), &SlackSpec::single(1), 1e-10, 30).unwrap();
        let orc = oracle::solve(&oracle::TwoBus {
            r: 0.01,
            x: 0.1,
            p_load: 1.0,
            q_load: 0.2,
            v1: 1.0,
            p1_sched: 1.0,
            k: (1.0, 0.0),
        });
        assert_abs_diff_eq!(sol.v[1], orc.v2, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.theta[1], orc.th2, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.sigma_hat, orc.sigma, epsilon = 1e-8);
        // sigma equals total loss since p1_sched covers the load exactly
        assert_abs_diff_eq!(sol.sigma_hat, sol.losses, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.losses, orc.losses, epsilon = 1e-8);
    }

    #[test]
    fn distributed_slack_matches_oracle() {
        let net = two_bus_net(0.01, 0.1);
        let spec = SlackSpec::distributed(1, vec![(1, 0.5), (2, 0.5)]);
        let sol = solve_powerflow(&net, &two_bus_schedule(), &spec, 1e-10, 30).unwrap();
        let orc = oracle::solve(&oracle::TwoBus {
            r: 0.01,
            x: 0.1,
            p_load: 1.0,
            q_load: 0.2,
            v1: 1.0,
            p1_sched: 1.0,
            k: (0.5, 0.5),
        });
        assert_abs_diff_eq!(sol.v[1], orc.v2, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.theta[1], orc.th2, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.sigma_hat, orc.sigma, epsilon = 1e-8);
        // both generators pick up half the losses
        assert_abs_diff_eq!(sol.p_gen[0] - 1.0, 0.5 * sol.sigma_hat, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.p_gen[1] - (-1.0), 0.5 * sol.sigma_hat, epsilon = 1e-12);
        // branch flow differs from the single-slack case
        let single = solve_powerflow(&net, &two_bus_schedule(), &SlackSpec::single(1), 1e-10, 30).unwrap();
        let fd = branch_flows(&net, &sol)[0];
        let fs = branch_flows(&net, &single)[0];
        assert!((fd - fs).abs() > 1e-4);
    }

    #[test]
    fn single_equals_distributed_with_one_participant() {
        let net = two_bus_net(0.01, 0.1);
        let a = solve_powerflow(&net, &two_bus_schedule(), &SlackSpec::single(1), 1e-10, 30).unwrap();
        let spec = SlackSpec::distributed(1, vec![(1, 1.0)]);
        let b = solve_powerflow(&net, &two_bus_schedule(), &spec, 1e-10, 30).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(a.v[i], b.v[i], epsilon = 1e-10);
            assert_abs_diff_eq!(a.theta[i], b.theta[i], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(a.sigma_hat, b.sigma_hat, epsilon = 1e-10);
    }

    #[test]
    fn droop_slack_angle_offset() {
        let net = two_bus_net(0.01, 0.1);
        let droop = DroopSlackParams { k: 1.0, h: 0.1, t: 0.5 };
        let spec_d = SlackSpec::dynamic_equilibrium(1, droop);
        let spec_s = SlackSpec::single(1);
        let rep =
            verify_angle_offset_invariance(&net, &two_bus_schedule(), &spec_d, &spec_s, 1e-8).unwrap();
        assert!(rep.consistent, "{rep:?}");
        // theta_1 = theta_ref - (H/K) sigma, nonzero because losses are nonzero
        assert!(rep.theta_offset.abs() > 1e-5);
        assert_abs_diff_eq!(rep.theta_offset, rep.predicted_offset, epsilon = 1e-8);
        assert_abs_diff_eq!(rep.sigma_hat_droop, rep.sigma_hat_single, epsilon = 1e-8);
    }

    #[test]
    fn droop_with_zero_h_reduces_to_single() {
        let net = two_bus_net(0.01, 0.1);
        let spec_d =
            SlackSpec::dynamic_equilibrium(1, DroopSlackParams { k: 1.0, h: 0.0, t: 0.5 });
        let sol = solve_powerflow(&net, &two_bus_schedule(), &spec_d, 1e-10, 30).unwrap();
        assert_abs_diff_eq!(sol.theta[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lossless_droop_has_no_offset() {
        let net = two_bus_net(0.0, 0.1);
        let spec_d =
            SlackSpec::dynamic_equilibrium(1, DroopSlackParams { k: 1.0, h: 0.5, t: 0.5 });
        let sol = solve_powerflow(&net, &two_bus_schedule(), &spec_d, 1e-10, 30).unwrap();
        assert_abs_diff_eq!(sol.sigma_hat, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.theta[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sigma_independent_of_theta_ref() {
        let net = two_bus_net(0.01, 0.1);
        let mut spec = SlackSpec::distributed(1, vec![(1, 0.5), (2, 0.5)]);
        let a = solve_powerflow(&net, &two_bus_schedule(), &spec, 1e-10, 30).unwrap();
        spec.theta_ref = 0.3;
        let b = solve_powerflow(&net, &two_bus_schedule(), &spec, 1e-10, 30).unwrap();
        assert_abs_diff_eq!(a.sigma_hat, b.sigma_hat, epsilon = 1e-10);
        assert_abs_diff_eq!(b.theta[0], 0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(b.theta[1] - b.theta[0], a.theta[1] - a.theta[0], epsilon = 1e-10);
    }

    #[test]
    fn generation_minus_load_equals_losses() {
        let net = two_bus_net(0.01, 0.1);
        for spec in [
            SlackSpec::single(1),
            SlackSpec::distributed(1, vec![(1, 0.7), (2, 0.3)]),
            SlackSpec::dynamic_equilibrium(1, DroopSlackParams { k: 2.0, h: 0.2, t: 0.5 }),
        ] {
            let sol = solve_powerflow(&net, &two_bus_schedule(), &spec, 1e-10, 30).unwrap();
            let total: f64 = sol.p_gen.iter().sum();
            assert_abs_diff_eq!(total, sol.losses, epsilon = 1e-8);
        }
    }

    #[test]
    fn participation_validation() {
        let net = two_bus_net(0.01, 0.1);
        let sched = two_bus_schedule();
        let empty = SlackSpec::distributed(1, vec![]);
        assert!(matches!(
            solve_powerflow(&net, &sched, &empty, 1e-8, 20),
            Err(PfError::NoSlackParticipant)
        ));
        let bad_sum = SlackSpec::distributed(1, vec![(1, 0.5), (2, 0.4)]);
        assert!(matches!(
            solve_powerflow(&net, &sched, &bad_sum, 1e-8, 20),
            Err(PfError::BadParticipationSum(_))
        ));
        let neg = SlackSpec::distributed(1, vec![(1, 1.5), (2, -0.5)]);
        assert!(matches!(
            solve_powerflow(&net, &sched, &neg, 1e-8, 20),
            Err(PfError::NegativeParticipation { .. })
        ));
        let mut allowed = SlackSpec::distributed(1, vec![(1, 1.5), (2, -0.5)]);
        allowed.allow_negative_participation = true;
        assert!(solve_powerflow(&net, &sched, &allowed, 1e-8, 20).is_ok());
    }

    #[test]
    fn overload_fails_to_converge() {
        let net = two_bus_net(0.01, 0.1);
        let sched = vec![
            BusSchedule::Pv { p: 0.0, v_set: 1.0 },
            BusSchedule::Pq { p: -60.0, q: -10.0 },
        ];
        let r = solve_powerflow(&net, &sched, &SlackSpec::single(1), 1e-8, 20);
        assert!(matches!(r, Err(PfError::NonConvergence { .. }) | Err(PfError::SingularJacobian(_))));
    }
}
