//! Classical synchronous machine: swing equations with constant mechanical
//! torque, optionally extended with a turbine governor state.
//!
//! States are [delta, omega] (plus tau_m with a governor). The injected
//! active power is defined by the decomposition, p = p_s + p_t with
//! p_s = tau_m*omega - D*(omega - omega_n)^2 and p_t = -M*omega'*omega,
//! which works out to tau_e*omega + D*(omega - omega_n)*omega_n after
//! substituting the swing equation. Reactive power is an algebraic variable;
//! the machine holds its bus voltage magnitude (ideal excitation control).

use super::governor::{eval_governor, governor_residual_partials, GovernorParams};
use super::{
    BusVt, CandidateClass, DerivJacobian, DeviceError, DeviceInputs, DeviceModel,
    InjectionJacobian, PowerSplit, ReactiveMode, SlackInfo,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineParams {
    /// Mechanical starting time, s.
    pub m: f64,
    /// Damping, pu.
    pub d: f64,
    /// Maximum electrical torque, pu.
    pub tau_e_max: f64,
    /// Mechanical torque set point, pu.
    pub tau_m0: f64,
    /// Nominal speed, pu.
    pub omega_n: f64,
}

impl MachineParams {
    pub fn validate(&self, id: &str) -> Result<(), DeviceError> {
        if self.m <= 0.0 || self.d < 0.0 || self.tau_e_max <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!(
                    "require M > 0, D >= 0, tau_e_max > 0 (got M={}, D={}, tau_e_max={})",
                    self.m, self.d, self.tau_e_max
                ),
            });
        }
        Ok(())
    }
}

/// Swing equation right-hand side: (delta', omega').
pub fn eval_machine(
    sigma: (f64, f64),
    theta: f64,
    omega_s: f64,
    p: &MachineParams,
    omega_b: f64,
) -> (f64, f64) {
    let (delta, omega) = sigma;
    let delta_dot = omega_b * (omega - omega_s);
    let tau_e = p.tau_e_max * (delta - theta).sin();
    let omega_dot = (p.tau_m0 - tau_e - p.d * (omega - p.omega_n)) / p.m;
    (delta_dot, omega_dot)
}

/// Source/transient split of the classical machine (constant tau_m):
/// p_s = tau_m*omega - D*(omega - omega_n)^2, p_t = -M*omega'*omega.
pub fn machine_power_split(
    sigma: (f64, f64),
    sigma_prime: (f64, f64),
    tau_m: f64,
    p: &MachineParams,
) -> PowerSplit {
    let (_, omega) = sigma;
    let (_, omega_dot) = sigma_prime;
    let dv = omega - p.omega_n;
    let p_s = tau_m * omega - p.d * dv * dv;
    let p_t = -p.m * omega_dot * omega;
    PowerSplit::new(p_s, p_t)
}

/// Inertia-weighted center-of-inertia speed.
pub fn coi_speed(machines: &[(f64, f64)]) -> Result<f64, DeviceError> {
    let m_total: f64 = machines.iter().map(|(m, _)| m).sum();
    if machines.is_empty() || m_total <= 0.0 {
        return Err(DeviceError::EmptyMachineSet);
    }
    Ok(machines.iter().map(|(m, w)| m * w).sum::<f64>() / m_total)
}

/// Approximate governor-aware split (omega ~ 1 approximation):
/// p_s = p_m0 - (D + 1/R)(omega - omega_n)^2, p_t = -M*omega' - T*tau_m'.
/// Returned alongside the exact split so the approximation gap can be
/// audited.
pub fn machine_gov_power_split(
    sigma: (f64, f64, f64),
    sigma_prime: (f64, f64, f64),
    p: &MachineParams,
    g: &GovernorParams,
    xi: f64,
) -> (PowerSplit, PowerSplit) {
    let (_, omega, tau_m) = sigma;
    let (_, omega_dot, tau_m_dot) = sigma_prime;
    let exact = machine_power_split((sigma.0, omega), (sigma_prime.0, omega_dot), tau_m, p);
    let dv = omega - p.omega_n;
    let p_m0 = (g.tau_m_ref + g.agc_share * xi) * p.omega_n;
    let p_s = p_m0 - (p.d + 1.0 / g.r) * dv * dv;
    let p_t = -p.m * omega_dot - g.t * tau_m_dot;
    (exact, PowerSplit::new(p_s, p_t))
}

/// Machine device, optionally with a turbine governor third state.
#[derive(Debug, Clone)]
pub struct MachineDevice {
    pub id: String,
    pub bus: usize,
    pub params: MachineParams,
    pub governor: Option<GovernorParams>,
    pub v_set: f64,
    pub omega_b: f64,
}

impl MachineDevice {
    pub fn new(
        id: impl Into<String>,
        bus: usize,
        params: MachineParams,
        governor: Option<GovernorParams>,
        v_set: f64,
        omega_b: f64,
    ) -> Result<Self, DeviceError> {
        let id = id.into();
        params.validate(&id)?;
        if let Some(g) = &governor {
            g.validate(&id)?;
        }
        Ok(MachineDevice { id, bus, params, governor, v_set, omega_b })
    }

    fn tau_m(&self, sigma: &[f64]) -> f64 {
        if self.governor.is_some() {
            sigma[2]
        } else {
            self.params.tau_m0
        }
    }
}

impl DeviceModel for MachineDevice {
    fn id(&self) -> &str {
        &self.id
    }

    fn bus(&self) -> Option<usize> {
        Some(self.bus)
    }

    fn n_states(&self) -> usize {
        if self.governor.is_some() { 3 } else { 2 }
    }

    fn state_names(&self) -> Vec<String> {
        let mut n = vec!["delta".to_string(), "omega".to_string()];
        if self.governor.is_some() {
            n.push("tau_m".to_string());
        }
        n
    }

    fn t_diag(&self) -> Vec<f64> {
        let mut t = vec![1.0, self.params.m];
        if let Some(g) = &self.governor {
            t.push(g.t);
        }
        t
    }

    fn deriv(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> Vec<f64> {
        let p = MachineParams { tau_m0: self.tau_m(sigma), ..self.params };
        let (d_dot, w_dot) =
            eval_machine((sigma[0], sigma[1]), bus.theta, inp.omega_s, &p, self.omega_b);
        let mut out = vec![d_dot, w_dot];
        if let Some(g) = &self.governor {
            out.push(eval_governor(sigma[2], sigma[1], g, inp.xi, self.params.omega_n));
        }
        out
    }

    fn deriv_jacobian(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> DerivJacobian {
        let m = self.n_states();
        let mut j = DerivJacobian::zeros(m);
        let p = &self.params;
        let cos = (sigma[0] - bus.theta).cos();
        // delta' = omega_b (omega - omega_s)
        j.d_sigma[(0, 1)] = self.omega_b;
        j.d_omega_s[0] = -self.omega_b;
        // omega' = (tau_m - tau_e_max sin(delta - theta) - D (omega - omega_n)) / M
        j.d_sigma[(1, 0)] = -p.tau_e_max * cos / p.m;
        j.d_theta[1] = p.tau_e_max * cos / p.m;
        j.d_sigma[(1, 1)] = -p.d / p.m;
        if let Some(g) = &self.governor {
            j.d_sigma[(1, 2)] = 1.0 / p.m;
            let (d_tau, d_omega, d_xi) = governor_residual_partials(g);
            j.d_sigma[(2, 2)] = d_tau;
            j.d_sigma[(2, 1)] = d_omega;
            j.d_xi[2] = d_xi;
        }
        j
    }

    fn injection(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> (f64, f64) {
        let p = &self.params;
        let omega = sigma[1];
        let tau_e = p.tau_e_max * (sigma[0] - bus.theta).sin();
        // p_s + p_t with the swing equation substituted
        (tau_e * omega + p.d * (omega - p.omega_n) * p.omega_n, 0.0)
    }

    fn injection_jacobian(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> InjectionJacobian {
        let p = &self.params;
        let omega = sigma[1];
        let (s, c) = (sigma[0] - bus.theta).sin_cos();
        let mut jj = InjectionJacobian::zeros(self.n_states());
        jj.dp_sigma[0] = p.tau_e_max * c * omega;
        jj.dp_sigma[1] = p.tau_e_max * s + p.d * p.omega_n;
        jj.dp_theta = -p.tau_e_max * c * omega;
        jj
    }

    fn reactive_mode(&self) -> ReactiveMode {
        ReactiveMode::VoltageControl { v_set: self.v_set }
    }

    fn power_split(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> PowerSplit {
        let d = self.deriv(sigma, bus, inp);
        machine_power_split((sigma[0], sigma[1]), (d[0], d[1]), self.tau_m(sigma), &self.params)
    }

    fn slack_info(&self) -> Option<SlackInfo> {
        Some(SlackInfo { n_states: self.n_states(), dynamic: true, local_angle: true })
    }

    fn candidate_channel(&self) -> Option<(&'static str, CandidateClass)> {
        Some(("omega", CandidateClass::Frequency))
    }

    fn extra_channels(&self) -> Vec<&'static str> {
        if self.governor.is_some() {
            // approximate split of Eq-style governor bookkeeping, recorded so
            // the gap to the exact split can be audited offline
            vec!["ps_approx", "pt_approx"]
        } else {
            vec![]
        }
    }

    fn eval_extra(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> Vec<f64> {
        match &self.governor {
            Some(g) => {
                let d = self.deriv(sigma, bus, inp);
                let (_, approx) = machine_gov_power_split(
                    (sigma[0], sigma[1], sigma[2]),
                    (d[0], d[1], d[2]),
                    &self.params,
                    g,
                    inp.xi,
                );
                vec![approx.p_s, approx.p_t]
            }
            None => vec![],
        }
    }

    fn coi_weight(&self, sigma: &[f64]) -> Option<(f64, f64)> {
        Some((self.params.m, sigma[1]))
    }
}
