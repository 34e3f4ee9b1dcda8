//! Automatic generation control: a single integral controller whose output
//! signal is shared with the turbine governors. In steady state the ensemble
//! machines + governors + AGC injects p_m0 + r_h*omega_n*xi per machine,
//! the distributed slack form with sigma_hat = xi.

use super::{
    BusVt, CandidateClass, DerivJacobian, DeviceError, DeviceInputs, DeviceModel,
    InjectionJacobian, PowerSplit, SlackInfo,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgcParams {
    /// Integrator gain K_o.
    pub k_o: f64,
    /// Initial integrator state.
    pub xi0: f64,
}

impl AgcParams {
    pub fn validate(&self, id: &str) -> Result<(), DeviceError> {
        if self.k_o <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!("require K_o > 0 (got {})", self.k_o),
            });
        }
        Ok(())
    }
}

/// xi' = K_o (omega_n - omega_s)
pub fn eval_agc(omega_s: f64, a: &AgcParams, omega_n: f64) -> f64 {
    a.k_o * (omega_n - omega_s)
}

/// Steady-state machine injection under AGC: p_h = p_m0 + r_h*omega_n*xi.
pub fn agc_steady_injection(p_m0: f64, r_h: f64, omega_n: f64, xi: f64) -> f64 {
    p_m0 + r_h * omega_n * xi
}

/// System-level AGC integrator. Not attached to a bus; injects no power.
#[derive(Debug, Clone)]
pub struct AgcDevice {
    pub id: String,
    pub params: AgcParams,
    pub omega_n: f64,
}

impl AgcDevice {
    pub fn new(id: impl Into<String>, params: AgcParams, omega_n: f64) -> Result<Self, DeviceError> {
        let id = id.into();
        params.validate(&id)?;
        Ok(AgcDevice { id, params, omega_n })
    }
}

impl DeviceModel for AgcDevice {
    fn id(&self) -> &str {
        &self.id
    }

    fn bus(&self) -> Option<usize> {
        None
    }

    fn n_states(&self) -> usize {
        1
    }

    fn state_names(&self) -> Vec<String> {
        vec!["xi".to_string()]
    }

    fn t_diag(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn deriv(&self, _sigma: &[f64], _bus: BusVt, inp: &DeviceInputs) -> Vec<f64> {
        vec![eval_agc(inp.omega_s, &self.params, self.omega_n)]
    }

    fn deriv_jacobian(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> DerivJacobian {
        let mut j = DerivJacobian::zeros(1);
        j.d_omega_s[0] = -self.params.k_o;
        j
    }

    fn injection(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> (f64, f64) {
        (0.0, 0.0)
    }

    fn injection_jacobian(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> InjectionJacobian {
        InjectionJacobian::zeros(1)
    }

    fn power_split(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> PowerSplit {
        PowerSplit::new(0.0, 0.0)
    }

    fn slack_info(&self) -> Option<SlackInfo> {
        Some(SlackInfo { n_states: 1, dynamic: true, local_angle: false })
    }

    fn candidate_channel(&self) -> Option<(&'static str, CandidateClass)> {
        Some(("xi", CandidateClass::Power))
    }

    fn network_wide_coordinator(&self) -> bool {
        true
    }
}
