//! Ideal dynamic slack devices: the pure integrator (perfect tracking of the
//! reference angle) and the first-order droop form. Both inject
//! p = p0 + sigma_hat and hold their bus voltage magnitude.

use super::{
    BusVt, CandidateClass, DerivJacobian, DeviceError, DeviceInputs, DeviceModel,
    InjectionJacobian, PowerSplit, ReactiveMode, SlackInfo,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdealSlackMode {
    Integrator,
    Droop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealSlackParams {
    pub mode: IdealSlackMode,
    pub k: f64,
    pub h: f64,
    pub t: f64,
    pub theta_ref: f64,
    /// Scheduled injection p0, pu.
    pub p0: f64,
}

/// sigma_hat' for the ideal slack.
///
/// Integrator: sigma' = theta_ref - theta_i
/// Droop:      T sigma' = K (theta_ref - theta_i) - H sigma
pub fn eval_ideal_slack(sigma: f64, theta_bus: f64, p: &IdealSlackParams) -> f64 {
    match p.mode {
        IdealSlackMode::Integrator => p.theta_ref - theta_bus,
        IdealSlackMode::Droop => (p.k * (p.theta_ref - theta_bus) - p.h * sigma) / p.t,
    }
}

#[derive(Debug, Clone)]
pub struct IdealSlackDevice {
    pub id: String,
    pub bus: usize,
    pub params: IdealSlackParams,
    pub v_set: f64,
}

impl IdealSlackDevice {
    pub fn new(
        id: impl Into<String>,
        bus: usize,
        params: IdealSlackParams,
        v_set: f64,
    ) -> Result<Self, DeviceError> {
        let id = id.into();
        if params.mode == IdealSlackMode::Droop && params.t <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id,
                reason: format!("droop slack requires T > 0 (got {})", params.t),
            });
        }
        Ok(IdealSlackDevice { id, bus, params, v_set })
    }
}

impl DeviceModel for IdealSlackDevice {
    fn id(&self) -> &str {
        &self.id
    }

    fn bus(&self) -> Option<usize> {
        Some(self.bus)
    }

    fn n_states(&self) -> usize {
        1
    }

    fn state_names(&self) -> Vec<String> {
        vec!["sigma_hat".to_string()]
    }

    fn t_diag(&self) -> Vec<f64> {
        vec![match self.params.mode {
            IdealSlackMode::Integrator => 1.0,
            IdealSlackMode::Droop => self.params.t,
        }]
    }

    fn deriv(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> Vec<f64> {
        vec![eval_ideal_slack(sigma[0], bus.theta, &self.params)]
    }

    fn deriv_jacobian(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> DerivJacobian {
        let mut j = DerivJacobian::zeros(1);
        match self.params.mode {
            IdealSlackMode::Integrator => {
                j.d_theta[0] = -1.0;
            }
            IdealSlackMode::Droop => {
                j.d_theta[0] = -self.params.k / self.params.t;
                j.d_sigma[(0, 0)] = -self.params.h / self.params.t;
            }
        }
        j
    }

    fn injection(&self, sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> (f64, f64) {
        (self.params.p0 + sigma[0], 0.0)
    }

    fn injection_jacobian(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> InjectionJacobian {
        let mut jj = InjectionJacobian::zeros(1);
        jj.dp_sigma[0] = 1.0;
        jj
    }

    fn reactive_mode(&self) -> ReactiveMode {
        ReactiveMode::VoltageControl { v_set: self.v_set }
    }

    fn power_split(&self, sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> PowerSplit {
        // the slack variable is pure source power; no stored energy
        PowerSplit::new(self.params.p0 + sigma[0], 0.0)
    }

    fn slack_info(&self) -> Option<SlackInfo> {
        Some(SlackInfo { n_states: 1, dynamic: true, local_angle: false })
    }

    fn candidate_channel(&self) -> Option<(&'static str, CandidateClass)> {
        Some(("sigma_hat", CandidateClass::Power))
    }
}
