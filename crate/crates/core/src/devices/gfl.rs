//! Grid-following converter: PLL synchronization, dc-link circuit with an
//! optional frequency-droop controlled dc source, and ideal (algebraic)
//! inner current tracking.
//!
//! The outer loop regulates the dc voltage proportionally, delivering
//! p_cmd = p0 + k_vdc (v_dc - v_dc_ref); reactive injection is the fixed
//! setpoint q0. Without the dc droop the source current is constant and the
//! converter has no steady-state slack capability. The ac filter inductor
//! and capacitor carry stored energy whose millisecond exchange is below
//! phasor resolution; it enters the injection and transient power through a
//! term frozen from the previous accepted step.

use super::{
    BusVt, CandidateClass, DerivJacobian, DeviceError, DeviceInputs, DeviceModel,
    InjectionJacobian, PowerSplit, SlackInfo,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GflParams {
    /// PLL proportional gain.
    pub kp_pll: f64,
    /// PLL integral gain.
    pub ki_pll: f64,
    /// ac filter resistance, pu.
    pub r_f: f64,
    /// ac filter inductance, pu.
    pub l_f: f64,
    /// ac filter capacitance, pu.
    pub c_f: f64,
    /// dc-side conductance (converter losses), pu.
    pub g_dc: f64,
    /// dc-link capacitance, pu.
    pub c_dc: f64,
    /// dc droop time constant, s.
    pub t_dc: f64,
    /// dc droop coefficient, pu.
    pub r_dc: f64,
    /// Initial/reference dc source current, pu.
    pub i_dc0: f64,
    /// Active power setpoint, pu.
    pub p0: f64,
    /// Reactive power setpoint, pu.
    pub q0: f64,
    /// dc voltage reference, pu.
    pub v_dc_ref: f64,
    /// Proportional gain of the dc-voltage outer loop.
    pub k_vdc: f64,
    /// dc source frequency droop enabled.
    pub droop: bool,
}

impl GflParams {
    pub fn validate(&self, id: &str) -> Result<(), DeviceError> {
        if self.ki_pll <= 0.0 || self.c_dc <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!(
                    "require ki_pll > 0, c_dc > 0 (got ki={}, c_dc={})",
                    self.ki_pll, self.c_dc
                ),
            });
        }
        if self.droop && (self.r_dc <= 0.0 || self.t_dc <= 0.0) {
            return Err(DeviceError::DcSourceAbsent(id.to_string()));
        }
        Ok(())
    }
}

/// PLL update: returns (zeta', theta_hat', delta_omega_hat).
///
/// zeta' = theta - theta_hat
/// delta_omega_hat = ki*zeta + kp*zeta'
/// theta_hat' = Omega_b * delta_omega_hat
pub fn eval_pll(
    sigma: (f64, f64),
    theta_bus: f64,
    kp: f64,
    ki: f64,
    omega_b: f64,
) -> (f64, f64, f64) {
    let (zeta, theta_hat) = sigma;
    let zeta_dot = theta_bus - theta_hat;
    let d_omega = ki * zeta + kp * zeta_dot;
    (zeta_dot, omega_b * d_omega, d_omega)
}

/// dq components of the bus voltage in the PLL frame:
/// v_d = v cos(theta - theta_hat), v_q = v sin(theta - theta_hat).
pub fn gfl_frame_transform(v_bus: f64, theta_bus: f64, theta_hat: f64) -> (f64, f64) {
    let (s, c) = (theta_bus - theta_hat).sin_cos();
    (v_bus * c, v_bus * s)
}

/// Grid-following converter device.
/// States: [zeta, theta_hat, v_dc] plus [i_dc] when the dc droop is enabled.
#[derive(Debug, Clone)]
pub struct GflDevice {
    pub id: String,
    pub bus: usize,
    pub params: GflParams,
    pub omega_b: f64,
    pub omega_n: f64,
}

impl GflDevice {
    pub fn new(
        id: impl Into<String>,
        bus: usize,
        params: GflParams,
        omega_b: f64,
        omega_n: f64,
    ) -> Result<Self, DeviceError> {
        let id = id.into();
        params.validate(&id)?;
        Ok(GflDevice { id, bus, params, omega_b, omega_n })
    }

    fn i_dc(&self, sigma: &[f64]) -> f64 {
        if self.params.droop {
            sigma[3]
        } else {
            self.params.i_dc0
        }
    }

    /// Commanded (delivered) active power before the frozen filter term.
    pub fn p_cmd(&self, sigma: &[f64]) -> f64 {
        self.params.p0 + self.params.k_vdc * (sigma[2] - self.params.v_dc_ref)
    }

    /// Squared ac current magnitude for the delivered apparent power.
    fn i_sq(&self, sigma: &[f64], v_bus: f64) -> f64 {
        let p = self.p_cmd(sigma);
        (p * p + self.params.q0 * self.params.q0) / (v_bus * v_bus)
    }

    fn delta_omega(&self, sigma: &[f64], theta_bus: f64) -> f64 {
        self.params.ki_pll * sigma[0] + self.params.kp_pll * (theta_bus - sigma[1])
    }
}

impl DeviceModel for GflDevice {
    fn id(&self) -> &str {
        &self.id
    }

    fn bus(&self) -> Option<usize> {
        Some(self.bus)
    }

    fn n_states(&self) -> usize {
        if self.params.droop { 4 } else { 3 }
    }

    fn state_names(&self) -> Vec<String> {
        let mut n = vec!["zeta".to_string(), "theta_hat".to_string(), "v_dc".to_string()];
        if self.params.droop {
            n.push("i_dc".to_string());
        }
        n
    }

    fn t_diag(&self) -> Vec<f64> {
        let mut t = vec![1.0, 1.0, self.params.c_dc];
        if self.params.droop {
            t.push(self.params.t_dc);
        }
        t
    }

    fn deriv(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> Vec<f64> {
        let p = &self.params;
        let (zeta_dot, theta_hat_dot, d_omega) =
            eval_pll((sigma[0], sigma[1]), bus.theta, p.kp_pll, p.ki_pll, self.omega_b);
        let v_dc = sigma[2];
        let i_dc = self.i_dc(sigma);
        let draw = self.p_cmd(sigma) + p.r_f * self.i_sq(sigma, bus.v);
        let v_dc_dot = (i_dc - draw / v_dc - p.g_dc * v_dc) / p.c_dc;
        let mut out = vec![zeta_dot, theta_hat_dot, v_dc_dot];
        if p.droop {
            out.push((p.i_dc0 - d_omega / p.r_dc - sigma[3]) / p.t_dc);
        }
        out
    }

    fn deriv_jacobian(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> DerivJacobian {
        let p = &self.params;
        let m = self.n_states();
        let mut j = DerivJacobian::zeros(m);
        // zeta' = theta - theta_hat
        j.d_sigma[(0, 1)] = -1.0;
        j.d_theta[0] = 1.0;
        // theta_hat' = Omega_b (ki zeta + kp (theta - theta_hat))
        j.d_sigma[(1, 0)] = self.omega_b * p.ki_pll;
        j.d_sigma[(1, 1)] = -self.omega_b * p.kp_pll;
        j.d_theta[1] = self.omega_b * p.kp_pll;
        // v_dc' = (i_dc - (p_cmd + r_f i^2)/v_dc - g_dc v_dc)/c_dc
        let v_dc = sigma[2];
        let p_cmd = self.p_cmd(sigma);
        let i_sq = self.i_sq(sigma, bus.v);
        let draw = p_cmd + p.r_f * i_sq;
        let d_draw_d_vdc = p.k_vdc * (1.0 + 2.0 * p.r_f * p_cmd / (bus.v * bus.v));
        let d_draw_d_v = -2.0 * p.r_f * i_sq / bus.v;
        j.d_sigma[(2, 2)] = (-d_draw_d_vdc / v_dc + draw / (v_dc * v_dc) - p.g_dc) / p.c_dc;
        j.d_v[2] = -d_draw_d_v / (v_dc * p.c_dc);
        if p.droop {
            j.d_sigma[(2, 3)] = 1.0 / p.c_dc;
            // i_dc' = (i_dc0 - d_omega/R - i_dc)/T
            let rt = p.r_dc * p.t_dc;
            j.d_sigma[(3, 0)] = -p.ki_pll / rt;
            j.d_sigma[(3, 1)] = p.kp_pll / rt;
            j.d_theta[3] = -p.kp_pll / rt;
            j.d_sigma[(3, 3)] = -1.0 / p.t_dc;
        }
        j
    }

    fn injection(&self, sigma: &[f64], _bus: BusVt, inp: &DeviceInputs) -> (f64, f64) {
        (self.p_cmd(sigma) + inp.frozen_pt, self.params.q0)
    }

    fn injection_jacobian(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> InjectionJacobian {
        let mut jj = InjectionJacobian::zeros(self.n_states());
        jj.dp_sigma[2] = self.params.k_vdc;
        jj
    }

    fn power_split(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> PowerSplit {
        let p = &self.params;
        let v_dc = sigma[2];
        let i_sq = self.i_sq(sigma, bus.v);
        let mut p_s = v_dc * p.i_dc0 - p.g_dc * v_dc * v_dc - p.r_f * i_sq;
        if p.droop {
            p_s -= v_dc * self.delta_omega(sigma, bus.theta) / p.r_dc;
        }
        let p_total = self.p_cmd(sigma) + inp.frozen_pt;
        PowerSplit { p_s, p_t: p_total - p_s, p_total }
    }

    fn slack_info(&self) -> Option<SlackInfo> {
        if self.params.droop {
            Some(SlackInfo { n_states: 4, dynamic: true, local_angle: true })
        } else {
            // fixed dc source: no steady-state slack capability
            None
        }
    }

    fn candidate_channel(&self) -> Option<(&'static str, CandidateClass)> {
        Some(("freq", CandidateClass::Frequency))
    }

    fn extra_channels(&self) -> Vec<&'static str> {
        vec!["freq"]
    }

    fn eval_extra(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> Vec<f64> {
        vec![self.omega_n + self.delta_omega(sigma, bus.theta)]
    }
}
