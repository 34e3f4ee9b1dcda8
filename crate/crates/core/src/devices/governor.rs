//! Turbine governor models: droop (proportional) and integral.
//!
//! Only one integral governor is admitted per synchronous island; with two,
//! the steady-state injections of the connected machines are undetermined.
//! That check lives at configuration level (case validation).

use super::DeviceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GovernorMode {
    Droop,
    Integral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GovernorParams {
    /// Droop coefficient, pu.
    pub r: f64,
    /// Time constant, s.
    pub t: f64,
    pub mode: GovernorMode,
    /// Torque set point tau_m_ref, pu.
    pub tau_m_ref: f64,
    /// AGC participation share r_h; 0 when not under AGC.
    pub agc_share: f64,
}

impl GovernorParams {
    pub fn validate(&self, id: &str) -> Result<(), DeviceError> {
        if self.r <= 0.0 || self.t <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!("require R > 0, T > 0 (got R={}, T={})", self.r, self.t),
            });
        }
        Ok(())
    }
}

/// Governor state derivative tau_m'.
///
/// Droop:    T tau_m' = tau_m_ref + r_h xi - (1/R)(omega - omega_n) - tau_m
/// Integral: T tau_m' = -(1/R)(omega - omega_n)
pub fn eval_governor(tau_m: f64, omega: f64, g: &GovernorParams, xi: f64, omega_n: f64) -> f64 {
    match g.mode {
        GovernorMode::Droop => {
            (g.tau_m_ref + g.agc_share * xi - (omega - omega_n) / g.r - tau_m) / g.t
        }
        GovernorMode::Integral => -(omega - omega_n) / (g.r * g.t),
    }
}

/// Partials of tau_m' wrt (tau_m, omega, xi).
pub fn governor_residual_partials(g: &GovernorParams) -> (f64, f64, f64) {
    match g.mode {
        GovernorMode::Droop => (-1.0 / g.t, -1.0 / (g.r * g.t), g.agc_share / g.t),
        GovernorMode::Integral => (0.0, -1.0 / (g.r * g.t), 0.0),
    }
}
