//! Passive series RLC load in the synchronous dq reference frame.
//!
//! States are the Park components of the inductor current and capacitor
//! voltage. The load has no source power; its split channels track the
//! stored-energy exchange p_t = l*i'*i + c*v_c'*v_c (drawn convention),
//! which vanishes in any phasor steady state. The bus injection additionally
//! carries the ohmic dissipation.

use super::{
    BusVt, DerivJacobian, DeviceError, DeviceInputs, DeviceModel, InjectionJacobian, PowerSplit,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlcLoadParams {
    pub r: f64,
    /// Series inductance, pu.
    pub l: f64,
    /// Capacitance, pu.
    pub c: f64,
}

impl RlcLoadParams {
    pub fn validate(&self, id: &str) -> Result<(), DeviceError> {
        if self.r < 0.0 || self.l <= 0.0 || self.c <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!("require r >= 0, l > 0, c > 0 (got r={}, l={}, c={})", self.r, self.l, self.c),
            });
        }
        Ok(())
    }
}

/// RLC state derivatives. `sigma` = (i_d, i_q, v_cd, v_cq), bus voltage as
/// Park vector (v_d, v_q).
///
/// l i' = v - v_c - (r + j Omega_b l) i
/// c v_c' = i - j Omega_b c v_c
pub fn eval_rlc_load(
    sigma: (f64, f64, f64, f64),
    v_bus: (f64, f64),
    p: &RlcLoadParams,
    omega_b: f64,
) -> (f64, f64, f64, f64) {
    let (id, iq, vcd, vcq) = sigma;
    let (vd, vq) = v_bus;
    let id_dot = (vd - vcd - p.r * id + omega_b * p.l * iq) / p.l;
    let iq_dot = (vq - vcq - p.r * iq - omega_b * p.l * id) / p.l;
    let vcd_dot = id / p.c + omega_b * vcq;
    let vcq_dot = iq / p.c - omega_b * vcd;
    (id_dot, iq_dot, vcd_dot, vcq_dot)
}

/// p_s = 0 (passive device); p_t = l*i'*i + c*v_c'*v_c over dq components.
pub fn load_power_split(
    sigma: (f64, f64, f64, f64),
    sigma_prime: (f64, f64, f64, f64),
    p: &RlcLoadParams,
) -> PowerSplit {
    let (id, iq, vcd, vcq) = sigma;
    let (idd, iqd, vcdd, vcqd) = sigma_prime;
    let p_t = p.l * (idd * id + iqd * iq) + p.c * (vcdd * vcd + vcqd * vcq);
    PowerSplit::new(0.0, p_t)
}

#[derive(Debug, Clone)]
pub struct RlcLoadDevice {
    pub id: String,
    pub bus: usize,
    pub params: RlcLoadParams,
    pub omega_b: f64,
}

impl RlcLoadDevice {
    pub fn new(
        id: impl Into<String>,
        bus: usize,
        params: RlcLoadParams,
        omega_b: f64,
    ) -> Result<Self, DeviceError> {
        let id = id.into();
        params.validate(&id)?;
        Ok(RlcLoadDevice { id, bus, params, omega_b })
    }

    /// Phasor steady-state states for a given bus voltage phasor.
    pub fn steady_states(&self, v: f64, theta: f64) -> (f64, f64, f64, f64) {
        use num_complex::Complex64;
        let w = self.omega_b;
        let z = Complex64::new(self.params.r, w * self.params.l)
            + Complex64::new(0.0, -1.0 / (w * self.params.c));
        let vb = Complex64::from_polar(v, theta);
        let i = vb / z;
        let vc = i / Complex64::new(0.0, w * self.params.c);
        (i.re, i.im, vc.re, vc.im)
    }
}

impl DeviceModel for RlcLoadDevice {
    fn id(&self) -> &str {
        &self.id
    }

    fn bus(&self) -> Option<usize> {
        Some(self.bus)
    }

    fn n_states(&self) -> usize {
        4
    }

    fn state_names(&self) -> Vec<String> {
        ["i_d", "i_q", "v_cd", "v_cq"].iter().map(|s| s.to_string()).collect()
    }

    fn t_diag(&self) -> Vec<f64> {
        vec![self.params.l, self.params.l, self.params.c, self.params.c]
    }

    fn deriv(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> Vec<f64> {
        let (vd, vq) = (bus.v * bus.theta.cos(), bus.v * bus.theta.sin());
        let d = eval_rlc_load(
            (sigma[0], sigma[1], sigma[2], sigma[3]),
            (vd, vq),
            &self.params,
            self.omega_b,
        );
        vec![d.0, d.1, d.2, d.3]
    }

    fn deriv_jacobian(&self, _sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> DerivJacobian {
        let p = &self.params;
        let w = self.omega_b;
        let (sin, cos) = bus.theta.sin_cos();
        let (vd, vq) = (bus.v * cos, bus.v * sin);
        let mut j = DerivJacobian::zeros(4);
        j.d_sigma[(0, 0)] = -p.r / p.l;
        j.d_sigma[(0, 1)] = w;
        j.d_sigma[(0, 2)] = -1.0 / p.l;
        j.d_v[0] = cos / p.l;
        j.d_theta[0] = -vq / p.l;
        j.d_sigma[(1, 1)] = -p.r / p.l;
        j.d_sigma[(1, 0)] = -w;
        j.d_sigma[(1, 3)] = -1.0 / p.l;
        j.d_v[1] = sin / p.l;
        j.d_theta[1] = vd / p.l;
        j.d_sigma[(2, 0)] = 1.0 / p.c;
        j.d_sigma[(2, 3)] = w;
        j.d_sigma[(3, 1)] = 1.0 / p.c;
        j.d_sigma[(3, 2)] = -w;
        j
    }

    fn injection(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> (f64, f64) {
        let (sin, cos) = bus.theta.sin_cos();
        let (vd, vq) = (bus.v * cos, bus.v * sin);
        let (id, iq) = (sigma[0], sigma[1]);
        (-(vd * id + vq * iq), -(vq * id - vd * iq))
    }

    fn injection_jacobian(&self, sigma: &[f64], bus: BusVt, _inp: &DeviceInputs) -> InjectionJacobian {
        let (sin, cos) = bus.theta.sin_cos();
        let (vd, vq) = (bus.v * cos, bus.v * sin);
        let (id, iq) = (sigma[0], sigma[1]);
        let mut jj = InjectionJacobian::zeros(4);
        jj.dp_sigma[0] = -vd;
        jj.dp_sigma[1] = -vq;
        jj.dp_v = -(cos * id + sin * iq);
        jj.dp_theta = -(-vq * id + vd * iq);
        jj.dq_sigma[0] = -vq;
        jj.dq_sigma[1] = vd;
        jj.dq_v = -(sin * id - cos * iq);
        jj.dq_theta = -(vd * id + vq * iq);
        jj
    }

    fn power_split(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> PowerSplit {
        let d = self.deriv(sigma, bus, inp);
        load_power_split(
            (sigma[0], sigma[1], sigma[2], sigma[3]),
            (d[0], d[1], d[2], d[3]),
            &self.params,
        )
    }
}
