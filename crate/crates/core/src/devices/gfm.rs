//! Grid-forming converter: the converter forms its bus voltage phasor with
//! the control angle alpha, in a droop or virtual synchronous machine (VSM)
//! variant, backed by a dc source that regulates the dc-link voltage.
//!
//! The bus angle is pinned to alpha (algebraic constraint) and the active
//! injection is an algebraic variable, so the split is exact by the control
//! law: droop gives p = (p_ref - H_alpha*alpha) - D_alpha*alpha\'; VSM gives
//! p = (p_ref - H_alpha*alpha - D_alpha*omega_v) - M_alpha*omega_v\'.

use super::{
    BusVt, CandidateClass, DerivJacobian, DeviceError, DeviceInputs, DeviceModel,
    InjectionJacobian, PowerSplit, ReactiveMode, SlackInfo,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfmVariant {
    Droop,
    Vsm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfmParams {
    pub variant: GfmVariant,
    /// Regulator time constant (droop) or damping (VSM), s.
    pub d_alpha: f64,
    /// Integral deviation.
    pub h_alpha: f64,
    /// Virtual inertia (VSM only), s.
    pub m_alpha: f64,
    /// Reference active power, pu.
    pub p_ref: f64,
    // dc side, shared with the GFL circuit
    pub g_dc: f64,
    pub c_dc: f64,
    pub r_f: f64,
    /// dc source time constant, s.
    pub t_dc: f64,
    /// dc source voltage-droop coefficient, pu.
    pub r_dc: f64,
    /// Initial/reference dc source current, pu.
    pub i_dc0: f64,
    pub v_dc_ref: f64,
}

impl GfmParams {
    pub fn validate(&self, id: &str) -> Result<(), DeviceError> {
        if self.d_alpha <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!("require D_alpha > 0 (got {})", self.d_alpha),
            });
        }
        if self.variant == GfmVariant::Vsm && self.m_alpha <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: format!("VSM requires M_alpha > 0 (got {})", self.m_alpha),
            });
        }
        if self.c_dc <= 0.0 || self.t_dc <= 0.0 || self.r_dc <= 0.0 {
            return Err(DeviceError::InvalidParameter {
                device: id.to_string(),
                reason: "dc source requires c_dc, t_dc, r_dc > 0".to_string(),
            });
        }
        Ok(())
    }
}

/// Grid-forming converter device.
/// States: droop [alpha, v_dc, i_dc]; VSM [alpha, omega_v, v_dc, i_dc].
#[derive(Debug, Clone)]
pub struct GfmDevice {
    pub id: String,
    pub bus: usize,
    pub params: GfmParams,
    pub v_set: f64,
    pub omega_b: f64,
    pub omega_n: f64,
}

impl GfmDevice {
    pub fn new(
        id: impl Into<String>,
        bus: usize,
        params: GfmParams,
        v_set: f64,
        omega_b: f64,
        omega_n: f64,
    ) -> Result<Self, DeviceError> {
        let id = id.into();
        params.validate(&id)?;
        Ok(GfmDevice { id, bus, params, v_set, omega_b, omega_n })
    }

    fn is_vsm(&self) -> bool {
        self.params.variant == GfmVariant::Vsm
    }

    fn dc_offset(&self) -> usize {
        if self.is_vsm() { 2 } else { 1 }
    }

    /// Control-law angle rate alpha\' at this evaluation point, rad/s.
    pub fn alpha_rate(&self, sigma: &[f64], p_alg: f64) -> f64 {
        let p = &self.params;
        if self.is_vsm() {
            sigma[1]
        } else {
            (p.p_ref - p_alg - p.h_alpha * sigma[0]) / p.d_alpha
        }
    }

    fn i_sq(&self, p_alg: f64, q_alg: f64, v_bus: f64) -> f64 {
        (p_alg * p_alg + q_alg * q_alg) / (v_bus * v_bus)
    }
}

impl DeviceModel for GfmDevice {
    fn id(&self) -> &str {
        &self.id
    }

    fn bus(&self) -> Option<usize> {
        Some(self.bus)
    }

    fn n_states(&self) -> usize {
        if self.is_vsm() { 4 } else { 3 }
    }

    fn state_names(&self) -> Vec<String> {
        let mut n = vec!["alpha".to_string()];
        if self.is_vsm() {
            n.push("omega_v".to_string());
        }
        n.push("v_dc".to_string());
        n.push("i_dc".to_string());
        n
    }

    fn t_diag(&self) -> Vec<f64> {
        let p = &self.params;
        let mut t = vec![if self.is_vsm() { 1.0 } else { p.d_alpha }];
        if self.is_vsm() {
            t.push(p.m_alpha);
        }
        t.push(p.c_dc);
        t.push(p.t_dc);
        t
    }

    fn deriv(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> Vec<f64> {
        let p = &self.params;
        let k = self.dc_offset();
        let v_dc = sigma[k];
        let i_dc = sigma[k + 1];
        let mut out = Vec::with_capacity(self.n_states());
        if self.is_vsm() {
            out.push(sigma[1]);
            out.push(
                (p.p_ref - inp.p_alg - p.d_alpha * sigma[1] - p.h_alpha * sigma[0]) / p.m_alpha,
            );
        } else {
            out.push((p.p_ref - inp.p_alg - p.h_alpha * sigma[0]) / p.d_alpha);
        }
        let draw = inp.p_alg + p.r_f * self.i_sq(inp.p_alg, inp.q_alg, bus.v);
        out.push((i_dc - draw / v_dc - p.g_dc * v_dc) / p.c_dc);
        out.push((p.i_dc0 + (p.v_dc_ref - v_dc) / p.r_dc - i_dc) / p.t_dc);
        out
    }

    fn deriv_jacobian(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> DerivJacobian {
        let p = &self.params;
        let m = self.n_states();
        let k = self.dc_offset();
        let mut j = DerivJacobian::zeros(m);
        if self.is_vsm() {
            j.d_sigma[(0, 1)] = 1.0;
            j.d_sigma[(1, 0)] = -p.h_alpha / p.m_alpha;
            j.d_sigma[(1, 1)] = -p.d_alpha / p.m_alpha;
            j.d_p_alg[1] = -1.0 / p.m_alpha;
        } else {
            j.d_sigma[(0, 0)] = -p.h_alpha / p.d_alpha;
            j.d_p_alg[0] = -1.0 / p.d_alpha;
        }
        let v_dc = sigma[k];
        let i_sq = self.i_sq(inp.p_alg, inp.q_alg, bus.v);
        let draw = inp.p_alg + p.r_f * i_sq;
        // v_dc'
        j.d_sigma[(k, k)] = (draw / (v_dc * v_dc) - p.g_dc) / p.c_dc;
        j.d_sigma[(k, k + 1)] = 1.0 / p.c_dc;
        j.d_p_alg[k] = -(1.0 + 2.0 * p.r_f * inp.p_alg / (bus.v * bus.v)) / (v_dc * p.c_dc);
        j.d_q_alg[k] = -(2.0 * p.r_f * inp.q_alg / (bus.v * bus.v)) / (v_dc * p.c_dc);
        j.d_v[k] = (2.0 * p.r_f * i_sq / bus.v) / (v_dc * p.c_dc);
        // i_dc'
        j.d_sigma[(k + 1, k)] = -1.0 / (p.r_dc * p.t_dc);
        j.d_sigma[(k + 1, k + 1)] = -1.0 / p.t_dc;
        j
    }

    fn injection(&self, _sigma: &[f64], _bus: BusVt, inp: &DeviceInputs) -> (f64, f64) {
        // both sides algebraic; returned for completeness
        (inp.p_alg, inp.q_alg)
    }

    fn injection_jacobian(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> InjectionJacobian {
        InjectionJacobian::zeros(self.n_states())
    }

    fn reactive_mode(&self) -> ReactiveMode {
        ReactiveMode::VoltageControl { v_set: self.v_set }
    }

    fn forms_angle(&self) -> Option<usize> {
        Some(0)
    }

    fn power_split(&self, sigma: &[f64], _bus: BusVt, inp: &DeviceInputs) -> PowerSplit {
        let p = &self.params;
        let p_s = if self.is_vsm() {
            p.p_ref - p.h_alpha * sigma[0] - p.d_alpha * sigma[1]
        } else {
            p.p_ref - p.h_alpha * sigma[0]
        };
        PowerSplit { p_s, p_t: inp.p_alg - p_s, p_total: inp.p_alg }
    }

    fn slack_info(&self) -> Option<SlackInfo> {
        Some(SlackInfo { n_states: self.n_states(), dynamic: true, local_angle: true })
    }

    fn candidate_channel(&self) -> Option<(&'static str, CandidateClass)> {
        Some(("freq", CandidateClass::Frequency))
    }

    fn extra_channels(&self) -> Vec<&'static str> {
        vec!["freq"]
    }

    fn eval_extra(&self, sigma: &[f64], _bus: BusVt, inp: &DeviceInputs) -> Vec<f64> {
        vec![self.omega_n + self.alpha_rate(sigma, inp.p_alg) / self.omega_b]
    }
}
