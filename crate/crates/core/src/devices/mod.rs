//! Device DAE models in the definition-box form: each device exposes states
//! `sigma_h`, a residual `f_h(sigma_h, theta_h, v_h)`, a diagonal `T_h`, its
//! power injection and the source/transient decomposition `p = p_s + p_t`.
//!
//! Sign convention: the decomposition identity `p = p_s + p_t` is normative.
//! Where the source formulas carry the opposite stored-energy sign, the sign
//! is folded into `p_t` so the identity holds exactly at every evaluation
//! point; the stored-energy convention is still available through
//! [`PowerSplit::p_t_stored`].

pub mod agc;
pub mod gfl;
pub mod gfm;
pub mod governor;
pub mod ideal_slack;
pub mod machine;
pub mod rlc;

pub use agc::{agc_steady_injection, eval_agc, AgcDevice, AgcParams};
pub use gfl::{eval_pll, gfl_frame_transform, GflDevice, GflParams};
pub use gfm::{GfmDevice, GfmParams, GfmVariant};
pub use governor::{eval_governor, GovernorMode, GovernorParams};
pub use ideal_slack::{eval_ideal_slack, IdealSlackDevice, IdealSlackMode, IdealSlackParams};
pub use machine::{coi_speed, eval_machine, machine_power_split, MachineDevice, MachineParams};
pub use rlc::{eval_rlc_load, load_power_split, RlcLoadDevice, RlcLoadParams};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("empty machine set")]
    EmptyMachineSet,
    #[error("dc droop requested without a dc source on device {0}")]
    DcSourceAbsent(String),
    #[error("device {device}: initialization infeasible ({reason})")]
    InitInfeasible { device: String, reason: String },
    #[error("invalid parameter on device {device}: {reason}")]
    InvalidParameter { device: String, reason: String },
}

/// Source/transient decomposition of a device power injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSplit {
    pub p_s: f64,
    pub p_t: f64,
    pub p_total: f64,
}

impl PowerSplit {
    pub fn new(p_s: f64, p_t: f64) -> Self {
        PowerSplit { p_s, p_t, p_total: p_s + p_t }
    }

    /// Transient power in the stored-energy convention (positive when energy
    /// flows into the device storage), the sign used by the source formulas
    /// for converter models.
    pub fn p_t_stored(&self) -> f64 {
        -self.p_t
    }
}

/// Bus interface quantities seen by a device.
#[derive(Debug, Clone, Copy, Default)]
pub struct BusVt {
    pub v: f64,
    pub theta: f64,
}

/// System-level inputs a device residual may depend on, beyond its own
/// states and bus.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeviceInputs {
    /// Common reference speed (COI or fallback), pu.
    pub omega_s: f64,
    /// AGC output signal shared with governors.
    pub xi: f64,
    /// Device active injection when it is an algebraic variable (GFM).
    pub p_alg: f64,
    /// Device reactive injection when it is an algebraic variable.
    pub q_alg: f64,
    /// Extra transient power frozen from the previous accepted step
    /// (GFL ac-filter stored-energy terms).
    pub frozen_pt: f64,
}

/// Partial derivatives of the state derivative vector.
#[derive(Debug, Clone)]
pub struct DerivJacobian {
    pub d_sigma: DMatrix<f64>,
    pub d_v: DVector<f64>,
    pub d_theta: DVector<f64>,
    pub d_omega_s: DVector<f64>,
    pub d_xi: DVector<f64>,
    pub d_p_alg: DVector<f64>,
    pub d_q_alg: DVector<f64>,
}

impl DerivJacobian {
    pub fn zeros(m: usize) -> Self {
        DerivJacobian {
            d_sigma: DMatrix::zeros(m, m),
            d_v: DVector::zeros(m),
            d_theta: DVector::zeros(m),
            d_omega_s: DVector::zeros(m),
            d_xi: DVector::zeros(m),
            d_p_alg: DVector::zeros(m),
            d_q_alg: DVector::zeros(m),
        }
    }
}

/// Partial derivatives of the computed (p, q) injection.
#[derive(Debug, Clone, Default)]
pub struct InjectionJacobian {
    pub dp_sigma: Vec<f64>,
    pub dp_v: f64,
    pub dp_theta: f64,
    pub dq_sigma: Vec<f64>,
    pub dq_v: f64,
    pub dq_theta: f64,
}

impl InjectionJacobian {
    pub fn zeros(m: usize) -> Self {
        InjectionJacobian {
            dp_sigma: vec![0.0; m],
            dq_sigma: vec![0.0; m],
            ..Default::default()
        }
    }
}

/// How the reactive side of a device closes the bus equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReactiveMode {
    /// q is an algebraic variable; the device holds its bus at `v_set`.
    VoltageControl { v_set: f64 },
    /// q computed from device states/parameters.
    Computed,
}

/// Slack-relevant metadata for the taxonomy classifier.
#[derive(Debug, Clone, Copy)]
pub struct SlackInfo {
    pub n_states: usize,
    /// any nonzero row in T_h
    pub dynamic: bool,
    /// device constrains its own bus angle rather than a shared reference
    pub local_angle: bool,
}

/// Unit class of the candidate slack variable, used by the capability
/// checker to compare only commensurable quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateClass {
    Frequency,
    Power,
}

/// Uniform interface over all device DAE models.
pub trait DeviceModel: Send + Sync {
    fn id(&self) -> &str;
    /// Bus id this device is attached to; `None` for system-level devices.
    fn bus(&self) -> Option<usize>;
    fn n_states(&self) -> usize;
    fn state_names(&self) -> Vec<String>;
    /// Diagonal of T_h; zero entries mark algebraic rows.
    fn t_diag(&self) -> Vec<f64>;

    /// State derivatives sigma' = T^-1 f(sigma, theta, v, inputs).
    fn deriv(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> Vec<f64>;
    fn deriv_jacobian(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> DerivJacobian;

    /// Computed power injection (p, q) into the bus. Ignored for the active
    /// side when [`DeviceModel::forms_angle`] is true (p is then algebraic),
    /// and for the reactive side under voltage control.
    fn injection(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> (f64, f64);
    fn injection_jacobian(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> InjectionJacobian;

    fn reactive_mode(&self) -> ReactiveMode {
        ReactiveMode::Computed
    }

    /// GFM-style devices pin their bus angle to one of their states and
    /// leave the active injection algebraic. Returns the state index used
    /// as the frame/bus angle.
    fn forms_angle(&self) -> Option<usize> {
        None
    }

    /// Source/transient decomposition at an evaluation point.
    fn power_split(&self, sigma: &[f64], bus: BusVt, inp: &DeviceInputs) -> PowerSplit;

    /// None for devices with no slack capability (passive loads).
    fn slack_info(&self) -> Option<SlackInfo> {
        None
    }

    /// Candidate slack variable channel recorded alongside the states.
    /// Frequency-class candidates are in pu of synchronous speed.
    fn candidate_channel(&self) -> Option<(&'static str, CandidateClass)> {
        None
    }

    /// Extra recorded channels beyond the states (candidate frequency, ...).
    fn extra_channels(&self) -> Vec<&'static str> {
        vec![]
    }

    fn eval_extra(&self, _sigma: &[f64], _bus: BusVt, _inp: &DeviceInputs) -> Vec<f64> {
        vec![]
    }

    /// Machine speed and inertia for the COI aggregation, when applicable.
    fn coi_weight(&self, _sigma: &[f64]) -> Option<(f64, f64)> {
        None
    }

    /// True for system-level coordinators (AGC) that couple local devices
    /// into a network-wide slack ensemble.
    fn network_wide_coordinator(&self) -> bool {
        false
    }
}
