//! Time-domain integration of the coupled device/network DAE.
//!
//! The system vector is split into differential states `x` (concatenated
//! device states) and algebraic variables `y = [theta, v, q_alg, p_alg,
//! omega_s]`. Each step solves the implicit trapezoidal update together with
//! the network algebraic equations by a full Newton iteration with an
//! analytic Jacobian assembled from the per-device partials.

mod trajectory;

pub use trajectory::{detect_steady_state, Trajectory};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::devices::{
    AgcDevice, BusVt, DeviceError, DeviceInputs, DeviceModel, GflDevice, GfmDevice, GfmVariant,
    IdealSlackDevice, IdealSlackMode, MachineDevice, PowerSplit, ReactiveMode, RlcLoadDevice,
};
use crate::net::{build_admittance, injection_at_index, AdmittanceMatrix, NetError, Network};
use crate::powerflow::{
    solve_powerflow_with, BusSchedule, PfError, PowerFlowSolution, SlackMode, SlackSpec,
};

pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 20;
const PF_TOL: f64 = 1e-10;
const PF_MAX_ITER: usize = 50;

#[derive(Debug, Error)]
pub enum DynError {
    #[error(transparent)]
    Pf(#[from] PfError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("initialization is inconsistent (residual {0:.3e})")]
    InitResidual(f64),
    #[error("unknown device '{0}' referenced by an event")]
    UnknownDevice(String),
    #[error("unknown parameter '{param}' on device '{device}'")]
    UnknownParam { device: String, param: String },
    #[error("no scalable load at bus {0}")]
    NoLoadAtBus(usize),
}

/// Constant-power load attached directly to a bus; events rescale it.
#[derive(Debug, Clone)]
pub struct StaticLoad {
    pub bus: usize,
    /// Consumed active power at scale 1, pu.
    pub p: f64,
    /// Consumed reactive power at scale 1, pu.
    pub q: f64,
    pub scale: f64,
}

/// Concrete device container so events can mutate parameters in place.
#[derive(Debug, Clone)]
pub enum Device {
    Machine(MachineDevice),
    Gfm(GfmDevice),
    Gfl(GflDevice),
    RlcLoad(RlcLoadDevice),
    IdealSlack(IdealSlackDevice),
    Agc(AgcDevice),
}

impl Device {
    pub fn model(&self) -> &dyn DeviceModel {
        match self {
            Device::Machine(d) => d,
            Device::Gfm(d) => d,
            Device::Gfl(d) => d,
            Device::RlcLoad(d) => d,
            Device::IdealSlack(d) => d,
            Device::Agc(d) => d,
        }
    }

    /// True for power sources that can absorb the slack share allocated to
    /// their bus by the initializing power flow.
    fn is_source(&self) -> bool {
        !matches!(self, Device::RlcLoad(_) | Device::Agc(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FreqSource {
    /// Inertia-weighted centre of inertia over the machines.
    Machines,
    /// Inertia-weighted virtual speeds of the VSM converters.
    Vsm,
    /// Mean virtual frequency of the droop grid-forming converters.
    DroopGfm,
    /// PLL frequency estimate of the largest grid-following converter.
    Pll(usize),
    /// No frequency-forming device: omega_s pinned at nominal.
    Nominal,
}

/// Variable/equation layout of the assembled DAE.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    x_off: Vec<usize>,
    x_dim: usize,
    /// Per device: y index of its algebraic reactive injection.
    q_var: Vec<Option<usize>>,
    /// Per device: y index of its algebraic active injection.
    p_var: Vec<Option<usize>>,
    ws: usize,
    y_dim: usize,
}

impl Layout {
    fn theta(&self, b: usize) -> usize {
        b
    }
    fn v(&self, b: usize) -> usize {
        self.n + b
    }
}

/// Dynamic state at one time point.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub t: f64,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    /// Per-device transient power frozen from the previous accepted step.
    pub frozen: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    /// Multiply every static load at the bus by `factor`.
    ScaleLoad { bus: usize, factor: f64 },
    /// Set a named scalar parameter on a device.
    SetParam { device: String, param: String, value: f64 },
    /// Freeze the device states and drop its injections.
    Disconnect { device: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub action: EventAction,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub t_end: f64,
    pub dt: f64,
    pub events: Vec<Event>,
}

/// Newton failure diagnostics for one rejected step.
#[derive(Debug, Clone)]
pub struct StepFailure {
    pub t: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Worst active-power mismatches, (bus id, |mismatch|), largest first.
    pub worst_buses: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub enum RunOutcome {
    Completed,
    /// The algebraic/Newton system stopped admitting a solution; the
    /// trajectory holds every accepted sample up to the failure.
    Diverged(StepFailure),
}

#[derive(Debug)]
pub struct RunResult {
    pub trajectory: Trajectory,
    pub outcome: RunOutcome,
}

/// Assembled network + device system.
#[derive(Debug, Clone)]
pub struct SystemModel {
    net: Network,
    ybus: AdmittanceMatrix,
    devices: Vec<Device>,
    disconnected: Vec<bool>,
    loads: Vec<StaticLoad>,
    /// Per device: resolved bus position.
    dev_bus: Vec<Option<usize>>,
    lay: Layout,
    /// Global x index of the AGC integrator, if present.
    agc_x: Option<usize>,
    freq: FreqSource,
    pub omega_n: f64,
}

impl SystemModel {
    pub fn build(
        net: Network,
        devices: Vec<Device>,
        loads: Vec<StaticLoad>,
    ) -> Result<SystemModel, DynError> {
        let ybus = build_admittance(&net)?;
        let n = net.n_buses();

        let mut dev_bus = Vec::with_capacity(devices.len());
        for d in &devices {
            match d.model().bus() {
                Some(id) => {
                    let i = net
                        .index_of(id)
                        .ok_or_else(|| DynError::Config(format!("device '{}' references unknown bus {}", d.model().id(), id)))?;
                    dev_bus.push(Some(i));
                }
                None => dev_bus.push(None),
            }
        }
        for l in &loads {
            if net.index_of(l.bus).is_none() {
                return Err(DynError::Config(format!("load references unknown bus {}", l.bus)));
            }
        }

        // Per-bus exclusivity of the algebraic constraints.
        let mut vctl = vec![false; n];
        let mut forming = vec![false; n];
        let mut integral = 0usize;
        let mut agc = 0usize;
        for (di, d) in devices.iter().enumerate() {
            if let ReactiveMode::VoltageControl { .. } = d.model().reactive_mode() {
                let b = dev_bus[di].unwrap();
                if vctl[b] {
                    return Err(DynError::Config(format!(
                        "two voltage-controlling devices on bus {}",
                        net.buses()[b].id
                    )));
                }
                vctl[b] = true;
            }
            if d.model().forms_angle().is_some() {
                let b = dev_bus[di].unwrap();
                if forming[b] {
                    return Err(DynError::Config(format!(
                        "two angle-forming devices on bus {}",
                        net.buses()[b].id
                    )));
                }
                forming[b] = true;
            }
            if let Device::Machine(m) = d {
                if m.governor.map(|g| g.mode == crate::devices::GovernorMode::Integral).unwrap_or(false) {
                    integral += 1;
                }
            }
            if matches!(d, Device::Agc(_)) {
                agc += 1;
            }
        }
        if integral > 1 {
            // with two integral governors the steady-state torque allocation
            // between the machines is undetermined
            return Err(DynError::Config(
                "more than one integral governor: steady-state injections undetermined".into(),
            ));
        }
        if agc > 1 {
            return Err(DynError::Config("more than one AGC coordinator".into()));
        }

        // x layout
        let mut x_off = Vec::with_capacity(devices.len());
        let mut x_dim = 0usize;
        let mut agc_x = None;
        for d in &devices {
            x_off.push(x_dim);
            if matches!(d, Device::Agc(_)) {
                agc_x = Some(x_dim);
            }
            x_dim += d.model().n_states();
        }

        // y layout: [theta, v, q_alg..., p_alg..., omega_s]
        let mut q_var = vec![None; devices.len()];
        let mut p_var = vec![None; devices.len()];
        let mut next = 2 * n;
        for (di, d) in devices.iter().enumerate() {
            if let ReactiveMode::VoltageControl { .. } = d.model().reactive_mode() {
                q_var[di] = Some(next);
                next += 1;
            }
        }
        for (di, d) in devices.iter().enumerate() {
            if d.model().forms_angle().is_some() {
                p_var[di] = Some(next);
                next += 1;
            }
        }
        let lay = Layout { n, x_off, x_dim, q_var, p_var, ws: next, y_dim: next + 1 };

        let freq = Self::pick_freq_source(&devices);
        let omega_n = devices
            .iter()
            .find_map(|d| match d {
                Device::Machine(m) => Some(m.params.omega_n),
                Device::Gfm(g) => Some(g.omega_n),
                Device::Gfl(g) => Some(g.omega_n),
                _ => None,
            })
            .unwrap_or(1.0);

        Ok(SystemModel {
            disconnected: vec![false; devices.len()],
            net,
            ybus,
            devices,
            loads,
            dev_bus,
            lay,
            agc_x,
            freq,
            omega_n,
        })
    }

    fn pick_freq_source(devices: &[Device]) -> FreqSource {
        if devices.iter().any(|d| matches!(d, Device::Machine(_))) {
            return FreqSource::Machines;
        }
        if devices
            .iter()
            .any(|d| matches!(d, Device::Gfm(g) if g.params.variant == GfmVariant::Vsm))
        {
            return FreqSource::Vsm;
        }
        if devices.iter().any(|d| matches!(d, Device::Gfm(_))) {
            return FreqSource::DroopGfm;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in devices.iter().enumerate() {
            if let Device::Gfl(g) = d {
                if best.map(|(_, p)| g.params.p0 > p).unwrap_or(true) {
                    best = Some((i, g.params.p0));
                }
            }
        }
        match best {
            Some((i, _)) => FreqSource::Pll(i),
            None => FreqSource::Nominal,
        }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn n_x(&self) -> usize {
        self.lay.x_dim
    }

    pub fn n_y(&self) -> usize {
        self.lay.y_dim
    }

    pub fn device_index(&self, id: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.model().id() == id)
    }

    fn bus_vt(&self, di: usize, y: &DVector<f64>) -> BusVt {
        match self.dev_bus[di] {
            Some(b) => BusVt { v: y[self.lay.v(b)], theta: y[self.lay.theta(b)] },
            None => BusVt::default(),
        }
    }

    fn inputs(&self, di: usize, x: &DVector<f64>, y: &DVector<f64>, frozen: &[f64]) -> DeviceInputs {
        DeviceInputs {
            omega_s: y[self.lay.ws],
            xi: self.agc_x.map(|k| x[k]).unwrap_or(0.0),
            p_alg: self.lay.p_var[di].map(|k| y[k]).unwrap_or(0.0),
            q_alg: self.lay.q_var[di].map(|k| y[k]).unwrap_or(0.0),
            frozen_pt: frozen[di],
        }
    }

    fn sigma<'a>(&self, di: usize, x: &'a DVector<f64>) -> &'a [f64] {
        let o = self.lay.x_off[di];
        &x.as_slice()[o..o + self.devices[di].model().n_states()]
    }

    /// All device state derivatives at one evaluation point.
    pub fn derivs(&self, x: &DVector<f64>, y: &DVector<f64>, frozen: &[f64]) -> DVector<f64> {
        let mut xd = DVector::zeros(self.lay.x_dim);
        for di in 0..self.devices.len() {
            if self.disconnected[di] {
                continue;
            }
            let d = self.devices[di].model();
            let f = d.deriv(self.sigma(di, x), self.bus_vt(di, y), &self.inputs(di, x, y, frozen));
            let o = self.lay.x_off[di];
            for (k, v) in f.iter().enumerate() {
                xd[o + k] = *v;
            }
        }
        xd
    }

    /// Active/reactive injection of a device including algebraic channels.
    fn dev_injection(&self, di: usize, x: &DVector<f64>, y: &DVector<f64>, frozen: &[f64]) -> (f64, f64) {
        if self.disconnected[di] {
            return (0.0, 0.0);
        }
        let d = self.devices[di].model();
        let (mut p, mut q) =
            d.injection(self.sigma(di, x), self.bus_vt(di, y), &self.inputs(di, x, y, frozen));
        if let Some(k) = self.lay.p_var[di] {
            p = y[k];
        }
        if let Some(k) = self.lay.q_var[di] {
            q = y[k];
        }
        (p, q)
    }

    /// Algebraic residual rows: [P(n), Q(n), v_set, angle, omega_s].
    pub fn algebraic_residual(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        frozen: &[f64],
    ) -> DVector<f64> {
        let n = self.lay.n;
        let mut r = DVector::zeros(self.lay.y_dim);
        let v = &y.as_slice()[n..2 * n];
        let th = &y.as_slice()[0..n];
        for b in 0..n {
            let (pc, qc) = injection_at_index(&self.ybus, v, th, b);
            r[b] = -pc;
            r[n + b] = -qc;
        }
        for l in &self.loads {
            let b = self.net.index_of(l.bus).unwrap();
            r[b] -= l.p * l.scale;
            r[n + b] -= l.q * l.scale;
        }
        let mut vrow = 2 * n;
        for di in 0..self.devices.len() {
            if let Some(b) = self.dev_bus[di] {
                let (p, q) = self.dev_injection(di, x, y, frozen);
                r[b] += p;
                r[n + b] += q;
            }
            if let ReactiveMode::VoltageControl { v_set } = self.devices[di].model().reactive_mode() {
                let b = self.dev_bus[di].unwrap();
                r[vrow] = if self.disconnected[di] {
                    // bus voltage released; the orphaned q variable is pinned
                    y[self.lay.q_var[di].unwrap()]
                } else {
                    y[self.lay.v(b)] - v_set
                };
                vrow += 1;
            }
        }
        for di in 0..self.devices.len() {
            if let Some(si) = self.devices[di].model().forms_angle() {
                let b = self.dev_bus[di].unwrap();
                r[vrow] = if self.disconnected[di] {
                    y[self.lay.p_var[di].unwrap()]
                } else {
                    y[self.lay.theta(b)] - x[self.lay.x_off[di] + si]
                };
                vrow += 1;
            }
        }
        r[self.lay.ws] = self.freq_residual(x, y);
        r
    }

    fn freq_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let ws = y[self.lay.ws];
        match self.freq {
            FreqSource::Machines => {
                let mut num = 0.0;
                let mut den = 0.0;
                for di in 0..self.devices.len() {
                    if self.disconnected[di] {
                        continue;
                    }
                    if let Some((m, w)) = self.devices[di].model().coi_weight(self.sigma(di, x)) {
                        num += m * w;
                        den += m;
                    }
                }
                num - ws * den
            }
            FreqSource::Vsm => {
                let mut num = 0.0;
                let mut den = 0.0;
                for (di, d) in self.devices.iter().enumerate() {
                    if self.disconnected[di] {
                        continue;
                    }
                    if let Device::Gfm(g) = d {
                        if g.params.variant == GfmVariant::Vsm {
                            let s = self.sigma(di, x);
                            num += g.params.m_alpha * (self.omega_n + s[1] / g.omega_b);
                            den += g.params.m_alpha;
                        }
                    }
                }
                num - ws * den
            }
            FreqSource::DroopGfm => {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for (di, d) in self.devices.iter().enumerate() {
                    if self.disconnected[di] {
                        continue;
                    }
                    if let Device::Gfm(g) = d {
                        let s = self.sigma(di, x);
                        let p_alg = y[self.lay.p_var[di].unwrap()];
                        sum += g.alpha_rate(s, p_alg) / g.omega_b;
                        cnt += 1.0;
                    }
                }
                ws - self.omega_n - if cnt > 0.0 { sum / cnt } else { 0.0 }
            }
            FreqSource::Pll(di) => {
                if let Device::Gfl(g) = &self.devices[di] {
                    let s = self.sigma(di, x);
                    let th = y[self.lay.theta(self.dev_bus[di].unwrap())];
                    let dw = g.params.ki_pll * s[0] + g.params.kp_pll * (th - s[1]);
                    ws - self.omega_n - dw
                } else {
                    unreachable!()
                }
            }
            FreqSource::Nominal => ws - self.omega_n,
        }
    }

    /// Trapezoidal + algebraic residual of a candidate step endpoint.
    pub fn step_residual(
        &self,
        x_new: &DVector<f64>,
        y_new: &DVector<f64>,
        x_old: &DVector<f64>,
        xd_old: &DVector<f64>,
        dt: f64,
        frozen: &[f64],
    ) -> DVector<f64> {
        let xd_new = self.derivs(x_new, y_new, frozen);
        let nx = self.lay.x_dim;
        let mut r = DVector::zeros(nx + self.lay.y_dim);
        for di in 0..self.devices.len() {
            let o = self.lay.x_off[di];
            let m = self.devices[di].model().n_states();
            for k in o..o + m {
                r[k] = if self.disconnected[di] {
                    x_new[k] - x_old[k]
                } else {
                    x_new[k] - x_old[k] - 0.5 * dt * (xd_old[k] + xd_new[k])
                };
            }
        }
        let ra = self.algebraic_residual(x_new, y_new, frozen);
        r.rows_mut(nx, self.lay.y_dim).copy_from(&ra);
        r
    }

    /// Polar network power partials: (dp/dtheta, dp/dv, dq/dtheta, dq/dv).
    fn network_partials(
        &self,
        v: &[f64],
        th: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.lay.n;
        let mut dpt = DMatrix::zeros(n, n);
        let mut dpv = DMatrix::zeros(n, n);
        let mut dqt = DMatrix::zeros(n, n);
        let mut dqv = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                let yik = self.ybus.get(i, k);
                let (g, b) = (yik.re, yik.im);
                let (s, c) = (th[i] - th[k]).sin_cos();
                if k != i {
                    dpt[(i, k)] = v[i] * v[k] * (g * s - b * c);
                    dpt[(i, i)] += v[i] * v[k] * (-g * s + b * c);
                    dpv[(i, k)] = v[i] * (g * c + b * s);
                    dpv[(i, i)] += v[k] * (g * c + b * s);
                    dqt[(i, k)] = v[i] * v[k] * (-g * c - b * s);
                    dqt[(i, i)] += v[i] * v[k] * (g * c + b * s);
                    dqv[(i, k)] = v[i] * (g * s - b * c);
                    dqv[(i, i)] += v[k] * (g * s - b * c);
                } else {
                    dpv[(i, i)] += 2.0 * v[i] * g;
                    dqv[(i, i)] += -2.0 * v[i] * b;
                }
            }
        }
        (dpt, dpv, dqt, dqv)
    }

    /// Full analytic Jacobian of [`SystemModel::step_residual`] wrt
    /// `[x_new; y_new]`.
    pub fn step_jacobian(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        dt: f64,
        frozen: &[f64],
    ) -> DMatrix<f64> {
        let nx = self.lay.x_dim;
        let n = self.lay.n;
        let dim = nx + self.lay.y_dim;
        let mut j = DMatrix::zeros(dim, dim);
        let yc = |k: usize| nx + k; // y index -> global column
        let v = &y.as_slice()[n..2 * n];
        let th = &y.as_slice()[0..n];

        // network part of the P/Q balance rows
        let (dpt, dpv, dqt, dqv) = self.network_partials(v, th);
        for i in 0..n {
            for k in 0..n {
                j[(nx + i, yc(self.lay.theta(k)))] = -dpt[(i, k)];
                j[(nx + i, yc(self.lay.v(k)))] = -dpv[(i, k)];
                j[(nx + n + i, yc(self.lay.theta(k)))] = -dqt[(i, k)];
                j[(nx + n + i, yc(self.lay.v(k)))] = -dqv[(i, k)];
            }
        }

        let mut vrow = nx + 2 * n;
        for di in 0..self.devices.len() {
            let d = self.devices[di].model();
            let m = d.n_states();
            let o = self.lay.x_off[di];
            if self.disconnected[di] {
                for k in 0..m {
                    j[(o + k, o + k)] = 1.0;
                }
                if let Some(qk) = self.lay.q_var[di] {
                    j[(vrow, yc(qk))] = 1.0;
                    vrow += 1;
                }
                continue;
            }
            let bus = self.bus_vt(di, y);
            let inp = self.inputs(di, x, y, frozen);
            let sigma = self.sigma(di, x);
            let dj = d.deriv_jacobian(sigma, bus, &inp);
            let h = 0.5 * dt;
            for k in 0..m {
                let row = o + k;
                j[(row, row)] += 1.0;
                for l in 0..m {
                    j[(row, o + l)] -= h * dj.d_sigma[(k, l)];
                }
                if let Some(b) = self.dev_bus[di] {
                    j[(row, yc(self.lay.theta(b)))] -= h * dj.d_theta[k];
                    j[(row, yc(self.lay.v(b)))] -= h * dj.d_v[k];
                }
                j[(row, yc(self.lay.ws))] -= h * dj.d_omega_s[k];
                if let Some(xk) = self.agc_x {
                    j[(row, xk)] -= h * dj.d_xi[k];
                }
                if let Some(pk) = self.lay.p_var[di] {
                    j[(row, yc(pk))] -= h * dj.d_p_alg[k];
                }
                if let Some(qk) = self.lay.q_var[di] {
                    j[(row, yc(qk))] -= h * dj.d_q_alg[k];
                }
            }
            // injection contributions to the balance rows
            if let Some(b) = self.dev_bus[di] {
                let prow = nx + b;
                let qrow = nx + n + b;
                match self.lay.p_var[di] {
                    Some(pk) => j[(prow, yc(pk))] += 1.0,
                    None => {
                        let ij = d.injection_jacobian(sigma, bus, &inp);
                        for l in 0..m {
                            j[(prow, o + l)] += ij.dp_sigma[l];
                        }
                        j[(prow, yc(self.lay.theta(b)))] += ij.dp_theta;
                        j[(prow, yc(self.lay.v(b)))] += ij.dp_v;
                        match self.lay.q_var[di] {
                            Some(qk) => j[(qrow, yc(qk))] += 1.0,
                            None => {
                                for l in 0..m {
                                    j[(qrow, o + l)] += ij.dq_sigma[l];
                                }
                                j[(qrow, yc(self.lay.theta(b)))] += ij.dq_theta;
                                j[(qrow, yc(self.lay.v(b)))] += ij.dq_v;
                            }
                        }
                    }
                }
                if self.lay.p_var[di].is_some() {
                    if let Some(qk) = self.lay.q_var[di] {
                        j[(qrow, yc(qk))] += 1.0;
                    }
                }
            }
            if self.lay.q_var[di].is_some() {
                let b = self.dev_bus[di].unwrap();
                j[(vrow, yc(self.lay.v(b)))] = 1.0;
                vrow += 1;
            }
        }
        for di in 0..self.devices.len() {
            if let Some(si) = self.devices[di].model().forms_angle() {
                if self.disconnected[di] {
                    j[(vrow, yc(self.lay.p_var[di].unwrap()))] = 1.0;
                } else {
                    let b = self.dev_bus[di].unwrap();
                    j[(vrow, yc(self.lay.theta(b)))] = 1.0;
                    j[(vrow, self.lay.x_off[di] + si)] = -1.0;
                }
                vrow += 1;
            }
        }
        self.freq_jacobian(x, y, &mut j, nx);
        j
    }

    fn freq_jacobian(&self, x: &DVector<f64>, y: &DVector<f64>, j: &mut DMatrix<f64>, nx: usize) {
        let row = nx + self.lay.ws;
        let wcol = nx + self.lay.ws;
        match self.freq {
            FreqSource::Machines => {
                let mut den = 0.0;
                for (di, d) in self.devices.iter().enumerate() {
                    if self.disconnected[di] {
                        continue;
                    }
                    if let Device::Machine(m) = d {
                        j[(row, self.lay.x_off[di] + 1)] = m.params.m;
                        den += m.params.m;
                    }
                }
                j[(row, wcol)] = -den;
            }
            FreqSource::Vsm => {
                let mut den = 0.0;
                for (di, d) in self.devices.iter().enumerate() {
                    if self.disconnected[di] {
                        continue;
                    }
                    if let Device::Gfm(g) = d {
                        if g.params.variant == GfmVariant::Vsm {
                            j[(row, self.lay.x_off[di] + 1)] = g.params.m_alpha / g.omega_b;
                            den += g.params.m_alpha;
                        }
                    }
                }
                j[(row, wcol)] = -den;
            }
            FreqSource::DroopGfm => {
                j[(row, wcol)] = 1.0;
                let cnt = self
                    .devices
                    .iter()
                    .enumerate()
                    .filter(|(di, d)| matches!(d, Device::Gfm(_)) && !self.disconnected[*di])
                    .count() as f64;
                for (di, d) in self.devices.iter().enumerate() {
                    if self.disconnected[di] {
                        continue;
                    }
                    if let Device::Gfm(g) = d {
                        let s = 1.0 / (cnt * g.omega_b * g.params.d_alpha);
                        j[(row, self.lay.x_off[di])] += s * g.params.h_alpha;
                        j[(row, nx + self.lay.p_var[di].unwrap())] += s;
                    }
                }
            }
            FreqSource::Pll(di) => {
                if let Device::Gfl(g) = &self.devices[di] {
                    j[(row, wcol)] = 1.0;
                    let o = self.lay.x_off[di];
                    j[(row, o)] = -g.params.ki_pll;
                    j[(row, o + 1)] = g.params.kp_pll;
                    let b = self.dev_bus[di].unwrap();
                    j[(row, nx + self.lay.theta(b))] = -g.params.kp_pll;
                }
            }
            FreqSource::Nominal => {
                j[(row, wcol)] = 1.0;
            }
        }
        let _ = (x, y);
    }

    fn failure(&self, t: f64, it: usize, r: &DVector<f64>, nx: usize) -> StepFailure {
        let n = self.lay.n;
        let mut worst: Vec<(usize, f64)> = (0..n)
            .map(|b| (self.net.buses()[b].id, r[nx + b].abs()))
            .collect();
        worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        worst.truncate(3);
        let norm = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        StepFailure { t, iterations: it, residual_norm: norm, worst_buses: worst }
    }

    /// One implicit trapezoidal step of length `dt`. On success the state is
    /// advanced in place.
    pub fn step(&self, state: &mut SystemState, dt: f64) -> Result<(), StepFailure> {
        let nx = self.lay.x_dim;
        let xd_old = self.derivs(&state.x, &state.y, &state.frozen);
        let mut x = state.x.clone();
        let mut y = state.y.clone();
        let t_new = state.t + dt;
        let mut r = self.step_residual(&x, &y, &state.x, &xd_old, dt, &state.frozen);
        let pinned = self.gauge_pinned();
        for it in 0..NEWTON_MAX_ITER {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(self.failure(t_new, it, &DVector::zeros(nx + self.lay.y_dim), nx));
            }
            if r.amax() < NEWTON_TOL {
                state.t = t_new;
                state.x = x;
                state.y = y;
                return Ok(());
            }
            let j = self.step_jacobian(&x, &y, dt, &state.frozen);
            let rhs = -&r;
            // Islands formed only by grid-following converters without a dc
            // droop leave an exact rotational symmetry in the step equations
            // (uniform bus-angle shift tracked by the PLL states); the LU
            // factorization is then singular or near-singular and the
            // minimum-norm update keeps the angles closest to the previous
            // frame, mirroring the policy of solve_algebraic.
            let dz = if pinned {
                j.lu().solve(&rhs)
            } else {
                j.svd(true, true).solve(&rhs, 1e-10).ok()
            };
            let dz = match dz {
                Some(d) => d,
                None => return Err(self.failure(t_new, it, &r, nx)),
            };
            for k in 0..nx {
                x[k] += dz[k];
            }
            for k in 0..self.lay.y_dim {
                y[k] += dz[nx + k];
            }
            r = self.step_residual(&x, &y, &state.x, &xd_old, dt, &state.frozen);
        }
        Err(self.failure(t_new, NEWTON_MAX_ITER, &r, nx))
    }

    /// True when some connected device ties the network angles to its frozen
    /// states, removing the rotational gauge freedom of the pure algebraic
    /// problem.
    fn gauge_pinned(&self) -> bool {
        self.devices.iter().enumerate().any(|(di, d)| {
            !self.disconnected[di]
                && matches!(d, Device::Machine(_) | Device::Gfm(_) | Device::RlcLoad(_))
        })
    }

    /// Re-solve the algebraic equations for fixed differential states, used
    /// after a discrete event. Grid-following-only systems leave a
    /// rotational gauge freedom in the pure algebraic problem; the Newton
    /// update then uses the minimum-norm (pseudo-inverse) step, which keeps
    /// the angles closest to the pre-event frame.
    pub fn solve_algebraic(&self, state: &mut SystemState) -> Result<(), StepFailure> {
        let nx = self.lay.x_dim;
        let pinned = self.gauge_pinned();
        let mut y = state.y.clone();
        let mut r = self.algebraic_residual(&state.x, &y, &state.frozen);
        for it in 0..NEWTON_MAX_ITER {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(self.failure(state.t, it, &DVector::zeros(nx + self.lay.y_dim), nx));
            }
            if r.amax() < NEWTON_TOL {
                state.y = y;
                return Ok(());
            }
            let jf = self.step_jacobian(&state.x, &y, 0.0, &state.frozen);
            let ja = jf.view((nx, nx), (self.lay.y_dim, self.lay.y_dim)).into_owned();
            let rhs = -&r;
            let dz = if pinned {
                ja.lu().solve(&rhs)
            } else {
                ja.svd(true, true).solve(&rhs, 1e-10).ok()
            };
            let dz = match dz {
                Some(d) => d,
                None => {
                    let mut full = DVector::zeros(nx + self.lay.y_dim);
                    full.rows_mut(nx, self.lay.y_dim).copy_from(&r);
                    return Err(self.failure(state.t, it, &full, nx));
                }
            };
            y += dz;
            r = self.algebraic_residual(&state.x, &y, &state.frozen);
        }
        let mut full = DVector::zeros(nx + self.lay.y_dim);
        full.rows_mut(nx, self.lay.y_dim).copy_from(&r);
        Err(self.failure(state.t, NEWTON_MAX_ITER, &full, nx))
    }

    /// Restore algebraic consistency right after a discrete event. Systems
    /// whose frozen states pin the bus angles admit an exact re-solve; for
    /// grid-following-only islands the frozen injections over-determine the
    /// algebraic problem, so the discontinuity is left to the next implicit
    /// step, which adjusts the differential states jointly.
    fn resolve_after_event(&self, state: &mut SystemState) -> Result<(), StepFailure> {
        if self.gauge_pinned() {
            self.solve_algebraic(state)
        } else {
            Ok(())
        }
    }

    pub fn apply_event(&mut self, action: &EventAction) -> Result<(), DynError> {
        match action {
            EventAction::ScaleLoad { bus, factor } => {
                let mut hit = false;
                for l in &mut self.loads {
                    if l.bus == *bus {
                        l.scale *= factor;
                        hit = true;
                    }
                }
                if !hit {
                    return Err(DynError::NoLoadAtBus(*bus));
                }
                Ok(())
            }
            EventAction::SetParam { device, param, value } => {
                let di = self
                    .device_index(device)
                    .ok_or_else(|| DynError::UnknownDevice(device.clone()))?;
                let unknown = || DynError::UnknownParam {
                    device: device.clone(),
                    param: param.clone(),
                };
                match (&mut self.devices[di], param.as_str()) {
                    (Device::Machine(m), "tau_m0") => m.params.tau_m0 = *value,
                    (Device::Machine(m), "tau_m_ref") => match &mut m.governor {
                        Some(g) => g.tau_m_ref = *value,
                        None => return Err(unknown()),
                    },
                    (Device::Gfl(g), "p0") => g.params.p0 = *value,
                    (Device::Gfl(g), "q0") => g.params.q0 = *value,
                    (Device::Gfl(g), "i_dc0") => g.params.i_dc0 = *value,
                    (Device::Gfm(g), "p_ref") => g.params.p_ref = *value,
                    (Device::IdealSlack(s), "p0") => s.params.p0 = *value,
                    (Device::IdealSlack(s), "theta_ref") => s.params.theta_ref = *value,
                    _ => return Err(unknown()),
                }
                Ok(())
            }
            EventAction::Disconnect { device } => {
                let di = self
                    .device_index(device)
                    .ok_or_else(|| DynError::UnknownDevice(device.clone()))?;
                self.disconnected[di] = true;
                Ok(())
            }
        }
    }

    /// Worst absolute active-power balance violation over the buses.
    pub fn power_balance_max(&self, state: &SystemState) -> f64 {
        let r = self.algebraic_residual(&state.x, &state.y, &state.frozen);
        (0..self.lay.n).fold(0.0f64, |a, b| a.max(r[b].abs()))
    }

    /// Update the frozen ac-filter transient terms from two accepted samples.
    fn update_frozen(&self, prev: &SystemState, cur: &mut SystemState, dt: f64) {
        for (di, d) in self.devices.iter().enumerate() {
            if let Device::Gfl(g) = d {
                if g.params.l_f == 0.0 && g.params.c_f == 0.0 {
                    continue;
                }
                let b = self.dev_bus[di].unwrap();
                let mag = |st: &SystemState| {
                    let v = st.y[self.lay.v(b)];
                    let s = self.sigma(di, &st.x);
                    let p = g.p_cmd(s);
                    let i = (p * p + g.params.q0 * g.params.q0).sqrt() / v;
                    (i, v)
                };
                let (i0, v0) = mag(prev);
                let (i1, v1) = mag(cur);
                // filter stored-energy rate, deducted from the delivered power
                let de = g.params.l_f * (i1 - i0) / dt * i1 + g.params.c_f * (v1 - v0) / dt * v1;
                cur.frozen[di] = -de;
            }
        }
    }

    /// Integrate a scenario from `state0`, recording every accepted sample.
    /// Events are applied at step boundaries (steps shorten to land on event
    /// times exactly).
    pub fn run(&mut self, state0: &SystemState, scenario: &Scenario) -> Result<RunResult, DynError> {
        if scenario.dt <= 0.0 || scenario.t_end <= 0.0 {
            return Err(DynError::Config("scenario requires dt > 0 and t_end > 0".into()));
        }
        let mut events = scenario.events.clone();
        events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        let mut traj = Trajectory::new(self.channel_names());
        let mut state = state0.clone();
        traj.push(state.t, self.record_row(&state));
        let mut next_event = 0usize;
        // fire any events scheduled at or before the start
        while next_event < events.len() && events[next_event].t <= state.t + 1e-12 {
            self.apply_event(&events[next_event].action)?;
            next_event += 1;
            if let Err(f) = self.resolve_after_event(&mut state) {
                return Ok(RunResult { trajectory: traj, outcome: RunOutcome::Diverged(f) });
            }
        }
        let eps = 1e-9 * scenario.dt;
        while state.t < scenario.t_end - eps {
            let mut t_next = (state.t + scenario.dt).min(scenario.t_end);
            if next_event < events.len() {
                t_next = t_next.min(events[next_event].t.min(scenario.t_end));
            }
            let dt = t_next - state.t;
            if dt <= eps {
                // event closer than resolution: fire it without stepping
                t_next = state.t;
            } else {
                let prev = state.clone();
                if let Err(f) = self.step(&mut state, dt) {
                    return Ok(RunResult { trajectory: traj, outcome: RunOutcome::Diverged(f) });
                }
                self.update_frozen(&prev, &mut state, dt);
                traj.push(state.t, self.record_row(&state));
            }
            while next_event < events.len() && events[next_event].t <= t_next + eps {
                self.apply_event(&events[next_event].action)?;
                next_event += 1;
                if let Err(f) = self.resolve_after_event(&mut state) {
                    return Ok(RunResult { trajectory: traj, outcome: RunOutcome::Diverged(f) });
                }
            }
        }
        Ok(RunResult { trajectory: traj, outcome: RunOutcome::Completed })
    }

    /// Recorded channel names, in row order.
    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in self.net.buses() {
            names.push(format!("bus{}.v", b.id));
            names.push(format!("bus{}.theta", b.id));
        }
        for d in &self.devices {
            let id = d.model().id();
            for s in d.model().state_names() {
                names.push(format!("dev{}.{}", id, s));
            }
            for e in d.model().extra_channels() {
                names.push(format!("dev{}.{}", id, e));
            }
            names.push(format!("dev{}.ps", id));
            names.push(format!("dev{}.pt", id));
            names.push(format!("dev{}.p", id));
        }
        names.push("omega_coi".to_string());
        names
    }

    /// Channel names of the differential states only (steady-state checks).
    pub fn state_channel_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for d in &self.devices {
            for s in d.model().state_names() {
                names.push(format!("dev{}.{}", d.model().id(), s));
            }
        }
        names
    }

    pub fn power_split_of(&self, di: usize, state: &SystemState) -> PowerSplit {
        let d = self.devices[di].model();
        d.power_split(
            self.sigma(di, &state.x),
            self.bus_vt(di, &state.y),
            &self.inputs(di, &state.x, &state.y, &state.frozen),
        )
    }

    fn record_row(&self, state: &SystemState) -> Vec<f64> {
        let mut row = Vec::new();
        for b in 0..self.lay.n {
            row.push(state.y[self.lay.v(b)]);
            row.push(state.y[self.lay.theta(b)]);
        }
        for di in 0..self.devices.len() {
            let d = self.devices[di].model();
            let o = self.lay.x_off[di];
            for k in 0..d.n_states() {
                row.push(state.x[o + k]);
            }
            let bus = self.bus_vt(di, &state.y);
            let inp = self.inputs(di, &state.x, &state.y, &state.frozen);
            for e in d.eval_extra(self.sigma(di, &state.x), bus, &inp) {
                row.push(e);
            }
            let split = if self.disconnected[di] {
                PowerSplit::new(0.0, 0.0)
            } else {
                d.power_split(self.sigma(di, &state.x), bus, &inp)
            };
            row.push(split.p_s);
            row.push(split.p_t);
            // decomposed power; equals the bus injection except for loads,
            // whose injection additionally carries the ohmic dissipation
            row.push(split.p_total);
        }
        row.push(state.y[self.lay.ws]);
        row
    }

    /// Power-flow based initialization: builds the static schedule implied by
    /// the device set points, solves it under `pf_spec`, back-solves every
    /// device to an exact equilibrium (adjusting set points so derivatives
    /// vanish) and returns the consistent initial state.
    pub fn initialize(
        &mut self,
        pf_spec: &SlackSpec,
    ) -> Result<(SystemState, PowerFlowSolution), DynError> {
        let n = self.lay.n;
        let mut sched_p = vec![0.0; n];
        let mut sched_q = vec![0.0; n];
        let mut is_pv = vec![false; n];
        let mut v_pv = vec![1.0; n];
        for l in &self.loads {
            let b = self.net.index_of(l.bus).unwrap();
            sched_p[b] -= l.p * l.scale;
            sched_q[b] -= l.q * l.scale;
        }
        for (di, d) in self.devices.iter().enumerate() {
            let b = match self.dev_bus[di] {
                Some(b) => b,
                None => continue,
            };
            match d {
                Device::Machine(m) => {
                    let tau = m.governor.map(|g| g.tau_m_ref).unwrap_or(m.params.tau_m0);
                    sched_p[b] += tau * m.params.omega_n;
                }
                Device::Gfm(g) => sched_p[b] += g.params.p_ref,
                Device::Gfl(g) => {
                    sched_p[b] += g.params.p0;
                    sched_q[b] += g.params.q0;
                }
                Device::IdealSlack(s) => sched_p[b] += s.params.p0,
                Device::RlcLoad(_) | Device::Agc(_) => {}
            }
            if let ReactiveMode::VoltageControl { v_set } = d.model().reactive_mode() {
                is_pv[b] = true;
                v_pv[b] = v_set;
            }
        }

        // RLC loads enter the static problem as constant shunt admittances
        let mut pf_ybus = self.ybus.clone();
        for (di, d) in self.devices.iter().enumerate() {
            if let Device::RlcLoad(r) = d {
                let b = self.dev_bus[di].unwrap();
                let w = r.omega_b;
                let z = num_complex::Complex64::new(r.params.r, w * r.params.l)
                    + num_complex::Complex64::new(0.0, -1.0 / (w * r.params.c));
                pf_ybus.m[(b, b)] += 1.0 / z;
            }
        }

        let schedule: Vec<BusSchedule> = (0..n)
            .map(|b| {
                if is_pv[b] {
                    BusSchedule::Pv { p: sched_p[b], v_set: v_pv[b] }
                } else {
                    BusSchedule::Pq { p: sched_p[b], q: sched_q[b] }
                }
            })
            .collect();
        let sol =
            solve_powerflow_with(&self.net, &pf_ybus, &schedule, pf_spec, PF_TOL, PF_MAX_ITER)?;

        // per-bus slack share
        let mut share = vec![0.0; n];
        match pf_spec.mode {
            SlackMode::Single | SlackMode::DynamicEquilibrium => {
                let i = self.net.index_of(pf_spec.reference_bus).unwrap();
                share[i] = sol.sigma_hat;
            }
            SlackMode::Distributed => {
                for &(bus, k) in &pf_spec.participation {
                    let i = self.net.index_of(bus).unwrap();
                    share[i] += k * sol.sigma_hat;
                }
            }
        }
        // absorber: first source device on each bus
        let mut absorber: Vec<Option<usize>> = vec![None; n];
        for (di, d) in self.devices.iter().enumerate() {
            if let Some(b) = self.dev_bus[di] {
                if d.is_source() && absorber[b].is_none() {
                    absorber[b] = Some(di);
                }
            }
        }
        for b in 0..n {
            if share[b].abs() > 1e-12 && absorber[b].is_none() {
                return Err(DynError::Config(format!(
                    "slack share allocated to bus {} which hosts no source device",
                    self.net.buses()[b].id
                )));
            }
        }

        // reactive share of the voltage controller on each bus
        let mut q_ctl = vec![0.0; n];
        for b in 0..n {
            q_ctl[b] = sol.q_gen[b];
        }
        for l in &self.loads {
            let b = self.net.index_of(l.bus).unwrap();
            q_ctl[b] += l.q * l.scale;
        }
        for (di, d) in self.devices.iter().enumerate() {
            if let Device::Gfl(g) = d {
                q_ctl[self.dev_bus[di].unwrap()] -= g.params.q0;
            }
        }

        let mut x = DVector::zeros(self.lay.x_dim);
        let mut y = DVector::zeros(self.lay.y_dim);
        for b in 0..n {
            y[self.lay.theta(b)] = sol.theta[b];
            y[self.lay.v(b)] = sol.v[b];
        }
        y[self.lay.ws] = self.omega_n;

        for di in 0..self.devices.len() {
            let o = self.lay.x_off[di];
            let b = self.dev_bus[di];
            let extra = b.map(|b| if absorber[b] == Some(di) { share[b] } else { 0.0 }).unwrap_or(0.0);
            match &mut self.devices[di] {
                Device::Machine(m) => {
                    let b = b.unwrap();
                    let tau0 = m.governor.map(|g| g.tau_m_ref).unwrap_or(m.params.tau_m0);
                    let p_dev = tau0 * m.params.omega_n + extra;
                    let tau_e = p_dev / m.params.omega_n;
                    let ratio = tau_e / m.params.tau_e_max;
                    if ratio.abs() > 1.0 {
                        return Err(DeviceError::InitInfeasible {
                            device: m.id.clone(),
                            reason: format!(
                                "required torque {:.4} exceeds tau_e_max {:.4}",
                                tau_e, m.params.tau_e_max
                            ),
                        }
                        .into());
                    }
                    x[o] = sol.theta[b] + ratio.asin();
                    x[o + 1] = m.params.omega_n;
                    match &mut m.governor {
                        Some(g) => {
                            g.tau_m_ref = tau_e;
                            x[o + 2] = tau_e;
                        }
                        None => m.params.tau_m0 = tau_e,
                    }
                    if let Some(k) = self.lay.q_var[di] {
                        y[k] = q_ctl[b];
                    }
                }
                Device::Gfm(g) => {
                    let b = b.unwrap();
                    let p_dev = g.params.p_ref + extra;
                    let q_dev = q_ctl[b];
                    let alpha = sol.theta[b];
                    g.params.p_ref = p_dev + g.params.h_alpha * alpha;
                    x[o] = alpha;
                    let k = if g.params.variant == GfmVariant::Vsm {
                        x[o + 1] = 0.0;
                        o + 2
                    } else {
                        o + 1
                    };
                    let v_dc = g.params.v_dc_ref;
                    let i_sq = (p_dev * p_dev + q_dev * q_dev) / (sol.v[b] * sol.v[b]);
                    let i_dc =
                        (p_dev + g.params.r_f * i_sq + g.params.g_dc * v_dc * v_dc) / v_dc;
                    g.params.i_dc0 = i_dc;
                    x[k] = v_dc;
                    x[k + 1] = i_dc;
                    if let Some(qk) = self.lay.q_var[di] {
                        y[qk] = q_dev;
                    }
                    if let Some(pk) = self.lay.p_var[di] {
                        y[pk] = p_dev;
                    }
                }
                Device::Gfl(g) => {
                    let b = b.unwrap();
                    g.params.p0 += extra;
                    let v = sol.v[b];
                    let v_dc = g.params.v_dc_ref;
                    let i_sq = (g.params.p0 * g.params.p0 + g.params.q0 * g.params.q0) / (v * v);
                    let i_dc =
                        (g.params.p0 + g.params.r_f * i_sq) / v_dc + g.params.g_dc * v_dc;
                    g.params.i_dc0 = i_dc;
                    x[o] = 0.0;
                    x[o + 1] = sol.theta[b];
                    x[o + 2] = v_dc;
                    if g.params.droop {
                        x[o + 3] = i_dc;
                    }
                }
                Device::IdealSlack(s) => {
                    let b = b.unwrap();
                    let sigma0 = extra;
                    x[o] = sigma0;
                    s.params.theta_ref = match s.params.mode {
                        IdealSlackMode::Integrator => sol.theta[b],
                        IdealSlackMode::Droop => {
                            sol.theta[b] + s.params.h / s.params.k * sigma0
                        }
                    };
                    if let Some(qk) = self.lay.q_var[di] {
                        y[qk] = q_ctl[b];
                    }
                }
                Device::RlcLoad(r) => {
                    let b = b.unwrap();
                    let s = r.steady_states(sol.v[b], sol.theta[b]);
                    x[o] = s.0;
                    x[o + 1] = s.1;
                    x[o + 2] = s.2;
                    x[o + 3] = s.3;
                }
                Device::Agc(a) => {
                    x[o] = a.params.xi0;
                }
            }
        }

        let frozen = vec![0.0; self.devices.len()];
        let state = SystemState { t: 0.0, x, y, frozen };
        let ra = self.algebraic_residual(&state.x, &state.y, &state.frozen);
        let xd = self.derivs(&state.x, &state.y, &state.frozen);
        let worst = ra.amax().max(xd.amax());
        if worst > 1e-6 {
            return Err(DynError::InitResidual(worst));
        }
        Ok((state, sol))
    }
}

#[cfg(test)]
mod tests;
