//! JSON case files: schema, strict validation and conversion into the core
//! model types. Unknown fields are rejected everywhere so a typo fails
//! loudly instead of silently falling back to a default.

use serde::Deserialize;
use thiserror::Error;

use slackdyn_core::devices::{
    AgcDevice, AgcParams, GflDevice, GflParams, GfmDevice, GfmParams, GfmVariant, GovernorMode,
    GovernorParams, IdealSlackDevice, IdealSlackMode, IdealSlackParams, MachineDevice,
    MachineParams, RlcLoadDevice, RlcLoadParams,
};
use slackdyn_core::dynsim::{Device, Event, EventAction, Scenario, StaticLoad, SystemModel};
use slackdyn_core::powerflow::{DroopSlackParams, SlackMode, SlackSpec};
use slackdyn_core::{Branch, Bus, Network};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("case file is not valid JSON or violates the schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported format_version {0} (this build reads version 1)")]
    FormatVersion(u32),
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] slackdyn_core::dynsim::DynError),
    #[error(transparent)]
    Net(#[from] slackdyn_core::net::NetError),
    #[error(transparent)]
    Device(#[from] slackdyn_core::devices::DeviceError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDefinition {
    pub format_version: u32,
    pub meta: Meta,
    pub buses: Vec<BusDef>,
    pub branches: Vec<BranchDef>,
    #[serde(default)]
    pub loads: Vec<LoadDef>,
    pub devices: Vec<DeviceDef>,
    pub slack: SlackDef,
    #[serde(default)]
    pub scenarios: Vec<ScenarioDef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    pub s_base_mva: f64,
    pub f_nominal_hz: f64,
    /// Free-form provenance / parameter notes.
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusDef {
    pub id: usize,
    #[serde(default = "one")]
    pub v0: f64,
    #[serde(default)]
    pub theta0: f64,
    #[serde(default = "one")]
    pub base_kv: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchDef {
    pub from: usize,
    pub to: usize,
    #[serde(default)]
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_sh: f64,
    #[serde(default = "one")]
    pub tap: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDef {
    pub bus: usize,
    pub p: f64,
    #[serde(default)]
    pub q: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceDef {
    Machine {
        id: String,
        bus: usize,
        v_set: f64,
        /// Mechanical starting time, s.
        m: f64,
        #[serde(default)]
        d: f64,
        tau_e_max: f64,
        tau_m: f64,
        governor: Option<GovernorDef>,
    },
    Gfm {
        id: String,
        bus: usize,
        v_set: f64,
        variant: GfmVariantDef,
        d_alpha: f64,
        #[serde(default)]
        h_alpha: f64,
        #[serde(default)]
        m_alpha: f64,
        p_ref: f64,
        #[serde(default)]
        g_dc: f64,
        c_dc: f64,
        #[serde(default)]
        r_f: f64,
        t_dc: f64,
        r_dc: f64,
        #[serde(default = "one")]
        v_dc_ref: f64,
    },
    Gfl {
        id: String,
        bus: usize,
        kp_pll: f64,
        ki_pll: f64,
        #[serde(default)]
        r_f: f64,
        #[serde(default)]
        l_f: f64,
        #[serde(default)]
        c_f: f64,
        #[serde(default)]
        g_dc: f64,
        c_dc: f64,
        #[serde(default)]
        t_dc: f64,
        #[serde(default)]
        r_dc: f64,
        p0: f64,
        #[serde(default)]
        q0: f64,
        #[serde(default = "one")]
        v_dc_ref: f64,
        #[serde(default)]
        k_vdc: f64,
        #[serde(default)]
        dc_droop: bool,
    },
    RlcLoad {
        id: String,
        bus: usize,
        #[serde(default)]
        r: f64,
        l: f64,
        c: f64,
    },
    IdealSlack {
        id: String,
        bus: usize,
        v_set: f64,
        mode: IdealSlackModeDef,
        #[serde(default = "one")]
        k: f64,
        #[serde(default)]
        h: f64,
        #[serde(default = "one")]
        t: f64,
        #[serde(default)]
        p0: f64,
    },
    Agc {
        id: String,
        k_o: f64,
    },
}

impl DeviceDef {
    pub fn id(&self) -> &str {
        match self {
            DeviceDef::Machine { id, .. }
            | DeviceDef::Gfm { id, .. }
            | DeviceDef::Gfl { id, .. }
            | DeviceDef::RlcLoad { id, .. }
            | DeviceDef::IdealSlack { id, .. }
            | DeviceDef::Agc { id, .. } => id,
        }
    }

    pub fn bus(&self) -> Option<usize> {
        match self {
            DeviceDef::Machine { bus, .. }
            | DeviceDef::Gfm { bus, .. }
            | DeviceDef::Gfl { bus, .. }
            | DeviceDef::RlcLoad { bus, .. }
            | DeviceDef::IdealSlack { bus, .. } => Some(*bus),
            DeviceDef::Agc { .. } => None,
        }
    }

    fn is_source(&self) -> bool {
        !matches!(self, DeviceDef::RlcLoad { .. } | DeviceDef::Agc { .. })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorDef {
    pub mode: GovernorModeDef,
    pub r: f64,
    pub t: f64,
    #[serde(default)]
    pub agc_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GovernorModeDef {
    Droop,
    Integral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GfmVariantDef {
    Droop,
    Vsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdealSlackModeDef {
    Integrator,
    Droop,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackDef {
    pub mode: SlackModeDef,
    pub reference_bus: usize,
    #[serde(default)]
    pub theta_ref: f64,
    #[serde(default)]
    pub participation: Vec<ParticipationDef>,
    pub droop: Option<DroopDef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackModeDef {
    Single,
    Distributed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipationDef {
    pub bus: usize,
    pub k: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroopDef {
    pub k: f64,
    pub h: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDef {
    pub name: String,
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub events: Vec<EventDef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventDef {
    pub t: f64,
    pub action: ActionDef,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionDef {
    ScaleLoad { bus: usize, factor: f64 },
    SetParam { device: String, param: String, value: f64 },
    Disconnect { device: String },
}

fn one() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    0.01
}

/// Parse and validate a case file.
pub fn parse_case(path: &std::path::Path) -> Result<CaseDefinition, CaseError> {
    let text = std::fs::read_to_string(path)?;
    parse_case_str(&text)
}

pub fn parse_case_str(text: &str) -> Result<CaseDefinition, CaseError> {
    let case: CaseDefinition = serde_json::from_str(text)?;
    if case.format_version != FORMAT_VERSION {
        return Err(CaseError::FormatVersion(case.format_version));
    }
    validate(&case)?;
    Ok(case)
}

fn validate(case: &CaseDefinition) -> Result<(), CaseError> {
    let err = |m: String| Err(CaseError::Validation(m));
    if case.buses.is_empty() {
        return err("case has no buses".into());
    }
    let bus_exists = |id: usize| case.buses.iter().any(|b| b.id == id);
    for br in &case.branches {
        for id in [br.from, br.to] {
            if !bus_exists(id) {
                return err(format!("branch {}-{} references unknown bus {}", br.from, br.to, id));
            }
        }
    }
    for l in &case.loads {
        if !bus_exists(l.bus) {
            return err(format!("load references unknown bus {}", l.bus));
        }
    }
    let mut integral = 0usize;
    let mut agc = 0usize;
    for (i, d) in case.devices.iter().enumerate() {
        if case.devices[..i].iter().any(|o| o.id() == d.id()) {
            return err(format!("duplicate device id '{}'", d.id()));
        }
        if let Some(b) = d.bus() {
            if !bus_exists(b) {
                return err(format!("device '{}' references unknown bus {}", d.id(), b));
            }
        }
        match d {
            DeviceDef::Machine { governor: Some(g), .. }
                if g.mode == GovernorModeDef::Integral =>
            {
                integral += 1
            }
            DeviceDef::Agc { .. } => agc += 1,
            _ => {}
        }
    }
    if integral > 1 {
        // with two pure integrators the steady-state torque allocation
        // between the machines is undetermined
        return err(
            "more than one integral governor: steady-state injections undetermined".into(),
        );
    }
    if agc > 1 {
        return err("more than one AGC coordinator".into());
    }
    if !bus_exists(case.slack.reference_bus) {
        return err(format!("slack references unknown bus {}", case.slack.reference_bus));
    }
    if case.slack.mode == SlackModeDef::Dynamic && case.slack.droop.is_none() {
        return err("dynamic slack mode requires the droop block".into());
    }
    for p in &case.slack.participation {
        if !bus_exists(p.bus) {
            return err(format!("participation references unknown bus {}", p.bus));
        }
    }
    for sc in &case.scenarios {
        if sc.dt <= 0.0 || sc.t_end <= 0.0 {
            return err(format!("scenario '{}' requires dt > 0 and t_end > 0", sc.name));
        }
        for ev in &sc.events {
            if ev.t < 0.0 || ev.t >= sc.t_end {
                return err(format!(
                    "scenario '{}' event at t={} outside [0, t_end)",
                    sc.name, ev.t
                ));
            }
            match &ev.action {
                ActionDef::ScaleLoad { bus, .. } if !bus_exists(*bus) => {
                    return err(format!("event references unknown bus {}", bus));
                }
                ActionDef::SetParam { device, .. } | ActionDef::Disconnect { device }
                    if !case.devices.iter().any(|d| d.id() == device.as_str()) =>
                {
                    return err(format!("event references unknown device '{}'", device));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

impl CaseDefinition {
    pub fn network(&self) -> Result<Network, CaseError> {
        let buses = self
            .buses
            .iter()
            .map(|b| Bus { id: b.id, v_mag: b.v0, theta: b.theta0, base_kv: b.base_kv })
            .collect();
        let branches = self
            .branches
            .iter()
            .map(|b| Branch {
                from_bus: b.from,
                to_bus: b.to,
                r: b.r,
                x: b.x,
                b_sh: b.b_sh,
                tap: b.tap,
            })
            .collect();
        Ok(Network::new(buses, branches, self.meta.s_base_mva, self.meta.f_nominal_hz)?)
    }

    pub fn static_loads(&self) -> Vec<StaticLoad> {
        self.loads
            .iter()
            .map(|l| StaticLoad { bus: l.bus, p: l.p, q: l.q, scale: 1.0 })
            .collect()
    }

    pub fn core_devices(&self, net: &Network) -> Result<Vec<Device>, CaseError> {
        let omega_b = net.omega_b;
        let omega_n = 1.0; // per-unit nominal speed
        let mut out = Vec::with_capacity(self.devices.len());
        for d in &self.devices {
            let dev = match d.clone() {
                DeviceDef::Machine { id, bus, v_set, m, d, tau_e_max, tau_m, governor } => {
                    let gov = governor.map(|g| GovernorParams {
                        r: g.r,
                        t: g.t,
                        mode: match g.mode {
                            GovernorModeDef::Droop => GovernorMode::Droop,
                            GovernorModeDef::Integral => GovernorMode::Integral,
                        },
                        tau_m_ref: tau_m,
                        agc_share: g.agc_share,
                    });
                    Device::Machine(MachineDevice::new(
                        id,
                        bus,
                        MachineParams { m, d, tau_e_max, tau_m0: tau_m, omega_n },
                        gov,
                        v_set,
                        omega_b,
                    )?)
                }
                DeviceDef::Gfm {
                    id,
                    bus,
                    v_set,
                    variant,
                    d_alpha,
                    h_alpha,
                    m_alpha,
                    p_ref,
                    g_dc,
                    c_dc,
                    r_f,
                    t_dc,
                    r_dc,
                    v_dc_ref,
                } => Device::Gfm(GfmDevice::new(
                    id,
                    bus,
                    GfmParams {
                        variant: match variant {
                            GfmVariantDef::Droop => GfmVariant::Droop,
                            GfmVariantDef::Vsm => GfmVariant::Vsm,
                        },
                        d_alpha,
                        h_alpha,
                        m_alpha,
                        p_ref,
                        g_dc,
                        c_dc,
                        r_f,
                        t_dc,
                        r_dc,
                        i_dc0: 0.0, // back-solved at initialization
                        v_dc_ref,
                    },
                    v_set,
                    omega_b,
                    omega_n,
                )?),
                DeviceDef::Gfl {
                    id,
                    bus,
                    kp_pll,
                    ki_pll,
                    r_f,
                    l_f,
                    c_f,
                    g_dc,
                    c_dc,
                    t_dc,
                    r_dc,
                    p0,
                    q0,
                    v_dc_ref,
                    k_vdc,
                    dc_droop,
                } => Device::Gfl(GflDevice::new(
                    id,
                    bus,
                    GflParams {
                        kp_pll,
                        ki_pll,
                        r_f,
                        l_f,
                        c_f,
                        g_dc,
                        c_dc,
                        t_dc,
                        r_dc,
                        i_dc0: 0.0, // back-solved at initialization
                        p0,
                        q0,
                        v_dc_ref,
                        k_vdc,
                        droop: dc_droop,
                    },
                    omega_b,
                    omega_n,
                )?),
                DeviceDef::RlcLoad { id, bus, r, l, c } => Device::RlcLoad(RlcLoadDevice::new(
                    id,
                    bus,
                    RlcLoadParams { r, l, c },
                    omega_b,
                )?),
                DeviceDef::IdealSlack { id, bus, v_set, mode, k, h, t, p0 } => {
                    Device::IdealSlack(IdealSlackDevice::new(
                        id,
                        bus,
                        IdealSlackParams {
                            mode: match mode {
                                IdealSlackModeDef::Integrator => IdealSlackMode::Integrator,
                                IdealSlackModeDef::Droop => IdealSlackMode::Droop,
                            },
                            k,
                            h,
                            t,
                            theta_ref: 0.0, // back-solved at initialization
                            p0,
                        },
                        v_set,
                    )?)
                }
                DeviceDef::Agc { id, k_o } => {
                    Device::Agc(AgcDevice::new(id, AgcParams { k_o, xi0: 0.0 }, omega_n)?)
                }
            };
            out.push(dev);
        }
        Ok(out)
    }

    /// Slack specification for power flow / initialization, optionally with
    /// the mode overridden from the command line.
    pub fn slack_spec(&self, mode_override: Option<SlackModeDef>) -> Result<SlackSpec, CaseError> {
        let mode = mode_override.unwrap_or(self.slack.mode);
        let droop = self.slack.droop.map(|d| DroopSlackParams { k: d.k, h: d.h, t: d.t });
        let spec = match mode {
            SlackModeDef::Single => SlackSpec {
                mode: SlackMode::Single,
                reference_bus: self.slack.reference_bus,
                theta_ref: self.slack.theta_ref,
                participation: vec![],
                droop_params: droop,
                allow_negative_participation: false,
            },
            SlackModeDef::Distributed => {
                let participation = if self.slack.participation.is_empty() {
                    self.equal_participation()
                } else {
                    self.slack.participation.iter().map(|p| (p.bus, p.k)).collect()
                };
                SlackSpec {
                    mode: SlackMode::Distributed,
                    reference_bus: self.slack.reference_bus,
                    theta_ref: self.slack.theta_ref,
                    participation,
                    droop_params: droop,
                    allow_negative_participation: false,
                }
            }
            SlackModeDef::Dynamic => SlackSpec {
                mode: SlackMode::DynamicEquilibrium,
                reference_bus: self.slack.reference_bus,
                theta_ref: self.slack.theta_ref,
                participation: vec![],
                droop_params: Some(droop.ok_or_else(|| {
                    CaseError::Validation("dynamic slack mode requires the droop block".into())
                })?),
                allow_negative_participation: false,
            },
        };
        Ok(spec)
    }

    /// Equal participation over the buses that host a power source.
    pub fn equal_participation(&self) -> Vec<(usize, f64)> {
        let mut buses: Vec<usize> = Vec::new();
        for d in &self.devices {
            if let (true, Some(b)) = (d.is_source(), d.bus()) {
                if !buses.contains(&b) {
                    buses.push(b);
                }
            }
        }
        let k = 1.0 / buses.len().max(1) as f64;
        buses.into_iter().map(|b| (b, k)).collect()
    }

    /// Assemble the dynamic system model for this case.
    pub fn build_model(&self) -> Result<SystemModel, CaseError> {
        let net = self.network()?;
        let devices = self.core_devices(&net)?;
        Ok(SystemModel::build(net, devices, self.static_loads())?)
    }

    pub fn scenario(&self, name: &str) -> Option<&ScenarioDef> {
        self.scenarios.iter().find(|s| s.name == name)
    }
}

impl ScenarioDef {
    /// Core scenario with optional horizon/step overrides.
    pub fn to_core(&self, t_end: Option<f64>, dt: Option<f64>) -> Scenario {
        Scenario {
            name: self.name.clone(),
            t_end: t_end.unwrap_or(self.t_end),
            dt: dt.unwrap_or(self.dt),
            events: self
                .events
                .iter()
                .map(|e| Event {
                    t: e.t,
                    action: match &e.action {
                        ActionDef::ScaleLoad { bus, factor } => {
                            EventAction::ScaleLoad { bus: *bus, factor: *factor }
                        }
                        ActionDef::SetParam { device, param, value } => EventAction::SetParam {
                            device: device.clone(),
                            param: param.clone(),
                            value: *value,
                        },
                        ActionDef::Disconnect { device } => {
                            EventAction::Disconnect { device: device.clone() }
                        }
                    },
                })
                .collect(),
        }
    }
}
