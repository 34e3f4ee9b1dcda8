//! Phasor-domain power system dynamics with a generalized dynamic slack bus
//! framework.
//!
//! Every power source is a set of differential-algebraic equations plus a
//! source/transient power decomposition `p = p_s + p_t`. The toolkit solves
//! static power flow under several slack formulations, integrates the coupled
//! device/network DAE in the time domain, and verifies whether a device
//! ensemble provides strong or weak slack bus capability.

pub mod devices;
pub mod dynsim;
pub mod net;
pub mod powerflow;
pub mod slackcheck;

pub use devices::{DeviceModel, PowerSplit};
pub use dynsim::{Event, EventAction, Scenario, SystemState, Trajectory};
pub use net::{AdmittanceMatrix, Branch, Bus, Network};
pub use powerflow::{PowerFlowSolution, SlackMode, SlackSpec};
pub use slackcheck::{CapabilityReport, SlackDescriptor, Verdict};
