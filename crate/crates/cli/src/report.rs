//! Capability report assembly: runs the strong and weak checks, classifies
//! the slack configuration and audits the power decomposition, producing the
//! machine-readable `capability.json` payload.

use serde::Serialize;

use slackdyn_core::devices::{CandidateClass, DeviceModel};
use slackdyn_core::dynsim::{RunOutcome, SystemModel};
use slackdyn_core::slackcheck::{
    audit_power_split, candidates_from_devices, check_strong, check_weak, classify,
    config_entries, has_network_wide_coordinator, Candidate, CapabilityReport, SlackDescriptor,
    SplitAudit, Verdict,
};
use slackdyn_core::Trajectory;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const STRONG_WINDOW: f64 = 2.0;

#[derive(Debug, Serialize)]
pub struct CapabilityFile {
    pub verdict: Verdict,
    pub outcome: OutcomeInfo,
    pub descriptor: Option<SlackDescriptor>,
    pub strong: Option<CapabilityReport>,
    pub weak: Option<CapabilityReport>,
    pub split_audit: Option<SplitAudit>,
    pub tolerance: f64,
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OutcomeInfo {
    Completed,
    Diverged {
        t: f64,
        iterations: usize,
        residual_norm: f64,
        worst_buses: Vec<(usize, f64)>,
    },
}

impl OutcomeInfo {
    pub fn from_run(outcome: &RunOutcome) -> Self {
        match outcome {
            RunOutcome::Completed => OutcomeInfo::Completed,
            RunOutcome::Diverged(f) => OutcomeInfo::Diverged {
                t: f.t,
                iterations: f.iterations,
                residual_norm: f.residual_norm,
                worst_buses: f.worst_buses.clone(),
            },
        }
    }
}

/// Strong first, weak as fallback; verdict is the best that holds.
pub fn analyze(
    traj: &Trajectory,
    candidates: &[Candidate],
    descriptor: Option<SlackDescriptor>,
    outcome: OutcomeInfo,
    tol: f64,
) -> CapabilityFile {
    let strong = check_strong(traj, candidates, tol, STRONG_WINDOW).ok();
    let weak = check_weak(traj, candidates, tol).ok();
    let verdict = match (&strong, &weak) {
        (Some(s), _) if s.verdict == Verdict::Strong => Verdict::Strong,
        (_, Some(w)) if w.verdict == Verdict::Weak => Verdict::Weak,
        _ => Verdict::None,
    };
    let split_audit = audit_power_split(traj, 1e-9, f64::INFINITY).ok();
    CapabilityFile { verdict, outcome, descriptor, strong, weak, split_audit, tolerance: tol }
}

pub fn model_candidates(model: &SystemModel) -> Vec<Candidate> {
    let models: Vec<&dyn DeviceModel> = model.devices().iter().map(|d| d.model()).collect();
    candidates_from_devices(&models)
}

pub fn model_descriptor(model: &SystemModel) -> Option<SlackDescriptor> {
    let models: Vec<&dyn DeviceModel> = model.devices().iter().map(|d| d.model()).collect();
    let entries = config_entries(&models);
    classify(&entries, has_network_wide_coordinator(&models)).ok()
}

/// Candidate reconstruction from trajectory channel names alone, for `check`
/// runs where only the CSV is available. State-name suffixes identify the
/// slack variables and their unit class.
pub fn candidates_from_channels(traj: &Trajectory) -> Vec<Candidate> {
    // (suffix, class) pairs in preference order
    const KNOWN: [(&str, CandidateClass); 4] = [
        ("omega", CandidateClass::Frequency),
        ("freq", CandidateClass::Frequency),
        ("sigma_hat", CandidateClass::Power),
        ("xi", CandidateClass::Power),
    ];
    let mut out: Vec<Candidate> = Vec::new();
    for name in traj.names() {
        let Some(rest) = name.strip_prefix("dev") else { continue };
        let Some((dev, chan)) = rest.rsplit_once('.') else { continue };
        let Some(&(_, class)) = KNOWN.iter().find(|(s, _)| *s == chan) else { continue };
        match out.iter_mut().find(|c| c.device == dev) {
            Some(c) => c.channels.push(name.clone()),
            None => out.push(Candidate {
                device: dev.to_string(),
                channels: vec![name.clone()],
                class,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channels_map_to_candidates_by_suffix() {
        let traj = Trajectory::new(vec![
            "bus1.v".into(),
            "devm1.delta".into(),
            "devm1.omega".into(),
            "devagc.xi".into(),
            "devz1.i_d".into(),
        ]);
        let c = candidates_from_channels(&traj);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].device, "m1");
        assert_eq!(c[0].channels, vec!["devm1.omega".to_string()]);
        assert!(matches!(c[0].class, CandidateClass::Frequency));
        assert_eq!(c[1].device, "agc");
        assert!(matches!(c[1].class, CandidateClass::Power));
    }
}
