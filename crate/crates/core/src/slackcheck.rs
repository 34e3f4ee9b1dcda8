//! Slack-capability verification on simulated trajectories.
//!
//! Strong capability: some state of every slack device settles and all
//! settled values agree on a common sigma_hat. Weak capability: the same
//! agreement holds for integer-period averages of stationary oscillations.
//! The module also classifies a device ensemble on the four-axis slack
//! taxonomy and audits the p = p_s + p_t decomposition.

use serde::Serialize;
use thiserror::Error;

use crate::devices::{CandidateClass, DeviceModel};
use crate::dynsim::Trajectory;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("trajectory shorter than the {needed} s analysis window ({have} s)")]
    TrajectoryTooShort { needed: f64, have: f64 },
    #[error("no oscillation period detected on channel '{0}'")]
    NoPeriodDetected(String),
    #[error("configuration contains no slack-capable device")]
    NoSlackDevice,
    #[error("channel '{0}' missing from trajectory")]
    MissingChannel(String),
    #[error("split identity violated on device '{device}' at t={t} (gap {gap:.3e})")]
    IdentityViolated { device: String, t: f64, gap: f64 },
    #[error("device '{device}' keeps transient power {p_t:.3e} at steady state")]
    ResidualTransientPower { device: String, p_t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Strong,
    Weak,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Distribution {
    Centralized,
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Cardinality {
    SingleVariable,
    MultiVariable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Temporality {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scope {
    Local,
    NetworkWide,
}

/// Four-axis taxonomy label of a slack configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlackDescriptor {
    pub distribution: Distribution,
    pub cardinality: Cardinality,
    pub temporality: Temporality,
    pub scope: Scope,
}

/// One slack-capable entry of a system configuration.
#[derive(Debug, Clone)]
pub struct SlackConfigEntry {
    pub device: String,
    pub n_states: usize,
    pub dynamic: bool,
    /// Device constrains its own bus angle rather than a shared reference.
    pub local_angle: bool,
}

/// Candidate slack variable(s) of one device. The first channel is the
/// preferred candidate; the rest are searched when it fails to qualify.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub device: String,
    pub channels: Vec<String>,
    pub class: CandidateClass,
}

/// Default candidate selection for a device set: the declared candidate
/// channel first, then every state channel as fallback.
pub fn candidates_from_devices(devices: &[&dyn DeviceModel]) -> Vec<Candidate> {
    let mut out = Vec::new();
    for d in devices {
        if d.slack_info().is_none() {
            continue;
        }
        if let Some((ch, class)) = d.candidate_channel() {
            let mut channels = vec![format!("dev{}.{}", d.id(), ch)];
            for s in d.state_names() {
                let full = format!("dev{}.{}", d.id(), s);
                if !channels.contains(&full) {
                    channels.push(full);
                }
            }
            out.push(Candidate { device: d.id().to_string(), channels, class });
        }
    }
    out
}

/// Taxonomy entries of a device set.
pub fn config_entries(devices: &[&dyn DeviceModel]) -> Vec<SlackConfigEntry> {
    devices
        .iter()
        .filter_map(|d| {
            d.slack_info().map(|s| SlackConfigEntry {
                device: d.id().to_string(),
                n_states: s.n_states,
                dynamic: s.dynamic,
                local_angle: s.local_angle,
            })
        })
        .collect()
}

pub fn has_network_wide_coordinator(devices: &[&dyn DeviceModel]) -> bool {
    devices.iter().any(|d| d.network_wide_coordinator())
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceFinding {
    pub device: String,
    /// Channel that qualified (or the preferred one when none did).
    pub channel: String,
    /// Terminal value (strong) or integer-period average (weak).
    pub value: f64,
    /// Distance from the common sigma_hat of its unit class, or the in-window
    /// excursion when the channel never qualified.
    pub deviation: f64,
    pub qualified: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CapabilityReport {
    pub verdict: Verdict,
    pub sigma_hat_estimate: f64,
    pub per_device: Vec<DeviceFinding>,
    pub window: (f64, f64),
}

impl CapabilityReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "verdict: {:?}\nsigma_hat: {:.9}\nwindow: [{:.3}, {:.3}] s\n",
            self.verdict, self.sigma_hat_estimate, self.window.0, self.window.1
        ));
        for d in &self.per_device {
            s.push_str(&format!(
                "  {:<12} {:<24} value {:+.9}  deviation {:.3e}  {}\n",
                d.device,
                d.channel,
                d.value,
                d.deviation,
                if d.qualified { "ok" } else { "FAILED" }
            ));
        }
        s
    }
}

fn window_bounds(traj: &Trajectory, window: f64) -> Result<(usize, f64, f64), CheckError> {
    let times = traj.times();
    let have = times.last().copied().unwrap_or(0.0) - times.first().copied().unwrap_or(0.0);
    if traj.len() < 3 || have <= window {
        return Err(CheckError::TrajectoryTooShort { needed: window, have });
    }
    let t_end = *times.last().unwrap();
    let t_start = t_end - window;
    let k0 = traj.sample_at(t_start).unwrap();
    Ok((k0, t_start, t_end))
}

/// Common-value agreement within unit classes: every class must agree
/// internally within `tol`. Returns the representative sigma_hat (frequency
/// class preferred) and the per-value deviations.
fn common_value(
    values: &[(CandidateClass, f64)],
    tol: f64,
) -> (f64, Vec<f64>, bool) {
    let mean_of = |class: CandidateClass| -> Option<f64> {
        let vs: Vec<f64> =
            values.iter().filter(|(c, _)| *c == class).map(|(_, v)| *v).collect();
        if vs.is_empty() {
            None
        } else {
            Some(vs.iter().sum::<f64>() / vs.len() as f64)
        }
    };
    let f_mean = mean_of(CandidateClass::Frequency);
    let p_mean = mean_of(CandidateClass::Power);
    let mut devs = Vec::with_capacity(values.len());
    let mut agree = true;
    for (c, v) in values {
        let m = match c {
            CandidateClass::Frequency => f_mean.unwrap(),
            CandidateClass::Power => p_mean.unwrap(),
        };
        let d = (v - m).abs();
        if d > tol {
            agree = false;
        }
        devs.push(d);
    }
    (f_mean.or(p_mean).unwrap_or(0.0), devs, agree)
}

/// Strong capability check (settling + common value over the final window).
pub fn check_strong(
    traj: &Trajectory,
    candidates: &[Candidate],
    tol: f64,
    window: f64,
) -> Result<CapabilityReport, CheckError> {
    let (k0, t_start, t_end) = window_bounds(traj, window)?;
    let mut values = Vec::new();
    let mut findings = Vec::new();
    let mut all_settled = true;
    for cand in candidates {
        let mut settled: Option<(String, f64)> = None;
        let mut best: Option<(String, f64)> = None;
        for ch in &cand.channels {
            let i = match traj.index_of(ch) {
                Some(i) => i,
                None => continue,
            };
            let terminal = traj.row(traj.len() - 1)[i];
            let excursion = (k0..traj.len())
                .map(|k| (traj.row(k)[i] - terminal).abs())
                .fold(0.0f64, f64::max);
            if best.as_ref().map(|(_, e)| excursion < *e).unwrap_or(true) {
                best = Some((ch.clone(), excursion));
            }
            if excursion < tol {
                settled = Some((ch.clone(), terminal));
                break;
            }
        }
        if cand.channels.iter().all(|c| traj.index_of(c).is_none()) {
            return Err(CheckError::MissingChannel(cand.channels[0].clone()));
        }
        match settled {
            Some((ch, v)) => {
                values.push((cand.class, v));
                findings.push(DeviceFinding {
                    device: cand.device.clone(),
                    channel: ch,
                    value: v,
                    deviation: 0.0,
                    qualified: true,
                });
            }
            None => {
                all_settled = false;
                let (ch, exc) = best.unwrap();
                findings.push(DeviceFinding {
                    device: cand.device.clone(),
                    channel: ch,
                    value: traj.row(traj.len() - 1)
                        [traj.index_of(&findings_channel(cand, traj)).unwrap()],
                    deviation: exc,
                    qualified: false,
                });
            }
        }
    }
    let (sigma, devs, agree) = common_value(&values, tol);
    let mut vi = 0;
    for f in findings.iter_mut() {
        if f.qualified {
            f.deviation = devs[vi];
            if f.deviation > tol {
                f.qualified = false;
            }
            vi += 1;
        }
    }
    let verdict = if all_settled && agree { Verdict::Strong } else { Verdict::None };
    Ok(CapabilityReport {
        verdict,
        sigma_hat_estimate: sigma,
        per_device: findings,
        window: (t_start, t_end),
    })
}

fn findings_channel(cand: &Candidate, traj: &Trajectory) -> String {
    cand.channels
        .iter()
        .find(|c| traj.index_of(c).is_some())
        .cloned()
        .unwrap_or_else(|| cand.channels[0].clone())
}

/// Dominant oscillation period of a uniformly sampled signal via the first
/// significant autocorrelation peak, refined by quadratic interpolation.
/// Returns `None` for aperiodic signals.
pub fn dominant_period(signal: &[f64], dt: f64) -> Option<f64> {
    let n = signal.len();
    if n < 8 {
        return None;
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let e0: f64 = x.iter().map(|v| v * v).sum();
    if e0 <= 0.0 {
        return None;
    }
    let max_lag = n / 2;
    // unbiased estimator: the biased (triangular-tapered) form shifts the
    // interpolated peak towards smaller lags
    let r: Vec<f64> = (0..=max_lag)
        .map(|l| {
            let s: f64 = x[..n - l].iter().zip(&x[l..]).map(|(a, b)| a * b).sum();
            s / (n - l) as f64 / (e0 / n as f64)
        })
        .collect();
    // skip the zero-lag lobe, then take the highest positive peak
    let mut lag0 = None;
    for l in 1..=max_lag {
        if r[l] <= 0.0 {
            lag0 = Some(l);
            break;
        }
    }
    let lag0 = lag0?;
    let mut peaks = Vec::new();
    for l in (lag0 + 1)..max_lag {
        if r[l] > r[l - 1] && r[l] >= r[l + 1] && r[l] > 0.2 {
            peaks.push((l, r[l]));
        }
    }
    let rmax = peaks.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    // the fundamental: the earliest peak comparable to the strongest one
    // (multiples of the period tie with the fundamental)
    let (l, _) = *peaks.iter().find(|(_, v)| *v >= 0.8 * rmax)?;
    let (rm, r0, rp) = (r[l - 1], r[l], r[l + 1]);
    let denom = rm - 2.0 * r0 + rp;
    let delta = if denom.abs() > 1e-30 { 0.5 * (rm - rp) / denom } else { 0.0 };
    let coarse = (l as f64 + delta.clamp(-0.5, 0.5)) * dt;
    Some(refine_period_by_crossings(&x, dt, coarse).unwrap_or(coarse))
}

/// Sharpen a coarse period estimate using linearly interpolated upward
/// zero crossings; the autocorrelation peak alone carries finite-window
/// edge bias of the order of a sample.
fn refine_period_by_crossings(x: &[f64], dt: f64, coarse: f64) -> Option<f64> {
    let mut crossings = Vec::new();
    for k in 1..x.len() {
        if x[k - 1] < 0.0 && x[k] >= 0.0 {
            let w = -x[k - 1] / (x[k] - x[k - 1]);
            let t = (k as f64 - 1.0 + w) * dt;
            // debounce: ignore re-crossings from faster secondary ripple
            if crossings.last().map(|p| t - p > 0.5 * coarse).unwrap_or(true) {
                crossings.push(t);
            }
        }
    }
    if crossings.len() < 3 {
        return None;
    }
    let fine =
        (crossings.last().unwrap() - crossings[0]) / (crossings.len() - 1) as f64;
    if (fine - coarse).abs() < 0.25 * coarse {
        Some(fine)
    } else {
        None
    }
}

/// Average of a channel over exactly `k` periods ending at the last sample,
/// trapezoidal with a linearly interpolated left endpoint.
fn integer_period_average(times: &[f64], x: &[f64], span: f64) -> f64 {
    let t_end = *times.last().unwrap();
    let t0 = t_end - span;
    let mut j = 0;
    while times[j + 1] < t0 {
        j += 1;
    }
    // interpolated value at t0 inside [t_j, t_{j+1}]
    let w = (t0 - times[j]) / (times[j + 1] - times[j]);
    let x0 = x[j] + w * (x[j + 1] - x[j]);
    let mut area = 0.5 * (x0 + x[j + 1]) * (times[j + 1] - t0);
    for k in (j + 1)..times.len() - 1 {
        area += 0.5 * (x[k] + x[k + 1]) * (times[k + 1] - times[k]);
    }
    area / span
}

/// Weak capability check (integer-period averages + common value).
///
/// The first quarter of the trajectory is discarded as transient. Channels
/// that settle outright are averaged directly; oscillating channels need at
/// least three detected periods.
pub fn check_weak(
    traj: &Trajectory,
    candidates: &[Candidate],
    tol: f64,
) -> Result<CapabilityReport, CheckError> {
    if traj.len() < 8 {
        return Err(CheckError::TrajectoryTooShort {
            needed: 0.0,
            have: traj.times().last().copied().unwrap_or(0.0),
        });
    }
    let times = traj.times();
    let t_end = *times.last().unwrap();
    let t_begin = times[0] + 0.25 * (t_end - times[0]);
    let k0 = traj.sample_at(t_begin).unwrap();
    let span_total = t_end - times[k0];
    let dt = (t_end - times[k0]) / (traj.len() - 1 - k0) as f64;

    let mut values = Vec::new();
    let mut findings = Vec::new();
    let mut ok = true;
    for cand in candidates {
        let ch = findings_channel(cand, traj);
        let i = traj
            .index_of(&ch)
            .ok_or_else(|| CheckError::MissingChannel(ch.clone()))?;
        let sig: Vec<f64> = (k0..traj.len()).map(|k| traj.row(k)[i]).collect();
        let t_win: Vec<f64> = times[k0..].to_vec();
        let lo = sig.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let avg = if hi - lo < tol {
            sig.iter().sum::<f64>() / sig.len() as f64
        } else {
            let period = dominant_period(&sig, dt)
                .ok_or_else(|| CheckError::NoPeriodDetected(ch.clone()))?;
            let n_per = (span_total / period).floor();
            if n_per < 3.0 {
                return Err(CheckError::NoPeriodDetected(ch.clone()));
            }
            integer_period_average(&t_win, &sig, n_per * period)
        };
        values.push((cand.class, avg));
        findings.push(DeviceFinding {
            device: cand.device.clone(),
            channel: ch,
            value: avg,
            deviation: 0.0,
            qualified: true,
        });
    }
    let (sigma, devs, agree) = common_value(&values, tol);
    for (f, d) in findings.iter_mut().zip(&devs) {
        f.deviation = *d;
        if *d > tol {
            f.qualified = false;
            ok = false;
        }
    }
    let verdict = if ok && agree { Verdict::Weak } else { Verdict::None };
    Ok(CapabilityReport {
        verdict,
        sigma_hat_estimate: sigma,
        per_device: findings,
        window: (times[k0], t_end),
    })
}

/// Four-axis classification of a slack configuration. Pure function of the
/// configuration; simulation plays no role.
pub fn classify(
    entries: &[SlackConfigEntry],
    network_wide_coordinator: bool,
) -> Result<SlackDescriptor, CheckError> {
    if entries.is_empty() {
        return Err(CheckError::NoSlackDevice);
    }
    let distribution = if entries.len() > 1 {
        Distribution::Distributed
    } else {
        Distribution::Centralized
    };
    let cardinality = if entries.iter().any(|e| e.n_states > 1) {
        Cardinality::MultiVariable
    } else {
        Cardinality::SingleVariable
    };
    let temporality = if entries.iter().any(|e| e.dynamic) {
        Temporality::Dynamic
    } else {
        Temporality::Static
    };
    let scope = if !network_wide_coordinator && entries.iter().all(|e| e.local_angle) {
        Scope::Local
    } else {
        Scope::NetworkWide
    };
    Ok(SlackDescriptor { distribution, cardinality, temporality, scope })
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitDeviceAudit {
    pub device: String,
    pub max_identity_gap: f64,
    /// Largest |p_t| inside the steady window.
    pub max_pt_steady: f64,
    /// Terminal transient power in the stored-energy sign convention.
    pub pt_stored_terminal: f64,
    /// Largest gap between exact and approximate p_s, when the approximate
    /// split is recorded (governor-equipped machines).
    pub approx_gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitAudit {
    pub devices: Vec<SplitDeviceAudit>,
    pub steady_window: (f64, f64),
}

/// Audits the decomposition channels of every device in the trajectory:
/// p = p_s + p_t within `tol_identity` at every sample, and |p_t| below
/// `tol_steady` over the final two seconds.
pub fn audit_power_split(
    traj: &Trajectory,
    tol_identity: f64,
    tol_steady: f64,
) -> Result<SplitAudit, CheckError> {
    let ids: Vec<String> = traj
        .names()
        .iter()
        .filter_map(|n| n.strip_prefix("dev").and_then(|r| r.strip_suffix(".ps")))
        .map(|s| s.to_string())
        .collect();
    if ids.is_empty() {
        return Err(CheckError::MissingChannel("dev*.ps".to_string()));
    }
    let (k_st, t_st, t_end) = window_bounds(traj, 2.0)?;
    let mut devices = Vec::new();
    for id in ids {
        let chan = |suffix: &str| -> Result<usize, CheckError> {
            let name = format!("dev{}.{}", id, suffix);
            traj.index_of(&name).ok_or(CheckError::MissingChannel(name))
        };
        let (ips, ipt, ip) = (chan("ps")?, chan("pt")?, chan("p")?);
        let mut max_gap = 0.0f64;
        for k in 0..traj.len() {
            let r = traj.row(k);
            let gap = (r[ip] - (r[ips] + r[ipt])).abs();
            if gap > tol_identity {
                return Err(CheckError::IdentityViolated {
                    device: id,
                    t: traj.times()[k],
                    gap,
                });
            }
            max_gap = max_gap.max(gap);
        }
        let mut max_pt = 0.0f64;
        for k in k_st..traj.len() {
            max_pt = max_pt.max(traj.row(k)[ipt].abs());
        }
        if max_pt > tol_steady {
            return Err(CheckError::ResidualTransientPower { device: id, p_t: max_pt });
        }
        let approx_gap = traj.index_of(&format!("dev{}.ps_approx", id)).map(|ia| {
            (0..traj.len())
                .map(|k| (traj.row(k)[ips] - traj.row(k)[ia]).abs())
                .fold(0.0f64, f64::max)
        });
        devices.push(SplitDeviceAudit {
            device: id,
            max_identity_gap: max_gap,
            max_pt_steady: max_pt,
            pt_stored_terminal: -traj.row(traj.len() - 1)[ipt],
            approx_gap,
        });
    }
    Ok(SplitAudit { devices, steady_window: (t_st, t_end) })
}
