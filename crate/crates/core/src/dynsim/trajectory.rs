//! Named-channel time series produced by the integrator.

/// Uniformly structured recording: one row of channel values per accepted
/// time point, with strictly increasing times.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    names: Vec<String>,
    times: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(names: Vec<String>) -> Self {
        Trajectory { names, times: Vec::new(), rows: Vec::new() }
    }

    pub fn push(&mut self, t: f64, row: Vec<f64>) {
        assert_eq!(row.len(), self.names.len(), "row width must match channel count");
        if let Some(last) = self.times.last() {
            assert!(t > *last, "time must be strictly increasing");
        }
        self.times.push(t);
        self.rows.push(row);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Copy of one channel by name.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.index_of(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Value of one channel at the final sample.
    pub fn last(&self, name: &str) -> Option<f64> {
        let i = self.index_of(name)?;
        self.rows.last().map(|r| r[i])
    }

    /// Index of the first sample with time >= t.
    pub fn sample_at(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x >= t - 1e-12)
    }
}

/// Earliest time after which the magnitude of the numerical time derivative
/// of every listed channel stays below `tol` for a full `window`. Returns
/// `None` when no such sustained interval fits before the end of the
/// trajectory. Channels missing from the trajectory are ignored.
pub fn detect_steady_state(
    traj: &Trajectory,
    channels: &[String],
    tol: f64,
    window: f64,
) -> Option<f64> {
    let m = traj.len();
    if m < 3 {
        return None;
    }
    let idx: Vec<usize> = channels.iter().filter_map(|c| traj.index_of(c)).collect();
    if idx.is_empty() {
        return None;
    }
    let times = traj.times();
    // backward-difference derivative magnitude per interior sample
    let mut quiet = vec![false; m];
    for k in 1..m {
        let dt = times[k] - times[k - 1];
        let mut worst = 0.0f64;
        for &i in &idx {
            let d = (traj.row(k)[i] - traj.row(k - 1)[i]) / dt;
            worst = worst.max(d.abs());
        }
        quiet[k] = worst < tol;
    }
    quiet[0] = quiet[1];
    let t_end = *times.last().unwrap();
    let mut start: Option<usize> = None;
    for k in 0..m {
        if quiet[k] {
            if start.is_none() {
                start = Some(k);
            }
            if times[k] - times[start.unwrap()] >= window {
                return Some(times[start.unwrap()]);
            }
        } else {
            start = None;
        }
    }
    // a quiet run reaching the end still counts if it spans the window
    if let Some(s) = start {
        if t_end - times[s] >= window {
            return Some(times[s]);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(f: impl Fn(f64) -> f64, dt: f64, t_end: f64) -> Trajectory {
        let mut tr = Trajectory::new(vec!["a".to_string()]);
        let n = (t_end / dt).round() as usize;
        for k in 0..=n {
            let t = k as f64 * dt;
            tr.push(t, vec![f(t)]);
        }
        tr
    }

    #[test]
    fn channel_lookup_and_columns() {
        let mut tr = Trajectory::new(vec!["a".into(), "b".into()]);
        tr.push(0.0, vec![1.0, 2.0]);
        tr.push(0.5, vec![3.0, 4.0]);
        assert_eq!(tr.index_of("b"), Some(1));
        assert_eq!(tr.column("b").unwrap(), vec![2.0, 4.0]);
        assert_eq!(tr.last("a"), Some(3.0));
        assert_eq!(tr.sample_at(0.4), Some(1));
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn non_monotone_time_rejected() {
        let mut tr = Trajectory::new(vec!["a".into()]);
        tr.push(1.0, vec![0.0]);
        tr.push(1.0, vec![0.0]);
    }

    #[test]
    fn decaying_exponential_settles() {
        // x(t) = e^{-2t}: |x'| < 1e-3 from t = ln(2000)/2 ~ 3.80
        let tr = synth(|t| (-2.0 * t).exp(), 0.01, 10.0);
        let t0 = detect_steady_state(&tr, &["a".to_string()], 1e-3, 1.0).unwrap();
        assert!((t0 - 3.8).abs() < 0.05, "t0 = {t0}");
    }

    #[test]
    fn sustained_oscillation_never_settles() {
        let tr = synth(|t| (3.0 * t).sin(), 0.01, 10.0);
        assert!(detect_steady_state(&tr, &["a".to_string()], 1e-3, 1.0).is_none());
    }

    #[test]
    fn window_must_fit() {
        let tr = synth(|_| 0.0, 0.01, 0.5);
        assert!(detect_steady_state(&tr, &["a".to_string()], 1e-3, 1.0).is_none());
        assert_eq!(detect_steady_state(&tr, &["a".to_string()], 1e-3, 0.3), Some(0.0));
    }
}
