//! Grid data model, per-unit conventions and admittance matrix construction.
//!
//! Shared by the static power flow and the time-domain simulation. `Network`
//! and `AdmittanceMatrix` are immutable after construction; every operation
//! here is a pure function.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("branch {from}-{to} has zero series impedance")]
    ZeroImpedanceBranch { from: usize, to: usize },
    #[error("network graph is not connected ({unreached} of {total} buses unreachable from bus {root})")]
    DisconnectedGraph {
        root: usize,
        unreached: usize,
        total: usize,
    },
    #[error("bus id {0} not found")]
    IndexOutOfRange(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("branch references unknown bus {0}")]
    UnknownBus(usize),
    #[error("branch {0}-{0} connects a bus to itself")]
    SelfLoop(usize),
    #[error("vector length {got} does not match bus count {want}")]
    DimensionMismatch { got: usize, want: usize },
}

/// A network node. Voltage fields hold the case/initial values; solved
/// profiles live in vectors ordered like `Network::buses`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub v_mag: f64,
    pub theta: f64,
    pub base_kv: f64,
}

/// A series branch (line or transformer) in the standard pi model.
/// `tap` is the off-nominal ratio on the `from` side, 1.0 for lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_sh: f64,
    pub tap: f64,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }
}

/// Immutable grid description. Bus order is file order and every per-bus
/// vector in the toolkit follows it.
#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    pub s_base: f64,
    pub f_nominal: f64,
    pub omega_b: f64,
}

impl Network {
    /// Validates ids, impedances and connectivity.
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        s_base: f64,
        f_nominal: f64,
    ) -> Result<Self, NetError> {
        let net = Network {
            omega_b: 2.0 * std::f64::consts::PI * f_nominal,
            buses,
            branches,
            s_base,
            f_nominal,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), NetError> {
        for (i, b) in self.buses.iter().enumerate() {
            if self.buses[..i].iter().any(|o| o.id == b.id) {
                return Err(NetError::DuplicateBusId(b.id));
            }
        }
        for br in &self.branches {
            if br.from_bus == br.to_bus {
                return Err(NetError::SelfLoop(br.from_bus));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(NetError::ZeroImpedanceBranch {
                    from: br.from_bus,
                    to: br.to_bus,
                });
            }
            for id in [br.from_bus, br.to_bus] {
                if self.index_of(id).is_none() {
                    return Err(NetError::UnknownBus(id));
                }
            }
        }
        self.check_connected()
    }

    fn check_connected(&self) -> Result<(), NetError> {
        let n = self.buses.len();
        if n <= 1 {
            return Ok(());
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            let id = self.buses[i].id;
            for br in &self.branches {
                let other = if br.from_bus == id {
                    Some(br.to_bus)
                } else if br.to_bus == id {
                    Some(br.from_bus)
                } else {
                    None
                };
                if let Some(o) = other {
                    let j = self.index_of(o).unwrap();
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let unreached = seen.iter().filter(|s| !**s).count();
        if unreached > 0 {
            return Err(NetError::DisconnectedGraph {
                root: self.buses[0].id,
                unreached,
                total: n,
            });
        }
        Ok(())
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in file order.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }
}

/// Dense complex nodal admittance matrix. Bundled cases stay well below 50
/// buses, where dense storage beats sparse bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub m: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, h: usize, k: usize) -> Complex64 {
        self.m[(h, k)]
    }
}

/// Standard nodal admittance stamping over the pi branch model.
/// Deterministic given input ordering.
pub fn build_admittance(net: &Network) -> Result<AdmittanceMatrix, NetError> {
    let n = net.n_buses();
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for br in net.branches() {
        let f = net.index_of(br.from_bus).ok_or(NetError::UnknownBus(br.from_bus))?;
        let t = net.index_of(br.to_bus).ok_or(NetError::UnknownBus(br.to_bus))?;
        let ys = br.series_admittance();
        let bsh = Complex64::new(0.0, br.b_sh / 2.0);
        let a = if br.tap == 0.0 { 1.0 } else { br.tap };
        m[(f, f)] += (ys + bsh) / (a * a);
        m[(t, t)] += ys + bsh;
        m[(f, t)] -= ys / a;
        m[(t, f)] -= ys / a;
    }
    Ok(AdmittanceMatrix { m })
}

/// Net complex power flowing from bus `h` into the network, given a voltage
/// profile in bus file order. Returns `(p, q)` in pu.
pub fn bus_power_injection(
    net: &Network,
    ybus: &AdmittanceMatrix,
    v: &[f64],
    theta: &[f64],
    h: usize,
) -> Result<(f64, f64), NetError> {
    let n = net.n_buses();
    if v.len() != n || theta.len() != n {
        return Err(NetError::DimensionMismatch {
            got: v.len().min(theta.len()),
            want: n,
        });
    }
    let hi = net.index_of(h).ok_or(NetError::IndexOutOfRange(h))?;
    Ok(injection_at_index(ybus, v, theta, hi))
}

/// Same as [`bus_power_injection`] but addressed by bus position, for hot
/// loops that already resolved the index.
pub fn injection_at_index(
    ybus: &AdmittanceMatrix,
    v: &[f64],
    theta: &[f64],
    hi: usize,
) -> (f64, f64) {
    let n = ybus.dim();
    let mut p = 0.0;
    let mut q = 0.0;
    for k in 0..n {
        let y = ybus.get(hi, k);
        let (g, b) = (y.re, y.im);
        let dth = theta[hi] - theta[k];
        let (s, c) = dth.sin_cos();
        p += v[hi] * v[k] * (g * c + b * s);
        q += v[hi] * v[k] * (g * s - b * c);
    }
    (p, q)
}
