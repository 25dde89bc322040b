//! Rotating-frame Lindblad dynamics of the emitter.
//!
//! The frame rotates at the C transition (optionally offset by a frame
//! detuning), under the rotating-wave approximation. Spontaneous decay acts
//! through one jump operator per radiative transition with the 1/T1 rate
//! split by branching, and pure dephasing through a projector on the excited
//! manifold with rate 2 * gamma_star so the optical coherence decays at
//! 1/T2* = 1/(2 T1) + gamma_star.
//!
//! Integration is an adaptive embedded Dormand-Prince 5(4) pair with cubic
//! dense output; [`reference_rk4`] is a deliberately separate fixed-step
//! fourth-order integrator built on full-matrix products, kept as an
//! independent cross-check.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pulsecraft::TemporalEnvelope;
use crate::GHZ_TO_RAD_PS;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("step size underflow at t = {t_ps} ps (h = {h_ps} ps); system too stiff for requested tolerances")]
    Stiffness { t_ps: f64, h_ps: f64 },
    #[error("integrator failure: {0}")]
    IntegratorFailure(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub label: String,
    /// Ground levels: offset from |1>; excited levels: offset from |3>. GHz.
    pub energy_ghz: f64,
    pub excited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub lower: usize,
    pub upper: usize,
    /// Dipole moment relative to the C transition, in (0, 1].
    pub relative_dipole: f64,
    /// Fraction of the upper level's spontaneous decay through this channel.
    pub branching: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterModel {
    pub levels: Vec<Level>,
    pub transitions: Vec<Transition>,
    /// Spontaneous-emission lifetime of each excited level, ns.
    pub t1_ns: f64,
    /// Pure-dephasing rate gamma_star = 1/T2* - 1/(2 T1), 1/ns.
    pub pure_dephasing_per_ns: f64,
}

impl EmitterModel {
    /// Two-level optical qubit |1>, |3> with the C transition.
    pub fn two_level(t1_ns: f64, t2_star_ns: Option<f64>) -> Result<Self> {
        if !(t1_ns > 0.0) {
            return Err(DynamicsError::InvalidArgument(format!("T1 must be positive, got {t1_ns}")));
        }
        let gamma_star = match t2_star_ns {
            None => 0.0,
            Some(t2) => {
                let g = 1.0 / t2 - 0.5 / t1_ns;
                if !(t2 > 0.0) || g < -1.0e-12 {
                    return Err(DynamicsError::InvalidArgument(format!(
                        "T2* = {t2} ns inconsistent with T1 = {t1_ns} ns (needs T2* <= 2 T1)"
                    )));
                }
                g.max(0.0)
            }
        };
        Ok(Self {
            levels: vec![
                Level { label: "1".into(), energy_ghz: 0.0, excited: false },
                Level { label: "3".into(), energy_ghz: 0.0, excited: true },
            ],
            transitions: vec![Transition { lower: 0, upper: 1, relative_dipole: 1.0, branching: 1.0 }],
            t1_ns,
            pure_dephasing_per_ns: gamma_star,
        })
    }

    /// Lossless two-level system (no decay, no dephasing).
    pub fn two_level_unitary() -> Self {
        Self::two_level(f64::INFINITY, None).expect("infinite T1 is valid")
    }

    /// Four-level model: ground levels |1>, |2> split by `ground_split_ghz`,
    /// excited levels |3>, |4> split by `excited_split_ghz`. Transitions
    /// C (|1>-|3>), D (|2>-|3>) and the two channels of |4>.
    pub fn four_level(
        t1_ns: f64,
        t2_star_ns: Option<f64>,
        ground_split_ghz: f64,
        excited_split_ghz: f64,
        d_relative_dipole: f64,
        c_branching: f64,
    ) -> Result<Self> {
        let mut m = Self::two_level(t1_ns, t2_star_ns)?;
        if !(0.0..=1.0).contains(&c_branching) || !(d_relative_dipole > 0.0 && d_relative_dipole <= 1.0) {
            return Err(DynamicsError::InvalidArgument(
                "branching in [0,1] and relative dipole in (0,1] required".into(),
            ));
        }
        m.levels = vec![
            Level { label: "1".into(), energy_ghz: 0.0, excited: false },
            Level { label: "2".into(), energy_ghz: ground_split_ghz, excited: false },
            Level { label: "3".into(), energy_ghz: 0.0, excited: true },
            Level { label: "4".into(), energy_ghz: excited_split_ghz, excited: true },
        ];
        m.transitions = vec![
            Transition { lower: 0, upper: 2, relative_dipole: 1.0, branching: c_branching },
            Transition { lower: 1, upper: 2, relative_dipole: d_relative_dipole, branching: 1.0 - c_branching },
            Transition { lower: 0, upper: 3, relative_dipole: d_relative_dipole, branching: 1.0 - c_branching },
            Transition { lower: 1, upper: 3, relative_dipole: 1.0, branching: c_branching },
        ];
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n < 2 {
            return Err(DynamicsError::InvalidArgument("need at least two levels".into()));
        }
        if !(self.t1_ns > 0.0) || self.pure_dephasing_per_ns < 0.0 {
            return Err(DynamicsError::InvalidArgument("T1 > 0 and dephasing >= 0 required".into()));
        }
        for t in &self.transitions {
            if t.lower >= n || t.upper >= n || t.lower == t.upper {
                return Err(DynamicsError::InvalidArgument("transition indices out of range".into()));
            }
            if self.levels[t.lower].excited || !self.levels[t.upper].excited {
                return Err(DynamicsError::InvalidArgument(
                    "transitions must connect a ground level to an excited level".into(),
                ));
            }
            if !(t.relative_dipole > 0.0 && t.relative_dipole <= 1.0) || t.branching < 0.0 {
                return Err(DynamicsError::InvalidArgument("bad dipole or branching".into()));
            }
        }
        Ok(())
    }

    pub fn is_two_level(&self) -> bool {
        self.dim() == 2
    }

    /// T2* implied by T1 and the pure-dephasing rate, ns.
    pub fn t2_star_ns(&self) -> f64 {
        1.0 / (0.5 / self.t1_ns + self.pure_dephasing_per_ns)
    }
}

pub const TRACE_TOL: f64 = 1.0e-9;
pub const HERMITICITY_TOL: f64 = 1.0e-12;
pub const EIGENVALUE_TOL: f64 = 1.0e-9;

/// Hermitian, trace-one, positive-semidefinite emitter state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(DMatrix<C64>);

impl DensityMatrix {
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        let rho = Self(mat);
        rho.validate()?;
        Ok(rho)
    }

    pub fn ground_state(dim: usize) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        m[(0, 0)] = C64::new(1.0, 0.0);
        Self(m)
    }

    /// Pure state from a (normalized) amplitude vector.
    pub fn pure(amplitudes: &[C64]) -> Result<Self> {
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if norm <= 0.0 {
            return Err(DynamicsError::InvalidArgument("zero state vector".into()));
        }
        let n = amplitudes.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = amplitudes[i] * amplitudes[j].conj() / norm;
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.0.diagonal().iter().sum()
    }

    pub fn population(&self, level: usize) -> f64 {
        self.0[(level, level)].re
    }

    pub fn purity(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                s += (self.0[(i, j)] * self.0[(j, i)]).re;
            }
        }
        s
    }

    pub fn hermiticity_error(&self) -> f64 {
        let mut e: f64 = 0.0;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                e = e.max((self.0[(i, j)] - self.0[(j, i)].conj()).norm());
            }
        }
        e
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = self.0.clone().hermitian_part();
        sym.symmetric_eigenvalues().iter().cloned().fold(f64::MAX, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.nrows() != self.0.ncols() || self.0.nrows() < 2 {
            return Err(DynamicsError::Dimension("density matrix must be square, dim >= 2".into()));
        }
        if self.hermiticity_error() > HERMITICITY_TOL {
            return Err(DynamicsError::InvalidArgument("not Hermitian".into()));
        }
        if (self.trace().re - 1.0).abs() > TRACE_TOL || self.trace().im.abs() > TRACE_TOL {
            return Err(DynamicsError::InvalidArgument(format!("trace = {} != 1", self.trace())));
        }
        if self.min_eigenvalue() < -EIGENVALUE_TOL {
            return Err(DynamicsError::InvalidArgument(format!(
                "negative eigenvalue {}",
                self.min_eigenvalue()
            )));
        }
        Ok(())
    }
}

/// Pauli expectation triple (x, y, z) of a two-level state.
pub fn bloch_vector(rho: &DensityMatrix) -> Result<(f64, f64, f64)> {
    if rho.dim() != 2 {
        return Err(DynamicsError::Dimension(format!(
            "bloch_vector needs a two-level state, got dim {}",
            rho.dim()
        )));
    }
    let m = rho.matrix();
    let x = 2.0 * m[(0, 1)].re;
    let y = 2.0 * m[(0, 1)].im;
    let z = m[(1, 1)].re - m[(0, 0)].re;
    Ok((x, y, z))
}

/// Rotating-frame Hamiltonian at drive value `omega` (rad/ps) for a frame
/// offset `frame_detuning_ghz` from the C transition. Hermitian by
/// construction: diagonal detunings plus Omega/2 times the relative dipole on
/// each allowed transition.
pub fn build_hamiltonian(model: &EmitterModel, omega: C64, frame_detuning_ghz: f64) -> DMatrix<C64> {
    let n = model.dim();
    let mut h = DMatrix::zeros(n, n);
    let dframe = frame_detuning_ghz * GHZ_TO_RAD_PS;
    for (j, lvl) in model.levels.iter().enumerate() {
        let d = lvl.energy_ghz * GHZ_TO_RAD_PS - if lvl.excited { dframe } else { 0.0 };
        h[(j, j)] = C64::new(d, 0.0);
    }
    for t in &model.transitions {
        let v = 0.5 * omega * t.relative_dipole;
        h[(t.upper, t.lower)] += v;
        h[(t.lower, t.upper)] += v.conj();
    }
    h
}

/// Time-ordered density matrices along an integration, at the integrator's
/// accepted steps, with stored derivatives for cubic dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times_ps: Vec<f64>,
    states: Vec<DMatrix<C64>>,
    derivs: Vec<DMatrix<C64>>,
    excited_levels: Vec<usize>,
}

impl Trajectory {
    pub fn times_ps(&self) -> &[f64] {
        &self.times_ps
    }

    pub fn len(&self) -> usize {
        self.times_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ps.is_empty()
    }

    pub fn state(&self, k: usize) -> DensityMatrix {
        DensityMatrix(self.states[k].clone())
    }

    pub fn final_state(&self) -> DensityMatrix {
        DensityMatrix(self.states.last().expect("non-empty trajectory").clone())
    }

    pub fn population(&self, level: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[(level, level)].re).collect()
    }

    /// Total population of the excited manifold at each stored time.
    pub fn excited_population(&self) -> Vec<f64> {
        self.states
            .iter()
            .map(|s| self.excited_levels.iter().map(|&j| s[(j, j)].re).sum())
            .collect()
    }

    /// Cubic-Hermite dense output between accepted steps.
    pub fn sample(&self, t_ps: f64) -> DensityMatrix {
        let times = &self.times_ps;
        if t_ps <= times[0] {
            return self.state(0);
        }
        if t_ps >= *times.last().unwrap() {
            return self.final_state();
        }
        let i = match times.binary_search_by(|v| v.total_cmp(&t_ps)) {
            Ok(i) => return self.state(i),
            Err(i) => i - 1,
        };
        let h = times[i + 1] - times[i];
        let u = (t_ps - times[i]) / h;
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        let m = &self.states[i] * C64::new(h00, 0.0)
            + &self.derivs[i] * C64::new(h10 * h, 0.0)
            + &self.states[i + 1] * C64::new(h01, 0.0)
            + &self.derivs[i + 1] * C64::new(h11 * h, 0.0);
        DensityMatrix(m)
    }

    /// Worst trace deviation, hermiticity error, and most negative eigenvalue
    /// across the whole trajectory.
    pub fn invariant_extremes(&self) -> (f64, f64, f64) {
        let mut dtrace: f64 = 0.0;
        let mut herm: f64 = 0.0;
        let mut min_eig = f64::MAX;
        for s in &self.states {
            let rho = DensityMatrix(s.clone());
            dtrace = dtrace.max((rho.trace().re - 1.0).abs().max(rho.trace().im.abs()));
            herm = herm.max(rho.hermiticity_error());
            min_eig = min_eig.min(rho.min_eigenvalue());
        }
        (dtrace, herm, min_eig)
    }
}

/// Precomputed generator pieces: diagonal detunings, drive couplings, jump
/// channels (all rates in 1/ps).
struct Liouvillian {
    dim: usize,
    diag: Vec<f64>,
    couplings: Vec<(usize, usize, f64)>,
    decays: Vec<(usize, usize, f64)>,
    deph_rate: f64,
    excited: Vec<bool>,
}

impl Liouvillian {
    fn new(model: &EmitterModel, frame_detuning_ghz: f64) -> Result<Self> {
        model.validate()?;
        let dframe = frame_detuning_ghz * GHZ_TO_RAD_PS;
        let diag = model
            .levels
            .iter()
            .map(|l| l.energy_ghz * GHZ_TO_RAD_PS - if l.excited { dframe } else { 0.0 })
            .collect();
        let gamma1 = if model.t1_ns.is_finite() { 1.0e-3 / model.t1_ns } else { 0.0 };
        let decays = model
            .transitions
            .iter()
            .filter(|t| t.branching > 0.0 && gamma1 > 0.0)
            .map(|t| (t.lower, t.upper, gamma1 * t.branching))
            .collect();
        Ok(Self {
            dim: model.dim(),
            diag,
            couplings: model
                .transitions
                .iter()
                .map(|t| (t.lower, t.upper, t.relative_dipole))
                .collect(),
            decays,
            // projector dissipator at 2*gamma_star decays coherences at gamma_star
            deph_rate: 2.0 * model.pure_dephasing_per_ns * 1.0e-3,
            excited: model.levels.iter().map(|l| l.excited).collect(),
        })
    }

    /// d rho / dt at drive value `omega`, written into `out`.
    fn rhs(&self, omega: C64, rho: &DMatrix<C64>, out: &mut DMatrix<C64>) {
        let n = self.dim;
        // -i (H rho - rho H) with H = diag + couplings
        for i in 0..n {
            for j in 0..n {
                // diagonal part of H
                let mut v = C64::new(0.0, self.diag[j] - self.diag[i]) * rho[(i, j)];
                for &(lo, up, d) in &self.couplings {
                    let w = 0.5 * omega * d;
                    // H[up][lo] = w, H[lo][up] = conj(w)
                    // (H rho)_ij gets H[i][k] rho[k][j]
                    if i == up {
                        v -= C64::new(0.0, 1.0) * w * rho[(lo, j)];
                    }
                    if i == lo {
                        v -= C64::new(0.0, 1.0) * w.conj() * rho[(up, j)];
                    }
                    if j == lo {
                        v += C64::new(0.0, 1.0) * rho[(i, up)] * w;
                    }
                    if j == up {
                        v += C64::new(0.0, 1.0) * rho[(i, lo)] * w.conj();
                    }
                }
                out[(i, j)] = v;
            }
        }
        // decay channels L = |lo><up|
        for &(lo, up, g) in &self.decays {
            let gain = g * rho[(up, up)];
            out[(lo, lo)] += gain;
            for k in 0..n {
                out[(k, up)] -= 0.5 * g * rho[(k, up)];
                out[(up, k)] -= 0.5 * g * rho[(up, k)];
            }
        }
        // pure dephasing: projector on the excited manifold
        if self.deph_rate > 0.0 {
            for i in 0..n {
                for j in 0..n {
                    if self.excited[i] != self.excited[j] {
                        out[(i, j)] -= 0.5 * self.deph_rate * rho[(i, j)];
                    }
                }
            }
        }
    }

    /// Magnitude scale of the generator, used for the initial step guess.
    fn rate_scale(&self) -> f64 {
        let mut s: f64 = 1.0e-6;
        for &d in &self.diag {
            s = s.max(d.abs());
        }
        for &(_, _, g) in &self.decays {
            s = s.max(g);
        }
        s.max(self.deph_rate)
    }
}

/// Integration tolerances; defaults 1e-8 relative, 1e-10 absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rel: 1.0e-8, abs: 1.0e-10 }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel > 0.0 && self.rel <= 1.0e-2) || !(self.abs > 0.0 && self.abs <= 1.0e-2) {
            return Err(DynamicsError::InvalidArgument(format!(
                "tolerances must lie in (0, 1e-2], got rel {} abs {}",
                self.rel, self.abs
            )));
        }
        Ok(())
    }
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

fn integrate_adaptive(
    liou: &Liouvillian,
    drive: &dyn Fn(f64) -> C64,
    t0_ps: f64,
    t1_ps: f64,
    rho0: &DensityMatrix,
    tols: Tolerances,
) -> Result<Trajectory> {
    tols.validate()?;
    if rho0.dim() != liou.dim {
        return Err(DynamicsError::Dimension(format!(
            "state dim {} != model dim {}",
            rho0.dim(),
            liou.dim
        )));
    }
    rho0.validate()?;
    let span = t1_ps - t0_ps;
    if !(span > 0.0) {
        return Err(DynamicsError::InvalidArgument("integration span must be positive".into()));
    }
    let n = liou.dim;
    let mut y = rho0.matrix().clone();
    let mut t = t0_ps;

    let drive_scale = drive(t0_ps).norm().max(drive(t0_ps + 0.5 * span).norm());
    let scale = liou.rate_scale().max(drive_scale);
    let mut h = (span / 100.0).min(0.1 / scale).max(span * 1.0e-12);

    let mut k: Vec<DMatrix<C64>> = (0..7).map(|_| DMatrix::zeros(n, n)).collect();
    let mut ytmp = DMatrix::<C64>::zeros(n, n);
    let mut yerr = DMatrix::<C64>::zeros(n, n);

    liou.rhs(drive(t), &y, &mut k[0]);

    let mut times = vec![t];
    let mut states = vec![y.clone()];
    let mut derivs = vec![k[0].clone()];

    let h_min = span * 1.0e-14;
    let max_steps = 50_000_000_u64;
    let mut steps = 0_u64;

    while t < t1_ps {
        if steps > max_steps {
            return Err(DynamicsError::IntegratorFailure("step budget exhausted".into()));
        }
        steps += 1;
        if t + h > t1_ps {
            h = t1_ps - t;
        }
        // stages 2..7 (k[0] is FSAL from the previous step)
        for s in 1..7 {
            ytmp.copy_from(&y);
            for (j, kj) in k.iter().take(s).enumerate() {
                let a = DP_A[s][j];
                if a != 0.0 {
                    ytmp.zip_apply(kj, |v, kv| *v += C64::new(h * a, 0.0) * kv);
                }
            }
            let ts = t + DP_C[s] * h;
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            liou.rhs(drive(ts), &ytmp, &mut tail[0]);
        }
        // 5th-order solution is stage row 7 (already in ytmp after s = 6)
        let ynew = ytmp.clone();
        yerr.fill(C64::new(0.0, 0.0));
        for (j, kj) in k.iter().enumerate() {
            if DP_E[j] != 0.0 {
                yerr.zip_apply(kj, |v, kv| *v += C64::new(h * DP_E[j], 0.0) * kv);
            }
        }
        // weighted RMS error norm
        let mut err_sq = 0.0;
        for i in 0..n {
            for j in 0..n {
                let sc = tols.abs + tols.rel * y[(i, j)].norm().max(ynew[(i, j)].norm());
                let e = yerr[(i, j)].norm() / sc;
                err_sq += e * e;
            }
        }
        let err = (err_sq / (n * n) as f64).sqrt();

        if err <= 1.0 {
            t += h;
            y = ynew;
            // keep exact Hermitian symmetry against roundoff drift
            for i in 0..n {
                for j in 0..i {
                    let avg = 0.5 * (y[(i, j)] + y[(j, i)].conj());
                    y[(i, j)] = avg;
                    y[(j, i)] = avg.conj();
                }
                y[(i, i)] = C64::new(y[(i, i)].re, 0.0);
            }
            let tr: C64 = y.diagonal().iter().sum();
            if (tr.re - 1.0).abs() > 100.0 * TRACE_TOL {
                return Err(DynamicsError::IntegratorFailure(format!(
                    "trace drifted to {tr} at t = {t} ps"
                )));
            }
            let last = k[6].clone();
            k[0].copy_from(&last); // FSAL
            times.push(t);
            states.push(y.clone());
            derivs.push(k[0].clone());
        }

        let factor = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
        h *= factor.clamp(0.2, 5.0);
        if h < h_min && t < t1_ps {
            return Err(DynamicsError::Stiffness { t_ps: t, h_ps: h });
        }
    }

    let excited_levels = liou
        .excited
        .iter()
        .enumerate()
        .filter_map(|(j, &e)| e.then_some(j))
        .collect();
    Ok(Trajectory { times_ps: times, states, derivs, excited_levels })
}

/// Evolve under a shaped drive envelope over the pulse's full time window.
pub fn evolve(
    model: &EmitterModel,
    rho0: &DensityMatrix,
    pulse: &TemporalEnvelope,
    tols: Tolerances,
) -> Result<Trajectory> {
    evolve_between(model, rho0, pulse, pulse.start_ps(), pulse.end_ps(), tols)
}

/// Evolve under a shaped drive over an explicit window (the envelope is zero
/// outside its grid).
pub fn evolve_between(
    model: &EmitterModel,
    rho0: &DensityMatrix,
    pulse: &TemporalEnvelope,
    t_start_ps: f64,
    t_end_ps: f64,
    tols: Tolerances,
) -> Result<Trajectory> {
    let liou = Liouvillian::new(model, 0.0)?;
    let drive = |t: f64| pulse.interp(t);
    integrate_adaptive(&liou, &drive, t_start_ps, t_end_ps, rho0, tols)
}

/// Constant resonant drive switched on at t = 0 from the ground state, with
/// decay and dephasing active. `rabi_per_ns` is in rad/ns.
pub fn evolve_quasi_cw(
    model: &EmitterModel,
    rabi_per_ns: f64,
    duration_ns: f64,
    tols: Tolerances,
) -> Result<Trajectory> {
    if !(duration_ns > 0.0) {
        return Err(DynamicsError::InvalidArgument("duration must be positive".into()));
    }
    let liou = Liouvillian::new(model, 0.0)?;
    let omega = C64::new(rabi_per_ns * 1.0e-3, 0.0); // rad/ps
    let rho0 = DensityMatrix::ground_state(model.dim());
    integrate_adaptive(&liou, &|_| omega, 0.0, duration_ns * 1.0e3, &rho0, tols)
}

/// Drive-free relaxation for `duration_ns`.
pub fn free_decay(
    model: &EmitterModel,
    rho0: &DensityMatrix,
    duration_ns: f64,
    tols: Tolerances,
) -> Result<Trajectory> {
    if !(duration_ns > 0.0) {
        return Err(DynamicsError::InvalidArgument("duration must be positive".into()));
    }
    let liou = Liouvillian::new(model, 0.0)?;
    let zero = C64::new(0.0, 0.0);
    integrate_adaptive(&liou, &|_| zero, 0.0, duration_ns * 1.0e3, rho0, tols)
}

/// Population left outside the {|1>, |3>} manifold at the end of the pulse.
pub fn cross_coupling_leakage(
    model: &EmitterModel,
    pulse: &TemporalEnvelope,
    tols: Tolerances,
) -> Result<f64> {
    if model.dim() < 3 {
        return Err(DynamicsError::Dimension(
            "cross-coupling leakage needs a multi-level model".into(),
        ));
    }
    let rho0 = DensityMatrix::ground_state(model.dim());
    let traj = evolve(model, &rho0, pulse, tols)?;
    let fin = traj.final_state();
    let kept = fin.population(0) + fin.population(2);
    Ok((1.0 - kept).max(0.0))
}

/// Independent fixed-step classical RK4 reference using full-matrix algebra
/// (explicit commutator and Lindblad dissipator products). Intentionally not
/// sharing the element-wise generator used by the adaptive integrator.
pub fn reference_rk4(
    model: &EmitterModel,
    rho0: &DensityMatrix,
    drive: &dyn Fn(f64) -> C64,
    t0_ps: f64,
    t1_ps: f64,
    n_steps: usize,
) -> Result<DensityMatrix> {
    model.validate()?;
    rho0.validate()?;
    let n = model.dim();
    let gamma1 = if model.t1_ns.is_finite() { 1.0e-3 / model.t1_ns } else { 0.0 };
    let mut jumps: Vec<(DMatrix<C64>, f64)> = Vec::new();
    for t in &model.transitions {
        if gamma1 > 0.0 && t.branching > 0.0 {
            let mut l = DMatrix::zeros(n, n);
            l[(t.lower, t.upper)] = C64::new(1.0, 0.0);
            jumps.push((l, gamma1 * t.branching));
        }
    }
    let gdeph = 2.0 * model.pure_dephasing_per_ns * 1.0e-3;
    if gdeph > 0.0 {
        let mut p = DMatrix::zeros(n, n);
        for (j, lvl) in model.levels.iter().enumerate() {
            if lvl.excited {
                p[(j, j)] = C64::new(1.0, 0.0);
            }
        }
        jumps.push((p, gdeph));
    }
    let rhs = |t: f64, rho: &DMatrix<C64>| -> DMatrix<C64> {
        let h = build_hamiltonian(model, drive(t), 0.0);
        let mut d = (&h * rho - rho * &h) * C64::new(0.0, -1.0);
        for (l, g) in &jumps {
            let lr = l * rho * l.adjoint();
            let ll = l.adjoint() * l;
            d += (lr - (&ll * rho + rho * &ll) * C64::new(0.5, 0.0)) * C64::new(*g, 0.0);
        }
        d
    };
    let h = (t1_ps - t0_ps) / n_steps as f64;
    let mut y = rho0.matrix().clone();
    let mut t = t0_ps;
    for _ in 0..n_steps {
        let k1 = rhs(t, &y);
        let k2 = rhs(t + 0.5 * h, &(&y + &k1 * C64::new(0.5 * h, 0.0)));
        let k3 = rhs(t + 0.5 * h, &(&y + &k2 * C64::new(0.5 * h, 0.0)));
        let k4 = rhs(t + h, &(&y + &k3 * C64::new(h, 0.0)));
        y += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
        t += h;
    }
    Ok(DensityMatrix(y))
}
