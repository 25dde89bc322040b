//! Spectral pulse carving: broadband Gaussian sources, slit masks, group-delay
//! dispersion, and Fourier synthesis of the time-domain drive envelope.
//!
//! A [`SpectralEnvelope`] lives on a uniform detuning grid (GHz, offsets from
//! the C transition) and carries a complex field amplitude normalized so that
//! `sum |a|^2 * dnu` equals the pulse energy in pJ. [`to_time`] converts it to
//! a [`TemporalEnvelope`], the complex Rabi-frequency drive (rad/ps) in the
//! rotating frame, through a single calibration constant `kappa`.

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::GHZ_TO_RAD_PS;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("pulse shape error: {0}")]
    Shape(String),
    #[error("grid is not uniform: {0}")]
    NonUniformGrid(String),
}

pub type Result<T> = std::result::Result<T, PulseError>;

/// Uniform frequency grid: `n` points spanning `span_ghz` about `center_ghz`.
/// Point `j` sits at `center - span/2 + j * span / n` (endpoint excluded so
/// the grid maps directly onto an FFT of length `n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub span_ghz: f64,
    pub center_ghz: f64,
}

impl GridSpec {
    pub fn new(n: usize, span_ghz: f64, center_ghz: f64) -> Result<Self> {
        if n < 2 {
            return Err(PulseError::InvalidArgument("grid needs >= 2 points".into()));
        }
        if !(span_ghz > 0.0) || !span_ghz.is_finite() {
            return Err(PulseError::InvalidArgument(format!(
                "grid span must be positive, got {span_ghz}"
            )));
        }
        Ok(Self { n, span_ghz, center_ghz })
    }

    pub fn spacing_ghz(&self) -> f64 {
        self.span_ghz / self.n as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let d = self.spacing_ghz();
        let start = self.center_ghz - 0.5 * self.span_ghz;
        (0..self.n).map(|j| start + j as f64 * d).collect()
    }
}

/// Complex spectral field on a uniform detuning grid.
#[derive(Debug, Clone)]
pub struct SpectralEnvelope {
    detuning_ghz: Vec<f64>,
    amplitude: Vec<C64>,
    energy_pj: f64,
}

const GRID_UNIFORMITY_TOL: f64 = 1.0e-12;

impl SpectralEnvelope {
    pub fn new(detuning_ghz: Vec<f64>, amplitude: Vec<C64>) -> Result<Self> {
        if detuning_ghz.len() < 2 || detuning_ghz.len() != amplitude.len() {
            return Err(PulseError::InvalidArgument(
                "grid and amplitude must have equal length >= 2".into(),
            ));
        }
        let d0 = detuning_ghz[1] - detuning_ghz[0];
        if !(d0 > 0.0) {
            return Err(PulseError::NonUniformGrid("non-increasing grid".into()));
        }
        // rounding in successive differences scales with the grid values,
        // not the spacing
        let scale = d0
            .abs()
            .max(detuning_ghz[0].abs())
            .max(detuning_ghz[detuning_ghz.len() - 1].abs())
            .max(1.0);
        for w in detuning_ghz.windows(2) {
            let d = w[1] - w[0];
            if (d - d0).abs() > GRID_UNIFORMITY_TOL * scale {
                return Err(PulseError::NonUniformGrid(format!(
                    "spacing {d} != {d0}"
                )));
            }
        }
        let energy_pj = amplitude.iter().map(|a| a.norm_sqr()).sum::<f64>() * d0;
        Ok(Self { detuning_ghz, amplitude, energy_pj })
    }

    pub fn grid(&self) -> &[f64] {
        &self.detuning_ghz
    }

    pub fn amplitude(&self) -> &[C64] {
        &self.amplitude
    }

    pub fn len(&self) -> usize {
        self.detuning_ghz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detuning_ghz.is_empty()
    }

    pub fn spacing_ghz(&self) -> f64 {
        self.detuning_ghz[1] - self.detuning_ghz[0]
    }

    /// Total spectral energy in pJ (`sum |a|^2 * dnu`).
    pub fn energy_pj(&self) -> f64 {
        self.energy_pj
    }

    /// Energy-weighted mean detuning; 0 for an all-zero envelope.
    pub fn centroid_ghz(&self) -> f64 {
        if self.energy_pj <= 0.0 {
            return 0.0;
        }
        let num: f64 = self
            .detuning_ghz
            .iter()
            .zip(&self.amplitude)
            .map(|(nu, a)| nu * a.norm_sqr())
            .sum();
        num * self.spacing_ghz() / self.energy_pj
    }

    /// Intensity FWHM of the power spectrum `|a|^2`, GHz.
    pub fn intensity_fwhm_ghz(&self) -> Result<f64> {
        let intensity: Vec<f64> = self.amplitude.iter().map(|a| a.norm_sqr()).collect();
        fwhm_of(&self.detuning_ghz, &intensity)
    }

    /// Returns a copy rescaled to the given total energy.
    pub fn with_energy(&self, energy_pj: f64) -> Result<Self> {
        if energy_pj < 0.0 {
            return Err(PulseError::InvalidArgument("negative energy".into()));
        }
        if self.energy_pj <= 0.0 {
            if energy_pj == 0.0 {
                return Ok(self.clone());
            }
            return Err(PulseError::InvalidArgument(
                "cannot rescale a zero-energy envelope to finite energy".into(),
            ));
        }
        let s = (energy_pj / self.energy_pj).sqrt();
        let amplitude = self.amplitude.iter().map(|a| a * s).collect();
        Self::new(self.detuning_ghz.clone(), amplitude)
    }

    /// Coherent superposition of two envelopes on the same grid.
    pub fn add(&self, other: &SpectralEnvelope) -> Result<Self> {
        if self.len() != other.len()
            || (self.detuning_ghz[0] - other.detuning_ghz[0]).abs()
                > GRID_UNIFORMITY_TOL * self.spacing_ghz()
            || (self.spacing_ghz() - other.spacing_ghz()).abs()
                > GRID_UNIFORMITY_TOL * self.spacing_ghz()
        {
            return Err(PulseError::InvalidArgument("grids do not match".into()));
        }
        let amplitude = self
            .amplitude
            .iter()
            .zip(&other.amplitude)
            .map(|(a, b)| a + b)
            .collect();
        Self::new(self.detuning_ghz.clone(), amplitude)
    }
}

/// One transmission window of the carver mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slit {
    pub center_ghz: f64,
    pub width_ghz: f64,
    pub transmission: f64,
    pub phase_rad: f64,
}

impl Slit {
    fn lo(&self) -> f64 {
        self.center_ghz - 0.5 * self.width_ghz
    }

    fn hi(&self) -> f64 {
        self.center_ghz + 0.5 * self.width_ghz
    }
}

/// Ordered, non-overlapping set of slits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlitMask {
    slits: Vec<Slit>,
}

impl SlitMask {
    pub fn new(mut slits: Vec<Slit>) -> Result<Self> {
        for s in &slits {
            if !(s.width_ghz > 0.0) {
                return Err(PulseError::InvalidArgument(format!(
                    "slit width must be positive, got {}",
                    s.width_ghz
                )));
            }
            if !(0.0..=1.0).contains(&s.transmission) {
                return Err(PulseError::InvalidArgument(format!(
                    "transmission must be in [0, 1], got {}",
                    s.transmission
                )));
            }
        }
        slits.sort_by(|a, b| a.center_ghz.total_cmp(&b.center_ghz));
        for w in slits.windows(2) {
            if w[0].hi() > w[1].lo() {
                return Err(PulseError::InvalidArgument(format!(
                    "slits at {} and {} GHz overlap",
                    w[0].center_ghz, w[1].center_ghz
                )));
            }
        }
        Ok(Self { slits })
    }

    pub fn single(center_ghz: f64, width_ghz: f64, transmission: f64, phase_rad: f64) -> Result<Self> {
        Self::new(vec![Slit { center_ghz, width_ghz, transmission, phase_rad }])
    }

    pub fn slits(&self) -> &[Slit] {
        &self.slits
    }
}

/// Two-slit mask for the two-color swing-up pulse. Carving both colors from
/// one source pulse fixes their relative timing (simultaneous) and relative
/// phase (the slit phases).
pub fn super_mask(
    det1_ghz: f64,
    det2_ghz: f64,
    width1_ghz: f64,
    width2_ghz: f64,
    t1: f64,
    t2: f64,
) -> Result<SlitMask> {
    super_mask_phased(det1_ghz, det2_ghz, width1_ghz, width2_ghz, t1, t2, 0.0)
}

pub fn super_mask_phased(
    det1_ghz: f64,
    det2_ghz: f64,
    width1_ghz: f64,
    width2_ghz: f64,
    t1: f64,
    t2: f64,
    relative_phase_rad: f64,
) -> Result<SlitMask> {
    SlitMask::new(vec![
        Slit { center_ghz: det1_ghz, width_ghz: width1_ghz, transmission: t1, phase_rad: 0.0 },
        Slit {
            center_ghz: det2_ghz,
            width_ghz: width2_ghz,
            transmission: t2,
            phase_rad: relative_phase_rad,
        },
    ])
}

/// Group-delay and third-order dispersion accumulated in the setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionSpec {
    pub gdd_ps2: f64,
    #[serde(default)]
    pub tod_ps3: f64,
}

impl Default for DispersionSpec {
    fn default() -> Self {
        Self { gdd_ps2: 0.0, tod_ps3: 0.0 }
    }
}

const DEFAULT_GRID_POINTS: usize = 1 << 14;
/// Grid span as a multiple of the source FWHM. Wide enough that the sampled
/// time axis resolves the transform-limited duration to well under 1%.
const DEFAULT_SPAN_FACTOR: f64 = 64.0;

/// Broadband transform-limited Gaussian source: power spectrum with the given
/// intensity FWHM, flat spectral phase, grid auto-sized around the center.
pub fn gaussian_source(
    fwhm_bandwidth_ghz: f64,
    center_detuning_ghz: f64,
    energy_pj: f64,
) -> Result<SpectralEnvelope> {
    if !(fwhm_bandwidth_ghz > 0.0) {
        return Err(PulseError::InvalidArgument(format!(
            "bandwidth must be positive, got {fwhm_bandwidth_ghz}"
        )));
    }
    let grid = GridSpec::new(
        DEFAULT_GRID_POINTS,
        DEFAULT_SPAN_FACTOR * fwhm_bandwidth_ghz,
        center_detuning_ghz,
    )?;
    gaussian_on_grid(&grid, fwhm_bandwidth_ghz, center_detuning_ghz, energy_pj, 0.0)
}

/// Gaussian spectral line on an explicit grid; used to place several colors
/// on one shared grid.
pub fn gaussian_on_grid(
    grid: &GridSpec,
    fwhm_bandwidth_ghz: f64,
    center_detuning_ghz: f64,
    energy_pj: f64,
    phase_rad: f64,
) -> Result<SpectralEnvelope> {
    if !(fwhm_bandwidth_ghz > 0.0) {
        return Err(PulseError::InvalidArgument(format!(
            "bandwidth must be positive, got {fwhm_bandwidth_ghz}"
        )));
    }
    if energy_pj < 0.0 {
        return Err(PulseError::InvalidArgument("negative energy".into()));
    }
    let nu = grid.points();
    // field ~ exp(-2 ln2 (nu/fwhm)^2) so that |a|^2 has the requested FWHM
    let c = 2.0 * std::f64::consts::LN_2 / (fwhm_bandwidth_ghz * fwhm_bandwidth_ghz);
    let phase = C64::from_polar(1.0, phase_rad);
    let mut amplitude: Vec<C64> = nu
        .iter()
        .map(|&v| {
            let d = v - center_detuning_ghz;
            phase * (-c * d * d).exp()
        })
        .collect();
    let raw_energy: f64 = amplitude.iter().map(|a| a.norm_sqr()).sum::<f64>() * grid.spacing_ghz();
    if energy_pj == 0.0 || raw_energy == 0.0 {
        amplitude.iter_mut().for_each(|a| *a = C64::new(0.0, 0.0));
    } else {
        let s = (energy_pj / raw_energy).sqrt();
        amplitude.iter_mut().for_each(|a| *a *= s);
    }
    SpectralEnvelope::new(nu, amplitude)
}

/// Multiply the spectrum by the mask: `transmission * exp(i phase)` inside
/// each slit, zero everywhere outside.
pub fn apply_mask(src: &SpectralEnvelope, mask: &SlitMask) -> Result<SpectralEnvelope> {
    let lo = src.grid()[0];
    let hi = *src.grid().last().unwrap();
    for s in mask.slits() {
        if s.lo() < lo || s.hi() > hi {
            return Err(PulseError::OutOfRange(format!(
                "slit [{:.3}, {:.3}] GHz outside grid [{:.3}, {:.3}]",
                s.lo(),
                s.hi(),
                lo,
                hi
            )));
        }
    }
    let amplitude: Vec<C64> = src
        .grid()
        .iter()
        .zip(src.amplitude())
        .map(|(&nu, a)| {
            for s in mask.slits() {
                if nu >= s.lo() && nu <= s.hi() {
                    return a * C64::from_polar(s.transmission, s.phase_rad);
                }
            }
            C64::new(0.0, 0.0)
        })
        .collect();
    SpectralEnvelope::new(src.grid().to_vec(), amplitude)
}

/// Add the dispersion phase `(gdd/2) w^2 + (tod/6) w^3` about the envelope
/// centroid. Phase-only: the power spectrum is untouched.
pub fn apply_dispersion(src: &SpectralEnvelope, d: &DispersionSpec) -> Result<SpectralEnvelope> {
    if !d.gdd_ps2.is_finite() || !d.tod_ps3.is_finite() {
        return Err(PulseError::InvalidArgument("dispersion must be finite".into()));
    }
    let center = src.centroid_ghz();
    let amplitude: Vec<C64> = src
        .grid()
        .iter()
        .zip(src.amplitude())
        .map(|(&nu, a)| {
            let w = (nu - center) * GHZ_TO_RAD_PS; // rad/ps
            let phi = 0.5 * d.gdd_ps2 * w * w + d.tod_ps3 * w * w * w / 6.0;
            a * C64::from_polar(1.0, phi)
        })
        .collect();
    SpectralEnvelope::new(src.grid().to_vec(), amplitude)
}

/// |GDD| that stretches a transform-limited Gaussian of intensity FWHM
/// `tau0_ps` to `tau_ps` (chirped-Gaussian duration formula).
pub fn gdd_for_duration(tau0_ps: f64, tau_ps: f64) -> Result<f64> {
    if !(tau_ps >= tau0_ps) || !(tau0_ps > 0.0) {
        return Err(PulseError::InvalidArgument(
            "target duration must be >= transform limit".into(),
        ));
    }
    let r = tau_ps / tau0_ps;
    let t2 = tau0_ps * tau0_ps;
    Ok(t2 / (4.0 * std::f64::consts::LN_2) * (r * r - 1.0).sqrt())
}

/// Complex Rabi-frequency envelope on a uniform time grid.
#[derive(Debug, Clone)]
pub struct TemporalEnvelope {
    time_ps: Vec<f64>,
    amplitude: Vec<C64>,
    energy_pj: f64,
    kappa: f64,
}

impl TemporalEnvelope {
    pub fn from_samples(time_ps: Vec<f64>, amplitude: Vec<C64>, kappa: f64) -> Result<Self> {
        if time_ps.len() < 2 || time_ps.len() != amplitude.len() {
            return Err(PulseError::InvalidArgument(
                "time grid and amplitude must have equal length >= 2".into(),
            ));
        }
        let dt = time_ps[1] - time_ps[0];
        if !(dt > 0.0) {
            return Err(PulseError::NonUniformGrid("non-increasing time grid".into()));
        }
        for w in time_ps.windows(2) {
            let d = w[1] - w[0];
            if (d - dt).abs() > 1.0e-9 * dt {
                return Err(PulseError::NonUniformGrid(format!("time spacing {d} != {dt}")));
            }
        }
        let energy_pj = if kappa > 0.0 {
            amplitude.iter().map(|a| a.norm_sqr()).sum::<f64>() * dt / (kappa * kappa)
        } else {
            0.0
        };
        Ok(Self { time_ps, amplitude, energy_pj, kappa })
    }

    pub fn times(&self) -> &[f64] {
        &self.time_ps
    }

    pub fn amplitude(&self) -> &[C64] {
        &self.amplitude
    }

    pub fn dt_ps(&self) -> f64 {
        self.time_ps[1] - self.time_ps[0]
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Pulse energy implied by Parseval, pJ.
    pub fn energy_pj(&self) -> f64 {
        self.energy_pj
    }

    pub fn peak_abs(&self) -> f64 {
        self.amplitude.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// Pulse area `integral |Omega(t)| dt` (rad), trapezoidal rule.
    pub fn pulse_area(&self) -> f64 {
        let dt = self.dt_ps();
        let mags: Vec<f64> = self.amplitude.iter().map(|a| a.norm()).collect();
        trapz(&mags, dt)
    }

    /// Intensity FWHM of `|Omega|^2`, ps, linear interpolation between samples.
    pub fn intensity_fwhm(&self) -> Result<f64> {
        let intensity: Vec<f64> = self.amplitude.iter().map(|a| a.norm_sqr()).collect();
        fwhm_of(&self.time_ps, &intensity)
    }

    /// Background-free intensity autocorrelation, normalized to 1 at zero
    /// delay. Returns (delay ps, A) with the delay axis centered on zero.
    pub fn autocorrelation(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.amplitude.len();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut buf: Vec<C64> = self
            .amplitude
            .iter()
            .map(|a| C64::new(a.norm_sqr(), 0.0))
            .collect();
        fft.process(&mut buf);
        for v in buf.iter_mut() {
            *v = C64::new(v.norm_sqr(), 0.0);
        }
        ifft.process(&mut buf);
        // circular correlation; unfold so delay 0 sits at the center
        let half = n / 2;
        let dt = self.dt_ps();
        let mut delays = Vec::with_capacity(n);
        let mut trace = Vec::with_capacity(n);
        let a0 = buf[0].re.max(f64::MIN_POSITIVE);
        for k in 0..n {
            let m = (k + half) % n; // m = half..n-1, 0..half-1
            let lag = k as isize - half as isize;
            delays.push(lag as f64 * dt);
            trace.push(buf[m].re / a0);
        }
        (delays, trace)
    }

    /// Largest `|Omega|` at the two grid edges relative to the peak; small
    /// values mean the grid contains the full pulse support.
    pub fn edge_fraction(&self) -> f64 {
        let peak = self.peak_abs();
        if peak == 0.0 {
            return 0.0;
        }
        let first = self.amplitude.first().unwrap().norm();
        let last = self.amplitude.last().unwrap().norm();
        first.max(last) / peak
    }

    /// Restrict to the window where `|Omega| > threshold * peak`, with a
    /// small margin. Keeps at least two samples.
    pub fn trimmed(&self, threshold: f64) -> Self {
        let peak = self.peak_abs();
        if peak == 0.0 {
            return self.clone();
        }
        let cut = threshold * peak;
        let first = self.amplitude.iter().position(|a| a.norm() > cut);
        let last = self.amplitude.iter().rposition(|a| a.norm() > cut);
        let (mut i0, mut i1) = match (first, last) {
            (Some(a), Some(b)) if b > a => (a, b),
            _ => return self.clone(),
        };
        let margin = ((i1 - i0) / 10).max(4);
        i0 = i0.saturating_sub(margin);
        i1 = (i1 + margin).min(self.time_ps.len() - 1);
        Self {
            time_ps: self.time_ps[i0..=i1].to_vec(),
            amplitude: self.amplitude[i0..=i1].to_vec(),
            energy_pj: self.energy_pj,
            kappa: self.kappa,
        }
    }

    /// Catmull-Rom interpolation of the complex envelope; zero outside the grid.
    pub fn interp(&self, t_ps: f64) -> C64 {
        let t0 = self.time_ps[0];
        let dt = self.dt_ps();
        let n = self.time_ps.len();
        let x = (t_ps - t0) / dt;
        if x < 0.0 || x > (n - 1) as f64 {
            return C64::new(0.0, 0.0);
        }
        let i = (x.floor() as usize).min(n - 2);
        let u = x - i as f64;
        let ym = if i == 0 { self.amplitude[0] } else { self.amplitude[i - 1] };
        let y0 = self.amplitude[i];
        let y1 = self.amplitude[i + 1];
        let yp = if i + 2 < n { self.amplitude[i + 2] } else { self.amplitude[n - 1] };
        // cubic Hermite with central-difference tangents (Catmull-Rom)
        let m0 = (y1 - ym) * 0.5;
        let m1 = (yp - y0) * 0.5;
        let u2 = u * u;
        let u3 = u2 * u;
        y0 * (2.0 * u3 - 3.0 * u2 + 1.0)
            + m0 * (u3 - 2.0 * u2 + u)
            + y1 * (-2.0 * u3 + 3.0 * u2)
            + m1 * (u3 - u2)
    }

    pub fn start_ps(&self) -> f64 {
        self.time_ps[0]
    }

    pub fn end_ps(&self) -> f64 {
        *self.time_ps.last().unwrap()
    }

    /// Same pulse with the envelope multiplied by a real factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            time_ps: self.time_ps.clone(),
            amplitude: self.amplitude.iter().map(|a| a * factor).collect(),
            energy_pj: self.energy_pj * factor * factor,
            kappa: self.kappa,
        }
    }
}

/// Fourier synthesis: inverse transform of the spectrum onto a centered time
/// axis. `kappa` converts field units (sqrt(pJ/ps)) to Rabi frequency
/// (rad/ps). Parseval holds exactly on the discrete grids.
pub fn to_time(src: &SpectralEnvelope, kappa: f64) -> Result<TemporalEnvelope> {
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(PulseError::InvalidArgument("kappa must be finite and >= 0".into()));
    }
    let n = src.len();
    let dnu = src.spacing_ghz();
    let dt_ps = 1.0e3 / (n as f64 * dnu);
    let nu_start = src.grid()[0];

    let mut buf: Vec<C64> = src
        .amplitude()
        .iter()
        .enumerate()
        .map(|(j, a)| if j % 2 == 0 { *a } else { -*a })
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);

    // field scale: sum |e|^2 dt = sum |a|^2 dnu (pJ)
    let scale = dnu / 1.0e3_f64.sqrt();
    let half = n as isize / 2;
    let mut time_ps = Vec::with_capacity(n);
    let mut amplitude = Vec::with_capacity(n);
    for k in 0..n {
        let t = (k as isize - half) as f64 * dt_ps;
        time_ps.push(t);
        // carrier phase of the grid start frequency, GHz * ps = 1e-3 cycles
        let phi = -2.0 * std::f64::consts::PI * nu_start * t * 1.0e-3;
        amplitude.push(buf[k] * C64::from_polar(scale * kappa, phi));
    }
    TemporalEnvelope::from_samples(time_ps, amplitude, kappa)
}

fn trapz(y: &[f64], dx: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let inner: f64 = y[1..y.len() - 1].iter().sum();
    dx * (0.5 * (y[0] + y[y.len() - 1]) + inner)
}

/// FWHM of a sampled non-negative curve with a unique global maximum;
/// half-crossings located by linear interpolation outward from the peak.
fn fwhm_of(x: &[f64], y: &[f64]) -> Result<f64> {
    let (imax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| PulseError::Shape("empty curve".into()))?;
    if !(ymax > 0.0) {
        return Err(PulseError::Shape("all-zero curve has no width".into()));
    }
    let half = 0.5 * ymax;
    let mut left = None;
    for i in (1..=imax).rev() {
        if y[i - 1] <= half && y[i] > half {
            let f = (half - y[i - 1]) / (y[i] - y[i - 1]);
            left = Some(x[i - 1] + f * (x[i] - x[i - 1]));
            break;
        }
    }
    let mut right = None;
    for i in imax..y.len() - 1 {
        if y[i] > half && y[i + 1] <= half {
            let f = (y[i] - half) / (y[i] - y[i + 1]);
            right = Some(x[i] + f * (x[i + 1] - x[i]));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok(r - l),
        _ => Err(PulseError::Shape("no half-maximum crossing on one side".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tl_duration_ps(fwhm_ghz: f64) -> f64 {
        crate::GAUSSIAN_TBP / fwhm_ghz * 1.0e3
    }

    #[test]
    fn gaussian_source_rejects_bad_bandwidth() {
        assert!(gaussian_source(0.0, 0.0, 1.0).is_err());
        assert!(gaussian_source(-5.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_source_zero_energy_is_all_zero() {
        let s = gaussian_source(1.0, 0.0, 0.0).unwrap();
        assert_eq!(s.energy_pj(), 0.0);
        assert!(s.amplitude().iter().all(|a| a.norm() == 0.0));
    }

    #[test]
    fn source_bandwidth_and_energy() {
        let s = gaussian_source(2820.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(s.energy_pj(), 1.0, max_relative = 1.0e-12);
        assert_relative_eq!(s.intensity_fwhm_ghz().unwrap(), 2820.0, max_relative = 1.0e-3);
    }

    #[test]
    fn broadband_source_duration_near_150_fs() {
        // 3.6 nm at 619 nm -> 2820 GHz -> 156 fs transform limit
        let s = gaussian_source(2820.0, 0.0, 1.0).unwrap();
        let p = to_time(&s, 1.0).unwrap();
        let fwhm = p.intensity_fwhm().unwrap();
        assert_relative_eq!(fwhm, tl_duration_ps(2820.0), max_relative = 0.01);
        assert!((fwhm - 0.156).abs() < 0.156 * 0.05);
    }

    #[test]
    fn narrowband_gaussian_duration() {
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let p = to_time(&s, 1.0).unwrap();
        assert_relative_eq!(p.intensity_fwhm().unwrap(), 10.43, max_relative = 0.01);
    }

    #[test]
    fn time_bandwidth_product_is_gaussian() {
        for fwhm in [42.3, 300.0, 2820.0] {
            let s = gaussian_source(fwhm, 0.0, 1.0).unwrap();
            let p = to_time(&s, 1.0).unwrap();
            let tbp = p.intensity_fwhm().unwrap() * s.intensity_fwhm_ghz().unwrap() * 1.0e-3;
            assert_relative_eq!(tbp, crate::GAUSSIAN_TBP, max_relative = 0.005);
        }
    }

    #[test]
    fn parseval_through_mask_and_dispersion() {
        let s = gaussian_source(2820.0, 0.0, 1.0).unwrap();
        let mask = SlitMask::single(0.0, 1400.0, 0.8, 0.3).unwrap();
        let carved = apply_mask(&s, &mask).unwrap();
        let disp = apply_dispersion(&carved, &DispersionSpec { gdd_ps2: 3.0, tod_ps3: 0.5 }).unwrap();
        let p = to_time(&disp, 2.0).unwrap();
        assert_relative_eq!(p.energy_pj(), disp.energy_pj(), max_relative = 1.0e-6);
    }

    #[test]
    fn mask_identity_full_span() {
        let s = gaussian_source(100.0, 0.0, 1.0).unwrap();
        let (lo, hi) = (s.grid()[0], *s.grid().last().unwrap());
        let mask = SlitMask::single(0.5 * (lo + hi), hi - lo, 1.0, 0.0).unwrap();
        let out = apply_mask(&s, &mask).unwrap();
        for (a, b) in s.amplitude().iter().zip(out.amplitude()) {
            assert!((a - b).norm() < 1.0e-14);
        }
    }

    #[test]
    fn mask_out_of_range_rejected() {
        let s = gaussian_source(100.0, 0.0, 1.0).unwrap();
        let mask = SlitMask::single(1.0e5, 10.0, 1.0, 0.0).unwrap();
        assert!(matches!(apply_mask(&s, &mask), Err(PulseError::OutOfRange(_))));
    }

    #[test]
    fn narrowband_carve_spectral_width() {
        // dense grid so the 42.3 GHz slit is well resolved
        let grid = GridSpec::new(1 << 14, 8.0 * 2820.0, 0.0).unwrap();
        let s = gaussian_on_grid(&grid, 2820.0, 0.0, 1.0, 0.0).unwrap();
        let mask = SlitMask::single(0.0, 42.3, 1.0, 0.0).unwrap();
        let carved = apply_mask(&s, &mask).unwrap();
        let w = carved.intensity_fwhm_ghz().unwrap();
        assert!((w - 42.3).abs() < 0.2 * 42.3, "carved width {w}");
    }

    #[test]
    fn subpicosecond_carve_duration() {
        let s = gaussian_source(2820.0, 0.0, 1.0).unwrap();
        let mask = SlitMask::single(0.0, 1400.0, 1.0, 0.0).unwrap();
        let p = to_time(&apply_mask(&s, &mask).unwrap(), 1.0).unwrap();
        assert!(p.intensity_fwhm().unwrap() < 1.0);
    }

    #[test]
    fn super_mask_rejects_overlap() {
        assert!(super_mask(-116.6, -116.6, 40.0, 40.0, 1.0, 1.0).is_err());
        assert!(super_mask(-116.6, -308.0, 40.0, 40.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn super_mask_zero_transmission_single_color() {
        let s = gaussian_source(2820.0, 0.0, 1.0).unwrap();
        let m = super_mask(-100.0, -300.0, 40.0, 40.0, 1.0, 0.0).unwrap();
        let carved = apply_mask(&s, &m).unwrap();
        // all energy within the first slit
        let e_in: f64 = carved
            .grid()
            .iter()
            .zip(carved.amplitude())
            .filter(|(&nu, _)| (-120.0..=-80.0).contains(&nu))
            .map(|(_, a)| a.norm_sqr())
            .sum::<f64>()
            * carved.spacing_ghz();
        assert_relative_eq!(e_in, carved.energy_pj(), max_relative = 1.0e-9);
    }

    #[test]
    fn super_carve_beats_at_color_separation() {
        let grid = GridSpec::new(1 << 14, 4096.0, -210.0).unwrap();
        let c1 = gaussian_on_grid(&grid, 42.3, -116.6, 0.5, 0.0).unwrap();
        let c2 = gaussian_on_grid(&grid, 42.3, -308.0, 0.5, 0.0).unwrap();
        let p = to_time(&c1.add(&c2).unwrap(), 1.0).unwrap();
        // 191.4 GHz separation -> 5.22 ps beat period; equal-amplitude colors
        // put exact beat nulls either side of the central maximum, one period
        // apart, independent of the Gaussian envelope.
        let mags: Vec<f64> = p.amplitude().iter().map(|a| a.norm()).collect();
        let peak = mags.iter().cloned().fold(0.0, f64::max);
        let imax = mags.iter().position(|&m| m == peak).unwrap();
        let mut r = imax;
        while r + 1 < mags.len() && mags[r + 1] < mags[r] {
            r += 1;
        }
        let mut l = imax;
        while l > 0 && mags[l - 1] < mags[l] {
            l -= 1;
        }
        let period = p.times()[r] - p.times()[l];
        assert_relative_eq!(period, 1.0e3 / 191.4, max_relative = 0.05);
    }

    #[test]
    fn dispersion_is_phase_only() {
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let d = apply_dispersion(&s, &DispersionSpec { gdd_ps2: 40.7, tod_ps3: 0.0 }).unwrap();
        for (a, b) in s.amplitude().iter().zip(d.amplitude()) {
            assert!((a.norm_sqr() - b.norm_sqr()).abs() < 1.0e-12);
        }
    }

    #[test]
    fn dispersion_identity() {
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let d = apply_dispersion(&s, &DispersionSpec::default()).unwrap();
        for (a, b) in s.amplitude().iter().zip(d.amplitude()) {
            assert!((a - b).norm() < 1.0e-15);
        }
    }

    #[test]
    fn gdd_stretches_narrowband_to_15_ps() {
        let tau0 = tl_duration_ps(42.3);
        let gdd = gdd_for_duration(tau0, 15.0).unwrap();
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let d = apply_dispersion(&s, &DispersionSpec { gdd_ps2: gdd, tod_ps3: 0.0 }).unwrap();
        let p = to_time(&d, 1.0).unwrap();
        assert_relative_eq!(p.intensity_fwhm().unwrap(), 15.0, max_relative = 0.01);
    }

    #[test]
    fn pulse_area_scaling() {
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let p = to_time(&s, 1.0).unwrap();
        let a = p.pulse_area();
        assert_relative_eq!(p.scaled(2.0).pulse_area(), 2.0 * a, max_relative = 1.0e-12);
        // energy x4 -> amplitude x2 -> area x2
        let p4 = to_time(&s.with_energy(4.0).unwrap(), 1.0).unwrap();
        assert_relative_eq!(p4.pulse_area(), 2.0 * a, max_relative = 1.0e-9);
    }

    #[test]
    fn autocorrelation_gaussian_width_and_symmetry() {
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let p = to_time(&s, 1.0).unwrap();
        let (delays, trace) = p.autocorrelation();
        assert_relative_eq!(
            fwhm_of(&delays, &trace).unwrap(),
            2.0_f64.sqrt() * p.intensity_fwhm().unwrap(),
            max_relative = 0.01
        );
        let n = trace.len();
        for k in 1..n / 2 {
            assert!((trace[n / 2 + k] - trace[n / 2 - k]).abs() < 1.0e-12);
        }
    }

    #[test]
    fn delta_spectrum_has_constant_magnitude() {
        let n = 256;
        let grid = GridSpec::new(n, 256.0, 0.0).unwrap();
        let mut amp = vec![C64::new(0.0, 0.0); n];
        amp[n / 2] = C64::new(1.0, 0.0);
        let s = SpectralEnvelope::new(grid.points(), amp).unwrap();
        let p = to_time(&s, 1.0).unwrap();
        let mags: Vec<f64> = p.amplitude().iter().map(|a| a.norm()).collect();
        let (lo, hi) = mags
            .iter()
            .fold((f64::MAX, 0.0_f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
        assert!((hi - lo) / hi < 1.0e-9);
    }

    #[test]
    fn time_grid_resolves_transform_limit() {
        let s = gaussian_source(42.3, 0.0, 1.0).unwrap();
        let p = to_time(&s, 1.0).unwrap();
        assert!(p.edge_fraction() < 1.0e-6);
        assert!(p.dt_ps() < p.intensity_fwhm().unwrap() / 20.0);
    }
}
