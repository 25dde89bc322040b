//! Full simulated experiments: pulse-area calibration, Rabi sweeps with an
//! optional detector model, the two-color swing-up scan with its single-pulse
//! controls and power extension, and the pulsed lifetime measurement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DensityMatrix, DynamicsError, EmitterModel, Tolerances};
use crate::estimators::{self, EstimatorError, FitResult};
use crate::photonstats::{self, BackgroundModel, DecayHistogram, PhotonStatsError};
use crate::pulsecraft::{
    self, GridSpec, PulseError, SlitMask, SpectralEnvelope, TemporalEnvelope,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    PhotonStats(#[from] PhotonStatsError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitterSection {
    pub t1_ns: f64,
    pub t2_star_ns: Option<f64>,
    /// Closed two-level system with no decay or dephasing (oracle runs).
    pub unitary: bool,
}

impl Default for EmitterSection {
    fn default() -> Self {
        Self { t1_ns: 16.2, t2_star_ns: Some(10.9), unitary: false }
    }
}

impl EmitterSection {
    pub fn model(&self) -> Result<EmitterModel> {
        if self.unitary {
            Ok(EmitterModel::two_level_unitary())
        } else {
            Ok(EmitterModel::two_level(self.t1_ns, self.t2_star_ns)?)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseSection {
    /// Intensity FWHM of the narrowband carve.
    pub narrowband_fwhm_ghz: f64,
    /// Intensity FWHM of the broadband source spectrum.
    pub source_fwhm_ghz: f64,
    /// Hard-slit width for the subpicosecond carve.
    pub subpico_slit_ghz: f64,
    /// Field-to-Rabi conversion (rad/ps per sqrt(pJ/ps)); None means
    /// calibrate so a 1 pJ narrowband pulse has area pi.
    pub kappa: Option<f64>,
}

impl Default for PulseSection {
    fn default() -> Self {
        Self {
            narrowband_fwhm_ghz: 42.3,
            source_fwhm_ghz: 2820.0,
            subpico_slit_ghz: 1400.0,
            kappa: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RabiSection {
    pub amplitude_max: f64,
    pub points: usize,
    /// Detected counts for unit excited population; enables the Poisson
    /// detector model when set.
    pub counts_scale: Option<f64>,
}

impl Default for RabiSection {
    fn default() -> Self {
        Self { amplitude_max: 7.0, points: 141, counts_scale: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperScanSection {
    /// Detuning magnitude of the fixed color (red-detuned in the model).
    pub fixed_detuning_ghz: f64,
    /// Fixed-color amplitude in pi-equivalent units (sqrt pJ).
    pub fixed_amplitude: f64,
    /// FWHM of each carved color.
    pub color_fwhm_ghz: f64,
    pub detuning_start_ghz: f64,
    pub detuning_stop_ghz: f64,
    pub detuning_step_ghz: f64,
    pub amplitude_points: usize,
    /// Scan maximum in pi-equivalent units; log-spaced axis down to
    /// amplitude_max / amplitude_span_ratio.
    pub amplitude_max: f64,
    pub amplitude_span_ratio: f64,
    /// Shared spectral grid for two-color synthesis.
    pub grid_points: usize,
    pub grid_span_ghz: f64,
    pub grid_center_ghz: f64,
}

impl Default for SuperScanSection {
    fn default() -> Self {
        Self {
            fixed_detuning_ghz: 116.6,
            fixed_amplitude: 7.0,
            color_fwhm_ghz: 42.3,
            detuning_start_ghz: 150.0,
            detuning_stop_ghz: 400.0,
            detuning_step_ghz: 5.0,
            amplitude_points: 20,
            amplitude_max: 3.5,
            amplitude_span_ratio: 30.0,
            grid_points: 1 << 16,
            grid_span_ghz: 5000.0,
            grid_center_ghz: -250.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifetimeSection {
    pub irf_sigma_ns: f64,
    pub events: u64,
    pub bin_width_ns: f64,
    /// Excitation pulse area as a multiple of pi.
    pub pulse_area_pi_multiple: f64,
}

impl Default for LifetimeSection {
    fn default() -> Self {
        Self {
            irf_sigma_ns: 0.35,
            events: 1_000_000,
            bin_width_ns: 0.2,
            pulse_area_pi_multiple: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct G2Section {
    pub rep_period_ns: f64,
    pub n_periods: u64,
}

impl Default for G2Section {
    fn default() -> Self {
        Self { rep_period_ns: 100.0, n_periods: 200_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSection {
    pub rate_per_pj: f64,
    pub offset: f64,
}

impl Default for BackgroundSection {
    fn default() -> Self {
        Self { rate_per_pj: 0.0, offset: 0.0 }
    }
}

impl BackgroundSection {
    pub fn model(&self) -> Result<BackgroundModel> {
        let m = BackgroundModel { rate_per_pj: self.rate_per_pj, offset: self.offset };
        m.validate()?;
        Ok(m)
    }
}

/// Complete description of a simulated experiment campaign.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub emitter: EmitterSection,
    pub pulse: PulseSection,
    pub rabi: RabiSection,
    pub super_scan: SuperScanSection,
    pub lifetime: LifetimeSection,
    pub g2: G2Section,
    pub background: BackgroundSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ProtocolError::InvalidConfig(msg));
        if !(self.emitter.t1_ns > 0.0) {
            return bad(format!("emitter.t1_ns must be positive, got {}", self.emitter.t1_ns));
        }
        if let Some(t2) = self.emitter.t2_star_ns {
            if !(t2 > 0.0) || t2 > 2.0 * self.emitter.t1_ns {
                return bad(format!(
                    "emitter.t2_star_ns must lie in (0, 2 t1], got {t2}"
                ));
            }
        }
        for (name, v) in [
            ("pulse.narrowband_fwhm_ghz", self.pulse.narrowband_fwhm_ghz),
            ("pulse.source_fwhm_ghz", self.pulse.source_fwhm_ghz),
            ("pulse.subpico_slit_ghz", self.pulse.subpico_slit_ghz),
            ("rabi.amplitude_max", self.rabi.amplitude_max),
            ("super_scan.fixed_detuning_ghz", self.super_scan.fixed_detuning_ghz),
            ("super_scan.fixed_amplitude", self.super_scan.fixed_amplitude),
            ("super_scan.color_fwhm_ghz", self.super_scan.color_fwhm_ghz),
            ("super_scan.detuning_step_ghz", self.super_scan.detuning_step_ghz),
            ("super_scan.amplitude_max", self.super_scan.amplitude_max),
            ("super_scan.grid_span_ghz", self.super_scan.grid_span_ghz),
            ("lifetime.irf_sigma_ns + 1", self.lifetime.irf_sigma_ns + 1.0),
            ("lifetime.bin_width_ns", self.lifetime.bin_width_ns),
            ("g2.rep_period_ns", self.g2.rep_period_ns),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(k) = self.pulse.kappa {
            if !(k > 0.0) {
                return bad(format!("pulse.kappa must be positive, got {k}"));
            }
        }
        if self.super_scan.detuning_stop_ghz <= self.super_scan.detuning_start_ghz {
            return bad("super_scan detuning axis must be increasing".into());
        }
        if self.super_scan.amplitude_points < 2 {
            return bad("super_scan.amplitude_points must be at least 2".into());
        }
        if !(self.super_scan.amplitude_span_ratio > 1.0) {
            return bad("super_scan.amplitude_span_ratio must exceed 1".into());
        }
        if self.rabi.points < 2 {
            return bad("rabi.points must be at least 2".into());
        }
        if !self.super_scan.grid_points.is_power_of_two() {
            return bad("super_scan.grid_points must be a power of two".into());
        }
        let half_span = self.super_scan.grid_span_ghz / 2.0;
        let lo = self.super_scan.grid_center_ghz - half_span;
        let needed = -(self.super_scan.detuning_stop_ghz + 4.0 * self.super_scan.color_fwhm_ghz);
        if lo > needed {
            return bad("super_scan spectral grid does not cover the scanned detunings".into());
        }
        Ok(())
    }

    /// Detuning axis magnitudes, strictly increasing.
    pub fn detuning_axis(&self) -> Vec<f64> {
        let s = &self.super_scan;
        let n = ((s.detuning_stop_ghz - s.detuning_start_ghz) / s.detuning_step_ghz).round()
            as usize;
        (0..=n)
            .map(|i| s.detuning_start_ghz + i as f64 * s.detuning_step_ghz)
            .filter(|&d| d <= s.detuning_stop_ghz + 1.0e-9)
            .collect()
    }

    /// Log-spaced amplitude axis up to the scan maximum.
    pub fn amplitude_axis(&self) -> Vec<f64> {
        let s = &self.super_scan;
        let n = s.amplitude_points;
        let lo = s.amplitude_max / s.amplitude_span_ratio;
        let ratio = (s.amplitude_max / lo).powf(1.0 / (n - 1) as f64);
        (0..n).map(|i| lo * ratio.powi(i as i32)).collect()
    }
}

// ---------------------------------------------------------------------------
// pulse construction and calibration

/// Field-to-Rabi conversion constant chosen so the narrowband carve at 1 pJ
/// is exactly a pi pulse.
pub fn calibrate_kappa(narrowband_fwhm_ghz: f64) -> Result<f64> {
    let src = pulsecraft::gaussian_source(narrowband_fwhm_ghz, 0.0, 1.0)?;
    let probe = pulsecraft::to_time(&src, 1.0)?;
    let area = probe.pulse_area();
    if !(area > 0.0) {
        return Err(ProtocolError::Calibration("zero-area narrowband probe".into()));
    }
    Ok(std::f64::consts::PI / area)
}

impl ExperimentConfig {
    pub fn kappa(&self) -> Result<f64> {
        match self.pulse.kappa {
            Some(k) => Ok(k),
            None => calibrate_kappa(self.pulse.narrowband_fwhm_ghz),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    /// Resonant Gaussian carve at the narrowband width.
    Narrowband,
    /// Hard slit of `subpico_slit_ghz` on the broadband source.
    Subpicosecond,
}

// loose enough to keep pulse windows short, tight enough that the clipped
// tail area stays below the 1e-6 Rabi-law tolerance
const TRIM_THRESHOLD: f64 = 1.0e-6;

/// Carved spectrum of the given kind at field amplitude `a` (sqrt pJ).
pub fn build_spectrum(
    cfg: &ExperimentConfig,
    kind: PulseKind,
    a: f64,
) -> Result<pulsecraft::SpectralEnvelope> {
    if a < 0.0 {
        return Err(ProtocolError::InvalidConfig(format!("negative amplitude {a}")));
    }
    let spectrum = match kind {
        PulseKind::Narrowband => {
            pulsecraft::gaussian_source(cfg.pulse.narrowband_fwhm_ghz, 0.0, a * a)?
        }
        PulseKind::Subpicosecond => {
            let src = pulsecraft::gaussian_source(cfg.pulse.source_fwhm_ghz, 0.0, 1.0)?;
            let mask = SlitMask::single(0.0, cfg.pulse.subpico_slit_ghz, 1.0, 0.0)?;
            pulsecraft::apply_mask(&src, &mask)?.with_energy(a * a)?
        }
    };
    Ok(spectrum)
}

/// Resonant pulse of the given kind at field amplitude `a` (sqrt pJ),
/// trimmed to its support.
pub fn build_pulse(cfg: &ExperimentConfig, kind: PulseKind, a: f64) -> Result<TemporalEnvelope> {
    let spectrum = build_spectrum(cfg, kind, a)?;
    Ok(pulsecraft::to_time(&spectrum, cfg.kappa()?)?.trimmed(TRIM_THRESHOLD))
}

fn final_inversion(
    model: &EmitterModel,
    pulse: &TemporalEnvelope,
    tols: Tolerances,
) -> Result<f64> {
    let rho0 = DensityMatrix::ground_state(model.dim());
    let traj = dynamics::evolve(model, &rho0, pulse, tols)?;
    Ok(traj.final_state().population(1))
}

/// Amplitude of the first inversion maximum of the noiseless sweep, refined
/// by two quadratic-interpolation passes around the grid maximum.
pub fn calibrate_pi(cfg: &ExperimentConfig, kind: PulseKind) -> Result<f64> {
    cfg.validate()?;
    let model = cfg.emitter.model()?;
    let tols = Tolerances { rel: 1.0e-10, abs: 1.0e-12 };
    let n = 61;
    let a_max = cfg.rabi.amplitude_max;
    let eval = |a: f64| -> Result<f64> {
        let pulse = build_pulse(cfg, kind, a)?;
        final_inversion(&model, &pulse, tols)
    };
    let axis: Vec<f64> = (1..=n).map(|i| a_max * i as f64 / n as f64).collect();
    let curve: Vec<f64> = axis.iter().map(|&a| eval(a)).collect::<Result<_>>()?;
    let mut peak = None;
    for i in 1..curve.len() - 1 {
        if curve[i] > curve[i - 1] && curve[i] >= curve[i + 1] {
            peak = Some(i);
            break;
        }
    }
    let i = peak.ok_or_else(|| {
        ProtocolError::Calibration("no inversion maximum inside the amplitude range".into())
    })?;
    let refine = |a0: f64, h: f64| -> Result<f64> {
        let (ym, y0, yp) = (eval(a0 - h)?, eval(a0)?, eval(a0 + h)?);
        let denom = ym - 2.0 * y0 + yp;
        if denom.abs() < 1.0e-300 {
            return Ok(a0);
        }
        Ok(a0 + 0.5 * h * (ym - yp) / denom)
    };
    let h1 = a_max / n as f64;
    let v1 = refine(axis[i], h1)?;
    let v2 = refine(v1, h1 / 8.0)?;
    Ok(v2)
}

// ---------------------------------------------------------------------------
// Rabi sweeps

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RabiSweep {
    pub amplitude: Vec<f64>,
    pub inversion: Vec<f64>,
    /// Synthetic detector counts when the detector model is enabled.
    pub counts: Option<Vec<f64>>,
}

impl RabiSweep {
    /// Interior extrema of the noiseless curve (oscillation count).
    pub fn extrema(&self) -> usize {
        let y = &self.inversion;
        let mut count = 0;
        for i in 1..y.len() - 1 {
            if (y[i] > y[i - 1] && y[i] > y[i + 1]) || (y[i] < y[i - 1] && y[i] < y[i + 1]) {
                count += 1;
            }
        }
        count
    }
}

/// Noiseless inversion versus pulse amplitude, with optional Poisson
/// detector counts on top (counts_scale * P_e + background per pulse).
pub fn run_rabi_sweep(cfg: &ExperimentConfig, kind: PulseKind) -> Result<RabiSweep> {
    cfg.validate()?;
    let model = cfg.emitter.model()?;
    let tols = Tolerances { rel: 1.0e-10, abs: 1.0e-12 };
    let n = cfg.rabi.points;
    let amplitude: Vec<f64> =
        (1..=n).map(|i| cfg.rabi.amplitude_max * i as f64 / n as f64).collect();
    let inversion: Vec<f64> = amplitude
        .par_iter()
        .map(|&a| {
            let pulse = build_pulse(cfg, kind, a)?;
            final_inversion(&model, &pulse, tols)
        })
        .collect::<Result<_>>()?;
    let counts = match cfg.rabi.counts_scale {
        None => None,
        Some(scale) => {
            let bg = cfg.background.model()?;
            let sampled: Vec<f64> = amplitude
                .iter()
                .zip(&inversion)
                .enumerate()
                .map(|(i, (&a, &p))| {
                    let mean = scale * p + bg.counts_per_pulse(a * a);
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(i as u64);
                    photonstats::sample_poisson(&mut rng, mean) as f64
                })
                .collect();
            Some(sampled)
        }
    };
    Ok(RabiSweep { amplitude, inversion, counts })
}

// ---------------------------------------------------------------------------
// SUPER scan

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFailure {
    pub amplitude_index: usize,
    pub detuning_index: usize,
    pub message: String,
}

/// Two-color scan result. `inversion[i][j]` is the normalized inversion at
/// amplitude index i and detuning index j; normalization is the simulated
/// count rate of the resonant narrowband pi reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanGrid {
    pub detuning_ghz: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub inversion: Vec<Vec<f64>>,
    pub fixed_detuning_ghz: f64,
    pub fixed_amplitude: f64,
    pub normalization: f64,
    pub failures: Vec<GridFailure>,
}

impl ScanGrid {
    /// Global maximum (value, detuning GHz, amplitude).
    pub fn peak(&self) -> (f64, f64, f64) {
        let mut best = (f64::MIN, 0.0, 0.0);
        for (i, row) in self.inversion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, self.detuning_ghz[j], self.amplitude[i]);
                }
            }
        }
        best
    }

    /// The row at the largest amplitude.
    pub fn max_amplitude_row(&self) -> &[f64] {
        self.inversion.last().map(|r| r.as_slice()).unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.inversion.len() != self.amplitude.len()
            || self.inversion.iter().any(|r| r.len() != self.detuning_ghz.len())
        {
            return Err(ProtocolError::InvalidConfig("scan grid shape mismatch".into()));
        }
        const EPS: f64 = 1.0e-6;
        for row in &self.inversion {
            for &v in row {
                if !v.is_nan() && !(-EPS..=1.0 + EPS).contains(&v) {
                    return Err(ProtocolError::InvalidConfig(format!(
                        "normalized inversion {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

struct SuperContext {
    grid: GridSpec,
    fixed: SpectralEnvelope,
    kappa: f64,
    model: EmitterModel,
    tols: Tolerances,
}

impl SuperContext {
    fn new(cfg: &ExperimentConfig, fixed_scale: f64) -> Result<Self> {
        let s = &cfg.super_scan;
        let grid = GridSpec::new(s.grid_points, s.grid_span_ghz, s.grid_center_ghz)?;
        let a1 = s.fixed_amplitude * fixed_scale;
        let fixed = pulsecraft::gaussian_on_grid(
            &grid,
            s.color_fwhm_ghz,
            -s.fixed_detuning_ghz,
            a1 * a1,
            0.0,
        )?;
        Ok(Self {
            grid,
            fixed,
            kappa: cfg.kappa()?,
            model: cfg.emitter.model()?,
            tols: Tolerances::default(),
        })
    }

    /// Final excited population for second-color (detuning magnitude,
    /// amplitude); amplitude 0 means the fixed color alone.
    fn point(&self, cfg: &ExperimentConfig, det2_ghz: f64, a2: f64) -> Result<f64> {
        let s = &cfg.super_scan;
        let two_color = if a2 > 0.0 {
            let second = pulsecraft::gaussian_on_grid(
                &self.grid,
                s.color_fwhm_ghz,
                -det2_ghz,
                a2 * a2,
                0.0,
            )?;
            self.fixed.add(&second)?
        } else {
            self.fixed.clone()
        };
        let pulse = pulsecraft::to_time(&two_color, self.kappa)?.trimmed(TRIM_THRESHOLD);
        final_inversion(&self.model, &pulse, self.tols)
    }
}

/// Simulated count rate of the resonant narrowband pi reference, used as the
/// normalization denominator.
pub fn pi_reference_inversion(cfg: &ExperimentConfig) -> Result<f64> {
    let model = cfg.emitter.model()?;
    let pulse = build_pulse(cfg, PulseKind::Narrowband, 1.0)?;
    final_inversion(&model, &pulse, Tolerances::default())
}

/// Two-color swing-up scan over (detuning, amplitude) of the second color.
/// Grid points are independent; evaluation is parallel but the aggregation
/// is indexed, so results are identical for any worker count.
pub fn run_super_scan(cfg: &ExperimentConfig) -> Result<ScanGrid> {
    cfg.validate()?;
    let ctx = SuperContext::new(cfg, 1.0)?;
    let detuning = cfg.detuning_axis();
    let amplitude = cfg.amplitude_axis();
    let normalization = pi_reference_inversion(cfg)?;
    let nd = detuning.len();
    let tasks: Vec<(usize, usize)> = (0..amplitude.len())
        .flat_map(|i| (0..nd).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<((usize, usize), std::result::Result<f64, String>)> = tasks
        .par_iter()
        .map(|&(i, j)| {
            let r = ctx
                .point(cfg, detuning[j], amplitude[i])
                .map(|p| p / normalization)
                .map_err(|e| e.to_string());
            ((i, j), r)
        })
        .collect();
    let mut inversion = vec![vec![f64::NAN; nd]; amplitude.len()];
    let mut failures = Vec::new();
    for ((i, j), r) in outcomes {
        match r {
            Ok(v) => inversion[i][j] = v,
            Err(message) => {
                failures.push(GridFailure { amplitude_index: i, detuning_index: j, message })
            }
        }
    }
    let grid = ScanGrid {
        detuning_ghz: detuning,
        amplitude,
        inversion,
        fixed_detuning_ghz: cfg.super_scan.fixed_detuning_ghz,
        fixed_amplitude: cfg.super_scan.fixed_amplitude,
        normalization,
        failures,
    };
    grid.validate()?;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuperColor {
    Fixed,
    Scanned,
}

/// Maximum raw inversion with one color alone. The fixed color is a single
/// operating point; the scanned color is maximized over the full grid.
pub fn run_single_pulse_control(cfg: &ExperimentConfig, color: SuperColor) -> Result<f64> {
    cfg.validate()?;
    match color {
        SuperColor::Fixed => {
            let ctx = SuperContext::new(cfg, 1.0)?;
            ctx.point(cfg, 0.0, 0.0)
        }
        SuperColor::Scanned => {
            let s = &cfg.super_scan;
            let grid = GridSpec::new(s.grid_points, s.grid_span_ghz, s.grid_center_ghz)?;
            let kappa = cfg.kappa()?;
            let model = cfg.emitter.model()?;
            let detuning = cfg.detuning_axis();
            let amplitude = cfg.amplitude_axis();
            let tasks: Vec<(f64, f64)> = amplitude
                .iter()
                .flat_map(|&a| detuning.iter().map(move |&d| (d, a)))
                .collect();
            let values: Vec<f64> = tasks
                .par_iter()
                .map(|&(d, a)| {
                    let second =
                        pulsecraft::gaussian_on_grid(&grid, s.color_fwhm_ghz, -d, a * a, 0.0)?;
                    let pulse = pulsecraft::to_time(&second, kappa)?.trimmed(TRIM_THRESHOLD);
                    final_inversion(&model, &pulse, Tolerances::default())
                })
                .collect::<Result<_>>()?;
            Ok(values.into_iter().fold(0.0, f64::max))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerPoint {
    pub multiplier: f64,
    pub best_detuning_ghz: f64,
    pub best_inversion: f64,
}

/// Raise the total two-color power and re-optimize the second-color detuning
/// at each multiplier. The multiplier scales pulse energy (both colors), so
/// field amplitudes scale by its square root. Returns raw inversion.
pub fn run_super_power_extension(
    cfg: &ExperimentConfig,
    multipliers: &[f64],
) -> Result<Vec<PowerPoint>> {
    cfg.validate()?;
    if multipliers.iter().any(|&m| m < 1.0) {
        return Err(ProtocolError::InvalidConfig("multipliers must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..multipliers.len()).collect();
    order.sort_by(|&a, &b| multipliers[a].total_cmp(&multipliers[b]));
    let step = cfg.super_scan.detuning_step_ghz;
    let mut best_det =
        0.5 * (cfg.super_scan.detuning_start_ghz + cfg.super_scan.detuning_stop_ghz);
    let mut out = vec![
        PowerPoint { multiplier: f64::NAN, best_detuning_ghz: 0.0, best_inversion: 0.0 };
        multipliers.len()
    ];
    let mut first = true;
    for &idx in &order {
        let m = multipliers[idx];
        let scale = m.sqrt();
        let ctx = SuperContext::new(cfg, scale)?;
        let a2 = cfg.super_scan.amplitude_max * scale;
        // the first multiplier searches the full scan band; later ones
        // refine around the previous optimum, which drifts upward in
        // detuning as power grows
        let dets: Vec<f64> = if first {
            cfg.detuning_axis()
        } else {
            let half = 30;
            (-half..=half).map(|k| best_det + k as f64 * step).filter(|&d| d > 0.0).collect()
        };
        let best_of = |dets: &[f64], seed: (f64, f64)| -> Result<(f64, f64)> {
            let row: Vec<(f64, f64)> = dets
                .par_iter()
                .map(|&d| ctx.point(cfg, d, a2).map(|p| (d, p)))
                .collect::<Result<_>>()?;
            Ok(row.into_iter().fold(seed, |acc, x| if x.1 > acc.1 { x } else { acc }))
        };
        let (d_coarse, v_coarse) = best_of(&dets, (best_det, f64::MIN))?;
        let fine: Vec<f64> = (-5..=5)
            .map(|k| d_coarse + k as f64 * step / 5.0)
            .filter(|&d| d > 0.0)
            .collect();
        let (d, v) = best_of(&fine, (d_coarse, v_coarse))?;
        best_det = d;
        out[idx] = PowerPoint { multiplier: m, best_detuning_ghz: d, best_inversion: v };
        first = false;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// lifetime experiment

/// Pulsed excitation at the calibrated pi amplitude (times the configured
/// multiple), then decay-histogram synthesis and lifetime fit.
pub fn run_lifetime_experiment(cfg: &ExperimentConfig) -> Result<(DecayHistogram, FitResult)> {
    cfg.validate()?;
    let model = cfg.emitter.model()?;
    let a_pi = calibrate_pi(cfg, PulseKind::Narrowband)?;
    let a = a_pi * cfg.lifetime.pulse_area_pi_multiple;
    let pulse = build_pulse(cfg, PulseKind::Narrowband, a)?;
    let p_exc = final_inversion(&model, &pulse, Tolerances::default())?;
    let events = (cfg.lifetime.events as f64 * p_exc).round() as u64;
    let hist = photonstats::synthesize_decay_histogram(
        cfg.emitter.t1_ns,
        cfg.lifetime.irf_sigma_ns,
        events,
        cfg.lifetime.bin_width_ns,
        cfg.seed,
    )?;
    let fit = estimators::fit_lifetime(&hist)?;
    Ok((hist, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn unitary_cfg() -> ExperimentConfig {
        ExperimentConfig {
            emitter: EmitterSection { unitary: true, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn kappa_calibration_makes_unit_amplitude_pi() {
        let cfg = unitary_cfg();
        let a_pi = calibrate_pi(&cfg, PulseKind::Narrowband).unwrap();
        assert!((a_pi - 1.0).abs() < 1.0e-6, "a_pi = {a_pi}");
    }

    #[test]
    fn rabi_sweep_matches_sin_squared() {
        let cfg = ExperimentConfig {
            rabi: RabiSection { amplitude_max: 7.0, points: 35, counts_scale: None },
            ..unitary_cfg()
        };
        let sweep = run_rabi_sweep(&cfg, PulseKind::Narrowband).unwrap();
        for (&a, &p) in sweep.amplitude.iter().zip(&sweep.inversion) {
            let expected = (0.5 * PI * a).sin().powi(2);
            assert!(
                (p - expected).abs() < 1.0e-6,
                "a {a}: P {p} vs sin^2 {expected}"
            );
        }
    }

    #[test]
    fn narrowband_sweep_has_seven_extrema() {
        // 7.2 keeps the 7 pi extremum interior to the sampled axis
        let cfg = ExperimentConfig {
            rabi: RabiSection { amplitude_max: 7.2, points: 73, counts_scale: None },
            ..unitary_cfg()
        };
        let sweep = run_rabi_sweep(&cfg, PulseKind::Narrowband).unwrap();
        assert_eq!(sweep.extrema(), 7);
    }

    #[test]
    fn subpicosecond_pi_energy_ratio() {
        // the broadband carve needs far more pulse energy per rotation
        let mut cfg = unitary_cfg();
        cfg.rabi.amplitude_max = 8.0;
        let a_pi_sub = calibrate_pi(&cfg, PulseKind::Subpicosecond).unwrap();
        let e_ratio = a_pi_sub * a_pi_sub; // narrowband pi energy is 1 pJ
        assert!(
            (20.0..=60.0).contains(&e_ratio),
            "subpicosecond/narrowband pi energy ratio {e_ratio}"
        );
    }

    #[test]
    fn subpicosecond_sweep_oscillates() {
        let mut cfg = unitary_cfg();
        cfg.rabi.amplitude_max = 8.0;
        let a_pi = calibrate_pi(&cfg, PulseKind::Subpicosecond).unwrap();
        cfg.rabi.amplitude_max = 6.2 * a_pi;
        cfg.rabi.points = 93;
        let sweep = run_rabi_sweep(&cfg, PulseKind::Subpicosecond).unwrap();
        assert_eq!(sweep.extrema(), 6);
    }

    #[test]
    fn noisy_sweep_is_seeded_and_reproducible() {
        let cfg = ExperimentConfig {
            seed: 11,
            rabi: RabiSection { amplitude_max: 3.0, points: 24, counts_scale: Some(2000.0) },
            background: BackgroundSection { rate_per_pj: 10.0, offset: 5.0 },
            ..Default::default()
        };
        let s1 = run_rabi_sweep(&cfg, PulseKind::Narrowband).unwrap();
        let s2 = run_rabi_sweep(&cfg, PulseKind::Narrowband).unwrap();
        assert_eq!(s1.counts, s2.counts);
        let mut cfg3 = cfg.clone();
        cfg3.seed = 12;
        let s3 = run_rabi_sweep(&cfg3, PulseKind::Narrowband).unwrap();
        assert_ne!(s1.counts, s3.counts);
    }

    fn small_scan_cfg() -> ExperimentConfig {
        ExperimentConfig {
            super_scan: SuperScanSection {
                detuning_start_ghz: 320.0,
                detuning_stop_ghz: 370.0,
                detuning_step_ghz: 10.0,
                amplitude_points: 3,
                amplitude_span_ratio: 4.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn super_scan_grid_shape_and_peak() {
        let cfg = small_scan_cfg();
        let grid = run_super_scan(&cfg).unwrap();
        assert_eq!(grid.inversion.len(), 3);
        assert_eq!(grid.inversion[0].len(), 6);
        assert!(grid.failures.is_empty());
        grid.validate().unwrap();
        let (peak, det, amp) = grid.peak();
        assert!(peak > 0.5, "peak {peak}");
        assert_relative_eq!(amp, cfg.super_scan.amplitude_max, max_relative = 1.0e-12);
        assert!((320.0..=370.0).contains(&det));
        // normalization: pi reference maps to 1 by construction
        assert!((grid.normalization - 1.0).abs() < 0.01);
    }

    #[test]
    fn super_scan_identical_across_worker_counts() {
        let cfg = small_scan_cfg();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_super_scan(&cfg).unwrap())
        };
        let g1 = run(1);
        let g4 = run(4);
        for (r1, r4) in g1.inversion.iter().zip(&g4.inversion) {
            for (a, b) in r1.iter().zip(r4) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn single_pulse_controls_are_dark() {
        let cfg = small_scan_cfg();
        let fixed = run_single_pulse_control(&cfg, SuperColor::Fixed).unwrap();
        let scanned = run_single_pulse_control(&cfg, SuperColor::Scanned).unwrap();
        assert!(fixed < 0.05, "fixed alone {fixed}");
        assert!(scanned < 0.05, "scanned alone {scanned}");
        let (peak, _, _) = run_super_scan(&cfg).unwrap().peak();
        assert!(peak > 10.0 * fixed.max(scanned), "no separation: {peak}");
    }

    #[test]
    fn power_extension_reaches_unity() {
        let cfg = small_scan_cfg();
        let curve = run_super_power_extension(&cfg, &[1.0, 2.5]).unwrap();
        assert!(curve[0].best_inversion > 0.5);
        assert!(curve[1].best_inversion > 0.99, "x2.5 {}", curve[1].best_inversion);
        assert!(curve[1].best_detuning_ghz > curve[0].best_detuning_ghz);
    }

    #[test]
    fn lifetime_experiment_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.lifetime.events = 300_000;
        let (hist, fit) = run_lifetime_experiment(&cfg).unwrap();
        assert!(hist.total_events > 250_000);
        let t1 = fit.value("t1").unwrap();
        assert!((t1 - 16.2).abs() / 16.2 < 0.02, "T1 {t1}");
    }

    #[test]
    fn two_pi_lifetime_experiment_is_flagged() {
        let mut cfg = ExperimentConfig::default();
        cfg.lifetime.pulse_area_pi_multiple = 2.0;
        assert!(run_lifetime_experiment(&cfg).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_axes() {
        let mut cfg = ExperimentConfig::default();
        cfg.super_scan.detuning_stop_ghz = cfg.super_scan.detuning_start_ghz;
        assert!(matches!(cfg.validate(), Err(ProtocolError::InvalidConfig(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.emitter.t1_ns = -1.0;
        assert!(cfg.validate().is_err());
    }
}
