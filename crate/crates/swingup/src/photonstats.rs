//! Detector-level observables: fluorescence decay histograms with a Gaussian
//! instrument response, pulsed second-order coincidence histograms via the
//! quantum-regression procedure, and Poissonian background mixing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    self, DensityMatrix, DynamicsError, EmitterModel, Tolerances, Trajectory,
};
use crate::pulsecraft::TemporalEnvelope;

#[derive(Debug, Error)]
pub enum PhotonStatsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub type Result<T> = std::result::Result<T, PhotonStatsError>;

/// Time-correlated single-photon arrival histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayHistogram {
    /// Uniform bin edges, ns; `counts.len() + 1` entries.
    pub bin_edges_ns: Vec<f64>,
    pub counts: Vec<u64>,
    pub irf_sigma_ns: f64,
    pub total_events: u64,
}

impl DecayHistogram {
    pub fn bin_width_ns(&self) -> f64 {
        self.bin_edges_ns[1] - self.bin_edges_ns[0]
    }

    pub fn bin_centers_ns(&self) -> Vec<f64> {
        self.bin_edges_ns
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    /// Count-weighted mean arrival time, ns.
    pub fn mean_ns(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.bin_centers_ns()
            .iter()
            .zip(&self.counts)
            .map(|(t, &c)| t * c as f64)
            .sum::<f64>()
            / total as f64
    }
}

/// Hanbury Brown-Twiss coincidence record binned by delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    /// Uniform delay-bin centers, ns, symmetric about zero.
    pub delay_bins_ns: Vec<f64>,
    pub counts: Vec<u64>,
    pub repetition_period_ns: f64,
}

impl CoincidenceHistogram {
    /// Integrated counts in a window of one repetition period centered on
    /// `delay_ns`.
    pub fn peak_area(&self, delay_ns: f64) -> u64 {
        let half = 0.5 * self.repetition_period_ns;
        self.delay_bins_ns
            .iter()
            .zip(&self.counts)
            .filter(|(&d, _)| (d - delay_ns).abs() < half)
            .map(|(_, &c)| c)
            .sum()
    }

    /// Center-peak area over the mean side-peak area.
    pub fn g2_zero(&self) -> Result<f64> {
        let t = self.repetition_period_ns;
        let max_k = (self.delay_bins_ns.last().unwrap() / t).floor() as i64;
        if max_k < 1 {
            return Err(PhotonStatsError::InvalidArgument(
                "histogram shorter than one repetition period".into(),
            ));
        }
        let mut side = 0.0;
        let mut n_side = 0.0;
        for k in -max_k..=max_k {
            if k != 0 {
                side += self.peak_area(k as f64 * t) as f64;
                n_side += 1.0;
            }
        }
        if side <= 0.0 {
            return Err(PhotonStatsError::UndefinedRatio("empty side peaks".into()));
        }
        Ok(self.peak_area(0.0) as f64 / (side / n_side))
    }
}

/// Laser-induced background: counts per excitation pulse, linear in pulse
/// energy plus a constant offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub rate_per_pj: f64,
    pub offset: f64,
}

impl BackgroundModel {
    pub fn none() -> Self {
        Self { rate_per_pj: 0.0, offset: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_per_pj < 0.0 || self.offset < 0.0 {
            return Err(PhotonStatsError::InvalidArgument(
                "background fields must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Expected background counts for one pulse of the given energy.
    pub fn counts_per_pulse(&self, pulse_energy_pj: f64) -> f64 {
        self.rate_per_pj * pulse_energy_pj + self.offset
    }
}

/// Emission intensity time series `I(t) = rho_ee(t) / T1` (photons/ns) at
/// the trajectory's stored times (ps).
pub fn emission_curve(traj: &Trajectory, t1_ns: f64) -> (Vec<f64>, Vec<f64>) {
    let intensity = traj
        .excited_population()
        .iter()
        .map(|p| p / t1_ns)
        .collect();
    (traj.times_ps().to_vec(), intensity)
}

/// Monte-Carlo TCSPC record: arrival times Exp(T1) blurred by a Gaussian
/// IRF, one RNG stream per (seed) so runs are reproducible bit-for-bit.
pub fn synthesize_decay_histogram(
    t1_ns: f64,
    irf_sigma_ns: f64,
    n_events: u64,
    bin_width_ns: f64,
    seed: u64,
) -> Result<DecayHistogram> {
    if n_events == 0 || !(t1_ns > 0.0) || !(bin_width_ns > 0.0) || irf_sigma_ns < 0.0 {
        return Err(PhotonStatsError::InvalidArgument(
            "need n_events > 0, T1 > 0, bin width > 0, IRF sigma >= 0".into(),
        ));
    }
    let t_min = -(5.0 * irf_sigma_ns / bin_width_ns).ceil() * bin_width_ns - bin_width_ns;
    let t_max = 12.0 * t1_ns + 5.0 * irf_sigma_ns;
    let n_bins = ((t_max - t_min) / bin_width_ns).ceil() as usize;
    let mut counts = vec![0_u64; n_bins];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = 0_u64;
    for _ in 0..n_events {
        let u: f64 = rng.gen::<f64>();
        let mut t = -t1_ns * (1.0 - u).ln();
        if irf_sigma_ns > 0.0 {
            t += irf_sigma_ns * sample_standard_normal(&mut rng);
        }
        let idx = ((t - t_min) / bin_width_ns).floor();
        if idx >= 0.0 && (idx as usize) < n_bins {
            counts[idx as usize] += 1;
            kept += 1;
        }
    }
    let bin_edges_ns = (0..=n_bins).map(|i| t_min + i as f64 * bin_width_ns).collect();
    Ok(DecayHistogram { bin_edges_ns, counts, irf_sigma_ns, total_events: kept })
}

fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Expected per-period photon yields of the driven emitter, from the
/// quantum-regression procedure: evolve to t1, apply the jump
/// `rho -> sigma- rho sigma+ / tr`, re-evolve, and read the emission again.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionYields {
    /// Mean photons per period.
    pub singles: f64,
    /// Mean ordered photon pairs per period (center-peak weight).
    pub pairs: f64,
    /// Intrinsic g2(0) = pairs / singles^2.
    pub g2_signal: f64,
}

/// Quantum-regression evaluation of the per-period photon statistics for a
/// pulsed two-level emitter.
pub fn regression_yields(
    model: &EmitterModel,
    pulse: &TemporalEnvelope,
    rep_period_ns: f64,
    tols: Tolerances,
) -> Result<RegressionYields> {
    if !model.is_two_level() {
        return Err(PhotonStatsError::InvalidArgument(
            "regression g2 implemented for the two-level model".into(),
        ));
    }
    let support = pulse.end_ps() - pulse.start_ps();
    if rep_period_ns * 1.0e3 < 4.0 * support {
        return Err(PhotonStatsError::InvalidArgument(format!(
            "repetition period {rep_period_ns} ns too short for pulse support {support} ps"
        )));
    }
    let t1 = model.t1_ns;
    let ground = DensityMatrix::ground_state(2);
    let traj = dynamics::evolve(model, &ground, pulse, tols)?;

    // photons during the pulse window plus the free-decay tail
    let times = traj.times_ps();
    let pops = traj.excited_population();
    let during: f64 = trapz_irregular(times, &pops) * 1.0e-3 / t1;
    let rem_ns = rep_period_ns - (pulse.end_ps() - pulse.start_ps()) * 1.0e-3;
    let pe_end = traj.final_state().population(1);
    let tail = pe_end * (1.0 - (-rem_ns / t1).exp());
    let singles = during + tail;

    // after a jump at t1 the two-level emitter restarts from the ground
    // state; a second photon needs re-excitation by the rest of the pulse,
    // so only jump times inside the pulse window contribute.
    let n_grid = 160;
    let t_end = pulse.end_ps();
    let dt = (t_end - pulse.start_ps()) / n_grid as f64;
    let mut pair_integrand = Vec::with_capacity(n_grid + 1);
    let mut grid = Vec::with_capacity(n_grid + 1);
    for k in 0..=n_grid {
        let t1_ps = pulse.start_ps() + k as f64 * dt;
        let rate = traj.sample(t1_ps).population(1) / t1 * 1.0e-3; // photons/ps
        let yield2 = if rate <= 0.0 || t_end - t1_ps < 1.0e-12 {
            0.0
        } else {
            let re = dynamics::evolve_between(model, &ground, pulse, t1_ps, t_end, tols)?;
            let re_times = re.times_ps();
            let re_pops = re.excited_population();
            let re_during = trapz_irregular(re_times, &re_pops) * 1.0e-3 / t1;
            let re_tail_ns = rep_period_ns - (t_end - pulse.start_ps()) * 1.0e-3;
            re_during + re.final_state().population(1) * (1.0 - (-re_tail_ns / t1).exp())
        };
        grid.push(t1_ps);
        pair_integrand.push(rate * yield2);
    }
    let pairs = trapz_irregular(&grid, &pair_integrand);
    let g2_signal = if singles > 0.0 { pairs / (singles * singles) } else { 0.0 };
    Ok(RegressionYields { singles, pairs, g2_signal })
}

/// Poissonian-background mixing of an intrinsic correlation:
/// `g2 = (s^2 g2_s + 2 s b + b^2) / (s + b)^2`.
pub fn mix_background(g2_signal: f64, signal_counts: f64, background_counts: f64) -> Result<f64> {
    if signal_counts < 0.0 || background_counts < 0.0 {
        return Err(PhotonStatsError::InvalidArgument("counts must be non-negative".into()));
    }
    let total = signal_counts + background_counts;
    if total <= 0.0 {
        return Err(PhotonStatsError::UndefinedRatio("zero total counts".into()));
    }
    let (s, b) = (signal_counts, background_counts);
    Ok((s * s * g2_signal + 2.0 * s * b + b * b) / (total * total))
}

/// Pulsed photon-purity measurement: quantum-regression statistics plus
/// synthesized coincidence histogram with Poissonian background. Returns the
/// g2(0) estimated from the histogram peak areas together with the record.
#[allow(clippy::too_many_arguments)]
pub fn g2_pulsed(
    model: &EmitterModel,
    pulse: &TemporalEnvelope,
    rep_period_ns: f64,
    n_periods: u64,
    background: &BackgroundModel,
    seed: u64,
    tols: Tolerances,
) -> Result<(f64, CoincidenceHistogram)> {
    background.validate()?;
    let yields = regression_yields(model, pulse, rep_period_ns, tols)?;
    let s = yields.singles;
    let b = background.counts_per_pulse(pulse.energy_pj());
    let center_mean = n_periods as f64 * (s * s * yields.g2_signal + 2.0 * s * b + b * b);
    let side_mean = n_periods as f64 * (s + b) * (s + b);

    // 10 side peaks either side, 64 bins per period, double-sided
    // exponential shape with the T1 tail inside each peak
    let n_side = 10_i64;
    let bins_per_period = 64_usize;
    let bin_w = rep_period_ns / bins_per_period as f64;
    let total_bins = (2 * n_side + 1) as usize * bins_per_period;
    let t_lo = -(n_side as f64 + 0.5) * rep_period_ns;
    let delay_bins_ns: Vec<f64> =
        (0..total_bins).map(|i| t_lo + (i as f64 + 0.5) * bin_w).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0_u64; total_bins];
    for k in -n_side..=n_side {
        let mean = if k == 0 { center_mean } else { side_mean };
        let peak_center = k as f64 * rep_period_ns;
        for (i, &d) in delay_bins_ns.iter().enumerate() {
            let off = d - peak_center;
            if off.abs() >= 0.5 * rep_period_ns {
                continue;
            }
            let mass = laplace_bin_mass(off, bin_w, model.t1_ns);
            counts[i] += sample_poisson(&mut rng, mean * mass);
        }
    }
    let hist = CoincidenceHistogram { delay_bins_ns, counts, repetition_period_ns: rep_period_ns };
    let g2 = hist.g2_zero().unwrap_or(0.0);
    Ok((g2, hist))
}

/// Probability mass of a Laplace(T1) delay distribution in a bin of width
/// `w` centered `off` from the peak.
fn laplace_bin_mass(off: f64, w: f64, t1_ns: f64) -> f64 {
    let cdf = |x: f64| {
        if x < 0.0 {
            0.5 * (x / t1_ns).exp()
        } else {
            1.0 - 0.5 * (-x / t1_ns).exp()
        }
    };
    cdf(off + 0.5 * w) - cdf(off - 0.5 * w)
}

pub(crate) fn sample_poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean > 30.0 {
        // normal approximation in the high-count regime
        let x = mean + mean.sqrt() * sample_standard_normal(rng);
        return x.round().max(0.0) as u64;
    }
    let limit = (-mean).exp();
    let mut k = 0_u64;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

fn trapz_irregular(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (yw[0] + yw[1]) * (xw[1] - xw[0]))
        .sum()
}
