//! Weighted nonlinear least squares (damped Gauss-Newton with
//! Levenberg-Marquardt regularization) and the fit models used by the
//! protocols: damped Rabi oscillations with a linear-in-energy background,
//! exponential decay convolved with a Gaussian instrument response, and
//! quasi-CW Bloch traces fitted by integrating the two-level master equation
//! inside the residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError, EmitterModel, Tolerances};
use crate::photonstats::DecayHistogram;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fit range error: {0}")]
    FitRange(String),
    #[error("under-sampled oscillation: {0}")]
    Aliasing(String),
    #[error("singular normal equations (after damped retries)")]
    SingularNormalEquations,
    #[error("fit not converged: {0}")]
    NotConverged(String),
    #[error("undefined visibility: {0}")]
    UndefinedVisibility(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Vectorized fit model: fill `out` with the model values at all `xs`.
pub trait FitModel {
    fn eval(&self, params: &[f64], xs: &[f64], out: &mut [f64]);
}

/// Pointwise closure adapter.
pub struct Pointwise<F: Fn(&[f64], f64) -> f64>(pub F);

impl<F: Fn(&[f64], f64) -> f64> FitModel for Pointwise<F> {
    fn eval(&self, params: &[f64], xs: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = (self.0)(params, x);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative cost-change convergence threshold.
    pub cost_tol: f64,
    /// Infinity-norm threshold on the cost gradient.
    pub grad_tol: f64,
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 500, cost_tol: 1.0e-10, grad_tol: 1.0e-10, bounds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub unit: String,
    pub value: f64,
    pub stderr: f64,
}

/// Converged (or flagged) fit output with named parameters, covariance,
/// goodness of fit, and the x-range actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: Vec<FitParameter>,
    pub covariance: Vec<Vec<f64>>,
    pub reduced_chi_square: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_points: usize,
    pub fit_range: (f64, f64),
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.parameter(name).map(|p| p.value)
    }
}

/// Raw engine output before parameter naming.
#[derive(Debug, Clone)]
pub struct FitEstimate {
    pub values: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub reduced_chi_square: f64,
    pub cost: f64,
    pub gradient_inf_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_points: usize,
}

impl FitEstimate {
    pub fn into_result(
        self,
        names_units: &[(&str, &str)],
        fit_range: (f64, f64),
        warnings: Vec<String>,
    ) -> FitResult {
        let parameters = names_units
            .iter()
            .enumerate()
            .map(|(j, (name, unit))| FitParameter {
                name: name.to_string(),
                unit: unit.to_string(),
                value: self.values[j],
                stderr: self.covariance[(j, j)].max(0.0).sqrt(),
            })
            .collect();
        let p = self.values.len();
        let covariance = (0..p)
            .map(|i| (0..p).map(|j| self.covariance[(i, j)]).collect())
            .collect();
        FitResult {
            parameters,
            covariance,
            reduced_chi_square: self.reduced_chi_square,
            converged: self.converged,
            iterations: self.iterations,
            n_points: self.n_points,
            fit_range,
            warnings,
        }
    }
}

/// Damped Gauss-Newton minimization of the weighted squared residuals
/// `sum ((y_i - f(p, x_i)) / sigma_i)^2`. Deterministic given its inputs;
/// non-convergence is reported in the flag, not as an error.
pub fn fit_nlls<M: FitModel>(
    model: &M,
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    initial_guess: &[f64],
    opts: &FitOptions,
) -> Result<FitEstimate> {
    let n = x.len();
    let np = initial_guess.len();
    if n != y.len() || n != sigma.len() {
        return Err(EstimatorError::InvalidArgument("x, y, sigma lengths differ".into()));
    }
    if n <= np {
        return Err(EstimatorError::InvalidArgument(format!(
            "need more points ({n}) than parameters ({np})"
        )));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(EstimatorError::InvalidArgument("all sigma must be > 0".into()));
    }
    if let Some(b) = &opts.bounds {
        if b.len() != np {
            return Err(EstimatorError::InvalidArgument("bounds length mismatch".into()));
        }
    }
    let clamp = |p: &mut Vec<f64>| {
        if let Some(b) = &opts.bounds {
            for (v, &(lo, hi)) in p.iter_mut().zip(b) {
                *v = v.clamp(lo, hi);
            }
        }
    };

    let mut fbuf = vec![0.0; n];
    let residuals = |p: &[f64], fbuf: &mut Vec<f64>| -> DVector<f64> {
        model.eval(p, x, fbuf);
        DVector::from_iterator(n, fbuf.iter().zip(y).zip(sigma).map(|((f, y), s)| (y - f) / s))
    };

    let mut p = initial_guess.to_vec();
    clamp(&mut p);
    let mut r = residuals(&p, &mut fbuf);
    let mut cost = r.norm_squared();
    let mut lambda = 1.0e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = DMatrix::<f64>::zeros(n, np);

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        // central-difference Jacobian of the residual vector
        for j in 0..np {
            let h = 1.0e-6 * p[j].abs().max(1.0e-8);
            let mut pp = p.clone();
            pp[j] += h;
            clamp(&mut pp);
            let rp = residuals(&pp, &mut fbuf);
            let mut pm = p.clone();
            pm[j] -= h;
            clamp(&mut pm);
            let rm = residuals(&pm, &mut fbuf);
            let denom = pp[j] - pm[j];
            if denom == 0.0 {
                jac.column_mut(j).fill(0.0);
            } else {
                for i in 0..n {
                    jac[(i, j)] = (rp[i] - rm[i]) / denom;
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r; // gradient of cost/2
        if 2.0 * g.amax() < opts.grad_tol {
            converged = true;
            break;
        }

        // inner damping loop
        let mut stepped = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for j in 0..np {
                a[(j, j)] += lambda * jtj[(j, j)].max(1.0e-12);
            }
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1.0e12 {
                        return Err(EstimatorError::SingularNormalEquations);
                    }
                    continue;
                }
            };
            let mut pnew: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            clamp(&mut pnew);
            let rnew = residuals(&pnew, &mut fbuf);
            let cnew = rnew.norm_squared();
            if cnew.is_finite() && cnew <= cost {
                let rel_drop = (cost - cnew) / cost.max(1.0e-300);
                let step_rel = pnew
                    .iter()
                    .zip(&p)
                    .map(|(n, o)| (n - o).abs() / (o.abs() + 1.0e-12))
                    .fold(0.0, f64::max);
                p = pnew;
                r = rnew;
                cost = cnew;
                lambda = (lambda / 3.0).max(1.0e-14);
                stepped = true;
                if rel_drop < opts.cost_tol || step_rel < 1.0e-9 || cost < 1.0e-20 * n as f64 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1.0e12 {
                break;
            }
        }
        if !stepped {
            // no downhill direction exists even fully damped: numerically a
            // stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }

    // covariance from the final Jacobian
    for j in 0..np {
        let h = 1.0e-6 * p[j].abs().max(1.0e-8);
        let mut pp = p.clone();
        pp[j] += h;
        let rp = residuals(&pp, &mut fbuf);
        let mut pm = p.clone();
        pm[j] -= h;
        let rm = residuals(&pm, &mut fbuf);
        for i in 0..n {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    let jtj = jac.transpose() * &jac;
    let grad_inf = 2.0 * (jac.transpose() * &r).amax();
    let covariance = jtj
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(np, np, f64::NAN));
    let dof = (n - np).max(1) as f64;
    Ok(FitEstimate {
        values: p,
        covariance,
        reduced_chi_square: cost / dof,
        cost,
        gradient_inf_norm: grad_inf,
        converged,
        iterations,
        n_points: n,
    })
}

// ---------------------------------------------------------------------------
// damped Rabi oscillations vs pulse amplitude (sqrt pJ)

/// `I(a) = A exp(-a/a_d) sin^2(kappa a / 2) + c a^2 + b`; the background is
/// linear in pulse energy `a^2`.
pub fn damped_rabi_model(params: &[f64], a: f64) -> f64 {
    let (amp, kappa, a_d, c, b) = (params[0], params[1], params[2], params[3], params[4]);
    amp * (-a / a_d).exp() * (0.5 * kappa * a).sin().powi(2) + c * a * a + b
}

pub const DAMPED_RABI_PARAMS: [(&str, &str); 5] = [
    ("amplitude", "counts"),
    ("kappa", "rad/sqrt(pJ)"),
    ("damping", "sqrt(pJ)"),
    ("bg_quadratic", "counts/pJ"),
    ("offset", "counts"),
];

fn interior_extrema(y: &[f64]) -> usize {
    // 3-point moving average to be robust against shot noise
    let s: Vec<f64> = (0..y.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(y.len() - 1);
            y[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let mut count = 0;
    for i in 1..s.len() - 1 {
        if (s[i] > s[i - 1] && s[i] > s[i + 1]) || (s[i] < s[i - 1] && s[i] < s[i + 1]) {
            count += 1;
        }
    }
    count
}

/// Fit the damped-oscillator Rabi model. `sigma` defaults to Poisson
/// (sqrt of counts) weights when not given.
pub fn fit_damped_rabi(
    amplitude_axis: &[f64],
    counts: &[f64],
    sigma: Option<&[f64]>,
) -> Result<FitResult> {
    let n = amplitude_axis.len();
    if n < 10 || counts.len() != n {
        return Err(EstimatorError::InvalidArgument(
            "need >= 10 matched (amplitude, counts) points".into(),
        ));
    }
    if interior_extrema(counts) < 1 {
        return Err(EstimatorError::FitRange(
            "no oscillation extremum in data; cannot fit a Rabi model".into(),
        ));
    }
    let poisson: Vec<f64>;
    let sig = match sigma {
        Some(s) => s,
        None => {
            poisson = counts.iter().map(|&c| c.max(1.0).sqrt()).collect();
            &poisson
        }
    };
    let a_max = amplitude_axis.iter().cloned().fold(0.0, f64::max);
    let mut spacing = f64::MAX;
    for w in amplitude_axis.windows(2) {
        let d = (w[1] - w[0]).abs();
        if d > 0.0 {
            spacing = spacing.min(d);
        }
    }
    // The cost is highly multimodal in kappa (local minima roughly 2 pi /
    // a_max apart), so a gradient start from a peak-finding heuristic is
    // unreliable. Instead scan a (kappa, a_d) grid; for each candidate the
    // remaining parameters enter linearly and have an exact weighted
    // least-squares solution, so the scan finds the global basin cheaply.
    let kappa_lo = std::f64::consts::PI / a_max;
    let kappa_hi = std::f64::consts::PI / (2.0 * spacing);
    let mut best_init = None;
    let mut best_cost = f64::MAX;
    let n_kappa = 400;
    for ik in 0..=n_kappa {
        let kappa = kappa_lo + (kappa_hi - kappa_lo) * ik as f64 / n_kappa as f64;
        for a_d in [a_max / 3.0, a_max, 3.0 * a_max, 30.0 * a_max] {
            // weighted linear LSQ in (amplitude, c, b) for this (kappa, a_d)
            let mut ata = [[0.0_f64; 3]; 3];
            let mut aty = [0.0_f64; 3];
            for ((&a, &y), &s) in amplitude_axis.iter().zip(counts).zip(sig) {
                let basis = [
                    (-a / a_d).exp() * (0.5 * kappa * a).sin().powi(2),
                    a * a,
                    1.0,
                ];
                let w = 1.0 / (s * s);
                for r in 0..3 {
                    for c in 0..3 {
                        ata[r][c] += w * basis[r] * basis[c];
                    }
                    aty[r] += w * basis[r] * y;
                }
            }
            let m = nalgebra::Matrix3::from_fn(|r, c| ata[r][c]);
            let v = nalgebra::Vector3::from_row_slice(&aty);
            let Some(sol) = m.lu().solve(&v) else { continue };
            if !(sol[0] > 0.0) {
                continue;
            }
            let (c_bg, b) = (sol[1].max(0.0), sol[2].max(0.0));
            let cand = [sol[0], kappa, a_d, c_bg, b];
            let cost: f64 = amplitude_axis
                .iter()
                .zip(counts)
                .zip(sig)
                .map(|((&a, &y), &s)| ((y - damped_rabi_model(&cand, a)) / s).powi(2))
                .sum();
            if cost < best_cost {
                best_cost = cost;
                best_init = Some(cand);
            }
        }
    }
    let init = best_init.ok_or(EstimatorError::SingularNormalEquations)?;
    let opts = FitOptions {
        bounds: Some(vec![
            (0.0, f64::INFINITY),
            (1.0e-9, f64::INFINITY),
            (1.0e-9, f64::INFINITY),
            (0.0, f64::INFINITY),
            (0.0, f64::INFINITY),
        ]),
        ..FitOptions::default()
    };
    let model = Pointwise(|p: &[f64], a: f64| damped_rabi_model(p, a));
    let est = fit_nlls(&model, amplitude_axis, counts, sig, &init, &opts)?;
    let range = (amplitude_axis[0], *amplitude_axis.last().unwrap());
    Ok(est.into_result(&DAMPED_RABI_PARAMS, range, Vec::new()))
}

/// Damped-Rabi fit with iterative trimming of high-amplitude points while
/// the reduced chi-square improves by more than `improve_frac` (the model is
/// known to fail at high pulse energies).
pub fn fit_damped_rabi_trimmed(
    amplitude_axis: &[f64],
    counts: &[f64],
    sigma: Option<&[f64]>,
    improve_frac: f64,
) -> Result<FitResult> {
    let mut order: Vec<usize> = (0..amplitude_axis.len()).collect();
    order.sort_by(|&i, &j| amplitude_axis[i].total_cmp(&amplitude_axis[j]));
    let xs: Vec<f64> = order.iter().map(|&i| amplitude_axis[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| counts[i]).collect();
    let ss: Option<Vec<f64>> = sigma.map(|s| order.iter().map(|&i| s[i]).collect());

    let mut best = fit_damped_rabi(&xs, &ys, ss.as_deref())?;
    let mut len = xs.len();
    while len > 10 {
        let cand = fit_damped_rabi(
            &xs[..len - 1],
            &ys[..len - 1],
            ss.as_deref().map(|s| &s[..len - 1]),
        );
        match cand {
            Ok(c)
                if c.converged
                    && c.reduced_chi_square
                        < best.reduced_chi_square * (1.0 - improve_frac) =>
            {
                best = c;
                len -= 1;
            }
            _ => break,
        }
    }
    Ok(best)
}

/// Population-inversion fidelity from the decay of the oscillation contrast:
/// the exponential envelope evaluated at the pi-pulse amplitude,
/// `F = exp(-a_pi / a_d)` with `a_pi = pi / kappa`. The uncertainty is
/// propagated from the (kappa, damping) covariance block.
pub fn estimate_inversion_fidelity(fit: &FitResult) -> Result<(f64, f64)> {
    if !fit.converged {
        return Err(EstimatorError::NotConverged(
            "fidelity requires a converged damped-Rabi fit".into(),
        ));
    }
    let ik = fit
        .index_of("kappa")
        .ok_or_else(|| EstimatorError::InvalidArgument("fit lacks kappa".into()))?;
    let id = fit
        .index_of("damping")
        .ok_or_else(|| EstimatorError::InvalidArgument("fit lacks damping".into()))?;
    let kappa = fit.parameters[ik].value;
    let a_d = fit.parameters[id].value;
    let a_pi = std::f64::consts::PI / kappa;
    let f = (-a_pi / a_d).exp();
    // dF/dkappa = F * a_pi / (kappa a_d); dF/da_d = F * a_pi / a_d^2
    let dk = f * a_pi / (kappa * a_d);
    let dd = f * a_pi / (a_d * a_d);
    let var = dk * dk * fit.covariance[ik][ik]
        + dd * dd * fit.covariance[id][id]
        + 2.0 * dk * dd * fit.covariance[ik][id];
    Ok((f, var.max(0.0).sqrt()))
}

// ---------------------------------------------------------------------------
// lifetime from a TCSPC histogram

/// Exponentially-modified-Gaussian arrival density: Exp(T1) decay convolved
/// with a Gaussian IRF of width sigma.
pub fn emg_density(t_ns: f64, t1_ns: f64, sigma_ns: f64) -> f64 {
    if sigma_ns <= 0.0 {
        return if t_ns >= 0.0 { (-t_ns / t1_ns).exp() / t1_ns } else { 0.0 };
    }
    let inv = 1.0 / t1_ns;
    let arg = 0.5 * inv * (2.0 * 0.0 + inv * sigma_ns * sigma_ns - 2.0 * t_ns);
    let z = (sigma_ns * inv - t_ns / sigma_ns) / std::f64::consts::SQRT_2;
    0.5 * inv * arg.exp() * erfc(z)
}

pub const LIFETIME_PARAMS: [(&str, &str); 2] = [("amplitude", "1"), ("t1", "ns")];

/// Weighted least-squares fit of the IRF-convolved exponential to a decay
/// histogram; returns amplitude and T1.
pub fn fit_lifetime(hist: &DecayHistogram) -> Result<FitResult> {
    if hist.total_events < 10_000 {
        return Err(EstimatorError::InvalidArgument(format!(
            "need >= 1e4 events, histogram has {}",
            hist.total_events
        )));
    }
    let centers = hist.bin_centers_ns();
    let counts: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let sigma: Vec<f64> = counts.iter().map(|&c| c.max(1.0).sqrt()).collect();
    let norm = hist.total_events as f64 * hist.bin_width_ns();
    let irf = hist.irf_sigma_ns;
    let t1_guess = hist.mean_ns().max(0.1);
    let model = Pointwise(move |p: &[f64], t: f64| p[0] * norm * emg_density(t, p[1], irf));
    let opts = FitOptions {
        bounds: Some(vec![(1.0e-9, f64::INFINITY), (1.0e-6, f64::INFINITY)]),
        ..FitOptions::default()
    };
    let est = fit_nlls(&model, &centers, &counts, &sigma, &[1.0, t1_guess], &opts)?;
    let mut warnings = Vec::new();
    let span = centers.last().unwrap() - centers[0];
    if span < 2.0 * est.values[1] {
        warnings.push(format!(
            "histogram span {span:.2} ns shorter than 2 x fitted T1 = {:.2} ns",
            est.values[1]
        ));
    }
    let range = (centers[0], *centers.last().unwrap());
    Ok(est.into_result(&LIFETIME_PARAMS, range, warnings))
}

// ---------------------------------------------------------------------------
// quasi-CW Bloch fit

pub const QUASI_CW_PARAMS: [(&str, &str); 3] = [
    ("omega", "rad/ns"),
    ("gamma_star", "1/ns"),
    ("scale", "counts"),
];

struct QuasiCwModel {
    times_ns: Vec<f64>,
    t1_ns: f64,
    tols: Tolerances,
}

impl FitModel for QuasiCwModel {
    fn eval(&self, params: &[f64], xs: &[f64], out: &mut [f64]) {
        let (omega, gamma_star, scale) = (params[0], params[1], params[2]);
        let mut model = match EmitterModel::two_level(self.t1_ns, None) {
            Ok(m) => m,
            Err(_) => {
                out.fill(f64::NAN);
                return;
            }
        };
        model.pure_dephasing_per_ns = gamma_star.max(0.0);
        let duration = self.times_ns.last().unwrap().max(1.0e-3) * 1.000_001;
        match dynamics::evolve_quasi_cw(&model, omega, duration, self.tols) {
            Ok(traj) => {
                for (o, &t) in out.iter_mut().zip(xs) {
                    *o = scale * traj.sample(t * 1.0e3).population(1);
                }
            }
            Err(_) => out.fill(f64::NAN),
        }
    }
}

/// Fit a quasi-CW fluorescence turn-on trace by numerically solving the
/// two-level Bloch equations inside the residual, with T1 held at the
/// independently measured lifetime. T1 cannot float here: with the drive
/// rate and the detection scale free, the trace only pins down the sum of
/// the decay rates, so a free T1 trades off against the dephasing rate.
/// Returns drive rate, pure-dephasing rate, and an overall scale; T2*
/// follows from [`quasi_cw_t2_star`].
pub fn fit_quasi_cw(times_ns: &[f64], values: &[f64], t1_ns: f64) -> Result<FitResult> {
    let n = times_ns.len();
    if !(t1_ns > 0.0) {
        return Err(EstimatorError::InvalidArgument(format!(
            "T1 must be positive, got {t1_ns}"
        )));
    }
    if n < 16 || values.len() != n {
        return Err(EstimatorError::InvalidArgument("need >= 16 matched samples".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let crossings = values
        .windows(2)
        .filter(|w| (w[0] - mean) * (w[1] - mean) < 0.0)
        .count();
    if crossings < 3 {
        return Err(EstimatorError::FitRange(
            "no oscillation visible in trace; quasi-CW fit needs Rabi flopping".into(),
        ));
    }
    let span = times_ns.last().unwrap() - times_ns[0];
    let period_est = 2.0 * span / crossings as f64;
    let dt = span / (n - 1) as f64;
    if dt > period_est / 6.0 {
        return Err(EstimatorError::Aliasing(format!(
            "sample spacing {dt:.3} ns exceeds 1/6 of the oscillation period {period_est:.3} ns"
        )));
    }
    let omega0 = 2.0 * std::f64::consts::PI / period_est;
    let peak = values.iter().cloned().fold(f64::MIN, f64::max);
    let init = [omega0, 0.5 / t1_ns, peak.max(1.0e-9)];
    let model = QuasiCwModel {
        times_ns: times_ns.to_vec(),
        t1_ns,
        tols: Tolerances { rel: 1.0e-10, abs: 1.0e-12 },
    };
    let sigma = vec![peak.abs().max(1.0e-9) * 0.01; n];
    // the residual evaluates an adaptive integrator, so the cost has a noise
    // floor; the stall exit (no improving damped step) handles termination
    // near it
    let opts = FitOptions {
        cost_tol: 1.0e-10,
        grad_tol: 1.0e-10,
        max_iterations: 300,
        bounds: Some(vec![
            (1.0e-6, f64::INFINITY),
            (0.0, f64::INFINITY),
            (1.0e-12, f64::INFINITY),
        ]),
        ..FitOptions::default()
    };
    let est = fit_nlls(&model, times_ns, values, &sigma, &init, &opts)?;
    let range = (times_ns[0], *times_ns.last().unwrap());
    Ok(est.into_result(&QUASI_CW_PARAMS, range, Vec::new()))
}

/// T2* implied by a quasi-CW fit and the lifetime it was conditioned on:
/// `1 / (1/(2 T1) + gamma_star)`. The uncertainty combines the fitted
/// dephasing-rate error with the lifetime error (independent measurements,
/// so no cross term).
pub fn quasi_cw_t2_star(fit: &FitResult, t1_ns: f64, t1_err_ns: f64) -> Result<(f64, f64)> {
    let ig = fit
        .index_of("gamma_star")
        .ok_or_else(|| EstimatorError::InvalidArgument("fit lacks gamma_star".into()))?;
    let g = fit.parameters[ig].value;
    let rate = 0.5 / t1_ns + g;
    let t2 = 1.0 / rate;
    // dT2/dT1 = t2^2 / (2 t1^2); dT2/dg = -t2^2
    let dt1 = t2 * t2 * 0.5 / (t1_ns * t1_ns);
    let dg = t2 * t2;
    let var = dt1 * dt1 * t1_err_ns * t1_err_ns + dg * dg * fit.covariance[ig][ig];
    Ok((t2, var.max(0.0).sqrt()))
}

/// Rotation visibility `V = I(pi) / I(2pi)`.
pub fn visibility(i_pi: f64, i_2pi: f64) -> Result<f64> {
    if !(i_2pi > 0.0) {
        return Err(EstimatorError::UndefinedVisibility(format!(
            "I(2pi) must be positive, got {i_2pi}"
        )));
    }
    Ok(i_pi / i_2pi)
}

/// Complementary error function (Numerical Recipes rational Chebyshev
/// approximation, |error| < 1.2e-7 everywhere).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonstats::synthesize_decay_histogram;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn exact_data_returns_truth() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let truth = [2.0, 0.7];
        let model = Pointwise(|p: &[f64], x: f64| p[0] * (-p[1] * x).exp());
        let mut ys = vec![0.0; xs.len()];
        model.eval(&truth, &xs, &mut ys);
        let sigma = vec![0.01; xs.len()];
        let est = fit_nlls(&model, &xs, &ys, &sigma, &[1.5, 1.0], &FitOptions::default()).unwrap();
        assert!(est.converged);
        assert_relative_eq!(est.values[0], 2.0, max_relative = 1.0e-7);
        assert_relative_eq!(est.values[1], 0.7, max_relative = 1.0e-7);
        assert!(est.cost < 1.0e-12);
    }

    #[test]
    fn zero_sigma_rejected() {
        let xs = vec![0.0, 1.0, 2.0, 3.0];
        let ys = vec![0.0, 1.0, 2.0, 3.0];
        let sigma = vec![0.0; 4];
        let model = Pointwise(|p: &[f64], x: f64| p[0] * x);
        assert!(fit_nlls(&model, &xs, &ys, &sigma, &[1.0], &FitOptions::default()).is_err());
    }

    #[test]
    fn linear_model_covariance_matches_ols() {
        // y = a + b x with known noise; covariance must equal the analytic
        // (X^T W X)^{-1} of ordinary weighted least squares
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let sig = 0.3;
        let (a, b) = (1.3, -0.8);
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
                a + b * x + sig * z
            })
            .collect();
        let sigma = vec![sig; xs.len()];
        let model = Pointwise(|p: &[f64], x: f64| p[0] + p[1] * x);
        let est = fit_nlls(&model, &xs, &ys, &sigma, &[0.0, 0.0], &FitOptions::default()).unwrap();
        assert!(est.converged);
        // analytic OLS covariance
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let det = n * sxx - sx * sx;
        let cov00 = sig * sig * sxx / det;
        let cov11 = sig * sig * n / det;
        assert_relative_eq!(est.covariance[(0, 0)], cov00, max_relative = 0.05);
        assert_relative_eq!(est.covariance[(1, 1)], cov11, max_relative = 0.05);
        // estimates within 3 sigma of truth
        assert!((est.values[0] - a).abs() < 3.0 * cov00.sqrt());
        assert!((est.values[1] - b).abs() < 3.0 * cov11.sqrt());
    }

    #[test]
    fn converged_gradient_is_small() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64 * 0.1).collect();
        let model = Pointwise(|p: &[f64], x: f64| p[0] * (p[1] * x).sin() + p[2]);
        let mut ys = vec![0.0; xs.len()];
        model.eval(&[1.0, 2.0, 0.3], &xs, &mut ys);
        let sigma = vec![0.02; xs.len()];
        let est =
            fit_nlls(&model, &xs, &ys, &sigma, &[0.9, 2.05, 0.2], &FitOptions::default()).unwrap();
        assert!(est.converged);
        assert!(est.cost < 1.0e-12, "cost {}", est.cost);
        assert!(est.gradient_inf_norm < 1.0e-5, "gradient {}", est.gradient_inf_norm);
    }

    #[test]
    fn damped_rabi_roundtrip_with_noise() {
        let truth = [1000.0, PI, 8.0, 30.0, 25.0]; // kappa = pi -> a_pi = 1
        let xs: Vec<f64> = (1..=60).map(|i| i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ys: Vec<f64> = xs
            .iter()
            .map(|&a| {
                let mean = damped_rabi_model(&truth, a);
                // Gaussian approximation to Poisson noise
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
                (mean + mean.sqrt() * z).max(0.0)
            })
            .collect();
        let fit = fit_damped_rabi(&xs, &ys, None).unwrap();
        assert!(fit.converged);
        for (i, &t) in truth.iter().enumerate() {
            if t > 0.0 {
                let v = fit.parameters[i].value;
                assert!(
                    (v - t).abs() / t < 0.05 || (v - t).abs() < 3.0 * fit.parameters[i].stderr,
                    "param {} = {v} vs truth {t}",
                    fit.parameters[i].name
                );
            }
        }
    }

    #[test]
    fn pure_rabi_kappa_recovery() {
        let truth = [500.0, 2.0, 1.0e9, 0.0, 0.0];
        let xs: Vec<f64> = (1..=50).map(|i| i as f64 * 0.12).collect();
        let ys: Vec<f64> = xs.iter().map(|&a| damped_rabi_model(&truth, a)).collect();
        let fit = fit_damped_rabi(&xs, &ys, Some(&vec![1.0; xs.len()])).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.value("kappa").unwrap(), 2.0, max_relative = 1.0e-3);
    }

    #[test]
    fn damped_rabi_rejects_flat_data() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let ys = vec![5.0; 20];
        assert!(matches!(fit_damped_rabi(&xs, &ys, None), Err(EstimatorError::FitRange(_))));
    }

    #[test]
    fn trimming_keeps_kappa_stable() {
        // model holds below a = 4 but is corrupted above (extra emission)
        let truth = [1000.0, PI, 10.0, 20.0, 10.0];
        let xs: Vec<f64> = (1..=60).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&a| {
                let mut v = damped_rabi_model(&truth, a);
                if a > 4.0 {
                    v += 150.0 * (a - 4.0);
                }
                v
            })
            .collect();
        let fit = fit_damped_rabi_trimmed(&xs, &ys, None, 0.05).unwrap();
        assert!(fit.converged);
        assert!(fit.n_points < xs.len(), "trimming removed no points");
        let kappa = fit.value("kappa").unwrap();
        assert!((kappa - PI).abs() / PI < 0.02, "kappa {kappa}");
    }

    #[test]
    fn fidelity_limits_and_propagation() {
        let truth = [1000.0, PI, 8.0, 0.0, 5.0];
        let xs: Vec<f64> = (1..=60).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|&a| damped_rabi_model(&truth, a)).collect();
        let fit = fit_damped_rabi(&xs, &ys, Some(&vec![1.0; xs.len()])).unwrap();
        let (f, df) = estimate_inversion_fidelity(&fit).unwrap();
        // a_pi = 1, a_d = 8 -> F = exp(-1/8)
        assert_relative_eq!(f, (-1.0_f64 / 8.0).exp(), max_relative = 1.0e-3);
        assert!(df >= 0.0 && df < 0.05);
    }

    #[test]
    fn fidelity_at_ad_equals_api() {
        let truth = [800.0, PI, 1.0, 0.0, 0.0]; // a_pi = 1 = a_d
        let xs: Vec<f64> = (1..=50).map(|i| i as f64 * 0.08).collect();
        let ys: Vec<f64> = xs.iter().map(|&a| damped_rabi_model(&truth, a)).collect();
        let fit = fit_damped_rabi(&xs, &ys, Some(&vec![1.0; xs.len()])).unwrap();
        let (f, _) = estimate_inversion_fidelity(&fit).unwrap();
        assert_relative_eq!(f, (-1.0_f64).exp(), max_relative = 1.0e-2);
    }

    #[test]
    fn fidelity_scale_invariant() {
        let truth = [1000.0, PI, 8.0, 12.0, 7.0];
        let xs: Vec<f64> = (1..=60).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|&a| damped_rabi_model(&truth, a)).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| 3.7 * y).collect();
        let f1 = estimate_inversion_fidelity(
            &fit_damped_rabi(&xs, &ys, Some(&vec![1.0; xs.len()])).unwrap(),
        )
        .unwrap()
        .0;
        let f2 = estimate_inversion_fidelity(
            &fit_damped_rabi(&xs, &ys2, Some(&vec![3.7; xs.len()])).unwrap(),
        )
        .unwrap()
        .0;
        assert_relative_eq!(f1, f2, max_relative = 1.0e-6);
    }

    #[test]
    fn lifetime_roundtrip() {
        let hist = synthesize_decay_histogram(16.2, 0.35, 1_000_000, 0.2, 12).unwrap();
        let fit = fit_lifetime(&hist).unwrap();
        assert!(fit.converged);
        let t1 = fit.value("t1").unwrap();
        assert!((t1 - 16.2).abs() / 16.2 < 0.02, "T1 {t1}");
    }

    #[test]
    fn lifetime_zero_irf_reduces_to_exponential() {
        let hist = synthesize_decay_histogram(10.0, 0.0, 200_000, 0.2, 13).unwrap();
        let fit = fit_lifetime(&hist).unwrap();
        let t1 = fit.value("t1").unwrap();
        assert!((t1 - 10.0).abs() / 10.0 < 0.02, "T1 {t1}");
    }

    #[test]
    fn lifetime_seeds_statistically_consistent() {
        let f1 = fit_lifetime(&synthesize_decay_histogram(16.2, 0.35, 300_000, 0.2, 21).unwrap())
            .unwrap();
        let f2 = fit_lifetime(&synthesize_decay_histogram(16.2, 0.35, 300_000, 0.2, 22).unwrap())
            .unwrap();
        let d = (f1.value("t1").unwrap() - f2.value("t1").unwrap()).abs();
        let s = (f1.parameter("t1").unwrap().stderr.powi(2)
            + f2.parameter("t1").unwrap().stderr.powi(2))
        .sqrt();
        assert!(d < 3.0 * s, "estimates differ by {d} vs combined sigma {s}");
    }

    #[test]
    fn lifetime_requires_events() {
        let hist = synthesize_decay_histogram(16.2, 0.35, 100, 0.2, 1).unwrap();
        assert!(fit_lifetime(&hist).is_err());
    }

    #[test]
    fn visibility_basics() {
        assert_relative_eq!(visibility(46.0, 1.0).unwrap(), 46.0);
        assert_relative_eq!(visibility(1.38, 1.0).unwrap(), 1.38);
        assert_relative_eq!(visibility(7.0, 7.0).unwrap(), 1.0);
        assert!(visibility(1.0, 0.0).is_err());
    }

    #[test]
    fn erfc_reference_values() {
        assert_relative_eq!(erfc(0.0), 1.0, max_relative = 1.0e-6);
        assert_relative_eq!(erfc(1.0), 0.157_299_207, max_relative = 1.0e-5);
        assert_relative_eq!(erfc(-1.0), 1.842_700_793, max_relative = 1.0e-5);
        assert!(erfc(5.0) < 2.0e-12);
    }

    #[test]
    fn quasi_cw_roundtrip() {
        // synthetic trace from the forward model itself (independent check
        // of the estimator, not of the integrator)
        let m = {
            let mut m = EmitterModel::two_level(16.2, None).unwrap();
            m.pure_dephasing_per_ns = 1.0 / 10.9 - 0.5 / 16.2;
            m
        };
        let omega = 1.1;
        let traj = dynamics::evolve_quasi_cw(&m, omega, 35.0, Tolerances::default()).unwrap();
        let times: Vec<f64> = (0..140).map(|i| i as f64 * 0.25).collect();
        let values: Vec<f64> =
            times.iter().map(|&t| 830.0 * traj.sample(t * 1.0e3).population(1)).collect();
        let fit = fit_quasi_cw(&times, &values, 16.2).unwrap();
        assert!(fit.converged);
        let (t2, _) = quasi_cw_t2_star(&fit, 16.2, 0.1).unwrap();
        assert!((t2 - 10.9).abs() / 10.9 < 0.02, "T2* {t2}");
        assert_relative_eq!(fit.value("omega").unwrap(), omega, max_relative = 0.01);
    }

    #[test]
    fn quasi_cw_rejects_flat_trace() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.3).collect();
        let values = vec![0.0; 100];
        assert!(fit_quasi_cw(&times, &values, 16.2).is_err());
    }

    #[test]
    fn quasi_cw_dephasing_free_respects_lifetime_bound() {
        let m = EmitterModel::two_level(16.2, None).unwrap();
        let traj = dynamics::evolve_quasi_cw(&m, 1.1, 35.0, Tolerances::default()).unwrap();
        let times: Vec<f64> = (0..140).map(|i| i as f64 * 0.25).collect();
        let values: Vec<f64> =
            times.iter().map(|&t| traj.sample(t * 1.0e3).population(1)).collect();
        let fit = fit_quasi_cw(&times, &values, 16.2).unwrap();
        let (t2, dt2) = quasi_cw_t2_star(&fit, 16.2, 0.0).unwrap();
        // with no pure dephasing T2* saturates its lifetime bound 2 T1
        assert!((t2 - 32.4).abs() < 3.0 * dt2 + 0.4, "T2* {t2} vs 2 T1 = 32.4");
    }
}
