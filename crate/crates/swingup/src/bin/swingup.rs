//! Command-line front end: load a TOML config, dispatch a protocol, and
//! write CSV/JSON/SVG artifacts plus a run manifest into the output
//! directory. Exit codes: 0 success, 2 partial scan failure, 3 config or
//! usage error, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use swingup::config;
use swingup::dynamics::{self, DensityMatrix, Tolerances};
use swingup::estimators::{self, FitResult};
use swingup::io::{self, RunManifest};
use swingup::photonstats::{self, DecayHistogram};
use swingup::protocols::{self, ExperimentConfig, PulseKind};
use swingup::svg;

#[derive(Parser)]
#[command(name = "swingup", version, about = "Pulse carving and swing-up excitation toolkit")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scans (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; no command writes outside it.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PulseAction {
    /// Write spectral and temporal CSVs and print the report.
    Design,
    /// Print the report only.
    Inspect,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Narrowband,
    Subpicosecond,
}

impl From<KindArg> for PulseKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Narrowband => PulseKind::Narrowband,
            KindArg::Subpicosecond => PulseKind::Subpicosecond,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Design or inspect a carved pulse
    Pulse {
        #[arg(value_enum)]
        action: PulseAction,
        #[arg(long, value_enum, default_value = "narrowband")]
        kind: KindArg,
        /// Field amplitude in units of the calibrated pi amplitude.
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
    },
    /// Evolve the emitter under a calibrated pulse and write the trajectory
    Evolve {
        #[arg(long, value_enum, default_value = "narrowband")]
        kind: KindArg,
        /// Pulse area as a multiple of pi.
        #[arg(long, default_value_t = 1.0)]
        area_pi: f64,
    },
    /// Two-color swing-up scan: grid CSV, JSON metadata, SVG heatmap
    Scan,
    /// Fit a named model to a CSV data file
    Fit {
        /// CSV file with an optional `# {json}` metadata line.
        data: PathBuf,
        /// Model name: rabi, lifetime, or quasi-cw.
        model: String,
    },
    /// Pulsed photon-purity measurement (coincidence histogram and g2(0))
    G2,
    /// Excited-state lifetime experiment (decay histogram and T1 fit)
    Lifetime,
}

enum Failure {
    /// Bad config or command usage: exit 3.
    Config(String),
    /// Everything else: exit 1.
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SWINGUP_LOG")).init();
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 3;
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} workers: {e}");
            return 1;
        }
    }
    match dispatch(&cli, &cfg) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            3
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => config::load(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<i32, Failure> {
    let config_text =
        config::to_toml(cfg).map_err(|e| Failure::Runtime(format!("serialize config: {e}")))?;
    let name = match &cli.command {
        Command::Pulse { .. } => "pulse",
        Command::Evolve { .. } => "evolve",
        Command::Scan => "scan",
        Command::Fit { .. } => "fit",
        Command::G2 => "g2",
        Command::Lifetime => "lifetime",
    };
    let mut manifest = RunManifest::start(name, &config_text, cfg.seed);
    info!("command {name}, seed {}, out dir {}", cfg.seed, cli.out_dir.display());

    let code = match &cli.command {
        Command::Pulse { action, kind, amplitude } => {
            cmd_pulse(cfg, &cli.out_dir, &mut manifest, *action, (*kind).into(), *amplitude)?
        }
        Command::Evolve { kind, area_pi } => {
            cmd_evolve(cfg, &cli.out_dir, &mut manifest, (*kind).into(), *area_pi)?
        }
        Command::Scan => cmd_scan(cfg, &cli.out_dir, &mut manifest)?,
        Command::Fit { data, model } => cmd_fit(cfg, &cli.out_dir, &mut manifest, data, model)?,
        Command::G2 => cmd_g2(cfg, &cli.out_dir, &mut manifest)?,
        Command::Lifetime => cmd_lifetime(cfg, &cli.out_dir, &mut manifest)?,
    };
    let path = manifest.finish(&cli.out_dir)?;
    info!("manifest written to {}", path.display());
    Ok(code)
}

/// FWHM of a sampled curve by linear interpolation at half maximum.
fn curve_fwhm(x: &[f64], y: &[f64]) -> Option<f64> {
    let (i_max, &y_max) =
        y.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
    if !(y_max > 0.0) {
        return None;
    }
    let half = 0.5 * y_max;
    let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev: Option<usize> = None;
        for i in range {
            if y[i] < half {
                let j = prev?;
                let f = (half - y[i]) / (y[j] - y[i]);
                return Some(x[i] + f * (x[j] - x[i]));
            }
            prev = Some(i);
        }
        None
    };
    let left = cross(&mut (0..=i_max).rev())?;
    let right = cross(&mut (i_max..x.len()))?;
    Some(right - left)
}

fn cmd_pulse(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
    action: PulseAction,
    kind: PulseKind,
    amplitude: f64,
) -> Result<i32, Failure> {
    if !(amplitude > 0.0) {
        return Err(Failure::Config(format!("--amplitude must be positive, got {amplitude}")));
    }
    let spectrum = protocols::build_spectrum(cfg, kind, amplitude)?;
    let pulse = protocols::build_pulse(cfg, kind, amplitude)?;
    let spec_fwhm = spectrum.intensity_fwhm_ghz()?;
    let time_fwhm = pulse.intensity_fwhm()?;
    let (ac_delay, ac_value) = pulse.autocorrelation();
    let ac_fwhm = curve_fwhm(&ac_delay, &ac_value)
        .ok_or_else(|| Failure::Runtime("autocorrelation has no half-maximum width".into()))?;

    println!("pulse report");
    println!("  kind                    {kind:?}");
    println!("  energy                  {:.6} pJ", pulse.energy_pj());
    println!("  spectral FWHM           {spec_fwhm:.4} GHz");
    println!("  temporal FWHM           {time_fwhm:.4} ps");
    println!("  time-bandwidth product  {:.5}", spec_fwhm * 1.0e-3 * time_fwhm);
    println!("  pulse area              {:.5} pi", pulse.pulse_area() / std::f64::consts::PI);
    println!("  autocorrelation FWHM    {ac_fwhm:.4} ps");

    if let PulseAction::Design = action {
        let meta = json!({
            "kind": kind,
            "amplitude": amplitude,
            "energy_pj": pulse.energy_pj(),
            "seed": cfg.seed,
        });
        let spec_path = out_dir.join("spectrum.csv");
        io::write_csv(
            &spec_path,
            Some(&meta),
            &["detuning_ghz", "field_re", "field_im", "intensity"],
            spectrum
                .grid()
                .iter()
                .zip(spectrum.amplitude())
                .map(|(&nu, a)| vec![nu, a.re, a.im, a.norm_sqr()]),
        )?;
        manifest.record(&spec_path);
        let pulse_path = out_dir.join("pulse.csv");
        io::write_csv(
            &pulse_path,
            Some(&meta),
            &["time_ps", "rabi_re_rad_ps", "rabi_im_rad_ps", "intensity"],
            pulse
                .times()
                .iter()
                .zip(pulse.amplitude())
                .map(|(&t, a)| vec![t, a.re, a.im, a.norm_sqr()]),
        )?;
        manifest.record(&pulse_path);
        let ac_path = out_dir.join("autocorrelation.csv");
        io::write_csv(
            &ac_path,
            Some(&meta),
            &["delay_ps", "autocorrelation"],
            ac_delay.iter().zip(&ac_value).map(|(&d, &v)| vec![d, v]),
        )?;
        manifest.record(&ac_path);
    }
    Ok(0)
}

fn cmd_evolve(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
    kind: PulseKind,
    area_pi: f64,
) -> Result<i32, Failure> {
    if !(area_pi > 0.0) {
        return Err(Failure::Config(format!("--area-pi must be positive, got {area_pi}")));
    }
    let model = cfg.emitter.model()?;
    let a_pi = protocols::calibrate_pi(cfg, kind)?;
    let pulse = protocols::build_pulse(cfg, kind, a_pi * area_pi)?;
    let tols = Tolerances { rel: 1.0e-10, abs: 1.0e-12 };
    let rho0 = DensityMatrix::ground_state(model.dim());
    let traj = dynamics::evolve(&model, &rho0, &pulse, tols)?;

    let excited = traj.population(1);
    let ground = traj.population(0);
    let meta = json!({
        "kind": kind,
        "pulse_area_pi": area_pi,
        "pi_amplitude": a_pi,
        "energy_pj": pulse.energy_pj(),
        "seed": cfg.seed,
    });
    let path = out_dir.join("trajectory.csv");
    io::write_csv(
        &path,
        Some(&meta),
        &["time_ps", "ground", "excited"],
        traj.times_ps()
            .iter()
            .zip(ground.iter().zip(&excited))
            .map(|(&t, (&g, &e))| vec![t, g, e]),
    )?;
    manifest.record(&path);
    println!("evolve report");
    println!("  pulse area       {area_pi:.4} pi ({:.6} sqrt pJ)", a_pi * area_pi);
    println!("  final inversion  {:.6}", excited.last().unwrap());
    Ok(0)
}

fn cmd_scan(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<i32, Failure> {
    let grid = protocols::run_super_scan(cfg)?;
    let meta = json!({
        "fixed_detuning_ghz": grid.fixed_detuning_ghz,
        "fixed_amplitude": grid.fixed_amplitude,
        "normalization": grid.normalization,
        "failures": grid.failures.len(),
        "seed": cfg.seed,
    });
    let csv_path = out_dir.join("scan.csv");
    io::write_csv(
        &csv_path,
        Some(&meta),
        &["amplitude", "detuning_ghz", "inversion"],
        grid.amplitude.iter().enumerate().flat_map(|(j, &a)| {
            let det = &grid.detuning_ghz;
            let row = &grid.inversion[j];
            det.iter().zip(row).map(move |(&d, &v)| vec![a, d, v]).collect::<Vec<_>>()
        }),
    )?;
    manifest.record(&csv_path);

    let json_path = out_dir.join("scan.json");
    io::write_json(&json_path, &grid)?;
    manifest.record(&json_path);

    let svg_path = out_dir.join("scan.svg");
    let title = format!(
        "two-color swing-up, fixed color {:.1} GHz at amplitude {:.2}",
        grid.fixed_detuning_ghz, grid.fixed_amplitude
    );
    io::write_atomic(&svg_path, svg::render_scan_heatmap(&grid, &title).as_bytes())?;
    manifest.record(&svg_path);

    let (v_pk, d_pk, a_pk) = grid.peak();
    println!("scan report");
    println!("  grid             {} detunings x {} amplitudes", grid.detuning_ghz.len(), grid.amplitude.len());
    println!("  peak inversion   {v_pk:.4} at {d_pk:.1} GHz, amplitude {a_pk:.3}");
    if grid.failures.is_empty() {
        Ok(0)
    } else {
        eprintln!("warning: {} grid points failed:", grid.failures.len());
        for f in &grid.failures {
            eprintln!(
                "  amplitude index {}, detuning index {}: {}",
                f.amplitude_index, f.detuning_index, f.message
            );
        }
        Ok(2)
    }
}

struct CsvData {
    metadata: Option<serde_json::Value>,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_csv(path: &Path) -> Result<CsvData, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut metadata = None;
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if metadata.is_none() {
                metadata = serde_json::from_str(rest.trim()).ok();
            }
            continue;
        }
        if columns.is_empty() {
            columns = line.split(',').map(|s| s.trim().to_string()).collect();
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse()).collect();
        let row = row.map_err(|e| {
            Failure::Config(format!("{}:{}: bad number: {e}", path.display(), ln + 1))
        })?;
        if row.len() != columns.len() {
            return Err(Failure::Config(format!(
                "{}:{}: expected {} columns, got {}",
                path.display(),
                ln + 1,
                columns.len(),
                row.len()
            )));
        }
        rows.push(row);
    }
    if columns.is_empty() || rows.is_empty() {
        return Err(Failure::Config(format!("{}: no data rows", path.display())));
    }
    Ok(CsvData { metadata, columns, rows })
}

fn column<'d>(data: &'d CsvData, name: &str, path: &Path) -> Result<Vec<f64>, Failure> {
    let idx = data.columns.iter().position(|c| c == name).ok_or_else(|| {
        Failure::Config(format!(
            "{}: missing column {name} (found: {})",
            path.display(),
            data.columns.join(", ")
        ))
    })?;
    Ok(data.rows.iter().map(|r| r[idx]).collect())
}

fn print_fit_report(fit: &FitResult) {
    println!("fit report");
    println!("  {:<14} {:>16} {:>14}  unit", "parameter", "value", "stderr");
    for p in &fit.parameters {
        println!("  {:<14} {:>16.8e} {:>14.4e}  {}", p.name, p.value, p.stderr, p.unit);
    }
    println!("  reduced chi2   {:.4}", fit.reduced_chi_square);
    println!("  converged      {} ({} iterations, {} points)", fit.converged, fit.iterations, fit.n_points);
    for w in &fit.warnings {
        println!("  warning: {w}");
    }
}

fn cmd_fit(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
    data_path: &Path,
    model: &str,
) -> Result<i32, Failure> {
    let data = read_csv(data_path)?;
    let fit = match model {
        "rabi" => {
            let amplitude = column(&data, "amplitude", data_path)?;
            let counts = column(&data, "counts", data_path)?;
            let fit = estimators::fit_damped_rabi(&amplitude, &counts, None)?;
            let (fidelity, err) = estimators::estimate_inversion_fidelity(&fit)?;
            print_fit_report(&fit);
            println!("  pi fidelity    {fidelity:.5} +- {err:.5}");
            fit
        }
        "lifetime" => {
            let time = column(&data, "time_ns", data_path)?;
            let counts = column(&data, "counts", data_path)?;
            if time.len() < 2 {
                return Err(Failure::Config("lifetime data needs at least 2 bins".into()));
            }
            let bin_w = time[1] - time[0];
            let irf = data
                .metadata
                .as_ref()
                .and_then(|m| m["irf_sigma_ns"].as_f64())
                .unwrap_or(cfg.lifetime.irf_sigma_ns);
            let counts_u: Vec<u64> = counts.iter().map(|&c| c.max(0.0).round() as u64).collect();
            let total: u64 = counts_u.iter().sum();
            let mut edges: Vec<f64> = time.iter().map(|t| t - 0.5 * bin_w).collect();
            edges.push(time[time.len() - 1] + 0.5 * bin_w);
            let hist = DecayHistogram {
                bin_edges_ns: edges,
                counts: counts_u,
                irf_sigma_ns: irf,
                total_events: total,
            };
            let fit = estimators::fit_lifetime(&hist)?;
            print_fit_report(&fit);
            fit
        }
        "quasi-cw" => {
            let time = column(&data, "time_ns", data_path)?;
            let excited = column(&data, "excited", data_path)?;
            let fit = estimators::fit_quasi_cw(&time, &excited, cfg.emitter.t1_ns)?;
            let (t2, err) = estimators::quasi_cw_t2_star(&fit, cfg.emitter.t1_ns, 0.0)?;
            print_fit_report(&fit);
            println!("  T2*            {t2:.4} +- {err:.4} ns (T1 fixed at {} ns)", cfg.emitter.t1_ns);
            fit
        }
        other => {
            return Err(Failure::Config(format!(
                "unknown model {other}; available models: rabi, lifetime, quasi-cw"
            )));
        }
    };
    let path = out_dir.join("fit.json");
    io::write_json(&path, &fit)?;
    manifest.record(&path);
    Ok(0)
}

fn cmd_g2(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<i32, Failure> {
    let model = cfg.emitter.model()?;
    let background = cfg.background.model()?;
    let a_pi = protocols::calibrate_pi(cfg, PulseKind::Narrowband)?;
    let pulse = protocols::build_pulse(cfg, PulseKind::Narrowband, a_pi)?;
    let tols = Tolerances { rel: 1.0e-10, abs: 1.0e-12 };
    let (g2_zero, hist) = photonstats::g2_pulsed(
        &model,
        &pulse,
        cfg.g2.rep_period_ns,
        cfg.g2.n_periods,
        &background,
        cfg.seed,
        tols,
    )?;
    let meta = json!({
        "rep_period_ns": hist.repetition_period_ns,
        "n_periods": cfg.g2.n_periods,
        "g2_zero": g2_zero,
        "seed": cfg.seed,
    });
    let path = out_dir.join("g2.csv");
    io::write_csv(
        &path,
        Some(&meta),
        &["delay_ns", "coincidences"],
        hist.delay_bins_ns.iter().zip(&hist.counts).map(|(&d, &c)| vec![d, c as f64]),
    )?;
    manifest.record(&path);
    println!("g2 report");
    println!("  repetition period  {:.1} ns over {} periods", cfg.g2.rep_period_ns, cfg.g2.n_periods);
    println!("  background         {:.3} counts/pulse", background.counts_per_pulse(pulse.energy_pj()));
    println!("  g2(0)              {g2_zero:.5}");
    Ok(0)
}

fn cmd_lifetime(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<i32, Failure> {
    let (hist, fit) = protocols::run_lifetime_experiment(cfg)?;
    let meta = json!({
        "irf_sigma_ns": hist.irf_sigma_ns,
        "total_events": hist.total_events,
        "bin_width_ns": hist.bin_width_ns(),
        "seed": cfg.seed,
    });
    let csv_path = out_dir.join("lifetime.csv");
    io::write_csv(
        &csv_path,
        Some(&meta),
        &["time_ns", "counts"],
        hist.bin_centers_ns().iter().zip(&hist.counts).map(|(&t, &c)| vec![t, c as f64]),
    )?;
    manifest.record(&csv_path);
    let fit_path = out_dir.join("lifetime_fit.json");
    io::write_json(&fit_path, &fit)?;
    manifest.record(&fit_path);
    print_fit_report(&fit);
    let t1 = fit.parameter("t1").expect("lifetime fit reports t1");
    println!("  T1             {:.4} +- {:.4} ns", t1.value, t1.stderr);
    Ok(0)
}
