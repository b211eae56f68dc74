//! Command line, flat `key = value` configuration files and output files.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 I/O.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::experiments::*;
use crate::spectral_fields::pullback;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    Lyapunov,
    MomentLyapunov,
    PsiP,
    Symbol,
    Garding,
    Egorov,
    LasotaYorke,
    TwoPoint,
    LowFreq,
    Mix,
    Quenched,
    Full,
}

impl Subcommand {
    pub fn name(&self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "shearmix", version, about = "Mixing experiments for random alternating shear maps on the torus")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Subcommand,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

/// A fully resolved invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Subcommand,
    pub params: EnsembleConfig,
    pub out: PathBuf,
    pub config_path: Option<PathBuf>,
}

/// Every key accepted in a configuration file.
pub const KEYS: &[&str] = &[
    "samples",
    "steps",
    "grid",
    "p",
    "eps",
    "delta",
    "s_low",
    "seed",
    "out",
    "workers",
    "ensemble",
    "f0",
    "burn",
    "probes",
    "kernel_pairs",
    "qf_samples",
    "psi_nx",
    "psi_ntheta",
    "psi_maps",
    "psi_iters",
    "psi_residual_maps",
    "p_list",
    "lyap_steps",
    "lyap_samples",
    "moment_steps",
    "moment_samples",
    "garding_grid",
    "garding_band",
    "garding_fields",
    "ly_grid",
    "ly_band",
    "ly_maps",
    "ly_fields",
    "egorov_grid",
    "egorov_bands",
    "egorov_steps",
    "seminorm_samples",
    "two_point_pairs",
    "separations",
];

pub const DEFAULT_OUT: &str = "out";

/// Parse a `key = value` file. `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    let mut unknown = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(CliError::Validation(format!("config line {}: empty key or value", i + 1)));
        }
        if !KEYS.contains(&k) {
            unknown.push(k.to_string());
            continue;
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Validation(format!("config line {}: duplicate key {k}", i + 1)));
        }
    }
    if !unknown.is_empty() {
        return Err(CliError::Validation(format!("unknown config key(s): {}", unknown.join(", "))));
    }
    Ok(map)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

/// Set one key on the config; the error names the key.
pub fn apply_param(cfg: &mut EnsembleConfig, key: &str, value: &str) -> Result<(), CliError> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
        v.parse().map_err(|_| CliError::Validation(format!("{key}: cannot parse `{v}`")))
    }
    fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
        parse_list(v).ok_or_else(|| CliError::Validation(format!("{key}: cannot parse list `{v}`")))
    }
    match key {
        "samples" => cfg.n_samples = num(key, value)?,
        "steps" => cfg.n_steps = num(key, value)?,
        "grid" => cfg.grid = num(key, value)?,
        "p" => cfg.p = num(key, value)?,
        "eps" => cfg.eps = num(key, value)?,
        "delta" => cfg.delta = num(key, value)?,
        "s_low" => cfg.s_low = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "workers" => cfg.workers = num(key, value)?,
        "ensemble" => {
            cfg.ensemble = EnsembleKind::parse(value)
                .ok_or_else(|| CliError::Validation(format!("ensemble: expected pierrehumbert or identity, got `{value}`")))?
        }
        "f0" => {
            cfg.f0 = InitialSpec::parse(value)
                .ok_or_else(|| CliError::Validation(format!("f0: expected cos:K1,K2, random:COUNT:BAND or zero, got `{value}`")))?
        }
        "burn" => cfg.burn = num(key, value)?,
        "probes" => cfg.probes = num(key, value)?,
        "kernel_pairs" => cfg.kernel_pairs = num(key, value)?,
        "qf_samples" => cfg.qf_samples = num(key, value)?,
        "psi_nx" => cfg.psi_nx = num(key, value)?,
        "psi_ntheta" => cfg.psi_ntheta = num(key, value)?,
        "psi_maps" => cfg.psi_maps = num(key, value)?,
        "psi_iters" => cfg.psi_iters = num(key, value)?,
        "psi_residual_maps" => cfg.psi_residual_maps = num(key, value)?,
        "p_list" => cfg.p_list = list(key, value)?,
        "lyap_steps" => cfg.lyap_steps = num(key, value)?,
        "lyap_samples" => cfg.lyap_samples = num(key, value)?,
        "moment_steps" => cfg.moment_steps = num(key, value)?,
        "moment_samples" => cfg.moment_samples = num(key, value)?,
        "garding_grid" => cfg.garding_grid = num(key, value)?,
        "garding_band" => cfg.garding_band = num(key, value)?,
        "garding_fields" => cfg.garding_fields = num(key, value)?,
        "ly_grid" => cfg.ly_grid = num(key, value)?,
        "ly_band" => cfg.ly_band = num(key, value)?,
        "ly_maps" => cfg.ly_maps = num(key, value)?,
        "ly_fields" => cfg.ly_fields = num(key, value)?,
        "egorov_grid" => cfg.egorov_grid = num(key, value)?,
        "egorov_bands" => cfg.egorov_bands = list(key, value)?,
        "egorov_steps" => cfg.egorov_steps = num(key, value)?,
        "seminorm_samples" => cfg.seminorm_samples = num(key, value)?,
        "two_point_pairs" => cfg.two_point_pairs = num(key, value)?,
        "separations" => cfg.separations = list(key, value)?,
        _ => return Err(CliError::Validation(format!("unknown key {key}"))),
    }
    Ok(())
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

/// The effective parameter map, in `KEYS` order.
pub fn config_entries(cfg: &EnsembleConfig, out: &Path) -> Vec<(&'static str, String)> {
    KEYS.iter()
        .map(|&k| {
            let v = match k {
                "samples" => cfg.n_samples.to_string(),
                "steps" => cfg.n_steps.to_string(),
                "grid" => cfg.grid.to_string(),
                "p" => fmt_f64(cfg.p),
                "eps" => fmt_f64(cfg.eps),
                "delta" => fmt_f64(cfg.delta),
                "s_low" => fmt_f64(cfg.s_low),
                "seed" => cfg.seed.to_string(),
                "out" => out.display().to_string(),
                "workers" => cfg.workers.to_string(),
                "ensemble" => cfg.ensemble.name().to_string(),
                "f0" => cfg.f0.render(),
                "burn" => cfg.burn.to_string(),
                "probes" => cfg.probes.to_string(),
                "kernel_pairs" => cfg.kernel_pairs.to_string(),
                "qf_samples" => cfg.qf_samples.to_string(),
                "psi_nx" => cfg.psi_nx.to_string(),
                "psi_ntheta" => cfg.psi_ntheta.to_string(),
                "psi_maps" => cfg.psi_maps.to_string(),
                "psi_iters" => cfg.psi_iters.to_string(),
                "psi_residual_maps" => cfg.psi_residual_maps.to_string(),
                "p_list" => join_f64(&cfg.p_list),
                "lyap_steps" => cfg.lyap_steps.to_string(),
                "lyap_samples" => cfg.lyap_samples.to_string(),
                "moment_steps" => cfg.moment_steps.to_string(),
                "moment_samples" => cfg.moment_samples.to_string(),
                "garding_grid" => cfg.garding_grid.to_string(),
                "garding_band" => cfg.garding_band.to_string(),
                "garding_fields" => cfg.garding_fields.to_string(),
                "ly_grid" => cfg.ly_grid.to_string(),
                "ly_band" => cfg.ly_band.to_string(),
                "ly_maps" => cfg.ly_maps.to_string(),
                "ly_fields" => cfg.ly_fields.to_string(),
                "egorov_grid" => cfg.egorov_grid.to_string(),
                "egorov_bands" => cfg.egorov_bands.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
                "egorov_steps" => cfg.egorov_steps.to_string(),
                "seminorm_samples" => cfg.seminorm_samples.to_string(),
                "two_point_pairs" => cfg.two_point_pairs.to_string(),
                "separations" => join_f64(&cfg.separations),
                _ => unreachable!("every key is listed"),
            };
            (k, v)
        })
        .collect()
}

/// Serialize the effective configuration in the file format.
pub fn write_config(cfg: &EnsembleConfig, out: &Path) -> String {
    let mut s = String::new();
    for (k, v) in config_entries(cfg, out) {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s
}

/// Build the effective configuration from a file map and CLI overrides.
/// `delta` follows `p/2` unless set explicitly.
pub fn resolve(
    file: &BTreeMap<String, String>,
    overrides: &[(&str, String)],
) -> Result<(EnsembleConfig, PathBuf), CliError> {
    let mut cfg = EnsembleConfig::default();
    let mut out = PathBuf::from(DEFAULT_OUT);
    let mut delta_set = false;
    let mut merged: Vec<(String, String)> = file.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    merged.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.clone())));
    for (k, v) in &merged {
        match k.as_str() {
            "out" => out = PathBuf::from(v),
            _ => {
                delta_set |= k == "delta";
                apply_param(&mut cfg, k, v)?;
            }
        }
    }
    if !delta_set {
        cfg.delta = cfg.p / 2.0;
    }
    cfg.validate()?;
    Ok((cfg, out))
}

/// Parse argv (including the program name).
pub fn parse_cli<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            // not an error; the caller prints and exits 0
            CliError::Usage(format!("\u{0}{}", e.render()))
        }
        _ => CliError::Usage(e.render().to_string()),
    })?;
    let file = match &cli.config {
        Some(p) => load_config(p)?,
        None => BTreeMap::new(),
    };
    let mut ov: Vec<(&str, String)> = Vec::new();
    if let Some(v) = cli.seed {
        ov.push(("seed", v.to_string()));
    }
    if let Some(v) = &cli.out {
        ov.push(("out", v.display().to_string()));
    }
    // cocycle runs read their own horizon keys
    let (steps_key, samples_key) = match cli.command {
        Subcommand::Lyapunov => ("lyap_steps", "lyap_samples"),
        Subcommand::MomentLyapunov => ("moment_steps", "moment_samples"),
        _ => ("steps", "samples"),
    };
    if let Some(v) = cli.samples {
        ov.push((samples_key, v.to_string()));
    }
    if let Some(v) = cli.steps {
        ov.push((steps_key, v.to_string()));
    }
    if let Some(v) = cli.grid {
        ov.push(("grid", v.to_string()));
    }
    if let Some(v) = cli.p {
        ov.push(("p", fmt_f64(v)));
    }
    if let Some(v) = cli.eps {
        ov.push(("eps", fmt_f64(v)));
    }
    if let Some(v) = cli.delta {
        ov.push(("delta", fmt_f64(v)));
    }
    if let Some(v) = cli.workers {
        ov.push(("workers", v.to_string()));
    }
    let (params, out) = resolve(&file, &ov)?;
    Ok(RunConfig {
        command: cli.command,
        params,
        out,
        config_path: cli.config,
    })
}

/// Manifest text: version, subcommand and the full effective configuration.
pub fn manifest(run: &RunConfig) -> String {
    format!(
        "# shearmix manifest\nversion = {}\ncommand = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        run.command.name(),
        write_config(&run.params, &run.out)
    )
}

/// Write the manifest first, then every report, trace and dump.
pub fn write_outputs(run: &RunConfig, reports: &[Report]) -> Result<Vec<PathBuf>, CliError> {
    let dir = &run.out;
    let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: &str| -> Result<(), CliError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put("manifest".into(), &manifest(run))?;
    for r in reports {
        put(format!("{}_report.csv", r.name), &r.report_csv())?;
        if let Some(t) = r.trace_csv() {
            put(format!("{}_trace.csv", r.name), &t)?;
        }
        for (name, body) in &r.files {
            put(name.clone(), body)?;
        }
    }
    Ok(written)
}

/// Run the experiment named by the subcommand.
pub fn execute(run: &RunConfig) -> Result<Vec<Report>, CliError> {
    let cfg = &run.params;
    let reports = with_workers(cfg.workers, || -> Result<Vec<Report>, ExperimentError> {
        Ok(match run.command {
            Subcommand::Lyapunov => vec![lyapunov_report(&run_lyapunov(cfg)?, "lyapunov")],
            Subcommand::MomentLyapunov => vec![moment_report(&run_moment_lyapunov(cfg)?, "moment_lyapunov")],
            Subcommand::PsiP => {
                let curve = crate::cocycle_stats::lambda_curve(&cfg.p_list, &cfg.psi_params(cfg.p), &cfg.map_ensemble())?;
                let (psi, diag) = run_psi(cfg)?;
                vec![lambda_curve_report(&curve, None, "lambda_curve"), psi_report(&psi, &diag, "psi")]
            }
            Subcommand::Symbol => {
                let (psi, _) = run_psi(cfg)?;
                let model = build_symbol(&psi, cfg, cfg.ly_grid)?;
                let mut r = run_symbol_checks(&model, cfg).report("symbol");
                r.files.push(("symbol_dump.csv".into(), symbol_dump(&model, 8, 8)));
                vec![r]
            }
            Subcommand::Garding => {
                let (psi, _) = run_psi(cfg)?;
                let model = build_symbol(&psi, cfg, cfg.garding_grid)?;
                vec![run_garding(&model, cfg).report("garding")]
            }
            Subcommand::Egorov => vec![run_egorov_scaling(cfg).report("egorov")],
            Subcommand::LasotaYorke => {
                let (psi, _) = run_psi(cfg)?;
                let model = build_symbol(&psi, cfg, cfg.ly_grid)?;
                vec![run_lasota_yorke(&model, psi.lambda_p, cfg).report("lasota_yorke")]
            }
            Subcommand::TwoPoint => run_two_point(cfg, &cfg.separations)?.reports("two_point"),
            Subcommand::LowFreq => vec![run_low_freq_decay(cfg)?.report("low_freq")],
            Subcommand::Mix => {
                let mix = run_annealed_mixing(cfg)?;
                let pass = spectral_pass(cfg, None)?;
                let mut r = mix.report("mix");
                let seq = cfg.map_ensemble().sequence(0, cfg.n_steps);
                let last = pullback(&cfg.initial_data(), &seq, cfg.grid)?;
                r.files.push(("mix_field.csv".into(), field_dump(&last, cfg.seed, cfg.n_steps)));
                vec![r, spectral_neg_delta_report(&pass, cfg, "mix_spectral")]
            }
            Subcommand::Quenched => {
                let mix = run_annealed_mixing(cfg)?;
                vec![mix.report("mix"), quenched_from(&mix, mix.mu_hat, cfg.n_steps).report("quenched")]
            }
            Subcommand::Full => run_full_pipeline(cfg)?,
        })
    })?;
    Ok(reports)
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let run = match parse_cli(argv) {
        Ok(r) => r,
        Err(CliError::Usage(m)) if m.starts_with('\u{0}') => {
            print!("{}", &m[1..]);
            return 0;
        }
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let result = execute(&run).and_then(|reports| {
        let summary: Vec<String> = reports
            .iter()
            .flat_map(|r| r.entries.iter().filter(|(_, v)| v == "fail").map(move |(k, _)| format!("{}.{k}", r.name)))
            .collect();
        write_outputs(&run, &reports)?;
        Ok(summary)
    });
    match result {
        Ok(failed) => {
            println!("wrote outputs to {}", run.out.display());
            for f in failed {
                println!("check failed: {f}");
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("shearmix".to_string()).chain(s.split_whitespace().map(String::from)).collect()
    }

    #[test]
    fn parse_examples() {
        let r = parse_cli(args("mix --seed 7 --samples 100")).unwrap();
        assert_eq!(r.command, Subcommand::Mix);
        assert_eq!(r.params.seed, 7);
        assert_eq!(r.params.n_samples, 100);
        assert_eq!(
            r.params,
            EnsembleConfig {
                seed: 7,
                n_samples: 100,
                ..Default::default()
            }
        );
        assert_eq!(parse_cli(args("mix --p 2.0")).unwrap_err().exit_code(), 3);
        assert_eq!(parse_cli(args("")).unwrap_err().exit_code(), 2);
        assert_eq!(parse_cli(args("mix --bogus 1")).unwrap_err().exit_code(), 2);
        assert_eq!(parse_cli(args("stir")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn delta_follows_p_unless_set() {
        let r = parse_cli(args("mix --p 0.2")).unwrap();
        assert_eq!(r.params.delta, 0.1);
        let r = parse_cli(args("mix --p 0.2 --delta 0.3")).unwrap();
        assert_eq!(r.params.delta, 0.3);
    }

    #[test]
    fn cocycle_horizon_flags() {
        let r = parse_cli(args("lyapunov --steps 300 --samples 40")).unwrap();
        assert_eq!((r.params.lyap_steps, r.params.lyap_samples), (300, 40));
        assert_eq!(r.params.n_steps, 25);
    }

    #[test]
    fn config_text_examples() {
        let m = parse_config_text("p = 0.1\nsamples = 200").unwrap();
        assert_eq!(m.len(), 2);
        let e = parse_config_text("unknown_key = 1").unwrap_err();
        assert!(e.to_string().contains("unknown_key"));
        assert!(parse_config_text("").unwrap().is_empty());
        assert!(parse_config_text("# comment only\n\n").unwrap().is_empty());
        let e = parse_config_text("p = 0.1\nsamples 200").unwrap_err();
        assert!(e.to_string().contains("line 2"));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn config_round_trip() {
        let cfg = EnsembleConfig {
            p: 0.1 + 0.2,
            delta: 1.0 / 3.0,
            separations: vec![0.1, std::f64::consts::E],
            f0: InitialSpec::Random { count: 4, band: 5 },
            ensemble: EnsembleKind::Identity,
            ..Default::default()
        };
        let out = PathBuf::from("some/dir");
        let text = write_config(&cfg, &out);
        let map = parse_config_text(&text).unwrap();
        let (back, out2) = resolve(&map, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(out2, out);
        assert_eq!(write_config(&back, &out2), text);
    }

    #[test]
    fn validation_names_the_key() {
        let map = parse_config_text("eps = 0.3").unwrap();
        let e = resolve(&map, &[]).unwrap_err();
        assert!(e.to_string().contains("eps"));
        let map = parse_config_text("samples = many").unwrap();
        assert!(resolve(&map, &[]).unwrap_err().to_string().contains("samples"));
    }
}
