use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fisher_vi::baselines::{dsvi_fit, jj_fit, metropolis_hastings, read_samples_csv, DsviConfig, McmcConfig};
use fisher_vi::bench::{
    contour_grid, coverage_curve_samples, default_grid, fit1d_compare, generate_dataset, run_benchmark, run_replicate,
    BenchSpec, ContourSpec, Covariate, GenConfig, Method,
};
use fisher_vi::expfam::MomentRecord;
use fisher_vi::irls::{default_init, FitReportRecord};
use fisher_vi::targets::{logistic_target, Target1D};
use fisher_vi::{fit, Dataset, Error, MomentParam, SolverConfig};

#[derive(Parser)]
#[command(name = "fisher-vi", version, about = "Gaussian variational approximation by Fisher-divergence minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetKind {
    StudentT,
    Mixture,
    Skew,
    Normal,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fisher,
    Jj,
    Dsvi,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssemblyArg {
    Taylor,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a logistic-regression dataset (CSV `y,x1..xd`).
    Gen {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value = "isotropic")]
        covariate: Covariate,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a 1D target by KL and by Fisher divergence and emit density grids.
    Fit1d {
        #[arg(long, value_enum)]
        target: TargetKind,
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        #[arg(long, default_value_t = 0.75)]
        w: f64,
        #[arg(long, default_value_t = 2.5)]
        mu2: f64,
        #[arg(long, default_value_t = 6.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        #[arg(long, default_value_t = 1.0)]
        sd: f64,
        /// Unused: the 1D fits are deterministic. Accepted for uniformity.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `fit1d_table.csv` and `fit1d_density.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Approximate a logistic-regression posterior.
    FitLogistic {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "fisher")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "taylor")]
        assembly: AssemblyArg,
        #[arg(long, default_value_t = 5.0)]
        tau2: f64,
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random-walk Metropolis–Hastings reference chain.
    Mcmc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        iters: usize,
        #[arg(long, default_value_t = 20_000)]
        burn_in: usize,
        #[arg(long, default_value_t = 5.0)]
        tau2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Post-burn-in draws as CSV; the JSON summary goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicated comparison against an MCMC reference.
    Bench {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value = "isotropic")]
        covariate: Covariate,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        /// Explicit comma-separated seed list; overrides --seed/--replicates.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// First seed when --seeds is absent.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, default_value_t = 100_000)]
        mcmc_iters: usize,
        #[arg(long, default_value_t = 20_000)]
        mcmc_burn_in: usize,
        /// 1-based coordinate pairs such as `2:4,1:3`; contour grids are
        /// written for the first replicate.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Credible-region coverage of a Gaussian fit under reference draws.
    Coverage {
        /// JSON with `mu` and row-major `sigma` (any fit report works).
        #[arg(long)]
        fit: PathBuf,
        /// Draws as CSV with header `theta1..thetad`.
        #[arg(long)]
        samples: PathBuf,
        /// Unused: coverage is deterministic. Accepted for uniformity.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coverage CSV `c,prob`; the JSON summary goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CliResult = Result<(), Failure>;

/// Exit 2 for bad input, 3 for numerical failure.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::SolverFailure { .. } => "solver_failure",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidData(_) => "invalid_data",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        };
        Failure { code: if e.is_numerical() { 3 } else { 2 }, kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: 2, kind: "invalid_argument", message: message.into() }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => fs::write(p, text)?,
        // a closed pipe (`| head`) is not an error
        None => match std::io::stdout().write_all(text.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
            _ => {}
        },
    }
    Ok(())
}

fn load_data(path: &Path, tau2: f64) -> Result<Dataset, Failure> {
    Ok(Dataset::from_csv_path(path, tau2)?)
}

fn parse_pair(s: &str) -> Result<(usize, usize), Failure> {
    let (a, b) = s.split_once(':').ok_or_else(|| invalid(format!("pair {s:?} must look like i:j")))?;
    let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|&k| k >= 1);
    match (parse(a), parse(b)) {
        (Some(i), Some(j)) => Ok((i - 1, j - 1)),
        _ => Err(invalid(format!("pair {s:?} needs 1-based indices"))),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen { n, d, covariate, seed, out } => {
            let (data, _) = generate_dataset(&GenConfig { n, d, covariate, seed, ..GenConfig::default() })?;
            let mut buf = Vec::new();
            data.write_csv(&mut buf)?;
            emit(out.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::Fit1d { target, nu, w, mu2, alpha, mean, sd, seed: _, out } => {
            let target = match target {
                TargetKind::StudentT => Target1D::StudentT { nu },
                TargetKind::Mixture => Target1D::NormalMixture { w, mu1: 0.0, mu2 },
                TargetKind::Skew => Target1D::SkewNormal { alpha },
                TargetKind::Normal => Target1D::Normal { mean, sd },
            };
            target.validate()?;
            let c = fit1d_compare(&target)?;
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("fit1d_table.csv"), c.table_csv())?;
                fs::write(dir.join("fit1d_density.csv"), c.density_csv())?;
            }
            let summary = serde_json::json!({
                "target": c.target,
                "kl": c.kl,
                "fisher": c.fisher,
                "irls_fixed_point": c.irls,
                "irls_iterations": c.fisher_iterations,
            });
            emit(None, &(serde_json::to_string_pretty(&summary)? + "\n"))
        }
        Command::FitLogistic { data, method, assembly, tau2, n_samples, rho, tol, seed, out } => {
            let data = load_data(&data, tau2)?;
            let json = match method {
                MethodArg::Fisher => {
                    let cfg = match assembly {
                        AssemblyArg::Taylor => SolverConfig::logistic_taylor(),
                        AssemblyArg::Mc => SolverConfig::logistic_mc(n_samples, seed),
                    }
                    .with_rho(rho)
                    .with_tol(tol);
                    let target = logistic_target(data);
                    let report = fit(&target, &default_init(&target)?, &cfg)?;
                    let json = serde_json::to_string_pretty(&FitReportRecord::from(&report))?;
                    if !report.converged {
                        emit(out.as_deref(), &json)?;
                        return Err(Error::SolverFailure {
                            iteration: report.iterations,
                            reason: "maximum iterations reached before the tolerance".into(),
                        }
                        .into());
                    }
                    json
                }
                MethodArg::Jj => serde_json::to_string_pretty(&MomentRecord::from(&jj_fit(&data)?.moment))?,
                MethodArg::Dsvi => {
                    let m = dsvi_fit(&data, &DsviConfig { seed, ..DsviConfig::default() })?;
                    serde_json::to_string_pretty(&MomentRecord::from(&m))?
                }
            };
            emit(out.as_deref(), &(json + "\n"))
        }
        Command::Mcmc { data, iters, burn_in, tau2, seed, out } => {
            let data = load_data(&data, tau2)?;
            let cfg = McmcConfig { n_iter: iters, burn_in, seed, ..McmcConfig::default() };
            let res = metropolis_hastings(&logistic_target(data), &cfg)?;
            if let Some(p) = &out {
                res.write_samples_csv(fs::File::create(p)?)?;
            }
            emit(None, &(serde_json::to_string_pretty(&res.summary())? + "\n"))
        }
        Command::Bench { n, covariate, replicates, seeds, seed, methods, mcmc_iters, mcmc_burn_in, pairs, out } => {
            let mut spec = BenchSpec::new(n, covariate, replicates, seed);
            if let Some(seeds) = seeds {
                spec.seeds = seeds;
            }
            if let Some(methods) = methods {
                spec.methods = methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_, _>>()?;
            }
            spec.mcmc_iters = mcmc_iters;
            spec.mcmc_burn_in = mcmc_burn_in;
            let pairs = pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>, _>>()?;
            if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= spec.d || j >= spec.d || i == j) {
                return Err(invalid(format!("pair {}:{} is outside 1..={} or repeats a coordinate", i + 1, j + 1, spec.d)));
            }
            let report = run_benchmark(&spec)?;
            report.write_dir(&out)?;
            if !pairs.is_empty() {
                let (_, art) = run_replicate(&spec, 0)?;
                let fits: Vec<(String, MomentParam)> =
                    art.fits.iter().map(|(m, p)| (m.name().to_string(), p.clone())).collect();
                for (i, j) in pairs {
                    let grid = contour_grid(&art.reference.samples, &fits, &ContourSpec::new(i, j))?;
                    fs::write(out.join(format!("contour_{}_{}.csv", i + 1, j + 1)), grid.to_csv())?;
                }
            }
            emit(None, &report.summary_csv())
        }
        Command::Coverage { fit, samples, seed: _, out } => {
            let record: MomentRecord = serde_json::from_str(&fs::read_to_string(&fit)?)?;
            let p = MomentParam::try_from(record)?;
            let draws = read_samples_csv(fs::File::open(&samples)?)?;
            let curve = coverage_curve_samples(&p, &draws, &default_grid())?;
            let mut csv = String::from("c,prob\n");
            for (c, prob) in curve.grid.iter().zip(&curve.prob) {
                csv.push_str(&format!("{c:?},{prob:?}\n"));
            }
            if let Some(p) = &out {
                fs::write(p, csv)?;
            }
            emit(None, &(serde_json::to_string_pretty(&serde_json::json!({ "mean_abs_dev": curve.mean_abs_dev }))? + "\n"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let diag = serde_json::json!({ "error": f.kind, "message": f.message, "exit_code": f.code });
            eprintln!("{diag}");
            ExitCode::from(f.code)
        }
    }
}
