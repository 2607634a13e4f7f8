//! Replicated comparison of the variational methods against an MCMC
//! reference, in the layout of the logistic-regression tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dsvi_fit, jj_fit, metropolis_hastings, DsviConfig, McmcConfig, McmcResult, ProposalScale};
use crate::bench::coverage::{coverage_curve, default_grid, error_metrics, CoverageCurve};
use crate::bench::generate::{generate_dataset, Covariate, GenConfig};
use crate::error::{Error, Result};
use crate::expfam::MomentParam;
use crate::irls::{default_init, fit, SolverConfig};
use crate::targets::{logistic_target, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fisher,
    Jj,
    Dsvi,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fisher, Method::Jj, Method::Dsvi];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fisher => "fisher",
            Method::Jj => "jj",
            Method::Dsvi => "dsvi",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(Method::Fisher),
            "jj" => Ok(Method::Jj),
            "dsvi" => Ok(Method::Dsvi),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Seed offsets so that data, chain and method randomness never share a stream.
const MCMC_SEED_OFFSET: u64 = 0x4D43_4D43;
const DSVI_SEED_OFFSET: u64 = 0x4453_5649;
const FISHER_SEED_OFFSET: u64 = 0x4649_5348;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub n: usize,
    pub d: usize,
    pub covariate: Covariate,
    /// One replicate per seed.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub mcmc_iters: usize,
    pub mcmc_burn_in: usize,
    pub solver: SolverConfig,
    pub dsvi: DsviConfig,
    pub grid: Vec<f64>,
}

impl BenchSpec {
    /// Defaults for the given design: seeds `base_seed, …, base_seed + replicates − 1`.
    pub fn new(n: usize, covariate: Covariate, replicates: usize, base_seed: u64) -> Self {
        Self {
            n,
            d: 5,
            covariate,
            seeds: (0..replicates as u64).map(|r| base_seed + r).collect(),
            methods: Method::ALL.to_vec(),
            mcmc_iters: 100_000,
            mcmc_burn_in: 20_000,
            solver: SolverConfig::logistic_taylor(),
            dsvi: DsviConfig::default(),
            grid: default_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one replicate is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        if self.mcmc_burn_in >= self.mcmc_iters {
            return Err(Error::InvalidConfig("MCMC burn-in must be shorter than the chain".into()));
        }
        self.solver.validate(self.d)?;
        self.gen_config(0).validate()
    }

    fn gen_config(&self, seed: u64) -> GenConfig {
        GenConfig { n: self.n, d: self.d, covariate: self.covariate, seed, ..GenConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// `None` when the method failed; see `error`.
    pub result: Option<MethodResult>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub mean_err: f64,
    pub cov_err: f64,
    pub coverage: CoverageCurve,
    pub fit: crate::expfam::MomentRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub mcmc_acceptance: Option<f64>,
    pub mcmc_wall_time_s: f64,
    /// Set when the reference chain itself failed; no methods are scored then.
    pub error: Option<String>,
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub mean_err: f64,
    pub cov_err: f64,
    pub coverage_mad: f64,
    /// Pointwise average of the coverage curves.
    pub coverage_prob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub replicates: Vec<ReplicateResult>,
    pub summary: Vec<MethodSummary>,
}

/// The fit and the reference for one replicate, retained for contour output.
pub struct ReplicateArtifacts {
    pub data: Dataset,
    pub reference: McmcResult,
    pub fits: Vec<(Method, MomentParam)>,
}

fn run_method(method: Method, data: &Dataset, spec: &BenchSpec, seed: u64) -> Result<MomentParam> {
    match method {
        Method::Fisher => {
            let target = logistic_target(data.clone());
            let init = default_init(&target)?;
            let mut cfg = spec.solver;
            cfg.integrator.seed = seed ^ FISHER_SEED_OFFSET;
            let report = fit(&target, &init, &cfg)?;
            Ok(report.moment)
        }
        Method::Jj => Ok(jj_fit(data)?.moment),
        Method::Dsvi => dsvi_fit(data, &DsviConfig { seed: seed ^ DSVI_SEED_OFFSET, ..spec.dsvi }),
    }
}

/// Runs one replicate end to end.
pub fn run_replicate(spec: &BenchSpec, replicate: usize) -> Result<(ReplicateResult, ReplicateArtifacts)> {
    let seed = spec.seeds[replicate];
    let (data, _) = generate_dataset(&spec.gen_config(seed))?;
    let chain_cfg = McmcConfig {
        n_iter: spec.mcmc_iters,
        burn_in: spec.mcmc_burn_in,
        proposal_scale: ProposalScale::Auto,
        seed: seed ^ MCMC_SEED_OFFSET,
        init: None,
    };
    let start = Instant::now();
    let reference = metropolis_hastings(&logistic_target(data.clone()), &chain_cfg)?;
    let mcmc_wall_time_s = start.elapsed().as_secs_f64();

    let mut outcomes = Vec::with_capacity(spec.methods.len());
    let mut fits = Vec::new();
    for &method in &spec.methods {
        let start = Instant::now();
        let scored = run_method(method, &data, spec, seed).and_then(|m| {
            let (mean_err, cov_err) = error_metrics(&m, &reference)?;
            let coverage = coverage_curve(&m, &reference, &spec.grid)?;
            Ok((m, MethodResult { mean_err, cov_err, coverage, fit: Default::default() }))
        });
        let wall_time_s = start.elapsed().as_secs_f64();
        match scored {
            Ok((m, mut res)) => {
                res.fit = crate::expfam::MomentRecord::from(&m);
                fits.push((method, m));
                outcomes.push(MethodOutcome { method, result: Some(res), error: None, wall_time_s });
            }
            Err(e) => outcomes.push(MethodOutcome { method, result: None, error: Some(e.to_string()), wall_time_s }),
        }
    }
    let result = ReplicateResult {
        replicate,
        seed,
        mcmc_acceptance: Some(reference.acceptance_rate),
        mcmc_wall_time_s,
        error: None,
        outcomes,
    };
    Ok((result, ReplicateArtifacts { data, reference, fits }))
}

/// Runs all replicates concurrently. A failing replicate or method is
/// recorded and skipped; the sweep itself never aborts.
pub fn run_benchmark(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let mut replicates: Vec<ReplicateResult> = (0..spec.seeds.len())
        .into_par_iter()
        .map(|r| match run_replicate(spec, r) {
            Ok((res, _)) => res,
            Err(e) => ReplicateResult {
                replicate: r,
                seed: spec.seeds[r],
                mcmc_acceptance: None,
                mcmc_wall_time_s: 0.0,
                error: Some(e.to_string()),
                outcomes: Vec::new(),
            },
        })
        .collect();
    replicates.sort_by_key(|r| r.replicate);
    let summary = summarize(spec, &replicates);
    Ok(BenchReport { spec: spec.clone(), replicates, summary })
}

fn summarize(spec: &BenchSpec, replicates: &[ReplicateResult]) -> Vec<MethodSummary> {
    spec.methods
        .iter()
        .map(|&method| {
            let ok: Vec<&MethodResult> = replicates
                .iter()
                .flat_map(|r| r.outcomes.iter())
                .filter(|o| o.method == method)
                .filter_map(|o| o.result.as_ref())
                .collect();
            let k = ok.len() as f64;
            let avg = |f: &dyn Fn(&MethodResult) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / k };
            let coverage_prob = (0..spec.grid.len())
                .map(|g| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| r.coverage.prob[g]).sum::<f64>() / k })
                .collect();
            MethodSummary {
                method,
                n_ok: ok.len(),
                mean_err: avg(&|r| r.mean_err),
                cov_err: avg(&|r| r.cov_err),
                coverage_mad: avg(&|r| r.coverage.mean_abs_dev),
                coverage_prob,
            }
        })
        .collect()
}

impl BenchReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Per-replicate rows: `replicate,seed,method,status,mean_err,cov_err,coverage_mad`.
    pub fn results_csv(&self) -> String {
        let mut out = String::from("replicate,seed,method,status,mean_err,cov_err,coverage_mad\n");
        for r in &self.replicates {
            if let Some(err) = &r.error {
                let _ = writeln!(out, "{},{},mcmc,{},,,", r.replicate, r.seed, csv_escape(&format!("failed: {err}")));
                continue;
            }
            for o in &r.outcomes {
                match &o.result {
                    Some(m) => {
                        let _ = writeln!(
                            out,
                            "{},{},{},ok,{:?},{:?},{:?}",
                            r.replicate,
                            r.seed,
                            o.method.name(),
                            m.mean_err,
                            m.cov_err,
                            m.coverage.mean_abs_dev
                        );
                    }
                    None => {
                        let msg = format!("failed: {}", o.error.as_deref().unwrap_or("unknown"));
                        let _ = writeln!(out, "{},{},{},{},,,", r.replicate, r.seed, o.method.name(), csv_escape(&msg));
                    }
                }
            }
        }
        out
    }

    /// Method averages in the layout `n,method,mean_err,cov_err,coverage_mad,n_ok`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("n,method,mean_err,cov_err,coverage_mad,n_ok\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{}",
                self.spec.n,
                s.method.name(),
                s.mean_err,
                s.cov_err,
                s.coverage_mad,
                s.n_ok
            );
        }
        out
    }

    /// Averaged coverage curves: `c` followed by one column per method.
    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("c");
        for s in &self.summary {
            let _ = write!(out, ",{}", s.method.name());
        }
        out.push('\n');
        for (g, c) in self.spec.grid.iter().enumerate() {
            let _ = write!(out, "{c:?}");
            for s in &self.summary {
                let _ = write!(out, ",{:?}", s.coverage_prob[g]);
            }
            out.push('\n');
        }
        out
    }

    /// Wall-clock seconds per replicate and method. Not deterministic.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("replicate,method,wall_time_s\n");
        for r in &self.replicates {
            let _ = writeln!(out, "{},mcmc,{:?}", r.replicate, r.mcmc_wall_time_s);
            for o in &r.outcomes {
                let _ = writeln!(out, "{},{},{:?}", r.replicate, o.method.name(), o.wall_time_s);
            }
        }
        out
    }

    pub fn metadata_json(&self) -> Result<String> {
        let meta = serde_json::json!({
            "n": self.spec.n,
            "d": self.spec.d,
            "covariate": self.spec.covariate,
            "covariate_model_note": "ar1 correlates the d coordinates within each covariate vector \
                                     (unit-variance stationary AR(1), scaled by sqrt(covariate_variance)); \
                                     observations are independent",
            "seeds": self.spec.seeds,
            "methods": self.spec.methods,
            "mcmc_iters": self.spec.mcmc_iters,
            "mcmc_burn_in": self.spec.mcmc_burn_in,
            "solver": self.spec.solver,
            "dsvi": self.spec.dsvi,
        });
        Ok(serde_json::to_string_pretty(&meta)?)
    }

    /// Writes `results.csv`, `summary.csv`, `coverage.csv`, `metadata.json`
    /// (all deterministic for a fixed seed list) and `timings.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), self.results_csv())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("coverage.csv"), self.coverage_csv())?;
        fs::write(dir.join("metadata.json"), self.metadata_json()?)?;
        fs::write(dir.join("timings.csv"), self.timings_csv())?;
        Ok(())
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
