//! Subcommand implementations. Each returns the text printed to stdout.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crcvoi::imis::{
    calibrate, density_grid, posterior_predictive, posterior_summary, predictive_coverage, read_posterior,
    write_density_grid, write_posterior, write_validation_csv, PosteriorDraws,
};
use crcvoi::psa::{build_draws, evpi_curve, map_reference, run_psa, write_curves_csv, PsaResult, UncertaintyApproach};
use crcvoi::targets::{generate_targets, read_targets, write_targets, TargetSet};
use crcvoi::{Provenance, WorkerPool};

use crate::config::RunConfig;
use crate::{CliError, RuntimeContext};

pub const TARGETS_FILE: &str = "targets.csv";
pub const POSTERIOR_FILE: &str = "posterior.csv";
pub const SUMMARY_FILE: &str = "posterior_summary.csv";
pub const CORRELATION_FILE: &str = "posterior_correlation.csv";
pub const DENSITY_FILE: &str = "density_grid.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const MAP_REFERENCE_FILE: &str = "map_reference.csv";
pub const EVPI_FILE: &str = "evpi.csv";
pub const REPORT_FILE: &str = "report.txt";

pub fn psa_file(approach: UncertaintyApproach) -> String {
    format!("psa_{}.csv", approach.name())
}

pub fn psa_params_file(approach: UncertaintyApproach) -> String {
    format!("psa_params_{}.csv", approach.name())
}

pub fn evpi_file(approach: UncertaintyApproach) -> String {
    format!("evpi_{}.csv", approach.name())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SimulateTargets,
    Calibrate { targets: Option<PathBuf> },
    Validate { posterior: Option<PathBuf>, targets: Option<PathBuf> },
    Psa { posterior: Option<PathBuf> },
    Evpi { psa: Vec<PathBuf> },
    Report,
}

/// A validated configuration plus where and how to run.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    /// `0` means one worker per available core.
    pub workers: usize,
}

impl Context {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>, workers: usize) -> Result<Self, CliError> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
            workers,
        })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.config.hash(), self.config.seeds.master_seed)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&self) -> u64 {
        self.config.seeds.master_seed
    }
}

pub fn run(ctx: &Context, cmd: &Command) -> Result<String, CliError> {
    std::fs::create_dir_all(&ctx.out).context(format!("creating {}", ctx.out.display()))?;
    let pool = WorkerPool::new(ctx.workers).context("starting workers")?;
    log::info!("{cmd:?} with {} workers, config {}", pool.workers(), ctx.config.hash());
    pool.install(|| match cmd {
        Command::SimulateTargets => simulate_targets(ctx),
        Command::Calibrate { targets } => calibrate_cmd(ctx, targets.as_deref()),
        Command::Validate { posterior, targets } => validate(ctx, posterior.as_deref(), targets.as_deref()),
        Command::Psa { posterior } => psa(ctx, posterior.as_deref()),
        Command::Evpi { psa } => evpi(ctx, psa),
        Command::Report => report(ctx),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .context(format!("creating {}", path.display()))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().context(format!("writing {}", path.display()))
}

fn load_targets(ctx: &Context, path: Option<&Path>) -> Result<(PathBuf, TargetSet), CliError> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(TARGETS_FILE));
    let ts = read_targets(&path).context(format!("reading targets {}", path.display()))?;
    Ok((path, ts))
}

fn load_posterior(ctx: &Context, path: Option<&Path>) -> Result<(PathBuf, PosteriorDraws), CliError> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(POSTERIOR_FILE));
    let draws = read_posterior(&path).context(format!("reading posterior {}", path.display()))?;
    Ok((path, draws))
}

fn simulate_targets(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let truth = cfg.true_params().map_err(|e| CliError::Config(format!("targets.true_params: {e}")))?;
    let lt = cfg.life_table()?;
    let ts = generate_targets(&truth, &lt, &cfg.target_gen()).context("generating targets")?;
    let path = ctx.path(TARGETS_FILE);
    write_targets(&ts, &path, Some(&ctx.provenance())).context(format!("writing {}", path.display()))?;

    let mut out = String::new();
    writeln!(out, "{} targets written to {}", ts.len(), path.display()).unwrap();
    writeln!(out, "{:<22} {:>9} {:>14} {:>14}", "target", "bin", "mean", "se").unwrap();
    for t in &ts.targets {
        let bin = if t.key.lo == t.key.hi {
            t.key.lo.to_string()
        } else {
            format!("{}-{}", t.key.lo, t.key.hi)
        };
        writeln!(out, "{:<22} {:>9} {:>14.6e} {:>14.6e}", t.key.kind.name(), bin, t.mean, t.se).unwrap();
    }
    Ok(out)
}

fn calibrate_cmd(ctx: &Context, targets: Option<&Path>) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let (tpath, ts) = load_targets(ctx, targets)?;
    let priors = cfg.priors().map_err(|e| CliError::Config(format!("priors: {e}")))?;
    let fixed = cfg.fixed_inputs()?;
    let sample = calibrate(&priors, &ts, &fixed, &cfg.imis_config())
        .context(format!("calibrating against {}", tpath.display()))?;
    let draws = &sample.draws;
    let prov = ctx.provenance();

    let path = ctx.path(POSTERIOR_FILE);
    write_posterior(draws, &path, Some(&prov)).context(format!("writing {}", path.display()))?;

    let summary = posterior_summary(draws);
    let path = ctx.path(SUMMARY_FILE);
    let mut w = create(&path)?;
    summary.write_csv(&mut w, Some(&prov)).context(format!("writing {}", path.display()))?;
    finish(w, &path)?;

    let path = ctx.path(CORRELATION_FILE);
    let mut w = create(&path)?;
    summary
        .write_correlation_csv(&mut w, Some(&prov))
        .context(format!("writing {}", path.display()))?;
    finish(w, &path)?;

    let grid = density_grid(&priors, draws, cfg.imis.density_grid).context("building density grid")?;
    let path = ctx.path(DENSITY_FILE);
    let mut w = create(&path)?;
    write_density_grid(&grid, &mut w, Some(&prov)).context(format!("writing {}", path.display()))?;
    finish(w, &path)?;

    let d = &draws.diagnostics;
    let mut out = String::new();
    writeln!(
        out,
        "{} draws, {} unique, ESS {:.1}, {} iterations ({}), {} likelihood evaluations",
        draws.len(),
        d.unique_count,
        d.ess,
        d.iterations,
        if d.stopped_by_rule { "stopping rule reached" } else { "iteration cap reached" },
        d.n_evaluated
    )
    .unwrap();
    writeln!(
        out,
        "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "param", "mean", "sd", "map", "cri_lb", "cri_ub"
    )
    .unwrap();
    for p in &summary.params {
        writeln!(
            out,
            "{:<8} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            p.name, p.mean, p.sd, p.map, p.cri_lb, p.cri_ub
        )
        .unwrap();
    }
    Ok(out)
}

fn validate(ctx: &Context, posterior: Option<&Path>, targets: Option<&Path>) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let (_, draws) = load_posterior(ctx, posterior)?;
    let (_, ts) = load_targets(ctx, targets)?;
    let fixed = cfg.fixed_inputs()?;
    let bands = posterior_predictive(&draws, &fixed, cfg.validate.n_per_draw, &ts.metadata.bins, ctx.seed())
        .context("posterior predictive simulation")?;
    let path = ctx.path(VALIDATION_FILE);
    let mut w = create(&path)?;
    write_validation_csv(&bands, &ts, &mut w, Some(&ctx.provenance())).context(format!("writing {}", path.display()))?;
    finish(w, &path)?;
    let (covered, total) = predictive_coverage(&bands, &ts);
    Ok(format!(
        "{covered} of {total} target means inside the 95% posterior predictive interval\n"
    ))
}

fn psa(ctx: &Context, posterior: Option<&Path>) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let (_, draws) = load_posterior(ctx, posterior)?;
    let lt = cfg.life_table()?;
    let base = cfg.base_params();
    let prov = ctx.provenance();
    let mut out = String::new();
    writeln!(out, "{:<24} {:>14} {:>14} {:>14} {:>14}", "approach", "mean_d_cost", "sd_d_cost", "mean_d_qaly", "sd_d_qaly").unwrap();
    for &approach in &cfg.psa.approaches {
        log::info!("PSA {}", approach.name());
        let psa_draws = build_draws(
            approach,
            &draws,
            &base,
            &cfg.cea.external,
            cfg.cea.discount_rate,
            cfg.psa.n_draws,
            ctx.seed(),
        )
        .context(format!("building {} draws", approach.name()))?;
        let result = run_psa(
            approach,
            &psa_draws,
            &cfg.cea.strategy,
            &lt,
            cfg.horizon(),
            cfg.psa.n_individuals,
            ctx.seed(),
        )
        .context(format!("running {} PSA", approach.name()))?;

        let path = ctx.path(&psa_file(approach));
        let mut w = create(&path)?;
        result.write_csv(&mut w, Some(&prov)).context(format!("writing {}", path.display()))?;
        finish(w, &path)?;
        let path = ctx.path(&psa_params_file(approach));
        let mut w = create(&path)?;
        result.write_params_csv(&mut w, Some(&prov)).context(format!("writing {}", path.display()))?;
        finish(w, &path)?;

        let dc = result.d_costs();
        let dq = result.d_qalys();
        let (mc, mq) = result.mean_incremental();
        writeln!(
            out,
            "{:<24} {:>14.2} {:>14.2} {:>14.6} {:>14.6}",
            approach.name(),
            mc,
            crcvoi::psa::sample_variance(&dc).sqrt(),
            mq,
            crcvoi::psa::sample_variance(&dq).sqrt()
        )
        .unwrap();
    }

    let (dc, dq) = map_reference(
        &draws,
        &base,
        &cfg.cea.external,
        cfg.cea.discount_rate,
        &cfg.cea.strategy,
        &lt,
        cfg.horizon(),
        cfg.psa.n_individuals,
        ctx.seed(),
    )
    .context("evaluating the MAP reference point")?;
    let path = ctx.path(MAP_REFERENCE_FILE);
    let mut w = create(&path)?;
    writeln!(w, "{}\nd_cost,d_qaly\n{dc},{dq}", prov.header_line()).context(format!("writing {}", path.display()))?;
    finish(w, &path)?;
    writeln!(out, "MAP reference: d_cost {dc:.2}, d_qaly {dq:.6}").unwrap();
    Ok(out)
}

fn read_psa(path: &Path) -> Result<PsaResult, CliError> {
    let f = File::open(path).context(format!("opening {}", path.display()))?;
    PsaResult::read_csv(std::io::BufReader::new(f)).context(format!("reading {}", path.display()))
}

fn evpi(ctx: &Context, psa_paths: &[PathBuf]) -> Result<String, CliError> {
    let paths: Vec<PathBuf> = if psa_paths.is_empty() {
        ctx.config.psa.approaches.iter().map(|&a| ctx.path(&psa_file(a))).collect()
    } else {
        psa_paths.to_vec()
    };
    let wtp = ctx
        .config
        .wtp_grid()
        .map_err(|e| CliError::Config(format!("psa.wtp: {e}")))?;
    let prov = ctx.provenance();
    let mut curves = Vec::with_capacity(paths.len());
    let mut out = String::new();
    writeln!(out, "{:<24} {:>12} {:>12} {:>16}", "approach", "peak_wtp", "peak_evpi", "nmb_crossing").unwrap();
    for path in &paths {
        let result = read_psa(path)?;
        let curve = evpi_curve(&result, &wtp).context(format!("EVPI for {}", path.display()))?;
        let out_path = ctx.path(&evpi_file(curve.approach));
        let mut w = create(&out_path)?;
        curve.write_csv(&mut w, Some(&prov)).context(format!("writing {}", out_path.display()))?;
        finish(w, &out_path)?;
        let peak = curve.peak();
        let crossing = result
            .nmb_crossing()
            .map_or_else(|| "none".to_string(), |c| format!("{c:.0}"));
        writeln!(out, "{:<24} {:>12.0} {:>12.2} {:>16}", curve.approach.name(), peak.wtp, peak.evpi, crossing).unwrap();
        curves.push(curve);
    }
    let path = ctx.path(EVPI_FILE);
    let mut w = create(&path)?;
    write_curves_csv(&curves, &mut w, Some(&prov)).context(format!("writing {}", path.display()))?;
    finish(w, &path)?;
    Ok(out)
}

fn strip_header(text: &str) -> &str {
    match text.strip_prefix("# crcvoi ") {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

fn report(ctx: &Context) -> Result<String, CliError> {
    let mut out = String::new();
    writeln!(out, "{}", ctx.provenance().header_line()).unwrap();
    let mut sections = 0;
    let files = [
        TARGETS_FILE,
        "posterior.diagnostics.json",
        SUMMARY_FILE,
        CORRELATION_FILE,
        VALIDATION_FILE,
        MAP_REFERENCE_FILE,
    ];
    for name in files {
        let path = ctx.path(name);
        if let Ok(text) = std::fs::read_to_string(&path) {
            writeln!(out, "\n== {name} ==\n{}", strip_header(&text).trim_end()).unwrap();
            sections += 1;
        }
    }
    let wtp = ctx
        .config
        .wtp_grid()
        .map_err(|e| CliError::Config(format!("psa.wtp: {e}")))?;
    let mut psa_lines = String::new();
    for &approach in &UncertaintyApproach::ALL {
        let path = ctx.path(&psa_file(approach));
        if !path.exists() {
            continue;
        }
        let result = read_psa(&path)?;
        let (mc, mq) = result.mean_incremental();
        let peak = evpi_curve(&result, &wtp).context(format!("EVPI for {}", path.display()))?.peak();
        writeln!(
            psa_lines,
            "{},{},{},{},{},{}",
            approach.name(),
            result.len(),
            mc,
            mq,
            peak.wtp,
            peak.evpi
        )
        .unwrap();
    }
    if !psa_lines.is_empty() {
        writeln!(out, "\n== psa ==\napproach,n_draws,mean_d_cost,mean_d_qaly,peak_evpi_wtp,peak_evpi\n{}", psa_lines.trim_end()).unwrap();
        sections += 1;
    }
    if sections == 0 {
        return Err(CliError::Runtime {
            context: format!("report for {}", ctx.out.display()),
            source: crcvoi::Error::Domain("no pipeline outputs found".into()),
        });
    }
    let path = ctx.path(REPORT_FILE);
    std::fs::write(&path, &out).context(format!("writing {}", path.display()))?;
    Ok(out)
}
