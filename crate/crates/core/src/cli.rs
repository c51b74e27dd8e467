//! Command-line front end. Every subcommand reads one configuration file, writes
//! its reports under `output_dir` and logs `event key=value ...` lines to stdout.
//!
//! Exit codes: 0 on success, 2 when the data fail the nondegeneracy condition in a
//! command that needs it, 1 for everything else (usage, configuration, I/O and
//! numeric faults).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::blowup_geometry::{check_h, cusp_approach, write_samples_csv, DomainSpec, FanPhi, HTolerances, ReconOptions};
use crate::burgers::{build_fan, shock_time};
use crate::config::{parse_eps_list, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::initial_data::{make_data, SmoothField};
use crate::lifespan_study::{sweep, StudyOptions, WaveRunner};
use crate::profile::{first_profile, NdReport, ProfileGrid};
use crate::wave2d::{self, write_history_csv, Checkpointing, Indicator, StopReason, WaveState};

#[derive(Debug, Parser)]
#[command(name = "lifespan-lab", version, about = "Shock formation and lifespan experiments for (1 - u_t) u_tt = Δu")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the configuration and build the initial data.
    DataCheck(Common),
    /// Tabulate the first radiation profile and check (ND).
    Profile(Common),
    /// Solve the reduced Burgers problem by characteristics.
    Burgers(Common),
    /// Locate the first cusp and check condition (H).
    Cusp(Common),
    /// One finite-difference run up to blowup.
    Wave(Common),
    /// ε-sweep and lifespan regression.
    Study(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override of `eps` (wave, cusp) or `eps_list` (study), comma separated.
    #[arg(long)]
    eps: Option<String>,
    /// Validate the configuration and print the plan without computing.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads for all parallel work.
    #[arg(long)]
    threads: Option<usize>,
}

/// Slow-time levels of the fan when `n_tau` is not configured.
const DEFAULT_N_TAU: usize = 5;

/// Parses `args` (including the program name), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (stage, common) = match &cli.command {
        Command::DataCheck(c) => (Stage::DataCheck, c),
        Command::Profile(c) => (Stage::Profile, c),
        Command::Burgers(c) => (Stage::Burgers, c),
        Command::Cusp(c) => (Stage::Cusp, c),
        Command::Wave(c) => (Stage::Wave, c),
        Command::Study(c) => (Stage::Study, c),
    };
    match execute(stage, common) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::ConfigLine { .. }) {
                eprintln!("{CONFIG_HELP}");
            }
            match e {
                Error::NdFailed(_) => 2,
                _ => 1,
            }
        }
    }
}

const CONFIG_HELP: &str = "\
config keys: support_radius, bump <u0|u1> <cx> <cy> <rho> <amp>, h_sigma, n_omega, c0,
  abel_panels, abel_order, quad_tol, nd_margin, n_tau, cfl, h, delta_min, eps,
  indicator <max_utt|weighted>, eps_list, grids, t_max, output_dir";

fn log(event: &str, kv: &[(&str, String)]) {
    let mut line = event.to_string();
    for (k, v) in kv {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(v);
    }
    println!("{line}");
}

/// A report body stamped with the configuration hash.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// A CSV file whose first line is `# config_hash=<hash>`.
fn csv_file(path: &Path, hash: &str) -> Result<BufWriter<fs::File>> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# config_hash={hash}")?;
    Ok(w)
}

fn write_json<T: Serialize>(path: &Path, hash: &str, body: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Stamped { config_hash: hash, body })?;
    fs::write(path, text + "\n")?;
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    data: (SmoothField, SmoothField),
    out: PathBuf,
}

impl Ctx {
    fn profile(&self) -> Result<ProfileGrid> {
        let grid = first_profile(&self.data.0, &self.data.1, &self.cfg.profile_options())?;
        let nd = grid.nd.as_ref().expect("first_profile runs the check");
        log(
            "nd",
            &[
                ("holds", nd.holds.to_string()),
                ("sigma0", nd.sigma0.to_string()),
                ("omega0", nd.omega0.to_string()),
                ("tau0", nd.tau0.map(|t| t.to_string()).unwrap_or_default()),
                ("diagnostic", format!("{:?}", nd.diagnostic.clone().unwrap_or_default())),
            ],
        );
        Ok(grid)
    }

    /// The (ND) report, or exit code 2 through `NdFailed`.
    fn require_nd(grid: &ProfileGrid) -> Result<&NdReport> {
        let nd = grid.nd.as_ref().expect("first_profile runs the check");
        if !nd.holds {
            return Err(Error::NdFailed(nd.diagnostic.clone().unwrap_or_else(|| "unknown".into())));
        }
        Ok(nd)
    }
}

fn execute(stage: Stage, common: &Common) -> Result<i32> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(list) = &common.eps {
        let list = parse_eps_list(list)?;
        match stage {
            Stage::Study => cfg.eps_list = Some(list),
            Stage::Wave | Stage::Cusp => match list.as_slice() {
                [e] => cfg.eps = Some(*e),
                _ => return Err(Error::Config("--eps takes a single value for this command".into())),
            },
            _ => return Err(Error::Config("--eps is not used by this command".into())),
        }
    }
    cfg.validate(stage)?;
    let data = make_data(&cfg.data_config()?)?;
    let hash = cfg.hash();
    let out = cfg.output_dir.clone().unwrap_or_default();
    if common.dry_run {
        print_plan(stage, &cfg, &hash);
        return Ok(0);
    }
    let ctx = Ctx { cfg, hash, data, out };
    let job = || -> Result<i32> {
        if stage != Stage::DataCheck {
            fs::create_dir_all(&ctx.out)?;
        }
        match stage {
            Stage::DataCheck => data_check(&ctx),
            Stage::Profile => profile_cmd(&ctx),
            Stage::Burgers => burgers_cmd(&ctx),
            Stage::Cusp => cusp_cmd(&ctx),
            Stage::Wave => wave_cmd(&ctx),
            Stage::Study => study_cmd(&ctx),
        }
    };
    match common.threads {
        Some(n) => {
            if n == 0 {
                return Err(Error::Config("--threads must be at least 1".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            pool.install(job)
        }
        None => job(),
    }
}

fn print_plan(stage: Stage, cfg: &RunConfig, hash: &str) {
    let list = |v: &Option<Vec<f64>>| {
        v.as_ref()
            .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
            .unwrap_or_default()
    };
    let out = cfg.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let opts = cfg.profile_options();
    let mut kv = vec![
        ("stage", format!("{stage:?}").to_lowercase()),
        ("config_hash", hash.to_string()),
        ("output_dir", out),
    ];
    if stage != Stage::DataCheck {
        kv.push(("h_sigma", opts.h_sigma.to_string()));
        kv.push(("n_omega", opts.n_omega.to_string()));
    }
    match stage {
        Stage::Wave => {
            kv.push(("eps", cfg.eps.unwrap_or_default().to_string()));
            kv.push(("h", cfg.h.unwrap_or_default().to_string()));
            kv.push(("t_max", cfg.t_max.unwrap_or_default().to_string()));
        }
        Stage::Study => {
            let runs = cfg.eps_list.as_ref().map_or(0, Vec::len) * cfg.grids.as_ref().map_or(0, Vec::len);
            kv.push(("eps_list", list(&cfg.eps_list)));
            kv.push(("grids", list(&cfg.grids)));
            kv.push(("t_max", cfg.t_max.unwrap_or_default().to_string()));
            kv.push(("runs", runs.to_string()));
        }
        _ => {}
    }
    log("plan", &kv);
}

fn data_check(ctx: &Ctx) -> Result<i32> {
    let (u0, u1) = &ctx.data;
    log(
        "data_ok",
        &[
            ("u0_atoms", u0.atoms().len().to_string()),
            ("u1_atoms", u1.atoms().len().to_string()),
            ("support_radius", u0.support_radius().to_string()),
            ("config_hash", ctx.hash.clone()),
        ],
    );
    Ok(0)
}

fn profile_cmd(ctx: &Ctx) -> Result<i32> {
    let grid = ctx.profile()?;
    grid.write_csv(csv_file(&ctx.out.join("profile.csv"), &ctx.hash)?)?;
    write_json(&ctx.out.join("nd_report.json"), &ctx.hash, grid.nd.as_ref().unwrap())?;
    log("profile_done", &[("files", "profile.csv,nd_report.json".into()), ("config_hash", ctx.hash.clone())]);
    Ok(0)
}

fn burgers_cmd(ctx: &Ctx) -> Result<i32> {
    let grid = ctx.profile()?;
    let nd = Ctx::require_nd(&grid)?;
    let shock = shock_time(nd)?;
    let n_tau = ctx.cfg.n_tau.unwrap_or(DEFAULT_N_TAU);
    let fan = build_fan(&grid, shock.tau, n_tau)?;
    let dg = fan.dg_tilde_ds();
    let mut violation: f64 = 0.0;
    for ((j, i, k), v) in dg.indexed_iter() {
        violation = violation.max((v - fan.phi_s[[j, i, k]] * fan.v[[i, k]]).abs());
    }
    fan.write_slices_csv(csv_file(&ctx.out.join("fan_slices.csv"), &ctx.hash)?, &fan.taus)?;
    #[derive(Serialize)]
    struct Report {
        shock: crate::burgers::ShockTime,
        taus: Vec<f64>,
        min_phi_s: f64,
        relation_violation: f64,
    }
    let min_phi_s = fan.phi_s.iter().cloned().fold(f64::INFINITY, f64::min);
    write_json(
        &ctx.out.join("burgers_report.json"),
        &ctx.hash,
        &Report {
            shock,
            taus: fan.taus.clone(),
            min_phi_s,
            relation_violation: violation,
        },
    )?;
    log(
        "burgers_done",
        &[
            ("tau_star", shock.tau.to_string()),
            ("relation_violation", format!("{violation:e}")),
            ("config_hash", ctx.hash.clone()),
        ],
    );
    Ok(0)
}

fn cusp_cmd(ctx: &Ctx) -> Result<i32> {
    let grid = ctx.profile()?;
    let nd = Ctx::require_nd(&grid)?;
    let tau0 = shock_time(nd)?.tau;
    let fan = build_fan(&grid, tau0, DEFAULT_N_TAU)?;
    let rep = check_h(&FanPhi { field: grid.field() }, &DomainSpec::for_fan(&fan, tau0), &HTolerances::default())?;
    write_json(&ctx.out.join("cusp_report.json"), &ctx.hash, &rep)?;
    log(
        "cusp",
        &[
            ("holds_h", rep.holds_h.to_string()),
            ("s", rep.point[0].to_string()),
            ("omega", rep.point[1].to_string()),
            ("tau", rep.point[2].to_string()),
            ("classification", format!("{:?}", rep.classification).to_lowercase()),
        ],
    );
    if let Some(eps) = ctx.cfg.eps.filter(|&e| e > 0.0) {
        let t_bar = (tau0 / eps).powi(2);
        let deltas: Vec<f64> = (0..32).map(|k| t_bar * 10f64.powf(-1.0 - 4.0 * k as f64 / 31.0)).collect();
        let approach = cusp_approach(&fan, eps, &deltas, &ReconOptions::default())?;
        write_samples_csv(&approach.samples, csv_file(&ctx.out.join("samples.csv"), &ctx.hash)?)?;
        #[derive(Serialize)]
        struct Report<'a> {
            eps: f64,
            t_bar: f64,
            fit: &'a crate::blowup_geometry::RateFit,
        }
        write_json(
            &ctx.out.join("rate_fit.json"),
            &ctx.hash,
            &Report {
                eps,
                t_bar: approach.t_bar,
                fit: &approach.fit,
            },
        )?;
        log(
            "rate_fit",
            &[
                ("eps", eps.to_string()),
                ("slope", approach.fit.slope.to_string()),
                ("t_bar", approach.fit.t_bar.to_string()),
            ],
        );
    }
    if !rep.holds_h {
        eprintln!("error: condition (H) fails: {}", rep.diagnostic.clone().unwrap_or_default());
        return Ok(1);
    }
    Ok(0)
}

fn wave_cmd(ctx: &Ctx) -> Result<i32> {
    let eps = ctx.cfg.eps.expect("validated");
    let h = ctx.cfg.h.expect("validated");
    let grid = ctx.profile()?;
    let nd = grid.nd.clone().expect("first_profile runs the check");
    if !nd.holds {
        log("warning", &[("msg", "\"(ND) fails; the run is exploratory\"".into())]);
    }
    let ckpt_dir = ctx.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let ckpt = Checkpointing {
        base: ckpt_dir.join(format!("wave_eps{eps}_h{h}")),
        config_hash: ctx.hash.clone(),
        every_steps: 2000,
    };
    let mut state = if wave2d::suffixed(&ckpt.base, "json").exists() {
        WaveState::load_checkpoint(&ckpt.base, &ctx.hash)?
    } else {
        wave2d::init((&ctx.data.0, &ctx.data.1), eps, &ctx.cfg.wave_options(h))?
    };
    let indicator = ctx.cfg.indicator.unwrap_or(Indicator::MaxUtt);
    let outcome = wave2d::run_to_blowup(&mut state, &ctx.cfg.stop_rule(), indicator, Some(&ckpt))?;
    write_history_csv(state.history(), csv_file(&ctx.out.join("history.csv"), &ctx.hash)?)?;
    #[derive(Serialize)]
    struct Report<'a> {
        nd_holds: bool,
        tau0_ref: Option<f64>,
        predicted_t_bar: Option<f64>,
        outcome: &'a wave2d::RunOutcome,
    }
    write_json(
        &ctx.out.join("wave_report.json"),
        &ctx.hash,
        &Report {
            nd_holds: nd.holds,
            tau0_ref: nd.tau0,
            predicted_t_bar: nd.tau0.filter(|_| eps > 0.0).map(|t| (t / eps).powi(2)),
            outcome: &outcome,
        },
    )?;
    log(
        "wave_done",
        &[
            ("eps", eps.to_string()),
            ("h", h.to_string()),
            ("stop", format!("{:?}", outcome.stop)),
            ("t_end", outcome.t_end.to_string()),
            ("t_bar", outcome.t_bar.map(|t| t.to_string()).unwrap_or_default()),
            ("diagnostic", format!("{:?}", outcome.diagnostic.clone().unwrap_or_default())),
            ("config_hash", ctx.hash.clone()),
        ],
    );
    Ok(match outcome.stop {
        StopReason::Fault { .. } => 1,
        _ => 0,
    })
}

fn study_cmd(ctx: &Ctx) -> Result<i32> {
    let grid = ctx.profile()?;
    let nd = Ctx::require_nd(&grid)?;
    let tau0 = shock_time(nd)?.tau;
    let cfg = &ctx.cfg;
    let runner = WaveRunner {
        data: (&ctx.data.0, &ctx.data.1),
        wave: cfg.wave_options(cfg.grids.as_ref().expect("validated")[0]),
        stop: cfg.stop_rule(),
        indicator: cfg.indicator.unwrap_or(Indicator::MaxUtt),
        checkpoint_dir: Some(ctx.out.join("checkpoints")),
        checkpoint_every: 2000,
        config_hash: ctx.hash.clone(),
    };
    fs::create_dir_all(ctx.out.join("checkpoints"))?;
    let mut opts = StudyOptions::new(cfg.eps_list.clone().expect("validated"), cfg.grids.clone().expect("validated"), tau0);
    opts.config_hash = ctx.hash.clone();
    let fit = sweep(&runner, &opts)?;
    fit.write_report(&ctx.out)?;
    for r in &fit.rows {
        for run in &r.runs {
            log(
                "run",
                &[
                    ("eps", run.eps.to_string()),
                    ("h", run.h.to_string()),
                    ("t_bar", run.t_bar.map(|t| t.to_string()).unwrap_or_default()),
                    ("slope", run.slope.map(|t| t.to_string()).unwrap_or_default()),
                ],
            );
        }
    }
    log(
        "study_done",
        &[
            ("tau0_ref", tau0.to_string()),
            ("tau0_hat", fit.regression.intercept.to_string()),
            ("tau1_empirical", fit.regression.slope.to_string()),
            ("scaling_ok", fit.verdicts.scaling_ok.to_string()),
            ("slopes_ok", fit.verdicts.slopes_ok.to_string()),
            ("config_hash", ctx.hash.clone()),
        ],
    );
    Ok(0)
}
