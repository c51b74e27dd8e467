//! ε-sweeps of the wave solver and the regression of `ε√T̄_ε` on `ε`.
//!
//! The lifespan law `ε√T̄_ε = τ̄₀ + ε τ̄₁ + O(ε² ln ε)` is fitted as a straight
//! line in `ε`; only the intercept is compared with the profile prediction, the
//! slope is reported as an empirical estimate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initial_data::SmoothField;
use crate::wave2d::{self, Checkpointing, Indicator, RunOutcome, StopRule, WaveOptions, WaveState};

/// Produces one run of the sweep.
pub trait LifespanRunner: Sync {
    fn run(&self, eps: f64, h: f64) -> Result<RunOutcome>;
}

/// Runs the finite-difference solver on fixed data.
pub struct WaveRunner<'a> {
    pub data: (&'a SmoothField, &'a SmoothField),
    /// Template; `h` is replaced per run.
    pub wave: WaveOptions,
    pub stop: StopRule,
    pub indicator: Indicator,
    /// Directory for state checkpoints, which make the sweep resumable.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub config_hash: String,
}

impl WaveRunner<'_> {
    fn base(&self, eps: f64, h: f64) -> Option<PathBuf> {
        self.checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("state_eps{eps}_h{h}")))
    }
}

impl LifespanRunner for WaveRunner<'_> {
    fn run(&self, eps: f64, h: f64) -> Result<RunOutcome> {
        let opts = WaveOptions {
            h,
            ..self.wave.clone()
        };
        let ckpt = self.base(eps, h).map(|base| Checkpointing {
            base,
            config_hash: self.config_hash.clone(),
            every_steps: self.checkpoint_every,
        });
        let mut state = match &ckpt {
            Some(c) if wave2d::suffixed(&c.base, "json").exists() => {
                WaveState::load_checkpoint(&c.base, &self.config_hash)?
            }
            _ => wave2d::init(self.data, eps, &opts)?,
        };
        wave2d::run_to_blowup(&mut state, &self.stop, self.indicator, ckpt.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub eps_list: Vec<f64>,
    /// Grid spacings, coarse to fine.
    pub grids: Vec<f64>,
    /// Reference `τ̄₀ = 1 / max ∂²_σ R⁽¹⁾`.
    pub tau0_ref: f64,
    pub tol_scaling: f64,
    /// Allowed deviation of a blowup-rate exponent from −1.
    pub tol_slope: f64,
    /// Slack of the monotone-refinement check.
    pub refinement_slack: f64,
    pub config_hash: String,
}

impl StudyOptions {
    pub fn new(eps_list: Vec<f64>, grids: Vec<f64>, tau0_ref: f64) -> Self {
        Self {
            eps_list,
            grids,
            tau0_ref,
            tol_scaling: 0.15,
            tol_slope: 0.1,
            refinement_slack: 1e-3,
            config_hash: String::new(),
        }
    }
}

/// One `(ε, h)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub eps: f64,
    pub h: f64,
    pub t_bar: Option<f64>,
    /// `ε √T̄`.
    pub tau_eps: Option<f64>,
    pub slope: Option<f64>,
    /// RMS log-residual of the rate fit.
    pub fit_residual: Option<f64>,
    pub outcome: RunOutcome,
}

/// All grids of one `ε`, with the extrapolated lifespan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRow {
    pub eps: f64,
    /// Coarse to fine.
    pub runs: Vec<RunRow>,
    /// Richardson value of the two finest grids, or the finest grid alone.
    pub t_bar: Option<f64>,
    pub tau_eps: Option<f64>,
    /// Uncertainty of `tau_eps` from the grid dependence; sets the regression weight.
    pub sigma: Option<f64>,
    /// `tau_eps` minus the regression line.
    pub residual: Option<f64>,
    /// Why this ε was left out of the regression.
    pub excluded: Option<String>,
}

/// Weighted least squares of `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    /// `|τ̂₀ - τ̄₀| / τ̄₀ ≤ tol_scaling`.
    pub scaling_ok: bool,
    /// Every fitted blowup exponent within `tol_slope` of −1.
    pub slopes_ok: bool,
    /// For every ε, the finer grid is no farther from `τ̄₀` than the coarser one.
    pub refinement_monotone: bool,
    /// The per-grid intercepts approach `τ̄₀` under refinement.
    pub intercept_improves: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifespanFit {
    pub config_hash: String,
    pub options: StudyOptions,
    pub rows: Vec<EpsRow>,
    /// `τ̂₀` (intercept) and the empirical `τ̂₁` (slope).
    pub regression: LineFit,
    pub relative_error: f64,
    /// Same regression on each grid alone, coarse to fine; `None` where a grid has
    /// fewer than 3 usable points.
    pub per_grid: Vec<Option<LineFit>>,
    pub verdicts: Verdicts,
    pub diagnostics: Vec<String>,
}

/// Fits `y = a + b x` with weights `w`. Standard errors come from the weighted
/// residual variance (zero for an exact line).
pub fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = (0..n).map(|i| w[i] * (x[i] - xm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidArgument("regression abscissae are all equal".into()));
    }
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = (0..n)
        .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
        .sum();
    let s2 = rss / (n - 2) as f64;
    Ok(LineFit {
        intercept,
        slope,
        se_intercept: (s2 * (1.0 / sw + xm * xm / sxx)).sqrt(),
        se_slope: (s2 / sxx).sqrt(),
        n,
    })
}

fn validate(opts: &StudyOptions) -> Result<()> {
    if opts.eps_list.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a sweep needs at least 3 values of ε, got {}",
            opts.eps_list.len()
        )));
    }
    if opts.grids.is_empty() {
        return Err(Error::InvalidArgument("no grids given".into()));
    }
    if opts.eps_list.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument("every ε must be positive".into()));
    }
    if opts.grids.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(Error::InvalidArgument("every grid spacing must be positive".into()));
    }
    if !(opts.tau0_ref > 0.0) {
        return Err(Error::InvalidArgument("τ̄₀ must be positive".into()));
    }
    Ok(())
}

/// Runs every `(ε, h)` pair (concurrently) and fits the lifespan law.
pub fn sweep<R: LifespanRunner + ?Sized>(runner: &R, opts: &StudyOptions) -> Result<LifespanFit> {
    validate(opts)?;
    let mut eps_list = opts.eps_list.clone();
    eps_list.sort_by(f64::total_cmp);
    eps_list.dedup();
    let mut grids = opts.grids.clone();
    grids.sort_by(|a, b| b.total_cmp(a));
    grids.dedup();
    let pairs: Vec<(f64, f64)> = eps_list
        .iter()
        .flat_map(|&e| grids.iter().map(move |&h| (e, h)))
        .collect();
    let outcomes: Vec<RunOutcome> = pairs
        .par_iter()
        .map(|&(e, h)| runner.run(e, h))
        .collect::<Result<_>>()?;
    let norm = StudyOptions {
        eps_list,
        grids,
        ..opts.clone()
    };
    aggregate(&norm.eps_list, &norm.grids, outcomes, &norm)
}

fn run_row(outcome: RunOutcome) -> RunRow {
    let t_bar = outcome.t_bar.filter(|t| *t > 0.0);
    RunRow {
        eps: outcome.eps,
        h: outcome.h,
        t_bar,
        tau_eps: t_bar.map(|t| outcome.eps * t.sqrt()),
        slope: outcome.fit.as_ref().map(|f| f.slope),
        fit_residual: outcome.fit.as_ref().map(|f| f.residual),
        outcome,
    }
}

/// Sequential, order-fixed aggregation of the run outcomes (ε-major, grids coarse
/// to fine).
fn aggregate(eps_list: &[f64], grids: &[f64], outcomes: Vec<RunOutcome>, opts: &StudyOptions) -> Result<LifespanFit> {
    let mut diagnostics = Vec::new();
    let mut it = outcomes.into_iter();
    let mut rows: Vec<EpsRow> = eps_list
        .iter()
        .map(|&eps| {
            let runs: Vec<RunRow> = grids.iter().map(|_| run_row(it.next().expect("one outcome per pair"))).collect();
            eps_row(eps, runs)
        })
        .collect();
    for r in &rows {
        if let Some(why) = &r.excluded {
            diagnostics.push(format!("eps={} excluded: {why}", r.eps));
        }
    }

    let usable: Vec<&EpsRow> = rows.iter().filter(|r| r.excluded.is_none()).collect();
    let x: Vec<f64> = usable.iter().map(|r| r.eps).collect();
    let y: Vec<f64> = usable.iter().map(|r| r.tau_eps.expect("usable rows have τ")).collect();
    let floor = 1e-3 * opts.tau0_ref;
    let w: Vec<f64> = usable
        .iter()
        .map(|r| r.sigma.unwrap_or(0.0).max(floor).powi(-2))
        .collect();
    let regression = weighted_line(&x, &y, &w)?;
    for r in rows.iter_mut().filter(|r| r.excluded.is_none()) {
        r.residual = Some(r.tau_eps.unwrap() - regression.intercept - regression.slope * r.eps);
    }

    let per_grid: Vec<Option<LineFit>> = (0..grids.len())
        .map(|g| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| r.runs[g].tau_eps.map(|t| (r.eps, t)))
                .collect();
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            weighted_line(&x, &y, &vec![1.0; x.len()]).ok()
        })
        .collect();

    let tau0 = opts.tau0_ref;
    let relative_error = (regression.intercept - tau0).abs() / tau0;
    let slopes_ok = rows
        .iter()
        .flat_map(|r| &r.runs)
        .filter(|run| run.t_bar.is_some())
        .all(|run| run.slope.is_some_and(|p| (p + 1.0).abs() <= opts.tol_slope));
    let refinement_monotone = rows.iter().all(|r| {
        r.runs.windows(2).all(|pair| match (pair[0].tau_eps, pair[1].tau_eps) {
            (Some(c), Some(f)) => (f - tau0).abs() <= (c - tau0).abs() + opts.refinement_slack,
            _ => true,
        })
    });
    let intercept_improves = match (per_grid.first(), per_grid.last()) {
        (Some(Some(c)), Some(Some(f))) if per_grid.len() > 1 => {
            Some((f.intercept - tau0).abs() <= (c.intercept - tau0).abs() + opts.refinement_slack)
        }
        _ => None,
    };
    Ok(LifespanFit {
        config_hash: opts.config_hash.clone(),
        options: opts.clone(),
        rows,
        regression,
        relative_error,
        per_grid,
        verdicts: Verdicts {
            scaling_ok: relative_error <= opts.tol_scaling,
            slopes_ok,
            refinement_monotone,
            intercept_improves,
        },
        diagnostics,
    })
}

fn eps_row(eps: f64, runs: Vec<RunRow>) -> EpsRow {
    let mut row = EpsRow {
        eps,
        runs,
        t_bar: None,
        tau_eps: None,
        sigma: None,
        residual: None,
        excluded: None,
    };
    let finest = row.runs.last().expect("at least one grid");
    let Some(t_fine) = finest.t_bar else {
        let why = finest
            .outcome
            .diagnostic
            .clone()
            .unwrap_or_else(|| "no blowup detected in horizon".into());
        row.excluded = Some(format!("finest grid h={}: {why}", finest.h));
        return row;
    };
    let coarse = row.runs.len().checked_sub(2).and_then(|i| row.runs[i].t_bar);
    let t_bar = match coarse {
        Some(t_coarse) => wave2d::richardson(t_coarse, t_fine),
        None => t_fine,
    };
    if !(t_bar > 0.0) {
        row.excluded = Some(format!("extrapolated lifespan {t_bar} is not positive"));
        return row;
    }
    row.t_bar = Some(t_bar);
    row.tau_eps = Some(eps * t_bar.sqrt());
    row.sigma = coarse.map(|c| eps * (t_fine.sqrt() - c.sqrt()).abs());
    row
}

impl LifespanFit {
    /// Writes `study.json` and `study_rows.csv` into `dir`.
    pub fn write_report(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("study.json"), self.to_json()?)?;
        let mut csv = format!("# config_hash={}\n", self.config_hash).into_bytes();
        self.write_rows_csv(&mut csv)?;
        fs::write(dir.join("study_rows.csv"), csv)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report<'a> {
            config_hash: &'a str,
            inputs: &'a StudyOptions,
            rows: &'a [EpsRow],
            tau0_ref: f64,
            tau0_hat: f64,
            tau0_hat_se: f64,
            tau1_empirical: f64,
            tau1_empirical_se: f64,
            relative_error: f64,
            per_grid: &'a [Option<LineFit>],
            verdicts: &'a Verdicts,
            diagnostics: &'a [String],
        }
        let r = &self.regression;
        Ok(serde_json::to_string_pretty(&Report {
            config_hash: &self.config_hash,
            inputs: &self.options,
            rows: &self.rows,
            tau0_ref: self.options.tau0_ref,
            tau0_hat: r.intercept,
            tau0_hat_se: r.se_intercept,
            tau1_empirical: r.slope,
            tau1_empirical_se: r.se_slope,
            relative_error: self.relative_error,
            per_grid: &self.per_grid,
            verdicts: &self.verdicts,
            diagnostics: &self.diagnostics,
        })?)
    }

    pub fn write_rows_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "eps,h,t_bar,tau_eps,slope,fit_residual,included")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            for run in &r.runs {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    run.eps,
                    run.h,
                    opt(run.t_bar),
                    opt(run.tau_eps),
                    opt(run.slope),
                    opt(run.fit_residual),
                    r.excluded.is_none()
                )?;
            }
        }
        Ok(())
    }
}
