//! Finite-difference solver for `(1 - uₜ) uₜₜ = Δu` on a square grid.
//!
//! Leapfrog in time with a 5-point Laplacian. With a variable step the centred
//! second difference and the centred first difference are both affine in the
//! new value, so the equation becomes one scalar quadratic per node; the root
//! that tends to the linear update as the nonlinearity vanishes is taken.
//!
//! The grid is centred on the origin and grows with the light cone, so no
//! boundary condition is ever felt: everything beyond the cone is zero to
//! round-off.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blowup_geometry::{rate_fit, RateFit};
use crate::error::{Error, Result};
use crate::initial_data::SmoothField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveOptions {
    pub h: f64,
    pub cfl: f64,
    /// Smallest tolerated `1 - uₜ`.
    pub delta_min: f64,
    /// Cells kept between the light cone and the grid edge.
    pub pad_cells: usize,
    /// Cells added on each side when the grid grows.
    pub grow_cells: usize,
    /// Initial grid half-width; defaults to what the support needs.
    pub grid_radius: Option<f64>,
}

impl WaveOptions {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            cfl: 0.5,
            delta_min: 0.5,
            pad_cells: 12,
            grow_cells: 32,
            grid_radius: None,
        }
    }
}

/// One row of the run history, taken at a time level `tₙ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub t: f64,
    pub max_utt: f64,
    pub max_ut: f64,
    pub argmax: [f64; 2],
    /// `max √r |uₜₜ|`: removes the `r^(-1/2)` decay, so it tracks `1/φ_s` alone.
    #[serde(default)]
    pub max_utt_weighted: f64,
}

#[derive(Debug, Clone)]
pub struct WaveState {
    h: f64,
    /// Nodes are `(i - half) h`, `i = 0..=2 half`, on both axes.
    half: usize,
    u_prev: Array2<f64>,
    u_cur: Array2<f64>,
    /// Recycled storage for the next level; its border is always zero.
    scratch: Array2<f64>,
    t: f64,
    dt_prev: f64,
    eps: f64,
    /// Solve `uₜₜ = Δu` instead; used for ε = 0.
    linear: bool,
    support: f64,
    opts: WaveOptions,
    /// Largest `|uₜ|` seen at the most recent level.
    last_max_ut: f64,
    /// Running maximum of `(1 - max|uₜ|)^(-1/2)`.
    c_eff: f64,
    steps: u64,
    history: Vec<HistoryRow>,
}

fn five_point(a: &Array2<f64>, i: usize, j: usize) -> f64 {
    a[[i + 1, j]] + a[[i - 1, j]] + a[[i, j + 1]] + a[[i, j - 1]] - 4.0 * a[[i, j]]
}

/// Sets up `u⁰` and the Taylor start `u¹`. For `ε = 0` the run is the linear
/// equation with the data taken at unit amplitude.
pub fn init(data: (&SmoothField, &SmoothField), eps: f64, opts: &WaveOptions) -> Result<WaveState> {
    let (u10, u11) = data;
    let h = opts.h;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {h}")));
    }
    if !(opts.cfl > 0.0 && opts.cfl < std::f64::consts::FRAC_1_SQRT_2) {
        return Err(Error::InvalidArgument(format!("cfl must lie in (0, 1/√2), got {}", opts.cfl)));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("ε must be non-negative, got {eps}")));
    }
    if !(opts.delta_min > 0.0 && opts.delta_min < 1.0) {
        return Err(Error::InvalidArgument("delta_min must lie in (0, 1)".into()));
    }
    let support = u10.support_radius().max(u11.support_radius());
    let need = support + opts.pad_cells as f64 * h;
    let radius = match opts.grid_radius {
        Some(r) if r < support => {
            return Err(Error::InvalidArgument(format!(
                "grid radius {r} is smaller than the support radius {support}"
            )))
        }
        Some(r) => r.max(need),
        None => need,
    };
    let half = (radius / h).ceil() as usize + 1;
    let linear = eps == 0.0;
    let amp = if linear { 1.0 } else { eps };
    let n = 2 * half + 1;
    let x = |i: usize| (i as f64 - half as f64) * h;
    let u0 = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
            0.0
        } else {
            amp * u10.eval([x(i), x(j)])
        }
    });
    let dt = opts.cfl * h;
    let mut u1 = Array2::zeros((n, n));
    let inv_h2 = 1.0 / (h * h);
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let v = amp * u11.eval([x(i), x(j)]);
            let lap = five_point(&u0, i, j) * inv_h2;
            let coef = if linear { 1.0 } else { 1.0 / (1.0 - v) };
            u1[[i, j]] = u0[[i, j]] + dt * v + 0.5 * dt * dt * lap * coef;
        }
    }
    let mut max_ut: f64 = 0.0;
    if !linear {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                max_ut = max_ut.max((amp * u11.eval([x(i), x(j)])).abs());
            }
        }
        if 1.0 - max_ut < opts.delta_min {
            return Err(Error::InvalidArgument(format!(
                "initial velocity too large: 1 - max|uₜ| = {} < {}",
                1.0 - max_ut,
                opts.delta_min
            )));
        }
    }
    Ok(WaveState {
        h,
        half,
        u_prev: u0,
        u_cur: u1,
        scratch: Array2::zeros((0, 0)),
        t: dt,
        dt_prev: dt,
        eps,
        linear,
        support,
        opts: opts.clone(),
        last_max_ut: max_ut,
        c_eff: if linear { 1.0 } else { (1.0 - max_ut).powf(-0.5) },
        steps: 1,
        history: Vec::new(),
    })
}

/// Coefficients of the variable-step leapfrog: with `w = uⁿ⁺¹ - uⁿ` and
/// `d = uⁿ - uⁿ⁻¹`, `uₜₜ ≈ αw - βd` and `uₜ ≈ γw + δd`.
#[derive(Debug, Clone, Copy)]
struct StepCoefs {
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
}

impl StepCoefs {
    fn new(dt_p: f64, dt_m: f64) -> Self {
        let sum = dt_p + dt_m;
        Self {
            alpha: 2.0 / (dt_p * sum),
            beta: 2.0 / (dt_m * sum),
            gamma: dt_m / (dt_p * sum),
            delta: dt_p / (dt_m * sum),
        }
    }

    /// Root of `(1 - γw - δd)(αw - βd) = lap` continuously connected to the linear
    /// update, and whether it exists.
    #[inline(always)]
    fn nonlinear(&self, d: f64, lap: f64) -> (f64, bool) {
        let e = 1.0 - self.delta * d;
        let a = self.gamma * self.alpha;
        let b = -(e * self.alpha + self.gamma * self.beta * d);
        let c = e * self.beta * d + lap;
        let disc = b * b - 4.0 * a * c;
        let ok = disc >= 0.0 && b < 0.0;
        (2.0 * c / (-b + disc.max(0.0).sqrt()), ok)
    }

    /// `(uₜₜ, uₜ, w)` at a node from its three levels.
    #[inline(always)]
    fn derivs(&self, prev: f64, cur: f64, next: f64) -> (f64, f64, f64) {
        let (w, d) = (next - cur, cur - prev);
        (self.alpha * w - self.beta * d, self.gamma * w + self.delta * d, w)
    }
}

/// Per-row reduction of one step.
#[derive(Debug, Clone, Copy, Default)]
struct RowStats {
    max_utt: f64,
    /// `max √r |uₜₜ|`, kept as `max r uₜₜ⁴` to avoid a root per node.
    max_weighted4: f64,
    max_ut: f64,
    /// Largest signed `uₜ`; decides the `δ_min` test.
    top_ut: f64,
    /// Largest `|uⁿ⁺¹ - uⁿ|`.
    max_w: f64,
    no_root: bool,
}

impl WaveState {
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_linear(&self) -> bool {
        self.linear
    }

    pub fn dt(&self) -> f64 {
        self.dt_prev
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn support(&self) -> f64 {
        self.support
    }

    pub fn options(&self) -> &WaveOptions {
        &self.opts
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    /// Half-width of the grid.
    pub fn grid_radius(&self) -> f64 {
        self.half as f64 * self.h
    }

    pub fn c_eff(&self) -> f64 {
        self.c_eff
    }

    /// Current level `uⁿ` and the grid coordinate of index 0.
    pub fn field(&self) -> (&Array2<f64>, f64) {
        (&self.u_cur, -(self.half as f64) * self.h)
    }

    pub fn previous(&self) -> &Array2<f64> {
        &self.u_prev
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - self.half as f64) * self.h
    }

    /// Value of `uⁿ` at a grid node nearest to `x`, or 0 off the grid.
    pub fn value_near(&self, x: [f64; 2]) -> f64 {
        let idx = |v: f64| (v / self.h).round() + self.half as f64;
        let (i, j) = (idx(x[0]), idx(x[1]));
        let n = (2 * self.half + 1) as f64;
        if i < 0.0 || j < 0.0 || i >= n || j >= n {
            return 0.0;
        }
        self.u_cur[[i as usize, j as usize]]
    }

    /// Bilinear interpolation of `uⁿ`.
    pub fn interpolate(&self, x: [f64; 2]) -> f64 {
        let n = 2 * self.half + 1;
        let fi = x[0] / self.h + self.half as f64;
        let fj = x[1] / self.h + self.half as f64;
        if fi < 0.0 || fj < 0.0 || fi >= (n - 1) as f64 || fj >= (n - 1) as f64 {
            return 0.0;
        }
        let (i, j) = (fi.floor() as usize, fj.floor() as usize);
        let (a, b) = (fi - i as f64, fj - j as f64);
        let u = &self.u_cur;
        (1.0 - a) * (1.0 - b) * u[[i, j]]
            + a * (1.0 - b) * u[[i + 1, j]]
            + (1.0 - a) * b * u[[i, j + 1]]
            + a * b * u[[i + 1, j + 1]]
    }

    /// Radius beyond which the solution vanishes up to round-off.
    pub fn cone_radius(&self) -> f64 {
        self.support + self.c_eff * self.t
    }

    /// Discrete energy `½‖(uⁿ - uⁿ⁻¹)/Δt‖² + ½⟨∇uⁿ, ∇uⁿ⁻¹⟩` at `tₙ - Δt/2`; exactly
    /// conserved by the linear scheme with a fixed step.
    pub fn discrete_energy(&self) -> f64 {
        let (a, b) = (&self.u_cur, &self.u_prev);
        let n = a.nrows();
        let dt = self.dt_prev;
        let h2 = self.h * self.h;
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..n {
                    let v = (a[[i, j]] - b[[i, j]]) / dt;
                    acc += 0.5 * h2 * v * v;
                    if i + 1 < n {
                        acc += 0.5 * (a[[i + 1, j]] - a[[i, j]]) * (b[[i + 1, j]] - b[[i, j]]);
                    }
                    if j + 1 < n {
                        acc += 0.5 * (a[[i, j + 1]] - a[[i, j]]) * (b[[i, j + 1]] - b[[i, j]]);
                    }
                }
                acc
            })
            .collect();
        rows.iter().sum()
    }

    fn ensure_room(&mut self) {
        let need = self.support + self.c_eff * (self.t + 2.0 * self.dt_prev)
            + self.opts.pad_cells as f64 * self.h;
        if need <= (self.half - 1) as f64 * self.h {
            return;
        }
        let extra = ((need / self.h).ceil() as usize + 1 - self.half).max(self.opts.grow_cells);
        let new_half = self.half + extra;
        let n_new = 2 * new_half + 1;
        let n_old = 2 * self.half + 1;
        let grow = |a: &Array2<f64>| {
            let mut out = Array2::zeros((n_new, n_new));
            out.slice_mut(ndarray::s![extra..extra + n_old, extra..extra + n_old])
                .assign(a);
            out
        };
        self.u_prev = grow(&self.u_prev);
        self.u_cur = grow(&self.u_cur);
        self.scratch = Array2::zeros((0, 0));
        self.half = new_half;
    }

    /// Advances one level. On failure the state is left unchanged.
    pub fn step(&mut self) -> Result<()> {
        self.advance(self.natural_dt())
    }

    /// Steps until `tₙ = t`, shortening the last step to land on it exactly.
    pub fn step_until(&mut self, t: f64) -> Result<()> {
        while self.t < t {
            let dt = self.natural_dt();
            let left = t - self.t;
            // a sliver of a step would make the next step ratio extreme
            if left <= dt {
                self.advance(left)?;
                self.t = t;
                break;
            }
            self.advance(if left < 1.5 * dt { 0.5 * left } else { dt })?;
        }
        Ok(())
    }

    /// `cfl h √(1 - max|uₜ|)`.
    fn natural_dt(&self) -> f64 {
        if self.linear {
            self.opts.cfl * self.h
        } else {
            self.opts.cfl * self.h * (1.0 - self.last_max_ut).max(0.0).sqrt()
        }
    }

    fn advance(&mut self, dt_p: f64) -> Result<()> {
        self.ensure_room();
        let h = self.h;
        let dt_m = self.dt_prev;
        let k = StepCoefs::new(dt_p, dt_m);
        let inv_h2 = 1.0 / (h * h);
        let linear = self.linear;

        let n = 2 * self.half + 1;
        let xsq: Vec<f64> = (0..n).map(|i| self.coord(i).powi(2)).collect();
        let mut next = std::mem::replace(&mut self.scratch, Array2::zeros((0, 0)));
        if next.dim() != (n, n) {
            next = Array2::zeros((n, n));
        }
        let cur = self.u_cur.as_slice().expect("standard layout");
        let prev = self.u_prev.as_slice().expect("standard layout");
        let stats: Vec<RowStats> = next
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(n)
            .enumerate()
            .map(|(i, out)| {
                if i == 0 || i == n - 1 {
                    return RowStats::default();
                }
                let row = &cur[i * n..(i + 1) * n];
                let up = &cur[(i - 1) * n..i * n];
                let dn = &cur[(i + 1) * n..(i + 2) * n];
                let prow = &prev[i * n..(i + 1) * n];
                let mut no_root = false;
                if linear {
                    for j in 1..n - 1 {
                        let c = row[j];
                        let lap = (up[j] + dn[j] + row[j - 1] + row[j + 1] - 4.0 * c) * inv_h2;
                        out[j] = c + (lap + k.beta * (c - prow[j])) / k.alpha;
                    }
                } else {
                    for j in 1..n - 1 {
                        let c = row[j];
                        let lap = (up[j] + dn[j] + row[j - 1] + row[j + 1] - 4.0 * c) * inv_h2;
                        let (w, ok) = k.nonlinear(c - prow[j], lap);
                        no_root |= !ok;
                        out[j] = c + w;
                    }
                }
                let mut st = RowStats {
                    no_root,
                    ..RowStats::default()
                };
                let xi = xsq[i];
                for j in 1..n - 1 {
                    let (utt, ut, w) = k.derivs(prow[j], row[j], out[j]);
                    let a = utt.abs();
                    st.max_utt = st.max_utt.max(a);
                    st.max_weighted4 = st.max_weighted4.max((xi + xsq[j]) * (a * a) * (a * a));
                    st.max_ut = st.max_ut.max(ut.abs());
                    st.top_ut = st.top_ut.max(ut);
                    st.max_w = st.max_w.max(w.abs());
                }
                st
            })
            .collect();

        // rows are combined in index order, so ties resolve to the lowest index
        let mut total = RowStats::default();
        let mut best_row = 0;
        for (i, st) in stats.iter().enumerate() {
            if st.max_utt > total.max_utt {
                total.max_utt = st.max_utt;
                best_row = i;
            }
            total.max_weighted4 = total.max_weighted4.max(st.max_weighted4);
            total.max_ut = total.max_ut.max(st.max_ut);
            total.top_ut = total.top_ut.max(st.top_ut);
            total.max_w = total.max_w.max(st.max_w);
        }
        let find = |pred: &dyn Fn(f64, f64, f64) -> bool| -> Option<(usize, usize)> {
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    let idx = i * n + j;
                    if pred(prev[idx], cur[idx], next.as_slice().unwrap()[idx]) {
                        return Some((i, j));
                    }
                }
            }
            None
        };
        if !linear {
            let fault = if stats.iter().any(|s| s.no_root) {
                Some(("no real root near the linear update", None))
            } else if 1.0 - total.top_ut < self.opts.delta_min {
                let limit = 1.0 - self.opts.delta_min;
                Some(("1 - u_t fell below delta_min", find(&|p, c, x| k.derivs(p, c, x).1 > limit)))
            } else {
                None
            };
            if let Some((reason, at)) = fault {
                let at = at.or_else(|| self.locate_no_root(&k, inv_h2));
                let (i, j) = at.unwrap_or((self.half, self.half));
                self.scratch = next;
                return Err(Error::BlowupImminent {
                    t: self.t,
                    x1: self.coord(i),
                    x2: self.coord(j),
                    reason: reason.into(),
                });
            }
        }
        let j_best = {
            let row = best_row * n;
            let nx = next.as_slice().unwrap();
            (1..n - 1)
                .find(|&j| k.derivs(prev[row + j], cur[row + j], nx[row + j]).0.abs() == total.max_utt)
                .unwrap_or(self.half)
        };
        let i_best = if total.max_utt > 0.0 { best_row } else { self.half };
        self.history.push(HistoryRow {
            t: self.t,
            max_utt: total.max_utt,
            max_ut: total.max_ut,
            argmax: [self.coord(i_best), self.coord(j_best)],
            max_utt_weighted: total.max_weighted4.sqrt().sqrt(),
        });
        let old = std::mem::replace(&mut self.u_cur, next);
        self.scratch = std::mem::replace(&mut self.u_prev, old);
        self.t += dt_p;
        self.dt_prev = dt_p;
        self.steps += 1;
        if !linear {
            self.last_max_ut = total.max_ut.max(total.max_w / dt_p);
            if self.last_max_ut < 1.0 {
                self.c_eff = self.c_eff.max((1.0 - self.last_max_ut).powf(-0.5));
            }
        }
        Ok(())
    }

    /// First node whose quadratic has no admissible root.
    fn locate_no_root(&self, k: &StepCoefs, inv_h2: f64) -> Option<(usize, usize)> {
        let n = 2 * self.half + 1;
        let (u, p) = (&self.u_cur, &self.u_prev);
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let lap = five_point(u, i, j) * inv_h2;
                if !k.nonlinear(u[[i, j]] - p[[i, j]], lap).1 {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Writes `<base>.bin` (both levels, little-endian f64) and `<base>.json`.
    pub fn save_checkpoint(&self, base: &Path, config_hash: &str) -> Result<()> {
        let bin = suffixed(base, "bin");
        let mut bytes = Vec::with_capacity(16 * self.u_cur.len());
        for v in self.u_prev.iter().chain(self.u_cur.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&bin, &bytes)?;
        let meta = CheckpointMeta {
            config_hash: config_hash.to_string(),
            h: self.h,
            half: self.half,
            t: self.t,
            dt_prev: self.dt_prev,
            eps: self.eps,
            linear: self.linear,
            support: self.support,
            opts: self.opts.clone(),
            last_max_ut: self.last_max_ut,
            c_eff: self.c_eff,
            steps: self.steps,
            history: self.history.clone(),
        };
        write_atomic(&suffixed(base, "json"), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    /// Restores a state saved by [`WaveState::save_checkpoint`]; the stored config
    /// hash must match.
    pub fn load_checkpoint(base: &Path, config_hash: &str) -> Result<Self> {
        let json = suffixed(base, "json");
        let err = |path: &PathBuf, msg: String| Error::Checkpoint {
            path: path.clone(),
            msg,
        };
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&json)?)?;
        if meta.config_hash != config_hash {
            return Err(err(&json, "config hash does not match".into()));
        }
        let bin = suffixed(base, "bin");
        let bytes = fs::read(&bin)?;
        let n = 2 * meta.half + 1;
        if bytes.len() != 16 * n * n {
            return Err(err(&bin, format!("expected {} bytes, found {}", 16 * n * n, bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (a, b) = vals.split_at(n * n);
        let shape = |v: &[f64]| Array2::from_shape_vec((n, n), v.to_vec()).expect("length checked");
        Ok(Self {
            h: meta.h,
            half: meta.half,
            u_prev: shape(a),
            u_cur: shape(b),
            scratch: Array2::zeros((0, 0)),
            t: meta.t,
            dt_prev: meta.dt_prev,
            eps: meta.eps,
            linear: meta.linear,
            support: meta.support,
            opts: meta.opts,
            last_max_ut: meta.last_max_ut,
            c_eff: meta.c_eff,
            steps: meta.steps,
            history: meta.history,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    h: f64,
    half: usize,
    t: f64,
    dt_prev: f64,
    eps: f64,
    linear: bool,
    support: f64,
    opts: WaveOptions,
    last_max_ut: f64,
    c_eff: f64,
    steps: u64,
    history: Vec<HistoryRow>,
}

/// `base` plus `.ext`; unlike `with_extension`, dots already in the name survive.
pub fn suffixed(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = suffixed(path, "tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_history_csv<W: Write>(history: &[HistoryRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,max_utt,max_ut,argmax_x1,argmax_x2")?;
    for r in history {
        writeln!(w, "{},{},{},{},{}", r.t, r.max_utt, r.max_ut, r.argmax[0], r.argmax[1])?;
    }
    Ok(())
}

/// When [`run_to_blowup`] stops stepping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// History before this time belongs to the initial layer and is ignored; the
    /// pulse needs about `2M` to leave the data region.
    pub settle_time: f64,
    /// Stop once `max|uₜₜ|` exceeds this multiple of its largest value during the
    /// settling time.
    pub cap_factor: f64,
    /// Stop if the adaptive step falls below this.
    pub dt_floor: f64,
    pub t_max: f64,
    /// Averaging time of the log-growth rate `d ln max|uₜₜ| / dt`.
    pub rate_window: f64,
    /// Stop once the growth has doubled from its minimum and the rate stays below
    /// `stall_ratio` times its running maximum for a whole `rate_window`: past that
    /// point the grid, not the solution, limits the growth.
    pub stall_ratio: Option<f64>,
    /// Smallest growth factor of the indicator that counts as blowup.
    pub min_growth: f64,
}

impl StopRule {
    /// Defaults for data supported in `|x| ≤ m`.
    pub fn new(t_max: f64, m: f64) -> Self {
        Self {
            settle_time: 2.0 * m,
            cap_factor: 1e3,
            dt_floor: 1e-8,
            t_max,
            rate_window: 1.0,
            stall_ratio: Some(0.5),
            min_growth: 2.0,
        }
    }
}

/// Which history column the blowup fit consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    MaxUtt,
    /// `max √r |uₜₜ|`.
    Weighted,
}

impl Indicator {
    fn of(self, r: &HistoryRow) -> f64 {
        match self {
            Indicator::MaxUtt => r.max_utt,
            Indicator::Weighted => r.max_utt_weighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    Cap,
    DtFloor,
    TMax,
    Stalled,
    Fault { reason: String, x: [f64; 2] },
}

/// Periodic checkpoints of a run.
#[derive(Debug, Clone)]
pub struct Checkpointing {
    pub base: PathBuf,
    pub config_hash: String,
    pub every_steps: u64,
}

/// Result of a run: why it stopped and, if the indicator grew, the rate fit on
/// the last decade of growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub eps: f64,
    pub h: f64,
    pub stop: StopReason,
    pub t_end: f64,
    pub steps: u64,
    /// Indicator at the end of the fit window over its minimum before it.
    pub growth: f64,
    pub window: Option<[f64; 2]>,
    pub fit: Option<RateFit>,
    /// Same window, the other indicator.
    pub alt_fit: Option<RateFit>,
    pub t_bar: Option<f64>,
    /// Location of `max|uₜₜ|` at the end of the fit window.
    pub argmax: [f64; 2],
    pub diagnostic: Option<String>,
}

impl RunOutcome {
    pub fn blowup_detected(&self) -> bool {
        self.t_bar.is_some()
    }
}

/// Log-growth rate of the indicator over a trailing window.
fn growth_rate(
    hist: &[HistoryRow],
    at: usize,
    window: f64,
    settle: f64,
    ind: Indicator,
) -> Option<f64> {
    let t = hist[at].t;
    let from = hist[..=at].partition_point(|r| r.t < (t - window).max(settle));
    if from >= at || hist[at].t - hist[from].t < 0.5 * window {
        return None;
    }
    let (a, b) = (ind.of(&hist[from]), ind.of(&hist[at]));
    (a > 0.0 && b > 0.0).then(|| (b / a).ln() / (hist[at].t - hist[from].t))
}

/// Stop-rule bookkeeping over the history; replaying a restored history
/// reproduces the state of an uninterrupted run.
#[derive(Debug, Clone)]
struct Monitor {
    rate_max: f64,
    t_rate_max: Option<f64>,
    below_since: Option<f64>,
    y_min: f64,
    /// Largest `max|uₜₜ|` during the settling time.
    reference: f64,
}

impl Monitor {
    fn new() -> Self {
        Self {
            rate_max: f64::NEG_INFINITY,
            t_rate_max: None,
            below_since: None,
            y_min: f64::INFINITY,
            reference: 0.0,
        }
    }

    /// Looks at `hist[last]`; returns a reason to stop.
    fn observe(&mut self, hist: &[HistoryRow], last: usize, stop: &StopRule, ind: Indicator) -> Option<StopReason> {
        let row = &hist[last];
        if row.t <= stop.settle_time {
            self.reference = self.reference.max(row.max_utt);
            return None;
        }
        if self.reference > 0.0 && row.max_utt > stop.cap_factor * self.reference {
            return Some(StopReason::Cap);
        }
        let y = ind.of(row);
        self.y_min = self.y_min.min(y);
        let ratio = stop.stall_ratio?;
        let g = growth_rate(hist, last, stop.rate_window, stop.settle_time, ind)?;
        if g > self.rate_max {
            self.rate_max = g;
            self.t_rate_max = Some(row.t);
        }
        let grown = self.y_min > 0.0 && y >= stop.min_growth * self.y_min;
        if grown && self.rate_max > 0.0 && g < ratio * self.rate_max {
            let since = *self.below_since.get_or_insert(row.t);
            if row.t - since >= stop.rate_window {
                return Some(StopReason::Stalled);
            }
        } else {
            self.below_since = None;
        }
        None
    }
}

/// Steps until `stop` fires, then fits `C (T̄ - t)^p` to the tail of the history.
/// A state restored from a checkpoint continues where it left off.
pub fn run_to_blowup(
    state: &mut WaveState,
    stop: &StopRule,
    indicator: Indicator,
    ckpt: Option<&Checkpointing>,
) -> Result<RunOutcome> {
    let mut mon = Monitor::new();
    let mut early = None;
    for last in 0..state.history().len() {
        if let Some(r) = mon.observe(state.history(), last, stop, indicator) {
            early = Some(r);
            break;
        }
    }
    let reason = loop {
        if let Some(r) = early.take() {
            break r;
        }
        if state.t() >= stop.t_max {
            break StopReason::TMax;
        }
        if let Err(e) = state.step() {
            match e {
                Error::BlowupImminent { x1, x2, reason, .. } => {
                    break StopReason::Fault {
                        reason,
                        x: [x1, x2],
                    }
                }
                other => return Err(other),
            }
        }
        if let Some(c) = ckpt {
            if c.every_steps > 0 && state.steps() % c.every_steps == 0 {
                state.save_checkpoint(&c.base, &c.config_hash)?;
            }
        }
        let last = state.history().len() - 1;
        if let Some(r) = mon.observe(state.history(), last, stop, indicator) {
            break r;
        }
        if state.dt() < stop.dt_floor {
            break StopReason::DtFloor;
        }
    };
    if let Some(c) = ckpt {
        state.save_checkpoint(&c.base, &c.config_hash)?;
    }
    let end_time = match reason {
        StopReason::Stalled => mon.t_rate_max,
        _ => None,
    };
    Ok(fit_tail(state, reason, end_time, stop, indicator))
}

/// Fits the last decade of growth of the indicator, ending at its record maximum
/// (or at `end_time`, when the run stalled).
fn fit_tail(
    state: &WaveState,
    stop: StopReason,
    end_time: Option<f64>,
    rule: &StopRule,
    indicator: Indicator,
) -> RunOutcome {
    let all = state.history();
    let skip = all.partition_point(|r| r.t <= rule.settle_time);
    let hist = &all[skip..];
    let mut out = RunOutcome {
        eps: state.eps(),
        h: state.h(),
        stop,
        t_end: state.t(),
        steps: state.steps(),
        growth: 1.0,
        window: None,
        fit: None,
        alt_fit: None,
        t_bar: None,
        argmax: [0.0, 0.0],
        diagnostic: None,
    };
    let no_blowup = |mut out: RunOutcome, why: &str| {
        out.diagnostic = Some(format!("no blowup detected in horizon: {why}"));
        out
    };
    if hist.is_empty() {
        return no_blowup(out, "run ended within the settling time");
    }
    let limit = match end_time {
        Some(t) => hist.partition_point(|r| r.t <= t).max(1),
        None => hist.len(),
    };
    let ys: Vec<f64> = hist[..limit].iter().map(|r| indicator.of(r)).collect();
    let end = (0..limit).fold(0, |b, i| if ys[i] >= ys[b] { i } else { b });
    let start_min = (0..=end).fold(0, |b, i| if ys[i] < ys[b] { i } else { b });
    out.argmax = hist[end].argmax;
    if !(ys[start_min] > 0.0) {
        return no_blowup(out, "indicator vanishes");
    }
    out.growth = ys[end] / ys[start_min];
    if out.growth < rule.min_growth {
        let why = format!("indicator grew only by {:.3}", out.growth);
        return no_blowup(out, &why);
    }
    let floor = (ys[end] / 10.0).max(ys[start_min]);
    let first = (start_min..=end).find(|&i| ys[i] >= floor).unwrap_or(start_min);
    // record highs are strictly increasing; thin them evenly in time
    let mut idx = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in first..=end {
        if ys[i] > best {
            best = ys[i];
            idx.push(i);
        }
    }
    const MAX_SAMPLES: usize = 400;
    if idx.len() > MAX_SAMPLES {
        let (t0, t1) = (hist[idx[0]].t, hist[*idx.last().unwrap()].t);
        let mut thin = Vec::with_capacity(MAX_SAMPLES);
        for &i in &idx {
            let slot = ((hist[i].t - t0) / (t1 - t0) * (MAX_SAMPLES - 1) as f64) as usize;
            if thin.len() <= slot {
                thin.push(i);
            }
        }
        if thin.last() != idx.last() {
            thin.push(*idx.last().unwrap());
        }
        idx = thin;
    }
    out.window = Some([hist[idx[0]].t, hist[*idx.last().unwrap()].t]);
    let samples = |ind: Indicator| -> Vec<(f64, f64)> {
        let mut best = f64::NEG_INFINITY;
        idx.iter()
            .map(|&i| (hist[i].t, ind.of(&hist[i])))
            .filter(|&(_, y)| {
                let keep = y > best;
                best = best.max(y);
                keep
            })
            .collect()
    };
    let other = match indicator {
        Indicator::MaxUtt => Indicator::Weighted,
        Indicator::Weighted => Indicator::MaxUtt,
    };
    out.alt_fit = rate_fit(&samples(other)).ok();
    match rate_fit(&samples(indicator)) {
        Ok(f) => {
            out.t_bar = Some(f.t_bar);
            if !f.residual_ok {
                out.diagnostic = Some(format!("rate fit residual {:.3e} above threshold", f.residual));
            }
            out.fit = Some(f);
        }
        Err(e) => return no_blowup(out, &e.to_string()),
    }
    out
}

/// A run at `h` and at `h/2` with the Richardson value `T(h/2) + (T(h/2) - T(h))/3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPair {
    pub coarse: RunOutcome,
    pub fine: RunOutcome,
    pub t_bar_richardson: Option<f64>,
}

pub fn richardson(coarse: f64, fine: f64) -> f64 {
    fine + (fine - coarse) / 3.0
}

/// Runs the same data at `opts.h` and `opts.h / 2`.
pub fn run_refinement_pair(
    data: (&SmoothField, &SmoothField),
    eps: f64,
    opts: &WaveOptions,
    stop: &StopRule,
    indicator: Indicator,
) -> Result<RefinementPair> {
    let mut coarse_state = init(data, eps, opts)?;
    let coarse = run_to_blowup(&mut coarse_state, stop, indicator, None)?;
    drop(coarse_state);
    let fine_opts = WaveOptions {
        h: 0.5 * opts.h,
        ..opts.clone()
    };
    let mut fine_state = init(data, eps, &fine_opts)?;
    let fine = run_to_blowup(&mut fine_state, stop, indicator, None)?;
    let t_bar_richardson = match (coarse.t_bar, fine.t_bar) {
        (Some(c), Some(f)) => Some(richardson(c, f)),
        _ => None,
    };
    Ok(RefinementPair {
        coarse,
        fine,
        t_bar_richardson,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial_data::{make_data, DataConfig};

    fn data(text: &str) -> (SmoothField, SmoothField) {
        make_data(&DataConfig::parse(text).unwrap()).unwrap()
    }

    fn two_bumps() -> (SmoothField, SmoothField) {
        data("support_radius 1\nbump u1 0 0 0.95 2\nbump u1 0.2 0.15 0.7 1\nbump u0 0.2 -0.1 0.7 0.3\n")
    }

    /// Discrete L² distance of `a` from `b` over the nodes of `a`; `b` must be a refinement.
    fn l2_diff(a: &WaveState, b: &WaveState) -> f64 {
        let (u, _) = a.field();
        let sum: f64 = u
            .indexed_iter()
            .map(|((i, j), &v)| (v - b.value_near([a.coord(i), a.coord(j)])).powi(2))
            .sum();
        (sum * a.h() * a.h()).sqrt()
    }

    #[test]
    fn quadratic_root_solves_the_scheme() {
        let k = StepCoefs::new(0.004, 0.005);
        for &(d, lap) in &[(1e-4, 3.0), (-2e-4, -5.0), (0.0, 0.0), (3e-4, 40.0)] {
            let (w, ok) = k.nonlinear(d, lap);
            assert!(ok);
            let (utt, ut, _) = k.derivs(0.0, d, d + w);
            assert!(((1.0 - ut) * utt - lap).abs() < 1e-9 * (1.0 + lap.abs()));
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let z = SmoothField::zero(1.0);
        let mut st = init((&z, &z), 0.3, &WaveOptions::new(0.05)).unwrap();
        let out = run_to_blowup(&mut st, &StopRule::new(4.0, 1.0), Indicator::MaxUtt, None).unwrap();
        assert!(!out.blowup_detected());
        assert!(out.diagnostic.unwrap().starts_with("no blowup detected in horizon"));
        assert!(st.field().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let (u0, u1) = two_bumps();
        let mut o = WaveOptions::new(0.05);
        o.cfl = 0.8;
        assert!(init((&u0, &u1), 0.3, &o).is_err());
        let mut o = WaveOptions::new(0.05);
        o.grid_radius = Some(0.5);
        assert!(init((&u0, &u1), 0.3, &o).is_err());
        assert!(init((&u0, &u1), -0.1, &WaveOptions::new(0.05)).is_err());
        // max u₁¹ is just above 1
        assert!(init((&u0, &u1), 0.6, &WaveOptions::new(0.05)).is_err());
    }

    #[test]
    fn taylor_start_matches_runge_kutta_to_third_order() {
        let (u0, u1) = two_bumps();
        let eps = 0.3;
        let h = 0.05;
        let err = |cfl: f64| {
            let mut o = WaveOptions::new(h);
            o.cfl = cfl;
            let st = init((&u0, &u1), eps, &o).unwrap();
            let n = st.field().0.nrows();
            let x = |i: usize| st.coord(i);
            let p0 = Array2::from_shape_fn((n, n), |(i, j)| eps * u0.eval([x(i), x(j)]));
            let v0 = Array2::from_shape_fn((n, n), |(i, j)| eps * u1.eval([x(i), x(j)]));
            // semi-discrete system U' = V, V' = Δₕ U / (1 - V)
            let rhs = |p: &Array2<f64>, v: &Array2<f64>| {
                let mut a = Array2::zeros((n, n));
                for i in 1..n - 1 {
                    for j in 1..n - 1 {
                        a[[i, j]] = five_point(p, i, j) / (h * h) / (1.0 - v[[i, j]]);
                    }
                }
                (v.clone(), a)
            };
            let dt = cfl * h;
            let (k1p, k1v) = rhs(&p0, &v0);
            let (k2p, k2v) = rhs(&(&p0 + &(&k1p * (dt / 2.0))), &(&v0 + &(&k1v * (dt / 2.0))));
            let (k3p, k3v) = rhs(&(&p0 + &(&k2p * (dt / 2.0))), &(&v0 + &(&k2v * (dt / 2.0))));
            let (k4p, _) = rhs(&(&p0 + &(&k3p * dt)), &(&v0 + &(&k3v * dt)));
            let p1 = &p0 + &((&k1p + &(&k2p * 2.0) + &(&k3p * 2.0) + &k4p) * (dt / 6.0));
            (&p1 - st.field().0).iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let (e1, e2, e3) = (err(0.4), err(0.2), err(0.1));
        assert!(e1 > 0.0);
        for (a, b) in [(e1, e2), (e2, e3)] {
            let order = (a / b).log2();
            assert!((order - 3.0).abs() < 0.2, "order {order}");
        }
    }

    #[test]
    fn linear_energy_is_conserved() {
        let (u0, u1) = data("support_radius 1.5\nbump u0 0 0 1.5 1\nbump u1 0.3 0 1 0.5\n");
        let mut st = init((&u0, &u1), 0.0, &WaveOptions::new(0.2)).unwrap();
        let e0 = st.discrete_energy();
        assert!(e0 > 0.0);
        let mut worst: f64 = 0.0;
        while st.t() < 50.0 {
            st.step().unwrap();
            worst = worst.max((st.discrete_energy() - e0).abs() / e0);
        }
        assert!(worst < 1e-3, "relative drift {worst}");
    }

    #[test]
    fn radial_data_keep_the_grid_symmetry() {
        let (u0, u1) = data("support_radius 1\nbump u1 0 0 0.8 1\nbump u0 0 0 0.8 0.3\n");
        let mut st = init((&u0, &u1), 0.4, &WaveOptions::new(0.05)).unwrap();
        for _ in 0..60 {
            st.step().unwrap();
        }
        let (u, _) = st.field();
        let n = u.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = u[[i, j]];
                worst = worst.max((v - u[[j, i]]).abs()).max((v - u[[n - 1 - j, i]]).abs());
            }
        }
        assert!(worst < 1e-12, "asymmetry {worst}");
    }

    #[test]
    fn nothing_outside_the_cone() {
        // The 5-point leapfrog reaches one cell per step, twice the light speed at
        // cfl 1/2, so beyond that the field is exactly zero. Between the light cone
        // and there, numerical dispersion smears the front over a width that grows
        // like (t h²)^(1/3).
        let (u0, u1) = two_bumps();
        for eps in [0.0, 0.3] {
            let mut st = init((&u0, &u1), eps, &WaveOptions::new(0.05)).unwrap();
            for _ in 0..6 {
                st.step_until(st.t() + 0.7).unwrap();
                let (h, t) = (st.h(), st.t());
                let cone = st.cone_radius() + 2.0 * h + 6.0 * (t * h * h).cbrt();
                let reach = st.support() + (st.steps() as f64 + 1.0) * h;
                let (u, _) = st.field();
                let (mut smeared, mut beyond): (f64, f64) = (0.0, 0.0);
                for ((i, j), &v) in u.indexed_iter() {
                    let (x, y) = (st.coord(i), st.coord(j));
                    if x.hypot(y) > cone {
                        smeared = smeared.max(v.abs());
                    }
                    if x.abs().max(y.abs()) > reach {
                        beyond = beyond.max(v.abs());
                    }
                }
                assert!(smeared < 1e-14, "ε = {eps}, t = {t}: {smeared}");
                assert_eq!(beyond, 0.0);
            }
        }
    }

    #[test]
    fn second_order_self_convergence() {
        // wide data, so that h = 0.04 already resolves them
        let (u0, u1) = data(
            "support_radius 2\nbump u1 0 0 1.9 2\nbump u1 0.4 0.3 1.4 1\nbump u0 0.3 -0.2 1.5 0.3\n",
        );
        let run = |h: f64| {
            let mut st = init((&u0, &u1), 0.3, &WaveOptions::new(h)).unwrap();
            st.step_until(1.0).unwrap();
            assert_eq!(st.t(), 1.0);
            st
        };
        let (a, b, c) = (run(0.04), run(0.02), run(0.01));
        let order = (l2_diff(&a, &b) / l2_diff(&b, &c)).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let (u0, u1) = two_bumps();
        let mut st = init((&u0, &u1), 0.3, &WaveOptions::new(0.05)).unwrap();
        for _ in 0..20 {
            st.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("run");
        st.save_checkpoint(&base, "abc").unwrap();
        assert!(WaveState::load_checkpoint(&base, "abd").is_err());
        let mut back = WaveState::load_checkpoint(&base, "abc").unwrap();
        assert_eq!(back.history(), st.history());
        for _ in 0..10 {
            st.step().unwrap();
            back.step().unwrap();
        }
        assert_eq!(back.field().0, st.field().0);
        assert_eq!(back.t(), st.t());
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (u0, u1) = two_bumps();
        let opts = WaveOptions::new(0.08);
        let mut stop = StopRule::new(5.0, 1.0);
        let mut st = init((&u0, &u1), 0.3, &opts).unwrap();
        let whole = run_to_blowup(&mut st, &stop, Indicator::MaxUtt, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpointing {
            base: dir.path().join("run"),
            config_hash: "h".into(),
            every_steps: 7,
        };
        stop.t_max = 3.1;
        let mut st = init((&u0, &u1), 0.3, &opts).unwrap();
        run_to_blowup(&mut st, &stop, Indicator::MaxUtt, Some(&ckpt)).unwrap();
        stop.t_max = 5.0;
        let mut back = WaveState::load_checkpoint(&ckpt.base, "h").unwrap();
        let resumed = run_to_blowup(&mut back, &stop, Indicator::MaxUtt, Some(&ckpt)).unwrap();
        assert_eq!(resumed, whole);
    }

    #[test]
    fn linear_runs_decay_without_blowup() {
        let (u0, u1) = two_bumps();
        let mut st = init((&u0, &u1), 0.0, &WaveOptions::new(0.1)).unwrap();
        let out = run_to_blowup(&mut st, &StopRule::new(20.0, 1.0), Indicator::MaxUtt, None).unwrap();
        assert_eq!(out.stop, StopReason::TMax);
        assert!(!out.blowup_detected(), "{out:?}");
        let at = |t: f64| {
            let i = st.history().partition_point(|r| r.t < t);
            st.history()[i].max_utt
        };
        // dispersive decay, roughly t^(-1/2)
        assert!(at(19.0) < 0.75 * at(5.0));
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        let row = HistoryRow {
            t: 1.0,
            max_utt: 2.0,
            max_ut: 0.1,
            argmax: [0.5, -0.5],
            max_utt_weighted: 2.5,
        };
        write_history_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,max_utt,max_ut,argmax_x1,argmax_x2\n1,2,0.1,0.5,-0.5\n");
    }

    #[test]
    fn richardson_removes_second_order_error() {
        // T(h) = T + c h²
        assert!((richardson(3.0 + 4.0 * 0.01, 3.0 + 0.01) - 3.0).abs() < 1e-12);
    }
}
