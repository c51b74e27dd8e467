//! Geometric blowup: condition (H) on the characteristic map, the singular
//! reconstruction `u = ε r^(-1/2) G(r - t, ω, ε√t)`, and fits of the
//! `1/(T̄ - t)` rate of second derivatives.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::burgers::{invert_label, CharacteristicFan, GValue};
use crate::error::{Error, Result};
use crate::profile::{wrap_angle, ProfileField};

/// `φ` and the derivatives condition (H) reads, at one point `(s, ω, τ)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhiJet {
    pub phi: f64,
    pub phi_s: f64,
    pub phi_st: f64,
    pub phi_ss: f64,
    pub phi_sw: f64,
    pub phi_sss: f64,
    pub phi_ssw: f64,
    pub phi_sww: f64,
}

/// A map `φ(s, ω, τ)` with the derivatives of [`PhiJet`].
pub trait PhiSampler: Sync {
    fn jet(&self, s: f64, omega: f64, tau: f64) -> Option<PhiJet>;
}

/// `φ̄₀ = s - τ ∂σR1(s, ω)` read from a tabulated profile.
pub struct FanPhi<F: ProfileField> {
    pub field: F,
}

impl<F: ProfileField> PhiSampler for FanPhi<F> {
    fn jet(&self, s: f64, omega: f64, tau: f64) -> Option<PhiJet> {
        let p = self.field.sample(s, omega)?;
        Some(PhiJet {
            phi: s - tau * p.r_s,
            phi_s: 1.0 - tau * p.r_ss,
            phi_st: -p.r_ss,
            phi_ss: -tau * p.r_sss,
            phi_sw: -tau * p.r_ssw,
            phi_sss: -tau * p.r_ssss,
            phi_ssw: -tau * p.r_sssw,
            phi_sww: -tau * p.r_ssww,
        })
    }
}

/// `φ = s - τ(s - s³/3 - sω²)`, so `φ_s = 1 - τ(1 - s² - ω²)`: a cusp at
/// `(0, 0, 1)` with `φ_sτ = -1` and Hessian `diag(2, 2)`.
pub struct NormalForm;

impl PhiSampler for NormalForm {
    fn jet(&self, s: f64, w: f64, tau: f64) -> Option<PhiJet> {
        let q = 1.0 - s * s - w * w;
        Some(PhiJet {
            phi: s - tau * (s - s * s * s / 3.0 - s * w * w),
            phi_s: 1.0 - tau * q,
            phi_st: -q,
            phi_ss: 2.0 * tau * s,
            phi_sw: 2.0 * tau * w,
            phi_sss: 2.0 * tau,
            phi_ssw: 0.0,
            phi_sww: 2.0 * tau,
        })
    }
}

/// `φ = s`.
pub struct IdentityPhi;

impl PhiSampler for IdentityPhi {
    fn jet(&self, s: f64, _w: f64, _tau: f64) -> Option<PhiJet> {
        Some(PhiJet {
            phi: s,
            phi_s: 1.0,
            ..PhiJet::default()
        })
    }
}

/// Closed domain `{(s, ω, τ): s ∈ s_range, ω ∈ omega_range, 0 ≤ τ ≤ tau_top}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub s_range: [f64; 2],
    pub omega_range: [f64; 2],
    /// ω is an angle; the range is then the full circle.
    pub periodic: bool,
    pub tau_top: f64,
    pub n_s: usize,
    pub n_omega: usize,
    /// τ levels below the top scanned for negative `φ_s`.
    pub n_tau: usize,
}

impl DomainSpec {
    /// Domain of a characteristic fan: all labels, all angles.
    pub fn for_fan(fan: &CharacteristicFan, tau_top: f64) -> Self {
        let g = fan.grid();
        let (lo, hi) = g.sigma_range();
        Self {
            s_range: [lo, hi],
            omega_range: [0.0, std::f64::consts::TAU],
            periodic: true,
            tau_top,
            n_s: g.n_sigma(),
            n_omega: g.n_omega(),
            n_tau: 8,
        }
    }

    fn s_at(&self, i: usize) -> f64 {
        self.s_range[0] + (self.s_range[1] - self.s_range[0]) * i as f64 / (self.n_s - 1) as f64
    }

    fn w_at(&self, k: usize) -> f64 {
        let span = self.omega_range[1] - self.omega_range[0];
        if self.periodic {
            self.omega_range[0] + span * k as f64 / self.n_omega as f64
        } else {
            self.omega_range[0] + span * k as f64 / (self.n_omega - 1) as f64
        }
    }

    fn h(&self) -> [f64; 2] {
        let span = self.omega_range[1] - self.omega_range[0];
        let nw = if self.periodic { self.n_omega } else { self.n_omega - 1 };
        [(self.s_range[1] - self.s_range[0]) / (self.n_s - 1) as f64, span / nw as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HTolerances {
    /// `tol_zero = zero_rel · max|φ_s|`.
    pub zero_rel: f64,
    pub tol_grad: f64,
    /// `λ_min = lambda_rel · max|Hessian entry|`.
    pub lambda_rel: f64,
    pub newton_tol: f64,
}

impl Default for HTolerances {
    fn default() -> Self {
        Self {
            zero_rel: 1e-8,
            tol_grad: 1e-6,
            lambda_rel: 1e-4,
            newton_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Fold,
    Cusp,
    Degenerate,
}

/// The degenerate point of `Φ` on the top boundary and the five tests of (H).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuspReport {
    /// `M̃ = (s̃, ω̃, τ̃)`.
    pub point: [f64; 3],
    pub phi_s: f64,
    pub phi_st: f64,
    pub grad: [f64; 2],
    pub hessian: [[f64; 2]; 2],
    /// Ascending.
    pub eigenvalues: [f64; 2],
    /// Smallest `φ_s` over the scanned domain.
    pub min_phi_s: f64,
    pub tol_zero: f64,
    pub lambda_min: f64,
    pub holds_h: bool,
    pub classification: Classification,
    pub diagnostic: Option<String>,
}

fn sym_eigen(m: [[f64; 2]; 2]) -> [f64; 2] {
    let (a, b, d) = (m[0][0], m[0][1], m[1][1]);
    let mean = 0.5 * (a + d);
    let r = (0.5 * (a - d)).hypot(b);
    [mean - r, mean + r]
}

/// Locates the minimum of `φ_s` on `τ = τ_top`, refines it by Newton and tests (H).
pub fn check_h<P: PhiSampler + ?Sized>(phi: &P, dom: &DomainSpec, tol: &HTolerances) -> Result<CuspReport> {
    if dom.n_s < 3 || dom.n_omega < 3 || !(dom.tau_top > 0.0) {
        return Err(Error::InvalidArgument("domain needs n_s, n_ω ≥ 3 and τ_top > 0".into()));
    }
    let (ns, nw) = (dom.n_s, dom.n_omega);
    let jet = |s: f64, w: f64, tau: f64| -> Result<PhiJet> {
        phi.jet(s, w, tau)
            .ok_or_else(|| Error::InvalidArgument(format!("φ not defined at ({s}, {w}, {tau})")))
    };
    let top: Vec<f64> = (0..ns * nw)
        .into_par_iter()
        .map(|idx| jet(dom.s_at(idx / nw), dom.w_at(idx % nw), dom.tau_top).map(|j| j.phi_s))
        .collect::<Result<_>>()?;
    let at = |i: usize, k: usize| top[i * nw + k];
    let scale = top.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol_zero = tol.zero_rel * scale;

    // φ_s over the lower τ levels; the fan is affine in τ, other maps need not be
    let mut min_phi_s = top.iter().cloned().fold(f64::INFINITY, f64::min);
    for level in 1..dom.n_tau {
        let tau = dom.tau_top * level as f64 / dom.n_tau as f64;
        let m = (0..ns * nw)
            .into_par_iter()
            .map(|idx| jet(dom.s_at(idx / nw), dom.w_at(idx % nw), tau).map(|j| j.phi_s))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        min_phi_s = min_phi_s.min(m);
    }

    let mut minima: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..ns {
        for k in 0..nw {
            let v = at(i, k);
            let mut is_min = true;
            'nb: for di in -1isize..=1 {
                for dk in -1isize..=1 {
                    if di == 0 && dk == 0 {
                        continue;
                    }
                    let ii = i as isize + di;
                    let kk = k as isize + dk;
                    if ii < 0 || ii >= ns as isize {
                        continue;
                    }
                    let kk = if dom.periodic {
                        kk.rem_euclid(nw as isize)
                    } else if kk < 0 || kk >= nw as isize {
                        continue;
                    } else {
                        kk
                    };
                    if at(ii as usize, kk as usize) < v {
                        is_min = false;
                        break 'nb;
                    }
                }
            }
            if is_min {
                minima.push((v, i, k));
            }
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (_, i0, k0) = minima[0];

    // damped Newton on φ_s(·, ·, τ_top)
    let hcell = dom.h();
    let (mut s, mut w) = (dom.s_at(i0), dom.w_at(k0));
    let clamp_s = |s: f64| s.clamp(dom.s_range[0], dom.s_range[1]);
    let clamp_w = |w: f64| {
        if dom.periodic {
            wrap_angle(w)
        } else {
            w.clamp(dom.omega_range[0], dom.omega_range[1])
        }
    };
    let mut cur = jet(s, w, dom.tau_top)?;
    for _ in 0..200 {
        let (gs, gw) = (cur.phi_ss, cur.phi_sw);
        let (a, b, d) = (cur.phi_sss, cur.phi_ssw, cur.phi_sww);
        let det = a * d - b * b;
        let (mut ds, mut dw) = if a > 0.0 && det > 0.0 {
            (-(d * gs - b * gw) / det, -(-b * gs + a * gw) / det)
        } else {
            let n = (gs / hcell[0]).hypot(gw / hcell[1]).max(1e-300);
            (-gs / n, -gw / n)
        };
        ds = ds.clamp(-hcell[0], hcell[0]);
        dw = dw.clamp(-hcell[1], hcell[1]);
        let mut moved = false;
        for _ in 0..40 {
            let trial = jet(clamp_s(s + ds), clamp_w(w + dw), dom.tau_top)?;
            if trial.phi_s <= cur.phi_s + 1e-15 * cur.phi_s.abs() {
                s = clamp_s(s + ds);
                w = clamp_w(w + dw);
                cur = trial;
                moved = true;
                break;
            }
            ds *= 0.5;
            dw *= 0.5;
        }
        if !moved || (ds.abs() < tol.newton_tol && dw.abs() < tol.newton_tol) {
            break;
        }
    }
    min_phi_s = min_phi_s.min(cur.phi_s);

    let hessian = [[cur.phi_sss, cur.phi_ssw], [cur.phi_ssw, cur.phi_sww]];
    let eigenvalues = sym_eigen(hessian);
    let hscale = hessian.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let lambda_min = tol.lambda_rel * hscale;
    let grad = [cur.phi_ss, cur.phi_sw];
    let gnorm = grad[0].hypot(grad[1]);

    let zero_here = cur.phi_s.abs() <= tol_zero;
    let others_zero = minima.iter().skip(1).any(|&(v, i, k)| {
        v <= tol_zero && {
            // a second grid minimum away from the refined point
            let ds = (dom.s_at(i) - s).abs() / hcell[0];
            let dw = if dom.periodic {
                crate::profile::angle_diff(dom.w_at(k), w).abs()
            } else {
                (dom.w_at(k) - w).abs()
            } / hcell[1];
            ds > 2.0 || dw > 2.0
        }
    });
    let diagnostic = if others_zero {
        Some("non-unique degeneracy".to_string())
    } else if min_phi_s < -tol_zero {
        Some(format!("φ_s takes the negative value {min_phi_s:e} inside the domain"))
    } else if !zero_here {
        Some(format!("no singularity: min φ_s = {:e} on the top boundary", cur.phi_s))
    } else if !(cur.phi_st < 0.0) {
        Some(format!("φ_sτ = {:e} is not negative", cur.phi_st))
    } else if gnorm > tol.tol_grad {
        Some(format!("∇φ_s has norm {gnorm:e}"))
    } else if !(lambda_min > 0.0 && eigenvalues[0] >= lambda_min) {
        Some(format!("Hessian eigenvalues {eigenvalues:?} not above {lambda_min:e}"))
    } else {
        None
    };
    let holds_h = diagnostic.is_none();
    let classification = if holds_h {
        Classification::Cusp
    } else if zero_here && gnorm > tol.tol_grad && !others_zero {
        Classification::Fold
    } else {
        Classification::Degenerate
    };
    Ok(CuspReport {
        point: [s, w, dom.tau_top],
        phi_s: cur.phi_s,
        phi_st: cur.phi_st,
        grad,
        hessian,
        eigenvalues,
        min_phi_s,
        tol_zero,
        lambda_min,
        holds_h,
        classification,
        diagnostic,
    })
}

/// One reconstructed sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconSample {
    pub x: [f64; 2],
    pub t: f64,
    pub u: f64,
    pub ux: [f64; 2],
    pub ut: f64,
    /// Largest entry of the space-time Hessian; `+∞` at the cusp.
    pub hess_max: f64,
    pub status: SampleStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// Within the exclusion radius of the cusp at the blowup time.
    Cusp,
    /// `r < r_min`.
    TooClose,
    /// `t ≤ 0`, where `τ = ε√t` is not differentiable: only `u` and `∇ₓu` are set.
    InitialSlice,
    /// Label inversion failed (outside the fan, or past the shock time).
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconOptions {
    pub r_min: f64,
    /// In units of the fan's `h_σ`.
    pub exclusion_cells: f64,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            r_min: 1.0,
            exclusion_cells: 10.0,
        }
    }
}

/// Evaluates `u = ε r^(-1/2) G(r - t, ω, ε√t)` with its first derivatives and
/// the largest second derivative, by the chain rule through `(σ, ω, τ)`.
pub fn reconstruct_u(
    fan: &CharacteristicFan,
    eps: f64,
    points: &[([f64; 2], f64)],
    opts: &ReconOptions,
) -> Vec<ReconSample> {
    let field = fan.grid().field();
    let peak = fan.grid().d2.iter().cloned().fold(0.0f64, f64::max);
    let shock = fan.shock();
    let tau_star = shock.map(|s| s.tau).unwrap_or(if peak > 0.0 { 1.0 / peak } else { f64::INFINITY });
    let exclusion = opts.exclusion_cells * fan.grid().h_sigma;
    points
        .par_iter()
        .map(|&(x, t)| {
            let mut out = ReconSample {
                x,
                t,
                u: 0.0,
                ux: [0.0; 2],
                ut: 0.0,
                hess_max: 0.0,
                status: SampleStatus::Ok,
            };
            let r = x[0].hypot(x[1]);
            if r < opts.r_min {
                out.status = SampleStatus::TooClose;
                return out;
            }
            let (sigma, omega) = (r - t, wrap_angle(x[1].atan2(x[0])));
            let tau = eps * t.max(0.0).sqrt();
            if tau > tau_star {
                out.status = SampleStatus::Failed;
                return out;
            }
            let (_, top) = field.sigma_range();
            if sigma >= top {
                // beyond the support the labels are fixed points and G vanishes
                if field.sample(top, omega).is_some_and(|p| p.r == 0.0 && p.r_s == 0.0) {
                    return out;
                }
            }
            let Ok(label) = invert_label(&field, sigma, omega, tau) else {
                out.status = SampleStatus::Failed;
                return out;
            };
            let Some(p) = field.sample(label, omega) else {
                out.status = SampleStatus::Failed;
                return out;
            };
            let g = GValue::from_sample(label, tau, &p);
            if let Some(sh) = shock {
                let at_cusp = tau >= tau_star * (1.0 - 1e-12);
                let image = sh.s - tau * field.sample(sh.s, sh.omega).map(|q| q.r_s).unwrap_or(0.0);
                let d = (sigma - image).hypot(crate::profile::angle_diff(omega, sh.omega));
                if at_cusp && d < exclusion {
                    out.status = SampleStatus::Cusp;
                    out.hess_max = f64::INFINITY;
                }
            }
            fill_derivatives(&mut out, &g, eps, r, t);
            out
        })
        .collect()
}

/// Chain rule for `u = A(x) G(σ, ω, τ)` with `A = ε r^(-1/2)`, coordinates
/// `z = (x₁, x₂, t)`.
fn fill_derivatives(out: &mut ReconSample, g: &GValue, eps: f64, r: f64, t: f64) {
    let [x1, x2] = out.x;
    let (r2, r4) = (r * r, r * r * r * r);
    let a = eps / r.sqrt();
    let da = [-0.5 * a * x1 / r2, -0.5 * a * x2 / r2, 0.0];
    // ∂²A: ε(-½ r^(-5/2) δ + (5/4) r^(-9/2) x x)
    let a52 = eps * r.powf(-2.5);
    let a92 = eps * r.powf(-4.5);
    let mut dda = [[0.0; 3]; 3];
    for (i, xi) in [x1, x2].iter().enumerate() {
        for (j, xj) in [x1, x2].iter().enumerate() {
            dda[i][j] = -0.5 * a52 * if i == j { 1.0 } else { 0.0 } + 1.25 * a92 * xi * xj;
        }
    }
    out.u = a * g.g;
    let initial = t <= 0.0;
    let (tau_t, tau_tt) = if initial {
        (0.0, 0.0)
    } else {
        (0.5 * eps / t.sqrt(), -0.25 * eps / (t * t.sqrt()))
    };
    // rows: σ, ω, τ; columns: x₁, x₂, t
    let dy = [
        [x1 / r, x2 / r, -1.0],
        [-x2 / r2, x1 / r2, 0.0],
        [0.0, 0.0, tau_t],
    ];
    let mut ddy = [[[0.0; 3]; 3]; 3];
    ddy[0][0][0] = (1.0 - x1 * x1 / r2) / r;
    ddy[0][1][1] = (1.0 - x2 * x2 / r2) / r;
    ddy[0][0][1] = -x1 * x2 / (r2 * r);
    ddy[0][1][0] = ddy[0][0][1];
    ddy[1][0][0] = 2.0 * x1 * x2 / r4;
    ddy[1][1][1] = -2.0 * x1 * x2 / r4;
    ddy[1][0][1] = (x2 * x2 - x1 * x1) / r4;
    ddy[1][1][0] = ddy[1][0][1];
    ddy[2][2][2] = tau_tt;
    let gi = [g.g_s, g.g_w, g.g_t];
    let gij = [
        [g.g_ss, g.g_sw, g.g_st],
        [g.g_sw, g.g_ww, g.g_wt],
        [g.g_st, g.g_wt, g.g_tt],
    ];
    let mut du = [0.0; 3];
    for (c, d) in du.iter_mut().enumerate() {
        *d = da[c] * g.g + a * (0..3).map(|i| gi[i] * dy[i][c]).sum::<f64>();
    }
    out.ux = [du[0], du[1]];
    if initial {
        out.ut = f64::NAN;
        out.hess_max = f64::NAN;
        if out.status == SampleStatus::Ok {
            out.status = SampleStatus::InitialSlice;
        }
        return;
    }
    out.ut = du[2];
    if out.status == SampleStatus::Cusp {
        return;
    }
    let mut hmax: f64 = 0.0;
    for b in 0..3 {
        for c in b..3 {
            let mut v = dda[b][c] * g.g;
            for i in 0..3 {
                v += da[b] * gi[i] * dy[i][c] + da[c] * gi[i] * dy[i][b];
                v += a * gi[i] * ddy[i][b][c];
                for j in 0..3 {
                    v += a * gij[i][j] * dy[i][b] * dy[j][c];
                }
            }
            hmax = hmax.max(v.abs());
        }
    }
    out.hess_max = if g.phi_s > 0.0 { hmax } else { f64::INFINITY };
}

/// Samples of `max|∇²u|` along the image of the worst label `(s₀, ω₀)`, at
/// `t = T̄ - δ` for each `δ`, with `T̄ = (τ*/ε)²`. Since `φ_s = 1 - τ ∂²σR1` is
/// smallest at `(s₀, ω₀)` for every `τ`, this is where the Hessian grows fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuspApproach {
    pub t_bar: f64,
    pub samples: Vec<ReconSample>,
    pub fit: RateFit,
}

pub fn cusp_approach(
    fan: &CharacteristicFan,
    eps: f64,
    deltas: &[f64],
    opts: &ReconOptions,
) -> Result<CuspApproach> {
    let shock = fan
        .shock()
        .ok_or_else(|| Error::NdFailed("fan has no certified shock time".into()))?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("ε must be positive, got {eps}")));
    }
    let t_bar = (shock.tau / eps).powi(2);
    let field = fan.grid().field();
    let r_s = field
        .sample(shock.s, shock.omega)
        .ok_or_else(|| Error::Inversion("cusp label outside the profile grid".into()))?
        .r_s;
    let dir = crate::profile::unit(shock.omega);
    let points: Vec<([f64; 2], f64)> = deltas
        .iter()
        .filter(|&&d| d > 0.0 && d < t_bar)
        .map(|&d| {
            let t = t_bar - d;
            let r = t + shock.s - eps * t.sqrt() * r_s;
            ([r * dir[0], r * dir[1]], t)
        })
        .collect();
    let samples = reconstruct_u(fan, eps, &points, opts);
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.status == SampleStatus::Ok && s.hess_max.is_finite())
        .map(|s| (s.t, s.hess_max))
        .collect();
    let fit = rate_fit(&pts)?;
    Ok(CuspApproach { t_bar, samples, fit })
}

/// Writes `x1,x2,t,u,ux1,ux2,ut,hess_max` for every sample with a defined value.
pub fn write_samples_csv<W: Write>(samples: &[ReconSample], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x1,x2,t,u,ux1,ux2,ut,hess_max")?;
    for s in samples {
        if matches!(s.status, SampleStatus::TooClose | SampleStatus::Failed) {
            continue;
        }
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.x[0], s.x[1], s.t, s.u, s.ux[0], s.ux[1], s.ut, s.hess_max
        )?;
    }
    Ok(())
}

/// Result of fitting `y = C (T̄ - t)^slope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub t_bar: f64,
    pub c: f64,
    pub slope: f64,
    /// RMS of the residuals of `log y`.
    pub residual: f64,
    pub n: usize,
    pub residual_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFitOptions {
    pub min_samples: usize,
    /// Largest acceptable RMS log-residual.
    pub max_residual: f64,
}

impl Default for RateFitOptions {
    fn default() -> Self {
        Self {
            min_samples: 8,
            max_residual: 0.05,
        }
    }
}

pub fn rate_fit(samples: &[(f64, f64)]) -> Result<RateFit> {
    rate_fit_with(samples, &RateFitOptions::default())
}

/// Least squares of `log y` against `log(T̄ - t)`: the line is solved exactly for
/// each trial `T̄`, `T̄` is found by a log-spaced scan plus golden-section search,
/// and all three parameters are then polished by Levenberg–Marquardt.
pub fn rate_fit_with(samples: &[(f64, f64)], opts: &RateFitOptions) -> Result<RateFit> {
    let n = samples.len();
    if n < opts.min_samples.max(3) {
        return Err(Error::RateFit(format!(
            "need at least {} samples, got {n}",
            opts.min_samples.max(3)
        )));
    }
    for w in samples.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::RateFit("times are not strictly increasing".into()));
        }
        if !(w[1].1 > w[0].1) {
            return Err(Error::RateFit("values are not increasing".into()));
        }
    }
    if samples.iter().any(|&(t, y)| !(y > 0.0) || !t.is_finite() || !y.is_finite()) {
        return Err(Error::RateFit("values must be positive and finite".into()));
    }
    let t_last = samples[n - 1].0;
    let span = t_last - samples[0].0;
    let logy: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let cost = |lg: f64| line_fit(samples, &logy, t_last + lg.exp()).2;

    let (lo, hi, steps) = ((span * 1e-7).ln(), (span * 1e4).ln(), 400);
    let at = |i: usize| lo + (hi - lo) * i as f64 / steps as f64;
    let best = (0..=steps)
        .map(|i| (i, cost(at(i))))
        .fold((0, f64::INFINITY), |b, (i, c)| if c < b.1 { (i, c) } else { b })
        .0;
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(steps)));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    for _ in 0..200 {
        if (b - a).abs() < 1e-14 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = cost(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = cost(x2);
        }
    }
    let t_bar0 = t_last + (0.5 * (a + b)).exp();
    let (c0, s0, _) = line_fit(samples, &logy, t_bar0);
    let (c, slope, t_bar) = polish(samples, &logy, [c0, s0, t_bar0]);
    let rss = line_fit(samples, &logy, t_bar).2;
    let residual = (rss / n as f64).sqrt();
    Ok(RateFit {
        t_bar,
        c: c.exp(),
        slope,
        residual,
        n,
        residual_ok: residual <= opts.max_residual,
    })
}

/// Intercept, slope and residual sum of squares of `log y ~ log(T̄ - t)`.
fn line_fit(samples: &[(f64, f64)], logy: &[f64], t_bar: f64) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| (t_bar - s.0).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = logy.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(logy) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let rss = xs
        .iter()
        .zip(logy)
        .map(|(x, y)| {
            let r = icpt + slope * x - y;
            r * r
        })
        .sum();
    (icpt, slope, rss)
}

/// Levenberg–Marquardt on `(log C, slope, T̄)`; keeps `T̄` above the last sample.
fn polish(samples: &[(f64, f64)], logy: &[f64], start: [f64; 3]) -> (f64, f64, f64) {
    let t_last = samples.last().unwrap().0;
    let rss = |p: &[f64; 3]| -> f64 {
        samples
            .iter()
            .zip(logy)
            .map(|(s, y)| {
                let r = p[0] + p[1] * (p[2] - s.0).ln() - y;
                r * r
            })
            .sum()
    };
    let mut p = start;
    let mut cur = rss(&p);
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (s, y) in samples.iter().zip(logy) {
            let d = p[2] - s.0;
            let r = p[0] + p[1] * d.ln() - y;
            let j = [1.0, d.ln(), p[1] / d];
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] *= 1.0 + lambda;
            }
            let Some(dp) = solve3(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] - dp[0], p[1] - dp[1], p[2] - dp[2]];
            if trial[2] > t_last {
                let c = rss(&trial);
                if c < cur {
                    let rel = (cur - c) / cur.max(f64::MIN_POSITIVE);
                    p = trial;
                    cur = c;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = rel > 1e-15;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (p[0], p[1], p[2])
}

fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = r[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::burgers::build_fan;
    use crate::profile::{check_nd, NdOptions, ProfileGrid};

    fn square(n: usize, tau_top: f64) -> DomainSpec {
        DomainSpec {
            s_range: [-1.0, 1.0],
            omega_range: [-1.0, 1.0],
            periodic: false,
            tau_top,
            n_s: n,
            n_omega: n,
            n_tau: 4,
        }
    }

    #[test]
    fn normal_form_cusp() {
        let rep = check_h(&NormalForm, &square(41, 1.0), &HTolerances::default()).unwrap();
        assert_eq!(rep.point, [0.0, 0.0, 1.0]);
        assert_eq!(rep.phi_s, 0.0);
        assert_eq!(rep.phi_st, -1.0);
        assert_eq!(rep.hessian, [[2.0, 0.0], [0.0, 2.0]]);
        assert!(rep.holds_h, "{rep:?}");
        assert_eq!(rep.classification, Classification::Cusp);
    }

    #[test]
    fn normal_form_below_the_top_has_no_singularity() {
        let rep = check_h(&NormalForm, &square(41, 0.9), &HTolerances::default()).unwrap();
        assert!(!rep.holds_h);
        assert!((rep.phi_s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn identity_map_is_not_singular() {
        let rep = check_h(&IdentityPhi, &square(11, 1.0), &HTolerances::default()).unwrap();
        assert!(!rep.holds_h);
        assert_eq!(rep.classification, Classification::Degenerate);
        assert!(rep.diagnostic.unwrap().starts_with("no singularity"));
    }

    /// `φ_s = 1 - τ q(s, ω)` for a caller-supplied `q` with derivatives.
    struct FromQ<F: Fn(f64, f64) -> [f64; 6] + Sync>(F);

    impl<F: Fn(f64, f64) -> [f64; 6] + Sync> PhiSampler for FromQ<F> {
        fn jet(&self, s: f64, w: f64, tau: f64) -> Option<PhiJet> {
            // q, q_s, q_w, q_ss, q_sw, q_ww
            let q = (self.0)(s, w);
            Some(PhiJet {
                phi: 0.0,
                phi_s: 1.0 - tau * q[0],
                phi_st: -q[0],
                phi_ss: -tau * q[1],
                phi_sw: -tau * q[2],
                phi_sss: -tau * q[3],
                phi_ssw: -tau * q[4],
                phi_sww: -tau * q[5],
            })
        }
    }

    #[test]
    fn twin_minima_are_flagged() {
        // q = 1 - 16(s² - 1/4)² - ω² peaks at s = ±1/2
        let twin = FromQ(|s: f64, w: f64| {
            let a = s * s - 0.25;
            [
                1.0 - 16.0 * a * a - w * w,
                -64.0 * s * a,
                -2.0 * w,
                -64.0 * (3.0 * s * s - 0.25),
                0.0,
                -2.0,
            ]
        });
        let rep = check_h(&twin, &square(41, 1.0), &HTolerances::default()).unwrap();
        assert!(!rep.holds_h);
        assert_eq!(rep.diagnostic.as_deref(), Some("non-unique degeneracy"));
    }

    #[test]
    fn boundary_zero_with_slope_is_a_fold() {
        let tilted = FromQ(|s: f64, w: f64| [0.5 + 0.5 * s - 0.1 * w * w, 0.5, -0.2 * w, 0.0, 0.0, -0.2]);
        let rep = check_h(&tilted, &square(21, 1.0), &HTolerances::default()).unwrap();
        assert_eq!(rep.point[0], 1.0);
        assert!(rep.phi_s.abs() < 1e-14);
        assert_eq!(rep.classification, Classification::Fold);
    }

    /// `R1 = -a cos σ` with `a = 1 + 0.3 cos ω`: `∂²σR1 = a cos σ` peaks at `(0, 0)`.
    fn wavy() -> ProfileGrid {
        let mut g = ProfileGrid::from_fn(-3.0, 3.0, 301, 128, |s, w| {
            let a = 1.0 + 0.3 * w.cos();
            [-a * s.cos(), a * s.sin(), a * s.cos(), -a * s.sin()]
        });
        g.nd = Some(check_nd(&g, &NdOptions::default()));
        g
    }

    #[test]
    fn fan_cusp_sits_at_the_profile_peak() {
        let g = wavy();
        let nd = g.nd.clone().unwrap();
        let fan = build_fan(&g, 1.0, 3).unwrap();
        let tau0 = nd.tau0.unwrap();
        let rep = check_h(&FanPhi { field: g.field() }, &DomainSpec::for_fan(&fan, tau0), &HTolerances::default())
            .unwrap();
        assert!(rep.holds_h, "{rep:?}");
        assert!((rep.point[0] - nd.sigma0).abs() < 1e-8);
        assert!(crate::profile::angle_diff(rep.point[1], 0.0).abs() < 1e-8);
        // Hessian of φ_s is -τ̄₀ times that of ∂²σR1
        let want = sym_eigen([
            [-tau0 * nd.hessian[0][0], -tau0 * nd.hessian[0][1]],
            [-tau0 * nd.hessian[1][0], -tau0 * nd.hessian[1][1]],
        ]);
        for k in 0..2 {
            assert!((rep.eigenvalues[k] - want[k]).abs() < 1e-9 * want[k].abs());
        }
    }

    #[test]
    fn hessian_blows_up_at_unit_rate() {
        let g = wavy();
        let fan = build_fan(&g, 1.0, 3).unwrap();
        let eps = 0.3;
        let t_bar = (g.nd.as_ref().unwrap().tau0.unwrap() / eps).powi(2);
        let deltas: Vec<f64> = (0..24).map(|k| t_bar * 10f64.powf(-1.0 - 4.0 * k as f64 / 23.0)).collect();
        let out = cusp_approach(&fan, eps, &deltas, &ReconOptions::default()).unwrap();
        assert_eq!(out.t_bar, t_bar);
        assert!((out.fit.slope + 1.0).abs() < 0.05, "{:?}", out.fit);
        assert!((out.fit.t_bar - t_bar).abs() < 1e-3 * t_bar, "{:?}", out.fit);
    }

    #[test]
    fn zero_profile_reconstructs_zero() {
        let mut g = ProfileGrid::from_fn(-2.0, 1.0, 31, 16, |_, _| [0.0; 4]);
        g.nd = Some(check_nd(&g, &NdOptions::default()));
        let fan = build_fan(&g, 1.0, 2).unwrap();
        let pts: Vec<([f64; 2], f64)> = (0..20).map(|i| ([2.0 + 0.1 * i as f64, 0.5], 2.0)).collect();
        for s in reconstruct_u(&fan, 0.3, &pts, &ReconOptions::default()) {
            assert_eq!(s.status, SampleStatus::Ok);
            assert_eq!((s.u, s.ux, s.ut, s.hess_max), (0.0, [0.0, 0.0], 0.0, 0.0));
        }
    }

    #[test]
    fn initial_slice_matches_the_chain_rule() {
        let g = wavy();
        let fan = build_fan(&g, 0.5, 2).unwrap();
        let f = g.field();
        let eps = 0.3;
        let pts = [([1.7, 0.4], 0.0), ([-0.9, 1.6], 0.0), ([0.2, -2.5], 0.0)];
        for s in reconstruct_u(&fan, eps, &pts, &ReconOptions::default()) {
            assert_eq!(s.status, SampleStatus::InitialSlice);
            let [x1, x2] = s.x;
            let r = x1.hypot(x2);
            let p = f.sample(r, x2.atan2(x1)).unwrap();
            assert!((s.u - eps * p.r / r.sqrt()).abs() < 1e-12);
            let want = [
                eps * (-0.5 * r.powf(-2.5) * x1 * p.r + r.powf(-0.5) * (p.r_s * x1 / r - p.r_w * x2 / (r * r))),
                eps * (-0.5 * r.powf(-2.5) * x2 * p.r + r.powf(-0.5) * (p.r_s * x2 / r + p.r_w * x1 / (r * r))),
            ];
            for k in 0..2 {
                assert!((s.ux[k] - want[k]).abs() < 1e-8, "{:?} vs {want:?}", s.ux);
            }
        }
    }

    #[test]
    fn derivatives_match_differences_of_u() {
        let g = wavy();
        let fan = build_fan(&g, 0.5, 2).unwrap();
        let (eps, d) = (0.2, 1e-4);
        let base = ([2.1, 1.3], 1.5);
        let mut pts = vec![base];
        for k in 0..3 {
            for sgn in [1.0, -1.0] {
                let mut p = base;
                if k < 2 {
                    p.0[k] += sgn * d;
                } else {
                    p.1 += sgn * d;
                }
                pts.push(p);
            }
        }
        let s = reconstruct_u(&fan, eps, &pts, &ReconOptions::default());
        let fd = |k: usize| (s[1 + 2 * k].u - s[2 + 2 * k].u) / (2.0 * d);
        assert!((s[0].ux[0] - fd(0)).abs() < 1e-7);
        assert!((s[0].ux[1] - fd(1)).abs() < 1e-7);
        assert!((s[0].ut - fd(2)).abs() < 1e-7);
        // second derivatives from the first
        let hmax = (0..3)
            .map(|k| {
                let du = |q: &ReconSample| [q.ux[0], q.ux[1], q.ut];
                let (p, m) = (du(&s[1 + 2 * k]), du(&s[2 + 2 * k]));
                (0..3).map(|c| ((p[c] - m[c]) / (2.0 * d)).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!((s[0].hess_max - hmax).abs() < 1e-6 * hmax, "{} vs {hmax}", s[0].hess_max);
    }

    #[test]
    fn close_points_are_rejected() {
        let g = wavy();
        let fan = build_fan(&g, 0.5, 2).unwrap();
        let s = reconstruct_u(&fan, 0.2, &[([0.1, 0.2], 1.0)], &ReconOptions::default());
        assert_eq!(s[0].status, SampleStatus::TooClose);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_samples() -> Vec<(f64, f64)> {
        (0..20).map(|i| 4.0 + 0.049 * i as f64).map(|t| (t, 3.0 / (5.0 - t))).collect()
    }

    #[test]
    fn exact_model_is_recovered() {
        let f = rate_fit(&exact_samples()).unwrap();
        assert!((f.t_bar - 5.0).abs() < 1e-9, "{f:?}");
        assert!((f.c - 3.0).abs() < 1e-8, "{f:?}");
        assert!((f.slope + 1.0).abs() < 1e-9, "{f:?}");
        assert!(f.residual < 1e-10 && f.residual_ok);
    }

    #[test]
    fn one_percent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut s = exact_samples();
            for p in &mut s {
                p.1 *= 1.0 + 0.01 * rng.gen_range(-1.0..1.0);
            }
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            // noise can break monotonicity only between near-equal values; these are far apart
            let f = rate_fit(&s).unwrap();
            assert!((f.t_bar - 5.0).abs() < 0.05, "{f:?}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = exact_samples();
        assert!(rate_fit(&s[..7]).is_err());
        s[5].1 = s[4].1;
        assert!(rate_fit(&s).is_err());
        let mut s = exact_samples();
        s[3].0 = s[2].0;
        assert!(rate_fit(&s).is_err());
    }

    #[test]
    fn poor_model_is_flagged() {
        // a jump by a factor of 50 halfway through is no power law
        let s: Vec<(f64, f64)> = (0..20)
            .map(|i| (i as f64, if i < 10 { 1.0 + i as f64 } else { 50.0 * (1.0 + i as f64) }))
            .collect();
        let f = rate_fit(&s).unwrap();
        assert!(!f.residual_ok, "{f:?}");
    }
}
