//! Radon transform of the data and the first radiation profile.
//!
//! The profile is the Abel-weighted integral
//!
//! ```text
//! R1(σ, ω) = 1/(2√2 π) ∫_{s ≥ σ} (s - σ)^(-1/2) [R(s, ω, u₁¹) - ∂ₛR(s, ω, u₁⁰)] ds
//! ```
//!
//! The constant is the one for which the linear solution behaves like
//! `R1(r - t, ω)/√r` as `r → ∞` (stationary phase in the Poisson formula).
//!
//! evaluated after the substitution `s = σ + q²`, which turns the kernel into
//! `2 dq` and leaves a C^∞ integrand. Derivatives in σ move onto the Radon data,
//! and Radon derivatives are line integrals of directional derivatives of the
//! (analytic) data, so nothing up to `∂³_σ R1` is differenced.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initial_data::{Atom, SmoothField};
use crate::quadrature::CompositeRule;
use crate::radial::RadonTable;

/// Highest `∂ₛᵏ` available from [`radon`].
pub const MAX_RADON_ORDER: usize = 4;

pub const ABEL_PREFACTOR: f64 = 0.112_539_539_519_638_26; // 1/(2√2 π)

pub fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let w = angle.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Wraps an angle difference into `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

fn default_line_rule() -> CompositeRule {
    CompositeRule::new(32, 12)
}

/// `∂ₛᵏ R(s, ω, v)`, `k ≤ 4`, with the default chord quadrature.
pub fn radon(v: &SmoothField, s: f64, omega: [f64; 2], deriv_order: usize) -> Result<f64> {
    if deriv_order > MAX_RADON_ORDER {
        return Err(Error::DerivativeOrder(deriv_order));
    }
    let norm = omega[0].hypot(omega[1]);
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::NonUnitDirection(norm));
    }
    Ok(radon_series(v, s, omega, &default_line_rule())[deriv_order])
}

/// `[R, ∂ₛR, …, ∂ₛ⁴R]` at `(s, ω)`.
pub fn radon_series(v: &SmoothField, s: f64, omega: [f64; 2], rule: &CompositeRule) -> [f64; 5] {
    let mut out = [0.0; 5];
    for atom in v.atoms() {
        let a = atom_radon(atom, s, omega, rule);
        for (o, x) in out.iter_mut().zip(a) {
            *o += x;
        }
    }
    out
}

/// Line integral of `(ω·∇)ᵏ atom` over `{x·ω = s}`, k = 0..4.
fn atom_radon(atom: &Atom, s: f64, omega: [f64; 2], rule: &CompositeRule) -> [f64; 5] {
    let d = s - (atom.center[0] * omega[0] + atom.center[1] * omega[1]);
    let ext = atom.extent();
    if d.abs() >= ext || atom.amplitude == 0.0 {
        return [0.0; 5];
    }
    // chord parameter t = w u; the integrand only sees |x - c|², so it is even in u
    let w = ((ext - d) * (ext + d)).sqrt();
    let inv_r2 = 1.0 / (atom.radius * atom.radius);
    let d2 = d * d;
    let raw = rule.integrate_n::<5, _>(0.0, 1.0, |u| {
        let t = w * u;
        atom.directional_series((d2 + t * t) * inv_r2, d)
    });
    let mut out = [0.0; 5];
    let mut fact = 1.0;
    for (k, (o, r)) in out.iter_mut().zip(raw).enumerate() {
        if k > 0 {
            fact *= k as f64;
        }
        *o = 2.0 * w * fact * r;
    }
    out
}

/// Interval of `s` on which one piece of the Radon data can be nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub id: usize,
}

/// Radon-side data fed to the Abel integral: the bracket
/// `R(s, ω, u₁¹) - ∂ₛR(s, ω, u₁⁰)` and its first four s-derivatives,
/// split into pieces of known support.
pub trait BracketSource: Sync {
    /// Every segment ends at or below this value.
    fn support_top(&self) -> f64;
    fn segments(&self, omega: [f64; 2], out: &mut Vec<Segment>);
    /// `[B, ∂ₛB, …, ∂⁴ₛB]` of segment `id` at `s`.
    fn bracket(&self, id: usize, s: f64, omega: [f64; 2]) -> [f64; 5];
}

/// The bracket built from the two data fields, read off the tabulated
/// Radon transforms of the unit atoms.
#[derive(Debug, Clone)]
pub struct DataBracket {
    atoms: Vec<(Atom, bool)>,
    top: f64,
}

impl DataBracket {
    pub fn new(u10: &SmoothField, u11: &SmoothField) -> Self {
        let mut atoms = Vec::new();
        atoms.extend(u11.atoms().iter().map(|a| (*a, true)));
        atoms.extend(u10.atoms().iter().map(|a| (*a, false)));
        atoms.retain(|(a, _)| a.amplitude != 0.0);
        Self {
            atoms,
            top: u10.support_radius().max(u11.support_radius()),
        }
    }
}

impl BracketSource for DataBracket {
    fn support_top(&self) -> f64 {
        self.top
    }

    fn segments(&self, omega: [f64; 2], out: &mut Vec<Segment>) {
        out.clear();
        for (id, (a, _)) in self.atoms.iter().enumerate() {
            let c = a.center[0] * omega[0] + a.center[1] * omega[1];
            out.push(Segment {
                lo: c - a.extent(),
                hi: c + a.extent(),
                id,
            });
        }
    }

    fn bracket(&self, id: usize, s: f64, omega: [f64; 2]) -> [f64; 5] {
        let (atom, velocity) = &self.atoms[id];
        let table = RadonTable::get(atom.shape);
        let rho = atom.radius;
        let y = (s - (atom.center[0] * omega[0] + atom.center[1] * omega[1])) / rho;
        let mut out;
        let mut scale;
        if *velocity {
            out = table.eval::<5>(0, y);
            scale = atom.amplitude * rho;
        } else {
            out = table.eval::<5>(1, y);
            scale = -atom.amplitude;
        }
        for o in out.iter_mut() {
            *o *= scale;
            scale /= rho;
        }
        out
    }
}

/// Fractions of a segment at which the Abel integral is split. Derivatives of
/// flat bumps concentrate near the ends, so the pieces are graded there.
const GRADED_BREAKS: [f64; 15] = [
    0.0, 0.005, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.65, 0.8, 0.9, 0.95, 0.98, 0.995, 1.0,
];

/// Abel integral of the bracket and of its first four s-derivatives:
/// `[R1, ∂σR1, …, ∂⁴σR1]` at `(σ, ω)`. `rule` is applied on every graded piece.
pub fn abel_derivs<B: BracketSource + ?Sized>(
    src: &B,
    sigma: f64,
    omega: [f64; 2],
    rule: &CompositeRule,
    scratch: &mut Vec<Segment>,
) -> [f64; 5] {
    src.segments(omega, scratch);
    let mut out = [0.0; 5];
    for seg in scratch.iter() {
        if sigma >= seg.hi {
            continue;
        }
        let len = seg.hi - seg.lo;
        let mut q_prev = (seg.lo - sigma).max(0.0).sqrt();
        for f in &GRADED_BREAKS[1..] {
            let s_break = seg.lo + f * len;
            if s_break <= sigma {
                continue;
            }
            let q_next = (s_break - sigma).sqrt();
            let part = rule.integrate_n::<5, _>(q_prev, q_next, |q| {
                src.bracket(seg.id, sigma + q * q, omega)
            });
            for (o, p) in out.iter_mut().zip(part) {
                *o += 2.0 * ABEL_PREFACTOR * p;
            }
            q_prev = q_next;
        }
    }
    out
}

/// Quadrature and grid settings for the first profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Depth of the strip below the light cone: the σ grid starts at `-c0`.
    pub c0: f64,
    /// Top of the σ grid; must reach the support radius.
    pub sigma_top: f64,
    pub h_sigma: f64,
    pub n_omega: usize,
    /// Panels per graded piece of each Abel integral.
    pub abel_panels: usize,
    pub abel_order: usize,
    /// Largest tolerated change under panel doubling, relative to max |∂²σR1|.
    pub quad_tol: f64,
    pub nd: NdOptions,
}

impl ProfileOptions {
    /// `C₀ = 2M`, σ grid up to `M`.
    pub fn for_support(m: f64) -> Self {
        Self {
            c0: 2.0 * m,
            sigma_top: m,
            h_sigma: 0.02 * m,
            n_omega: 128,
            abel_panels: 2,
            abel_order: 12,
            quad_tol: 1e-8,
            nd: NdOptions::default(),
        }
    }

    pub fn abel_rule(&self) -> CompositeRule {
        CompositeRule::new(self.abel_panels, self.abel_order)
    }
}

/// Pointwise evaluator of the first profile (no grid).
pub struct Profile<B: BracketSource> {
    src: B,
    rule: CompositeRule,
}

impl<B: BracketSource> Profile<B> {
    pub fn new(src: B, rule: CompositeRule) -> Self {
        Self { src, rule }
    }

    pub fn source(&self) -> &B {
        &self.src
    }

    /// `[R1, ∂σR1, …, ∂⁴σR1]` at `(σ, angle)`.
    pub fn sigma_derivs(&self, sigma: f64, angle: f64) -> [f64; 5] {
        let mut scratch = Vec::new();
        abel_derivs(&self.src, sigma, unit(angle), &self.rule, &mut scratch)
    }
}

impl Profile<DataBracket> {
    pub fn from_data(u10: &SmoothField, u11: &SmoothField, opts: &ProfileOptions) -> Self {
        Self::new(DataBracket::new(u10, u11), opts.abel_rule())
    }
}

/// Tabulated first profile with its σ- and ω-derivatives.
///
/// Arrays are indexed `[σ index, ω index]`; the ω grid is `2πk/n_ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileGrid {
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
    pub h_sigma: f64,
    pub h_omega: f64,
    pub r1: Array2<f64>,
    pub d1: Array2<f64>,
    pub d2: Array2<f64>,
    pub d3: Array2<f64>,
    pub d4: Array2<f64>,
    /// ω-derivatives (`_w`) and second ω-derivatives (`_ww`) of the arrays above.
    pub r1_w: Array2<f64>,
    pub d1_w: Array2<f64>,
    pub d2_w: Array2<f64>,
    pub d3_w: Array2<f64>,
    pub d4_w: Array2<f64>,
    pub r1_ww: Array2<f64>,
    pub d1_ww: Array2<f64>,
    pub d2_ww: Array2<f64>,
    pub d3_ww: Array2<f64>,
    pub d4_ww: Array2<f64>,
    /// Set by [`first_profile`]; synthetic grids leave it empty until checked.
    pub nd: Option<NdReport>,
}

impl ProfileGrid {
    /// Builds a grid from `[R1, ∂σR1, ∂²σR1, ∂³σR1]` samples; `∂⁴σ` is a finite
    /// difference of `∂³σR1`.
    pub fn from_fn<F>(sigma_lo: f64, sigma_hi: f64, n_sigma: usize, n_omega: usize, f: F) -> Self
    where
        F: Fn(f64, f64) -> [f64; 4] + Sync,
    {
        let mut g = Self::from_derivs(sigma_lo, sigma_hi, n_sigma, n_omega, |s, w| {
            let [a, b, c, d] = f(s, w);
            [a, b, c, d, 0.0]
        });
        g.d4 = diff_sigma(&g.d3, g.h_sigma);
        [g.d4_w, g.d4_ww] = spectral_omega(&g.d4);
        g
    }

    /// Builds a grid from `[R1, ∂σR1, …, ∂⁴σR1]` samples; ω-derivatives are spectral.
    pub fn from_derivs<F>(sigma_lo: f64, sigma_hi: f64, n_sigma: usize, n_omega: usize, f: F) -> Self
    where
        F: Fn(f64, f64) -> [f64; 5] + Sync,
    {
        assert!(n_sigma >= 5 && n_omega >= 5);
        let h_sigma = (sigma_hi - sigma_lo) / (n_sigma - 1) as f64;
        let h_omega = 2.0 * PI / n_omega as f64;
        let sigma: Vec<f64> = (0..n_sigma)
            .map(|i| if i + 1 == n_sigma { sigma_hi } else { sigma_lo + i as f64 * h_sigma })
            .collect();
        let omega: Vec<f64> = (0..n_omega).map(|k| k as f64 * h_omega).collect();
        let nodes: Vec<[f64; 5]> = (0..n_sigma * n_omega)
            .into_par_iter()
            .map(|idx| f(sigma[idx / n_omega], omega[idx % n_omega]))
            .collect();
        let take = |c: usize| {
            Array2::from_shape_fn((n_sigma, n_omega), |(i, k)| nodes[i * n_omega + k][c])
        };
        let (r1, d1, d2, d3, d4) = (take(0), take(1), take(2), take(3), take(4));
        let [r1_w, r1_ww] = spectral_omega(&r1);
        let [d1_w, d1_ww] = spectral_omega(&d1);
        let [d2_w, d2_ww] = spectral_omega(&d2);
        let [d3_w, d3_ww] = spectral_omega(&d3);
        let [d4_w, d4_ww] = spectral_omega(&d4);
        Self {
            r1_w,
            d1_w,
            d2_w,
            d3_w,
            d4_w,
            r1_ww,
            d1_ww,
            d2_ww,
            d3_ww,
            d4_ww,
            sigma,
            omega,
            h_sigma,
            h_omega,
            r1,
            d1,
            d2,
            d3,
            d4,
            nd: None,
        }
    }

    pub fn n_sigma(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_omega(&self) -> usize {
        self.omega.len()
    }

    pub fn sigma_range(&self) -> (f64, f64) {
        (self.sigma[0], *self.sigma.last().unwrap())
    }

    /// Continuous extension by biquintic Hermite interpolation.
    pub fn field(&self) -> GridField<'_> {
        GridField { grid: self }
    }

    /// Writes one CSV row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sigma,omega,R1,dR1,d2R1,d3R1,d4R1,dw_d2R1,dww_d2R1")?;
        for (i, s) in self.sigma.iter().enumerate() {
            for (k, om) in self.omega.iter().enumerate() {
                writeln!(
                    w,
                    "{s},{om},{},{},{},{},{},{},{}",
                    self.r1[[i, k]],
                    self.d1[[i, k]],
                    self.d2[[i, k]],
                    self.d3[[i, k]],
                    self.d4[[i, k]],
                    self.d2_w[[i, k]],
                    self.d2_ww[[i, k]]
                )?;
            }
        }
        Ok(())
    }
}

/// Fourth-order differences along σ (second order in the two edge rows).
fn diff_sigma(a: &Array2<f64>, h: f64) -> Array2<f64> {
    let (n, m) = a.dim();
    Array2::from_shape_fn((n, m), |(i, k)| {
        if i >= 2 && i + 2 < n {
            (a[[i - 2, k]] - 8.0 * a[[i - 1, k]] + 8.0 * a[[i + 1, k]] - a[[i + 2, k]]) / (12.0 * h)
        } else if i == 0 {
            (-3.0 * a[[0, k]] + 4.0 * a[[1, k]] - a[[2, k]]) / (2.0 * h)
        } else if i + 1 == n {
            (3.0 * a[[i, k]] - 4.0 * a[[i - 1, k]] + a[[i - 2, k]]) / (2.0 * h)
        } else {
            (a[[i + 1, k]] - a[[i - 1, k]]) / (2.0 * h)
        }
    })
}

/// First and second derivatives along the periodic ω axis by FFT.
fn spectral_omega(a: &Array2<f64>) -> [Array2<f64>; 2] {
    let (n, m) = a.dim();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut d1 = Array2::zeros((n, m));
    let mut d2 = Array2::zeros((n, m));
    let mut spec = vec![Complex::default(); m];
    let mut work = vec![Complex::default(); m];
    for i in 0..n {
        for (c, v) in spec.iter_mut().zip(a.row(i)) {
            *c = Complex::new(*v, 0.0);
        }
        fwd.process(&mut spec);
        for (order, out) in [(1, &mut d1), (2, &mut d2)] {
            for (j, (w, c)) in work.iter_mut().zip(&spec).enumerate() {
                let k = if 2 * j <= m { j as f64 } else { j as f64 - m as f64 };
                *w = if order == 1 {
                    // the Nyquist mode has no odd derivative
                    if 2 * j == m { Complex::default() } else { *c * Complex::new(0.0, k) }
                } else {
                    *c * -(k * k)
                };
            }
            inv.process(&mut work);
            for (o, w) in out.row_mut(i).iter_mut().zip(&work) {
                *o = w.re / m as f64;
            }
        }
    }
    [d1, d2]
}

/// Value and derivatives up to second order of a function of `(σ, ω)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Local2 {
    pub v: f64,
    pub s: f64,
    pub w: f64,
    pub ss: f64,
    pub sw: f64,
    pub ww: f64,
}

/// Quintic Hermite basis on `[0, 1]` and its first two derivatives, ordered
/// value, slope and curvature at 0, then at 1.
fn quintic(t: f64) -> [[f64; 6]; 3] {
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    [
        [
            1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
            t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
            0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
            10.0 * t3 - 15.0 * t4 + 6.0 * t5,
            -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
            0.5 * t3 - t4 + 0.5 * t5,
        ],
        [
            -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
            1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
            t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4,
            30.0 * t2 - 60.0 * t3 + 30.0 * t4,
            -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
            1.5 * t2 - 4.0 * t3 + 2.5 * t4,
        ],
        [
            -60.0 * t + 180.0 * t2 - 120.0 * t3,
            -36.0 * t + 96.0 * t2 - 60.0 * t3,
            1.0 - 9.0 * t + 18.0 * t2 - 10.0 * t3,
            60.0 * t - 180.0 * t2 + 120.0 * t3,
            -24.0 * t + 84.0 * t2 - 60.0 * t3,
            3.0 * t - 12.0 * t2 + 10.0 * t3,
        ],
    ]
}

/// Nodal data of one tabulated function: entry `[a][b]` holds `∂σᵃ∂ωᵇ f`.
pub type NodalData<'a> = [[&'a Array2<f64>; 3]; 3];

/// Borrowed biquintic Hermite view of a [`ProfileGrid`].
#[derive(Debug, Clone, Copy)]
pub struct GridField<'a> {
    grid: &'a ProfileGrid,
}

impl GridField<'_> {
    fn locate(&self, sigma: f64, omega: f64) -> Option<(usize, f64, usize, usize, f64)> {
        let g = self.grid;
        let (lo, hi) = g.sigma_range();
        let slack = 1e-12 * g.h_sigma;
        if !(sigma >= lo - slack && sigma <= hi + slack) {
            return None;
        }
        let n = g.n_sigma();
        let i = (((sigma - lo) / g.h_sigma).floor() as isize).clamp(0, n as isize - 2) as usize;
        let a = (sigma - g.sigma[i]) / (g.sigma[i + 1] - g.sigma[i]);
        let m = g.n_omega();
        let x = wrap_angle(omega) / g.h_omega;
        let k = (x.floor() as usize).min(m - 1);
        let b = x - k as f64;
        Some((i, a, k, (k + 1) % m, b))
    }

    /// Interpolates a function from its nodal data.
    pub fn interp(&self, f: NodalData<'_>, sigma: f64, omega: f64) -> Option<Local2> {
        let (i, a, k0, k1, b) = self.locate(sigma, omega)?;
        let g = self.grid;
        let hs = g.sigma[i + 1] - g.sigma[i];
        let hw = g.h_omega;
        let ha = quintic(a);
        let hb = quintic(b);
        let mut out = Local2::default();
        for (ci, ii) in [(0usize, i), (1, i + 1)] {
            for (cj, kk) in [(0usize, k0), (1, k1)] {
                for (da, row) in f.iter().enumerate() {
                    for (db, arr) in row.iter().enumerate() {
                        let c = arr[[ii, kk]] * hs.powi(da as i32) * hw.powi(db as i32);
                        let (ai, bi) = (3 * ci + da, 3 * cj + db);
                        out.v += c * ha[0][ai] * hb[0][bi];
                        out.s += c * ha[1][ai] * hb[0][bi] / hs;
                        out.w += c * ha[0][ai] * hb[1][bi] / hw;
                        out.ss += c * ha[2][ai] * hb[0][bi] / (hs * hs);
                        out.sw += c * ha[1][ai] * hb[1][bi] / (hs * hw);
                        out.ww += c * ha[0][ai] * hb[2][bi] / (hw * hw);
                    }
                }
            }
        }
        Some(out)
    }

    /// `∂²σR1` with its derivatives up to second order.
    pub fn d2(&self, sigma: f64, omega: f64) -> Option<Local2> {
        let g = self.grid;
        self.interp(
            [[&g.d2, &g.d2_w, &g.d2_ww], [&g.d3, &g.d3_w, &g.d3_ww], [&g.d4, &g.d4_w, &g.d4_ww]],
            sigma,
            omega,
        )
    }
}

/// The profile and the derivatives the downstream constructions consume, at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProfileSample {
    pub r: f64,
    pub r_s: f64,
    pub r_ss: f64,
    pub r_sss: f64,
    pub r_ssss: f64,
    pub r_w: f64,
    pub r_sw: f64,
    pub r_ww: f64,
    pub r_ssw: f64,
    pub r_sssw: f64,
    pub r_ssww: f64,
}

/// A first profile defined for all `(σ, ω)` in a σ-range (ω periodic).
pub trait ProfileField: Sync {
    fn sample(&self, sigma: f64, omega: f64) -> Option<ProfileSample>;
    fn sigma_range(&self) -> (f64, f64);
}

impl ProfileField for GridField<'_> {
    fn sample(&self, sigma: f64, omega: f64) -> Option<ProfileSample> {
        let g = self.grid;
        let r = self.interp(
            [[&g.r1, &g.r1_w, &g.r1_ww], [&g.d1, &g.d1_w, &g.d1_ww], [&g.d2, &g.d2_w, &g.d2_ww]],
            sigma,
            omega,
        )?;
        let v = self.interp(
            [[&g.d1, &g.d1_w, &g.d1_ww], [&g.d2, &g.d2_w, &g.d2_ww], [&g.d3, &g.d3_w, &g.d3_ww]],
            sigma,
            omega,
        )?;
        let c = self.d2(sigma, omega)?;
        Some(ProfileSample {
            r: r.v,
            r_s: v.v,
            r_ss: c.v,
            r_sss: c.s,
            r_ssss: c.ss,
            r_w: r.w,
            r_sw: v.w,
            r_ww: r.ww,
            r_ssw: c.w,
            r_sssw: c.sw,
            r_ssww: c.ww,
        })
    }

    fn sigma_range(&self) -> (f64, f64) {
        self.grid.sigma_range()
    }
}

/// Tabulates the first profile of `(u₁⁰, u₁¹)` and runs the (ND) check.
pub fn first_profile(
    u10: &SmoothField,
    u11: &SmoothField,
    opts: &ProfileOptions,
) -> Result<ProfileGrid> {
    let m = u10.support_radius().max(u11.support_radius());
    if opts.sigma_top < m {
        return Err(Error::InvalidArgument(format!(
            "σ grid ends at {} below the support radius {m}",
            opts.sigma_top
        )));
    }
    if !(opts.c0 > 0.0 && opts.h_sigma > 0.0) || opts.n_omega < 8 {
        return Err(Error::InvalidArgument(
            "profile grid needs c0 > 0, h_sigma > 0 and n_omega ≥ 8".into(),
        ));
    }
    let n_sigma = ((opts.sigma_top + opts.c0) / opts.h_sigma).round() as usize + 1;
    if n_sigma < 5 {
        return Err(Error::InvalidArgument("σ grid has fewer than 5 nodes".into()));
    }
    let profile = Profile::from_data(u10, u11, opts);
    let mut grid = ProfileGrid::from_derivs(-opts.c0, opts.sigma_top, n_sigma, opts.n_omega, |s, w| {
        profile.sigma_derivs(s, w)
    });
    check_quadrature(&profile, &grid, opts)?;
    grid.nd = Some(check_nd(&grid, &opts.nd));
    Ok(grid)
}

/// Recomputes a spread of nodes with doubled Abel panels.
fn check_quadrature(
    profile: &Profile<DataBracket>,
    grid: &ProfileGrid,
    opts: &ProfileOptions,
) -> Result<()> {
    let scale = grid.d2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(());
    }
    let fine = Profile::new(profile.source().clone(), profile.rule.refined());
    let (ns, nw) = (grid.n_sigma(), grid.n_omega());
    let (imax, kmax) = argmax(&grid.d2);
    let mut probes = vec![(imax, kmax)];
    for a in 1..4 {
        for b in 0..4 {
            probes.push((a * (ns - 1) / 4, b * nw / 4));
        }
    }
    let worst = probes
        .par_iter()
        .map(|&(i, k)| {
            let fine_v = fine.sigma_derivs(grid.sigma[i], grid.omega[k]);
            let coarse = [grid.r1[[i, k]], grid.d1[[i, k]], grid.d2[[i, k]], grid.d3[[i, k]], grid.d4[[i, k]]];
            fine_v
                .iter()
                .zip(coarse)
                .map(|(f, c)| (f - c).abs())
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    if worst > opts.quad_tol * scale {
        return Err(Error::QuadratureNotConverged {
            what: "first profile".into(),
            diff: worst,
            tol: opts.quad_tol * scale,
        });
    }
    Ok(())
}

fn argmax(a: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut bv = f64::NEG_INFINITY;
    for ((i, k), v) in a.indexed_iter() {
        if *v > bv {
            bv = *v;
            best = (i, k);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdOptions {
    /// Second-largest local maximum must sit below `peak·(1 - margin_rel)`.
    pub margin_rel: f64,
    pub newton_tol: f64,
    pub max_newton_iter: usize,
}

impl Default for NdOptions {
    fn default() -> Self {
        Self {
            margin_rel: 1e-4,
            newton_tol: 1e-10,
            max_newton_iter: 100,
        }
    }
}

/// Outcome of the nondegeneracy check on `∂²σR1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdReport {
    pub holds: bool,
    pub sigma0: f64,
    pub omega0: f64,
    /// `∂²σR1(σ₀, ω₀)`.
    pub peak: f64,
    /// `1/peak`, absent when the peak is not positive.
    pub tau0: Option<f64>,
    /// Hessian of `∂²σR1` in `(σ, ω)` at the refined peak.
    pub hessian: [[f64; 2]; 2],
    /// Refined value of the next distinct local maximum, if one is close enough to compete.
    pub runner_up: Option<f64>,
    pub diagnostic: Option<String>,
}

/// Global maximum of `∂²σR1`: grid scan, then damped Newton on the Hermite interpolant.
pub fn check_nd(grid: &ProfileGrid, opts: &NdOptions) -> NdReport {
    let d2 = &grid.d2;
    let (ns, nw) = d2.dim();

    let mut maxima: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..ns {
        for k in 0..nw {
            let v = d2[[i, k]];
            let mut is_max = true;
            'nb: for di in -1isize..=1 {
                let ii = i as isize + di;
                if ii < 0 || ii >= ns as isize {
                    continue;
                }
                for dk in -1isize..=1 {
                    if di == 0 && dk == 0 {
                        continue;
                    }
                    let kk = (k as isize + dk).rem_euclid(nw as isize) as usize;
                    if d2[[ii as usize, kk]] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                maxima.push((v, i, k));
            }
        }
    }
    maxima.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let grid_peak = maxima[0].0;

    // Every grid maximum that could be the global one after refinement is refined;
    // mirror-image maxima off the grid differ at the nodes by O(h²) but tie after.
    let floor = grid_peak - CANDIDATE_BAND * grid_peak.abs();
    let mut refined: Vec<(f64, f64, Local2)> = Vec::new();
    for &(v, i, k) in maxima.iter().take_while(|m| m.0 >= floor).take(MAX_CANDIDATES) {
        let (s, w, cur) = refine_max(grid, grid.sigma[i], grid.omega[k], opts);
        let cur = if cur.v >= v { cur } else { Local2 { v, ..cur } };
        let same = refined.iter().any(|&(s2, w2, _)| {
            (s - s2).abs() < 2.0 * grid.h_sigma && angle_diff(w, w2).abs() < 2.0 * grid.h_omega
        });
        if !same {
            refined.push((s, w, cur));
        }
    }
    refined.sort_by(|a, b| b.2.v.total_cmp(&a.2.v));
    let (s, w, cur) = refined[0];
    let peak = cur.v;
    let hessian = [[cur.ss, cur.sw], [cur.sw, cur.ww]];
    let tau0 = (peak > 0.0).then(|| 1.0 / peak);
    let mut diagnostic = None;
    if !(peak > 0.0) {
        diagnostic = Some("peak not positive".to_string());
    } else if refined.len() > 1 && refined[1].2.v >= peak - opts.margin_rel * peak.abs() {
        diagnostic = Some("non-unique maximum".to_string());
    } else if !(hessian[0][0] < 0.0 && hessian[0][0] * hessian[1][1] - hessian[0][1].powi(2) > 0.0)
    {
        diagnostic = Some("maximum not quadratic (Hessian not negative definite)".to_string());
    }
    NdReport {
        holds: diagnostic.is_none(),
        sigma0: s,
        omega0: w,
        peak,
        tau0,
        hessian,
        runner_up: refined.get(1).map(|r| r.2.v),
        diagnostic,
    }
}

/// Grid maxima within this fraction of the largest one are refined.
const CANDIDATE_BAND: f64 = 0.05;
const MAX_CANDIDATES: usize = 64;

/// Damped Newton ascent on the Hermite interpolant of `∂²σR1` from a grid node.
fn refine_max(grid: &ProfileGrid, s0: f64, w0: f64, opts: &NdOptions) -> (f64, f64, Local2) {
    let field = grid.field();
    let (lo, hi) = grid.sigma_range();
    let eval = |s: f64, w: f64| field.d2(s, w).expect("point inside grid");
    let (mut s, mut w) = (s0, w0);
    let mut cur = eval(s, w);
    for _ in 0..opts.max_newton_iter {
        let det = cur.ss * cur.ww - cur.sw * cur.sw;
        let (mut ds, mut dw) = if cur.ss < 0.0 && det > 0.0 {
            (
                -(cur.ww * cur.s - cur.sw * cur.w) / det,
                -(-cur.sw * cur.s + cur.ss * cur.w) / det,
            )
        } else {
            // ascent direction, scaled to one cell
            let n = (cur.s / grid.h_sigma).hypot(cur.w / grid.h_omega).max(1e-300);
            (cur.s / n, cur.w / n)
        };
        ds = ds.clamp(-grid.h_sigma, grid.h_sigma);
        dw = dw.clamp(-grid.h_omega, grid.h_omega);
        let mut accepted = false;
        for _ in 0..40 {
            let ns_ = (s + ds).clamp(lo, hi);
            let trial = eval(ns_, w + dw);
            if trial.v >= cur.v - 1e-15 * cur.v.abs() {
                s = ns_;
                w = wrap_angle(w + dw);
                cur = trial;
                accepted = true;
                break;
            }
            ds *= 0.5;
            dw *= 0.5;
        }
        if !accepted || (ds.abs() < opts.newton_tol && dw.abs() < opts.newton_tol) {
            break;
        }
    }
    (s, w, cur)
}
