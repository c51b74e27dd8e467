//! The ε = 0 slow-time reduction `∂τG = ½(∂σG)²`, `G(·, ·, 0) = R1`, solved by
//! characteristics.
//!
//! Characteristics are the straight lines `σ = φ(s, ω, τ) = s - τ ∂σR1(s, ω)` along
//! which `∂σG = ṽ(s, ω) = ∂σR1(s, ω)` is constant, and
//! `G̃(s, ω, τ) = R1(s, ω) - (τ/2) ṽ²` is `G` pulled back to the labels. Everything
//! here is closed form in τ; there is no time stepping.

use std::io::Write;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{NdReport, ProfileField, ProfileGrid, ProfileSample};

/// Closed-form characteristic data on the profile grid at a set of slow times.
///
/// 3-D arrays are indexed `[τ index, label index, ω index]`.
#[derive(Debug, Clone)]
pub struct CharacteristicFan {
    grid: ProfileGrid,
    pub taus: Vec<f64>,
    pub phi: Array3<f64>,
    pub phi_s: Array3<f64>,
    pub g_tilde: Array3<f64>,
    /// `ṽ = ∂σR1` at the labels; constant in τ.
    pub v: Array2<f64>,
    shock: Option<ShockTime>,
}

/// Blowup time of the reduced problem and the label/angle where it happens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockTime {
    pub tau: f64,
    pub s: f64,
    pub omega: f64,
}

/// Tabulates the fan at `n_tau` evenly spaced slow times in `[0, tau_max]`.
pub fn build_fan(p: &ProfileGrid, tau_max: f64, n_tau: usize) -> Result<CharacteristicFan> {
    if !(tau_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau_max must be positive, got {tau_max}"
        )));
    }
    let n_tau = n_tau.max(2);
    let taus: Vec<f64> = (0..n_tau)
        .map(|j| tau_max * j as f64 / (n_tau - 1) as f64)
        .collect();
    let (ns, nw) = p.d1.dim();
    let shape = (n_tau, ns, nw);
    let phi = Array3::from_shape_fn(shape, |(j, i, k)| p.sigma[i] - taus[j] * p.d1[[i, k]]);
    let phi_s = Array3::from_shape_fn(shape, |(j, i, k)| 1.0 - taus[j] * p.d2[[i, k]]);
    let g_tilde = Array3::from_shape_fn(shape, |(j, i, k)| {
        p.r1[[i, k]] - 0.5 * taus[j] * p.d1[[i, k]] * p.d1[[i, k]]
    });
    let shock = p.nd.as_ref().and_then(|nd| shock_time(nd).ok());
    Ok(CharacteristicFan {
        grid: p.clone(),
        taus,
        phi,
        phi_s,
        g_tilde,
        v: p.d1.clone(),
        shock,
    })
}

impl CharacteristicFan {
    pub fn grid(&self) -> &ProfileGrid {
        &self.grid
    }

    pub fn shock(&self) -> Option<ShockTime> {
        self.shock
    }

    /// `∂ₛG̃` at every node from the closed form `∂σR1 - τ ṽ ∂²σR1`.
    pub fn dg_tilde_ds(&self) -> Array3<f64> {
        let p = &self.grid;
        Array3::from_shape_fn(self.phi.dim(), |(j, i, k)| {
            p.d1[[i, k]] - self.taus[j] * self.v[[i, k]] * p.d2[[i, k]]
        })
    }

    /// `G` and its derivatives at `(σ, ω, τ)`, `τ` below the shock time.
    pub fn eval_g(&self, sigma: f64, omega: f64, tau: f64) -> Result<GValue> {
        let shock = self.shock.ok_or_else(|| {
            Error::NdFailed("fan has no certified shock time; (ND) did not hold".into())
        })?;
        eval_g(&self.grid.field(), sigma, omega, tau, shock.tau)
    }

    /// Writes `tau,s,omega,phi,g_tilde,phi_s` rows at the tabulated slow times nearest
    /// to each requested value.
    pub fn write_slices_csv<W: Write>(&self, mut w: W, taus: &[f64]) -> std::io::Result<()> {
        writeln!(w, "tau,s,omega,phi,g_tilde,phi_s")?;
        for &want in taus {
            let j = self
                .taus
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - want).abs().total_cmp(&(b.1 - want).abs()))
                .map(|(j, _)| j)
                .unwrap_or(0);
            for (i, s) in self.grid.sigma.iter().enumerate() {
                for (k, om) in self.grid.omega.iter().enumerate() {
                    writeln!(
                        w,
                        "{},{s},{om},{},{},{}",
                        self.taus[j],
                        self.phi[[j, i, k]],
                        self.g_tilde[[j, i, k]],
                        self.phi_s[[j, i, k]]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// `τ* = 1/max ∂²σR1` at the refined argmax, taken from the (ND) report.
pub fn shock_time(nd: &NdReport) -> Result<ShockTime> {
    if !nd.holds {
        return Err(Error::NdFailed(
            nd.diagnostic
                .clone()
                .unwrap_or_else(|| "nondegeneracy not satisfied".into()),
        ));
    }
    let tau = nd
        .tau0
        .ok_or_else(|| Error::NdFailed("peak not positive".into()))?;
    Ok(ShockTime {
        tau,
        s: nd.sigma0,
        omega: nd.omega0,
    })
}

/// `G` at a point of the smooth region, with every first and second derivative in
/// `(σ, ω, τ)`. Singular quantities are expressed through `1/φ_s` at the label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GValue {
    /// Label `s` with `φ(s, ω, τ) = σ`.
    pub label: f64,
    pub phi_s: f64,
    pub g: f64,
    pub g_s: f64,
    pub g_w: f64,
    pub g_t: f64,
    pub g_ss: f64,
    pub g_sw: f64,
    pub g_ww: f64,
    pub g_st: f64,
    pub g_wt: f64,
    pub g_tt: f64,
}

impl GValue {
    pub(crate) fn from_sample(label: f64, tau: f64, p: &ProfileSample) -> Self {
        let phi_s = 1.0 - tau * p.r_ss;
        let inv = 1.0 / phi_s;
        Self {
            label,
            phi_s,
            g: p.r - 0.5 * tau * p.r_s * p.r_s,
            g_s: p.r_s,
            g_w: p.r_w,
            g_t: 0.5 * p.r_s * p.r_s,
            g_ss: p.r_ss * inv,
            g_sw: p.r_sw * inv,
            g_ww: p.r_ww + tau * p.r_sw * p.r_sw * inv,
            g_st: p.r_s * p.r_ss * inv,
            g_wt: p.r_s * p.r_sw * inv,
            g_tt: p.r_s * p.r_s * p.r_ss * inv,
        }
    }
}

/// Inverts `φ(·, ω, τ) = σ` by bracketed Newton and evaluates `G` there.
pub fn eval_g<F: ProfileField + ?Sized>(
    field: &F,
    sigma: f64,
    omega: f64,
    tau: f64,
    tau_star: f64,
) -> Result<GValue> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("slow time {tau} is negative")));
    }
    if tau >= tau_star {
        return Err(Error::Inversion(format!(
            "τ = {tau} is not below the shock time {tau_star}; φ is not invertible"
        )));
    }
    let label = invert_label(field, sigma, omega, tau)?;
    let p = field
        .sample(label, omega)
        .ok_or_else(|| Error::Inversion(format!("label {label} outside the profile range")))?;
    Ok(GValue::from_sample(label, tau, &p))
}

const LABEL_TOL: f64 = 1e-12;

/// Solves `s - τ ∂σR1(s, ω) = σ` for `s`.
pub fn invert_label<F: ProfileField + ?Sized>(
    field: &F,
    sigma: f64,
    omega: f64,
    tau: f64,
) -> Result<f64> {
    let (lo, hi) = field.sigma_range();
    let resid = |s: f64| -> Result<(f64, f64)> {
        let p = field
            .sample(s, omega)
            .ok_or_else(|| Error::Inversion(format!("label {s} outside the profile range")))?;
        Ok((s - tau * p.r_s - sigma, 1.0 - tau * p.r_ss))
    };
    let (f_lo, _) = resid(lo)?;
    let (f_hi, _) = resid(hi)?;
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::Inversion(format!(
            "σ = {sigma} outside the image [{}, {}] of the label range",
            f_lo + sigma,
            f_hi + sigma
        )));
    }
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    let (mut a, mut b) = (lo, hi);
    let mut s = sigma.clamp(lo, hi);
    for _ in 0..200 {
        let (f, df) = resid(s)?;
        if f == 0.0 {
            return Ok(s);
        }
        if f < 0.0 {
            a = s;
        } else {
            b = s;
        }
        let newton = s - f / df;
        let next = if df > 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - s).abs() <= LABEL_TOL * (1.0 + s.abs()) || (b - a) <= LABEL_TOL {
            return Ok(next);
        }
        s = next;
    }
    Err(Error::Inversion(format!(
        "no convergence for σ = {sigma}, ω = {omega}, τ = {tau}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{angle_diff, check_nd, NdOptions};

    /// `R1 = A cos(σ) (1 + b cos ω)` sampled on a grid.
    fn wavy_grid() -> ProfileGrid {
        let mut g = ProfileGrid::from_fn(-3.0, 3.0, 241, 64, |s, w| {
            let a = 1.0 + 0.3 * w.cos();
            [-a * s.cos(), a * s.sin(), a * s.cos(), -a * s.sin()]
        });
        g.nd = Some(check_nd(&g, &NdOptions::default()));
        g
    }

    #[test]
    fn zero_profile_gives_identity_fan() {
        let mut g = ProfileGrid::from_fn(-1.0, 1.0, 21, 16, |_, _| [0.0; 4]);
        g.nd = Some(check_nd(&g, &NdOptions::default()));
        let fan = build_fan(&g, 2.0, 5).unwrap();
        for ((j, i, k), v) in fan.phi.indexed_iter() {
            let _ = (j, k);
            assert_eq!(*v, g.sigma[i]);
        }
        assert!(fan.g_tilde.iter().all(|v| *v == 0.0));
        assert!(fan.shock().is_none());
        // G ≡ 0 when R1 ≡ 0
        let val = eval_g(&g.field(), 0.3, 1.0, 0.7, f64::INFINITY).unwrap();
        assert_eq!(val.g, 0.0);
        assert_eq!(val.g_s, 0.0);
    }

    #[test]
    fn linear_profiles() {
        // ∂σR1 = -s: no shock; ∂σR1 = s: φ_s vanishes at τ = 1
        let falling = ProfileGrid::from_fn(-1.0, 1.0, 21, 16, |s, _| [-0.5 * s * s, -s, -1.0, 0.0]);
        let fan = build_fan(&falling, 3.0, 4).unwrap();
        for ((j, i, k), v) in fan.phi.indexed_iter() {
            let _ = k;
            assert!((v - falling.sigma[i] * (1.0 + fan.taus[j])).abs() < 1e-15);
        }
        let rising = ProfileGrid::from_fn(-1.0, 1.0, 21, 16, |s, _| [0.5 * s * s, s, 1.0, 0.0]);
        let fan = build_fan(&rising, 1.0, 3).unwrap();
        assert!(fan.phi_s.index_axis(ndarray::Axis(0), 2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = wavy_grid();
        assert!(build_fan(&g, 0.0, 4).is_err());
        let fan = build_fan(&g, 0.5, 4).unwrap();
        let st = fan.shock().unwrap();
        assert!(fan.eval_g(0.0, 0.0, st.tau).is_err());
        assert!(fan.eval_g(0.0, 0.0, st.tau * 1.5).is_err());
        assert!(fan.eval_g(50.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn shock_time_follows_nd() {
        let g = wavy_grid();
        let st = shock_time(g.nd.as_ref().unwrap()).unwrap();
        // max of a cos σ (1 + 0.3 cos ω) is 1.3 at σ = 0, ω = 0
        assert!((st.tau - 1.0 / 1.3).abs() < 1e-6, "{}", st.tau);
        assert!(st.s.abs() < 1e-4);
        assert!(angle_diff(st.omega, 0.0).abs() < 1e-4);
        let mut bad = g.nd.clone().unwrap();
        bad.holds = false;
        bad.diagnostic = Some("non-unique maximum".into());
        assert!(matches!(shock_time(&bad), Err(Error::NdFailed(m)) if m == "non-unique maximum"));
    }

    #[test]
    fn identity_at_tau_zero() {
        let g = wavy_grid();
        let f = g.field();
        for (s, w) in [(0.3, 0.2), (-1.1, 2.0), (2.0, 4.0)] {
            let val = eval_g(&f, s, w, 0.0, 1.0).unwrap();
            let p = f.sample(s, w).unwrap();
            assert!((val.label - s).abs() < 1e-12);
            assert!((val.g - p.r).abs() < 1e-12);
            assert!((val.g_s - p.r_s).abs() < 1e-12);
        }
    }

    #[test]
    fn dg_tilde_equals_phi_s_times_v() {
        let g = wavy_grid();
        let fan = build_fan(&g, 0.7, 8).unwrap();
        let lhs = fan.dg_tilde_ds();
        for ((j, i, k), l) in lhs.indexed_iter() {
            let r = fan.phi_s[[j, i, k]] * fan.v[[i, k]];
            assert!((l - r).abs() <= 1e-12, "{l} vs {r}");
        }
    }

    #[test]
    fn characteristic_transport() {
        // ∂τG̃ along a characteristic is -½ṽ²
        let g = wavy_grid();
        let fan = build_fan(&g, 0.7, 8).unwrap();
        let dt = fan.taus[1] - fan.taus[0];
        for ((j, i, k), v) in fan.g_tilde.indexed_iter() {
            if j + 1 == fan.taus.len() {
                continue;
            }
            let rate = (fan.g_tilde[[j + 1, i, k]] - v) / dt;
            let want = -0.5 * fan.v[[i, k]].powi(2);
            assert!((rate - want).abs() < 1e-12);
        }
    }
}
