//! Radon transforms of the unit atoms, tabulated once.
//!
//! Every atom is radial, so its Radon transform depends on `s` and `ω` only
//! through `y = (s - c·ω)/ρ`:
//!
//! ```text
//! ∂ₛᵏ R(s, ω, atom) = A ρ^(1-k) βₖ(y),   βₖ(y) = ∫ ∂ᵏ_y b(y² + t²) dt.
//! ```
//!
//! The table holds `β₀ … β₇` on a uniform grid and interpolates `βₖ`, `k ≤ 5`,
//! with quintic Hermite pieces built from `βₖ, βₖ₊₁, βₖ₊₂`.

use std::sync::OnceLock;

use crate::initial_data::{Atom, AtomShape};
use crate::quadrature::CompositeRule;

/// Highest order [`RadonTable::eval`] accepts.
pub const TABLE_MAX_ORDER: usize = 5;

const COLS: usize = TABLE_MAX_ORDER + 3;
const HALF_NODES: usize = 4096;

#[derive(Debug)]
pub struct RadonTable {
    /// `β` vanishes for `|y| ≥ reach`.
    reach: f64,
    h: f64,
    /// Row `i` holds `β₀..β₇` at `y = i h`, `i = 0..=HALF_NODES`.
    rows: Vec<[f64; COLS]>,
}

impl RadonTable {
    fn build(shape: AtomShape) -> Self {
        let unit = Atom {
            center: [0.0, 0.0],
            radius: 1.0,
            amplitude: 1.0,
            shape,
        };
        let reach = unit.extent();
        let h = reach / HALF_NODES as f64;
        let rule = CompositeRule::new(32, 16);
        let mut fact = [1.0; COLS];
        for k in 1..COLS {
            fact[k] = fact[k - 1] * k as f64;
        }
        let rows = (0..=HALF_NODES)
            .map(|i| {
                let y = i as f64 * h;
                let w2 = (reach - y) * (reach + y);
                if w2 <= 0.0 {
                    return [0.0; COLS];
                }
                let w = w2.sqrt();
                let raw = rule.integrate_n::<COLS, _>(0.0, 1.0, |u| {
                    let t = w * u;
                    unit.directional_series::<COLS>(y * y + t * t, y)
                });
                let mut out = [0.0; COLS];
                for k in 0..COLS {
                    out[k] = 2.0 * w * fact[k] * raw[k];
                }
                out
            })
            .collect();
        Self { reach, h, rows }
    }

    pub fn get(shape: AtomShape) -> &'static RadonTable {
        static BUMP: OnceLock<RadonTable> = OnceLock::new();
        static GAUSS: OnceLock<RadonTable> = OnceLock::new();
        match shape {
            AtomShape::Bump => BUMP.get_or_init(|| Self::build(shape)),
            AtomShape::Gaussian => GAUSS.get_or_init(|| Self::build(shape)),
        }
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    /// `[β_{k0}, …, β_{k0+N-1}](y)`; requires `k0 + N - 1 ≤ 5`.
    pub fn eval<const N: usize>(&self, k0: usize, y: f64) -> [f64; N] {
        debug_assert!(k0 + N - 1 <= TABLE_MAX_ORDER);
        let mut out = [0.0; N];
        let ay = y.abs();
        if ay >= self.reach {
            return out;
        }
        let x = ay / self.h;
        let i = (x as usize).min(HALF_NODES - 1);
        let t = x - i as f64;
        let (a, b) = (&self.rows[i], &self.rows[i + 1]);
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h2 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
        let g0 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
        let g1 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let g2 = 0.5 * (t3 - 2.0 * t4 + t5);
        let (h, hh) = (self.h, self.h * self.h);
        for (j, o) in out.iter_mut().enumerate() {
            let k = k0 + j;
            let v = a[k] * h0 + h * a[k + 1] * h1 + hh * a[k + 2] * h2
                + b[k] * g0
                + h * b[k + 1] * g1
                + hh * b[k + 2] * g2;
            // βₖ has the parity of k
            *o = if y < 0.0 && k % 2 == 1 { -v } else { v };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(shape: AtomShape, y: f64) -> [f64; COLS] {
        let unit = Atom {
            center: [0.0, 0.0],
            radius: 1.0,
            amplitude: 1.0,
            shape,
        };
        let reach = unit.extent();
        let w = ((reach - y) * (reach + y)).sqrt();
        let raw = CompositeRule::new(128, 16).integrate_n::<COLS, _>(0.0, 1.0, |u| {
            unit.directional_series::<COLS>(y * y + w * w * u * u, y)
        });
        let mut fact = 1.0;
        let mut out = [0.0; COLS];
        for k in 0..COLS {
            if k > 0 {
                fact *= k as f64;
            }
            out[k] = 2.0 * w * fact * raw[k];
        }
        out
    }

    #[test]
    fn bump_table_matches_direct_quadrature() {
        let table = RadonTable::get(AtomShape::Bump);
        let mut worst = [0.0f64; 5];
        let mut scale = [0.0f64; 5];
        for i in 0..400 {
            let y = -0.999 + 1.998 * (i as f64 + 0.37) / 400.0;
            let want = direct(AtomShape::Bump, y);
            let got = table.eval::<5>(0, y);
            for k in 0..5 {
                worst[k] = worst[k].max((got[k] - want[k]).abs());
                scale[k] = scale[k].max(want[k].abs());
            }
        }
        for k in 0..5 {
            assert!(worst[k] < 1e-10 * scale[k], "k={k}: {} vs scale {}", worst[k], scale[k]);
        }
    }

    #[test]
    fn gaussian_table_matches_closed_form() {
        // β₀ = √π e^{-y²}, β₁ = -2y √π e^{-y²}, β₂ = (4y² - 2) √π e^{-y²}
        let table = RadonTable::get(AtomShape::Gaussian);
        let rp = std::f64::consts::PI.sqrt();
        for i in 0..50 {
            let y = -4.0 + 8.0 * (i as f64 + 0.21) / 50.0;
            let g = rp * (-y * y).exp();
            let got = table.eval::<3>(0, y);
            let want = [g, -2.0 * y * g, (4.0 * y * y - 2.0) * g];
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-9, "k={k} y={y}");
            }
        }
    }

    #[test]
    fn vanishes_outside_reach() {
        let table = RadonTable::get(AtomShape::Bump);
        assert_eq!(table.eval::<5>(0, 1.0), [0.0; 5]);
        assert_eq!(table.eval::<5>(0, -1.5), [0.0; 5]);
    }
}
