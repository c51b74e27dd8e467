//! Compactly supported Cauchy data built from standard bumps.
//!
//! A field is a finite sum of scaled, translated copies of
//! `b(x) = exp(-1/(1 - |x - c|²/ρ²))` on `|x - c| < ρ`. Every atom is a
//! function of the quadratic `q = |x - c|²/ρ²`, so derivatives come from
//! composing the Taylor series of the outer function in `q` with the
//! (exactly quadratic) increment of `q`. Nothing is differenced.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest total derivative order exposed by [`SmoothField::eval_deriv`].
pub const MAX_DERIV_ORDER: usize = 4;

const ORD: usize = MAX_DERIV_ORDER + 1;

/// Below this value of `1 - q` the bump and all its derivatives are under 1e-280.
const BUMP_FLOOR: f64 = 1.0 / 700.0;

/// Truncation radius of test-mode Gaussians, in units of their width.
pub const GAUSSIAN_CUTOFF: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldId {
    /// Initial displacement `u₁⁰`.
    U0,
    /// Initial velocity `u₁¹`.
    U1,
}

impl fmt::Display for FieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldId::U0 => "u0",
            FieldId::U1 => "u1",
        })
    }
}

impl FromStr for FieldId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "u0" => Ok(FieldId::U0),
            "u1" => Ok(FieldId::U1),
            other => Err(format!("unknown field `{other}` (expected u0 or u1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AtomShape {
    /// `exp(-1/(1-q))` for `q < 1`, zero otherwise.
    Bump,
    /// `exp(-q)`; not compactly supported, used only as a test mode.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
    pub shape: AtomShape,
}

impl Atom {
    pub fn bump(center: [f64; 2], radius: f64, amplitude: f64) -> Self {
        Self {
            center,
            radius,
            amplitude,
            shape: AtomShape::Bump,
        }
    }

    /// Distance from the center beyond which the atom is treated as zero.
    pub fn extent(&self) -> f64 {
        match self.shape {
            AtomShape::Bump => self.radius,
            AtomShape::Gaussian => GAUSSIAN_CUTOFF * self.radius,
        }
    }

    /// Taylor coefficients `F⁽ⁿ⁾(q₀)/n!` of the outer function, amplitude included.
    /// `None` when the atom vanishes to all orders at `q₀`.
    pub(crate) fn outer_series<const N: usize>(&self, q0: f64) -> Option<[f64; N]> {
        let mut g = [0.0; N];
        match self.shape {
            AtomShape::Bump => {
                let a = 1.0 - q0;
                if a <= BUMP_FLOOR {
                    return None;
                }
                // -1/(a - d) = -Σ dⁿ / aⁿ⁺¹
                let inv = 1.0 / a;
                let mut p = inv;
                for gn in g.iter_mut() {
                    *gn = -p;
                    p *= inv;
                }
            }
            AtomShape::Gaussian => {
                if q0 > GAUSSIAN_CUTOFF * GAUSSIAN_CUTOFF {
                    return None;
                }
                g[0] = -q0;
                if N > 1 {
                    g[1] = -1.0;
                }
            }
        }
        // exp of a power series: n fₙ = Σ_{k=1..n} k gₖ f_{n-k}
        let mut f = [0.0; N];
        f[0] = self.amplitude * g[0].exp();
        for n in 1..N {
            let mut acc = 0.0;
            for k in 1..=n {
                acc += k as f64 * g[k] * f[n - k];
            }
            f[n] = acc / n as f64;
        }
        Some(f)
    }

    /// Coefficients `cₖ` of `h ↦ atom(x₀ + h ω)` where `(x₀ - c)·ω = along` and
    /// `|x₀ - c|²/ρ² = q0`; the k-th directional derivative is `k! cₖ`.
    pub(crate) fn directional_series<const N: usize>(&self, q0: f64, along: f64) -> [f64; N] {
        let Some(f) = self.outer_series::<N>(q0) else {
            return [0.0; N];
        };
        let inv_r2 = 1.0 / (self.radius * self.radius);
        // increment of q: p1 h + p2 h²
        let (p1, p2) = (2.0 * along * inv_r2, inv_r2);
        let mut out = [0.0; N];
        let mut pow = [0.0; N];
        pow[0] = 1.0;
        for (n, fnc) in f.iter().enumerate() {
            if n > 0 {
                for i in (0..N).rev() {
                    let mut v = 0.0;
                    if i >= 1 {
                        v += pow[i - 1] * p1;
                    }
                    if i >= 2 {
                        v += pow[i - 2] * p2;
                    }
                    pow[i] = v;
                }
            }
            for (o, p) in out.iter_mut().zip(&pow) {
                *o += fnc * p;
            }
        }
        out
    }

    fn taylor_2d(&self, x: [f64; 2]) -> Option<Poly2> {
        let dx = [x[0] - self.center[0], x[1] - self.center[1]];
        let inv_r2 = 1.0 / (self.radius * self.radius);
        let q0 = (dx[0] * dx[0] + dx[1] * dx[1]) * inv_r2;
        let f = self.outer_series::<ORD>(q0)?;
        let mut inc = Poly2::zero();
        inc.c[1][0] = 2.0 * dx[0] * inv_r2;
        inc.c[0][1] = 2.0 * dx[1] * inv_r2;
        inc.c[2][0] = inv_r2;
        inc.c[0][2] = inv_r2;
        let mut out = Poly2::zero();
        let mut pow = Poly2::one();
        for (n, fnc) in f.iter().enumerate() {
            if n > 0 {
                pow = pow.mul(&inc);
            }
            out.add_scaled(&pow, *fnc);
        }
        Some(out)
    }
}

/// Bivariate polynomial truncated at total degree 4; `c[i][j]` multiplies `δ₁ⁱ δ₂ʲ`.
#[derive(Debug, Clone, Copy)]
struct Poly2 {
    c: [[f64; ORD]; ORD],
}

impl Poly2 {
    fn zero() -> Self {
        Self {
            c: [[0.0; ORD]; ORD],
        }
    }

    fn one() -> Self {
        let mut p = Self::zero();
        p.c[0][0] = 1.0;
        p
    }

    fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for i in 0..ORD {
            for j in 0..ORD - i {
                let a = self.c[i][j];
                if a == 0.0 {
                    continue;
                }
                for k in 0..ORD - i - j {
                    for l in 0..ORD - i - j - k {
                        out.c[i + k][j + l] += a * other.c[k][l];
                    }
                }
            }
        }
        out
    }

    fn add_scaled(&mut self, other: &Self, s: f64) {
        for i in 0..ORD {
            for j in 0..ORD - i {
                self.c[i][j] += s * other.c[i][j];
            }
        }
    }
}

/// All partial derivatives of total order ≤ 4 at one point;
/// `d[i][j] = ∂₁ⁱ ∂₂ʲ f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivTable {
    pub d: [[f64; ORD]; ORD],
}

/// An analytically differentiable field supported in the ball of radius `support_radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothField {
    atoms: Vec<Atom>,
    support_radius: f64,
}

impl SmoothField {
    pub fn new(atoms: Vec<Atom>, support_radius: f64) -> Result<Self> {
        if !(support_radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "support radius must be positive, got {support_radius}"
            )));
        }
        for a in &atoms {
            if !(a.radius > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "atom radius must be positive, got {}",
                    a.radius
                )));
            }
            let reach = a.center[0].hypot(a.center[1]) + a.extent();
            if reach > support_radius * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "atom at ({}, {}) with reach {reach} leaves the ball of radius {support_radius}",
                    a.center[0], a.center[1]
                )));
            }
        }
        Ok(Self {
            atoms,
            support_radius,
        })
    }

    pub fn zero(support_radius: f64) -> Self {
        Self {
            atoms: Vec::new(),
            support_radius,
        }
    }

    /// `amplitude · exp(-|x - c|²/width²)`, truncated at `GAUSSIAN_CUTOFF · width`.
    /// Not compactly supported in the strict sense; intended for Radon checks.
    pub fn gaussian(center: [f64; 2], width: f64, amplitude: f64) -> Self {
        let atom = Atom {
            center,
            radius: width,
            amplitude,
            shape: AtomShape::Gaussian,
        };
        Self {
            support_radius: center[0].hypot(center[1]) + atom.extent(),
            atoms: vec![atom],
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.amplitude == 0.0)
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let mut v = 0.0;
        for a in &self.atoms {
            let dx = x[0] - a.center[0];
            let dy = x[1] - a.center[1];
            let q0 = (dx * dx + dy * dy) / (a.radius * a.radius);
            if let Some(f) = a.outer_series::<1>(q0) {
                v += f[0];
            }
        }
        v
    }

    /// Exact partial derivative `∂₁^α₁ ∂₂^α₂ f(x)`.
    pub fn eval_deriv(&self, x: [f64; 2], alpha: [usize; 2]) -> Result<f64> {
        let order = alpha[0] + alpha[1];
        if order > MAX_DERIV_ORDER {
            return Err(Error::DerivativeOrder(order));
        }
        Ok(self.deriv_table(x).d[alpha[0]][alpha[1]])
    }

    pub fn deriv_table(&self, x: [f64; 2]) -> DerivTable {
        let mut sum = Poly2::zero();
        for a in &self.atoms {
            if let Some(p) = a.taylor_2d(x) {
                sum.add_scaled(&p, 1.0);
            }
        }
        let mut d = [[0.0; ORD]; ORD];
        for i in 0..ORD {
            for j in 0..ORD - i {
                d[i][j] = sum.c[i][j] * factorial(i) * factorial(j);
            }
        }
        DerivTable { d }
    }

    /// Exact Laplacian.
    pub fn laplacian(&self, x: [f64; 2]) -> f64 {
        let t = self.deriv_table(x);
        t.d[2][0] + t.d[0][2]
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// One `bump` line of a data configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub field: FieldId,
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
}

/// Data description: `bump` lines plus the radius of the support ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub support_radius: f64,
    pub bumps: Vec<BumpSpec>,
}

impl DataConfig {
    /// Parses the standalone data grammar; any other key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut support_radius = None;
        let mut bumps = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = strip_comment(raw);
            let mut toks = body.split_whitespace();
            let Some(key) = toks.next() else { continue };
            let rest: Vec<&str> = toks.collect();
            match key {
                "bump" => bumps.push(parse_bump(&rest, line)?),
                "support_radius" => {
                    if support_radius.is_some() {
                        return Err(Error::config_line(line, "duplicate key `support_radius`"));
                    }
                    support_radius = Some(parse_single_f64(&rest, line, key)?);
                }
                other => {
                    return Err(Error::config_line(line, format!("unknown key `{other}`")));
                }
            }
        }
        let support_radius =
            support_radius.ok_or_else(|| Error::Config("missing key `support_radius`".into()))?;
        Ok(Self {
            support_radius,
            bumps,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("support_radius {}\n", self.support_radius);
        for b in &self.bumps {
            out.push_str(&bump_line(b));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

pub(crate) fn parse_single_f64(rest: &[&str], line: usize, key: &str) -> Result<f64> {
    match rest {
        [v] => parse_f64(v, line),
        _ => Err(Error::config_line(
            line,
            format!("`{key}` takes exactly one value"),
        )),
    }
}

pub(crate) fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::config_line(line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::config_line(line, format!("`{tok}` is not finite")));
    }
    Ok(v)
}

pub(crate) fn parse_bump(rest: &[&str], line: usize) -> Result<BumpSpec> {
    let [field, cx, cy, rho, amp] = rest else {
        return Err(Error::config_line(
            line,
            "expected `bump <u0|u1> <cx> <cy> <rho> <amp>`",
        ));
    };
    let field = field
        .parse::<FieldId>()
        .map_err(|e| Error::config_line(line, e))?;
    Ok(BumpSpec {
        field,
        center: [parse_f64(cx, line)?, parse_f64(cy, line)?],
        radius: parse_f64(rho, line)?,
        amplitude: parse_f64(amp, line)?,
    })
}

pub(crate) fn bump_line(b: &BumpSpec) -> String {
    format!(
        "bump {} {} {} {} {}",
        b.field, b.center[0], b.center[1], b.radius, b.amplitude
    )
}

/// Builds `(u₁⁰, u₁¹)` from a configuration.
pub fn make_data(config: &DataConfig) -> Result<(SmoothField, SmoothField)> {
    let m = config.support_radius;
    if !(m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "support_radius must be positive, got {m}"
        )));
    }
    if config.bumps.is_empty() {
        return Err(Error::InvalidArgument("no bump atoms configured".into()));
    }
    let mut u0 = Vec::new();
    let mut u1 = Vec::new();
    for b in &config.bumps {
        if !(b.radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bump radius must be positive, got {}",
                b.radius
            )));
        }
        let atom = Atom::bump(b.center, b.radius, b.amplitude);
        match b.field {
            FieldId::U0 => u0.push(atom),
            FieldId::U1 => u1.push(atom),
        }
    }
    Ok((SmoothField::new(u0, m)?, SmoothField::new(u1, m)?))
}
