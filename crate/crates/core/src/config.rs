//! Run configuration: the data lines plus numeric, study and output keys.
//!
//! ```text
//! support_radius 1
//! bump u1 0 0 0.95 2
//! h_sigma 0.01        # profile grid
//! n_omega 128
//! h 0.02              # wave grid
//! eps_list 0.3 0.35 0.4 0.45
//! grids 0.02 0.01
//! t_max 20
//! output_dir out
//! ```
//!
//! One key per line, `#` starts a comment, every key at most once. The canonical
//! text (fixed key order, shortest float form) is what the hash covers.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::initial_data::{bump_line, parse_bump, parse_f64, parse_single_f64, strip_comment, BumpSpec, DataConfig};
use crate::profile::ProfileOptions;
use crate::wave2d::{Indicator, StopRule, WaveOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub support_radius: Option<f64>,
    pub bumps: Vec<BumpSpec>,

    pub h_sigma: Option<f64>,
    pub n_omega: Option<usize>,
    /// Depth of the σ strip below the light cone.
    pub c0: Option<f64>,
    pub abel_panels: Option<usize>,
    pub abel_order: Option<usize>,
    pub quad_tol: Option<f64>,
    /// Relative margin of the (ND) uniqueness test.
    pub nd_margin: Option<f64>,
    /// Slow-time levels of the characteristic fan.
    pub n_tau: Option<usize>,

    pub cfl: Option<f64>,
    pub h: Option<f64>,
    pub delta_min: Option<f64>,
    /// ε of a single `wave` run.
    pub eps: Option<f64>,
    pub indicator: Option<Indicator>,

    pub eps_list: Option<Vec<f64>>,
    pub grids: Option<Vec<f64>>,
    pub t_max: Option<f64>,

    pub output_dir: Option<PathBuf>,
}

/// What a subcommand needs from the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    DataCheck,
    Profile,
    Burgers,
    Cusp,
    Wave,
    Study,
}

fn parse_usize(rest: &[&str], line: usize, key: &str) -> Result<usize> {
    match rest {
        [v] => v
            .parse()
            .map_err(|_| Error::config_line(line, format!("`{v}` is not a non-negative integer"))),
        _ => Err(Error::config_line(line, format!("`{key}` takes exactly one value"))),
    }
}

fn parse_list(rest: &[&str], line: usize, key: &str) -> Result<Vec<f64>> {
    if rest.is_empty() {
        return Err(Error::config_line(line, format!("`{key}` needs at least one value")));
    }
    rest.iter().map(|t| parse_f64(t, line)).collect()
}

fn set<T>(slot: &mut Option<T>, v: T, line: usize, key: &str) -> Result<()> {
    if slot.is_some() {
        return Err(Error::config_line(line, format!("duplicate key `{key}`")));
    }
    *slot = Some(v);
    Ok(())
}

/// Parses a comma-separated list such as `0.3,0.35,0.4`.
pub fn parse_eps_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("`{t}` is not a number")))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let mut toks = strip_comment(raw).split_whitespace();
            let Some(key) = toks.next() else { continue };
            let rest: Vec<&str> = toks.collect();
            let f = |rest: &[&str]| parse_single_f64(rest, line, key);
            match key {
                "bump" => c.bumps.push(parse_bump(&rest, line)?),
                "support_radius" => set(&mut c.support_radius, f(&rest)?, line, key)?,
                "h_sigma" => set(&mut c.h_sigma, f(&rest)?, line, key)?,
                "n_omega" => set(&mut c.n_omega, parse_usize(&rest, line, key)?, line, key)?,
                "c0" => set(&mut c.c0, f(&rest)?, line, key)?,
                "abel_panels" => set(&mut c.abel_panels, parse_usize(&rest, line, key)?, line, key)?,
                "abel_order" => set(&mut c.abel_order, parse_usize(&rest, line, key)?, line, key)?,
                "quad_tol" => set(&mut c.quad_tol, f(&rest)?, line, key)?,
                "nd_margin" => set(&mut c.nd_margin, f(&rest)?, line, key)?,
                "n_tau" => set(&mut c.n_tau, parse_usize(&rest, line, key)?, line, key)?,
                "cfl" => set(&mut c.cfl, f(&rest)?, line, key)?,
                "h" => set(&mut c.h, f(&rest)?, line, key)?,
                "delta_min" => set(&mut c.delta_min, f(&rest)?, line, key)?,
                "eps" => set(&mut c.eps, f(&rest)?, line, key)?,
                "indicator" => {
                    let ind = match rest.as_slice() {
                        ["max_utt"] => Indicator::MaxUtt,
                        ["weighted"] => Indicator::Weighted,
                        _ => return Err(Error::config_line(line, "`indicator` is `max_utt` or `weighted`")),
                    };
                    set(&mut c.indicator, ind, line, key)?
                }
                "eps_list" => set(&mut c.eps_list, parse_list(&rest, line, key)?, line, key)?,
                "grids" => set(&mut c.grids, parse_list(&rest, line, key)?, line, key)?,
                "t_max" => set(&mut c.t_max, f(&rest)?, line, key)?,
                "output_dir" => match rest.as_slice() {
                    [p] => set(&mut c.output_dir, PathBuf::from(p), line, key)?,
                    _ => return Err(Error::config_line(line, "`output_dir` takes one path without spaces")),
                },
                other => return Err(Error::config_line(line, format!("unknown key `{other}`"))),
            }
        }
        Ok(c)
    }

    /// Canonical text; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! put {
            ($key:literal, $v:expr) => {
                if let Some(v) = &$v {
                    writeln!(out, "{} {}", $key, v).unwrap();
                }
            };
        }
        put!("support_radius", self.support_radius);
        for b in &self.bumps {
            out.push_str(&bump_line(b));
            out.push('\n');
        }
        put!("h_sigma", self.h_sigma);
        put!("n_omega", self.n_omega);
        put!("c0", self.c0);
        put!("abel_panels", self.abel_panels);
        put!("abel_order", self.abel_order);
        put!("quad_tol", self.quad_tol);
        put!("nd_margin", self.nd_margin);
        put!("n_tau", self.n_tau);
        put!("cfl", self.cfl);
        put!("h", self.h);
        put!("delta_min", self.delta_min);
        put!("eps", self.eps);
        if let Some(ind) = self.indicator {
            let name = match ind {
                Indicator::MaxUtt => "max_utt",
                Indicator::Weighted => "weighted",
            };
            writeln!(out, "indicator {name}").unwrap();
        }
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        if let Some(v) = &self.eps_list {
            writeln!(out, "eps_list {}", list(v)).unwrap();
        }
        if let Some(v) = &self.grids {
            writeln!(out, "grids {}", list(v)).unwrap();
        }
        put!("t_max", self.t_max);
        if let Some(p) = &self.output_dir {
            writeln!(out, "output_dir {}", p.display()).unwrap();
        }
        out
    }

    /// SHA-256 of the canonical text, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                write!(s, "{b:02x}").unwrap();
                s
            })
    }

    /// Keys `stage` cannot run without, in canonical order.
    pub fn missing_keys(&self, stage: Stage) -> Vec<&'static str> {
        let mut miss = Vec::new();
        if self.support_radius.is_none() {
            miss.push("support_radius");
        }
        if self.bumps.is_empty() {
            miss.push("bump");
        }
        if stage != Stage::DataCheck && self.output_dir.is_none() {
            miss.push("output_dir");
        }
        match stage {
            Stage::Wave => {
                if self.h.is_none() {
                    miss.push("h");
                }
                if self.eps.is_none() {
                    miss.push("eps");
                }
                if self.t_max.is_none() {
                    miss.push("t_max");
                }
            }
            Stage::Study => {
                if self.eps_list.is_none() {
                    miss.push("eps_list");
                }
                if self.grids.is_none() {
                    miss.push("grids");
                }
                if self.t_max.is_none() {
                    miss.push("t_max");
                }
            }
            _ => {}
        }
        miss
    }

    /// Checks the keys `stage` needs and the ranges of everything present.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let miss = self.missing_keys(stage);
        if !miss.is_empty() {
            return Err(Error::Config(format!("missing key(s): {}", miss.join(", "))));
        }
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0) => Err(Error::Config(format!("`{name}` must be positive, got {x}"))),
            _ => Ok(()),
        };
        positive("h_sigma", self.h_sigma)?;
        positive("c0", self.c0)?;
        positive("quad_tol", self.quad_tol)?;
        positive("h", self.h)?;
        positive("t_max", self.t_max)?;
        if let Some(c) = self.cfl {
            if !(c > 0.0 && c < std::f64::consts::FRAC_1_SQRT_2) {
                return Err(Error::Config(format!("`cfl` must lie in (0, 1/√2), got {c}")));
            }
        }
        if let Some(d) = self.delta_min {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("`delta_min` must lie in (0, 1), got {d}")));
            }
        }
        if let Some(e) = self.eps {
            if !(e >= 0.0) {
                return Err(Error::Config(format!("`eps` must be non-negative, got {e}")));
            }
        }
        if let Some(list) = &self.eps_list {
            if list.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Config("every `eps_list` entry must be positive".into()));
            }
            if stage == Stage::Study && list.len() < 3 {
                return Err(Error::Config(format!(
                    "`eps_list` needs at least 3 values for a study, got {}",
                    list.len()
                )));
            }
        }
        if let Some(g) = &self.grids {
            if g.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::Config("every `grids` entry must be positive".into()));
            }
        }
        if let Some(n) = self.n_omega {
            if n < 8 {
                return Err(Error::Config(format!("`n_omega` must be at least 8, got {n}")));
            }
        }
        Ok(())
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        Ok(DataConfig {
            support_radius: self
                .support_radius
                .ok_or_else(|| Error::Config("missing key `support_radius`".into()))?,
            bumps: self.bumps.clone(),
        })
    }

    /// Profile settings: defaults for the support radius, overridden by the keys given.
    pub fn profile_options(&self) -> ProfileOptions {
        let mut o = ProfileOptions::for_support(self.support_radius.unwrap_or(1.0));
        if let Some(v) = self.h_sigma {
            o.h_sigma = v;
        }
        if let Some(v) = self.n_omega {
            o.n_omega = v;
        }
        if let Some(v) = self.c0 {
            o.c0 = v;
        }
        if let Some(v) = self.abel_panels {
            o.abel_panels = v;
        }
        if let Some(v) = self.abel_order {
            o.abel_order = v;
        }
        if let Some(v) = self.quad_tol {
            o.quad_tol = v;
        }
        if let Some(v) = self.nd_margin {
            o.nd.margin_rel = v;
        }
        o
    }

    pub fn wave_options(&self, h: f64) -> WaveOptions {
        let mut o = WaveOptions::new(h);
        if let Some(c) = self.cfl {
            o.cfl = c;
        }
        if let Some(d) = self.delta_min {
            o.delta_min = d;
        }
        o
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule::new(self.t_max.unwrap_or(f64::INFINITY), self.support_radius.unwrap_or(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOLDEN: &str = "\
support_radius 1
bump u1 0 0 0.95 2   # main lobe
bump u1 0.2 0.15 0.7 1

h_sigma 0.01
n_omega 128
h 0.02
eps_list 0.3 0.35 0.4 0.45
grids 0.02 0.01
t_max 20
indicator max_utt
output_dir out
";

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig::parse(GOLDEN).unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
        assert!(text.starts_with("support_radius 1\nbump u1 0 0 0.95 2\n"));
    }

    #[test]
    fn hash_changes_with_every_field() {
        let c = RunConfig::parse(GOLDEN).unwrap();
        let h = c.hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, RunConfig::parse(&c.to_text()).unwrap().hash());
        let variants = [
            GOLDEN.replace("t_max 20", "t_max 21"),
            GOLDEN.replace("grids 0.02 0.01", "grids 0.02"),
            GOLDEN.replace("0.7 1\n", "0.7 1.5\n"),
            GOLDEN.replace("out\n", "out2\n"),
            GOLDEN.replace("max_utt", "weighted"),
            format!("{GOLDEN}cfl 0.4\n"),
        ];
        for v in variants {
            assert_ne!(RunConfig::parse(&v).unwrap().hash(), h, "{v}");
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let e = RunConfig::parse("support_radius 1\nmesh 3\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }), "{e}");
        let e = RunConfig::parse("h 0.1\nh 0.2\n").unwrap_err();
        assert!(e.to_string().contains("duplicate"));
        assert!(RunConfig::parse("n_omega 12.5\n").is_err());
        assert!(RunConfig::parse("eps_list\n").is_err());
        assert!(RunConfig::parse("indicator fastest\n").is_err());
    }

    #[test]
    fn required_keys_per_stage() {
        let mut c = RunConfig::parse(GOLDEN).unwrap();
        assert!(c.validate(Stage::Study).is_ok());
        assert_eq!(c.missing_keys(Stage::Wave), vec!["eps"]);
        c.grids = None;
        let e = c.validate(Stage::Study).unwrap_err().to_string();
        assert!(e.contains("grids"), "{e}");
        c.output_dir = None;
        assert!(c.validate(Stage::DataCheck).is_ok());
        assert!(c.validate(Stage::Profile).is_err());
    }

    #[test]
    fn ranges_are_checked() {
        let c = RunConfig::parse(&format!("{GOLDEN}cfl 0.9\n")).unwrap();
        assert!(c.validate(Stage::Profile).is_err());
        let c = RunConfig::parse(&GOLDEN.replace("eps_list 0.3 0.35 0.4 0.45", "eps_list 0.3 0.4")).unwrap();
        assert!(c.validate(Stage::Study).is_err());
        assert!(c.validate(Stage::Profile).is_ok());
    }

    #[test]
    fn eps_flag_list() {
        assert_eq!(parse_eps_list("0.3, 0.4").unwrap(), vec![0.3, 0.4]);
        assert!(parse_eps_list("0.3,x").is_err());
    }

    fn bump() -> impl Strategy<Value = BumpSpec> {
        (any::<bool>(), -1e3..1e3f64, -1e3..1e3f64, 1e-6..1e3f64, -1e6..1e6f64).prop_map(|(f, x, y, r, a)| BumpSpec {
            field: if f { crate::initial_data::FieldId::U0 } else { crate::initial_data::FieldId::U1 },
            center: [x, y],
            radius: r,
            amplitude: a,
        })
    }

    proptest! {
        #[test]
        fn any_config_round_trips(
            m in proptest::option::of(1e-6..1e6f64),
            bumps in proptest::collection::vec(bump(), 0..4),
            h in proptest::option::of(1e-9..1.0f64),
            n in proptest::option::of(8usize..4096),
            eps in proptest::option::of(proptest::collection::vec(1e-6..1.0f64, 1..6)),
            t in proptest::option::of(any::<f64>().prop_filter("finite", |v| v.is_finite())),
        ) {
            let c = RunConfig { support_radius: m, bumps, h, n_omega: n, eps_list: eps, t_max: t, ..Default::default() };
            let text = c.to_text();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
