//! Composite Gauss–Legendre quadrature.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes are the roots of P_n found by Newton from the Chebyshev guesses.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p, dp)
}

/// A Gauss–Legendre rule repeated over equal panels.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeRule {
    rule: GaussLegendre,
    panels: usize,
}

impl CompositeRule {
    pub fn new(panels: usize, order: usize) -> Self {
        assert!(panels >= 1);
        Self {
            rule: GaussLegendre::new(order),
            panels,
        }
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn order(&self) -> usize {
        self.rule.len()
    }

    /// Same order, twice the panels.
    pub fn refined(&self) -> Self {
        Self {
            rule: self.rule.clone(),
            panels: self.panels * 2,
        }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.integrate_n::<1, _>(a, b, |x| [f(x)])[0]
    }

    /// Integrates `N` functions that share their abscissae.
    pub fn integrate_n<const N: usize, F: FnMut(f64) -> [f64; N]>(
        &self,
        a: f64,
        b: f64,
        mut f: F,
    ) -> [f64; N] {
        let mut acc = [0.0; N];
        if b <= a {
            return acc;
        }
        let width = (b - a) / self.panels as f64;
        let half = 0.5 * width;
        for p in 0..self.panels {
            let mid = a + (p as f64 + 0.5) * width;
            for (x, w) in self.rule.nodes.iter().zip(&self.rule.weights) {
                let vals = f(mid + half * x);
                for (a, v) in acc.iter_mut().zip(vals) {
                    *a += w * half * v;
                }
            }
        }
        acc
    }
}
