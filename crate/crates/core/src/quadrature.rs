//! Packet-aligned product rules and the order-doubling integrator.
//!
//! Every rule is returned as plain volume elements ("measures"): the node
//! weight divided by the rule's weight function. Packets multiply by their
//! own density, so the same nodes serve normalization checks and radiation
//! integrals alike.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::{FiniteAboveNegOneF64, GaussHermite, GaussLaguerre};
use rayon::prelude::*;

use crate::wavepackets::WavePacket;
use crate::{Error, Result, Vec3};

/// Orders tried by the adaptive integrator, per packet axis.
pub const ORDER_LADDER: [usize; 5] = [8, 16, 32, 64, 96];

type Rule = Arc<Vec<(f64, f64)>>;
type RuleCache = Mutex<HashMap<(u8, usize, u64), Rule>>;

fn cache() -> &'static RuleCache {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn cached(kind: u8, n: usize, alpha: f64, build: impl FnOnce() -> Vec<(f64, f64)>) -> Rule {
    let key = (kind, n, alpha.to_bits());
    if let Some(r) = cache().lock().expect("rule cache poisoned").get(&key) {
        return r.clone();
    }
    let rule = Arc::new(build());
    cache().lock().expect("rule cache poisoned").entry(key).or_insert(rule).clone()
}

/// Gauss–Hermite nodes t and weights for ∫ e^{−t²} g(t) dt, sorted by t.
pub fn hermite(n: usize) -> Rule {
    cached(0, n, 0.0, || {
        let rule = GaussHermite::new(NonZeroUsize::new(n).expect("order must be positive"));
        let mut v: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    })
}

/// Generalized Gauss–Laguerre nodes for ∫ u^α e^{−u} g(u) du.
pub fn laguerre(n: usize, alpha: f64) -> Rule {
    cached(1, n, alpha, || {
        let a = FiniteAboveNegOneF64::try_from(alpha).expect("alpha must exceed -1");
        let rule = GaussLaguerre::new(NonZeroUsize::new(n).expect("order must be positive"), a);
        let mut v: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub p: Vec3,
    /// c(p) times the volume element.
    pub weight: f64,
    pub zeta: Vec3,
}

/// Values the integrator can accumulate.
pub trait Quantity: Copy + Send + Sync + Default {
    fn add(self, other: Self) -> Self;
    fn scale(self, w: f64) -> Self;
    fn magnitude(&self) -> f64;
}

impl Quantity for f64 {
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn scale(self, w: f64) -> Self {
        self * w
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub rtol: f64,
    /// Index into [`ORDER_LADDER`] of the first order tried.
    pub start: usize,
    /// Highest ladder index allowed.
    pub max: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { rtol: 1e-4, start: 0, max: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    pub value: T,
    pub error: f64,
    pub converged: bool,
    pub order: usize,
    /// Packet mass on which the integrand reported a closed channel.
    pub closed_fraction: f64,
}

fn evaluate<T: Quantity, F>(nodes: &[Node], f: &F) -> (T, f64)
where
    F: Fn(&Node) -> Result<T> + Sync,
{
    let vals: Vec<Option<T>> = nodes.par_iter().map(|n| f(n).ok()).collect();
    // fixed summation order keeps results independent of the thread count
    let mut acc = T::default();
    let mut closed = 0.0;
    for (n, v) in nodes.iter().zip(vals) {
        match v {
            Some(v) => acc = acc.add(v.scale(n.weight)),
            None => closed += n.weight,
        }
    }
    (acc, closed)
}

/// ∫ c(p) f(p, ζ(p)) d³p with order doubling until two successive orders
/// agree to `rtol`. Nodes where `f` fails count as closed-channel mass.
pub fn integrate<T: Quantity, F>(packet: &WavePacket, opts: &Options, f: F) -> Result<Estimate<T>>
where
    F: Fn(&Node) -> Result<T> + Sync,
{
    if opts.start > opts.max || opts.max >= ORDER_LADDER.len() {
        return Err(Error::invalid("quadrature ladder bounds out of range"));
    }
    let mut prev: Option<T> = None;
    let mut last = Estimate { value: T::default(), error: f64::INFINITY, converged: false, order: 0, closed_fraction: 0.0 };
    for &order in &ORDER_LADDER[opts.start..=opts.max] {
        let nodes = packet.nodes(order);
        let (value, closed) = evaluate(&nodes, &f);
        let error = prev.map_or(f64::INFINITY, |p| value.add(p.scale(-1.0)).magnitude());
        let converged = error <= opts.rtol * value.magnitude() || (error == 0.0 && value.magnitude() == 0.0);
        last = Estimate { value, error, converged, order, closed_fraction: closed };
        if converged {
            break;
        }
        prev = Some(value);
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_integrates_moments() {
        let r = hermite(12);
        let m0: f64 = r.iter().map(|&(_, w)| w).sum();
        let m2: f64 = r.iter().map(|&(t, w)| w * t * t).sum();
        let pi = std::f64::consts::PI;
        assert!((m0 - pi.sqrt()).abs() < 1e-13);
        assert!((m2 - pi.sqrt() / 2.0).abs() < 1e-13);
    }

    #[test]
    fn laguerre_weights_sum_to_gamma() {
        let r = laguerre(20, 10.0);
        let s: f64 = r.iter().map(|&(_, w)| w).sum();
        assert!((s / 3_628_800.0 - 1.0).abs() < 1e-11);
        let m1: f64 = r.iter().map(|&(u, w)| w * u).sum();
        assert!((m1 / 39_916_800.0 - 1.0).abs() < 1e-11);
    }
}
