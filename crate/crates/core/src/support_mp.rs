//! Stage II Module B: sum-product on the user and delay Markov chains and
//! loopy belief propagation on the polar Ising lattice, plus the turbo loop
//! that alternates with Module A.
//!
//! Binary masses are stored as `[mass(-1), mass(+1)]`, indexed by `(s+1)/2`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::GridSet;
use crate::priors::{chain_transitions, lattice_neighbors, mrf_parameters, steady_state, SpatialPriorParams, LOG_FLOOR};

pub type Binary = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupportConfig {
    /// Weight of the previous message in the damped update.
    pub damping: f64,
    pub max_sweeps: usize,
    pub tol: f64,
    /// Turbo round cap.
    pub turbo_rounds: usize,
    /// Turbo stop when support beliefs move less than this in total variation.
    pub turbo_tol: f64,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self { damping: 0.5, max_sweeps: 50, tol: 1e-6, turbo_rounds: 3, turbo_tol: 1e-3 }
    }
}

/// Floors both masses at `LOG_FLOOR` and renormalizes.
pub fn normalize(m: Binary) -> Binary {
    let a = m[0].max(LOG_FLOOR);
    let b = m[1].max(LOG_FLOOR);
    [a / (a + b), b / (a + b)]
}

pub fn from_on(p: f64) -> Binary {
    normalize([1.0 - p, p])
}

fn mul(a: Binary, b: Binary) -> Binary {
    [a[0] * b[0], a[1] * b[1]]
}

fn div(a: Binary, b: Binary) -> Binary {
    normalize([a[0] / b[0].max(LOG_FLOOR), a[1] / b[1].max(LOG_FLOOR)])
}

/// `Σ_a m(a) ψ[a][b]`.
fn pass(m: Binary, psi: &[[f64; 2]; 2]) -> Binary {
    normalize([m[0] * psi[0][0] + m[1] * psi[1][0], m[0] * psi[0][1] + m[1] * psi[1][1]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    pub beliefs: Vec<Binary>,
    /// Beliefs with each node's prior factor divided out.
    pub outgoing: Vec<Binary>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Exact forward-backward on a chain with an extra node factor `init` at
/// node 0 and pairwise factors `edges[i]` between nodes `i` and `i+1`.
/// `priors` are the factors excluded from the outgoing messages.
pub fn chain_sum_product(priors: &[Binary], init: Binary, edges: &[[[f64; 2]; 2]]) -> BpResult {
    let n = priors.len();
    assert!(n >= 1 && edges.len() + 1 == n, "chain of {n} nodes needs {} edges", n.saturating_sub(1));
    let local = |i: usize| if i == 0 { mul(priors[0], init) } else { priors[i] };
    let mut fwd = vec![[1.0, 1.0]; n];
    for i in 1..n {
        fwd[i] = pass(normalize(mul(local(i - 1), fwd[i - 1])), &edges[i - 1]);
    }
    let mut bwd = vec![[1.0, 1.0]; n];
    for i in (0..n - 1).rev() {
        let t = &edges[i];
        let transposed = [[t[0][0], t[1][0]], [t[0][1], t[1][1]]];
        bwd[i] = pass(normalize(mul(local(i + 1), bwd[i + 1])), &transposed);
    }
    let beliefs: Vec<Binary> = (0..n).map(|i| normalize(mul(mul(local(i), fwd[i]), bwd[i]))).collect();
    let outgoing = (0..n).map(|i| div(beliefs[i], priors[i])).collect();
    BpResult { beliefs, outgoing, sweeps: 1, converged: true }
}

/// Stationary two-state Markov chain of the given length.
pub fn markov_chain_marginals(priors: &[Binary], on: f64, off: f64) -> BpResult {
    let pi = steady_state(on, off);
    let t = chain_transitions(on, off);
    chain_sum_product(priors, [1.0 - pi, pi], &vec![t; priors.len().saturating_sub(1)])
}

/// Pairwise binary MRF: node factors and symmetric edge factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub node: Vec<Binary>,
    pub neighbors: Vec<Vec<usize>>,
    /// `edge[i][j]` pairs with `neighbors[i][j]`.
    pub edge: Vec<Vec<[[f64; 2]; 2]>>,
}

impl Lattice {
    /// Polar Ising lattice `p ∝ exp(-Σ η̄ s + Σ_{pairs} η̌ s s')`.
    pub fn polar(g: &GridSet, spatial: &SpatialPriorParams) -> Self {
        let n = g.n_bar_r();
        let mut node = Vec::with_capacity(n);
        let mut neighbors = Vec::with_capacity(n);
        let mut edge = Vec::with_capacity(n);
        for m in 0..n {
            let (bias, _) = mrf_parameters(m, m, g, spatial.eta_bias, spatial.eta_inter);
            node.push(normalize([bias.exp(), (-bias).exp()]));
            let nb = lattice_neighbors(m, g.angle_count, g.rings);
            edge.push(
                nb.iter()
                    .map(|&m2| {
                        let (_, inter) = mrf_parameters(m, m2, g, spatial.eta_bias, spatial.eta_inter);
                        ising_edge(inter)
                    })
                    .collect(),
            );
            neighbors.push(nb);
        }
        Self { node, neighbors, edge }
    }
}

pub fn ising_edge(inter: f64) -> [[f64; 2]; 2] {
    [[inter.exp(), (-inter).exp()], [(-inter).exp(), inter.exp()]]
}

/// Damped flooding loopy BP. `priors` multiply the lattice node factors and
/// are excluded from the outgoing messages.
pub fn mrf_loopy_bp(lat: &Lattice, priors: &[Binary], damping: f64, max_sweeps: usize, tol: f64) -> BpResult {
    let n = lat.node.len();
    assert_eq!(priors.len(), n, "prior count must match lattice size");
    let local: Vec<Binary> = (0..n).map(|i| mul(lat.node[i], priors[i])).collect();
    // msg[i][j]: message from neighbors[i][j] into i.
    let mut msg: Vec<Vec<Binary>> = lat.neighbors.iter().map(|nb| vec![[0.5, 0.5]; nb.len()]).collect();
    let slot = |from: usize, to: usize| lat.neighbors[to].iter().position(|&x| x == from).expect("symmetric lattice");
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps.max(1) {
        sweeps += 1;
        let mut next = msg.clone();
        let mut change: f64 = 0.0;
        for to in 0..n {
            for (j, &from) in lat.neighbors[to].iter().enumerate() {
                let mut h = local[from];
                for (k, &other) in lat.neighbors[from].iter().enumerate() {
                    if other != to {
                        h = mul(h, msg[from][k]);
                    }
                }
                let psi = &lat.edge[from][slot(to, from)];
                let fresh = pass(normalize(h), psi);
                let old = msg[to][j];
                let damped = normalize([damping * old[0] + (1.0 - damping) * fresh[0], damping * old[1] + (1.0 - damping) * fresh[1]]);
                change = change.max((damped[1] - old[1]).abs());
                next[to][j] = damped;
            }
        }
        msg = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    let beliefs: Vec<Binary> = (0..n)
        .map(|i| normalize(msg[i].iter().fold(local[i], |acc, m| mul(acc, *m))))
        .collect();
    let outgoing = (0..n).map(|i| div(beliefs[i], priors[i])).collect();
    BpResult { beliefs, outgoing, sweeps, converged }
}

/// `+1` masses over the full user, polar and delay grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportMessages {
    pub user: Vec<f64>,
    pub polar: Vec<f64>,
    pub delay: Vec<f64>,
}

impl SupportMessages {
    pub fn uniform(g: &GridSet) -> Self {
        Self { user: vec![0.5; g.n_u()], polar: vec![0.5; g.n_bar_r()], delay: vec![0.5; g.n_f()] }
    }

    /// Largest per-node change in total variation.
    pub fn max_change(&self, other: &Self) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        d(&self.user, &other.user).max(d(&self.polar, &other.polar)).max(d(&self.delay, &other.delay))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleBOutput {
    pub beliefs: SupportMessages,
    /// Messages toward Module A, used there as Bernoulli priors.
    pub outgoing: SupportMessages,
    pub bp_sweeps: usize,
    pub bp_converged: bool,
}

/// One pass of Module B on the extrinsic messages from Module A.
pub fn module_b(g: &GridSet, spatial: &SpatialPriorParams, ext: &SupportMessages, cfg: &SupportConfig) -> ModuleBOutput {
    let to_bin = |v: &[f64]| v.iter().map(|&p| from_on(p)).collect::<Vec<_>>();
    let (uon, uoff) = spatial.user_chain(g);
    let (kon, koff) = spatial.delay_chain(g);
    let user = markov_chain_marginals(&to_bin(&ext.user), uon, uoff);
    let delay = markov_chain_marginals(&to_bin(&ext.delay), kon, koff);
    let polar = mrf_loopy_bp(&Lattice::polar(g, spatial), &to_bin(&ext.polar), cfg.damping, cfg.max_sweeps, cfg.tol);
    let on = |r: &[Binary]| r.iter().map(|b| b[1]).collect::<Vec<_>>();
    ModuleBOutput {
        beliefs: SupportMessages { user: on(&user.beliefs), polar: on(&polar.beliefs), delay: on(&delay.beliefs) },
        outgoing: SupportMessages { user: on(&user.outgoing), polar: on(&polar.outgoing), delay: on(&delay.outgoing) },
        bp_sweeps: polar.sweeps,
        bp_converged: polar.converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurboReport<T> {
    pub rounds: usize,
    pub last: T,
    pub beliefs: SupportMessages,
    pub priors: SupportMessages,
    pub changes: Vec<f64>,
    pub bp_sweeps: usize,
}

/// Alternates Module A (`module_a(priors, round)` returning its output and
/// extrinsic messages) with Module B until the support beliefs settle.
pub fn turbo_iterate<T, F>(g: &GridSet, spatial: &SpatialPriorParams, cfg: &SupportConfig, mut module_a: F) -> Result<TurboReport<T>>
where
    F: FnMut(&SupportMessages, usize) -> Result<(T, SupportMessages)>,
{
    let start = module_b(g, spatial, &SupportMessages::uniform(g), cfg);
    let mut priors = start.outgoing;
    let mut beliefs = start.beliefs;
    let mut bp_sweeps = start.bp_sweeps;
    let mut changes = Vec::new();
    let mut round = 0;
    loop {
        round += 1;
        let (out, ext) = module_a(&priors, round)?;
        let b = module_b(g, spatial, &ext, cfg);
        bp_sweeps += b.bp_sweeps;
        let change = b.beliefs.max_change(&beliefs);
        changes.push(change);
        beliefs = b.beliefs;
        let done = change < cfg.turbo_tol || round >= cfg.turbo_rounds.max(1);
        let next_priors = b.outgoing;
        if done {
            // Priors Module A saw last; the next ones are reported via beliefs.
            return Ok(TurboReport { rounds: round, last: out, beliefs, priors, changes, bp_sweeps });
        }
        priors = next_priors;
    }
}

/// Polar beliefs as an angle × ring text table.
pub fn belief_map(g: &GridSet, polar_on: &[f64]) -> String {
    let mut out = String::from("angle");
    for q in 0..g.rings {
        out.push_str(&format!(" ring{q}"));
    }
    out.push('\n');
    for a in 0..g.angle_count {
        out.push_str(&format!("{:.6}", g.polar_angles[g.polar_index(a, 0)]));
        for q in 0..g.rings {
            out.push_str(&format!(" {:.6}", polar_on[g.polar_index(a, q)]));
        }
        out.push('\n');
    }
    out
}
