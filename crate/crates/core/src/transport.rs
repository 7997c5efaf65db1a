//! Exact discrete optimal transport.
//!
//! The transportation problem between a supply vector and a demand vector is
//! solved as a min-cost flow on the bipartite network `S → sources → sinks → T`
//! by successive shortest augmenting paths. Arc costs stay non-negative
//! through Johnson potentials, so each shortest path is a dense Dijkstra run.
//! Every augmentation saturates at least one residual arc, and the optimum of
//! the linear program is reached without any entropic smoothing.

use thiserror::Error;

/// Residual capacities at or below this are treated as exhausted.
const CAP_EPS: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid transport input: {0}")]
    Invalid(String),
    #[error("transport solver failed: {0}")]
    Internal(String),
}

/// Optimal coupling and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub n_sources: usize,
    pub n_sinks: usize,
    /// Row-major `[source][sink]` flow.
    pub flow: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn flow(&self, i: usize, j: usize) -> f64 {
        self.flow[i * self.n_sinks + j]
    }
}

/// Solves `min Σ plan[i][j]·cost[i][j]` over couplings of `supply` and `demand`.
///
/// `cost` is row-major `[supply.len()][demand.len()]` and must be non-negative.
/// Both marginals must carry (approximately) the same total mass.
pub fn min_cost_transport(
    supply: &[f64],
    demand: &[f64],
    cost: &[f64],
) -> Result<TransportPlan, TransportError> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(TransportError::Invalid("empty marginal".into()));
    }
    if cost.len() != m * n {
        return Err(TransportError::Invalid(format!(
            "cost has {} entries, expected {m}x{n}",
            cost.len()
        )));
    }
    if supply.iter().chain(demand).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(TransportError::Invalid("marginals must be finite and non-negative".into()));
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(TransportError::Invalid("costs must be finite and non-negative".into()));
    }

    // Fast path: a point mass on either side has exactly one coupling.
    if m == 1 || n == 1 {
        let mut flow = vec![0.0; m * n];
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..n {
                let f = if m == 1 { demand[j] } else { supply[i] };
                flow[i * n + j] = f;
                total += f * cost[i * n + j];
            }
        }
        return Ok(TransportPlan {
            n_sources: m,
            n_sinks: n,
            flow,
            cost: total,
        });
    }

    let mut solver = Ssp::new(supply, demand, cost);
    solver.run()?;
    let total = solver
        .flow
        .iter()
        .zip(cost)
        .map(|(f, c)| f * c)
        .sum::<f64>();
    Ok(TransportPlan {
        n_sources: m,
        n_sinks: n,
        flow: solver.flow,
        cost: total,
    })
}

/// Successive-shortest-path state. Node layout: 0 = S, 1..=m sources,
/// m+1..=m+n sinks, m+n+1 = T.
struct Ssp<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    supply_left: Vec<f64>,
    demand_left: Vec<f64>,
    flow: Vec<f64>,
    potential: Vec<f64>,
}

impl<'a> Ssp<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a [f64]) -> Self {
        let m = supply.len();
        let n = demand.len();
        Ssp {
            m,
            n,
            cost,
            supply_left: supply.to_vec(),
            demand_left: demand.to_vec(),
            flow: vec![0.0; m * n],
            potential: vec![0.0; m + n + 2],
        }
    }

    fn sink(&self) -> usize {
        self.m + self.n + 1
    }

    fn run(&mut self) -> Result<(), TransportError> {
        let limit = 4 * (self.m + self.n).pow(2) + 16;
        for _ in 0..limit {
            let left_s: f64 = self.supply_left.iter().filter(|v| **v > CAP_EPS).sum();
            let left_d: f64 = self.demand_left.iter().filter(|v| **v > CAP_EPS).sum();
            if left_s <= CAP_EPS || left_d <= CAP_EPS {
                return Ok(());
            }
            match self.shortest_path() {
                Some(prev) => self.augment(&prev),
                None => return Ok(()),
            }
        }
        Err(TransportError::Internal(format!(
            "no convergence after {limit} augmentations"
        )))
    }

    /// Dense Dijkstra over reduced costs; returns predecessor links or `None`
    /// when T is unreachable.
    fn shortest_path(&mut self) -> Option<Vec<usize>> {
        let v_count = self.m + self.n + 2;
        let t = self.sink();
        let mut dist = vec![f64::INFINITY; v_count];
        let mut prev = vec![usize::MAX; v_count];
        let mut done = vec![false; v_count];
        dist[0] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (v, &d) in dist.iter().enumerate() {
                if !done[v] && d < best {
                    best = d;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u == t {
                break;
            }
            let relax = |v: usize, c: f64, dist: &mut [f64], prev: &mut [usize]| {
                let reduced = (c + self.potential[u] - self.potential[v]).max(0.0);
                let cand = best + reduced;
                if cand < dist[v] {
                    dist[v] = cand;
                    prev[v] = u;
                }
            };
            if u == 0 {
                for i in 0..self.m {
                    if self.supply_left[i] > CAP_EPS {
                        relax(1 + i, 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u <= self.m {
                let i = u - 1;
                for j in 0..self.n {
                    relax(1 + self.m + j, self.cost[i * self.n + j], &mut dist, &mut prev);
                }
            } else {
                let j = u - 1 - self.m;
                for i in 0..self.m {
                    if self.flow[i * self.n + j] > CAP_EPS {
                        relax(1 + i, -self.cost[i * self.n + j], &mut dist, &mut prev);
                    }
                }
                if self.demand_left[j] > CAP_EPS {
                    relax(t, 0.0, &mut dist, &mut prev);
                }
            }
        }
        if !dist[t].is_finite() {
            return None;
        }
        let cap = dist[t];
        for (p, d) in self.potential.iter_mut().zip(&dist) {
            *p += d.min(cap);
        }
        Some(prev)
    }

    fn augment(&mut self, prev: &[usize]) {
        let t = self.sink();
        let mut bottleneck = f64::INFINITY;
        let mut v = t;
        while v != 0 {
            let u = prev[v];
            let cap = self.residual(u, v);
            bottleneck = bottleneck.min(cap);
            v = u;
        }
        let mut v = t;
        while v != 0 {
            let u = prev[v];
            self.push(u, v, bottleneck);
            v = u;
        }
    }

    fn residual(&self, u: usize, v: usize) -> f64 {
        let t = self.sink();
        if u == 0 {
            self.supply_left[v - 1]
        } else if v == t {
            self.demand_left[u - 1 - self.m]
        } else if u <= self.m {
            f64::INFINITY
        } else {
            self.flow[(v - 1) * self.n + (u - 1 - self.m)]
        }
    }

    fn push(&mut self, u: usize, v: usize, amount: f64) {
        let t = self.sink();
        if u == 0 {
            self.supply_left[v - 1] -= amount;
        } else if v == t {
            self.demand_left[u - 1 - self.m] -= amount;
        } else if u <= self.m {
            self.flow[(u - 1) * self.n + (v - 1 - self.m)] += amount;
        } else {
            self.flow[(v - 1) * self.n + (u - 1 - self.m)] -= amount;
        }
    }
}
