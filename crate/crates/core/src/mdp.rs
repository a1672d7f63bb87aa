//! Finite-horizon backward recursion on a discretized state/action grid.
//!
//! States are indexed jointly: every user has a local index
//! `((b * nr + r) * nh + h) * nw + w` and user 0 is the most significant
//! digit of the joint index. The expectation over next-slot randomness is
//! evaluated through a post-decision continuation
//! `U_t(B - P, r - rho, w) = E[V_{t+1}(next)]`, contracted one user axis at a
//! time, so each candidate action costs one table lookup.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{stage_cost, Action, StochasticModel, SystemParams, SystemState};
use crate::rate_region::{is_rate_feasible, RateRegionInstance};

const GRID_TOL: f64 = 1e-9;
const TABLE_MAGIC: &str = "ehmac-mdp";
const TABLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizationSpec {
    pub battery: Vec<f64>,
    pub remaining: Vec<f64>,
    pub power: Vec<f64>,
    pub rho: Vec<f64>,
    pub channel: Vec<f64>,
    /// Includes 0 for "no version yet".
    pub weight: Vec<f64>,
}

fn sorted_union(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= GRID_TOL);
    v
}

fn exact_index(grid: &[f64], x: f64) -> Option<usize> {
    grid.iter().position(|&g| (g - x).abs() <= GRID_TOL)
}

/// Largest grid index whose value does not exceed `x`.
fn floor_index(grid: &[f64], x: f64) -> Option<usize> {
    grid.iter().rposition(|&g| g <= x + GRID_TOL)
}

impl DiscretizationSpec {
    /// Grids `{0, step, 2 step, ...}` up to `B_max` / `r_max`; channel and
    /// weight grids are the model supports.
    pub fn uniform(step: f64, params: &SystemParams, model: &StochasticModel) -> Self {
        let grid = |max: f64| {
            let n = (max / step + GRID_TOL).floor() as usize;
            (0..=n).map(|k| k as f64 * step).collect::<Vec<_>>()
        };
        let channel = sorted_union(
            model
                .users
                .iter()
                .flat_map(|u| u.channel.support().iter().copied()),
        );
        let weight =
            sorted_union(std::iter::once(0.0).chain(model.weight.support().iter().copied()));
        Self {
            battery: grid(params.b_max),
            remaining: grid(params.r_max),
            power: grid(params.b_max),
            rho: grid(params.r_max),
            channel,
            weight,
        }
    }

    pub fn integer(params: &SystemParams, model: &StochasticModel) -> Self {
        Self::uniform(1.0, params, model)
    }

    /// Rejects grids that the dynamics can leave: `B - P`,
    /// `min(B - P + E, B_max)`, `r - rho` and `r_max` must all be grid points,
    /// and every channel/weight outcome must be representable.
    pub fn validate(&self, params: &SystemParams, model: &StochasticModel) -> Result<()> {
        let closure = |msg: String| Err(Error::GridClosure(msg));
        for (name, grid) in [
            ("battery", &self.battery),
            ("remaining", &self.remaining),
            ("power", &self.power),
            ("rho", &self.rho),
            ("channel", &self.channel),
            ("weight", &self.weight),
        ] {
            if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
                return closure(format!("{name} grid must be non-empty and finite"));
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return closure(format!("{name} grid must be strictly ascending"));
            }
            if name != "channel" && grid[0] != 0.0 {
                return closure(format!("{name} grid must start at 0"));
            }
        }
        if self.battery.len() > 255 || self.power.len() > 255 || self.rho.len() > 255 {
            return closure("grids are limited to 255 points".into());
        }
        if *self.battery.last().unwrap() > params.b_max + GRID_TOL
            || *self.power.last().unwrap() > params.b_max + GRID_TOL
        {
            return closure("battery/power grid exceeds B_max".into());
        }
        if *self.rho.last().unwrap() > params.r_max + GRID_TOL {
            return closure("rho grid exceeds r_max".into());
        }
        if exact_index(&self.remaining, params.r_max).is_none()
            || *self.remaining.last().unwrap() > params.r_max + GRID_TOL
        {
            return closure("remaining-bits grid must end at r_max".into());
        }
        if self.channel[0] <= 0.0 {
            return closure("channel grid must be positive".into());
        }
        if model.num_users() != params.num_users {
            return Err(Error::Dimension {
                expected: params.num_users,
                got: model.num_users(),
            });
        }
        for &b in &self.battery {
            for &p in self.power.iter().filter(|&&p| p <= b + GRID_TOL) {
                if exact_index(&self.battery, b - p).is_none() {
                    return closure(format!("B - P = {b} - {p} is off the battery grid"));
                }
                for u in &model.users {
                    for (e, _) in u.energy.outcomes() {
                        let next = (b - p + e).min(params.b_max);
                        if exact_index(&self.battery, next).is_none() {
                            return closure(format!(
                                "min(B - P + E, B_max) = {next} is off the battery grid"
                            ));
                        }
                    }
                }
            }
        }
        for &r in &self.remaining {
            for &k in self.rho.iter().filter(|&&k| k <= r + GRID_TOL) {
                if exact_index(&self.remaining, r - k).is_none() {
                    return closure(format!(
                        "r - rho = {r} - {k} is off the remaining-bits grid"
                    ));
                }
            }
        }
        for (i, u) in model.users.iter().enumerate() {
            for (h, _) in u.channel.outcomes() {
                if exact_index(&self.channel, h).is_none() {
                    return closure(format!("user {} channel gain {h} not on grid", i + 1));
                }
            }
        }
        for (w, _) in model.weight.outcomes() {
            if exact_index(&self.weight, w).is_none() {
                return closure(format!("weight {w} not on grid"));
            }
        }
        Ok(())
    }
}

/// Joint state indexing for a given spec and user count.
#[derive(Clone, Debug, PartialEq)]
pub struct StateIndexer {
    pub num_users: usize,
    nb: usize,
    nr: usize,
    nh: usize,
    nw: usize,
    /// Local states per user.
    pub local: usize,
    /// Joint states.
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalState {
    pub b: usize,
    pub r: usize,
    pub h: usize,
    pub w: usize,
}

impl StateIndexer {
    pub fn new(spec: &DiscretizationSpec, num_users: usize) -> Self {
        let (nb, nr, nh, nw) = (
            spec.battery.len(),
            spec.remaining.len(),
            spec.channel.len(),
            spec.weight.len(),
        );
        let local = nb * nr * nh * nw;
        Self {
            num_users,
            nb,
            nr,
            nh,
            nw,
            local,
            total: local.pow(num_users as u32),
        }
    }

    pub fn local_index(&self, s: LocalState) -> usize {
        ((s.b * self.nr + s.r) * self.nh + s.h) * self.nw + s.w
    }

    pub fn local_state(&self, l: usize) -> LocalState {
        LocalState {
            w: l % self.nw,
            h: (l / self.nw) % self.nh,
            r: (l / (self.nw * self.nh)) % self.nr,
            b: l / (self.nw * self.nh * self.nr),
        }
    }

    pub fn encode(&self, locals: &[LocalState]) -> usize {
        locals
            .iter()
            .fold(0, |acc, &s| acc * self.local + self.local_index(s))
    }

    pub fn decode(&self, joint: usize) -> Vec<LocalState> {
        let mut out = vec![
            LocalState {
                b: 0,
                r: 0,
                h: 0,
                w: 0
            };
            self.num_users
        ];
        let mut j = joint;
        for i in (0..self.num_users).rev() {
            out[i] = self.local_state(j % self.local);
            j /= self.local;
        }
        out
    }

    /// Joint-index distance between states differing by one battery step of user `i`.
    pub fn battery_stride(&self, i: usize) -> usize {
        self.nr * self.nh * self.nw * self.local.pow((self.num_users - 1 - i) as u32)
    }

    /// Joint-index distance between states differing by one bit step of user `i`.
    pub fn remaining_stride(&self, i: usize) -> usize {
        self.nh * self.nw * self.local.pow((self.num_users - 1 - i) as u32)
    }

    /// Exact lookup; every component must be a grid point.
    pub fn index_of(&self, spec: &DiscretizationSpec, s: &SystemState) -> Result<usize> {
        self.lookup(spec, s, exact_index)
    }

    /// Battery and bits rounded down to the grid; channel and weight exact.
    pub fn snap(&self, spec: &DiscretizationSpec, s: &SystemState) -> Result<usize> {
        self.lookup(spec, s, floor_index)
    }

    fn lookup(
        &self,
        spec: &DiscretizationSpec,
        s: &SystemState,
        round: fn(&[f64], f64) -> Option<usize>,
    ) -> Result<usize> {
        if s.num_users() != self.num_users {
            return Err(Error::Dimension {
                expected: self.num_users,
                got: s.num_users(),
            });
        }
        let off = |what: &str, i: usize, v: f64| {
            Error::OffGrid(format!("user {} {what} {v} has no grid point", i + 1))
        };
        let locals = (0..self.num_users)
            .map(|i| {
                Ok(LocalState {
                    b: round(&spec.battery, s.battery[i])
                        .ok_or_else(|| off("battery", i, s.battery[i]))?,
                    r: round(&spec.remaining, s.remaining[i])
                        .ok_or_else(|| off("remaining bits", i, s.remaining[i]))?,
                    h: exact_index(&spec.channel, s.channel[i])
                        .ok_or_else(|| off("channel", i, s.channel[i]))?,
                    w: exact_index(&spec.weight, s.weight[i])
                        .ok_or_else(|| off("weight", i, s.weight[i]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.encode(&locals))
    }

    pub fn state(&self, spec: &DiscretizationSpec, joint: usize) -> SystemState {
        let locals = self.decode(joint);
        SystemState {
            battery: locals.iter().map(|s| spec.battery[s.b]).collect(),
            remaining: locals.iter().map(|s| spec.remaining[s.r]).collect(),
            channel: locals.iter().map(|s| spec.channel[s.h]).collect(),
            weight: locals.iter().map(|s| spec.weight[s.w]).collect(),
        }
    }
}

/// `V_t` over joint grid states, `values[t]` for 0-based slot `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub values: Vec<Vec<f64>>,
}

/// Argmin actions as grid indices: `2M` bytes per state, powers then bits.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub num_users: usize,
    pub actions: Vec<Vec<u8>>,
}

impl PolicyTable {
    pub fn indices(&self, t: usize, joint: usize) -> &[u8] {
        let w = 2 * self.num_users;
        &self.actions[t][joint * w..(joint + 1) * w]
    }

    pub fn action(&self, t: usize, joint: usize, spec: &DiscretizationSpec) -> Action {
        let m = self.num_users;
        let idx = self.indices(t, joint);
        Action {
            power: idx[..m].iter().map(|&k| spec.power[k as usize]).collect(),
            rho: idx[m..].iter().map(|&k| spec.rho[k as usize]).collect(),
        }
    }
}

/// A solved (or loaded) table, sufficient for online execution.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpTable {
    pub spec: DiscretizationSpec,
    pub num_users: usize,
    pub horizon: usize,
    pub values: ValueTable,
    pub policy: PolicyTable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecursionStats {
    /// Candidate actions whose full Q value was evaluated.
    pub q_evaluations: u64,
    /// Lower-bound evaluations spent certifying pruned minima.
    pub bound_evaluations: u64,
    /// States where the pruned minimum could not be certified.
    pub fallbacks: u64,
}

#[derive(Clone, Debug)]
pub struct MdpSolution {
    pub table: MdpTable,
    pub stats: RecursionStats,
}

/// Grid plus per-user post-decision transition kernels.
#[derive(Clone, Debug)]
pub struct MdpGrid {
    pub spec: DiscretizationSpec,
    pub params: SystemParams,
    pub index: StateIndexer,
    post_local: usize,
    /// `[b][p]` -> battery index of `B - P`.
    b_after: Vec<Vec<Option<usize>>>,
    /// `[r][k]` -> remaining index of `r - rho`.
    r_after: Vec<Vec<Option<usize>>>,
    /// `[user][post local]` -> `(next local, probability)`.
    kernels: Vec<Vec<Vec<(usize, f64)>>>,
}

impl MdpGrid {
    pub fn new(
        spec: &DiscretizationSpec,
        params: &SystemParams,
        model: &StochasticModel,
    ) -> Result<Self> {
        params.validate()?;
        model.validate()?;
        spec.validate(params, model)?;
        let index = StateIndexer::new(spec, params.num_users);
        let (nb, nr, nw) = (index.nb, index.nr, index.nw);
        let post_local = nb * nr * nw;
        let b_after = spec
            .battery
            .iter()
            .map(|&b| {
                spec.power
                    .iter()
                    .map(|&p| {
                        (p <= b + GRID_TOL)
                            .then(|| exact_index(&spec.battery, b - p))
                            .flatten()
                    })
                    .collect()
            })
            .collect();
        let r_after = spec
            .remaining
            .iter()
            .map(|&r| {
                spec.rho
                    .iter()
                    .map(|&k| {
                        (k <= r + GRID_TOL)
                            .then(|| exact_index(&spec.remaining, r - k))
                            .flatten()
                    })
                    .collect()
            })
            .collect();
        let r_full = exact_index(&spec.remaining, params.r_max).expect("validated");
        let kernels = model
            .users
            .iter()
            .map(|u| {
                (0..post_local)
                    .map(|q| {
                        let (b, r, w) = (q / (nr * nw), (q / nw) % nr, q % nw);
                        let mut out = Vec::new();
                        for (e, pe) in u.energy.outcomes() {
                            let nb_idx =
                                exact_index(&spec.battery, (spec.battery[b] + e).min(params.b_max))
                                    .expect("validated");
                            let mut arrivals = Vec::new();
                            if u.arrival_prob < 1.0 {
                                arrivals.push((r, w, 1.0 - u.arrival_prob));
                            }
                            if u.arrival_prob > 0.0 {
                                for (wv, pw) in model.weight.outcomes() {
                                    let wi = exact_index(&spec.weight, wv).expect("validated");
                                    arrivals.push((r_full, wi, u.arrival_prob * pw));
                                }
                            }
                            for (nr_idx, nw_idx, pa) in arrivals {
                                for (h, ph) in u.channel.outcomes() {
                                    let hi = exact_index(&spec.channel, h).expect("validated");
                                    let next = index.local_index(LocalState {
                                        b: nb_idx,
                                        r: nr_idx,
                                        h: hi,
                                        w: nw_idx,
                                    });
                                    out.push((next, pe * pa * ph));
                                }
                            }
                        }
                        out
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params: params.clone(),
            post_local,
            index,
            b_after,
            r_after,
            kernels,
        })
    }

    /// Feasible grid actions at `locals` as `2M` index bytes each, in
    /// lexicographic `(P_1..P_M, rho_1..rho_M)` order.
    fn feasible_actions(&self, locals: &[LocalState]) -> Vec<u8> {
        let m = locals.len();
        let spec = &self.spec;
        let rate_fn = self.params.rate_fn;
        let p_count: Vec<usize> = locals
            .iter()
            .map(|s| {
                spec.power
                    .iter()
                    .filter(|&&p| p <= spec.battery[s.b] + GRID_TOL)
                    .count()
            })
            .collect();
        let gains: Vec<f64> = locals.iter().map(|s| spec.channel[s.h]).collect();
        let mut out = Vec::new();
        let mut p_idx = vec![0usize; m];
        let mut powers = vec![0.0; m];
        let mut rho = vec![0.0; m];
        loop {
            for i in 0..m {
                powers[i] = spec.power[p_idx[i]];
            }
            let k_count: Vec<usize> = (0..m)
                .map(|i| {
                    let cap = rate_fn
                        .value(gains[i] * powers[i])
                        .min(spec.remaining[locals[i].r]);
                    spec.rho.iter().filter(|&&k| k <= cap + GRID_TOL).count()
                })
                .collect();
            let inst = RateRegionInstance::new(&gains, &powers, rate_fn);
            let mut k_idx = vec![0usize; m];
            loop {
                for i in 0..m {
                    rho[i] = spec.rho[k_idx[i]];
                }
                if is_rate_feasible(&inst, &rho, GRID_TOL).expect("dimensions match") {
                    out.extend(p_idx.iter().chain(&k_idx).map(|&v| v as u8));
                }
                if !odometer(&mut k_idx, &k_count) {
                    break;
                }
            }
            if !odometer(&mut p_idx, &p_count) {
                break;
            }
        }
        out
    }

    /// Stage cost of the action and its post-decision joint index.
    fn stage_and_post(&self, locals: &[LocalState], act: &[u8]) -> (f64, usize) {
        let m = locals.len();
        let spec = &self.spec;
        let (nr, nw) = (self.index.nr, self.index.nw);
        let mut stage = 0.0;
        let mut post = 0;
        for (i, s) in locals.iter().enumerate() {
            let (p, k) = (act[i] as usize, act[m + i] as usize);
            let w = spec.weight[s.w];
            if w != 0.0 {
                stage += w * self.params.cost_fn.value(spec.remaining[s.r] - spec.rho[k]);
            }
            let bq = self.b_after[s.b][p].expect("feasible action");
            let rq = self.r_after[s.r][k].expect("feasible action");
            post = post * self.post_local + (bq * nr + rq) * nw + s.w;
        }
        (stage, post)
    }

    fn q_value(&self, locals: &[LocalState], act: &[u8], cont: Option<&[f64]>) -> f64 {
        let (stage, post) = self.stage_and_post(locals, act);
        match cont {
            Some(u) => stage + u[post],
            None => stage,
        }
    }

    /// `U(post) = E[V_next(next state) | post-decision state]`.
    pub fn continuation(&self, v_next: &[f64]) -> Vec<f64> {
        let m = self.index.num_users;
        let (l, q) = (self.index.local, self.post_local);
        let mut cur = v_next.to_vec();
        let mut dims = vec![l; m];
        for i in 0..m {
            let outer: usize = dims[..i].iter().product();
            let inner: usize = dims[i + 1..].iter().product();
            let mut next = vec![0.0; outer * q * inner];
            for o in 0..outer {
                for (qq, kernel) in self.kernels[i].iter().enumerate() {
                    let dst = (o * q + qq) * inner;
                    for &(to, p) in kernel {
                        let src = (o * l + to) * inner;
                        for n in 0..inner {
                            next[dst + n] += p * cur[src + n];
                        }
                    }
                }
            }
            cur = next;
            dims[i] = q;
        }
        cur
    }

    /// Minimum of `U` over all post-decision battery coordinates, keyed by the
    /// joint `(r, w)` part of the post-decision index.
    fn continuation_floor(&self, u: &[f64]) -> Vec<f64> {
        let rw = self.index.nr * self.index.nw;
        let mut out = vec![f64::INFINITY; rw.pow(self.index.num_users as u32)];
        for (post, &val) in u.iter().enumerate() {
            let key = self.rw_key(post);
            if val < out[key] {
                out[key] = val;
            }
        }
        out
    }

    fn rw_key(&self, post: usize) -> usize {
        let rw = self.index.nr * self.index.nw;
        let mut key = 0;
        let mut rest = post;
        let mut scale = 1;
        for _ in 0..self.index.num_users {
            key += (rest % self.post_local % rw) * scale;
            rest /= self.post_local;
            scale *= rw;
        }
        key
    }

    fn layer_full(&self, cont: Option<&[f64]>) -> (Vec<f64>, Vec<u8>, RecursionStats) {
        let w = 2 * self.index.num_users;
        let per_state: Vec<(f64, Vec<u8>, u64)> = (0..self.index.total)
            .into_par_iter()
            .map(|j| {
                let locals = self.index.decode(j);
                let acts = self.feasible_actions(&locals);
                let mut best = f64::INFINITY;
                let mut arg = 0;
                for (a, act) in acts.chunks(w).enumerate() {
                    let q = self.q_value(&locals, act, cont);
                    if q < best {
                        best = q;
                        arg = a;
                    }
                }
                (
                    best,
                    acts[arg * w..(arg + 1) * w].to_vec(),
                    (acts.len() / w) as u64,
                )
            })
            .collect();
        let mut values = Vec::with_capacity(per_state.len());
        let mut policy = Vec::with_capacity(per_state.len() * w);
        let mut stats = RecursionStats::default();
        for (v, a, n) in per_state {
            values.push(v);
            policy.extend(a);
            stats.q_evaluations += n;
        }
        (values, policy, stats)
    }

    /// Same minimization restricted first to actions no smaller than the
    /// argmin one battery step below (per user); the restricted minimum is
    /// accepted only when it is strictly below a lower bound on every
    /// excluded action, otherwise the excluded actions are evaluated too.
    fn layer_monotone(&self, cont: Option<&[f64]>) -> (Vec<f64>, Vec<u8>, RecursionStats) {
        let m = self.index.num_users;
        let w = 2 * m;
        let floor = cont.map(|u| self.continuation_floor(u));
        let mut values = vec![0.0; self.index.total];
        let mut policy = vec![0u8; self.index.total * w];
        let mut stats = RecursionStats::default();
        let mut lb = vec![0u8; w];
        let mut q_cache: Vec<f64> = Vec::new();
        for j in 0..self.index.total {
            let locals = self.index.decode(j);
            let acts = self.feasible_actions(&locals);
            let n = acts.len() / w;
            lb.iter_mut().for_each(|v| *v = 0);
            let mut bounded = false;
            for (i, s) in locals.iter().enumerate() {
                if s.b > 0 {
                    let prev = j - self.index.battery_stride(i);
                    let pa = &policy[prev * w..(prev + 1) * w];
                    lb[i] = lb[i].max(pa[i]);
                    lb[m + i] = lb[m + i].max(pa[m + i]);
                    bounded = true;
                }
            }
            q_cache.clear();
            q_cache.resize(n, f64::NAN);
            let kept = |act: &[u8]| act.iter().zip(&lb).all(|(a, b)| a >= b);

            let mut best = f64::INFINITY;
            let mut arg = usize::MAX;
            let mut bound = f64::INFINITY;
            for (a, act) in acts.chunks(w).enumerate() {
                if !bounded || kept(act) {
                    let q = self.q_value(&locals, act, cont);
                    stats.q_evaluations += 1;
                    q_cache[a] = q;
                    if q < best {
                        best = q;
                        arg = a;
                    }
                } else {
                    let (stage, post) = self.stage_and_post(&locals, act);
                    let tail = floor.as_ref().map_or(0.0, |f| f[self.rw_key(post)]);
                    stats.bound_evaluations += 1;
                    bound = bound.min(stage + tail);
                }
            }
            if arg == usize::MAX || !(best < bound) {
                stats.fallbacks += 1;
                best = f64::INFINITY;
                for (a, act) in acts.chunks(w).enumerate() {
                    let q = if q_cache[a].is_nan() {
                        stats.q_evaluations += 1;
                        self.q_value(&locals, act, cont)
                    } else {
                        q_cache[a]
                    };
                    if q < best {
                        best = q;
                        arg = a;
                    }
                }
            }
            values[j] = best;
            policy[j * w..(j + 1) * w].copy_from_slice(&acts[arg * w..(arg + 1) * w]);
        }
        (values, policy, stats)
    }

    fn solve(&self, monotone: bool) -> MdpSolution {
        let horizon = self.params.horizon;
        let mut values = vec![Vec::new(); horizon];
        let mut actions = vec![Vec::new(); horizon];
        let mut stats = RecursionStats::default();
        let mut cont: Option<Vec<f64>> = None;
        for t in (0..horizon).rev() {
            let (v, pol, s) = if monotone {
                self.layer_monotone(cont.as_deref())
            } else {
                self.layer_full(cont.as_deref())
            };
            stats.q_evaluations += s.q_evaluations;
            stats.bound_evaluations += s.bound_evaluations;
            stats.fallbacks += s.fallbacks;
            if t > 0 {
                cont = Some(self.continuation(&v));
            }
            values[t] = v;
            actions[t] = pol;
        }
        MdpSolution {
            table: MdpTable {
                spec: self.spec.clone(),
                num_users: self.params.num_users,
                horizon,
                values: ValueTable { values },
                policy: PolicyTable {
                    num_users: self.params.num_users,
                    actions,
                },
            },
            stats,
        }
    }

    /// `E[V_1]` over the first slot's arrivals from the all-zero initial state.
    pub fn expected_initial_value(&self, table: &MdpTable) -> f64 {
        // the all-zero post-decision state is index 0 since every grid starts at 0
        self.continuation(&table.values.values[0])[0]
    }
}

/// Advances a mixed-radix counter; returns false after the last combination.
fn odometer(digits: &mut [usize], radix: &[usize]) -> bool {
    for i in (0..digits.len()).rev() {
        digits[i] += 1;
        if digits[i] < radix[i] {
            return true;
        }
        digits[i] = 0;
    }
    false
}

pub fn enumerate_feasible_actions(
    state: &SystemState,
    spec: &DiscretizationSpec,
    params: &SystemParams,
    model: &StochasticModel,
) -> Result<Vec<Action>> {
    let grid = MdpGrid::new(spec, params, model)?;
    let joint = grid.index.index_of(spec, state)?;
    let locals = grid.index.decode(joint);
    let m = params.num_users;
    Ok(grid
        .feasible_actions(&locals)
        .chunks(2 * m)
        .map(|a| Action {
            power: a[..m].iter().map(|&k| spec.power[k as usize]).collect(),
            rho: a[m..].iter().map(|&k| spec.rho[k as usize]).collect(),
        })
        .collect())
}

/// Stage cost plus the expected next value, by direct enumeration of the
/// joint `(E, A, W, H)` outcomes of all users. `v_next` is `None` in the
/// last slot.
pub fn transition_expectation(
    state: &SystemState,
    action: &Action,
    v_next: Option<&[f64]>,
    model: &StochasticModel,
    spec: &DiscretizationSpec,
    params: &SystemParams,
) -> Result<f64> {
    let stage = stage_cost(state, action, params)?;
    let Some(v_next) = v_next else {
        return Ok(stage);
    };
    let index = StateIndexer::new(spec, params.num_users);
    // per-user list of (next local state, probability)
    let mut per_user = Vec::with_capacity(params.num_users);
    for (i, u) in model.users.iter().enumerate() {
        let mut outs = Vec::new();
        for (e, pe) in u.energy.outcomes() {
            for arrived in [false, true] {
                let pa = if arrived {
                    u.arrival_prob
                } else {
                    1.0 - u.arrival_prob
                };
                if pa == 0.0 {
                    continue;
                }
                let weights: Vec<(f64, f64)> = if arrived {
                    model.weight.outcomes().collect()
                } else {
                    vec![(state.weight[i], 1.0)]
                };
                for (wv, pw) in weights {
                    for (h, ph) in u.channel.outcomes() {
                        let b = (state.battery[i] - action.power[i] + e).min(params.b_max);
                        let r = if arrived {
                            params.r_max
                        } else {
                            state.remaining[i] - action.rho[i]
                        };
                        let find = |grid: &[f64], x: f64, what: &str| {
                            exact_index(grid, x).ok_or_else(|| {
                                Error::GridClosure(format!(
                                    "next {what} {x} of user {} is off the grid",
                                    i + 1
                                ))
                            })
                        };
                        let local = index.local_index(LocalState {
                            b: find(&spec.battery, b, "battery")?,
                            r: find(&spec.remaining, r, "remaining bits")?,
                            h: find(&spec.channel, h, "channel")?,
                            w: find(&spec.weight, wv, "weight")?,
                        });
                        outs.push((local, pe * pa * pw * ph));
                    }
                }
            }
        }
        per_user.push(outs);
    }
    let mut expectation = 0.0;
    let mut digits = vec![0usize; params.num_users];
    let radix: Vec<usize> = per_user.iter().map(Vec::len).collect();
    loop {
        let mut joint = 0;
        let mut prob = 1.0;
        for (i, &d) in digits.iter().enumerate() {
            let (l, p) = per_user[i][d];
            joint = joint * index.local + l;
            prob *= p;
        }
        expectation += prob * v_next[joint];
        if !odometer(&mut digits, &radix) {
            break;
        }
    }
    Ok(stage + expectation)
}

pub fn backward_recursion(
    params: &SystemParams,
    model: &StochasticModel,
    spec: &DiscretizationSpec,
) -> Result<MdpSolution> {
    Ok(MdpGrid::new(spec, params, model)?.solve(false))
}

pub fn monotone_backward_recursion(
    params: &SystemParams,
    model: &StochasticModel,
    spec: &DiscretizationSpec,
) -> Result<MdpSolution> {
    Ok(MdpGrid::new(spec, params, model)?.solve(true))
}

/// Looks up the stored action for `state` at 0-based slot `t`, with battery
/// and bits rounded down to the grid.
pub fn mdp_act(state: &SystemState, t: usize, table: &MdpTable) -> Result<Action> {
    let index = StateIndexer::new(&table.spec, table.num_users);
    let joint = index.snap(&table.spec, state)?;
    Ok(table.policy.action(t, joint, &table.spec))
}

impl MdpTable {
    pub fn indexer(&self) -> StateIndexer {
        StateIndexer::new(&self.spec, self.num_users)
    }

    pub fn value(&self, t: usize, state: &SystemState) -> Result<f64> {
        let j = self.indexer().index_of(&self.spec, state)?;
        Ok(self.values.values[t][j])
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let grid = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(out, "# {TABLE_MAGIC} {TABLE_VERSION}")?;
        writeln!(out, "# users {}", self.num_users)?;
        writeln!(out, "# horizon {}", self.horizon)?;
        writeln!(out, "# battery {}", grid(&self.spec.battery))?;
        writeln!(out, "# remaining {}", grid(&self.spec.remaining))?;
        writeln!(out, "# power {}", grid(&self.spec.power))?;
        writeln!(out, "# rho {}", grid(&self.spec.rho))?;
        writeln!(out, "# channel {}", grid(&self.spec.channel))?;
        writeln!(out, "# weight {}", grid(&self.spec.weight))?;
        let m = self.num_users;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "state".into(), "value".into()];
        header.extend((1..=m).map(|i| format!("P_{i}")));
        header.extend((1..=m).map(|i| format!("rho_{i}")));
        w.write_record(&header)?;
        for t in 0..self.horizon {
            for (j, v) in self.values.values[t].iter().enumerate() {
                let mut row = vec![(t + 1).to_string(), j.to_string(), format!("{v:?}")];
                row.extend(self.policy.indices(t, j).iter().map(|k| k.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self> {
        let bad = |msg: String| Error::Format(msg);
        let mut header = |key: &str| -> Result<Vec<String>> {
            let mut line = String::new();
            input.read_line(&mut line)?;
            let mut fields = line.split_whitespace();
            if fields.next() != Some("#") || fields.next() != Some(key) {
                return Err(bad(format!(
                    "expected `# {key}` header line, found `{}`",
                    line.trim_end()
                )));
            }
            Ok(fields.map(str::to_owned).collect())
        };
        if header(TABLE_MAGIC)? != [TABLE_VERSION.to_string()] {
            return Err(bad("unsupported MDP table version".into()));
        }
        let num = |v: Vec<String>| -> Result<usize> {
            v.first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad integer in header".into()))
        };
        let num_users = num(header("users")?)?;
        let horizon = num(header("horizon")?)?;
        let mut grid = |key: &str| -> Result<Vec<f64>> {
            header(key)?
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| bad(format!("bad {key} grid value `{s}`")))
                })
                .collect()
        };
        let spec = DiscretizationSpec {
            battery: grid("battery")?,
            remaining: grid("remaining")?,
            power: grid("power")?,
            rho: grid("rho")?,
            channel: grid("channel")?,
            weight: grid("weight")?,
        };
        if num_users == 0 || horizon == 0 {
            return Err(bad("users and horizon must be positive".into()));
        }
        let index = StateIndexer::new(&spec, num_users);
        let w = 2 * num_users;
        let mut values = vec![vec![0.0; index.total]; horizon];
        let mut actions = vec![vec![0u8; index.total * w]; horizon];
        let mut rdr = csv::Reader::from_reader(input);
        let mut rows = 0usize;
        for row in rdr.records() {
            let row = row?;
            if row.len() != 3 + w {
                return Err(bad(format!(
                    "row has {} columns, expected {}",
                    row.len(),
                    3 + w
                )));
            }
            let t: usize = row[0].parse().map_err(|_| bad("bad slot".into()))?;
            let j: usize = row[1].parse().map_err(|_| bad("bad state index".into()))?;
            if t == 0 || t > horizon || j >= index.total {
                return Err(bad(format!("row (t={t}, state={j}) out of range")));
            }
            values[t - 1][j] = row[2].parse().map_err(|_| bad("bad value".into()))?;
            for k in 0..w {
                let v: u8 = row[3 + k]
                    .parse()
                    .map_err(|_| bad("bad action index".into()))?;
                let limit = if k < num_users {
                    spec.power.len()
                } else {
                    spec.rho.len()
                };
                if v as usize >= limit {
                    return Err(bad(format!("action index {v} off the grid")));
                }
                actions[t - 1][j * w + k] = v;
            }
            rows += 1;
        }
        if rows != horizon * index.total {
            return Err(bad(format!(
                "expected {} rows, found {rows}",
                horizon * index.total
            )));
        }
        Ok(Self {
            spec,
            num_users,
            horizon,
            values: ValueTable { values },
            policy: PolicyTable { num_users, actions },
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{audit_action, Distribution, UserProcesses, FEAS_TOL};
    use approx::assert_abs_diff_eq;

    fn one_user(t: usize) -> SystemParams {
        let mut p = SystemParams::two_user(t);
        p.num_users = 1;
        p
    }

    fn st1(b: f64, r: f64, h: f64, w: f64) -> SystemState {
        SystemState {
            battery: vec![b],
            remaining: vec![r],
            channel: vec![h],
            weight: vec![w],
        }
    }

    #[test]
    fn enumerate_examples() {
        let p = one_user(1);
        let model = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let acts = enumerate_feasible_actions(&st1(4.0, 4.0, 1.0, 2.0), &spec, &p, &model).unwrap();
        assert!(acts.iter().all(|a| a.rho[0] <= 1.0));
        let with_bit: Vec<f64> = acts
            .iter()
            .filter(|a| a.rho[0] == 1.0)
            .map(|a| a.power[0])
            .collect();
        assert_eq!(with_bit, vec![2.0, 3.0, 4.0]);
        assert_eq!(acts.len(), 5 + 3);
        assert_eq!(acts[0], Action::zeros(1));

        let none = enumerate_feasible_actions(&st1(0.0, 4.0, 1.0, 2.0), &spec, &p, &model).unwrap();
        assert!(none.iter().all(|a| a.power[0] == 0.0));
        let no_bits =
            enumerate_feasible_actions(&st1(4.0, 0.0, 1.0, 2.0), &spec, &p, &model).unwrap();
        assert!(no_bits.iter().all(|a| a.rho[0] == 0.0));
        assert_eq!(no_bits.len(), 5);
    }

    #[test]
    fn single_slot_value() {
        let p = one_user(1);
        let model = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let s = st1(4.0, 4.0, 1.0, 2.0);
        assert_abs_diff_eq!(
            sol.table.value(0, &s).unwrap(),
            2.0 * (-1f64).exp(),
            epsilon = 1e-12
        );
        let a = mdp_act(&s, 0, &sol.table).unwrap();
        assert_eq!(a.rho, vec![1.0]);
        // lexicographic tie-break: smallest power that carries one bit
        assert_eq!(a.power, vec![2.0]);
        assert_eq!(sol.table.value(0, &st1(4.0, 0.0, 1.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn grid_closure_is_enforced() {
        let p = one_user(2);
        let model = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        let mut spec = DiscretizationSpec::integer(&p, &model);
        spec.rho = vec![0.0, 0.5];
        assert!(matches!(
            spec.validate(&p, &model),
            Err(Error::GridClosure(_))
        ));
        let mut spec = DiscretizationSpec::integer(&p, &model);
        spec.weight = vec![0.0, 1.0];
        assert!(matches!(
            spec.validate(&p, &model),
            Err(Error::GridClosure(_))
        ));
        let mut half = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        half.users[0].energy = Distribution::two_point(0.0, 0.5, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &half);
        assert!(matches!(
            spec.validate(&p, &half),
            Err(Error::GridClosure(_))
        ));
        assert!(DiscretizationSpec::uniform(0.5, &p, &half)
            .validate(&p, &half)
            .is_ok());
    }

    fn random_value(total: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..total).map(|_| rng.gen_range(0.0..3.0)).collect()
    }

    #[test]
    fn factorized_expectation_matches_direct_enumeration() {
        let p = SystemParams::two_user(3);
        let model = StochasticModel::binary(2, 0.3, 0.6, 0.25).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let grid = MdpGrid::new(&spec, &p, &model).unwrap();
        let v = random_value(grid.index.total, 1);
        let u = grid.continuation(&v);
        let mut checked = 0;
        for j in (0..grid.index.total).step_by(97) {
            let locals = grid.index.decode(j);
            let state = grid.index.state(&spec, j);
            for act in grid.feasible_actions(&locals).chunks(4) {
                let fast = grid.q_value(&locals, act, Some(&u));
                let action = Action {
                    power: act[..2].iter().map(|&k| spec.power[k as usize]).collect(),
                    rho: act[2..].iter().map(|&k| spec.rho[k as usize]).collect(),
                };
                let slow =
                    transition_expectation(&state, &action, Some(&v), &model, &spec, &p).unwrap();
                assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn last_slot_expectation_is_stage_cost() {
        let p = one_user(1);
        let model = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let s = st1(3.0, 4.0, 1.0, 2.0);
        let a = Action {
            power: vec![2.0],
            rho: vec![1.0],
        };
        let q = transition_expectation(&s, &a, None, &model, &spec, &p).unwrap();
        assert_abs_diff_eq!(q, 2.0 * (-1f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn off_grid_next_state_is_an_error() {
        let p = one_user(2);
        let model = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let v = vec![0.0; StateIndexer::new(&spec, 1).total];
        let s = st1(3.0, 4.0, 1.0, 2.0);
        let a = Action {
            power: vec![1.5],
            rho: vec![0.0],
        };
        assert!(matches!(
            transition_expectation(&s, &a, Some(&v), &model, &spec, &p),
            Err(Error::GridClosure(_))
        ));
    }

    #[test]
    fn deterministic_chain_matches_best_fixed_sequence() {
        // one arrival at slot 1 (p = 1 then ignored), energy never, single gain
        let p = one_user(3);
        let model = StochasticModel {
            users: vec![UserProcesses {
                energy: Distribution::point(0.0),
                channel: Distribution::point(1.0),
                arrival_prob: 0.0,
            }],
            weight: Distribution::point(1.0),
        };
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let start = st1(4.0, 4.0, 1.0, 1.0);
        // brute force over all grid action sequences
        fn best(
            s: &SystemState,
            t: usize,
            p: &SystemParams,
            spec: &DiscretizationSpec,
            m: &StochasticModel,
        ) -> f64 {
            if t == p.horizon {
                return 0.0;
            }
            let mut b = f64::INFINITY;
            for a in enumerate_feasible_actions(s, spec, p, m).unwrap() {
                let next = SystemState {
                    battery: vec![s.battery[0] - a.power[0]],
                    remaining: vec![s.remaining[0] - a.rho[0]],
                    channel: s.channel.clone(),
                    weight: s.weight.clone(),
                };
                let c = stage_cost(s, &a, p).unwrap() + best(&next, t + 1, p, spec, m);
                b = b.min(c);
            }
            b
        }
        let oracle = best(&start, 0, &p, &spec, &model);
        assert!((sol.table.value(0, &start).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn monotone_matches_full_recursion() {
        let p = SystemParams::two_user(4);
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let full = backward_recursion(&p, &model, &spec).unwrap();
        let fast = monotone_backward_recursion(&p, &model, &spec).unwrap();
        for t in 0..4 {
            for (a, b) in full.table.values.values[t]
                .iter()
                .zip(&fast.table.values.values[t])
            {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(full.table.policy, fast.table.policy);
        assert!(fast.stats.q_evaluations <= full.stats.q_evaluations);
    }

    #[test]
    fn values_are_monotone_and_symmetric() {
        let p = SystemParams::two_user(3);
        let model = StochasticModel::binary(2, 0.5, 0.5, 0.5).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let idx = sol.table.indexer();
        for t in 0..3 {
            let v = &sol.table.values.values[t];
            for j in 0..idx.total {
                assert!(v[j] >= 0.0);
                let locals = idx.decode(j);
                for i in 0..2 {
                    if locals[i].b > 0 {
                        assert!(v[j] <= v[j - idx.battery_stride(i)] + 1e-12);
                    }
                    if locals[i].r > 0 {
                        assert!(v[j] >= v[j - idx.remaining_stride(i)] - 1e-12);
                    }
                }
                let swapped = idx.encode(&[locals[1], locals[0]]);
                assert!((v[j] - v[swapped]).abs() <= 1e-12);
            }
        }
    }

    // Convexity along each axis holds for the continuous problem only; the
    // grid counts are reported, not asserted.
    #[test]
    fn midpoint_convexity_is_reported() {
        let p = SystemParams::two_user(10);
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let idx = sol.table.indexer();
        let (mut checked, mut broken_b, mut broken_r) = (0, 0, 0);
        for v in &sol.table.values.values {
            for j in 0..idx.total {
                let locals = idx.decode(j);
                for i in 0..2 {
                    if locals[i].b >= 1 && locals[i].b + 1 < spec.battery.len() {
                        let s = idx.battery_stride(i);
                        checked += 1;
                        if 2.0 * v[j] > v[j - s] + v[j + s] + 1e-6 {
                            broken_b += 1;
                        }
                    }
                    if locals[i].r >= 1 && locals[i].r + 1 < spec.remaining.len() {
                        let s = idx.remaining_stride(i);
                        checked += 1;
                        if 2.0 * v[j] > v[j - s] + v[j + s] + 1e-6 {
                            broken_r += 1;
                        }
                    }
                }
            }
        }
        eprintln!("midpoint convexity: {checked} triples, {broken_b} battery and {broken_r} bit violations");
        assert!(checked > 0);
    }

    #[test]
    fn stored_actions_are_feasible() {
        let p = SystemParams::two_user(2);
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let idx = sol.table.indexer();
        for t in 0..2 {
            for j in 0..idx.total {
                let s = idx.state(&spec, j);
                let a = sol.table.policy.action(t, j, &spec);
                audit_action(&s, &a, &p, FEAS_TOL).unwrap();
            }
        }
    }

    #[test]
    fn act_rounds_down() {
        let p = one_user(2);
        let model = StochasticModel::binary(1, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let off = st1(3.7, 2.5, 1.0, 1.0);
        let on = st1(3.0, 2.0, 1.0, 1.0);
        assert_eq!(
            mdp_act(&off, 0, &sol.table).unwrap(),
            mdp_act(&on, 0, &sol.table).unwrap()
        );
        let a = mdp_act(&off, 0, &sol.table).unwrap();
        audit_action(&off, &a, &p, FEAS_TOL).unwrap();
        assert!(matches!(
            mdp_act(&st1(1.0, 1.0, 0.5, 1.0), 0, &sol.table),
            Err(Error::OffGrid(_))
        ));
    }

    #[test]
    fn table_round_trip() {
        let p = SystemParams::two_user(2);
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        let spec = DiscretizationSpec::integer(&p, &model);
        let sol = backward_recursion(&p, &model, &spec).unwrap();
        let mut buf = Vec::new();
        sol.table.write(&mut buf).unwrap();
        let back = MdpTable::read(buf.as_slice()).unwrap();
        assert_eq!(back, sol.table);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\nt,state,value,P_1,P_2,rho_1,rho_2\n"));
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(MdpTable::read(truncated.as_bytes()).is_err());
    }
}
