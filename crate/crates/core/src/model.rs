//! Domain types and per-slot dynamics.
//!
//! Slot timing: at the start of slot `t` the arrivals `E(t)`, `A(t)`, `W(t)`
//! and the channel `h(t)` are revealed and folded into the state, then an
//! action is chosen, then the stage cost `sum_i w_i f(r_i - rho_i)` is
//! charged. All users start from `B = r = w = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rate_region;

/// Absolute tolerance used by every feasibility check.
pub const FEAS_TOL: f64 = 1e-9;

/// Convex increasing distortion `f` applied to the un-transmitted bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostFn {
    /// `f(x) = exp(x - r_max)`, so that `f(r_max) = 1`.
    ExpDistortion { r_max: f64 },
}

impl CostFn {
    pub fn from_name(name: &str, r_max: f64) -> Option<Self> {
        match name {
            "exp-distortion" => Some(CostFn::ExpDistortion { r_max }),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostFn::ExpDistortion { .. } => "exp-distortion",
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            CostFn::ExpDistortion { r_max } => (x - r_max).exp(),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            CostFn::ExpDistortion { r_max } => (x - r_max).exp(),
        }
    }

    #[inline]
    pub fn second_derivative(&self, x: f64) -> f64 {
        match *self {
            CostFn::ExpDistortion { r_max } => (x - r_max).exp(),
        }
    }
}

/// Concave increasing rate-power map `g` with `g(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateFn {
    /// `g(x) = ln(1 + x)`.
    LogRate,
}

impl RateFn {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "log-rate" => Some(RateFn::LogRate),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RateFn::LogRate => "log-rate",
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            RateFn::LogRate => x.ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            RateFn::LogRate => 1.0 / (1.0 + x),
        }
    }

    #[inline]
    pub fn second_derivative(&self, x: f64) -> f64 {
        match self {
            RateFn::LogRate => -1.0 / ((1.0 + x) * (1.0 + x)),
        }
    }
}

/// Static problem description.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemParams {
    pub num_users: usize,
    pub horizon: usize,
    pub r_max: f64,
    pub b_max: f64,
    pub cost_fn: CostFn,
    pub rate_fn: RateFn,
}

impl SystemParams {
    pub fn new(
        num_users: usize,
        horizon: usize,
        r_max: f64,
        b_max: f64,
        cost_fn: CostFn,
        rate_fn: RateFn,
    ) -> Result<Self> {
        let params = Self {
            num_users,
            horizon,
            r_max,
            b_max,
            cost_fn,
            rate_fn,
        };
        params.validate()?;
        Ok(params)
    }

    /// Two users, 4-bit versions, 4-unit batteries, `f = exp(x - 4)`, `g = ln(1 + x)`.
    pub fn two_user(horizon: usize) -> Self {
        Self {
            num_users: 2,
            horizon,
            r_max: 4.0,
            b_max: 4.0,
            cost_fn: CostFn::ExpDistortion { r_max: 4.0 },
            rate_fn: RateFn::LogRate,
        }
    }

    /// Numerical check of the structural assumptions on `f` and `g`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.num_users == 0 {
            return bad("num_users must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return bad(format!("r_max must be positive, got {}", self.r_max));
        }
        if !(self.b_max > 0.0 && self.b_max.is_finite()) {
            return bad(format!("b_max must be positive, got {}", self.b_max));
        }
        let g = self.rate_fn;
        if g.value(0.0).abs() > 1e-12 {
            return bad("rate function must satisfy g(0) = 0".into());
        }
        let f = self.cost_fn;
        if (f.value(self.r_max) - 1.0).abs() > 1e-12 {
            return bad("cost function must satisfy f(r_max) = 1".into());
        }
        if f.value(0.0) < 0.0 {
            return bad("cost function must satisfy f(0) >= 0".into());
        }
        const N: usize = 256;
        let fs: Vec<f64> = (0..=N)
            .map(|k| f.value(self.r_max * k as f64 / N as f64))
            .collect();
        let g_top = 4.0 * self.b_max;
        let gs: Vec<f64> = (0..=N)
            .map(|k| g.value(g_top * k as f64 / N as f64))
            .collect();
        for k in 1..=N {
            if fs[k] < fs[k - 1] - 1e-12 {
                return bad("cost function is not non-decreasing".into());
            }
            if gs[k] < gs[k - 1] - 1e-12 {
                return bad("rate function is not non-decreasing".into());
            }
        }
        for k in 1..N {
            if fs[k] > 0.5 * (fs[k - 1] + fs[k + 1]) + 1e-12 {
                return bad("cost function is not midpoint-convex".into());
            }
            if gs[k] < 0.5 * (gs[k - 1] + gs[k + 1]) - 1e-12 {
                return bad("rate function is not midpoint-concave".into());
            }
        }
        Ok(())
    }
}

/// Finite discrete distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::InvalidParams(format!(
                "distribution needs matching non-empty support/probs ({} vs {})",
                support.len(),
                probs.len()
            )));
        }
        if support.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParams(
                "support values must be non-negative".into(),
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidParams(
                "probabilities must be non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { support, probs })
    }

    pub fn point(value: f64) -> Self {
        Self {
            support: vec![value],
            probs: vec![1.0],
        }
    }

    /// `high` with probability `p`, `low` otherwise.
    pub fn two_point(low: f64, high: f64, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParams(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Self::new(vec![low, high], vec![1.0 - p, p])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Iterator over outcomes with positive probability.
    pub fn outcomes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.support
            .iter()
            .copied()
            .zip(self.probs.iter().copied())
            .filter(|&(_, p)| p > 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.outcomes().map(|(v, p)| v * p).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (&v, &p) in self.support.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return v;
            }
        }
        // u landed in the rounding slack above the cumulative sum.
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.support[last]
    }

    pub fn contains(&self, x: f64) -> bool {
        self.support.iter().any(|&v| (v - x).abs() <= FEAS_TOL)
    }
}

/// Exogenous processes seen by one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserProcesses {
    pub energy: Distribution,
    pub channel: Distribution,
    pub arrival_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticModel {
    pub users: Vec<UserProcesses>,
    pub weight: Distribution,
}

impl StochasticModel {
    /// Identical users: one energy unit w.p. `e_prob`, channel gain 0.1 w.p. 0.4
    /// (else 1), version arrival w.p. `p_prob`, weight 2 w.p. `i_prob` (else 1).
    pub fn binary(num_users: usize, e_prob: f64, p_prob: f64, i_prob: f64) -> Result<Self> {
        let user = UserProcesses {
            energy: Distribution::two_point(0.0, 1.0, e_prob)?,
            channel: Distribution::new(vec![0.1, 1.0], vec![0.4, 0.6])?,
            arrival_prob: p_prob,
        };
        let model = Self {
            users: vec![user; num_users],
            weight: Distribution::two_point(1.0, 2.0, i_prob)?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, u) in self.users.iter().enumerate() {
            if !(0.0..=1.0).contains(&u.arrival_prob) {
                return Err(Error::InvalidParams(format!(
                    "user {i}: arrival probability {} outside [0, 1]",
                    u.arrival_prob
                )));
            }
            if u.channel.support().iter().any(|&h| h <= 0.0) {
                return Err(Error::InvalidParams(format!(
                    "user {i}: channel gains must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// The per-slot MDP state `(B, r, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub battery: Vec<f64>,
    pub remaining: Vec<f64>,
    pub channel: Vec<f64>,
    pub weight: Vec<f64>,
}

impl SystemState {
    /// State before slot 1: empty batteries, no version, zero weights.
    pub fn initial(num_users: usize) -> Self {
        Self {
            battery: vec![0.0; num_users],
            remaining: vec![0.0; num_users],
            channel: vec![0.0; num_users],
            weight: vec![0.0; num_users],
        }
    }

    pub fn num_users(&self) -> usize {
        self.battery.len()
    }

    /// Folds slot `t` (0-based) of `path` into the state left by `action`.
    pub fn advance(
        &self,
        action: &Action,
        path: &SamplePath,
        t: usize,
        params: &SystemParams,
    ) -> Result<SystemState> {
        let m = self.num_users();
        let mut next = SystemState::initial(m);
        for i in 0..m {
            let arrived = path.arrival[t][i];
            next.battery[i] = evolve_battery(
                self.battery[i],
                action.power[i],
                path.energy[t][i],
                params.b_max,
            )?;
            next.remaining[i] =
                evolve_bits(self.remaining[i], action.rho[i], arrived, params.r_max)?;
            next.weight[i] = evolve_weight(self.weight[i], arrived, path.weight[t][i]);
            next.channel[i] = path.channel[t][i];
        }
        Ok(next)
    }

    /// Flat feature vector `(B, r, h, w)`.
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.num_users());
        v.extend_from_slice(&self.battery);
        v.extend_from_slice(&self.remaining);
        v.extend_from_slice(&self.channel);
        v.extend_from_slice(&self.weight);
        v
    }

    pub fn check_bounds(&self, params: &SystemParams) -> Result<()> {
        for i in 0..self.num_users() {
            let b = self.battery[i];
            let r = self.remaining[i];
            if !(-FEAS_TOL..=params.b_max + FEAS_TOL).contains(&b) {
                return Err(Error::InvalidParams(format!(
                    "battery {b} of user {i} out of range"
                )));
            }
            if !(-FEAS_TOL..=params.r_max + FEAS_TOL).contains(&r) {
                return Err(Error::InvalidParams(format!(
                    "remaining bits {r} of user {i} out of range"
                )));
            }
            if self.weight[i] < 0.0 {
                return Err(Error::InvalidParams(format!(
                    "negative weight for user {i}"
                )));
            }
        }
        Ok(())
    }
}

/// The per-slot decision `(P, rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub power: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Action {
    pub fn zeros(num_users: usize) -> Self {
        Self {
            power: vec![0.0; num_users],
            rho: vec![0.0; num_users],
        }
    }

    pub fn num_users(&self) -> usize {
        self.power.len()
    }
}

/// Checks constraints (power, bits, rate region) of `action` at `state`.
/// Returns the name of the first violated constraint.
pub fn audit_action(
    state: &SystemState,
    action: &Action,
    params: &SystemParams,
    tol: f64,
) -> std::result::Result<(), String> {
    let m = state.num_users();
    if action.num_users() != m || action.rho.len() != m {
        return Err(format!(
            "action has {} users, state has {m}",
            action.num_users()
        ));
    }
    for i in 0..m {
        let (p, rho) = (action.power[i], action.rho[i]);
        if !p.is_finite() || !rho.is_finite() {
            return Err(format!("non-finite action for user {i}"));
        }
        if p < -tol {
            return Err(format!("power non-negativity (user {i}: P={p})"));
        }
        if rho < -tol {
            return Err(format!("bits non-negativity (user {i}: rho={rho})"));
        }
        if p > state.battery[i] + tol {
            return Err(format!(
                "power budget P<=B (user {i}: P={p}, B={})",
                state.battery[i]
            ));
        }
        if rho > state.remaining[i] + tol {
            return Err(format!(
                "bit budget rho<=r (user {i}: rho={rho}, r={})",
                state.remaining[i]
            ));
        }
    }
    let inst = rate_region::RateRegionInstance::new(&state.channel, &action.power, params.rate_fn);
    if !rate_region::is_rate_feasible(&inst, &action.rho, tol).map_err(|e| e.to_string())? {
        return Err("rate region".into());
    }
    Ok(())
}

/// One realization of `(E, h, A, W)` over the horizon, indexed `[t][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    pub seed: u64,
    pub energy: Vec<Vec<f64>>,
    pub channel: Vec<Vec<f64>>,
    pub arrival: Vec<Vec<bool>>,
    pub weight: Vec<Vec<f64>>,
}

impl SamplePath {
    pub fn horizon(&self) -> usize {
        self.energy.len()
    }

    pub fn num_users(&self) -> usize {
        self.energy.first().map_or(0, Vec::len)
    }

    pub fn check_dims(&self, params: &SystemParams) -> Result<()> {
        let t = params.horizon;
        let m = params.num_users;
        for rows in [&self.energy, &self.channel, &self.weight] {
            if rows.len() != t {
                return Err(Error::Dimension {
                    expected: t,
                    got: rows.len(),
                });
            }
            if let Some(bad) = rows.iter().find(|r| r.len() != m) {
                return Err(Error::Dimension {
                    expected: m,
                    got: bad.len(),
                });
            }
        }
        if self.arrival.len() != t {
            return Err(Error::Dimension {
                expected: t,
                got: self.arrival.len(),
            });
        }
        if let Some(bad) = self.arrival.iter().find(|r| r.len() != m) {
            return Err(Error::Dimension {
                expected: m,
                got: bad.len(),
            });
        }
        Ok(())
    }
}

/// `B(t) = min(B(t-1) - P(t-1) + E(t), B_max)`.
pub fn evolve_battery(b_prev: f64, p_prev: f64, e_new: f64, b_max: f64) -> Result<f64> {
    if p_prev > b_prev + FEAS_TOL {
        return Err(Error::EnergyCausality {
            power: p_prev,
            battery: b_prev,
        });
    }
    Ok((b_prev - p_prev + e_new).min(b_max).max(0.0))
}

/// Remaining bits: reset to `r_max` on a new version, else drained by `rho_prev`.
pub fn evolve_bits(r_prev: f64, rho_prev: f64, arrived: bool, r_max: f64) -> Result<f64> {
    if rho_prev > r_prev + FEAS_TOL {
        return Err(Error::BitBudget {
            rho: rho_prev,
            remaining: r_prev,
        });
    }
    if arrived {
        Ok(r_max)
    } else {
        Ok((r_prev - rho_prev).max(0.0))
    }
}

pub fn evolve_weight(w_prev: f64, arrived: bool, w_new: f64) -> f64 {
    if arrived {
        w_new
    } else {
        w_prev
    }
}

/// `sum_i w_i f(r_i - rho_i)`.
pub fn stage_cost(state: &SystemState, action: &Action, params: &SystemParams) -> Result<f64> {
    let m = state.num_users();
    if action.rho.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: action.rho.len(),
        });
    }
    let mut cost = 0.0;
    for i in 0..m {
        let left = state.remaining[i] - action.rho[i];
        if left < -FEAS_TOL {
            return Err(Error::BitBudget {
                rho: action.rho[i],
                remaining: state.remaining[i],
            });
        }
        if state.weight[i] != 0.0 {
            cost += state.weight[i] * params.cost_fn.value(left.max(0.0));
        }
    }
    Ok(cost)
}

/// Draws a path from `model`; deterministic in `seed`.
///
/// Per slot and user the draw order is energy, channel, arrival, weight; the
/// weight is drawn even without an arrival so streams stay aligned across
/// parameter sweeps.
pub fn sample_path(model: &StochasticModel, params: &SystemParams, seed: u64) -> SamplePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, m) = (params.horizon, params.num_users);
    let mut path = SamplePath {
        seed,
        energy: Vec::with_capacity(t_len),
        channel: Vec::with_capacity(t_len),
        arrival: Vec::with_capacity(t_len),
        weight: Vec::with_capacity(t_len),
    };
    for _ in 0..t_len {
        let mut e = Vec::with_capacity(m);
        let mut h = Vec::with_capacity(m);
        let mut a = Vec::with_capacity(m);
        let mut w = Vec::with_capacity(m);
        for user in &model.users[..m] {
            e.push(user.energy.sample(&mut rng));
            h.push(user.channel.sample(&mut rng));
            let u: f64 = rng.gen();
            a.push(u < user.arrival_prob);
            w.push(model.weight.sample(&mut rng));
        }
        path.energy.push(e);
        path.channel.push(h);
        path.arrival.push(a);
        path.weight.push(w);
    }
    path
}

/// Seed of the `index`-th path in a stream rooted at `base` (splitmix64).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
