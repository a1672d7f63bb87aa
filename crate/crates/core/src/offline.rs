//! Offline (non-causal) optimum for a fully known sample path.
//!
//! The whole horizon becomes one convex program in `P_i(t)`, `rho_i(t)` and
//! an auxiliary battery level `B_i(t)`. The battery `min` is relaxed to the
//! pair `B(t) <= B(t-1) - P(t-1) + E(t)`, `B(t) <= B_max`; remaining bits are
//! eliminated along the known arrival pattern, so within an inter-arrival
//! window `r(t) = r_max - sum of rho since the arrival`. Variables that the
//! path forces to zero (no energy harvested yet, no version yet) are dropped.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    derive_seed, evolve_weight, sample_path, stage_cost, Action, CostFn, RateFn, SamplePath,
    StochasticModel, SystemParams, SystemState,
};
use crate::nn::{DatasetRecord, TrainingDataset};
use crate::solver::{self, ConvexProgram, Linear, SmoothFn, SolveReport, SolverOptions};

/// Seed stream used for training paths.
pub const TRAINING_STREAM: u64 = 1;

/// `sum_k w_k f(base_k - sum_{j in S_k} x_j)`.
#[derive(Clone, Debug)]
pub struct Distortion {
    pub cost_fn: CostFn,
    pub terms: Vec<DistortionTerm>,
}

#[derive(Clone, Debug)]
pub struct DistortionTerm {
    pub weight: f64,
    pub base: f64,
    pub rho: Vec<usize>,
}

impl DistortionTerm {
    fn argument(&self, x: &[f64]) -> f64 {
        self.base - self.rho.iter().map(|&k| x[k]).sum::<f64>()
    }
}

impl SmoothFn for Distortion {
    fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|term| term.weight * self.cost_fn.value(term.argument(x)))
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        for term in &self.terms {
            let d = -term.weight * self.cost_fn.derivative(term.argument(x));
            out.extend(term.rho.iter().map(|&k| (k, d)));
        }
    }

    fn add_hessian(&self, x: &[f64], scale: f64, hess: &mut DMatrix<f64>) {
        for term in &self.terms {
            let d2 = scale * term.weight * self.cost_fn.second_derivative(term.argument(x));
            for &i in &term.rho {
                for &j in &term.rho {
                    hess[(i, j)] += d2;
                }
            }
        }
    }
}

/// `sum_{i in S} rho_i - g(sum_{i in S} h_i P_i) <= 0`.
#[derive(Clone, Debug)]
pub struct RateCut {
    pub rate_fn: RateFn,
    pub rho: Vec<usize>,
    /// `(variable, gain)` pairs of the powers in the subset.
    pub power: Vec<(usize, f64)>,
    /// Received power from users whose power is fixed.
    pub fixed_snr: f64,
}

impl RateCut {
    fn snr(&self, x: &[f64]) -> f64 {
        self.fixed_snr + self.power.iter().map(|&(k, h)| h * x[k]).sum::<f64>()
    }
}

impl SmoothFn for RateCut {
    fn value(&self, x: &[f64]) -> f64 {
        self.rho.iter().map(|&k| x[k]).sum::<f64>() - self.rate_fn.value(self.snr(x))
    }

    fn gradient(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        let dg = self.rate_fn.derivative(self.snr(x));
        out.extend(self.rho.iter().map(|&k| (k, 1.0)));
        out.extend(self.power.iter().map(|&(k, h)| (k, -h * dg)));
    }

    fn add_hessian(&self, x: &[f64], scale: f64, hess: &mut DMatrix<f64>) {
        let d2 = -scale * self.rate_fn.second_derivative(self.snr(x));
        for &(i, hi) in &self.power {
            for &(j, hj) in &self.power {
                hess[(i, j)] += d2 * hi * hj;
            }
        }
    }
}

/// Variable layout of an offline program, indexed `[t][i]`.
#[derive(Clone, Debug)]
pub struct OfflineLayout {
    pub power: Vec<Vec<Option<usize>>>,
    pub rho: Vec<Vec<Option<usize>>>,
    pub battery: Vec<Vec<Option<usize>>>,
    pub dim: usize,
}

impl OfflineLayout {
    /// Expands a solution vector into per-slot actions (dropped variables are 0).
    pub fn actions(&self, x: &[f64]) -> Vec<Action> {
        let pick = |v: Option<usize>| v.map_or(0.0, |k| x[k]);
        self.power
            .iter()
            .zip(&self.rho)
            .map(|(p, r)| Action {
                power: p.iter().map(|&v| pick(v)).collect(),
                rho: r.iter().map(|&v| pick(v)).collect(),
            })
            .collect()
    }

    pub fn aux_battery(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.battery
            .iter()
            .map(|row| row.iter().map(|v| v.map_or(0.0, |k| x[k])).collect())
            .collect()
    }
}

/// Builds the offline convex program of `path`, with a strictly feasible start.
pub fn build_offline_program(
    path: &SamplePath,
    params: &SystemParams,
) -> Result<(ConvexProgram, OfflineLayout)> {
    path.check_dims(params)?;
    let (t_len, m) = (params.horizon, params.num_users);
    let mut layout = OfflineLayout {
        power: vec![vec![None; m]; t_len],
        rho: vec![vec![None; m]; t_len],
        battery: vec![vec![None; m]; t_len],
        dim: 0,
    };
    let mut next = 0usize;
    let mut alloc = || {
        next += 1;
        next - 1
    };
    for i in 0..m {
        let mut harvested = 0.0;
        let mut has_version = false;
        for t in 0..t_len {
            harvested += path.energy[t][i];
            has_version |= path.arrival[t][i];
            if harvested > 0.0 {
                layout.battery[t][i] = Some(alloc());
                layout.power[t][i] = Some(alloc());
                if has_version {
                    layout.rho[t][i] = Some(alloc());
                }
            }
        }
    }
    layout.dim = next;

    // Objective: one distortion term per slot with a non-zero weight.
    let mut terms = Vec::new();
    let mut windows: Vec<Vec<usize>> = Vec::new();
    for i in 0..m {
        let mut w = 0.0;
        let mut window: Option<Vec<usize>> = None;
        for t in 0..t_len {
            let arrived = path.arrival[t][i];
            w = evolve_weight(w, arrived, path.weight[t][i]);
            if arrived {
                if let Some(done) = window.take() {
                    windows.push(done);
                }
                window = Some(Vec::new());
            }
            if let Some(win) = window.as_mut() {
                if let Some(k) = layout.rho[t][i] {
                    win.push(k);
                }
                if w != 0.0 {
                    terms.push(DistortionTerm {
                        weight: w,
                        base: params.r_max,
                        rho: win.clone(),
                    });
                }
            }
        }
        if let Some(done) = window {
            windows.push(done);
        }
    }
    let objective = Distortion {
        cost_fn: params.cost_fn,
        terms,
    };
    let mut prog = ConvexProgram::new(layout.dim, Box::new(objective));

    for i in 0..m {
        for t in 0..t_len {
            let Some(b) = layout.battery[t][i] else {
                continue;
            };
            let p = layout.power[t][i].expect("power exists with battery");
            // B(t) - B(t-1) + P(t-1) <= E(t)
            let mut chain = vec![(b, 1.0)];
            if t > 0 {
                if let Some(bp) = layout.battery[t - 1][i] {
                    chain.push((bp, -1.0));
                }
                if let Some(pp) = layout.power[t - 1][i] {
                    chain.push((pp, 1.0));
                }
            }
            prog.constrain(Linear {
                terms: chain,
                rhs: path.energy[t][i],
            });
            prog.constrain(Linear {
                terms: vec![(p, 1.0), (b, -1.0)],
                rhs: 0.0,
            });
            prog.bound(b, f64::NEG_INFINITY, params.b_max);
            prog.bound(p, 0.0, f64::INFINITY);
            if let Some(r) = layout.rho[t][i] {
                prog.bound(r, 0.0, f64::INFINITY);
            }
        }
    }
    // Bit budget per inter-arrival window; only the cumulative sum at the end
    // of the window can bind since every rho is non-negative.
    for win in windows.iter().filter(|w| !w.is_empty()) {
        prog.constrain(Linear {
            terms: win.iter().map(|&k| (k, 1.0)).collect(),
            rhs: params.r_max,
        });
    }
    for t in 0..t_len {
        let active: Vec<usize> = (0..m).filter(|&i| layout.rho[t][i].is_some()).collect();
        let n_active = active.len();
        for mask in 1u32..(1u32 << n_active) {
            let members: Vec<usize> = (0..n_active)
                .filter(|k| mask & (1 << k) != 0)
                .map(|k| active[k])
                .collect();
            prog.constrain(RateCut {
                rate_fn: params.rate_fn,
                rho: members.iter().map(|&i| layout.rho[t][i].unwrap()).collect(),
                power: members
                    .iter()
                    .map(|&i| (layout.power[t][i].unwrap(), path.channel[t][i]))
                    .collect(),
                fixed_snr: 0.0,
            });
        }
    }

    prog.start = Some(offline_start(path, params, &layout));
    if !prog.is_strictly_feasible(prog.start.as_ref().unwrap()) {
        return Err(Error::InfeasibleStart(format!(
            "offline start for path {} violates constraints by {:e}",
            path.seed,
            prog.max_violation(prog.start.as_ref().unwrap())
        )));
    }
    Ok((prog, layout))
}

/// Interior point: batteries just under their caps, half the battery as
/// power, and a small fraction of the single-user rate as bits.
fn offline_start(path: &SamplePath, params: &SystemParams, layout: &OfflineLayout) -> Vec<f64> {
    let (t_len, m) = (params.horizon, params.num_users);
    let mut x = vec![0.0; layout.dim];
    for i in 0..m {
        let (mut b_prev, mut p_prev) = (0.0, 0.0);
        for t in 0..t_len {
            let (Some(b), Some(p)) = (layout.battery[t][i], layout.power[t][i]) else {
                continue;
            };
            let cap = (b_prev - p_prev + path.energy[t][i]).min(params.b_max);
            x[b] = 0.95 * cap;
            x[p] = 0.5 * x[b];
            if let Some(r) = layout.rho[t][i] {
                let rate = params.rate_fn.value(path.channel[t][i] * x[p]);
                x[r] = (0.5 * rate / m as f64).min(0.5 * params.r_max / t_len as f64);
            }
            b_prev = x[b];
            p_prev = x[p];
        }
    }
    x
}

#[derive(Clone, Debug)]
pub struct OfflineSolution {
    pub actions: Vec<Action>,
    /// Auxiliary (relaxed) battery levels from the program, `[t][i]`.
    pub aux_battery: Vec<Vec<f64>>,
    /// States along the trajectory under the exact dynamics, `[t]`.
    pub states: Vec<SystemState>,
    /// `(1/TM) sum_t sum_i w_i(t) f(r_i(t) - rho_i(t))`.
    pub objective: f64,
    pub report: SolveReport,
}

/// Replays `actions` on `path` under the exact dynamics; returns the visited
/// states and the normalized objective.
pub fn replay(
    path: &SamplePath,
    params: &SystemParams,
    actions: &[Action],
) -> Result<(Vec<SystemState>, f64)> {
    let m = params.num_users;
    let mut state = SystemState::initial(m);
    let mut prev = Action::zeros(m);
    let mut states = Vec::with_capacity(params.horizon);
    let mut total = 0.0;
    for (t, action) in actions.iter().enumerate() {
        state = state.advance(&prev, path, t, params)?;
        total += stage_cost(&state, action, params)?;
        states.push(state.clone());
        prev = action.clone();
    }
    Ok((states, total / (params.horizon * m) as f64))
}

pub fn solve_offline(
    path: &SamplePath,
    params: &SystemParams,
    opts: &SolverOptions,
) -> Result<OfflineSolution> {
    let (prog, layout) = build_offline_program(path, params)?;
    let (x, report) = solver::solve(&prog, opts)?;
    let actions = layout.actions(&x);
    let (states, objective) = replay(path, params, &actions)?;
    Ok(OfflineSolution {
        actions,
        aux_battery: layout.aux_battery(&x),
        states,
        objective,
        report,
    })
}

/// Solves `paths` offline problems and pairs every visited state with the
/// offline action taken there.
pub fn generate_dataset(
    model: &StochasticModel,
    params: &SystemParams,
    paths: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Result<TrainingDataset> {
    let per_path: Vec<Result<Vec<DatasetRecord>>> = (0..paths as u64)
        .into_par_iter()
        .map(|k| {
            let path_seed = derive_seed(seed, TRAINING_STREAM, k);
            let path = sample_path(model, params, path_seed);
            let sol = solve_offline(&path, params, opts).map_err(|e| Error::PathSolve {
                seed: path_seed,
                source: Box::new(e),
            })?;
            Ok(sol
                .states
                .iter()
                .zip(&sol.actions)
                .enumerate()
                .map(|(t, (s, a))| DatasetRecord {
                    input: s.features(),
                    target: a.power.iter().chain(&a.rho).copied().collect(),
                    path_seed,
                    slot: t + 1,
                })
                .collect())
        })
        .collect();
    let mut records = Vec::with_capacity(paths * params.horizon);
    for r in per_path {
        records.extend(r?);
    }
    Ok(TrainingDataset {
        num_users: params.num_users,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{audit_action, evolve_battery, FEAS_TOL};
    use approx::assert_abs_diff_eq;

    fn path_1user(energy: &[f64], arrival: &[bool], channel: &[f64], weight: &[f64]) -> SamplePath {
        SamplePath {
            seed: 0,
            energy: energy.iter().map(|&e| vec![e]).collect(),
            channel: channel.iter().map(|&h| vec![h]).collect(),
            arrival: arrival.iter().map(|&a| vec![a]).collect(),
            weight: weight.iter().map(|&w| vec![w]).collect(),
        }
    }

    fn params(m: usize, t: usize) -> SystemParams {
        let mut p = SystemParams::two_user(t);
        p.num_users = m;
        p
    }

    #[test]
    fn two_slot_analytic_split() {
        let p = params(1, 2);
        let path = path_1user(&[4.0, 0.0], &[true, false], &[1.0, 1.0], &[1.0, 1.0]);
        let sol = solve_offline(&path, &p, &SolverOptions::default()).unwrap();
        let p1 = 7.0 - 7f64.sqrt() - 1.0;
        assert_abs_diff_eq!(sol.actions[0].power[0], p1, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.actions[1].power[0], 4.0 - p1, epsilon = 1e-3);
        for a in &sol.actions {
            assert_abs_diff_eq!(a.rho[0], a.power[0].ln_1p(), epsilon = 1e-5);
        }
        assert_abs_diff_eq!(sol.objective, 0.369 / 2.0, epsilon = 1e-3);
        assert!(sol.report.kkt_residual <= 1e-6);
    }

    #[test]
    fn zero_energy_path() {
        let p = params(2, 3);
        let path = SamplePath {
            seed: 0,
            energy: vec![vec![0.0, 0.0]; 3],
            channel: vec![vec![1.0, 0.1]; 3],
            arrival: vec![vec![true, false], vec![false, true], vec![false, false]],
            weight: vec![vec![2.0, 1.0]; 3],
        };
        let sol = solve_offline(&path, &p, &SolverOptions::default()).unwrap();
        assert!(sol
            .actions
            .iter()
            .all(|a| a.power.iter().chain(&a.rho).all(|&v| v == 0.0)));
        // user 0 holds 4 bits at weight 2 for 3 slots, user 1 at weight 1 for 2
        assert_abs_diff_eq!(sol.objective, (2.0 * 3.0 + 2.0) / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn no_arrivals_costs_nothing() {
        let p = params(2, 4);
        let path = SamplePath {
            seed: 0,
            energy: vec![vec![1.0, 1.0]; 4],
            channel: vec![vec![1.0, 0.1]; 4],
            arrival: vec![vec![false, false]; 4],
            weight: vec![vec![2.0, 1.0]; 4],
        };
        let sol = solve_offline(&path, &p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.objective, 0.0);
    }

    fn check_solution(path: &SamplePath, p: &SystemParams, sol: &OfflineSolution) {
        let m = p.num_users;
        for (t, (s, a)) in sol.states.iter().zip(&sol.actions).enumerate() {
            audit_action(s, a, p, FEAS_TOL).unwrap_or_else(|e| panic!("slot {t}: {e}"));
            for i in 0..m {
                assert!(sol.aux_battery[t][i] <= s.battery[i] + 1e-9);
            }
        }
        // energy causality: cumulative spend never exceeds cumulative harvest
        for i in 0..m {
            let (mut spent, mut got) = (0.0, 0.0);
            for t in 0..p.horizon {
                got += path.energy[t][i];
                spent += sol.actions[t].power[i];
                assert!(spent <= got + 1e-9);
            }
        }
        let total: f64 = sol
            .states
            .iter()
            .zip(&sol.actions)
            .map(|(s, a)| stage_cost(s, a, p).unwrap())
            .sum();
        assert_abs_diff_eq!(
            sol.objective,
            total / (p.horizon * m) as f64,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            sol.objective,
            sol.report.objective / (p.horizon * m) as f64,
            epsilon = 1e-9
        );
    }

    #[test]
    fn random_paths_satisfy_constraints() {
        let p = params(2, 10);
        for (k, e) in [0.2, 0.5, 0.9].iter().enumerate() {
            let model = StochasticModel::binary(2, *e, 0.4, 0.5).unwrap();
            for seed in 0..5 {
                let path = sample_path(&model, &p, 100 * k as u64 + seed);
                let sol = solve_offline(&path, &p, &SolverOptions::default()).unwrap();
                check_solution(&path, &p, &sol);
                assert!(
                    sol.report.kkt_residual <= 1e-6,
                    "kkt {}",
                    sol.report.kkt_residual
                );
            }
        }
    }

    #[test]
    fn epigraph_is_tight_where_power_binds() {
        let p = params(2, 10);
        let model = StochasticModel::binary(2, 0.5, 0.5, 0.5).unwrap();
        for seed in 0..5 {
            let path = sample_path(&model, &p, seed);
            let sol = solve_offline(&path, &p, &SolverOptions::default()).unwrap();
            for t in 0..p.horizon {
                for i in 0..2 {
                    let aux = sol.aux_battery[t][i];
                    let power = sol.actions[t].power[i];
                    // power constraint binding with positive marginal value
                    if aux > 1e-3 && aux - power < 1e-7 && sol.actions[t].rho[i] > 1e-3 {
                        let (bp, pp) = if t == 0 {
                            (0.0, 0.0)
                        } else {
                            (sol.aux_battery[t - 1][i], sol.actions[t - 1].power[i])
                        };
                        let cap = evolve_battery(bp, pp, path.energy[t][i], p.b_max).unwrap();
                        assert!((aux - cap).abs() <= 1e-6, "t={t} i={i} aux={aux} cap={cap}");
                    }
                }
            }
        }
    }

    #[test]
    fn convex_on_feasible_segments() {
        let p = params(2, 6);
        let model = StochasticModel::binary(2, 0.7, 0.5, 0.5).unwrap();
        let path = sample_path(&model, &p, 11);
        let (prog, _) = build_offline_program(&path, &p).unwrap();
        let (x, _) = solver::solve(&prog, &SolverOptions::default()).unwrap();
        let x0 = prog.start.clone().unwrap();
        assert!(prog.midpoint_margin(&x0, &x) >= -1e-8);
    }

    #[test]
    fn program_gradients_match_differences() {
        let p = params(2, 5);
        let model = StochasticModel::binary(2, 0.8, 0.6, 0.5).unwrap();
        let path = sample_path(&model, &p, 5);
        let (prog, _) = build_offline_program(&path, &p).unwrap();
        let x = prog.start.clone().unwrap();
        assert!(solver::gradient_check(prog.objective.as_ref(), &x, 1e-6) <= 1e-5);
        for c in &prog.constraints {
            assert!(solver::gradient_check(c.as_ref(), &x, 1e-7) <= 1e-5);
        }
    }

    #[test]
    fn dataset_bookkeeping() {
        let p = params(2, 10);
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        let ds = generate_dataset(&model, &p, 1, 9, &SolverOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 10);
        for (t, r) in ds.records.iter().enumerate() {
            assert_eq!(r.input.len(), 8);
            assert_eq!(r.target.len(), 4);
            assert_eq!(r.slot, t + 1);
            let s = SystemState {
                battery: r.input[0..2].to_vec(),
                remaining: r.input[2..4].to_vec(),
                channel: r.input[4..6].to_vec(),
                weight: r.input[6..8].to_vec(),
            };
            s.check_bounds(&p).unwrap();
        }

        let dead = StochasticModel::binary(2, 0.0, 0.5, 0.4).unwrap();
        let ds = generate_dataset(&dead, &p, 3, 9, &SolverOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 30);
        assert!(ds
            .records
            .iter()
            .all(|r| r.target.iter().all(|&v| v == 0.0)));
    }
}
