//! Monte Carlo evaluation on common sample paths.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::greedy::greedy_act_with;
use crate::mdp::{backward_recursion, mdp_act, DiscretizationSpec, MdpGrid, MdpTable};
use crate::model::{
    audit_action, derive_seed, sample_path, stage_cost, Action, Distribution, SamplePath,
    StochasticModel, SystemParams, SystemState, FEAS_TOL,
};
use crate::nn::{nn_act, train, MlpModel, TrainConfig};
use crate::offline::{generate_dataset, solve_offline};
use crate::solver::SolverOptions;

/// Seed stream used for evaluation paths.
pub const EVALUATION_STREAM: u64 = 2;

pub trait Policy: Sync {
    fn name(&self) -> &str;
    /// Action at 0-based `slot`, seeing only the current state.
    fn act(&self, state: &SystemState, slot: usize) -> Result<Action>;
}

pub struct MdpPolicy<'a> {
    pub table: &'a MdpTable,
}

impl Policy for MdpPolicy<'_> {
    fn name(&self) -> &str {
        "mdp"
    }

    fn act(&self, state: &SystemState, slot: usize) -> Result<Action> {
        mdp_act(state, slot, self.table)
    }
}

pub struct GreedyPolicy<'a> {
    pub params: &'a SystemParams,
    pub solver: SolverOptions,
}

impl Policy for GreedyPolicy<'_> {
    fn name(&self) -> &str {
        "greedy"
    }

    fn act(&self, state: &SystemState, _slot: usize) -> Result<Action> {
        greedy_act_with(state, self.params, &self.solver)
    }
}

pub struct NnPolicy<'a> {
    pub model: &'a MlpModel,
    pub params: &'a SystemParams,
}

impl Policy for NnPolicy<'_> {
    fn name(&self) -> &str {
        "nn"
    }

    fn act(&self, state: &SystemState, _slot: usize) -> Result<Action> {
        Ok(nn_act(state, self.model, self.params))
    }
}

/// Plays back a precomputed action sequence for one path.
pub struct ReplayPolicy {
    pub actions: Vec<Action>,
}

impl Policy for ReplayPolicy {
    fn name(&self) -> &str {
        "offline"
    }

    fn act(&self, _state: &SystemState, slot: usize) -> Result<Action> {
        Ok(self.actions[slot].clone())
    }
}

/// Never transmits.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn name(&self) -> &str {
        "zero"
    }

    fn act(&self, state: &SystemState, _slot: usize) -> Result<Action> {
        Ok(Action::zeros(state.num_users()))
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// `(1/TM) sum_t sum_i w_i(t) f(r_i(t) - rho_i(t))`.
    pub objective: f64,
    pub states: Vec<SystemState>,
    pub actions: Vec<Action>,
    pub stage_costs: Vec<f64>,
}

pub fn simulate_episode(
    policy: &dyn Policy,
    path: &SamplePath,
    params: &SystemParams,
) -> Result<Episode> {
    path.check_dims(params)?;
    let m = params.num_users;
    let mut state = SystemState::initial(m);
    let mut prev = Action::zeros(m);
    let mut ep = Episode {
        objective: 0.0,
        states: Vec::with_capacity(params.horizon),
        actions: Vec::with_capacity(params.horizon),
        stage_costs: Vec::with_capacity(params.horizon),
    };
    for t in 0..params.horizon {
        state = state.advance(&prev, path, t, params)?;
        let action = policy.act(&state, t)?;
        audit_action(&state, &action, params, FEAS_TOL).map_err(|constraint| {
            Error::PolicyInfeasible {
                slot: t + 1,
                constraint,
            }
        })?;
        ep.stage_costs.push(stage_cost(&state, &action, params)?);
        ep.states.push(state.clone());
        ep.actions.push(action.clone());
        prev = action;
    }
    ep.objective = neumaier_sum(ep.stage_costs.iter().copied()) / (params.horizon * m) as f64;
    Ok(ep)
}

/// Compensated summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = neumaier_sum(values.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = neumaier_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Offline,
    Nn,
    Mdp,
    Greedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Offline,
        PolicyKind::Nn,
        PolicyKind::Mdp,
        PolicyKind::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Offline => "offline",
            PolicyKind::Nn => "nn",
            PolicyKind::Mdp => "mdp",
            PolicyKind::Greedy => "greedy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    EProb,
    PProb,
    IProb,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::EProb => "e_prob",
            SweepParam::PProb => "p_prob",
            SweepParam::IProb => "i_prob",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [SweepParam::EProb, SweepParam::PProb, SweepParam::IProb]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

/// Sets the swept probability: the mass on the second support point of the
/// energy (`e_prob`) or weight (`i_prob`) distribution, or the arrival
/// probability (`p_prob`).
pub fn apply_sweep(
    model: &StochasticModel,
    param: SweepParam,
    value: f64,
) -> Result<StochasticModel> {
    let two_point = |d: &Distribution, what: &str| -> Result<Distribution> {
        match d.support() {
            [lo, hi] => Distribution::two_point(*lo, *hi, value),
            _ => Err(Error::InvalidParams(format!(
                "sweeping {} needs a two-point {what} distribution",
                param.name()
            ))),
        }
    };
    let mut out = model.clone();
    match param {
        SweepParam::EProb => {
            for u in &mut out.users {
                u.energy = two_point(&u.energy, "energy")?;
            }
        }
        SweepParam::PProb => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidParams(format!(
                    "p_prob {value} outside [0, 1]"
                )));
            }
            for u in &mut out.users {
                u.arrival_prob = value;
            }
        }
        SweepParam::IProb => out.weight = two_point(&model.weight, "weight")?,
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    pub model: StochasticModel,
    pub sweep: Sweep,
    pub episodes: usize,
    pub seed: u64,
    pub policies: Vec<PolicyKind>,
    /// Battery/power/bit grid step of the MDP.
    pub grid_step: f64,
    pub training_paths: usize,
    pub train: TrainConfig,
    pub solver: SolverOptions,
    /// Slack allowed when checking offline <= online per path.
    pub dominance_tol: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.model.validate()?;
        if self.episodes == 0 {
            return Err(Error::InvalidParams(
                "episode count must be at least 1".into(),
            ));
        }
        if let Some(v) = self.sweep.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParams(format!(
                "sweep value {v} outside [0, 1]"
            )));
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidParams("no policies selected".into()));
        }
        Ok(())
    }
}

/// Per-sweep-point artifacts of the learned/planned policies.
#[derive(Clone, Debug, Default)]
pub struct PointArtifacts {
    pub mdp: Option<MdpTable>,
    pub nn: Option<MlpModel>,
    /// Validation MSE of the trained network.
    pub nn_validation: Option<f64>,
    /// `E[V_1] / (TM)`, the MDP's own prediction of its mean cost.
    pub mdp_expected: Option<f64>,
}

pub fn prepare_point(cfg: &ExperimentConfig, model: &StochasticModel) -> Result<PointArtifacts> {
    let mut out = PointArtifacts::default();
    if cfg.policies.contains(&PolicyKind::Mdp) {
        let spec = DiscretizationSpec::uniform(cfg.grid_step, &cfg.params, model);
        let grid = MdpGrid::new(&spec, &cfg.params, model)?;
        let table = backward_recursion(&cfg.params, model, &spec)?.table;
        out.mdp_expected = Some(
            grid.expected_initial_value(&table)
                / (cfg.params.horizon * cfg.params.num_users) as f64,
        );
        out.mdp = Some(table);
    }
    if cfg.policies.contains(&PolicyKind::Nn) {
        let ds = generate_dataset(
            model,
            &cfg.params,
            cfg.training_paths,
            cfg.seed,
            &cfg.solver,
        )?;
        let (net, report) = train(&ds, &cfg.train)?;
        out.nn_validation = Some(report.best_validation);
        out.nn = Some(net);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub mean_cost: f64,
    pub stderr: f64,
    pub episodes: usize,
}

/// Per-path objectives, indexed `[episode][policy]` in the order of `kinds`.
#[derive(Clone, Debug)]
pub struct PointEvaluation {
    pub kinds: Vec<PolicyKind>,
    pub path_seeds: Vec<u64>,
    pub objectives: Vec<Vec<f64>>,
}

impl PointEvaluation {
    pub fn summaries(&self) -> Vec<PolicySummary> {
        self.kinds
            .iter()
            .enumerate()
            .map(|(k, &kind)| {
                let col: Vec<f64> = self.objectives.iter().map(|row| row[k]).collect();
                let (mean_cost, stderr) = mean_stderr(&col);
                PolicySummary {
                    policy: kind,
                    mean_cost,
                    stderr,
                    episodes: col.len(),
                }
            })
            .collect()
    }
}

/// Runs every policy in `kinds` on the same `episodes` paths. When the
/// offline policy is included, each online objective is checked against it.
pub fn evaluate_point(
    params: &SystemParams,
    model: &StochasticModel,
    kinds: &[PolicyKind],
    artifacts: &PointArtifacts,
    episodes: usize,
    seed: u64,
    solver: &SolverOptions,
    dominance_tol: f64,
) -> Result<PointEvaluation> {
    let missing =
        |what: &str| Error::InvalidParams(format!("{what} policy requested but not prepared"));
    let mdp = match (kinds.contains(&PolicyKind::Mdp), &artifacts.mdp) {
        (true, Some(t)) => Some(MdpPolicy { table: t }),
        (true, None) => return Err(missing("mdp")),
        _ => None,
    };
    let nn = match (kinds.contains(&PolicyKind::Nn), &artifacts.nn) {
        (true, Some(m)) => Some(NnPolicy { model: m, params }),
        (true, None) => return Err(missing("nn")),
        _ => None,
    };
    let greedy = GreedyPolicy {
        params,
        solver: solver.clone(),
    };
    let path_seeds: Vec<u64> = (0..episodes as u64)
        .map(|k| derive_seed(seed, EVALUATION_STREAM, k))
        .collect();
    let objectives = path_seeds
        .par_iter()
        .map(|&path_seed| {
            let path = sample_path(model, params, path_seed);
            let mut row = Vec::with_capacity(kinds.len());
            let mut offline = None;
            for &kind in kinds {
                let objective = match kind {
                    PolicyKind::Offline => {
                        let sol =
                            solve_offline(&path, params, solver).map_err(|e| Error::PathSolve {
                                seed: path_seed,
                                source: Box::new(e),
                            })?;
                        let ep = simulate_episode(
                            &ReplayPolicy {
                                actions: sol.actions,
                            },
                            &path,
                            params,
                        )?;
                        offline = Some(ep.objective);
                        ep.objective
                    }
                    PolicyKind::Nn => {
                        simulate_episode(nn.as_ref().unwrap(), &path, params)?.objective
                    }
                    PolicyKind::Mdp => {
                        simulate_episode(mdp.as_ref().unwrap(), &path, params)?.objective
                    }
                    PolicyKind::Greedy => simulate_episode(&greedy, &path, params)?.objective,
                };
                row.push(objective);
            }
            if let Some(off) = offline {
                for (&kind, &online) in kinds.iter().zip(&row) {
                    if off > online + dominance_tol {
                        return Err(Error::Dominance {
                            seed: path_seed,
                            policy: kind.name().to_string(),
                            offline: off,
                            online,
                        });
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointEvaluation {
        kinds: kinds.to_vec(),
        path_seeds,
        objectives,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub policy: PolicyKind,
    pub mean_cost: f64,
    pub stderr: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentResult {
    pub sweep_param: String,
    pub rows: Vec<ResultRow>,
    /// Artifact diagnostics per sweep value, in sweep order.
    pub diagnostics: Vec<(f64, Option<f64>, Option<f64>)>,
}

impl ExperimentResult {
    pub fn mean(&self, value: f64, policy: PolicyKind) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && (r.sweep_value - value).abs() < 1e-12)
    }
}

/// Runs one sweep point end to end; errors carry the sweep context.
pub fn run_point(cfg: &ExperimentConfig, value: f64) -> Result<(PointArtifacts, PointEvaluation)> {
    let param = cfg.sweep.param;
    let wrap = |e: Error| Error::SweepPoint {
        param: param.name().to_string(),
        value,
        source: Box::new(e),
    };
    let model = apply_sweep(&cfg.model, param, value).map_err(wrap)?;
    let artifacts = prepare_point(cfg, &model).map_err(wrap)?;
    let eval = evaluate_point(
        &cfg.params,
        &model,
        &cfg.policies,
        &artifacts,
        cfg.episodes,
        cfg.seed,
        &cfg.solver,
        cfg.dominance_tol,
    )
    .map_err(wrap)?;
    Ok((artifacts, eval))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut res = ExperimentResult {
        sweep_param: cfg.sweep.param.name().to_string(),
        ..Default::default()
    };
    for &value in &cfg.sweep.values {
        let (artifacts, eval) = run_point(cfg, value)?;
        res.diagnostics
            .push((value, artifacts.mdp_expected, artifacts.nn_validation));
        res.rows
            .extend(eval.summaries().into_iter().map(|s| ResultRow {
                sweep_value: value,
                policy: s.policy,
                mean_cost: s.mean_cost,
                stderr: s.stderr,
                episodes: s.episodes,
            }));
    }
    Ok(res)
}

pub const RESULT_HEADER: [&str; 6] = [
    "sweep_param",
    "sweep_value",
    "policy",
    "mean_cost",
    "stderr",
    "episodes",
];

pub fn write_results<W: Write>(res: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for r in &res.rows {
        w.write_record([
            res.sweep_param.clone(),
            format!("{:?}", r.sweep_value),
            r.policy.name().to_string(),
            format!("{:?}", r.mean_cost),
            format!("{:?}", r.stderr),
            r.episodes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_results(res: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    write_results(res, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offline::solve_offline;
    use approx::assert_abs_diff_eq;

    fn params() -> SystemParams {
        SystemParams::two_user(10)
    }

    #[test]
    fn zero_policy_closed_form() {
        let p = params();
        let model = StochasticModel::binary(2, 0.5, 0.4, 0.5).unwrap();
        for seed in 0..20 {
            let path = sample_path(&model, &p, seed);
            let ep = simulate_episode(&ZeroPolicy, &path, &p).unwrap();
            // bits stay at r_max once a version arrives, weight is the latest one
            let mut total = 0.0;
            for i in 0..2 {
                let mut w = 0.0;
                for t in 0..10 {
                    if path.arrival[t][i] {
                        w = path.weight[t][i];
                    }
                    total += w * p.cost_fn.value(p.r_max);
                }
            }
            assert_abs_diff_eq!(ep.objective, total / 20.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn offline_replay_matches_solution() {
        let p = params();
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        for seed in 0..5 {
            let path = sample_path(&model, &p, seed);
            let sol = solve_offline(&path, &p, &SolverOptions::default()).unwrap();
            let ep = simulate_episode(
                &ReplayPolicy {
                    actions: sol.actions.clone(),
                },
                &path,
                &p,
            )
            .unwrap();
            assert_abs_diff_eq!(ep.objective, sol.objective, epsilon = 1e-9);
        }
    }

    #[test]
    fn greedy_beats_silence_when_it_can_send() {
        let p = params();
        let model = StochasticModel::binary(2, 0.6, 0.5, 0.4).unwrap();
        let greedy = GreedyPolicy {
            params: &p,
            solver: SolverOptions::default(),
        };
        let mut compared = 0;
        for seed in 0..30 {
            let path = sample_path(&model, &p, seed);
            let g = simulate_episode(&greedy, &path, &p).unwrap();
            let z = simulate_episode(&ZeroPolicy, &path, &p).unwrap();
            if g.actions.iter().any(|a| a.rho.iter().any(|&r| r > 0.0)) {
                assert!(g.objective < z.objective);
                compared += 1;
            } else {
                assert_eq!(g.objective, z.objective);
            }
        }
        assert!(compared > 10);
    }

    struct Greedy2x;

    impl Policy for Greedy2x {
        fn name(&self) -> &str {
            "bad"
        }

        fn act(&self, state: &SystemState, _slot: usize) -> Result<Action> {
            Ok(Action {
                power: state.battery.iter().map(|b| b + 1.0).collect(),
                rho: vec![0.0; state.num_users()],
            })
        }
    }

    #[test]
    fn infeasible_action_is_reported() {
        let p = params();
        let model = StochasticModel::binary(2, 0.5, 0.5, 0.5).unwrap();
        let path = sample_path(&model, &p, 3);
        let err = simulate_episode(&Greedy2x, &path, &p).unwrap_err();
        assert_eq!(err.kind(), "policy-infeasible-action");
        assert!(matches!(err, Error::PolicyInfeasible { slot: 1, .. }));
    }

    #[test]
    fn compensated_sum() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(neumaier_sum(v), 1.0);
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_abs_diff_eq!(s, (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn sweep_sets_second_support_point() {
        let model = StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap();
        let e = apply_sweep(&model, SweepParam::EProb, 0.7).unwrap();
        assert_eq!(e.users[1].energy.probs(), &[1.0 - 0.7, 0.7]);
        let w = apply_sweep(&model, SweepParam::IProb, 1.0).unwrap();
        assert_eq!(w.weight.probs(), &[0.0, 1.0]);
        let a = apply_sweep(&model, SweepParam::PProb, 0.2).unwrap();
        assert!(a.users.iter().all(|u| u.arrival_prob == 0.2));
        assert!(apply_sweep(&model, SweepParam::PProb, 1.2).is_err());
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            params: SystemParams::two_user(4),
            model: StochasticModel::binary(2, 0.4, 0.4, 0.4).unwrap(),
            sweep: Sweep {
                param: SweepParam::IProb,
                values: vec![0.2, 0.8],
            },
            episodes: 40,
            seed: 11,
            policies: PolicyKind::ALL.to_vec(),
            grid_step: 1.0,
            training_paths: 30,
            train: TrainConfig {
                hidden: vec![8, 8],
                epochs: 20,
                ..Default::default()
            },
            solver: SolverOptions::default(),
            dominance_tol: 1e-6,
        }
    }

    #[test]
    fn experiment_is_reproducible_and_exports() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 8);
        for r in &a.rows {
            assert!(r.mean_cost >= 0.0 && r.stderr >= 0.0 && r.episodes == 40);
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_results(&a, &mut x).unwrap();
        write_results(&b, &mut y).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with("sweep_param,sweep_value,policy,mean_cost,stderr,episodes\n"));
        assert_eq!(text.lines().count(), 9);

        let mut empty = Vec::new();
        write_results(&ExperimentResult::default(), &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 1);
    }

    #[test]
    fn mdp_simulation_agrees_with_its_value() {
        let mut cfg = small_config();
        cfg.policies = vec![PolicyKind::Mdp];
        cfg.episodes = 4000;
        let (art, eval) = run_point(&cfg, 0.5).unwrap();
        let s = &eval.summaries()[0];
        let predicted = art.mdp_expected.unwrap();
        assert!(
            (s.mean_cost - predicted).abs() <= 4.0 * s.stderr,
            "{} +- {} vs {}",
            s.mean_cost,
            s.stderr,
            predicted
        );
    }

    #[test]
    fn sweep_errors_carry_context() {
        let mut cfg = small_config();
        cfg.model.weight = Distribution::point(1.0);
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::SweepPoint { .. }));
        assert!(err.to_string().contains("i_prob"));
    }
}
