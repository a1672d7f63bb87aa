//! Myopic policy: minimize the current slot's distortion only.
//!
//! Users holding bits spend their whole battery (the stage cost does not
//! depend on the leftover energy and the rate region only grows with power);
//! idle users keep theirs. The bit split over the fixed-power rate region is
//! found in closed form when one user is active or all requests fit, and by
//! the barrier solver otherwise.

use crate::error::Result;
use crate::model::{Action, SystemParams, SystemState};
use crate::offline::{Distortion, DistortionTerm, RateCut};
use crate::rate_region::{is_rate_feasible, user_slack, RateRegionInstance};
use crate::solver::{self, ConvexProgram, SolverOptions};

pub fn greedy_act(state: &SystemState, params: &SystemParams) -> Result<Action> {
    greedy_act_with(state, params, &SolverOptions::default())
}

pub fn greedy_act_with(
    state: &SystemState,
    params: &SystemParams,
    opts: &SolverOptions,
) -> Result<Action> {
    let m = state.num_users();
    let g = params.rate_fn;
    let wants = |i: usize| state.weight[i] > 0.0 && state.remaining[i] > 0.0;
    let power: Vec<f64> = (0..m)
        .map(|i| if wants(i) { state.battery[i] } else { 0.0 })
        .collect();
    let active: Vec<usize> = (0..m)
        .filter(|&i| wants(i) && state.channel[i] * power[i] > 0.0)
        .collect();
    let mut rho = vec![0.0; m];
    if active.is_empty() {
        return Ok(Action { power, rho });
    }
    let inst = RateRegionInstance::new(&state.channel, &power, g);

    let all: Vec<f64> = (0..m)
        .map(|i| {
            if active.contains(&i) {
                state.remaining[i]
            } else {
                0.0
            }
        })
        .collect();
    if is_rate_feasible(&inst, &all, 0.0)? {
        return Ok(Action { power, rho: all });
    }
    if let [i] = active[..] {
        rho[i] = g.value(state.channel[i] * power[i]).min(state.remaining[i]);
        return Ok(Action { power, rho });
    }

    let n = active.len();
    let objective = Distortion {
        cost_fn: params.cost_fn,
        terms: active
            .iter()
            .enumerate()
            .map(|(k, &i)| DistortionTerm {
                weight: state.weight[i],
                base: state.remaining[i],
                rho: vec![k],
            })
            .collect(),
    };
    let mut prog = ConvexProgram::new(n, Box::new(objective));
    let mut tightest = vec![f64::INFINITY; n];
    for mask in 1u32..(1u32 << n) {
        let members: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
        let snr: f64 = members
            .iter()
            .map(|&k| state.channel[active[k]] * power[active[k]])
            .sum();
        let share = g.value(snr) / members.len() as f64;
        for &k in &members {
            tightest[k] = tightest[k].min(share);
        }
        prog.constrain(RateCut {
            rate_fn: g,
            rho: members,
            power: Vec::new(),
            fixed_snr: snr,
        });
    }
    for (k, &i) in active.iter().enumerate() {
        prog.bound(k, 0.0, state.remaining[i]);
    }
    prog.start = Some(
        active
            .iter()
            .enumerate()
            .map(|(k, &i)| 0.5 * tightest[k].min(state.remaining[i]))
            .collect(),
    );
    let (x, _) = solver::solve(&prog, opts)?;
    for (k, &i) in active.iter().enumerate() {
        rho[i] = x[k].clamp(0.0, state.remaining[i]);
    }
    // push each user onto the boundary left by the interior-point iterate
    for &i in &active {
        let slack = user_slack(&inst, &rho, i)?;
        if slack > 0.0 {
            rho[i] = (rho[i] + slack).min(state.remaining[i]);
        }
    }
    Ok(Action { power, rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{audit_action, stage_cost, FEAS_TOL};
    use crate::offline::{Distortion, DistortionTerm, RateCut};
    use crate::rate_region::max_feasible_scaling;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_user() -> SystemParams {
        let mut p = SystemParams::two_user(1);
        p.num_users = 1;
        p
    }

    fn state(b: &[f64], r: &[f64], h: &[f64], w: &[f64]) -> SystemState {
        SystemState {
            battery: b.to_vec(),
            remaining: r.to_vec(),
            channel: h.to_vec(),
            weight: w.to_vec(),
        }
    }

    #[test]
    fn single_user_full_power() {
        let p = one_user();
        let s = state(&[4.0], &[4.0], &[1.0], &[2.0]);
        let a = greedy_act(&s, &p).unwrap();
        assert_eq!(a.power, vec![4.0]);
        assert_abs_diff_eq!(a.rho[0], 5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(stage_cost(&s, &a, &p).unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn empty_battery_gives_zero_action() {
        let p = SystemParams::two_user(1);
        let s = state(&[0.0, 0.0], &[4.0, 3.0], &[1.0, 0.1], &[1.0, 2.0]);
        let a = greedy_act(&s, &p).unwrap();
        assert_eq!(a, Action::zeros(2));
        let f = |x: f64| (x - 4.0).exp();
        assert_abs_diff_eq!(
            stage_cost(&s, &a, &p).unwrap(),
            f(4.0) + 2.0 * f(3.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn symmetric_users_split_evenly() {
        let p = SystemParams::two_user(1);
        let s = state(&[4.0, 4.0], &[4.0, 4.0], &[1.0, 1.0], &[1.0, 1.0]);
        let a = greedy_act(&s, &p).unwrap();
        assert_abs_diff_eq!(a.rho[0], a.rho[1], epsilon = 1e-6);
        assert_abs_diff_eq!(a.rho[0] + a.rho[1], 9f64.ln(), epsilon = 1e-9);
        // grid cross-check at 1e-3
        let cost = stage_cost(&s, &a, &p).unwrap();
        let mut best = f64::INFINITY;
        let cap1 = 5f64.ln();
        let n = (cap1 / 1e-3) as usize;
        for k in 0..=n {
            let r1 = k as f64 * 1e-3;
            let r2 = (9f64.ln() - r1).min(cap1);
            let c = (4.0 - r1 - 4.0f64).exp() + (4.0 - r2 - 4.0f64).exp();
            best = best.min(c);
        }
        assert!(cost <= best + 1e-9, "{cost} vs grid {best}");
    }

    #[test]
    fn idle_users_keep_their_energy() {
        let p = SystemParams::two_user(1);
        let s = state(&[3.0, 2.0], &[0.0, 4.0], &[1.0, 1.0], &[1.0, 0.0]);
        assert_eq!(greedy_act(&s, &p).unwrap(), Action::zeros(2));
    }

    #[test]
    fn joint_solve_leaves_power_at_battery() {
        // same single-slot problem with P free in [0, B]
        let s = state(&[4.0, 3.0], &[4.0, 4.0], &[1.0, 0.1], &[2.0, 1.0]);
        let p = SystemParams::two_user(1);
        let objective = Distortion {
            cost_fn: p.cost_fn,
            terms: (0..2)
                .map(|i| DistortionTerm {
                    weight: s.weight[i],
                    base: s.remaining[i],
                    rho: vec![2 + i],
                })
                .collect(),
        };
        let mut prog = ConvexProgram::new(4, Box::new(objective));
        for mask in 1u32..4 {
            let members: Vec<usize> = (0..2).filter(|k| mask & (1 << k) != 0).collect();
            prog.constrain(RateCut {
                rate_fn: p.rate_fn,
                rho: members.iter().map(|&k| 2 + k).collect(),
                power: members.iter().map(|&k| (k, s.channel[k])).collect(),
                fixed_snr: 0.0,
            });
        }
        for i in 0..2 {
            prog.bound(i, 0.0, s.battery[i]);
            prog.bound(2 + i, 0.0, s.remaining[i]);
        }
        prog.start = Some(vec![2.0, 1.5, 0.05, 0.01]);
        let (x, _) = solver::solve(&prog, &SolverOptions::default()).unwrap();
        assert!(
            (x[0] - 4.0).abs() < 1e-3 && (x[1] - 3.0).abs() < 1e-3,
            "{x:?}"
        );
        let a = greedy_act(&s, &p).unwrap();
        let joint = Action {
            power: x[..2].to_vec(),
            rho: x[2..].to_vec(),
        };
        let (ca, cj) = (
            stage_cost(&s, &a, &p).unwrap(),
            stage_cost(&s, &joint, &p).unwrap(),
        );
        // both solves are accurate to the 1e-6 duality gap
        assert!(ca <= cj + 1e-6, "{a:?} {ca} vs {joint:?} {cj}");
    }

    fn state_strategy() -> impl Strategy<Value = SystemState> {
        let h = prop_oneof![Just(0.1), Just(1.0)];
        let w = prop_oneof![Just(0.0), Just(1.0), Just(2.0)];
        (
            proptest::collection::vec(0.0f64..4.0, 2),
            proptest::collection::vec(0.0f64..4.0, 2),
            proptest::collection::vec(h, 2),
            proptest::collection::vec(w, 2),
        )
            .prop_map(|(b, r, h, w)| state(&b, &r, &h, &w))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn greedy_is_feasible_and_beats_probes(
            s in state_strategy(),
            probes in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 20),
        ) {
            let p = SystemParams::two_user(1);
            let a = greedy_act(&s, &p).unwrap();
            prop_assert!(audit_action(&s, &a, &p, FEAS_TOL).is_ok());
            let cost = stage_cost(&s, &a, &p).unwrap();
            for (u0, u1, v0, v1) in probes {
                let power = vec![u0 * s.battery[0], u1 * s.battery[1]];
                let mut rho: Vec<f64> = [v0, v1].iter().enumerate()
                    .map(|(i, v)| v * s.remaining[i].min(p.rate_fn.value(s.channel[i] * power[i])))
                    .collect();
                let inst = RateRegionInstance::new(&s.channel, &power, p.rate_fn);
                let alpha = max_feasible_scaling(&inst, &rho).unwrap();
                rho.iter_mut().for_each(|r| *r *= alpha);
                let probe = Action { power, rho };
                prop_assert!(cost <= stage_cost(&s, &probe, &p).unwrap() + 1e-9);
            }
        }

        #[test]
        fn no_rate_left_on_the_table(s in state_strategy()) {
            let p = SystemParams::two_user(1);
            let a = greedy_act(&s, &p).unwrap();
            let inst = RateRegionInstance::new(&s.channel, &a.power, p.rate_fn);
            for i in 0..2 {
                let marginal = s.weight[i] * p.cost_fn.derivative(s.remaining[i] - a.rho[i]);
                if marginal > 0.0 && a.rho[i] < s.remaining[i] - 1e-9 {
                    prop_assert!(user_slack(&inst, &a.rho, i).unwrap() <= 1e-6);
                }
            }
        }
    }
}
