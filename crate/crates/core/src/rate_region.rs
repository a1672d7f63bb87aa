//! Multiple-access rate region: every non-empty user subset `S` must satisfy
//! `sum_{i in S} rho_i <= g(sum_{i in S} h_i P_i)`.
//!
//! Subsets are enumerated explicitly as bitmasks, so `M` is expected to stay
//! small (a handful of users).

use crate::error::{Error, Result};
use crate::model::RateFn;

#[derive(Clone, Copy, Debug)]
pub struct RateRegionInstance<'a> {
    pub gains: &'a [f64],
    pub powers: &'a [f64],
    pub rate_fn: RateFn,
}

impl<'a> RateRegionInstance<'a> {
    pub fn new(gains: &'a [f64], powers: &'a [f64], rate_fn: RateFn) -> Self {
        Self {
            gains,
            powers,
            rate_fn,
        }
    }

    pub fn num_users(&self) -> usize {
        self.gains.len()
    }

    fn check(&self, rho: &[f64]) -> Result<()> {
        let m = self.gains.len();
        if self.powers.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: self.powers.len(),
            });
        }
        if rho.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: rho.len(),
            });
        }
        Ok(())
    }

    /// `(sum of rho over S, g(sum of h P over S))` for every non-empty subset mask.
    fn subset_sums<'r>(&'r self, rho: &'r [f64]) -> impl Iterator<Item = (f64, f64)> + 'r {
        let m = self.gains.len();
        (1u32..(1u32 << m)).map(move |mask| {
            let mut bits = 0.0;
            let mut snr = 0.0;
            for i in 0..m {
                if mask & (1 << i) != 0 {
                    bits += rho[i];
                    snr += self.gains[i] * self.powers[i];
                }
            }
            (bits, self.rate_fn.value(snr))
        })
    }
}

pub fn is_rate_feasible(inst: &RateRegionInstance<'_>, rho: &[f64], tol: f64) -> Result<bool> {
    inst.check(rho)?;
    Ok(inst.subset_sums(rho).all(|(bits, cap)| bits <= cap + tol))
}

/// Largest total rate user `i` could push alone: `g(h_i P_i)`.
pub fn max_single_user_rate(gain: f64, power: f64, rate_fn: RateFn) -> f64 {
    rate_fn.value(gain * power)
}

/// Largest `alpha <= 1` with `alpha * rho` inside the region.
pub fn max_feasible_scaling(inst: &RateRegionInstance<'_>, rho: &[f64]) -> Result<f64> {
    inst.check(rho)?;
    let mut alpha: f64 = 1.0;
    for (bits, cap) in inst.subset_sums(rho) {
        if bits > 0.0 {
            alpha = alpha.min(cap / bits);
        }
    }
    Ok(alpha.max(0.0))
}

/// Smallest slack `g(sum h P) - sum rho` over subsets containing user `i`.
pub fn user_slack(inst: &RateRegionInstance<'_>, rho: &[f64], i: usize) -> Result<f64> {
    inst.check(rho)?;
    let m = inst.num_users();
    let mut slack = f64::INFINITY;
    for mask in 1u32..(1u32 << m) {
        if mask & (1 << i) == 0 {
            continue;
        }
        let (mut bits, mut snr) = (0.0, 0.0);
        for k in 0..m {
            if mask & (1 << k) != 0 {
                bits += rho[k];
                snr += inst.gains[k] * inst.powers[k];
            }
        }
        slack = slack.min(inst.rate_fn.value(snr) - bits);
    }
    Ok(slack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const G: RateFn = RateFn::LogRate;

    #[test]
    fn feasibility_examples() {
        let h = [1.0, 1.0];
        let p = [4.0, 4.0];
        let inst = RateRegionInstance::new(&h, &p, G);
        assert!(is_rate_feasible(&inst, &[1.0, 1.0], 1e-9).unwrap());
        assert!(!is_rate_feasible(&inst, &[1.5, 1.5], 1e-9).unwrap());
        assert!(is_rate_feasible(&inst, &[0.0, 0.0], 0.0).unwrap());
        let zero = [0.0, 0.0];
        let inst0 = RateRegionInstance::new(&h, &zero, G);
        assert!(is_rate_feasible(&inst0, &[0.0, 0.0], 0.0).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let h = [1.0, 1.0];
        let p = [4.0];
        let inst = RateRegionInstance::new(&h, &p, G);
        assert!(matches!(
            is_rate_feasible(&inst, &[0.0, 0.0], 0.0),
            Err(Error::Dimension { .. })
        ));
        let p = [4.0, 4.0];
        let inst = RateRegionInstance::new(&h, &p, G);
        assert!(max_feasible_scaling(&inst, &[1.0]).is_err());
    }

    #[test]
    fn single_user_rate() {
        assert_abs_diff_eq!(
            max_single_user_rate(1.0, 4.0, G),
            1.609_437_912_434_100_3,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            max_single_user_rate(0.1, 4.0, G),
            0.336_472_236_621_212_9,
            epsilon = 1e-12
        );
        assert_eq!(max_single_user_rate(1.0, 0.0, G), 0.0);
    }

    #[test]
    fn scaling_examples() {
        let h = [1.0, 1.0];
        let p = [4.0, 4.0];
        let inst = RateRegionInstance::new(&h, &p, G);
        let a = max_feasible_scaling(&inst, &[1.5, 1.5]).unwrap();
        assert_abs_diff_eq!(a, 9f64.ln() / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a * 1.5, 1.098_612_288_668_109_7, epsilon = 1e-12);
        assert_eq!(max_feasible_scaling(&inst, &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(max_feasible_scaling(&inst, &[0.0, 0.0]).unwrap(), 1.0);
        let zero = [0.0, 0.0];
        let inst0 = RateRegionInstance::new(&h, &zero, G);
        assert_eq!(max_feasible_scaling(&inst0, &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn slack_is_tightest_subset() {
        let h = [1.0, 0.1];
        let p = [4.0, 4.0];
        let inst = RateRegionInstance::new(&h, &p, G);
        let s = user_slack(&inst, &[1.0, 0.2], 0).unwrap();
        let expect = (5f64.ln() - 1.0).min(5.4f64.ln() - 1.2);
        assert_abs_diff_eq!(s, expect, epsilon = 1e-12);
    }

    fn instance_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=4).prop_flat_map(|m| {
            (
                proptest::collection::vec(0.05f64..2.0, m),
                proptest::collection::vec(0.0f64..4.0, m),
                proptest::collection::vec(0.0f64..2.0, m),
            )
        })
    }

    proptest! {
        #[test]
        fn downward_closed((h, p, rho) in instance_strategy(), shrink in proptest::collection::vec(0.0f64..=1.0, 4)) {
            let inst = RateRegionInstance::new(&h, &p, G);
            let a = max_feasible_scaling(&inst, &rho).unwrap();
            let feasible: Vec<f64> = rho.iter().map(|x| x * a).collect();
            prop_assert!(is_rate_feasible(&inst, &feasible, 1e-9).unwrap());
            let smaller: Vec<f64> = feasible.iter().zip(&shrink).map(|(x, s)| x * s).collect();
            prop_assert!(is_rate_feasible(&inst, &smaller, 1e-9).unwrap());
        }

        #[test]
        fn scaling_is_maximal((h, p, rho) in instance_strategy()) {
            let inst = RateRegionInstance::new(&h, &p, G);
            let a = max_feasible_scaling(&inst, &rho).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let scaled: Vec<f64> = rho.iter().map(|x| x * a).collect();
            prop_assert!(is_rate_feasible(&inst, &scaled, 1e-9).unwrap());
            if a < 1.0 {
                let over: Vec<f64> = rho.iter().map(|x| x * (a + 1e-6)).collect();
                prop_assert!(!is_rate_feasible(&inst, &over, 1e-9).unwrap());
            }
        }

        #[test]
        fn monotone_in_power((h, p, rho) in instance_strategy(), bump in 0.0f64..2.0, who in 0usize..4) {
            let inst = RateRegionInstance::new(&h, &p, G);
            if is_rate_feasible(&inst, &rho, 1e-9).unwrap() {
                let mut p2 = p.clone();
                let k = who % p2.len();
                p2[k] += bump;
                let inst2 = RateRegionInstance::new(&h, &p2, G);
                prop_assert!(is_rate_feasible(&inst2, &rho, 1e-9).unwrap());
            }
        }
    }
}
