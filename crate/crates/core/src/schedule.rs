//! Corruption schedules and their transition matrices.
//!
//! Single-step corruption of a token over `K` real categories plus an
//! absorbing `[MASK]` state: with probability `gamma_t` the token becomes
//! `[MASK]`, with probability `K·beta_t` it is resampled uniformly over
//! all `K` categories, and with probability `alpha_t = 1 − K·beta_t −
//! gamma_t` it keeps its value. `[MASK]` never transitions back.
//!
//! Every matrix in this family is determined by the three coefficients
//! (stay, uniform, mask), and the family is closed under products, so
//! cumulative matrices are represented exactly the same way:
//! `stay_t = Π alpha_s` and `mask_t = 1 − Π (1 − gamma_s)`.

use crate::{Error, Result};

/// Tiny negative slack tolerated when `alpha_t` lands at an exact-zero
/// boundary under floating point; anything below this is rejected.
const ALPHA_NEG_TOL: f64 = 1e-12;

/// Column-stochastic transition matrix over `K` real codes plus `[MASK]`.
///
/// Entry `(to, from)` with `from` a real code `j` is `stay + uniform` at
/// `to = j`, `uniform` at other real codes, and `mask` at `to = MASK`.
/// The `[MASK]` column is the unit vector on `[MASK]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix {
    num_codes: usize,
    stay: f64,
    uniform: f64,
    mask: f64,
}

impl TransitionMatrix {
    /// Build from single-step rates `(alpha, beta, gamma)`.
    pub fn from_rates(num_codes: usize, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if num_codes < 2 {
            return Err(Error::Schedule("need at least 2 real codes".into()));
        }
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Schedule(format!("{name} = {v} must be in [0,1]")));
            }
        }
        let sum = alpha + num_codes as f64 * beta + gamma;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Schedule(format!(
                "alpha + K*beta + gamma = {sum}, expected 1"
            )));
        }
        Ok(Self {
            num_codes,
            stay: alpha,
            uniform: beta,
            mask: gamma,
        })
    }

    pub fn identity(num_codes: usize) -> Self {
        Self {
            num_codes,
            stay: 1.0,
            uniform: 0.0,
            mask: 0.0,
        }
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    /// Total state count, `K + 1`.
    pub fn num_states(&self) -> usize {
        self.num_codes + 1
    }

    /// Index of the `[MASK]` state (zero-based `K`).
    pub fn mask_state(&self) -> usize {
        self.num_codes
    }

    /// Probability of keeping the same real code, `alpha`.
    pub fn stay(&self) -> f64 {
        self.stay
    }

    /// Per-category uniform resample probability, `beta`.
    pub fn uniform(&self) -> f64 {
        self.uniform
    }

    /// Probability of transitioning into `[MASK]`, `gamma`.
    pub fn mask(&self) -> f64 {
        self.mask
    }

    /// Entry `(to, from)`.
    pub fn entry(&self, to: usize, from: usize) -> f64 {
        let m = self.mask_state();
        assert!(to <= m && from <= m, "state out of range");
        if from == m {
            return if to == m { 1.0 } else { 0.0 };
        }
        if to == m {
            self.mask
        } else if to == from {
            self.stay + self.uniform
        } else {
            self.uniform
        }
    }

    /// The column for a starting state, i.e. the distribution of the next
    /// state given `from`.
    pub fn column(&self, from: usize) -> Vec<f64> {
        (0..self.num_states())
            .map(|to| self.entry(to, from))
            .collect()
    }

    /// Dense `(K+1) × (K+1)` realization, row-major. Test-scale only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.num_states())
            .map(|to| {
                (0..self.num_states())
                    .map(|from| self.entry(to, from))
                    .collect()
            })
            .collect()
    }

    /// Closed-form product `self · earlier` (apply `earlier` first).
    ///
    /// The family is closed under multiplication: stay coefficients
    /// multiply, mask mass accumulates as `c + (1−c)·c'`, and the uniform
    /// coefficient absorbs the remainder.
    pub fn compose(&self, earlier: &TransitionMatrix) -> TransitionMatrix {
        assert_eq!(self.num_codes, earlier.num_codes, "code counts differ");
        let stay = self.stay * earlier.stay;
        let mask = earlier.mask + (1.0 - earlier.mask) * self.mask;
        let uniform = (1.0 - stay - mask) / self.num_codes as f64;
        TransitionMatrix {
            num_codes: self.num_codes,
            stay,
            uniform: uniform.max(0.0),
            mask,
        }
    }
}

/// Per-timestep corruption parameters plus cached cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    num_codes: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    // Cumulative closed form, index t-1: Π alpha_s and 1 − Π (1 − gamma_s).
    cum_stay: Vec<f64>,
    cum_mask: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit per-step `beta` and `gamma` arrays; `alpha` is
    /// derived. Rejects any step where `alpha_t` would go negative.
    pub fn from_rates(num_codes: usize, beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if num_codes < 2 {
            return Err(Error::Schedule("need at least 2 real codes".into()));
        }
        if beta.is_empty() || beta.len() != gamma.len() {
            return Err(Error::Schedule(format!(
                "beta/gamma lengths {} vs {} (need equal, nonzero)",
                beta.len(),
                gamma.len()
            )));
        }
        let k = num_codes as f64;
        let mut alpha = Vec::with_capacity(beta.len());
        for (t0, (&b, &g)) in beta.iter().zip(gamma.iter()).enumerate() {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::Schedule(format!(
                    "gamma_{} = {g} not in [0,1)",
                    t0 + 1
                )));
            }
            if !(0.0..1.0 / k).contains(&b) && b != 0.0 {
                return Err(Error::Schedule(format!(
                    "beta_{} = {b} not in [0,1/K)",
                    t0 + 1
                )));
            }
            if t0 > 0 && (b < beta[t0 - 1] || g < gamma[t0 - 1]) {
                return Err(Error::Schedule(format!(
                    "beta/gamma must be nondecreasing; step {} decreases",
                    t0 + 1
                )));
            }
            let mut a = 1.0 - k * b - g;
            if a < 0.0 {
                if a < -ALPHA_NEG_TOL {
                    return Err(Error::Schedule(format!(
                        "alpha_{} = {a} < 0 (K*beta + gamma exceeds 1)",
                        t0 + 1
                    )));
                }
                a = 0.0;
            }
            alpha.push(a);
        }
        let mut cum_stay = Vec::with_capacity(alpha.len());
        let mut cum_mask = Vec::with_capacity(alpha.len());
        let mut s = 1.0;
        let mut keep = 1.0; // Π (1 − gamma)
        for (&a, &g) in alpha.iter().zip(gamma.iter()) {
            s *= a;
            keep *= 1.0 - g;
            cum_stay.push(s);
            cum_mask.push(1.0 - keep);
        }
        Ok(Self {
            num_steps: beta.len(),
            num_codes,
            alpha,
            beta,
            gamma,
            cum_stay,
            cum_mask,
        })
    }

    /// Linear ramps anchored at the endpoints: `gamma_t = gamma_max·t/T`
    /// and `beta_t = beta_max·t/T`, with per-category `beta`. The ramp
    /// starts at `t/T` rather than 0 so step 1 already corrupts and step
    /// `T` hits the endpoints exactly.
    pub fn linear(
        num_steps: usize,
        num_codes: usize,
        gamma_max: f64,
        beta_max: f64,
    ) -> Result<Self> {
        if num_steps < 1 {
            return Err(Error::Schedule("need at least one timestep".into()));
        }
        let t_max = num_steps as f64;
        let beta = (1..=num_steps)
            .map(|t| beta_max * t as f64 / t_max)
            .collect();
        let gamma = (1..=num_steps)
            .map(|t| gamma_max * t as f64 / t_max)
            .collect();
        Self::from_rates(num_codes, beta, gamma)
    }

    /// Linear ramps where `uniform_mass_max` is the endpoint of the
    /// *total* uniform-resample probability `K·beta_t`. This is the
    /// reading under which the stock mask-0.9 / uniform-0.1 ramps are
    /// valid for any K.
    pub fn linear_uniform_mass(
        num_steps: usize,
        num_codes: usize,
        gamma_max: f64,
        uniform_mass_max: f64,
    ) -> Result<Self> {
        Self::linear(
            num_steps,
            num_codes,
            gamma_max,
            uniform_mass_max / num_codes as f64,
        )
    }

    /// Identity schedule (no corruption) with the given step count.
    pub fn identity(num_steps: usize, num_codes: usize) -> Result<Self> {
        Self::from_rates(num_codes, vec![0.0; num_steps], vec![0.0; num_steps])
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::Schedule(format!(
                "timestep {t} out of range 1..={}",
                self.num_steps
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    /// Total uniform-resample probability at step `t`, `K·beta_t`.
    pub fn uniform_mass(&self, t: usize) -> f64 {
        self.num_codes as f64 * self.beta[t - 1]
    }

    /// Single-step transition matrix `Q_t`, `1 ≤ t ≤ T`.
    pub fn transition(&self, t: usize) -> Result<TransitionMatrix> {
        self.check_t(t)?;
        Ok(TransitionMatrix {
            num_codes: self.num_codes,
            stay: self.alpha[t - 1],
            uniform: self.beta[t - 1],
            mask: self.gamma[t - 1],
        })
    }

    /// Cumulative transition `Q_t · Q_{t−1} · … · Q_1`, `1 ≤ t ≤ T`,
    /// from the cached closed form.
    pub fn cumulative(&self, t: usize) -> Result<TransitionMatrix> {
        self.check_t(t)?;
        Ok(self.cumulative0(t))
    }

    /// Like [`cumulative`](Self::cumulative) but `t = 0` yields the
    /// identity. Used by posterior computations at the chain boundary.
    pub(crate) fn cumulative0(&self, t: usize) -> TransitionMatrix {
        if t == 0 {
            return TransitionMatrix::identity(self.num_codes);
        }
        if t == 1 {
            // A one-matrix product is the matrix itself, bit for bit.
            return TransitionMatrix {
                num_codes: self.num_codes,
                stay: self.alpha[0],
                uniform: self.beta[0],
                mask: self.gamma[0],
            };
        }
        let stay = self.cum_stay[t - 1];
        let mask = self.cum_mask[t - 1];
        let uniform = ((1.0 - stay - mask) / self.num_codes as f64).max(0.0);
        TransitionMatrix {
            num_codes: self.num_codes,
            stay,
            uniform,
            mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dense_product, max_abs_diff};

    #[test]
    fn linear_ramp_matches_direct_evaluation() {
        let s = NoiseSchedule::linear(4, 2, 0.8, 0.05).unwrap();
        let expect_gamma = [0.2, 0.4, 0.6, 0.8];
        let expect_beta = [0.0125, 0.025, 0.0375, 0.05];
        for t in 1..=4 {
            assert!((s.gamma(t) - expect_gamma[t - 1]).abs() < 1e-15);
            assert!((s.beta(t) - expect_beta[t - 1]).abs() < 1e-15);
            let a = 1.0 - 2.0 * s.beta(t) - s.gamma(t);
            assert!((s.alpha(t) - a).abs() < 1e-15);
        }
    }

    #[test]
    fn stock_ramps_hit_endpoints_for_large_k() {
        // gamma to 0.9 and *total* uniform mass to 0.1; valid for any K.
        for k in [2usize, 4, 1024] {
            let s = NoiseSchedule::linear_uniform_mass(100, k, 0.9, 0.1).unwrap();
            assert!((s.gamma(100) - 0.9).abs() < 1e-15);
            assert!((s.uniform_mass(100) - 0.1).abs() < 1e-12);
            assert!(s.alpha(100).abs() < 1e-12);
        }
    }

    #[test]
    fn per_category_beta_of_paper_magnitude_is_rejected_for_large_k() {
        // 1 − K·beta_T − gamma_T drops far below zero: construction fails.
        assert!(NoiseSchedule::linear(100, 1024, 0.9, 0.1).is_err());
        assert!(NoiseSchedule::linear(100, 2, 0.9, 0.1).is_err());
    }

    #[test]
    fn zero_ramps_give_identity_transitions() {
        let s = NoiseSchedule::linear(100, 4, 0.0, 0.0).unwrap();
        for t in [1, 50, 100] {
            let q = s.transition(t).unwrap();
            assert_eq!(q, TransitionMatrix::identity(4));
            let dense = q.to_dense();
            for (i, row) in dense.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    assert_eq!(v, if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn transition_columns_match_hand_substitution() {
        // K=2, alpha=0.5, beta=0.1, gamma=0.3.
        let q = TransitionMatrix::from_rates(2, 0.5, 0.1, 0.3).unwrap();
        assert_eq!(q.column(0), vec![0.6, 0.1, 0.3]);
        assert_eq!(q.column(1), vec![0.1, 0.6, 0.3]);
        assert_eq!(q.column(2), vec![0.0, 0.0, 1.0]);
        for from in 0..3 {
            let sum: f64 = q.column(from).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_column_is_absorbing() {
        for k in [2usize, 8, 1024] {
            let s = NoiseSchedule::linear_uniform_mass(100, k, 0.9, 0.1).unwrap();
            for t in [1, 37, 100] {
                let q = s.transition(t).unwrap();
                assert_eq!(q.entry(q.mask_state(), q.mask_state()), 1.0);
                assert_eq!(q.entry(0, q.mask_state()), 0.0);
            }
        }
    }

    #[test]
    fn cumulative_at_step_one_equals_single_step() {
        let s = NoiseSchedule::linear(10, 4, 0.7, 0.02).unwrap();
        assert_eq!(s.cumulative(1).unwrap(), s.transition(1).unwrap());
    }

    #[test]
    fn two_step_cumulative_matches_explicit_product() {
        // Steps (alpha, beta, gamma) = (0.5, 0.1, 0.3) then (0.3, 0.1, 0.5).
        let s = NoiseSchedule::from_rates(2, vec![0.1, 0.1], vec![0.3, 0.5]).unwrap();
        assert!((s.alpha(1) - 0.5).abs() < 1e-15);
        assert!((s.alpha(2) - 0.3).abs() < 1e-15);
        let oracle = dense_product(&[
            s.transition(1).unwrap().to_dense(),
            s.transition(2).unwrap().to_dense(),
        ]);
        let fast = s.cumulative(2).unwrap().to_dense();
        assert!(max_abs_diff(&oracle, &fast) < 1e-15);
    }

    #[test]
    fn closed_form_matches_explicit_product_to_1e10() {
        for k in [2usize, 4, 8] {
            let s = NoiseSchedule::linear_uniform_mass(100, k, 0.9, 0.1).unwrap();
            let mut singles = Vec::new();
            for t in 1..=100 {
                singles.push(s.transition(t).unwrap().to_dense());
                let oracle = dense_product(&singles);
                let fast = s.cumulative(t).unwrap().to_dense();
                assert!(
                    max_abs_diff(&oracle, &fast) <= 1e-10,
                    "K={k} t={t} diff {}",
                    max_abs_diff(&oracle, &fast)
                );
            }
        }
    }

    #[test]
    fn compose_agrees_with_dense_multiplication() {
        let a = TransitionMatrix::from_rates(3, 0.55, 0.05, 0.3).unwrap();
        let b = TransitionMatrix::from_rates(3, 0.3, 0.1, 0.4).unwrap();
        let composed = b.compose(&a); // apply a first, then b
        let oracle = dense_product(&[a.to_dense(), b.to_dense()]);
        assert!(max_abs_diff(&composed.to_dense(), &oracle) < 1e-15);
    }

    #[test]
    fn mask_absorption_dominates_at_final_step() {
        let s = NoiseSchedule::linear_uniform_mass(100, 4, 0.9, 0.1).unwrap();
        let q = s.cumulative(100).unwrap();
        for from in 0..4 {
            assert!(q.entry(q.mask_state(), from) >= 0.9);
        }
    }

    #[test]
    fn mask_mass_is_nondecreasing_in_t() {
        let s = NoiseSchedule::linear_uniform_mass(100, 8, 0.9, 0.1).unwrap();
        let mut prev = 0.0;
        for t in 1..=100 {
            let m = s.cumulative(t).unwrap().mask();
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn rejects_alpha_below_zero() {
        assert!(NoiseSchedule::from_rates(4, vec![0.2], vec![0.3]).is_err());
        assert!(NoiseSchedule::linear(10, 4, 0.9, 0.05).is_err());
    }

    #[test]
    fn rejects_decreasing_ramps() {
        assert!(NoiseSchedule::from_rates(2, vec![0.1, 0.05], vec![0.1, 0.2]).is_err());
        assert!(NoiseSchedule::from_rates(2, vec![0.05, 0.05], vec![0.3, 0.2]).is_err());
        assert!(NoiseSchedule::from_rates(2, vec![0.05, 0.05], vec![0.2, 0.2]).is_ok());
    }

    #[test]
    fn out_of_range_timesteps_error() {
        let s = NoiseSchedule::linear(5, 2, 0.5, 0.1).unwrap();
        assert!(s.transition(0).is_err());
        assert!(s.transition(6).is_err());
        assert!(s.cumulative(0).is_err());
        assert!(s.cumulative(6).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn columns_of_cumulative_sum_to_one(
                k in 2usize..9,
                steps in 1usize..60,
                gmax in 0.0f64..0.95,
                mass in 0.0f64..0.6,
            ) {
                prop_assume!(gmax + mass < 0.999);
                let s = NoiseSchedule::linear_uniform_mass(steps, k, gmax, mass).unwrap();
                for t in 1..=steps {
                    let q = s.cumulative(t).unwrap();
                    for from in 0..q.num_states() {
                        let col = q.column(from);
                        let sum: f64 = col.iter().sum();
                        prop_assert!((sum - 1.0).abs() < 1e-12);
                        prop_assert!(col.iter().all(|&p| p >= 0.0));
                    }
                }
            }
        }
    }
}
