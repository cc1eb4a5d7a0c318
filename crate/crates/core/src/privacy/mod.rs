//! Gradient sanitization (clip + Gaussian noise) and (epsilon, delta)
//! accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Accounting is Renyi-DP at integer orders 2..=64 with linear composition
//! and the standard RDP -> (epsilon, delta) conversion
//! `eps = min_alpha [steps * rdp(alpha) + log(1/delta) / (alpha - 1)]`.
//! The per-step RDP uses the binomial expansion exact at integer orders;
//! [`oracle`] holds the independent adaptive-quadrature reference the
//! formula is tested against.

pub mod oracle;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("RDP order must be an integer >= 2, got {0}")]
    OrderDomain(u32),
    #[error("non-finite gradient passed to the sanitizer")]
    NonFiniteGradient,
    #[error("empty lot: at least one clipped gradient is required")]
    EmptyLot,
    #[error("privacy budget exhausted: epsilon would reach {would_reach:.6} >= budget {budget:.6} at step {next_step}")]
    BudgetExhausted {
        would_reach: f64,
        budget: f64,
        next_step: u64,
    },
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// Default integer Renyi orders tracked by the ledger.
pub fn default_orders() -> Vec<u32> {
    (2..=64).collect()
}

/// A gradient after L2 clipping to the bound `C`.
#[derive(Debug, Clone)]
pub struct SanitizedGradient {
    pub vector: Vec<f64>,
    pub pre_clip_norm: f64,
    pub was_clipped: bool,
}

/// Clip a flat gradient: `g / max(1, ||g||_2 / C)`. Direction is preserved.
pub fn clip(g: &[f64], clip_bound: f64) -> Result<SanitizedGradient> {
    if !g.iter().all(|v| v.is_finite()) {
        return Err(PrivacyError::NonFiniteGradient);
    }
    if !(clip_bound > 0.0) {
        return Err(PrivacyError::InvalidParameter("clip bound must be positive".into()));
    }
    let norm = crate::tensor::l2_norm(g);
    let denom = (norm / clip_bound).max(1.0);
    let vector = if denom > 1.0 {
        g.iter().map(|v| v / denom).collect()
    } else {
        g.to_vec()
    };
    Ok(SanitizedGradient {
        vector,
        pre_clip_norm: norm,
        was_clipped: denom > 1.0,
    })
}

/// Sum the clipped gradients, add `N(0, sigma^2 C^2 I)`, divide by the lot
/// size. With `sigma == 0` the noise term is exactly zero and no draws are
/// consumed from the rng.
pub fn noise_and_average<R: Rng>(
    clipped: &[SanitizedGradient],
    sigma: f64,
    clip_bound: f64,
    lot_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if clipped.is_empty() {
        return Err(PrivacyError::EmptyLot);
    }
    if lot_size == 0 {
        return Err(PrivacyError::InvalidParameter("lot_size must be >= 1".into()));
    }
    let dim = clipped[0].vector.len();
    if clipped.iter().any(|c| c.vector.len() != dim) {
        return Err(PrivacyError::InvalidParameter(
            "clipped gradients have differing lengths".into(),
        ));
    }
    let mut sum = vec![0.0; dim];
    for c in clipped {
        for (s, v) in sum.iter_mut().zip(&c.vector) {
            *s += v;
        }
    }
    let noise_scale = if sigma == 0.0 { 0.0 } else { sigma * clip_bound };
    if noise_scale > 0.0 {
        if !noise_scale.is_finite() {
            return Err(PrivacyError::InvalidParameter(
                "sigma * C must be finite when sigma > 0".into(),
            ));
        }
        for s in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += noise_scale * z;
        }
    }
    let inv = 1.0 / lot_size as f64;
    for s in sum.iter_mut() {
        *s *= inv;
    }
    Ok(sum)
}

/// Per-step Renyi divergence bound of the Poisson-subsampled Gaussian
/// mechanism at an integer order, via the binomial expansion
/// `A = sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2))`,
/// `rdp = ln(A) / (alpha - 1)`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, order: u32) -> Result<f64> {
    if order < 2 {
        return Err(PrivacyError::OrderDomain(order));
    }
    if !(q >= 0.0 && q <= 1.0) {
        return Err(PrivacyError::InvalidParameter(format!("q must lie in [0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(PrivacyError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let alpha = order as i32;
    let max_exponent = (alpha as f64) * (alpha as f64 - 1.0) / (2.0 * sigma * sigma);

    let log_a = if max_exponent < 690.0 {
        // A = 1 + sum_{k>=2} C(alpha,k) (1-q)^(alpha-k) q^k (e^{k(k-1)/(2s^2)} - 1);
        // the k = 0, 1 terms close the binomial sum to exactly 1.
        let mut corr = 0.0;
        let mut binom = (alpha as f64) * (alpha as f64 - 1.0) / 2.0; // C(alpha, 2)
        for k in 2..=alpha {
            if k > 2 {
                binom *= (alpha - k + 1) as f64 / k as f64;
            }
            let term = binom
                * (1.0 - q).powi(alpha - k)
                * q.powi(k)
                * ((k as f64) * (k as f64 - 1.0) / (2.0 * sigma * sigma)).exp_m1();
            corr += term;
        }
        corr.ln_1p()
    } else {
        // log-sum-exp over log-space terms
        let mut log_terms = Vec::with_capacity(alpha as usize + 1);
        for k in 0..=alpha {
            let mut lt = ln_binomial(alpha, k);
            if alpha - k > 0 {
                lt += (alpha - k) as f64 * (1.0 - q).ln();
            }
            if k > 0 {
                lt += k as f64 * q.ln();
            }
            lt += (k as f64) * (k as f64 - 1.0) / (2.0 * sigma * sigma);
            log_terms.push(lt);
        }
        log_sum_exp(&log_terms)
    };
    Ok(log_a / (alpha as f64 - 1.0))
}

fn ln_binomial(n: i32, k: i32) -> f64 {
    let k = k.min(n - k);
    let mut s = 0.0;
    for i in 1..=k {
        s += ((n - k + i) as f64 / i as f64).ln();
    }
    s
}

fn log_sum_exp(log_terms: &[f64]) -> f64 {
    let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = log_terms.iter().map(|lt| (lt - m).exp()).sum();
    m + s.ln()
}

/// Bookkeeping for one training run's privacy spend.
#[derive(Debug, Clone)]
pub struct PrivacyLedger {
    q: f64,
    noise_multiplier: f64,
    delta: f64,
    clip_bound: f64,
    steps_taken: u64,
    rdp_orders: Vec<u32>,
    accumulated_rdp: Vec<f64>,
    per_step_rdp: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(q: f64, noise_multiplier: f64, delta: f64, clip_bound: f64) -> Result<Self> {
        Self::with_orders(q, noise_multiplier, delta, clip_bound, default_orders())
    }

    pub fn with_orders(
        q: f64,
        noise_multiplier: f64,
        delta: f64,
        clip_bound: f64,
        rdp_orders: Vec<u32>,
    ) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(PrivacyError::InvalidParameter(format!("q must lie in (0, 1], got {q}")));
        }
        if !(noise_multiplier > 0.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "noise multiplier must be positive, got {noise_multiplier}"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        if !(clip_bound > 0.0) || !clip_bound.is_finite() {
            return Err(PrivacyError::InvalidParameter(format!(
                "clip bound must be positive and finite, got {clip_bound}"
            )));
        }
        if rdp_orders.is_empty() {
            return Err(PrivacyError::InvalidParameter("at least one RDP order required".into()));
        }
        let per_step_rdp = rdp_orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, noise_multiplier, a))
            .collect::<Result<Vec<f64>>>()?;
        Ok(PrivacyLedger {
            q,
            noise_multiplier,
            delta,
            clip_bound,
            steps_taken: 0,
            accumulated_rdp: vec![0.0; rdp_orders.len()],
            rdp_orders,
            per_step_rdp,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.noise_multiplier
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Advance the ledger by one application of the mechanism.
    pub fn step(&mut self) {
        self.steps_taken += 1;
        // steps * per_step keeps epsilon() bit-identical to a from-scratch
        // recomputation at the same step count.
        for (acc, r) in self.accumulated_rdp.iter_mut().zip(&self.per_step_rdp) {
            *acc = self.steps_taken as f64 * r;
        }
    }

    /// Current epsilon at the recorded step count. Zero before any step.
    pub fn epsilon(&self) -> f64 {
        self.epsilon_at(self.steps_taken)
    }

    /// Epsilon after a hypothetical number of steps.
    pub fn epsilon_at(&self, steps: u64) -> f64 {
        epsilon_from_rdp(&self.rdp_orders, &self.per_step_rdp, steps, self.delta)
    }

    /// True iff the budget would be met or exceeded after the next step.
    pub fn budget_exhausted(&self, budget_eps: f64) -> bool {
        if budget_eps.is_infinite() {
            return false;
        }
        self.epsilon_at(self.steps_taken + 1) >= budget_eps
    }

    /// Refuse the next step if it would exhaust the budget.
    pub fn check_next_step(&self, budget_eps: f64) -> Result<()> {
        if self.budget_exhausted(budget_eps) {
            return Err(PrivacyError::BudgetExhausted {
                would_reach: self.epsilon_at(self.steps_taken + 1),
                budget: budget_eps,
                next_step: self.steps_taken + 1,
            });
        }
        Ok(())
    }

    pub fn to_document(&self) -> LedgerDocument {
        LedgerDocument {
            q: self.q,
            noise_multiplier: self.noise_multiplier,
            delta: self.delta,
            clip_bound: self.clip_bound,
            steps_taken: self.steps_taken,
            rdp_orders: self.rdp_orders.clone(),
            accumulated_rdp: self.accumulated_rdp.clone(),
            epsilon: self.epsilon(),
        }
    }

    pub fn from_document(doc: &LedgerDocument) -> Result<Self> {
        let mut ledger = Self::with_orders(
            doc.q,
            doc.noise_multiplier,
            doc.delta,
            doc.clip_bound,
            doc.rdp_orders.clone(),
        )?;
        ledger.steps_taken = doc.steps_taken;
        for (acc, r) in ledger.accumulated_rdp.iter_mut().zip(&ledger.per_step_rdp) {
            *acc = doc.steps_taken as f64 * r;
        }
        Ok(ledger)
    }
}

/// Serializable audit form of the ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerDocument {
    pub q: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub clip_bound: f64,
    pub steps_taken: u64,
    pub rdp_orders: Vec<u32>,
    pub accumulated_rdp: Vec<f64>,
    pub epsilon: f64,
}

/// `eps = min_alpha [steps * rdp(alpha) + log(1/delta)/(alpha - 1)]`; zero
/// when no steps were taken.
pub fn epsilon_from_rdp(orders: &[u32], per_step_rdp: &[f64], steps: u64, delta: f64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    let log_inv_delta = (1.0 / delta).ln();
    orders
        .iter()
        .zip(per_step_rdp)
        .map(|(&a, &r)| steps as f64 * r + log_inv_delta / (a as f64 - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest step count whose epsilon meets or exceeds `budget_eps`.
pub fn crossing_steps(q: f64, sigma: f64, delta: f64, budget_eps: f64, orders: &[u32]) -> Result<u64> {
    let per_step: Vec<f64> = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
        .collect::<Result<Vec<f64>>>()?;
    let eps = |s: u64| epsilon_from_rdp(orders, &per_step, s, delta);
    let mut hi = 1u64;
    while eps(hi) < budget_eps {
        hi = hi.checked_mul(2).ok_or_else(|| {
            PrivacyError::InvalidParameter("budget unreachable within u64 steps".into())
        })?;
    }
    let mut lo = 0u64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps(mid) >= budget_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_within_bound_is_identity() {
        let g = vec![0.3, 0.4];
        let s = clip(&g, 1.0).unwrap();
        assert_eq!(s.vector, g);
        assert!(!s.was_clipped);
        assert!((s.pre_clip_norm - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_to_bound() {
        let s = clip(&[3.0, 4.0], 1.0).unwrap();
        assert!((s.vector[0] - 0.6).abs() < 1e-12);
        assert!((s.vector[1] - 0.8).abs() < 1e-12);
        assert!(s.was_clipped);
        // direction preserved
        assert!((s.vector[0] / s.vector[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_vector() {
        let s = clip(&[0.0, 0.0, 0.0], 2.5).unwrap();
        assert_eq!(s.vector, vec![0.0, 0.0, 0.0]);
        assert!(!s.was_clipped);
    }

    #[test]
    fn clip_rejects_non_finite() {
        assert!(clip(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn noise_vanishes_in_sigma_zero_limit() {
        let c1 = clip(&[2.0, 0.0], 10.0).unwrap();
        let c2 = clip(&[0.0, 4.0], 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let avg = noise_and_average(&[c1.clone(), c2.clone()], 1e-12, 1.0, 2, &mut rng).unwrap();
        assert!((avg[0] - 1.0).abs() < 1e-9);
        assert!((avg[1] - 2.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let exact = noise_and_average(&[c1, c2], 0.0, 1.0, 2, &mut rng).unwrap();
        assert_eq!(exact, vec![1.0, 2.0]);
    }

    #[test]
    fn noise_variance_matches_sigma_sq_c_sq() {
        // single zero gradient, sigma=2, C=1, lot_size=1 -> Var = 4
        let zero = clip(&[0.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = noise_and_average(std::slice::from_ref(&zero), 2.0, 1.0, 1, &mut rng).unwrap()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - 4.0).abs() / 4.0 < 0.05, "variance {}", var);
    }

    #[test]
    fn noise_is_reproducible_per_seed() {
        let c = clip(&[1.0, -1.0, 0.5], 1.0).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            noise_and_average(std::slice::from_ref(&c), 2.0, 1.0, 3, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_lot_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            noise_and_average(&[], 1.0, 1.0, 1, &mut rng),
            Err(PrivacyError::EmptyLot)
        ));
    }

    #[test]
    fn rdp_full_sampling_closed_form() {
        // q = 1 -> alpha / (2 sigma^2)
        for &(sigma, alpha) in &[(1.0, 2u32), (2.0, 16), (4.0, 64), (0.7, 5)] {
            let got = rdp_subsampled_gaussian(1.0, sigma, alpha).unwrap();
            let expect = alpha as f64 / (2.0 * sigma * sigma);
            assert!(
                (got - expect).abs() < 1e-10 * expect.max(1.0),
                "q=1 sigma={sigma} alpha={alpha}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn rdp_vanishes_as_q_to_zero() {
        let v = rdp_subsampled_gaussian(1e-9, 2.0, 8).unwrap();
        assert!(v >= 0.0 && v < 1e-14, "got {v}");
        assert_eq!(rdp_subsampled_gaussian(0.0, 2.0, 8).unwrap(), 0.0);
    }

    #[test]
    fn rdp_frozen_regression_value() {
        // computed by 50-digit quadrature/expansion before the build
        let got = rdp_subsampled_gaussian(0.01, 2.0, 8).unwrap();
        let frozen = 1.1575614792991032e-4;
        assert!(
            (got - frozen).abs() < 1e-12,
            "rdp(0.01, 2, 8) = {got}, frozen {frozen}"
        );
    }

    #[test]
    fn rdp_rejects_low_order() {
        assert!(matches!(
            rdp_subsampled_gaussian(0.01, 2.0, 1),
            Err(PrivacyError::OrderDomain(1))
        ));
        assert!(matches!(
            rdp_subsampled_gaussian(0.01, 2.0, 0),
            Err(PrivacyError::OrderDomain(0))
        ));
    }

    #[test]
    fn epsilon_zero_steps_is_zero() {
        let ledger = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
        assert_eq!(ledger.epsilon(), 0.0);
    }

    #[test]
    fn epsilon_frozen_spot_values() {
        // frozen from the 50-digit reference
        let ledger = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
        for &(steps, expect) in &[
            (1u64, 0.4492017967383813),
            (100, 0.5192626611229062),
            (1000, 1.0226334793672420),
        ] {
            let got = ledger.epsilon_at(steps);
            assert!(
                (got - expect).abs() < 1e-9,
                "epsilon({steps}) = {got}, frozen {expect}"
            );
        }
    }

    #[test]
    fn epsilon_decreases_when_sigma_doubles() {
        let a = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
        let b = PrivacyLedger::new(0.01, 4.0, 1e-7, 1.0).unwrap();
        assert!(b.epsilon_at(500) < a.epsilon_at(500));
    }

    #[test]
    fn crossing_steps_frozen_paper_operating_point() {
        // paper operating point q=0.01, sigma=2, delta=1e-7;
        // frozen from the 50-digit reference
        let orders = default_orders();
        for &(budget, expect) in &[
            (1.0, 955u64),
            (4.0, 15_197),
            (8.0, 55_402),
            (10.0, 83_309),
            (12.0, 115_952),
        ] {
            let got = crossing_steps(0.01, 2.0, 1e-7, budget, &orders).unwrap();
            assert_eq!(got, expect, "crossing for eps={budget}");
        }
    }

    #[test]
    fn budget_exhaustion_semantics() {
        let mut ledger = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
        assert!(!ledger.budget_exhausted(1.0));
        assert!(!ledger.budget_exhausted(1e9));
        assert!(!ledger.budget_exhausted(f64::INFINITY));

        // at the crossing step the flag must be on
        let crossing = crossing_steps(0.01, 2.0, 1e-7, 1.0, &default_orders()).unwrap();
        for _ in 0..crossing {
            ledger.step();
        }
        assert!(ledger.epsilon() >= 1.0);
        assert!(ledger.budget_exhausted(1.0));

        // one step before the crossing the next step is refused
        let fresh = {
            let mut l = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
            for _ in 0..crossing - 1 {
                l.step();
            }
            l
        };
        assert!(fresh.epsilon() < 1.0);
        assert!(fresh.budget_exhausted(1.0));
        assert!(fresh.check_next_step(1.0).is_err());
    }

    #[test]
    fn tighter_budget_exhausts_no_later() {
        let orders = default_orders();
        let c1 = crossing_steps(0.01, 2.0, 1e-7, 1.0, &orders).unwrap();
        let c12 = crossing_steps(0.01, 2.0, 1e-7, 12.0, &orders).unwrap();
        assert!(c1 < c12);
    }

    #[test]
    fn ledger_document_round_trip() {
        let mut ledger = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
        for _ in 0..37 {
            ledger.step();
        }
        let doc = ledger.to_document();
        let json = serde_json::to_string(&doc).unwrap();
        let back: LedgerDocument = serde_json::from_str(&json).unwrap();
        let restored = PrivacyLedger::from_document(&back).unwrap();
        assert_eq!(restored.steps_taken(), 37);
        assert_eq!(restored.epsilon(), ledger.epsilon());
        assert_eq!(back.epsilon, ledger.epsilon());
    }

    proptest! {
        #[test]
        fn post_clip_norm_never_exceeds_bound(
            g in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in 0.01f64..10.0,
        ) {
            let s = clip(&g, c).unwrap();
            prop_assert!(crate::tensor::l2_norm(&s.vector) <= c + 1e-9);
        }

        #[test]
        fn epsilon_monotone_grid(
            steps in 1u64..2000,
            extra in 1u64..2000,
        ) {
            let ledger = PrivacyLedger::new(0.01, 2.0, 1e-7, 1.0).unwrap();
            prop_assert!(ledger.epsilon_at(steps + extra) >= ledger.epsilon_at(steps));
        }
    }

    #[test]
    fn epsilon_monotone_in_q_sigma_delta() {
        let steps = 400;
        let eps = |q: f64, sigma: f64, delta: f64| {
            PrivacyLedger::new(q, sigma, delta, 1.0).unwrap().epsilon_at(steps)
        };
        // nondecreasing in q
        assert!(eps(0.005, 2.0, 1e-7) <= eps(0.01, 2.0, 1e-7));
        assert!(eps(0.01, 2.0, 1e-7) <= eps(0.1, 2.0, 1e-7));
        // nonincreasing in sigma
        assert!(eps(0.01, 4.0, 1e-7) <= eps(0.01, 2.0, 1e-7));
        assert!(eps(0.01, 2.0, 1e-7) <= eps(0.01, 1.0, 1e-7));
        // nonincreasing in delta
        assert!(eps(0.01, 2.0, 1e-5) <= eps(0.01, 2.0, 1e-7));
    }
}
