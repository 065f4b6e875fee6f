//! Rényi-divergence accountant for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step divergences at a grid of orders compose additively over steps and
//! are converted to `(ε, δ)` by `ε = min_α T·ρ(α) + ln(1/δ)/(α − 1)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the σ search in [`calibrate_sigma`].
pub const SIGMA_MAX: f64 = 1e3;

/// Calibrated ε lands in `[ε_target·(1 − tol), ε_target]`.
pub const CALIBRATION_REL_TOL: f64 = 1e-3;

const SIGMA_MIN: f64 = 1e-2;

/// Integers 2..=64 plus 1.25, 1.5, 1.75, 96, 128 and 256, ascending.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend([96.0, 128.0, 256.0]);
    orders
}

fn check_params(q: f64, sigma: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling probability {q} outside (0, 1]")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise multiplier {sigma} must be positive")));
    }
    Ok(())
}

/// `ln(e^a + e^b)`.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^c − 1)` for `c > 0`.
fn ln_expm1(c: f64) -> f64 {
    if c > 40.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

/// `ln(1 + e^x)`.
fn ln1p_exp(x: f64) -> f64 {
    if x > 40.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Integer-order bound. Because the binomial weights sum to one, the moment
/// is `1 + Σ_{j≥2} C(α,j)(1−q)^{α−j} q^j (e^{j(j−1)/2σ²} − 1)`; summing the
/// strictly positive excess in log space keeps full relative precision when
/// the divergence is tiny.
fn rdp_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_s2 = 2.0 * sigma * sigma;
    let a = alpha as f64;
    let mut ln_binom = 0.0_f64;
    let mut excess = f64::NEG_INFINITY;
    for j in 1..=alpha {
        let jf = j as f64;
        ln_binom += ((a - jf + 1.0) / jf).ln();
        if j < 2 {
            continue;
        }
        let c = jf * (jf - 1.0) / two_s2;
        let term = ln_binom + (a - jf) * ln_1mq + jf * ln_q + ln_expm1(c);
        excess = log_add(excess, term);
    }
    ln1p_exp(excess) / (a - 1.0)
}

/// Rényi divergence of one subsampled-Gaussian step at order `alpha`.
///
/// Without subsampling (`q = 1`) this is the exact Gaussian value `α/(2σ²)`.
/// Fractional orders take the larger of the two bracketing integer orders.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("Rényi order {alpha} must exceed 1")));
    }
    check_params(q, sigma)?;
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    if alpha.fract() == 0.0 {
        return Ok(rdp_integer(q, sigma, alpha as u64));
    }
    let lo = alpha.floor() as u64;
    let hi = rdp_integer(q, sigma, lo + 1);
    Ok(if lo >= 2 { hi.max(rdp_integer(q, sigma, lo)) } else { hi })
}

/// Running ledger of accumulated divergence per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    q: f64,
    sigma: f64,
    steps: u64,
    orders: Vec<f64>,
    per_step: Vec<f64>,
    accumulated: Vec<f64>,
}

impl AccountantState {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        Self::with_orders(q, sigma, default_orders())
    }

    pub fn with_orders(q: f64, sigma: f64, orders: Vec<f64>) -> Result<Self> {
        check_params(q, sigma)?;
        if orders.is_empty() {
            return Err(Error::Config("empty order grid".into()));
        }
        let per_step = orders.iter().map(|&a| rdp_step(q, sigma, a)).collect::<Result<Vec<_>>>()?;
        let accumulated = vec![0.0; orders.len()];
        Ok(Self { q, sigma, steps: 0, orders, per_step, accumulated })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    /// Records one more mechanism invocation.
    pub fn step(&mut self) {
        self.advance(1);
    }

    pub fn advance(&mut self, n: u64) {
        self.steps += n;
        let t = self.steps as f64;
        for (acc, per) in self.accumulated.iter_mut().zip(&self.per_step) {
            *acc = t * per;
        }
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        compose_and_convert(self, delta)
    }

    /// `key=value` lines: `q`, `sigma`, `steps`, `orders`, `rdp`.
    pub fn to_ledger(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "q={}", self.q).unwrap();
        writeln!(s, "sigma={}", self.sigma).unwrap();
        writeln!(s, "steps={}", self.steps).unwrap();
        writeln!(s, "orders={}", join(&self.orders)).unwrap();
        writeln!(s, "rdp={}", join(&self.accumulated)).unwrap();
        s
    }

    /// Parses a ledger written by [`to_ledger`](Self::to_ledger) and checks
    /// that the recorded divergences agree with `(q, σ, steps)`.
    pub fn from_ledger(text: &str) -> Result<Self> {
        let mut q = None;
        let mut sigma = None;
        let mut steps = None;
        let mut orders = None;
        let mut rdp = None;
        let floats = |v: &str, line: usize| -> Result<Vec<f64>> {
            v.split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{x}: {e}") })
                })
                .collect()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (k, v) = raw
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected key=value, got {raw:?}") })?;
            let bad = |e: &dyn std::fmt::Display| Error::Parse { line, msg: e.to_string() };
            match k.trim() {
                "q" => q = Some(v.trim().parse::<f64>().map_err(|e| bad(&e))?),
                "sigma" => sigma = Some(v.trim().parse::<f64>().map_err(|e| bad(&e))?),
                "steps" => steps = Some(v.trim().parse::<u64>().map_err(|e| bad(&e))?),
                "orders" => orders = Some(floats(v, line)?),
                "rdp" => rdp = Some(floats(v, line)?),
                other => return Err(Error::Parse { line, msg: format!("unknown key {other:?}") }),
            }
        }
        let missing = |k: &str| Error::Parse { line: 0, msg: format!("ledger is missing {k}") };
        let mut state = Self::with_orders(
            q.ok_or_else(|| missing("q"))?,
            sigma.ok_or_else(|| missing("sigma"))?,
            orders.ok_or_else(|| missing("orders"))?,
        )?;
        state.advance(steps.ok_or_else(|| missing("steps"))?);
        let rdp = rdp.ok_or_else(|| missing("rdp"))?;
        if rdp.len() != state.accumulated.len()
            || rdp.iter().zip(&state.accumulated).any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1e-300))
        {
            return Err(Error::Contract("ledger divergences disagree with its parameters".into()));
        }
        Ok(state)
    }
}

/// `ε = min over orders of [T·ρ(α) + ln(1/δ)/(α − 1)]`.
pub fn compose_and_convert(state: &AccountantState, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("δ = {delta} outside (0, 1)")));
    }
    if state.steps == 0 {
        return Err(Error::Undefined("ε after zero steps".into()));
    }
    let log_inv_delta = -delta.ln();
    let best = state
        .orders
        .iter()
        .zip(&state.accumulated)
        .map(|(&a, &rho)| rho + log_inv_delta / (a - 1.0))
        .filter(|e| e.is_finite())
        .fold(f64::INFINITY, f64::min);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Overflow("no order yields a finite ε".into()))
    }
}

/// ε after `steps` steps at `(q, σ)` on the default order grid.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut state = AccountantState::new(q, sigma)?;
    state.advance(steps);
    compose_and_convert(&state, delta)
}

/// Smallest σ (to bisection precision) with ε(σ) ≤ `eps_target`; the result
/// satisfies `ε ∈ [eps_target·(1 − 1e-3), eps_target]`.
pub fn calibrate_sigma(q: f64, steps: u64, eps_target: f64, delta: f64) -> Result<f64> {
    if !(eps_target > 0.0) {
        return Err(Error::Config(format!("target ε must be positive, got {eps_target}")));
    }
    if steps == 0 {
        return Err(Error::Config("calibration needs at least one step".into()));
    }
    let eps = |s: f64| epsilon_for(q, s, steps, delta);
    let mut hi = SIGMA_MAX;
    if eps(hi)? > eps_target {
        return Err(Error::Infeasible(format!(
            "ε = {eps_target} unreachable with σ ≤ {SIGMA_MAX} over {steps} steps at q = {q}"
        )));
    }
    let mut lo = SIGMA_MIN;
    if eps(lo)? <= eps_target {
        return Ok(lo);
    }
    let floor = eps_target * (1.0 - CALIBRATION_REL_TOL);
    for _ in 0..200 {
        if eps(hi)? >= floor {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= eps_target {
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

    #[test]
    fn no_subsampling_is_gaussian_closed_form() {
        for sigma in [0.5, 1.0, 3.0] {
            for alpha in default_orders() {
                let v = rdp_step(1.0, sigma, alpha).unwrap();
                assert!((v - alpha / (2.0 * sigma * sigma)).abs() <= 1e-12 * v);
            }
        }
    }

    #[test]
    fn integer_formula_at_q_one_matches_closed_form() {
        // the general summation collapses to the Gaussian value at q → 1
        let v = rdp_integer(1.0 - 1e-15, 1.3, 7);
        assert!((v - 7.0 / (2.0 * 1.69)).abs() < 1e-9);
    }

    #[test]
    fn order_two_matches_direct_sum() {
        // α = 2: ln((1−q)² + 2q(1−q) + q² e^{1/σ²}) = ln(1 + q²(e^{1/σ²} − 1))
        let (q, s) = (0.01_f64, 1.0_f64);
        let direct = (q * q * (1.0 / (s * s)).exp_m1()).ln_1p();
        let v = rdp_step(q, s, 2.0).unwrap();
        assert!((v - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn fractional_order_bounded_by_neighbours() {
        let v = rdp_step(0.05, 1.0, 2.5).unwrap();
        assert_eq!(v, rdp_step(0.05, 1.0, 3.0).unwrap().max(rdp_step(0.05, 1.0, 2.0).unwrap()));
        assert_eq!(rdp_step(0.05, 1.0, 1.5).unwrap(), rdp_step(0.05, 1.0, 2.0).unwrap());
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(rdp_step(0.1, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_step(0.0, 1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_step(0.1, 0.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_steps_is_undefined() {
        let s = AccountantState::new(0.1, 1.0).unwrap();
        assert!(matches!(compose_and_convert(&s, 1e-5), Err(Error::Undefined(_))));
    }

    #[test]
    fn ledger_round_trip() {
        let mut s = AccountantState::new(0.03, 1.1).unwrap();
        s.advance(123);
        let back = AccountantState::from_ledger(&s.to_ledger()).unwrap();
        assert_eq!(back, s);
        assert!(AccountantState::from_ledger("q=0.1\nsigma=x\n").is_err());
    }

    #[test]
    fn infeasible_calibration() {
        assert!(matches!(calibrate_sigma(1.0, 10_000, 1e-3, 1e-5), Err(Error::Infeasible(_))));
    }
}
