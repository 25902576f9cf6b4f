use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest admitted power of `ln x` per order.
pub const MAX_LOG_POWER: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhgError {
    #[error("step must be 1/d with d a positive integer, got d = 0")]
    BadStep,
    #[error("log power {j} at order {i} exceeds the cap of {MAX_LOG_POWER}")]
    LogTowerTooDeep { i: usize, j: usize },
    #[error("order {i} exceeds the expansion depth {depth}")]
    BeyondDepth { i: usize, depth: usize },
    #[error("coefficient ({i}, {j}) is not finite")]
    NonFinite { i: usize, j: usize },
    #[error("coefficient ({i}, {j}) has {got} samples, expected {expected} or 1")]
    SampleCount { i: usize, j: usize, expected: usize, got: usize },
    #[error("mismatched steps 1/{a} and 1/{b}")]
    StepMismatch { a: u32, b: u32 },
    #[error("expansions are evaluated at x > 0, got {0}")]
    NonPositive(f64),
    #[error("slot {slot} out of range for {len} samples")]
    Slot { slot: usize, len: usize },
}

/// `Σ_{i<=p} Σ_{j<=N_i} x^{β+iδ} (ln x)^j f_ij` with `δ = 1/d`.
///
/// Every coefficient is a vector of samples over a shared slot (a time grid
/// or angular nodes); a single sample is constant across slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhgExpansion {
    d: u32,
    beta: f64,
    depth: usize,
    coeffs: BTreeMap<(usize, usize), Vec<f64>>,
    remainder_exponent: f64,
}

impl PhgExpansion {
    /// Empty expansion; the remainder exponent defaults to `β + (p+1)δ`.
    pub fn new(d: u32, beta: f64, depth: usize) -> Result<Self, PhgError> {
        if d == 0 {
            return Err(PhgError::BadStep);
        }
        Ok(Self {
            d,
            beta,
            depth,
            coeffs: BTreeMap::new(),
            remainder_exponent: beta + (depth as f64 + 1.0) / d as f64,
        })
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.d as f64
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn remainder_exponent(&self) -> f64 {
        self.remainder_exponent
    }

    pub fn set_remainder_exponent(&mut self, e: f64) {
        self.remainder_exponent = e;
    }

    pub fn exponent(&self, i: usize) -> f64 {
        self.beta + i as f64 / self.d as f64
    }

    pub fn coeffs(&self) -> &BTreeMap<(usize, usize), Vec<f64>> {
        &self.coeffs
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.coeffs.get(&(i, j)).map(|v| v.as_slice())
    }

    /// Coefficient value at a slot, zero when absent.
    pub fn value(&self, i: usize, j: usize, slot: usize) -> f64 {
        match self.coeffs.get(&(i, j)) {
            Some(v) if v.len() == 1 => v[0],
            Some(v) => v.get(slot).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }

    /// Number of slots carried by the coefficients (1 when all constant).
    pub fn slots(&self) -> usize {
        self.coeffs.values().map(|v| v.len()).max().unwrap_or(1)
    }

    /// Highest log power present at order `i`, the `N_i` of the expansion.
    pub fn log_depth(&self, i: usize) -> Option<usize> {
        self.coeffs.range((i, 0)..=(i, MAX_LOG_POWER)).map(|(&(_, j), _)| j).max()
    }

    pub fn set(&mut self, i: usize, j: usize, samples: Vec<f64>) -> Result<(), PhgError> {
        if j > MAX_LOG_POWER {
            return Err(PhgError::LogTowerTooDeep { i, j });
        }
        if i > self.depth {
            return Err(PhgError::BeyondDepth { i, depth: self.depth });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(PhgError::NonFinite { i, j });
        }
        let expected = self.slots();
        if samples.len() != 1 && expected != 1 && samples.len() != expected {
            return Err(PhgError::SampleCount { i, j, expected, got: samples.len() });
        }
        self.coeffs.insert((i, j), samples);
        Ok(())
    }

    pub fn set_const(&mut self, i: usize, j: usize, value: f64) -> Result<(), PhgError> {
        self.set(i, j, vec![value])
    }

    /// Drop coefficients that vanish identically.
    pub fn prune(&mut self) {
        self.coeffs.retain(|_, v| v.iter().any(|c| *c != 0.0));
    }
}

/// `Σ x^{β+iδ} (ln x)^j f_ij` at one slot.
pub fn phg_eval(e: &PhgExpansion, x: f64, slot: usize) -> Result<f64, PhgError> {
    if !(x > 0.0) {
        return Err(PhgError::NonPositive(x));
    }
    let slots = e.slots();
    if slots > 1 && slot >= slots {
        return Err(PhgError::Slot { slot, len: slots });
    }
    let lx = x.ln();
    Ok(e.coeffs
        .keys()
        .map(|&(i, j)| x.powf(e.exponent(i)) * lx.powi(j as i32) * e.value(i, j, slot))
        .sum())
}

fn product_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    match (a.len(), b.len()) {
        (1, _) => b.iter().map(|v| v * a[0]).collect(),
        (_, 1) => a.iter().map(|v| v * b[0]).collect(),
        _ => a.iter().zip(b).map(|(p, q)| p * q).collect(),
    }
}

/// Product expansion, truncated at the smaller depth. Offsets add.
pub fn phg_mul(a: &PhgExpansion, b: &PhgExpansion) -> Result<PhgExpansion, PhgError> {
    if a.d != b.d {
        return Err(PhgError::StepMismatch { a: a.d, b: b.d });
    }
    let depth = a.depth.min(b.depth);
    let mut out = PhgExpansion::new(a.d, a.beta + b.beta, depth)?;
    let mut acc: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (&(ia, ja), ca) in &a.coeffs {
        for (&(ib, jb), cb) in &b.coeffs {
            let (i, j) = (ia + ib, ja + jb);
            if i > depth {
                continue;
            }
            if j > MAX_LOG_POWER {
                return Err(PhgError::LogTowerTooDeep { i, j });
            }
            let p = product_samples(ca, cb);
            match acc.get_mut(&(i, j)) {
                Some(cur) => {
                    if cur.len() == 1 && p.len() > 1 {
                        *cur = p.iter().map(|v| v + cur[0]).collect();
                    } else if p.len() == 1 {
                        cur.iter_mut().for_each(|v| *v += p[0]);
                    } else {
                        cur.iter_mut().zip(&p).for_each(|(v, q)| *v += q);
                    }
                }
                None => {
                    acc.insert((i, j), p);
                }
            }
        }
    }
    for ((i, j), v) in acc {
        out.set(i, j, v)?;
    }
    let truncation = a.beta + b.beta + (depth as f64 + 1.0) / a.d as f64;
    out.remainder_exponent = (a.beta + b.remainder_exponent)
        .min(b.beta + a.remainder_exponent)
        .min(truncation);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn eval_single_terms() {
        let mut e = PhgExpansion::new(1, 0.0, 0).unwrap();
        e.set_const(0, 0, 2.0).unwrap();
        assert_eq!(phg_eval(&e, 0.3, 0).unwrap(), 2.0);
        let mut e = PhgExpansion::new(2, 0.0, 2).unwrap();
        e.set_const(2, 1, 3.0).unwrap();
        let x = (-1f64).exp();
        assert_relative_eq!(phg_eval(&e, x, 0).unwrap(), -3.0 / 1f64.exp(), epsilon = 1e-15);
        assert!(phg_eval(&e, 0.0, 0).is_err());
    }

    #[test]
    fn eval_is_linear() {
        let mut a = PhgExpansion::new(2, 0.5, 3).unwrap();
        a.set_const(1, 0, 1.5).unwrap();
        let mut b = a.clone();
        b.coeffs.clear();
        b.set_const(3, 2, -0.25).unwrap();
        let mut s = a.clone();
        s.set_const(3, 2, -0.25).unwrap();
        for &x in &[0.01, 0.2, 0.9] {
            let lhs = phg_eval(&s, x, 0).unwrap();
            let rhs = phg_eval(&a, x, 0).unwrap() + phg_eval(&b, x, 0).unwrap();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-15);
        }
    }

    #[test]
    fn log_tower_cap() {
        let mut e = PhgExpansion::new(1, 0.0, 2).unwrap();
        assert_eq!(e.set_const(0, 7, 1.0), Err(PhgError::LogTowerTooDeep { i: 0, j: 7 }));
        e.set_const(1, 4, 1.0).unwrap();
        let sq = phg_mul(&e, &e);
        assert_eq!(sq, Err(PhgError::LogTowerTooDeep { i: 2, j: 8 }));
    }

    #[test]
    fn square_root_squared() {
        let mut a = PhgExpansion::new(2, 0.0, 2).unwrap();
        a.set_const(1, 0, 1.0).unwrap();
        let p = phg_mul(&a, &a).unwrap();
        assert_eq!(p.coeffs().len(), 1);
        assert_eq!(p.get(2, 0), Some(&[1.0][..]));
        assert_eq!(p.d(), 2);
    }

    #[test]
    fn binomial_with_logs() {
        let mut a = PhgExpansion::new(1, 0.0, 2).unwrap();
        a.set_const(0, 0, 1.0).unwrap();
        a.set_const(1, 1, 1.0).unwrap();
        let p = phg_mul(&a, &a).unwrap();
        assert_eq!(p.get(0, 0), Some(&[1.0][..]));
        assert_eq!(p.get(1, 1), Some(&[2.0][..]));
        assert_eq!(p.get(2, 2), Some(&[1.0][..]));
        assert_eq!(p.coeffs().len(), 3);
    }

    #[test]
    fn mismatched_steps_rejected() {
        let a = PhgExpansion::new(1, 0.0, 1).unwrap();
        let b = PhgExpansion::new(2, 0.0, 1).unwrap();
        assert_eq!(phg_mul(&a, &b), Err(PhgError::StepMismatch { a: 1, b: 2 }));
    }

    #[test]
    fn sampled_coefficients_multiply_pointwise() {
        let mut a = PhgExpansion::new(1, 0.0, 1).unwrap();
        a.set(0, 0, vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = PhgExpansion::new(1, 0.0, 1).unwrap();
        b.set_const(1, 0, 2.0).unwrap();
        let p = phg_mul(&a, &b).unwrap();
        assert_eq!(p.get(1, 0), Some(&[2.0, 4.0, 6.0][..]));
        assert_eq!(phg_eval(&p, 0.5, 2).unwrap(), 3.0);
    }

    proptest! {
        #[test]
        fn product_matches_pointwise(
            d in 1u32..4,
            ca in proptest::collection::vec((0usize..2, 0usize..3, -2.0f64..2.0), 3),
            cb in proptest::collection::vec((0usize..2, 0usize..3, -2.0f64..2.0), 3),
            ba in -0.5f64..0.5,
            bb in -0.5f64..0.5,
        ) {
            let mut a = PhgExpansion::new(d, ba, 2).unwrap();
            for &(i, j, c) in &ca { a.set_const(i, j, c).unwrap(); }
            let mut b = PhgExpansion::new(d, bb, 2).unwrap();
            for &(i, j, c) in &cb { b.set_const(i, j, c).unwrap(); }
            let p = phg_mul(&a, &b).unwrap();
            prop_assert_eq!(p.d(), d);
            for k in 4..=10 {
                let x = 2f64.powi(-k);
                let lhs = phg_eval(&p, x, 0).unwrap();
                let rhs = phg_eval(&a, x, 0).unwrap() * phg_eval(&b, x, 0).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
        }
    }
}
