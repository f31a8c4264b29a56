//! Rotary positional encoding: apply, invert to zero, and shift to a new
//! position.
//!
//! A head vector of even length `d` is treated as `d/2` adjacent pairs
//! `(x_{2j}, x_{2j+1})`; encoding position `i` rotates pair `j`
//! counterclockwise by `i * theta_j` with `theta_j = theta_base^(-2j/d)`.
//! Cached block keys are stored as if their block started at position 0 and
//! are re-rotated to their actual offset at reuse time.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RopeError {
    #[error("head vector length {0} is odd; rotary pairs need an even length")]
    OddLength(usize),
    #[error("head vector length {got} does not match head_dim {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("position {pos} exceeds the precomputed table ({max} positions)")]
    PositionOverflow { pos: usize, max: usize },
}

/// Per-pair rotation parameters with precomputed `cos`/`sin` tables.
///
/// Tables keep every code path reading identical trigonometric values, which
/// bounds the drift between "rotate directly to `i`" and "rotate to zero,
/// then to `i`" to a few ulps per component.
#[derive(Debug, Clone)]
pub struct RopeParams<S> {
    head_dim: usize,
    theta_base: f64,
    max_positions: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> RopeParams<S> {
    pub fn new(head_dim: usize, theta_base: f64, max_positions: usize) -> Result<Self, RopeError> {
        if head_dim % 2 != 0 {
            return Err(RopeError::OddLength(head_dim));
        }
        assert!(theta_base > 1.0, "theta_base must exceed 1");
        let half = head_dim / 2;
        let thetas: Vec<f64> = (0..half)
            .map(|j| theta_base.powf(-2.0 * j as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for &theta in &thetas {
                let angle = pos as f64 * theta;
                cos.push(S::from_f64(angle.cos()).unwrap());
                sin.push(S::from_f64(angle.sin()).unwrap());
            }
        }
        Ok(Self { head_dim, theta_base, max_positions, cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    #[inline]
    fn tables(&self, pos: usize) -> Result<(&[S], &[S]), RopeError> {
        if pos >= self.max_positions {
            return Err(RopeError::PositionOverflow { pos, max: self.max_positions });
        }
        let half = self.head_dim / 2;
        Ok((&self.cos[pos * half..(pos + 1) * half], &self.sin[pos * half..(pos + 1) * half]))
    }

    fn check_len(&self, x: &[S]) -> Result<(), RopeError> {
        if x.len() % 2 != 0 {
            return Err(RopeError::OddLength(x.len()));
        }
        if x.len() != self.head_dim {
            return Err(RopeError::LengthMismatch { got: x.len(), expected: self.head_dim });
        }
        Ok(())
    }
}

/// Rotates each pair counterclockwise by `i * theta_j`, encoding position `i`.
pub fn rope_apply<S: Scalar>(x: &[S], i: usize, p: &RopeParams<S>) -> Result<Vec<S>, RopeError> {
    p.check_len(x)?;
    let mut out = x.to_vec();
    rope_apply_inplace(&mut out, i, p)?;
    Ok(out)
}

/// Rotates each pair clockwise by `i * theta_j`, resetting position `i` to 0.
pub fn rope_unapply<S: Scalar>(x: &[S], i: usize, p: &RopeParams<S>) -> Result<Vec<S>, RopeError> {
    p.check_len(x)?;
    let mut out = x.to_vec();
    rope_unapply_inplace(&mut out, i, p)?;
    Ok(out)
}

/// Rotates a zero-positioned vector to position `i_delta`.
///
/// For a key stored under the cache convention (block start at position 0)
/// this produces the same encoding as rotating the raw vector directly to
/// `i_delta`.
pub fn rope_shift<S: Scalar>(
    k_zero: &[S],
    i_delta: usize,
    p: &RopeParams<S>,
) -> Result<Vec<S>, RopeError> {
    p.check_len(k_zero)?;
    let mut out = k_zero.to_vec();
    rope_shift_inplace(&mut out, i_delta, p)?;
    Ok(out)
}

pub(crate) fn rope_apply_inplace<S: Scalar>(
    x: &mut [S],
    i: usize,
    p: &RopeParams<S>,
) -> Result<(), RopeError> {
    let (cos, sin) = p.tables(i)?;
    for j in 0..x.len() / 2 {
        let (c, s) = (cos[j], sin[j]);
        let x0 = x[2 * j];
        let x1 = x[2 * j + 1];
        x[2 * j] = x0 * c - x1 * s;
        x[2 * j + 1] = x0 * s + x1 * c;
    }
    Ok(())
}

pub(crate) fn rope_unapply_inplace<S: Scalar>(
    x: &mut [S],
    i: usize,
    p: &RopeParams<S>,
) -> Result<(), RopeError> {
    let (cos, sin) = p.tables(i)?;
    for j in 0..x.len() / 2 {
        let (c, s) = (cos[j], sin[j]);
        let x0 = x[2 * j];
        let x1 = x[2 * j + 1];
        x[2 * j] = x0 * c + x1 * s;
        x[2 * j + 1] = x1 * c - x0 * s;
    }
    Ok(())
}

#[inline]
pub(crate) fn rope_shift_inplace<S: Scalar>(
    x: &mut [S],
    i_delta: usize,
    p: &RopeParams<S>,
) -> Result<(), RopeError> {
    rope_apply_inplace(x, i_delta, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn params(d: usize) -> RopeParams<f32> {
        RopeParams::new(d, 10_000.0, 4096).unwrap()
    }

    fn random_vec(rng: &mut SplitMix64, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.next_unit_f64() as f32 * 2.0 - 1.0).collect()
    }

    #[test]
    fn apply_at_zero_is_identity() {
        let p = params(8);
        let x: Vec<f32> = (0..8).map(|i| i as f32 * 0.3 - 1.0).collect();
        assert_eq!(rope_apply(&x, 0, &p).unwrap(), x);
    }

    #[test]
    fn apply_matches_scalar_trig() {
        // d = 2 gives theta_0 = 1 regardless of base: rotation by 1 radian.
        let p = RopeParams::<f32>::new(2, 10_000.0, 16).unwrap();
        let y = rope_apply(&[1.0, 0.0], 1, &p).unwrap();
        assert!((f64::from(y[0]) - 1.0f64.cos()).abs() < 1e-5, "{} vs cos(1)", y[0]);
        assert!((f64::from(y[1]) - 1.0f64.sin()).abs() < 1e-5, "{} vs sin(1)", y[1]);
    }

    #[test]
    fn unapply_inverts_apply() {
        let p = params(8);
        let mut rng = SplitMix64::new(1);
        let x = random_vec(&mut rng, 8);
        let y = rope_apply(&x, 7, &p).unwrap();
        let back = rope_unapply(&y, 7, &p).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unapply_matches_scalar_trig() {
        let p = RopeParams::<f32>::new(2, 10_000.0, 16).unwrap();
        let y = rope_unapply(&[0.5403023f32, 0.84147096], 1, &p).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-5);
        assert!(y[1].abs() < 1e-5);
    }

    #[test]
    fn shift_at_zero_is_identity() {
        let p = params(8);
        let mut rng = SplitMix64::new(2);
        let x = random_vec(&mut rng, 8);
        assert_eq!(rope_shift(&x, 0, &p).unwrap(), x);
    }

    #[test]
    fn shift_from_zero_equals_direct_apply() {
        let p = params(16);
        let mut rng = SplitMix64::new(3);
        let x = random_vec(&mut rng, 16);
        let zero = rope_apply(&x, 0, &p).unwrap();
        let shifted = rope_shift(&zero, 5, &p).unwrap();
        let direct = rope_apply(&x, 5, &p).unwrap();
        for (a, b) in shifted.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn composed_reposition_matches_direct() {
        let p = params(8);
        let mut rng = SplitMix64::new(4);
        let x = random_vec(&mut rng, 8);
        let at3 = rope_apply(&x, 3, &p).unwrap();
        let zeroed = rope_unapply(&at3, 3, &p).unwrap();
        let at9 = rope_shift(&zeroed, 9, &p).unwrap();
        let direct = rope_apply(&x, 9, &p).unwrap();
        for (a, b) in at9.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_length_rejected() {
        let p = params(8);
        let err = rope_apply(&[1.0f32, 2.0, 3.0], 1, &p).unwrap_err();
        assert!(matches!(err, RopeError::OddLength(3)));
    }

    #[test]
    fn position_overflow_rejected() {
        let p = RopeParams::<f32>::new(4, 10_000.0, 8).unwrap();
        let err = rope_apply(&[1.0f32, 0.0, 0.0, 0.0], 8, &p).unwrap_err();
        assert!(matches!(err, RopeError::PositionOverflow { pos: 8, max: 8 }));
    }

    #[test]
    fn theta_strictly_decreasing() {
        let p = params(32);
        // theta_j appears in the position-1 sin table as sin(theta_j).
        let (_, sin1) = p.tables(1).unwrap();
        for w in sin1.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    proptest! {
        #[test]
        fn reposition_equivalence(
            seed in 0u64..1000,
            i in 0usize..4096,
            i_delta in 0usize..4096,
        ) {
            let p = params(32);
            let mut rng = SplitMix64::new(seed);
            let raw = random_vec(&mut rng, 32);
            let encoded = rope_apply(&raw, i, &p).unwrap();
            let zeroed = rope_unapply(&encoded, i, &p).unwrap();
            let repositioned = rope_shift(&zeroed, i_delta, &p).unwrap();
            let direct = rope_apply(&raw, i_delta, &p).unwrap();
            let norm = direct.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-3);
            for (a, b) in repositioned.iter().zip(&direct) {
                prop_assert!((a - b).abs() / norm < 1e-5);
            }
        }

        #[test]
        fn pair_norms_preserved(seed in 0u64..1000, i in 0usize..4096) {
            let p = params(8);
            let mut rng = SplitMix64::new(seed);
            let x = random_vec(&mut rng, 8);
            let y = rope_apply(&x, i, &p).unwrap();
            for j in 0..4 {
                let before = (x[2 * j].powi(2) + x[2 * j + 1].powi(2)).sqrt();
                let after = (y[2 * j].powi(2) + y[2 * j + 1].powi(2)).sqrt();
                prop_assert!((before - after).abs() < 1e-6);
            }
        }

        #[test]
        fn pair_inner_products_preserved(seed in 0u64..500, i in 0usize..2048) {
            let p = params(8);
            let mut rng = SplitMix64::new(seed.wrapping_add(77));
            let a = random_vec(&mut rng, 8);
            let b = random_vec(&mut rng, 8);
            let ra = rope_shift(&a, i, &p).unwrap();
            let rb = rope_shift(&b, i, &p).unwrap();
            for j in 0..4 {
                let before = a[2 * j] * b[2 * j] + a[2 * j + 1] * b[2 * j + 1];
                let after = ra[2 * j] * rb[2 * j] + ra[2 * j + 1] * rb[2 * j + 1];
                prop_assert!((before - after).abs() < 1e-5);
            }
        }
    }
}
