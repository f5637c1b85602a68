//! Rotary position application for query/key head vectors.
//!
//! Adjacent coordinate pairs (2i, 2i+1) are rotated by pos * 10000^(-2i/d).
//! Disabling the rotation (the ablation path) is the identity map.

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10000.0;

/// Rotate a head vector in place at the given position. No-op when
/// `enabled` is false.
pub(crate) fn rotate_in_place(x: &mut [f64], pos: usize, enabled: bool) {
    if !enabled {
        return;
    }
    debug_assert!(x.len() % 2 == 0);
    let d = x.len();
    for i in 0..d / 2 {
        let freq = ROPE_BASE.powf(-(2.0 * i as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = c * a - s * b;
        x[2 * i + 1] = s * a + c * b;
    }
}

/// Inverse rotation; transposes the block-diagonal rotation, used when
/// pulling gradients back through the position application.
pub(crate) fn rotate_inverse_in_place(x: &mut [f64], pos: usize, enabled: bool) {
    if !enabled {
        return;
    }
    let d = x.len();
    for i in 0..d / 2 {
        let freq = ROPE_BASE.powf(-(2.0 * i as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = c * a + s * b;
        x[2 * i + 1] = -s * a + c * b;
    }
}

/// Rotary rotation of one head vector by its position-dependent angles.
/// Identity when `enabled` is false. The vector length must be even.
pub fn rope_rotate(x: &[f64], pos: usize, enabled: bool) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::Precondition(format!(
            "rotary rotation needs an even head dim, got {}",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    rotate_in_place(&mut out, pos, enabled);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{dot, norm2, Rng};

    #[test]
    fn position_zero_is_identity() {
        let x = vec![0.3, -1.2, 0.7, 2.0];
        assert_eq!(rope_rotate(&x, 0, true).unwrap(), x);
    }

    #[test]
    fn disabled_is_identity_at_any_position() {
        let x = vec![0.3, -1.2, 0.7, 2.0];
        for pos in [0, 1, 17, 4096] {
            assert_eq!(rope_rotate(&x, pos, false).unwrap(), x);
        }
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = Rng::new(2);
        for pos in [1usize, 5, 100, 2047] {
            let x = rng.gauss_vec(16);
            let y = rope_rotate(&x, pos, true).unwrap();
            assert!((norm2(&x) - norm2(&y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, true).is_err());
    }

    #[test]
    fn inner_product_depends_only_on_offset() {
        let mut rng = Rng::new(3);
        let q = rng.gauss_vec(8);
        let k = rng.gauss_vec(8);
        for (p1, p2, q1, q2) in [(5usize, 3usize, 105usize, 103usize), (10, 0, 42, 32), (7, 7, 900, 900)] {
            assert_eq!(p1 - p2, q1 - q2);
            let a = dot(
                &rope_rotate(&q, p1, true).unwrap(),
                &rope_rotate(&k, p2, true).unwrap(),
            );
            let b = dot(
                &rope_rotate(&q, q1, true).unwrap(),
                &rope_rotate(&k, q2, true).unwrap(),
            );
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let mut rng = Rng::new(4);
        let x = rng.gauss_vec(12);
        let mut y = x.clone();
        rotate_in_place(&mut y, 31, true);
        rotate_inverse_in_place(&mut y, 31, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
