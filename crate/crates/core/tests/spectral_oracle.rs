mod common;

use common::{basis_value, naive_dct2, random_plane, rng};
use trinity_core::spectral::{dct2, dct_basis, idct2, BasisIndex, DctConvention};

#[test]
fn fast_dct_matches_double_sum_on_small_planes() {
    let mut r = rng(11);
    for h in 1..=8 {
        for w in 1..=8 {
            let x = random_plane(&mut r, h, w);
            let fast = dct2(&x, DctConvention::Orthonormal).unwrap();
            let slow = naive_dct2(&x);
            assert!(fast.coefficients.max_abs_diff(&slow) < 1e-9, "{h}x{w}");
        }
    }
}

#[test]
fn fast_dct_matches_double_sum_on_32x32() {
    let mut r = rng(12);
    for _ in 0..50 {
        let x = random_plane(&mut r, 32, 32);
        let spectrum = dct2(&x, DctConvention::Orthonormal).unwrap();
        assert!(spectrum.coefficients.max_abs_diff(&naive_dct2(&x)) < 1e-9);
        let back = idct2(&spectrum, DctConvention::Orthonormal).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }
}

#[test]
fn basis_grid_is_orthonormal_at_8x8() {
    let planes: Vec<_> = (0..64)
        .map(|k| dct_basis(8, 8, BasisIndex::new(k / 8, k % 8), DctConvention::Orthonormal).unwrap())
        .collect();
    for a in 0..64 {
        for b in 0..64 {
            let expected = if a == b { 1.0 } else { 0.0 };
            assert!((planes[a].dot(&planes[b]) - expected).abs() < 1e-9, "({a}, {b})");
        }
    }
}

#[test]
fn library_basis_matches_cosine_formula() {
    for (u, v) in [(0, 0), (1, 3), (6, 6), (3, 0)] {
        let b = dct_basis(7, 7, BasisIndex::new(u, v), DctConvention::Orthonormal).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((b.get(i, j) - basis_value(u, v, i, j, 7, 7)).abs() < 1e-14);
            }
        }
    }
}
