//! Haar discrete wavelet transform and its inverse.
//!
//! The codec uses one DWT level as a parameter-free, frequency-dependent
//! down-sampler in front of the analysis transform, and the IDWT behind the
//! synthesis transform. Filters follow the classic 2×2 Haar bank; both
//! directions carry a scale factor of 1/2 by default so the transform is
//! orthonormal (energy preserving). The unnormalized ±1 filter variant stays
//! available behind a flag.

use ndarray::ArrayD;

use crate::autograd::{kernels, Scalar};
use crate::error::{Result, SchError};

/// Analysis scale factor.
pub fn forward_factor<T: Scalar>(ortho: bool) -> T {
    if ortho {
        T::from_f64(0.5)
    } else {
        T::one()
    }
}

/// Synthesis scale factor; the exact inverse of [`forward_factor`].
pub fn inverse_factor<T: Scalar>(ortho: bool) -> T {
    if ortho {
        T::from_f64(0.5)
    } else {
        T::from_f64(0.25)
    }
}

/// One level of Haar sub-band coefficients.
///
/// `data` has shape `(4·C, H/2, W/2)` with the sub-images grouped band-major:
/// `[LL(all C), HL(all C), LH(all C), HH(all C)]`.
#[derive(Debug, Clone)]
pub struct WaveletCoeffs<T: Scalar> {
    pub data: ArrayD<T>,
    pub source_shape: (usize, usize, usize),
}

impl<T: Scalar> WaveletCoeffs<T> {
    pub fn new(data: ArrayD<T>, source_shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = source_shape;
        if data.ndim() != 3 {
            return Err(SchError::Dimension(format!(
                "wavelet coefficients must be 3-d, got {}-d",
                data.ndim()
            )));
        }
        let s = data.shape();
        if s[0] != 4 * c || s[1] != h / 2 || s[2] != w / 2 {
            return Err(SchError::Dimension(format!(
                "coefficient shape {:?} inconsistent with source {:?}",
                s, source_shape
            )));
        }
        Ok(WaveletCoeffs { data, source_shape })
    }
}

/// Forward Haar DWT of a `(C, H, W)` image with even spatial dims.
pub fn dwt2<T: Scalar>(image: &ArrayD<T>, ortho: bool) -> Result<WaveletCoeffs<T>> {
    if image.ndim() != 3 {
        return Err(SchError::Dimension(format!(
            "dwt2 expects a (C,H,W) tensor, got {}-d",
            image.ndim()
        )));
    }
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SchError::Dimension(format!(
            "dwt2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let data = kernels::dwt2_kernel(&image.view(), forward_factor::<T>(ortho));
    Ok(WaveletCoeffs { data, source_shape: (c, h, w) })
}

/// Inverse Haar DWT; exact inverse of [`dwt2`] up to float rounding.
pub fn idwt2<T: Scalar>(coeffs: &WaveletCoeffs<T>, ortho: bool) -> Result<ArrayD<T>> {
    idwt2_array(&coeffs.data, ortho)
}

/// Inverse Haar DWT on a raw `(4C, H/2, W/2)` tensor.
pub fn idwt2_array<T: Scalar>(data: &ArrayD<T>, ortho: bool) -> Result<ArrayD<T>> {
    if data.ndim() != 3 {
        return Err(SchError::Dimension(format!(
            "idwt2 expects a (4C,H,W) tensor, got {}-d",
            data.ndim()
        )));
    }
    if data.shape()[0] % 4 != 0 {
        return Err(SchError::Dimension(format!(
            "idwt2 needs a channel count divisible by 4, got {}",
            data.shape()[0]
        )));
    }
    Ok(kernels::idwt2_kernel(&data.view(), inverse_factor::<T>(ortho)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_image_maps_to_scaled_ll() {
        let v = 0.37;
        let img = ArrayD::from_elem(IxDyn(&[2, 8, 8]), v);
        let co = dwt2(&img, true).unwrap();
        assert_eq!(co.data.shape(), &[8, 4, 4]);
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((co.data[[c, i, j]] - 2.0 * v).abs() < 1e-12, "LL must be 2v");
                }
            }
        }
        for band in 1..4 {
            for c in 0..2 {
                assert!(co.data[[band * 2 + c, 0, 0]].abs() < 1e-12, "high bands of a constant are zero");
            }
        }
    }

    #[test]
    fn two_by_two_example() {
        // [[1,2],[3,4]] -> (LL, HL, LH, HH) = (5, 1, 2, 0) under the 1/2 factor
        let img = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let co = dwt2(&img, true).unwrap();
        assert_eq!(co.data.shape(), &[4, 1, 1]);
        assert!((co.data[[0, 0, 0]] - 5.0).abs() < 1e-12);
        assert!((co.data[[1, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((co.data[[2, 0, 0]] - 2.0).abs() < 1e-12);
        assert!((co.data[[3, 0, 0]] - 0.0).abs() < 1e-12);
        // and back
        let rec = idwt2(&co, true).unwrap();
        for (a, b) in rec.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_arithmetic() {
        let img = random_image(3, 256, 256, 1);
        let co = dwt2(&img, true).unwrap();
        assert_eq!(co.data.shape(), &[12, 128, 128]);
    }

    #[test]
    fn odd_dims_rejected() {
        let img = random_image(1, 5, 4, 2);
        assert!(matches!(dwt2(&img, true), Err(SchError::Dimension(_))));
        let bad = ArrayD::<f64>::zeros(IxDyn(&[6, 4, 4]));
        assert!(matches!(idwt2_array(&bad, true), Err(SchError::Dimension(_))));
    }

    #[test]
    fn perfect_reconstruction_and_energy() {
        for seed in 0..10u64 {
            let img = random_image(3, 32, 48, seed);
            let co = dwt2(&img, true).unwrap();
            let rec = idwt2(&co, true).unwrap();
            let max_err = rec
                .iter()
                .zip(img.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 1e-12, "f64 reconstruction error {max_err}");
            let e_in: f64 = img.iter().map(|v| v * v).sum();
            let e_out: f64 = co.data.iter().map(|v| v * v).sum();
            assert!(((e_in - e_out) / e_in).abs() < 1e-10, "energy must be preserved");
        }
    }

    #[test]
    fn unnormalized_roundtrip() {
        let img = random_image(2, 16, 16, 11);
        let co = dwt2(&img, false).unwrap();
        let rec = idwt2(&co, false).unwrap();
        let max_err = rec
            .iter()
            .zip(img.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-12);
    }

    #[test]
    fn linearity() {
        let x = random_image(2, 16, 16, 3);
        let y = random_image(2, 16, 16, 4);
        let (a, b) = (0.7, -1.3);
        let combo = x.mapv(|v| a * v) + &y.mapv(|v| b * v);
        let lhs = dwt2(&combo, true).unwrap().data;
        let rhs = dwt2(&x, true).unwrap().data.mapv(|v| a * v)
            + &dwt2(&y, true).unwrap().data.mapv(|v| b * v);
        let max_err = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12);
    }

    #[test]
    fn ll_is_twice_the_average_pool() {
        let img = random_image(1, 8, 8, 5);
        let co = dwt2(&img, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let avg = (img[[0, 2 * i, 2 * j]]
                    + img[[0, 2 * i, 2 * j + 1]]
                    + img[[0, 2 * i + 1, 2 * j]]
                    + img[[0, 2 * i + 1, 2 * j + 1]])
                    / 4.0;
                assert!((co.data[[0, i, j]] - 2.0 * avg).abs() < 1e-12);
            }
        }
    }
}
