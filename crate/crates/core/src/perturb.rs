//! Multiplicative uniform noise injected into intermediate encoder features:
//! `z~ = z * n + z` with `n ~ U(-bound, bound)` drawn per element.

use ndarray::{Array, Array4, Dimension, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ensure_same_shape, FeatureMap};

pub const DEFAULT_NOISE_BOUND: f64 = 0.3;

/// Per-element noise with every value in `[-bound, bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor<T, D: Dimension> {
    values: Array<T, D>,
    bound: T,
}

impl<T: Scalar, D: Dimension> NoiseTensor<T, D> {
    pub fn values(&self) -> &Array<T, D> {
        &self.values
    }

    pub fn bound(&self) -> T {
        self.bound
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_bound(bound: f64) -> Result<()> {
    if bound.is_finite() && (0.0..1.0).contains(&bound) {
        Ok(())
    } else {
        Err(Error::Config(format!("noise bound must lie in [0, 1), got {bound}")))
    }
}

/// Draws `U(-bound, bound)` noise of the given shape. Same `(shape, seed)` gives
/// bitwise-identical values.
pub fn sample_noise<T: Scalar, D: Dimension>(shape: D, bound: f64, seed: u64) -> Result<NoiseTensor<T, D>> {
    check_bound(bound)?;
    if shape.slice().contains(&0) || shape.ndim() == 0 {
        return Err(Error::InvalidShape(format!("noise shape must have positive extents, got {:?}", shape.slice())));
    }
    let b = T::lit(bound);
    let mut values = Array::<T, D>::zeros(shape);
    if bound > 0.0 {
        let dist = Uniform::new_inclusive(-b, b).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        values.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    }
    Ok(NoiseTensor { values, bound: b })
}

/// `z * n + z`, elementwise, on plain arrays.
pub fn inject_array<T: Scalar, D: Dimension>(z: &Array<T, D>, noise: &NoiseTensor<T, D>) -> Result<Array<T, D>> {
    ensure_same_shape(noise.shape(), z.shape())?;
    let mut out = z.clone();
    Zip::from(&mut out).and(&noise.values).for_each(|o, &n| *o = *o * n + *o);
    Ok(out)
}

/// Perturbs a feature map. The result is differentiable in `z` with the noise
/// held constant: `d z~ / d z = 1 + n`.
pub fn inject<T: Scalar>(z: &FeatureMap<T>, noise: &NoiseTensor<T, ndarray::Ix4>) -> Result<FeatureMap<T>> {
    let out = inject_array(z.as_array(), noise)?;
    Ok(if z.tracks_gradient() { FeatureMap::new(out) } else { FeatureMap::constant(out) })
}

/// Backward of [`inject`]: `dz = dz~ * (1 + n)`.
pub(crate) fn inject_backward<T: Scalar>(grad_out: &Array4<T>, noise: &NoiseTensor<T, ndarray::Ix4>) -> Array4<T> {
    let mut g = grad_out.clone();
    Zip::from(&mut g).and(&noise.values).for_each(|g, &n| *g *= T::one() + n);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Ix1, Ix3, Ix4};

    #[test]
    fn bounded_and_full_shape() {
        let n = sample_noise::<f32, _>(Ix3(8, 16, 16), 0.3, 11).unwrap();
        assert_eq!(n.values().len(), 2048);
        assert!(n.values().iter().all(|v| (-0.3..=0.3).contains(v)));
    }

    #[test]
    fn seeded_determinism() {
        let a = sample_noise::<f64, _>(Ix3(4, 5, 6), 0.3, 99).unwrap();
        let b = sample_noise::<f64, _>(Ix3(4, 5, 6), 0.3, 99).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = sample_noise::<f64, _>(Ix3(4, 5, 6), 0.3, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_mean_near_zero() {
        let n = sample_noise::<f64, _>(Ix1(1_000_000), 0.3, 5).unwrap();
        let mean = n.values().sum() / 1e6;
        assert!(mean.abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn invalid_shapes_and_bounds() {
        assert!(matches!(sample_noise::<f32, _>(Ix3(0, 4, 4), 0.3, 1), Err(Error::InvalidShape(_))));
        assert!(sample_noise::<f32, _>(Ix1(4), 1.5, 1).is_err());
        assert!(sample_noise::<f32, _>(Ix1(4), -0.1, 1).is_err());
    }

    #[test]
    fn hand_example() {
        let noise = NoiseTensor { values: arr1(&[0.3, -0.3]), bound: 0.3 };
        let out = inject_array(&arr1(&[2.0, -1.0]), &noise).unwrap();
        assert!((out[0] - 2.6f64).abs() < 1e-12 && (out[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_input_and_zero_noise() {
        let noise = sample_noise::<f32, _>(Ix4(1, 2, 3, 3), 0.3, 3).unwrap();
        let z = FeatureMap::new(Array4::<f32>::zeros((1, 2, 3, 3)));
        assert!(inject(&z, &noise).unwrap().values().iter().all(|&v| v == 0.0));
        let zero = sample_noise::<f32, _>(Ix4(1, 2, 3, 3), 0.0, 3).unwrap();
        let z = FeatureMap::new(Array4::from_shape_fn((1, 2, 3, 3), |(_, c, h, w)| (c + h * w) as f32 - 2.5));
        assert_eq!(inject(&z, &zero).unwrap(), z);
    }

    #[test]
    fn shape_mismatch() {
        let noise = sample_noise::<f32, _>(Ix4(1, 2, 3, 3), 0.3, 3).unwrap();
        let z = FeatureMap::new(Array4::<f32>::zeros((1, 2, 3, 4)));
        assert!(matches!(inject(&z, &noise), Err(Error::ShapeMismatch { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bound_identity_and_sign(seed in any::<u64>(), vals in proptest::collection::vec(-50.0f64..50.0, 24)) {
                let z = Array4::from_shape_vec((1, 2, 3, 4), vals).unwrap();
                let noise = sample_noise::<f64, _>(Ix4(1, 2, 3, 4), 0.3, seed).unwrap();
                let out = inject_array(&z, &noise).unwrap();
                for ((&o, &zi), &n) in out.iter().zip(z.iter()).zip(noise.values().iter()) {
                    prop_assert!((o - zi).abs() <= 0.3 * zi.abs() * (1.0 + 1e-12));
                    prop_assert!((o - zi * (1.0 + n)).abs() <= 1e-7 * (1.0 + zi.abs()));
                    if zi != 0.0 {
                        prop_assert_eq!(o.signum(), zi.signum());
                    }
                }
            }
        }
    }
}
