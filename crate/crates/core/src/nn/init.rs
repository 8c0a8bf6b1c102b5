use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Architecture, ParamRole, ParamSpec};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Real, Tensor};

/// I.i.d. uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub fn kaiming_uniform_init<T: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut Stream,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidInput("fan_in must be >= 1".into()));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// I.i.d. normal with mean 0 and standard deviation `std`.
pub fn gaussian_init<T: Real>(shape: &[usize], std: f64, rng: &mut Stream) -> Result<Tensor<T>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidInput(format!("std must be positive, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(std * rng.normal())).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Initialization of convolution kernels. Linear weights are always
/// Kaiming-uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvInit {
    #[default]
    KaimingUniform,
    /// Normal with std `sqrt(2 / n)`, `n` = kernel area times output channels.
    GaussianHe,
    /// Normal with std `2 / n` taken literally.
    GaussianLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InitScheme {
    #[serde(default)]
    pub conv: ConvInit,
}

impl InitScheme {
    /// Draws every parameter of `arch`. Weight `i` (in `param_specs` order)
    /// uses stream `(seed, Init, i)`; biases and batch-norm shifts start at
    /// zero, batch-norm scales at one.
    pub fn init_params<T: Real>(&self, arch: &Architecture, seed: u64) -> Result<Vec<Tensor<T>>> {
        arch.param_specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| self.init_one(spec, seed, i as u32))
            .collect()
    }

    fn init_one<T: Real>(&self, spec: &ParamSpec, seed: u64, index: u32) -> Result<Tensor<T>> {
        match spec.role {
            ParamRole::Weight => {
                let mut rng = Stream::new(seed, Purpose::Init, index);
                match (spec.is_conv, self.conv) {
                    (true, ConvInit::GaussianHe) => {
                        gaussian_init(&spec.shape, (2.0 / spec.fan_out as f64).sqrt(), &mut rng)
                    }
                    (true, ConvInit::GaussianLiteral) => {
                        gaussian_init(&spec.shape, 2.0 / spec.fan_out as f64, &mut rng)
                    }
                    _ => kaiming_uniform_init(&spec.shape, spec.fan_in, &mut rng),
                }
            }
            ParamRole::BnScale => Ok(Tensor::full(&spec.shape, T::one())),
            ParamRole::Bias | ParamRole::BnShift => Ok(Tensor::zeros(&spec.shape)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        (m, v)
    }

    #[test]
    fn kaiming_bound_for_fan_in_six() {
        let t: Tensor<f64> =
            kaiming_uniform_init(&[100, 100], 6, &mut Stream::new(1, Purpose::Init, 0)).unwrap();
        assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn kaiming_is_deterministic() {
        let a: Tensor<f64> =
            kaiming_uniform_init(&[7, 3], 3, &mut Stream::new(9, Purpose::Init, 2)).unwrap();
        let b: Tensor<f64> =
            kaiming_uniform_init(&[7, 3], 3, &mut Stream::new(9, Purpose::Init, 2)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(kaiming_uniform_init::<f64>(&[2], 0, &mut Stream::new(9, Purpose::Init, 2)).is_err());
    }

    #[test]
    fn kaiming_variance() {
        // Var of U(-c, c) is c^2 / 3 = 6 / (3 * fan_in).
        let t: Tensor<f64> =
            kaiming_uniform_init(&[1_000_000], 100, &mut Stream::new(4, Purpose::Init, 0)).unwrap();
        let (_, v) = moments(t.data());
        assert!((v - 0.02).abs() / 0.02 < 0.05);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let t: Tensor<f64> = gaussian_init(&[n], 0.05, &mut Stream::new(5, Purpose::Init, 0)).unwrap();
        let (m, v) = moments(t.data());
        assert!(m.abs() < 5.0 * 0.05 / (n as f64).sqrt());
        assert!((v.sqrt() - 0.05).abs() / 0.05 < 0.02);
        let u: Tensor<f64> = gaussian_init(&[n], 0.05, &mut Stream::new(5, Purpose::Init, 0)).unwrap();
        assert!(t.bitwise_eq(&u));
        assert!(gaussian_init::<f64>(&[3], 0.0, &mut Stream::new(5, Purpose::Init, 0)).is_err());
    }

    #[test]
    fn conv_gaussian_variants() {
        let arch = Architecture::small_cnn(1, 8, 8, 10).unwrap();
        let he: Vec<Tensor<f64>> = InitScheme {
            conv: ConvInit::GaussianHe,
        }
        .init_params(&arch, 3)
        .unwrap();
        let lit: Vec<Tensor<f64>> = InitScheme {
            conv: ConvInit::GaussianLiteral,
        }
        .init_params(&arch, 3)
        .unwrap();
        // Same normal draws scaled by sqrt(2/n) vs 2/n, n = 9 * 8.
        let n = 72.0f64;
        let ratio = (2.0 / n) / (2.0 / n).sqrt();
        for (x, y) in he[0].data().iter().zip(lit[0].data()) {
            assert!((x * ratio - y).abs() < 1e-15);
        }
    }
}
