use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Default standard deviation for weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Normal samples with standard deviation `std`, redrawn until they fall
/// within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}
