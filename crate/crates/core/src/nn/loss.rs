use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Real;

/// Mean squared Euclidean distance over N×3 rows and its gradient `(2/N)(est - gt)`.
pub fn euclidean_loss<T: Real>(est: &Tensor<T>, gt: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if est.shape() != gt.shape() || est.shape().len() != 2 || est.shape()[1] != 3 {
        return Err(Error::shape(
            "euclidean_loss",
            format!("est {:?} vs gt {:?} (want N×3)", est.shape(), gt.shape()),
        ));
    }
    let n = est.shape()[0];
    if n == 0 {
        return Err(Error::shape("euclidean_loss", "empty batch"));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let two_over_n = T::lit(2.0) * inv_n;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(3 * n);
    for (e, g) in est.data().iter().zip(gt.data()) {
        let d = *e - *g;
        loss += d * d;
        grad.push(two_over_n * d);
    }
    Ok((loss * inv_n, Tensor::from_vec(est.shape(), grad)?))
}
