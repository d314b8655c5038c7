use super::{ParamStore, Tensor};
use crate::error::Result;

/// Central-difference gradients `(f(θ+h) − f(θ−h)) / 2h` of a scalar function
/// of every parameter in `store`, one tensor per parameter in id order.
pub fn finite_diff_grad(
    store: &ParamStore,
    h: f64,
    f: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).numel();
        let mut grad = Tensor::zeros(store.value(id).shape().to_vec());
        for j in 0..n {
            let orig = store.value(id).data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + h;
            let up = f(&probe)?;
            probe.get_mut(id).value.data_mut()[j] = orig - h;
            let down = f(&probe)?;
            probe.get_mut(id).value.data_mut()[j] = orig;
            grad.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`: relative error of two gradient tensors,
/// floored so that gradients which are both numerically zero compare equal.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::sigmoid;

    #[test]
    fn square_and_sigmoid() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(3.0), false);
        let g = finite_diff_grad(&store, 1e-5, |s| Ok(s.value(id).data()[0].powi(2))).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);

        store.get_mut(id).value = Tensor::scalar(0.0);
        let g = finite_diff_grad(&store, 1e-5, |s| Ok(sigmoid(s.value(id).data()[0]))).unwrap();
        assert!((g[0].data()[0] - 0.25).abs() < 1e-8);
    }
}
