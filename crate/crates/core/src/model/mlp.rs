use super::cnn::add;
use super::ConvIdx;
use crate::error::Result;
use crate::nn::{dense_backward, dense_forward, relu_backward, relu_forward, ParamSet, Real, Tensor4};

/// Inputs and pre-activations of the three dense layers.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    pub inputs: Vec<Tensor4<T>>,
    pub pre_relu: Vec<Tensor4<T>>,
}

/// Three dense layers, each followed by a ReLU. `x` is `(batch, L+1, 1, 1)`.
pub(crate) fn mlp_forward<T: Real>(
    params: &ParamSet<T>,
    idx: &[ConvIdx; 3],
    x: Tensor4<T>,
) -> Result<(Tensor4<T>, MlpCache<T>)> {
    let mut cache = MlpCache {
        inputs: Vec::with_capacity(3),
        pre_relu: Vec::with_capacity(3),
    };
    let mut h = x;
    for l in idx {
        let y = dense_forward(&h, &params.params[l.w].value, &params.params[l.b].value.data)?;
        cache.inputs.push(h);
        h = relu_forward(&y);
        cache.pre_relu.push(y);
    }
    Ok((h, cache))
}

pub(crate) fn mlp_backward<T: Real>(
    params: &mut ParamSet<T>,
    idx: &[ConvIdx; 3],
    cache: &MlpCache<T>,
    grad_out: Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut g = grad_out;
    for (j, l) in idx.iter().enumerate().rev() {
        g = relu_backward(&cache.pre_relu[j], &g)?;
        let grads = dense_backward(&cache.inputs[j], &params.params[l.w].value, &g)?;
        add(&mut params.params[l.w].grad, &grads.weight);
        add(&mut params.params[l.b].grad, &grads.bias);
        g = grads.input;
    }
    Ok(g)
}
