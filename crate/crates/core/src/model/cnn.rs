use super::StageLayout;
use crate::error::Result;
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, relu_backward, relu_forward,
    BatchNormCache, BnMode, ParamSet, Real, Tensor4,
};

/// Everything the CNN backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct CnnCache<T> {
    /// Input of every convolution; `inputs[0]` is the stacked history.
    pub inputs: Vec<Tensor4<T>>,
    /// ReLU inputs, one per block except the last.
    pub pre_relu: Vec<Tensor4<T>>,
    pub bn: Vec<Option<BatchNormCache<T>>>,
    /// Running statistics after this pass, per block with batch norm.
    pub running: Vec<Option<(Vec<T>, Vec<T>)>>,
}

pub(crate) fn cnn_forward<T: Real>(
    params: &ParamSet<T>,
    layout: &StageLayout,
    input: Tensor4<T>,
    mode: BnMode,
) -> Result<(Tensor4<T>, CnnCache<T>)> {
    let depth = layout.convs.len();
    let mut cache = CnnCache {
        inputs: Vec::with_capacity(depth),
        pre_relu: Vec::with_capacity(depth - 1),
        bn: Vec::with_capacity(depth),
        running: Vec::with_capacity(depth),
    };
    let mut x = input;
    for j in 0..depth {
        let c = layout.convs[j];
        let mut y = conv2d_forward(&x, &params.params[c.w].value, &params.params[c.b].value.data)?;
        cache.inputs.push(x);
        match layout.bns[j] {
            Some(b) => {
                let mut mean = params.params[b.mean].value.data.clone();
                let mut var = params.params[b.var].value.data.clone();
                let (out, bc) = batchnorm_forward(
                    &y,
                    &params.params[b.scale].value.data,
                    &params.params[b.shift].value.data,
                    &mut mean,
                    &mut var,
                    mode,
                )?;
                y = out;
                cache.bn.push(Some(bc));
                cache.running.push(Some((mean, var)));
            }
            None => {
                cache.bn.push(None);
                cache.running.push(None);
            }
        }
        if j + 1 == depth {
            return Ok((y, cache));
        }
        x = relu_forward(&y);
        cache.pre_relu.push(y);
    }
    unreachable!("depth is at least two")
}

/// Accumulates parameter gradients and returns the gradient of the input.
pub(crate) fn cnn_backward<T: Real>(
    params: &mut ParamSet<T>,
    layout: &StageLayout,
    cache: &CnnCache<T>,
    grad_out: Tensor4<T>,
) -> Result<Tensor4<T>> {
    let depth = layout.convs.len();
    let mut g = grad_out;
    for j in (0..depth).rev() {
        if j + 1 < depth {
            g = relu_backward(&cache.pre_relu[j], &g)?;
        }
        if let (Some(b), Some(bc)) = (layout.bns[j], &cache.bn[j]) {
            let (gx, gs, gb) = batchnorm_backward(&g, &params.params[b.scale].value.data, bc)?;
            add(&mut params.params[b.scale].grad, &gs);
            add(&mut params.params[b.shift].grad, &gb);
            g = gx;
        }
        let c = layout.convs[j];
        let grads = conv2d_backward(&cache.inputs[j], &params.params[c.w].value, &g)?;
        add(&mut params.params[c.w].grad, &grads.weight);
        add(&mut params.params[c.b].grad, &grads.bias);
        g = grads.input;
    }
    Ok(g)
}

/// Writes the running statistics recorded by a training-mode pass.
pub(crate) fn commit_running<T: Real>(params: &mut ParamSet<T>, layout: &StageLayout, cache: &CnnCache<T>) {
    for (b, r) in layout.bns.iter().zip(&cache.running) {
        if let (Some(b), Some((m, v))) = (b, r) {
            params.params[b.mean].value.data.clone_from(m);
            params.params[b.var].value.data.clone_from(v);
        }
    }
}

pub(crate) fn add<T: Real>(acc: &mut [T], g: &[T]) {
    debug_assert_eq!(acc.len(), g.len());
    acc.iter_mut().zip(g).for_each(|(a, v)| *a += *v);
}
