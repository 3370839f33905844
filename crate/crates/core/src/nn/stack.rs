use crate::error::{Error, Result};
use crate::nn::{layer_backward_raw, layer_forward, Grads, LayerSpec, ParamId, ParamStore, Tensor};
use crate::scalar::Real;

/// A layer bound to the parameters it reads.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundLayer {
    pub spec: LayerSpec,
    pub params: Vec<ParamId>,
}

/// Sequential chain of single-input layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stack {
    pub layers: Vec<BoundLayer>,
}

/// Inputs seen by every layer of a [`Stack`] during one forward pass.
#[derive(Clone, Debug)]
pub struct StackTrace<T> {
    inputs: Vec<Tensor<T>>,
}

impl Stack {
    pub fn new() -> Self {
        Stack { layers: Vec::new() }
    }

    /// Appends a layer, allocating its parameters in `store` under `name`.
    pub fn push_new<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        spec: LayerSpec,
    ) -> Result<()> {
        let mut ids = Vec::new();
        for (shape, suffix) in spec.param_shapes().iter().zip(["weight", "bias"]) {
            let p = crate::nn::Parameter::new(format!("{name}.{suffix}"), Tensor::zeros(shape));
            ids.push(store.insert(p)?);
        }
        self.layers.push(BoundLayer { spec, params: ids });
        Ok(())
    }

    /// Appends a layer that reads already-existing parameters (weight sharing).
    pub fn push_bound(&mut self, spec: LayerSpec, params: Vec<ParamId>) {
        self.layers.push(BoundLayer { spec, params });
    }

    pub fn push_stateless(&mut self, spec: LayerSpec) {
        self.layers.push(BoundLayer {
            spec,
            params: Vec::new(),
        });
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| l.params.iter().copied())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = l.spec.infer_shape(&[&shape])?;
        }
        Ok(shape)
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for l in &self.layers {
            let params: Vec<&Tensor<T>> = l.params.iter().map(|&id| &store.get(id).value).collect();
            x = layer_forward(&l.spec, &params, &[&x])?;
            check_finite(&x, &l.spec.to_string())?;
        }
        Ok(x)
    }

    pub fn forward_traced<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: Tensor<T>,
    ) -> Result<(Tensor<T>, StackTrace<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for l in &self.layers {
            let params: Vec<&Tensor<T>> = l.params.iter().map(|&id| &store.get(id).value).collect();
            let y = layer_forward(&l.spec, &params, &[&x])?;
            check_finite(&y, &l.spec.to_string())?;
            inputs.push(x);
            x = y;
        }
        Ok((x, StackTrace { inputs }))
    }

    /// Back-propagates `grad_out`, adding parameter gradients to `grads`.
    /// Returns the gradient w.r.t. the stack input when `need_input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        trace: &StackTrace<T>,
        grad_out: Tensor<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let params: Vec<&Tensor<T>> = l.params.iter().map(|&id| &store.get(id).value).collect();
            let want_in = need_input_grad || i > 0;
            let (mut gx, gp) = layer_backward_raw(&l.spec, &params, &[&trace.inputs[i]], &g, want_in)?;
            for (&id, gp) in l.params.iter().zip(&gp) {
                grads.add(id, gp)?;
            }
            if !want_in {
                return Ok(None);
            }
            g = gx.pop().expect("single-input layer");
        }
        Ok(Some(g))
    }
}

pub(crate) fn check_finite<T: Real>(t: &Tensor<T>, context: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}
