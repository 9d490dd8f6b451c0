//! Parameterized layer building blocks and the name-keyed parameter
//! plumbing shared by the model, the optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Binds parameter tensors onto a tape, memoized by name so that a tensor
/// used twice becomes one leaf (fan-out then accumulates gradients).
#[derive(Default)]
pub struct Binder {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> Var {
        if let Some(&i) = self.index.get(name) {
            return self.vars[i].1;
        }
        let v = tape.leaf(t);
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push((name.to_string(), v));
        v
    }

    /// Name/handle pairs in bind order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.vars
    }
}

/// Accumulates gradients by parameter name across samples and workers.
#[derive(Default, Clone)]
pub struct GradStore {
    grads: HashMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn add(&mut self, name: &str, grad: &[f64]) {
        match self.grads.get_mut(name) {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    /// Pulls every bound parameter's gradient off a consumed tape.
    pub fn absorb(&mut self, tape: &Tape, binder: &Binder) {
        for (name, var) in binder.bound() {
            if let Some(g) = tape.grad(*var) {
                self.add(name, g);
            }
        }
    }

    /// Merges another store into this one (fixed call order keeps f64
    /// summation deterministic).
    pub fn merge(&mut self, other: &GradStore) {
        let mut names: Vec<&String> = other.grads.keys().collect();
        names.sort();
        for name in names {
            self.add(name, &other.grads[name]);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (name, g) in &self.grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(crate::error::Error::NonFinite {
                    context: format!("gradient of {name}"),
                    step,
                });
            }
        }
        Ok(())
    }
}

/// 2-D convolution layer: kernel [f,c,kh,kw] plus bias [f].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        ConvLayer {
            kernel: Tensor::uniform_init(&[out_ch, in_ch, k, k], fan_in, rng),
            bias: Tensor::uniform_init(&[out_ch], fan_in, rng),
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        input: Var,
    ) -> Result<Var> {
        let k = binder.bind(tape, &format!("{prefix}.kernel"), &self.kernel);
        let b = binder.bind(tape, &format!("{prefix}.bias"), &self.bias);
        tape.conv2d(input, k, b, self.stride, self.pad)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.kernel"), &self.kernel);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.kernel"), &mut self.kernel);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Dense layer: weight [in,out] plus optional bias [out].
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn init(in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: Tensor::uniform_init(&[in_dim, out_dim], in_dim, rng),
            bias: with_bias.then(|| Tensor::uniform_init(&[out_dim], in_dim, rng)),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        input: Var,
    ) -> Result<Var> {
        let w = binder.bind(tape, &format!("{prefix}.weight"), &self.weight);
        let y = tape.matmul(input, w)?;
        match &self.bias {
            Some(bias) => {
                let b = binder.bind(tape, &format!("{prefix}.bias"), bias);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_memoizes_by_name() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let t = Tensor::filled(&[2], 1.0).with_requires_grad(true);
        let a = binder.bind(&mut tape, "w", &t);
        let b = binder.bind(&mut tape, "w", &t);
        assert_eq!(a, b);
        assert_eq!(binder.bound().len(), 1);
    }

    #[test]
    fn grad_store_merge_sums() {
        let mut a = GradStore::new();
        a.add("w", &[1.0, 2.0]);
        let mut b = GradStore::new();
        b.add("w", &[0.5, 0.5]);
        b.add("v", &[3.0]);
        a.merge(&b);
        assert_eq!(a.get("w").unwrap(), &[1.5, 2.5]);
        assert_eq!(a.get("v").unwrap(), &[3.0]);
    }
}
