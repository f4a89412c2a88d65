//! Trainable parameter storage, the Adam optimizer and a finite-difference
//! gradient checker.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), t.shape());
        self.tensors[id.0] = t;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Shapes in declaration order; used to assert schema-size independence.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Flatten all parameters into one vector (gradient checking).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite parameters from a flat vector (gradient checking).
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

/// Leaf vars for every parameter, registered on a fresh graph.
///
/// `vars[i]` corresponds to `ParamId(i)`; after `backward`, call
/// [`collect_grads`] to pull the per-parameter gradients out.
pub fn register_params(g: &mut Graph, params: &ParamStore) -> Vec<Var> {
    params.tensors.iter().map(|t| g.leaf(t.clone())).collect()
}

/// Per-parameter gradients (zeros when a parameter did not reach the loss).
pub fn collect_grads(grads: &Gradients, params: &ParamStore, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .enumerate()
        .map(|(i, &v)| grads.get_or_zeros(v, params.tensors[i].shape()))
        .collect()
}

/// Glorot-style normal init: std = sqrt(2 / (fan_in + fan_out)).
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.next_normal() * std)
}

/// Zero-initialized vector.
pub fn zeros_vec(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
}

/// Adam optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensors[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / b1c;
                let vhat = v[j] / b2c;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Central finite-difference check of analytic gradients.
///
/// `loss` must be a pure function of the parameters. The analytic gradient
/// vector is compared coordinate by coordinate against
/// `(f(x+h) - f(x-h)) / 2h` with relative error
/// `|a-n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    loss: &mut dyn FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    analytic: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, String> {
    grad_check_filtered(loss, params, analytic, step, tol, &|_| true)
}

/// [`grad_check`] restricted to parameters whose name the filter accepts
/// (large embedding tables are usually checked via the rows a loss touches
/// rather than coordinate by coordinate).
pub fn grad_check_filtered(
    loss: &mut dyn FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    analytic: &[Tensor],
    step: f64,
    tol: f64,
    filter: &dyn Fn(&str) -> bool,
) -> Result<GradCheckReport, String> {
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let floor = 1e-4;
    let mut probe = params.clone();
    for pi in 0..params.len() {
        let id = ParamId(pi);
        if !filter(params.name(id)) {
            continue;
        }
        let base = params.get(id).clone();
        let a_tensor = &analytic[pi];
        for i in 0..base.len() {
            let mut up_t = base.clone();
            up_t.data_mut()[i] += step;
            probe.set(id, up_t);
            let up = loss(&probe);
            let mut down_t = base.clone();
            down_t.data_mut()[i] -= step;
            probe.set(id, down_t);
            let down = loss(&probe);
            probe.set(id, base.clone());
            let numeric = (up - down) / (2.0 * step);
            let a = a_tensor.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
            if rel > tol {
                return Err(format!(
                    "gradient check failed at {}[{i}]: analytic {a} vs numeric {numeric} \
                     (rel {rel:.3e} > {tol:.1e})",
                    params.name(id)
                ));
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn adam_reduces_quadratic() {
        let mut params = ParamStore::new();
        let id = params.add("x", Tensor::vector(vec![5.0, -3.0]));
        let mut opt = Adam::new(&params);
        for _ in 0..500 {
            let g = Tensor::vector(params.get(id).data().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut params, &[g], 0.05);
        }
        for &x in params.get(id).data() {
            assert!(x.abs() < 1e-2, "x = {x}");
        }
    }

    #[test]
    fn grad_check_catches_wrong_gradient() {
        let mut params = ParamStore::new();
        let id = params.add("w", Tensor::vector(vec![0.5, -0.25]));
        let mut loss = |p: &ParamStore| p.get(id).data().iter().map(|x| x * x).sum::<f64>();
        let wrong = vec![Tensor::vector(vec![1.0, 1.0])];
        assert!(grad_check(&mut loss, &params, &wrong, 1e-3, 1e-4).is_err());
        let right = vec![Tensor::vector(vec![1.0, -0.5])];
        grad_check(&mut loss, &params, &right, 1e-3, 1e-4).unwrap();
    }

    #[test]
    fn register_and_collect_roundtrip() {
        let mut params = ParamStore::new();
        let a = params.add("a", Tensor::vector(vec![1.0, 2.0]));
        let _b = params.add("b", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let vars = register_params(&mut g, &params);
        let doubled = g.scale(vars[a.0], 2.0);
        let loss = g.sum_all(doubled);
        let grads = g.backward(loss);
        let collected = collect_grads(&grads, &params, &vars);
        assert_eq!(collected[0].data(), &[2.0, 2.0]);
        assert_eq!(collected[1].data(), &[0.0], "unused param gets zeros");
    }
}
