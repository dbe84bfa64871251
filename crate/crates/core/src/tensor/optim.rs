use rand::Rng;

use super::{Element, Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    momentum: Vec<T>,
    /// Multiplier on the global learning rate; always positive.
    lr_scale: T,
    /// Frozen parameters enter graphs as constants and are never updated.
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let momentum = vec![T::zero(); value.numel()];
        Parameter {
            name: name.into(),
            value,
            grad: None,
            momentum,
            lr_scale: T::one(),
            trainable: true,
        }
    }

    pub fn with_lr_scale(mut self, scale: T) -> Self {
        assert!(scale > T::zero(), "lr_scale must be positive");
        self.lr_scale = scale;
        self
    }

    pub fn lr_scale(&self) -> T {
        self.lr_scale
    }

    pub fn momentum(&self) -> &[T] {
        &self.momentum
    }

    pub fn set_momentum(&mut self, buf: Vec<T>) {
        assert_eq!(buf.len(), self.value.numel(), "momentum buffer shape");
        self.momentum = buf;
    }
}

/// Ordered collection of parameters; order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, param: Parameter<T>) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `graph`; index the result with [`ParamId::index`].
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Adds the gradients of bound parameters into their `grad` slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            let Some(g) = grads.get(v) else { continue };
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    momentum: p.momentum.iter().map(|&m| U::lit(m.as_f64())).collect(),
                    lr_scale: U::lit(p.lr_scale.as_f64()),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    /// Trainable parameters that had no gradient this step.
    pub missing_grad: usize,
}

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * w`, `w <- w - lr_scale * (lr * v)`.
/// Gradients are cleared afterwards.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, cfg: SgdConfig) -> StepReport {
    let (lr, mu, wd) = (
        T::lit(cfg.lr),
        T::lit(cfg.momentum),
        T::lit(cfg.weight_decay),
    );
    let mut report = StepReport::default();
    for p in store.iter_mut().filter(|p| p.trainable) {
        let Some(grad) = p.grad.take() else {
            report.missing_grad += 1;
            continue;
        };
        let scale = p.lr_scale;
        for ((w, v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.iter_mut())
            .zip(grad.data())
        {
            *v = mu * *v + g + wd * *w;
            *w -= scale * (lr * *v);
        }
        report.updated += 1;
    }
    if report.missing_grad > 0 {
        log::warn!(
            "sgd_step: {} parameter(s) without gradient skipped",
            report.missing_grad
        );
    }
    report
}

/// Uniform `[-b, b]` with `b = sqrt(6 / fan_in)`.
pub fn init_uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: &[f64], g: &[f64], scale: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.push(
            Parameter::new("w", Tensor::new(vec![w.len()], w.to_vec()).unwrap())
                .with_lr_scale(scale),
        );
        s.get_mut(id).grad = Some(Tensor::new(vec![g.len()], g.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn plain_gradient_descent() {
        let (mut s, id) = store_with(&[1.0, -2.0], &[0.5, 0.25], 1.0);
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert_eq!(sgd_step(&mut s, cfg).updated, 1);
        assert_eq!(s.get(id).value.data(), &[0.5, -2.25]);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn zero_grad_leaves_weights() {
        let (mut s, id) = store_with(&[1.0, -2.0], &[0.0, 0.0], 1.0);
        sgd_step(
            &mut s,
            SgdConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        assert_eq!(s.get(id).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let g = 0.5;
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (mut s, id) = store_with(&[0.0], &[g], 1.0);
        sgd_step(&mut s, cfg);
        let after_one = s.get(id).value.data()[0];
        s.get_mut(id).grad = Some(Tensor::new(vec![1], vec![g]).unwrap());
        sgd_step(&mut s, cfg);
        let step_two = after_one - s.get(id).value.data()[0];
        assert!((step_two - 0.1 * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn lr_scale_is_exact_multiplier() {
        let cfg = SgdConfig {
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let grads = [0.3, -1.7, 2.2];
        let (mut full, a) = store_with(&[0.0; 3], &grads, 1.0);
        let (mut tenth, b) = store_with(&[0.0; 3], &grads, 0.1);
        sgd_step(&mut full, cfg);
        sgd_step(&mut tenth, cfg);
        for (x, y) in full
            .get(a)
            .value
            .data()
            .iter()
            .zip(tenth.get(b).value.data())
        {
            assert_eq!(0.1 * x, *y);
        }
    }

    #[test]
    fn missing_grad_is_counted() {
        let (mut s, id) = store_with(&[1.0], &[1.0], 1.0);
        s.get_mut(id).grad = None;
        assert_eq!(sgd_step(&mut s, SgdConfig::default()).missing_grad, 1);
        assert_eq!(s.get(id).value.data(), &[1.0]);
    }
}
