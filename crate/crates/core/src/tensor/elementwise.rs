//! Pointwise arithmetic, reductions and layout ops.

use super::{Element, Function, Graph, Result, Tensor, TensorError, Var};

struct Add;

impl<T: Element> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct Mul;

impl<T: Element> Function<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (a, b) = (x[0].data(), x[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

/// `x * s` where `s` holds a single value.
struct MulScalar;

impl<T: Element> Function<T> for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let s = x[1].item();
        vec![
            needs[0].then(|| g.iter().map(|&g| g * s).collect()),
            needs[1].then(|| vec![g.iter().zip(x[0].data()).map(|(&g, &v)| g * v).sum()]),
        ]
    }
}

struct Scale<T>(T);

impl<T: Element> Function<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&g| g * self.0).collect())]
    }
}

struct Relu;

impl<T: Element> Function<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        y: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let z = T::zero();
        vec![Some(
            g.iter()
                .zip(y.data())
                .map(|(&g, &y)| if y > z { g } else { z })
                .collect(),
        )]
    }
}

struct Sum;

impl<T: Element> Function<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; x[0].numel()])]
    }
}

struct Reshape;

impl<T: Element> Function<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position, the flat source index under `perm`.
fn permute_gather(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut src = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        src.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    src
}

struct Permute {
    gather: Vec<usize>,
}

impl<T: Element> Function<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); g.len()];
        for (o, &s) in self.gather.iter().enumerate() {
            out[s] = g[o];
        }
        vec![Some(out)]
    }
}

/// Concatenation along `axis`; `outer` blocks of `inner * extent_i` each.
struct Concat {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

impl<T: Element> Function<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let total: usize = self.extents.iter().sum::<usize>() * self.inner;
        let mut start = 0;
        let mut grads = Vec::with_capacity(self.extents.len());
        for (&e, &need) in self.extents.iter().zip(needs) {
            let width = e * self.inner;
            grads.push(need.then(|| {
                let mut out = Vec::with_capacity(self.outer * width);
                for o in 0..self.outer {
                    let base = o * total + start;
                    out.extend_from_slice(&g[base..base + width]);
                }
                out
            }));
            start += width;
        }
        grads
    }
}

impl<T: Element> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(Add, &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(Mul, &[a, b], out))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::shape(
                "mul_scalar",
                "scalar operand",
                format!("expected one element, got {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.record(MulScalar, &[x, s], out))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(Scale(factor), &[x], out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let z = T::zero();
        let out = self.value(x).map(|v| if v > z { v } else { z });
        self.record(Relu, &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record(Sum, &[x], Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(Reshape, &[x], out))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let gather = permute_gather(&shape, perm);
        let src = self.value(x).data();
        let data = gather.iter().map(|&s| src[s]).collect();
        let out = Tensor::new(perm.iter().map(|&p| shape[p]).collect::<Vec<_>>(), data)?;
        Ok(self.record(Permute { gather }, &[x], out))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TensorError::invalid("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range"),
            ));
        }
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    "non-concat axis",
                    format!("{:?} vs {:?} along axis {axis}", s, base),
                ));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &e) in xs.iter().zip(&extents) {
                let w = e * inner;
                data.extend_from_slice(&self.value(x).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            Concat {
                outer,
                inner,
                extents,
            },
            xs,
            out,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                "operand shape",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.5));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_grad_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_fn(vec![5], |i| i as f64 * 0.5 - 1.0);
        let x = g.leaf(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let want: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn each_op_visited_once() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![3], 2.0));
        let a = g.relu(x);
        let b = g.mul(a, x).unwrap();
        let c = g.add(b, a).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.ops_visited(), 4);
        // d/dx (x*x + x) = 2x + 1
        assert_eq!(grads.get(x).unwrap().data(), &[5.0; 3]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn concat_middle_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(vec![2, 1, 2], |i| i as f64));
        let b = g.leaf(Tensor::from_fn(vec![2, 2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(
            g.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
        let w = g.constant(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let m = g.mul(c, w).unwrap();
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(
            grads.get(b).unwrap().data(),
            &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]
        );
    }
}
