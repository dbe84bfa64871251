use super::{gemm, Element, Function, Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
struct BmmGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
}

struct Bmm(BmmGeom);

impl<T: Element> Function<T> for Bmm {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let BmmGeom {
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        } = self.0;
        let (a, b) = (x[0].data(), x[1].data());
        let (sa, sb, sc) = (m * k, k * n, m * n);
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); a.len()];
            for i in 0..batch {
                let (bi, gi, di) = (
                    &b[i * sb..(i + 1) * sb],
                    &grad[i * sc..(i + 1) * sc],
                    &mut da[i * sa..(i + 1) * sa],
                );
                if trans_a {
                    gemm(k, n, m, T::one(), bi, trans_b, gi, true, T::zero(), di);
                } else {
                    gemm(m, n, k, T::one(), gi, false, bi, !trans_b, T::zero(), di);
                }
            }
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); b.len()];
            for i in 0..batch {
                let (ai, gi, di) = (
                    &a[i * sa..(i + 1) * sa],
                    &grad[i * sc..(i + 1) * sc],
                    &mut db[i * sb..(i + 1) * sb],
                );
                if trans_b {
                    gemm(n, m, k, T::one(), gi, true, ai, trans_a, T::zero(), di);
                } else {
                    gemm(k, m, n, T::one(), ai, !trans_a, gi, false, T::zero(), di);
                }
            }
            db
        });
        vec![da, db]
    }
}

struct Softmax {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl<T: Element> Function<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        y: &Tensor<T>,
        grad: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let y = y.data();
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |e: usize| (o * self.extent + e) * self.inner + i;
                let dot: T = (0..self.extent).map(|e| grad[at(e)] * y[at(e)]).sum();
                for e in 0..self.extent {
                    dx[at(e)] = y[at(e)] * (grad[at(e)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Element> Graph<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(TensorError::shape(
                "matmul",
                "rank",
                format!("{sa:?} x {sb:?}"),
            ));
        };
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                "inner",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let geom = BmmGeom {
            batch: 1,
            m,
            k,
            n,
            trans_a: false,
            trans_b: false,
        };
        self.bmm_inner(a, b, geom, vec![m, n])
    }

    /// Batched product `op(a[i]) x op(b[i])`, where `op` transposes the last
    /// two axes when the matching flag is set. `a: [B, M, K]` (or `[B, K, M]`),
    /// `b: [B, K, N]` (or `[B, N, K]`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, a1, a2], &[bb, b1, b2]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(TensorError::shape(
                "bmm",
                "rank",
                format!("{sa:?} x {sb:?}"),
            ));
        };
        if ba != bb {
            return Err(TensorError::shape(
                "bmm",
                "batch",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let (m, k) = if trans_a { (a2, a1) } else { (a1, a2) };
        let (k2, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if k != k2 {
            return Err(TensorError::shape(
                "bmm",
                "inner",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let geom = BmmGeom {
            batch: ba,
            m,
            k,
            n,
            trans_a,
            trans_b,
        };
        self.bmm_inner(a, b, geom, vec![ba, m, n])
    }

    fn bmm_inner(&mut self, a: Var, b: Var, geom: BmmGeom, shape: Vec<usize>) -> Result<Var> {
        let BmmGeom {
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        } = geom;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                trans_a,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.record(Bmm(geom), &[a, b], out))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} for rank {}", shape.len()),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent)
                    .map(|e| src[at(e)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for e in 0..extent {
                    let v = (src[at(e)] - max).exp();
                    y[at(e)] = v;
                    total += v;
                }
                for e in 0..extent {
                    y[at(e)] = y[at(e)] / total;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.record(
            Softmax {
                outer,
                extent,
                inner,
            },
            &[x],
            out,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, random_tensor, DEFAULT_EPS};

    fn eval<T: Element>(f: impl FnOnce(&mut Graph<T>) -> Var) -> Tensor<T> {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).clone()
    }

    #[test]
    fn identity_and_zero_products() {
        let a = random_tensor::<f64>(&[3, 3], 5);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let got = eval(|g| {
            let (e, a) = (g.constant(eye.clone()), g.constant(a.clone()));
            g.matmul(e, a).unwrap()
        });
        assert_eq!(got, a);
        let got = eval(|g| {
            let (z, a) = (g.constant(Tensor::zeros(vec![2, 3])), g.constant(a.clone()));
            g.matmul(z, a).unwrap()
        });
        assert_eq!(got, Tensor::zeros(vec![2, 3]));
    }

    #[test]
    fn inner_mismatch_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::Shape { dim: "inner", .. })
        ));
    }

    #[test]
    fn bmm_gradients_all_layouts() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random_tensor(&if ta { [2, 4, 3] } else { [2, 3, 4] }, 1);
            let b = random_tensor(&if tb { [2, 5, 4] } else { [2, 4, 5] }, 2);
            let err = gradcheck(&[a, b], DEFAULT_EPS, |g, v| {
                g.bmm(v[0], v[1], ta, tb).unwrap()
            });
            assert!(err < 1e-7, "{ta} {tb}: {err}");
        }
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let y = eval(|g| {
            let x = g.constant(Tensor::<f64>::full(vec![4], 3.7));
            g.softmax(x, 0).unwrap()
        });
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_large_gap_is_stable() {
        let y = eval(|g| {
            let x = g.constant(Tensor::<f32>::new(vec![2], vec![1e4, 0.0]).unwrap());
            g.softmax(x, 0).unwrap()
        });
        assert!(y.all_finite());
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_gradient_middle_axis() {
        let x = random_tensor(&[2, 3, 4], 9);
        let err = gradcheck(&[x], DEFAULT_EPS, |g, v| g.softmax(v[0], 1).unwrap());
        assert!(err < 1e-5, "{err}");
    }
}
