use super::{dims4, Element, Function, Graph, Result, Tensor, TensorError, Var};

struct AvgPool {
    factor: usize,
    dims: [usize; 4],
    out_hw: (usize, usize),
}

impl<T: Element> Function<T> for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if self.factor == 1 {
            return vec![Some(grad.to_vec())];
        }
        let [n, c, h, w] = self.dims;
        let (ho, wo) = self.out_hw;
        let d = self.factor;
        let norm = T::one() / T::lit((d * d) as f64);
        let mut dx = vec![T::zero(); x[0].numel()];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    dx[(p * h + y) * w + xx] = grad[(p * ho + y / d) * wo + xx / d] * norm;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Element> Graph<T> {
    /// Mean over non-overlapping `factor x factor` windows. Extents that are
    /// not multiples of `factor` are zero-padded at the bottom/right, so
    /// the output is `[N, C, ceil(H / factor), ceil(W / factor)]`.
    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::invalid(
                "avg_pool2d",
                "downsample factor must be >= 1",
            ));
        }
        let [n, c, h, w] = dims4("avg_pool2d", self.shape(x))?;
        let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
        let func = AvgPool {
            factor,
            dims: [n, c, h, w],
            out_hw: (ho, wo),
        };
        if factor == 1 {
            let out = self.value(x).clone();
            return Ok(self.record(func, &[x], out));
        }
        let src = self.value(x).data();
        let norm = T::one() / T::lit((factor * factor) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / factor) * wo + xx / factor] += src[(p * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.record(func, &[x], out))
    }
}
