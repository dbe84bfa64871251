use super::{dims4, gemm, Element, Function, Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dConfig {
    pub fn same3x3(groups: usize) -> Self {
        Conv2dConfig {
            padding: 1,
            groups,
            ..Default::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cfg: Conv2dConfig,
}

/// Output positions `lo..hi` whose input index `o * stride + offset - pad`
/// lies inside `0..len`.
fn valid_range(
    out_len: usize,
    offset: usize,
    pad: usize,
    stride: usize,
    len: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    if len + pad <= offset {
        return (out_len, out_len);
    }
    let hi = ((len - 1 + pad - offset) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

impl ConvGeom {
    pub fn cg(&self) -> usize {
        self.c / self.cfg.groups
    }

    pub fn fg(&self) -> usize {
        self.f / self.cfg.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    pub fn rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }

    pub fn resolve(
        op: &'static str,
        x: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        cfg: Conv2dConfig,
    ) -> Result<Self> {
        let [n, c, h, w] = dims4(op, x)?;
        let [f, cw, kh, kw] = dims4(op, weight)?;
        if cfg.groups == 0 || cfg.stride == 0 || cfg.dilation == 0 {
            return Err(TensorError::invalid(
                op,
                "groups, stride and dilation must be positive",
            ));
        }
        if c % cfg.groups != 0 {
            return Err(TensorError::shape(
                op,
                "input channels",
                format!("{c} input channels not divisible by {} groups", cfg.groups),
            ));
        }
        if f % cfg.groups != 0 {
            return Err(TensorError::shape(
                op,
                "output channels",
                format!("{f} filters not divisible by {} groups", cfg.groups),
            ));
        }
        if cw != c / cfg.groups {
            return Err(TensorError::shape(
                op,
                "weight channels",
                format!(
                    "weight expects {cw} channels per group, input has {}",
                    c / cfg.groups
                ),
            ));
        }
        if let Some(b) = bias {
            if b != [f] {
                return Err(TensorError::shape(
                    op,
                    "bias",
                    format!("expected [{f}], got {b:?}"),
                ));
            }
        }
        let span_h = cfg.dilation * (kh - 1) + 1;
        let span_w = cfg.dilation * (kw - 1) + 1;
        if h + 2 * cfg.padding < span_h || w + 2 * cfg.padding < span_w {
            return Err(TensorError::shape(
                op,
                "spatial extent",
                format!(
                    "{h}x{w} input (padding {}) smaller than {kh}x{kw} kernel",
                    cfg.padding
                ),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            ho: (h + 2 * cfg.padding - span_h) / cfg.stride + 1,
            wo: (w + 2 * cfg.padding - span_w) / cfg.stride + 1,
            cfg,
        })
    }

    /// Unfolds group `group` of sample `sample` into `col` (`rows x cols`).
    fn im2col<T: Element>(&self, x: &[T], sample: usize, group: usize, col: &mut [T]) {
        let cg = self.cg();
        let plane = self.h * self.w;
        let base = (sample * self.c + group * cg) * plane;
        let Conv2dConfig {
            stride,
            padding,
            dilation,
            ..
        } = self.cfg;
        let cols = self.cols();
        for ci in 0..cg {
            let src = &x[base + ci * plane..base + (ci + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + i * dilation) as isize - padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let (lo, hi) = valid_range(self.wo, j * dilation, padding, stride, self.w);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo * stride + j * dilation - padding;
                            if stride == 1 {
                                line[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                            } else {
                                for (k, out) in line[lo..hi].iter_mut().enumerate() {
                                    *out = srow[start + k * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `col` back, accumulating into `dx`.
    fn col2im<T: Element>(&self, col: &[T], sample: usize, group: usize, dx: &mut [T]) {
        let cg = self.cg();
        let plane = self.h * self.w;
        let base = (sample * self.c + group * cg) * plane;
        let Conv2dConfig {
            stride,
            padding,
            dilation,
            ..
        } = self.cfg;
        let cols = self.cols();
        for ci in 0..cg {
            let dst = &mut dx[base + ci * plane..base + (ci + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + i * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let (lo, hi) = valid_range(self.wo, j * dilation, padding, stride, self.w);
                        if lo < hi {
                            let start = lo * stride + j * dilation - padding;
                            let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                            for (k, &v) in line.iter().enumerate() {
                                drow[start + k * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn group_input<'a, T>(&self, x: &'a [T], sample: usize, group: usize) -> &'a [T] {
        let len = self.cg() * self.h * self.w;
        let start = (sample * self.c + group * self.cg()) * self.h * self.w;
        &x[start..start + len]
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    geom: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, cols, fg) = (geom.rows(), geom.cols(), geom.fg());
    let mut out = vec![T::zero(); geom.n * geom.f * cols];
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for s in 0..geom.n {
        for gi in 0..geom.cfg.groups {
            let patches: &[T] = if geom.is_pointwise() {
                geom.group_input(x, s, gi)
            } else {
                geom.im2col(x, s, gi, &mut col);
                &col
            };
            let w = &weight[gi * fg * rows..(gi + 1) * fg * rows];
            let o0 = (s * geom.f + gi * fg) * cols;
            gemm(
                fg,
                rows,
                cols,
                T::one(),
                w,
                false,
                patches,
                false,
                T::zero(),
                &mut out[o0..o0 + fg * cols],
            );
        }
        if let Some(b) = bias {
            for (fi, &bv) in b.iter().enumerate() {
                let o0 = (s * geom.f + fi) * cols;
                out[o0..o0 + cols].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

struct Conv2dBackward {
    geom: ConvGeom,
}

impl<T: Element> Function<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (x, weight) = (inputs[0].data(), inputs[1].data());
        let (rows, cols, fg) = (geom.rows(), geom.cols(), geom.fg());
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); weight.len()]);
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        for s in 0..geom.n {
            for gi in 0..geom.cfg.groups {
                let o0 = (s * geom.f + gi * fg) * cols;
                let dout = &grad[o0..o0 + fg * cols];
                if let Some(dw) = dw.as_mut() {
                    let patches: &[T] = if geom.is_pointwise() {
                        geom.group_input(x, s, gi)
                    } else {
                        geom.im2col(x, s, gi, &mut col);
                        &col
                    };
                    let dwg = &mut dw[gi * fg * rows..(gi + 1) * fg * rows];
                    gemm(
                        fg,
                        cols,
                        rows,
                        T::one(),
                        dout,
                        false,
                        patches,
                        true,
                        T::one(),
                        dwg,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let w = &weight[gi * fg * rows..(gi + 1) * fg * rows];
                    if geom.is_pointwise() {
                        let len = rows * cols;
                        let start = (s * geom.c + gi * geom.cg()) * cols;
                        gemm(
                            rows,
                            fg,
                            cols,
                            T::one(),
                            w,
                            true,
                            dout,
                            false,
                            T::one(),
                            &mut dx[start..start + len],
                        );
                    } else {
                        gemm(
                            rows,
                            fg,
                            cols,
                            T::one(),
                            w,
                            true,
                            dout,
                            false,
                            T::zero(),
                            &mut dcol,
                        );
                        geom.col2im(&dcol, s, gi, dx);
                    }
                }
            }
        }
        let mut grads = vec![dx, dw];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); geom.f];
                for s in 0..geom.n {
                    for (fi, d) in db.iter_mut().enumerate() {
                        let o0 = (s * geom.f + fi) * cols;
                        *d += grad[o0..o0 + cols].iter().copied().sum::<T>();
                    }
                }
                db
            }));
        }
        grads
    }
}

impl<T: Element> Graph<T> {
    /// Grouped 2-D cross-correlation. `x: [N, C, H, W]`,
    /// `weight: [F, C / groups, kh, kw]`, `bias: [F]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        cfg: Conv2dConfig,
    ) -> Result<Var> {
        let geom = ConvGeom::resolve(
            "conv2d",
            self.shape(x),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            cfg,
        )?;
        let data = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![geom.n, geom.f, geom.ho, geom.wo], data)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(Conv2dBackward { geom }, &inputs, out))
    }
}
