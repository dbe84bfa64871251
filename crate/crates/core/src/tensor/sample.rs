//! Bilinear sampling at fractional coordinates and deformable convolution.
//!
//! Samples outside the feature plane read as zero. Both ops are
//! differentiable with respect to the sampled values and the coordinates.

use super::{dims4, gemm, Element, Function, Graph, Result, Tensor, TensorError, Var};

/// Interpolation stencil of one fractional sample point: flat indices of the
/// four neighbours `(y0,x0) (y0,x0+1) (y0+1,x0) (y0+1,x0+1)` and the
/// coefficients for the value and its y/x derivatives. Out-of-plane
/// neighbours carry zero coefficients.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    idx: [usize; 4],
    w: [T; 4],
    dy: [T; 4],
    dx: [T; 4],
}

impl<T: Element> Tap<T> {
    fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let (ly, lx) = (y - y0, x - x0);
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let mut tap = Tap {
            idx: [0; 4],
            w: [hy * hx, hy * lx, ly * hx, ly * lx],
            dy: [-hx, -lx, hx, lx],
            dx: [-hy, hy, -ly, ly],
        };
        let (y0, x0) = (
            y0.to_i64().unwrap_or(i64::MIN / 2),
            x0.to_i64().unwrap_or(i64::MIN / 2),
        );
        for (n, (oy, ox)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (yy, xx) = (y0 + oy, x0 + ox);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                tap.idx[n] = yy as usize * w + xx as usize;
            } else {
                tap.w[n] = T::zero();
                tap.dy[n] = T::zero();
                tap.dx[n] = T::zero();
            }
        }
        tap
    }

    #[inline]
    fn sample(&self, plane: &[T]) -> T {
        self.w[0] * plane[self.idx[0]]
            + self.w[1] * plane[self.idx[1]]
            + self.w[2] * plane[self.idx[2]]
            + self.w[3] * plane[self.idx[3]]
    }

    #[inline]
    fn grad_y(&self, plane: &[T]) -> T {
        (0..4).map(|n| self.dy[n] * plane[self.idx[n]]).sum()
    }

    #[inline]
    fn grad_x(&self, plane: &[T]) -> T {
        (0..4).map(|n| self.dx[n] * plane[self.idx[n]]).sum()
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        for n in 0..4 {
            plane[self.idx[n]] += self.w[n] * g;
        }
    }
}

/// Bilinear read of an `h x w` plane at fractional `(y, x)`; zero outside.
/// Lattice points return the stored value unchanged.
pub fn bilinear_at<T: Element>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    if y.fract() == T::zero() && x.fract() == T::zero() {
        let (yi, xi) = (y.to_i64().unwrap_or(-1), x.to_i64().unwrap_or(-1));
        if yi < 0 || xi < 0 || yi as usize >= h || xi as usize >= w {
            return T::zero();
        }
        return plane[yi as usize * w + xi as usize];
    }
    Tap::new(y, x, h, w).sample(plane)
}

struct BilinearSample {
    dims: (usize, usize, usize),
}

impl<T: Element> Function<T> for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (c, h, w) = self.dims;
        let (feat, coords) = (x[0].data(), x[1].data());
        let len = coords.len() / 2;
        let taps: Vec<Tap<T>> = (0..len)
            .map(|l| Tap::new(coords[2 * l], coords[2 * l + 1], h, w))
            .collect();
        let dfeat = needs[0].then(|| {
            let mut d = vec![T::zero(); feat.len()];
            for ci in 0..c {
                let plane = &mut d[ci * h * w..(ci + 1) * h * w];
                for (l, tap) in taps.iter().enumerate() {
                    tap.scatter(plane, grad[ci * len + l]);
                }
            }
            d
        });
        let dcoords = needs[1].then(|| {
            let mut d = vec![T::zero(); coords.len()];
            for ci in 0..c {
                let plane = &feat[ci * h * w..(ci + 1) * h * w];
                for (l, tap) in taps.iter().enumerate() {
                    let g = grad[ci * len + l];
                    d[2 * l] += g * tap.grad_y(plane);
                    d[2 * l + 1] += g * tap.grad_x(plane);
                }
            }
            d
        });
        vec![dfeat, dcoords]
    }
}

/// Geometry of a deformable convolution. The offset tensor carries one
/// `(dy, dx)` pair per group and kernel tap: channel `g * 2K + 2k` holds
/// `dy` and `g * 2K + 2k + 1` holds `dx` for tap `k = i * kw + j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    /// Channel groups; each group has its own offset field.
    pub groups: usize,
}

impl DeformConfig {
    pub fn same3x3(groups: usize) -> Self {
        DeformConfig {
            stride: 1,
            padding: 1,
            dilation: 1,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct DeformGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cfg: DeformConfig,
}

impl DeformGeom {
    fn cg(&self) -> usize {
        self.c / self.cfg.groups
    }

    fn fg(&self) -> usize {
        self.f / self.cfg.groups
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Stencils for every (tap, output position) of group `g` in sample `s`.
    fn build_taps<T: Element>(&self, offsets: &[T], s: usize, g: usize) -> Vec<Tap<T>> {
        let (k_all, cols) = (self.taps(), self.cols());
        let off_base = (s * self.cfg.groups + g) * 2 * k_all * cols;
        let DeformConfig {
            stride,
            padding,
            dilation,
            ..
        } = self.cfg;
        let mut taps = Vec::with_capacity(k_all * cols);
        for k in 0..k_all {
            let (i, j) = (k / self.kw, k % self.kw);
            let dy = &offsets[off_base + 2 * k * cols..off_base + (2 * k + 1) * cols];
            let dx = &offsets[off_base + (2 * k + 1) * cols..off_base + (2 * k + 2) * cols];
            for oy in 0..self.ho {
                let base_y = T::lit((oy * stride + i * dilation) as f64 - padding as f64);
                for ox in 0..self.wo {
                    let base_x = T::lit((ox * stride + j * dilation) as f64 - padding as f64);
                    let p = oy * self.wo + ox;
                    taps.push(Tap::new(base_y + dy[p], base_x + dx[p], self.h, self.w));
                }
            }
        }
        taps
    }

    /// Deformed patch matrix `[cg * K, Ho * Wo]`.
    fn fill_col<T: Element>(&self, x: &[T], taps: &[Tap<T>], s: usize, g: usize, col: &mut [T]) {
        let plane_len = self.h * self.w;
        let n_taps = taps.len();
        for ci in 0..self.cg() {
            let c_abs = g * self.cg() + ci;
            let plane = &x[(s * self.c + c_abs) * plane_len..(s * self.c + c_abs + 1) * plane_len];
            let row = &mut col[ci * n_taps..(ci + 1) * n_taps];
            for (dst, tap) in row.iter_mut().zip(taps) {
                *dst = tap.sample(plane);
            }
        }
    }
}

struct DeformConv {
    geom: DeformGeom,
}

impl<T: Element> Function<T> for DeformConv {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (x, offsets, weight) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (cg, fg, k_all, cols) = (geom.cg(), geom.fg(), geom.taps(), geom.cols());
        let rows = cg * k_all;
        let plane_len = geom.h * geom.w;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut doff = needs[1].then(|| vec![T::zero(); offsets.len()]);
        let mut dw = needs[2].then(|| vec![T::zero(); weight.len()]);
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        for s in 0..geom.n {
            for g in 0..geom.cfg.groups {
                let taps = geom.build_taps(offsets, s, g);
                let o0 = (s * geom.f + g * fg) * cols;
                let dout = &grad[o0..o0 + fg * cols];
                let wg = &weight[g * fg * rows..(g + 1) * fg * rows];
                if let Some(dw) = dw.as_mut() {
                    geom.fill_col(x, &taps, s, g, &mut col);
                    gemm(
                        fg,
                        cols,
                        rows,
                        T::one(),
                        dout,
                        false,
                        &col,
                        true,
                        T::one(),
                        &mut dw[g * fg * rows..(g + 1) * fg * rows],
                    );
                }
                if dx.is_none() && doff.is_none() {
                    continue;
                }
                gemm(
                    rows,
                    fg,
                    cols,
                    T::one(),
                    wg,
                    true,
                    dout,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                for ci in 0..cg {
                    let c_abs = g * cg + ci;
                    let pstart = (s * geom.c + c_abs) * plane_len;
                    let drow = &dcol[ci * k_all * cols..(ci + 1) * k_all * cols];
                    if let Some(dx) = dx.as_mut() {
                        let plane = &mut dx[pstart..pstart + plane_len];
                        for (tap, &d) in taps.iter().zip(drow) {
                            tap.scatter(plane, d);
                        }
                    }
                    if let Some(doff) = doff.as_mut() {
                        let plane = &x[pstart..pstart + plane_len];
                        let off_base = (s * geom.cfg.groups + g) * 2 * k_all * cols;
                        for k in 0..k_all {
                            for p in 0..cols {
                                let t = k * cols + p;
                                let d = drow[t];
                                doff[off_base + 2 * k * cols + p] += d * taps[t].grad_y(plane);
                                doff[off_base + (2 * k + 1) * cols + p] +=
                                    d * taps[t].grad_x(plane);
                            }
                        }
                    }
                }
            }
        }
        let mut grads = vec![dx, doff, dw];
        if inputs.len() == 4 {
            grads.push(needs[3].then(|| {
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
    /// Samples `feature: [C, H, W]` at `coords: [L, 2]` (rows of `(y, x)`),
    /// returning `[C, L]`.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let &[c, h, w] = fs.as_slice() else {
            return Err(TensorError::shape(
                "bilinear_sample",
                "feature rank",
                format!("{fs:?}"),
            ));
        };
        let cs = self.shape(coords).to_vec();
        let &[len, 2] = cs.as_slice() else {
            return Err(TensorError::shape(
                "bilinear_sample",
                "coords",
                format!("expected [L, 2], got {cs:?}"),
            ));
        };
        let feat = self.value(feature).data();
        let pts = self.value(coords).data();
        let mut out = Vec::with_capacity(c * len);
        for ci in 0..c {
            let plane = &feat[ci * h * w..(ci + 1) * h * w];
            out.extend((0..len).map(|l| bilinear_at(plane, h, w, pts[2 * l], pts[2 * l + 1])));
        }
        let out = Tensor::new(vec![c, len], out)?;
        Ok(self.record(BilinearSample { dims: (c, h, w) }, &[feature, coords], out))
    }

    /// Deformable convolution: each kernel tap of group `g` reads the input
    /// at its regular grid position plus the group's learned offset.
    /// `x: [N, C, H, W]`, `offsets: [N, 2 * K * groups, Ho, Wo]`,
    /// `weight: [F, C / groups, kh, kw]`, `bias: [F]`.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        weight: Var,
        bias: Option<Var>,
        cfg: DeformConfig,
    ) -> Result<Var> {
        const OP: &str = "deform_conv2d";
        let [n, c, h, w] = dims4(OP, self.shape(x))?;
        let [f, cw, kh, kw] = dims4(OP, self.shape(weight))?;
        if cfg.groups == 0 || cfg.stride == 0 || cfg.dilation == 0 {
            return Err(TensorError::invalid(
                OP,
                "groups, stride and dilation must be positive",
            ));
        }
        if c % cfg.groups != 0 {
            return Err(TensorError::shape(
                OP,
                "input channels",
                format!("{c} channels not divisible by {} groups", cfg.groups),
            ));
        }
        if f % cfg.groups != 0 || cw != c / cfg.groups {
            return Err(TensorError::shape(
                OP,
                "weight",
                format!(
                    "weight {:?} incompatible with {c} channels in {} groups",
                    self.shape(weight),
                    cfg.groups
                ),
            ));
        }
        let span_h = cfg.dilation * (kh - 1) + 1;
        let span_w = cfg.dilation * (kw - 1) + 1;
        if h + 2 * cfg.padding < span_h || w + 2 * cfg.padding < span_w {
            return Err(TensorError::shape(
                OP,
                "spatial extent",
                format!("{h}x{w} smaller than kernel"),
            ));
        }
        let ho = (h + 2 * cfg.padding - span_h) / cfg.stride + 1;
        let wo = (w + 2 * cfg.padding - span_w) / cfg.stride + 1;
        let want_off = [n, 2 * kh * kw * cfg.groups, ho, wo];
        if self.shape(offsets) != want_off {
            return Err(TensorError::shape(
                OP,
                "offsets",
                format!("expected {want_off:?}, got {:?}", self.shape(offsets)),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(TensorError::shape(OP, "bias", format!("expected [{f}]")));
            }
        }
        let geom = DeformGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            ho,
            wo,
            cfg,
        };
        let (xd, od, wd) = (
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(weight).data(),
        );
        let (fg, cols) = (geom.fg(), geom.cols());
        let rows = geom.cg() * geom.taps();
        let mut out = vec![T::zero(); n * f * cols];
        let mut col = vec![T::zero(); rows * cols];
        for s in 0..n {
            for g in 0..cfg.groups {
                let taps = geom.build_taps(od, s, g);
                geom.fill_col(xd, &taps, s, g, &mut col);
                let o0 = (s * f + g * fg) * cols;
                gemm(
                    fg,
                    rows,
                    cols,
                    T::one(),
                    &wd[g * fg * rows..(g + 1) * fg * rows],
                    false,
                    &col,
                    false,
                    T::zero(),
                    &mut out[o0..o0 + fg * cols],
                );
            }
            if let Some(b) = bias {
                for (fi, &bv) in self.value(b).data().iter().enumerate() {
                    let o0 = (s * f + fi) * cols;
                    out[o0..o0 + cols].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new(vec![n, f, ho, wo], out)?;
        let mut inputs = vec![x, offsets, weight];
        inputs.extend(bias);
        Ok(self.record(DeformConv { geom }, &inputs, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, random_tensor, DEFAULT_EPS};
    use crate::tensor::Conv2dConfig;

    #[test]
    fn lattice_points_are_exact() {
        let f = random_tensor::<f32>(&[2, 4, 5], 1);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let coords: Vec<f32> = (0..4)
            .flat_map(|y| (0..5).flat_map(move |x| [y as f32, x as f32]))
            .collect();
        let c = g.constant(Tensor::new(vec![20, 2], coords).unwrap());
        let out = g.bilinear_sample(fv, c).unwrap();
        assert_eq!(g.value(out).data(), f.data());
    }

    #[test]
    fn midpoint_of_equal_values() {
        let f = Tensor::<f64>::full(vec![1, 2, 2], 0.7);
        assert_eq!(bilinear_at(f.data(), 2, 2, 0.5, 0.5), 0.7);
    }

    #[test]
    fn outside_reads_zero() {
        let f = Tensor::<f64>::full(vec![1, 3, 3], 1.0);
        assert_eq!(bilinear_at(f.data(), 3, 3, -1.0, 1.0), 0.0);
        assert_eq!(bilinear_at(f.data(), 3, 3, 1.0, 3.5), 0.0);
        assert!((bilinear_at(f.data(), 3, 3, -0.25, 1.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn coordinate_gradient_off_lattice() {
        let f = random_tensor(&[3, 6, 7], 2);
        // Keep points strictly inside cells so the stencil is smooth.
        let coords =
            Tensor::new(vec![4, 2], vec![1.3, 2.6, 4.45, 0.2, 0.71, 5.35, 3.5, 3.25]).unwrap();
        let err = gradcheck(&[f, coords], DEFAULT_EPS, |g, v| {
            g.bilinear_sample(v[0], v[1]).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_offsets_match_grouped_conv() {
        let x = random_tensor::<f32>(&[2, 4, 6, 5], 3);
        let w = random_tensor::<f32>(&[6, 2, 3, 3], 4);
        let b = random_tensor::<f32>(&[6], 5);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
        let off = g.constant(Tensor::zeros(vec![2, 2 * 9 * 2, 6, 5]));
        let d = g
            .deform_conv2d(xv, off, wv, Some(bv), DeformConfig::same3x3(2))
            .unwrap();
        let r = g
            .conv2d(xv, wv, Some(bv), Conv2dConfig::same3x3(2))
            .unwrap();
        assert!(g.value(d).max_abs_diff(g.value(r)) < 1e-5);
    }

    #[test]
    fn offsets_shape_checked() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 5, 5]));
        let w = g.constant(Tensor::zeros(vec![4, 1, 3, 3]));
        let off = g.constant(Tensor::zeros(vec![1, 18, 5, 5]));
        let err = g
            .deform_conv2d(x, off, w, None, DeformConfig::same3x3(4))
            .unwrap_err();
        assert!(err.to_string().contains("offsets"), "{err}");
    }

    #[test]
    fn deform_gradients() {
        let x = random_tensor(&[1, 4, 5, 5], 6);
        let w = random_tensor(&[4, 2, 3, 3], 7);
        let b = random_tensor(&[4], 8);
        // Offsets away from integers so no sample sits on a stencil kink.
        let off = random_tensor::<f64>(&[1, 36, 5, 5], 9).map(|v| 0.37 + 0.25 * v);
        let err = gradcheck(&[x, off, w, b], DEFAULT_EPS, |g, v| {
            g.deform_conv2d(v[0], v[1], v[2], Some(v[3]), DeformConfig::same3x3(2))
                .unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }
}
