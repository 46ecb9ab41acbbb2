//! Convolution kernels on single-sample `(channels, height, width)` maps.

use ndarray::{Array2, Array3, ArrayView2};

use super::params::{Param, ParameterSet};

/// A square convolution with `k/2` zero padding.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub name: &'static str,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    #[cfg(test)]
    pub fn param_count(&self) -> usize {
        self.out_c * self.fan_in() + self.out_c
    }

    fn out_side(&self, side: usize) -> usize {
        let pad = self.k / 2;
        (side + 2 * pad - self.k) / self.stride + 1
    }

    fn weight<'a>(&self, params: &'a ParameterSet) -> ArrayView2<'a, f64> {
        let w = params.get(&self.weight_name()).expect("weight registered at build time");
        ArrayView2::from_shape((self.out_c, self.fan_in()), &w.data).expect("weight shape")
    }

    /// Returns the output map and the unfolded input needed by backward.
    pub fn forward(&self, params: &ParameterSet, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_c);
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let cols = if self.k == 1 && self.stride == 1 {
            x.to_shape((c, h * w)).expect("contiguous").to_owned()
        } else {
            im2col(x, self.k, self.stride, oh, ow)
        };
        let mut out = self.weight(params).dot(&cols);
        let bias = &params.get(&self.bias_name()).expect("bias registered at build time").data;
        for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
            row += b;
        }
        let out = out.into_shape_with_order((self.out_c, oh, ow)).expect("output shape");
        (out, cols)
    }

    /// Accumulates weight/bias gradients and optionally returns the input
    /// gradient.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cols: &Array2<f64>,
        in_dim: (usize, usize, usize),
        d_out: &Array3<f64>,
        grads: &mut ParameterSet,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (oc, oh, ow) = d_out.dim();
        let d_out = d_out.to_shape((oc, oh * ow)).expect("contiguous");
        accumulate(grads.get_mut(&self.weight_name()).expect("weight grad"), &d_out.dot(&cols.t()));
        let d_bias = grads.get_mut(&self.bias_name()).expect("bias grad");
        for (g, row) in d_bias.data.iter_mut().zip(d_out.rows()) {
            *g += row.sum();
        }
        if !need_input_grad {
            return None;
        }
        let d_cols = self.weight(params).t().dot(&d_out);
        let (c, h, w) = in_dim;
        Some(if self.k == 1 && self.stride == 1 {
            d_cols.to_shape((c, h, w)).expect("input shape").into_owned()
        } else {
            col2im(&d_cols, in_dim, self.k, self.stride, oh, ow)
        })
    }
}

fn accumulate(param: &mut Param, g: &Array2<f64>) {
    for (a, b) in param.data.iter_mut().zip(g.iter()) {
        *a += b;
    }
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let out = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    in_dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let pad = (k / 2) as isize;
    let mut x = Array3::<f64>::zeros(in_dim);
    let xs = x.as_slice_mut().expect("standard layout");
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let s = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            xs[base + ix as usize] += s[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the forward activation was clipped.
pub(crate) fn relu_backward_inplace(d: &mut Array3<f64>, activated: &Array3<f64>) {
    d.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Nearest-neighbour ×2 upsampling.
pub(crate) fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub(crate) fn upsample2_backward(d: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = d.dim();
    let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
    for ((ch, y, x), v) in d.indexed_iter() {
        out[[ch, y / 2, x / 2]] += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv, params: &ParameterSet, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let pad = (conv.k / 2) as isize;
        let (oh, ow) = (conv.out_side(h), conv.out_side(w));
        let wt = &params.get(&conv.weight_name()).unwrap().data;
        let b = &params.get(&conv.bias_name()).unwrap().data;
        Array3::from_shape_fn((conv.out_c, oh, ow), |(o, oy, ox)| {
            let mut acc = b[o];
            for c in 0..conv.in_c {
                for ky in 0..conv.k {
                    for kx in 0..conv.k {
                        let iy = (oy * conv.stride) as isize + ky as isize - pad;
                        let ix = (ox * conv.stride) as isize + kx as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((o * conv.in_c + c) * conv.k + ky) * conv.k + kx]
                                * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn setup(conv: &Conv) -> ParameterSet {
        let mut p = ParameterSet::default();
        let nw = conv.out_c * conv.fan_in();
        p.insert(
            conv.weight_name(),
            Param::new(
                vec![conv.out_c, conv.in_c, conv.k, conv.k],
                (0..nw).map(|i| ((i as f64) * 0.61).sin()).collect(),
            ),
        );
        p.insert(conv.bias_name(), Param::new(vec![conv.out_c], (0..conv.out_c).map(|i| i as f64 * 0.1).collect()));
        p
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        for conv in [
            Conv { name: "a", in_c: 3, out_c: 4, k: 3, stride: 2 },
            Conv { name: "b", in_c: 2, out_c: 3, k: 3, stride: 1 },
            Conv { name: "c", in_c: 5, out_c: 1, k: 1, stride: 1 },
        ] {
            let p = setup(&conv);
            let x = Array3::from_shape_fn((conv.in_c, 8, 8), |(c, y, xx)| ((c * 64 + y * 8 + xx) as f64 * 0.13).cos());
            let (out, _) = conv.forward(&p, &x);
            let naive = naive_conv(&conv, &p, &x);
            assert_eq!(out.dim(), naive.dim());
            for (a, b) in out.iter().zip(naive.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let conv = Conv { name: "a", in_c: 2, out_c: 3, k: 3, stride: 2 };
        let p = setup(&conv);
        let x = Array3::from_shape_fn((2, 6, 6), |(c, y, xx)| ((c * 36 + y * 6 + xx) as f64 * 0.29).sin());
        let (out, cols) = conv.forward(&p, &x);
        let d_out = out.mapv(|v| v.cos());
        let mut grads = p.zeros_like();
        let d_x = conv.backward(&p, &cols, x.dim(), &d_out, &mut grads, true).unwrap();
        // d/dx <conv(x), d_out> is linear in x: check along a direction.
        let dir = x.mapv(|v| (3.0 * v).sin());
        let h = 1e-6;
        let plus = conv.forward(&p, &(&x + &(&dir * h))).0;
        let minus = conv.forward(&p, &(&x - &(&dir * h))).0;
        let fd = ((&plus - &minus) * &d_out).sum() / (2.0 * h);
        let an = (&d_x * &dir).sum();
        assert!((fd - an).abs() < 1e-7 * an.abs().max(1.0));
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = Array3::from_shape_fn((2, 3, 3), |(c, y, xx)| (c + y + xx) as f64);
        let u = upsample2(&x);
        assert_eq!(u.dim(), (2, 6, 6));
        assert_eq!(u[[1, 5, 4]], x[[1, 2, 2]]);
        let back = upsample2_backward(&Array3::ones((2, 6, 6)));
        assert!(back.iter().all(|&v| v == 4.0));
    }
}
