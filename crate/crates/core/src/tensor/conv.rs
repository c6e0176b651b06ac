use super::{gemm, Tensor, Var};
use crate::error::{Error, Result};

/// Geometry shared by a 2-D convolution and its transpose.
///
/// Axes are `(time, freq)`. The "large" side is the convolution input (and the
/// transposed convolution output); `pad` is applied to the large side as
/// `[time_before, time_after, freq_before, freq_after]`. Padding on the time
/// "before" side only is what makes a forward convolution causal; the mirror
/// `[0, k_t - 1, ..]` makes a transposed convolution causal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: [usize; 4],
    pub groups: usize,
}

impl ConvGeometry {
    /// Output extent of the forward convolution for a large-side extent.
    pub fn conv_out(&self, large: (usize, usize)) -> Result<(usize, usize)> {
        let (kt, kf) = self.kernel;
        let (st, sf) = self.stride;
        let t = large.0 + self.pad[0] + self.pad[1];
        let f = large.1 + self.pad[2] + self.pad[3];
        if st == 0 || sf == 0 || kt == 0 || kf == 0 || t < kt || f < kf {
            return Err(Error::invalid(format!(
                "non-positive conv output: input {large:?}, geometry {self:?}"
            )));
        }
        Ok(((t - kt) / st + 1, (f - kf) / sf + 1))
    }

    fn kk(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Unfold one channel group of a large-side image into `[c·kt·kf, small]`.
    fn im2col(
        &self,
        x: &[f64],
        channels: usize,
        large: (usize, usize),
        small: (usize, usize),
        col: &mut [f64],
    ) {
        let (kt, kf) = self.kernel;
        let (st, sf) = self.stride;
        let (h, w) = large;
        let (ho, wo) = small;
        let plane = ho * wo;
        for c in 0..channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for i in 0..kt {
                for j in 0..kf {
                    let row = &mut col[((c * kt + i) * kf + j) * plane..][..plane];
                    for to in 0..ho {
                        let t = (to * st + i) as isize - self.pad[0] as isize;
                        let dst = &mut row[to * wo..(to + 1) * wo];
                        if t < 0 || t >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &xc[t as usize * w..(t as usize + 1) * w];
                        for (fo, d) in dst.iter_mut().enumerate() {
                            let f = (fo * sf + j) as isize - self.pad[2] as isize;
                            *d = if f < 0 || f >= w as isize {
                                0.0
                            } else {
                                src[f as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulate columns back into an image.
    fn col2im(
        &self,
        col: &[f64],
        channels: usize,
        large: (usize, usize),
        small: (usize, usize),
        x: &mut [f64],
    ) {
        let (kt, kf) = self.kernel;
        let (st, sf) = self.stride;
        let (h, w) = large;
        let (ho, wo) = small;
        let plane = ho * wo;
        for c in 0..channels {
            let xc = &mut x[c * h * w..(c + 1) * h * w];
            for i in 0..kt {
                for j in 0..kf {
                    let row = &col[((c * kt + i) * kf + j) * plane..][..plane];
                    for to in 0..ho {
                        let t = (to * st + i) as isize - self.pad[0] as isize;
                        if t < 0 || t >= h as isize {
                            continue;
                        }
                        let dst = &mut xc[t as usize * w..(t as usize + 1) * w];
                        for (fo, &v) in row[to * wo..(to + 1) * wo].iter().enumerate() {
                            let f = (fo * sf + j) as isize - self.pad[2] as isize;
                            if f >= 0 && f < w as isize {
                                dst[f as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    c_large: usize,
    c_small: usize,
    large: (usize, usize),
    small: (usize, usize),
}

impl ConvDims {
    fn large_len(&self) -> usize {
        self.large.0 * self.large.1
    }

    fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }
}

/// `small[c_small] = W · im2col(large[c_large])` per group.
fn conv_large_to_small(geo: &ConvGeometry, d: &ConvDims, x: &[f64], w: &[f64]) -> Vec<f64> {
    let g = geo.groups;
    let (cl, cs) = (d.c_large / g, d.c_small / g);
    let kdim = cl * geo.kk();
    let (ll, sl) = (d.large_len(), d.small_len());
    let mut out = vec![0.0; d.batch * d.c_small * sl];
    let mut col = vec![0.0; kdim * sl];
    for b in 0..d.batch {
        for gi in 0..g {
            let xg = &x[(b * d.c_large + gi * cl) * ll..][..cl * ll];
            geo.im2col(xg, cl, d.large, d.small, &mut col);
            let og = &mut out[(b * d.c_small + gi * cs) * sl..][..cs * sl];
            let wg = &w[gi * cs * kdim..(gi + 1) * cs * kdim];
            gemm(
                cs,
                kdim,
                sl,
                1.0,
                wg,
                (kdim as isize, 1),
                &col,
                (sl as isize, 1),
                0.0,
                og,
                (sl as isize, 1),
            );
        }
    }
    out
}

/// Adjoint of [`conv_large_to_small`] with respect to its image argument.
fn conv_small_to_large(geo: &ConvGeometry, d: &ConvDims, y: &[f64], w: &[f64]) -> Vec<f64> {
    let g = geo.groups;
    let (cl, cs) = (d.c_large / g, d.c_small / g);
    let kdim = cl * geo.kk();
    let (ll, sl) = (d.large_len(), d.small_len());
    let mut out = vec![0.0; d.batch * d.c_large * ll];
    let mut col = vec![0.0; kdim * sl];
    for b in 0..d.batch {
        for gi in 0..g {
            let yg = &y[(b * d.c_small + gi * cs) * sl..][..cs * sl];
            let wg = &w[gi * cs * kdim..(gi + 1) * cs * kdim];
            // col = Wgᵀ · yg
            gemm(
                kdim,
                cs,
                sl,
                1.0,
                wg,
                (1, kdim as isize),
                yg,
                (sl as isize, 1),
                0.0,
                &mut col,
                (sl as isize, 1),
            );
            let og = &mut out[(b * d.c_large + gi * cl) * ll..][..cl * ll];
            geo.col2im(&col, cl, d.large, d.small, og);
        }
    }
    out
}

/// Weight gradient `Σ_b small · im2col(large)ᵀ`, laid out like the forward-conv weight.
fn conv_weight_grad(geo: &ConvGeometry, d: &ConvDims, x: &[f64], y: &[f64]) -> Vec<f64> {
    let g = geo.groups;
    let (cl, cs) = (d.c_large / g, d.c_small / g);
    let kdim = cl * geo.kk();
    let (ll, sl) = (d.large_len(), d.small_len());
    let mut gw = vec![0.0; d.c_small * kdim];
    let mut col = vec![0.0; kdim * sl];
    for b in 0..d.batch {
        for gi in 0..g {
            let xg = &x[(b * d.c_large + gi * cl) * ll..][..cl * ll];
            geo.im2col(xg, cl, d.large, d.small, &mut col);
            let yg = &y[(b * d.c_small + gi * cs) * sl..][..cs * sl];
            let wg = &mut gw[gi * cs * kdim..(gi + 1) * cs * kdim];
            gemm(
                cs,
                sl,
                kdim,
                1.0,
                yg,
                (sl as isize, 1),
                &col,
                (1, sl as isize),
                1.0,
                wg,
                (kdim as isize, 1),
            );
        }
    }
    gw
}

fn check_4d(x: &[usize], what: &'static str, other: &[usize]) -> Result<()> {
    if x.len() != 4 {
        return Err(Error::shape(what, x, other));
    }
    Ok(())
}

impl Var {
    /// 2-D convolution of `[B, C_in, T, F]` with weight `[C_out, C_in/groups, k_t, k_f]`.
    /// No bias; add one with a broadcast `add`.
    pub fn conv2d(&self, weight: &Var, geo: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape().to_vec(), weight.shape().to_vec());
        check_4d(&xs, "conv2d", &ws)?;
        check_4d(&ws, "conv2d", &xs)?;
        let g = geo.groups;
        if g == 0
            || xs[1] % g != 0
            || ws[0] % g != 0
            || ws[1] * g != xs[1]
            || (ws[2], ws[3]) != geo.kernel
        {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let large = (xs[2], xs[3]);
        let small = geo.conv_out(large)?;
        let dims = ConvDims {
            batch: xs[0],
            c_large: xs[1],
            c_small: ws[0],
            large,
            small,
        };
        let (x, w) = (self.value_rc(), weight.value_rc());
        let out = conv_large_to_small(&geo, &dims, x.data(), w.data());
        let out_shape = vec![dims.batch, dims.c_small, small.0, small.1];
        let (nx, nw) = (self.requires_grad(), weight.requires_grad());
        Ok(self.tape().op(
            Tensor::from_parts(out_shape, out),
            &[self, weight],
            move |g| {
                let gx = nx.then(|| {
                    Tensor::from_parts(
                        xs.clone(),
                        conv_small_to_large(&geo, &dims, g.data(), w.data()),
                    )
                });
                let gw = nw.then(|| {
                    Tensor::from_parts(
                        ws.clone(),
                        conv_weight_grad(&geo, &dims, x.data(), g.data()),
                    )
                });
                vec![gx, gw]
            },
        ))
    }

    /// Transposed 2-D convolution of `[B, C_in, T, F]` with weight
    /// `[C_in, C_out/groups, k_t, k_f]`, producing `[B, C_out, large.0, large.1]`.
    ///
    /// With the same weight tensor and geometry this is the exact adjoint of
    /// [`Var::conv2d`].
    pub fn conv_transpose2d(
        &self,
        weight: &Var,
        geo: ConvGeometry,
        large: (usize, usize),
    ) -> Result<Var> {
        let (xs, ws) = (self.shape().to_vec(), weight.shape().to_vec());
        check_4d(&xs, "conv_transpose2d", &ws)?;
        check_4d(&ws, "conv_transpose2d", &xs)?;
        let g = geo.groups;
        if g == 0 || ws[0] != xs[1] || xs[1] % g != 0 || (ws[2], ws[3]) != geo.kernel {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        let small = geo.conv_out(large)?;
        if small != (xs[2], xs[3]) {
            return Err(Error::invalid(format!(
                "transposed conv input {:?} inconsistent with target extent {large:?} under {geo:?}",
                (xs[2], xs[3])
            )));
        }
        let c_out = ws[1] * g;
        let dims = ConvDims {
            batch: xs[0],
            c_large: c_out,
            c_small: xs[1],
            large,
            small,
        };
        let (x, w) = (self.value_rc(), weight.value_rc());
        // The stored [C_in, C_out/g, kt, kf] layout is the forward-conv layout
        // with the roles of the two sides swapped.
        let out = conv_small_to_large(&geo, &dims, x.data(), w.data());
        let out_shape = vec![dims.batch, c_out, large.0, large.1];
        let (nx, nw) = (self.requires_grad(), weight.requires_grad());
        Ok(self.tape().op(
            Tensor::from_parts(out_shape, out),
            &[self, weight],
            move |g| {
                let gx = nx.then(|| {
                    Tensor::from_parts(
                        xs.clone(),
                        conv_large_to_small(&geo, &dims, g.data(), w.data()),
                    )
                });
                let gw = nw.then(|| {
                    Tensor::from_parts(
                        ws.clone(),
                        conv_weight_grad(&geo, &dims, g.data(), x.data()),
                    )
                });
                vec![gx, gw]
            },
        ))
    }
}
