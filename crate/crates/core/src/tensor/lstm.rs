use std::rc::Rc;

use super::ops::sigmoid;
use super::{gemm, Tensor, Var};
use crate::error::{Error, Result};

/// Sequence output plus the final recurrent state.
#[derive(Debug)]
pub struct LstmOutput {
    /// `[N, L, H]` hidden states.
    pub output: Var,
    /// `[N, H]` hidden state after the last processed step.
    pub h_last: Tensor,
    /// `[N, H]` cell state after the last processed step.
    pub c_last: Tensor,
}

/// Per-step activations kept for the backward sweep, each `[L, N, H]`.
struct Saved {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

impl Var {
    /// Single-layer LSTM over `[N, L, I]` with gate order (input, forget, cell, output).
    ///
    /// `w_ih` is `[4H, I]`, `w_hh` is `[4H, H]`, `bias` is `[4H]`. When
    /// `reverse` is set the sequence is consumed from the last step to the
    /// first; outputs stay aligned with their input positions. Initial states
    /// are constants (zeros when absent).
    pub fn lstm(
        &self,
        w_ih: &Var,
        w_hh: &Var,
        bias: &Var,
        reverse: bool,
        init: Option<(&Tensor, &Tensor)>,
    ) -> Result<LstmOutput> {
        let xs = self.shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("lstm", &xs, w_ih.shape()));
        }
        let (n, len, input) = (xs[0], xs[1], xs[2]);
        let four_h = w_ih.shape()[0];
        let hidden = four_h / 4;
        if w_ih.shape() != [four_h, input] || four_h % 4 != 0 {
            return Err(Error::shape("lstm input weight", w_ih.shape(), &xs));
        }
        if w_hh.shape() != [four_h, hidden] {
            return Err(Error::shape(
                "lstm recurrent weight",
                w_hh.shape(),
                &[four_h, hidden],
            ));
        }
        if bias.shape() != [four_h] {
            return Err(Error::shape("lstm bias", bias.shape(), &[four_h]));
        }
        let (h0, c0) = match init {
            Some((h, c)) => {
                if h.shape() != [n, hidden] || c.shape() != [n, hidden] {
                    return Err(Error::shape("lstm state", h.shape(), &[n, hidden]));
                }
                (h.data().to_vec(), c.data().to_vec())
            }
            None => (vec![0.0; n * hidden], vec![0.0; n * hidden]),
        };

        let x = self.value_rc();
        let (wi, wh, b) = (w_ih.value_rc(), w_hh.value_rc(), bias.value_rc());
        let nh = n * hidden;

        // gates_x[n, l, :] = x[n, l, :] · W_ihᵀ + b
        let rows = n * len;
        let mut gates_x = vec![0.0; rows * four_h];
        for r in gates_x.chunks_mut(four_h) {
            r.copy_from_slice(b.data());
        }
        gemm(
            rows,
            input,
            four_h,
            1.0,
            x.data(),
            (input as isize, 1),
            wi.data(),
            (1, input as isize),
            1.0,
            &mut gates_x,
            (four_h as isize, 1),
        );

        let mut saved = Saved {
            i: vec![0.0; len * nh],
            f: vec![0.0; len * nh],
            g: vec![0.0; len * nh],
            o: vec![0.0; len * nh],
            c: vec![0.0; len * nh],
            tanh_c: vec![0.0; len * nh],
            h: vec![0.0; len * nh],
        };
        let mut out = vec![0.0; n * len * hidden];
        let mut h_prev = h0.clone();
        let mut c_prev = c0.clone();
        let mut gates = vec![0.0; n * four_h];
        for step in 0..len {
            let pos = if reverse { len - 1 - step } else { step };
            for s in 0..n {
                gates[s * four_h..(s + 1) * four_h].copy_from_slice(
                    &gates_x[(s * len + pos) * four_h..(s * len + pos + 1) * four_h],
                );
            }
            gemm(
                n,
                hidden,
                four_h,
                1.0,
                &h_prev,
                (hidden as isize, 1),
                wh.data(),
                (1, hidden as isize),
                1.0,
                &mut gates,
                (four_h as isize, 1),
            );
            let base = step * nh;
            for s in 0..n {
                let gr = &gates[s * four_h..(s + 1) * four_h];
                for j in 0..hidden {
                    let ig = sigmoid(gr[j]);
                    let fg = sigmoid(gr[hidden + j]);
                    let gg = gr[2 * hidden + j].tanh();
                    let og = sigmoid(gr[3 * hidden + j]);
                    let k = s * hidden + j;
                    let c = fg * c_prev[k] + ig * gg;
                    let tc = c.tanh();
                    let h = og * tc;
                    saved.i[base + k] = ig;
                    saved.f[base + k] = fg;
                    saved.g[base + k] = gg;
                    saved.o[base + k] = og;
                    saved.c[base + k] = c;
                    saved.tanh_c[base + k] = tc;
                    saved.h[base + k] = h;
                    c_prev[k] = c;
                    h_prev[k] = h;
                    out[(s * len + pos) * hidden + j] = h;
                }
            }
        }

        let h_last = Tensor::from_parts(vec![n, hidden], h_prev);
        let c_last = Tensor::from_parts(vec![n, hidden], c_prev);
        let (nx, nwi, nwh, nb) = (
            self.requires_grad(),
            w_ih.requires_grad(),
            w_hh.requires_grad(),
            bias.requires_grad(),
        );
        let saved = Rc::new(saved);
        let output = self.tape().op(
            Tensor::from_parts(vec![n, len, hidden], out),
            &[self, w_ih, w_hh, bias],
            move |gout| {
                let mut dgates_x = vec![0.0; rows * four_h];
                let mut dwh = vec![0.0; four_h * hidden];
                let mut dh_next = vec![0.0; nh];
                let mut dc_next = vec![0.0; nh];
                let mut dgates = vec![0.0; n * four_h];
                for step in (0..len).rev() {
                    let pos = if reverse { len - 1 - step } else { step };
                    let base = step * nh;
                    for s in 0..n {
                        for j in 0..hidden {
                            let k = s * hidden + j;
                            let dh = gout.data()[(s * len + pos) * hidden + j] + dh_next[k];
                            let (ig, fg, gg, og) = (
                                saved.i[base + k],
                                saved.f[base + k],
                                saved.g[base + k],
                                saved.o[base + k],
                            );
                            let tc = saved.tanh_c[base + k];
                            let c_before = if step == 0 {
                                c0[k]
                            } else {
                                saved.c[base - nh + k]
                            };
                            let d_o = dh * tc;
                            let dc = dh * og * (1.0 - tc * tc) + dc_next[k];
                            let di = dc * gg;
                            let dg = dc * ig;
                            let df = dc * c_before;
                            dc_next[k] = dc * fg;
                            let dr = &mut dgates[s * four_h..(s + 1) * four_h];
                            dr[j] = di * ig * (1.0 - ig);
                            dr[hidden + j] = df * fg * (1.0 - fg);
                            dr[2 * hidden + j] = dg * (1.0 - gg * gg);
                            dr[3 * hidden + j] = d_o * og * (1.0 - og);
                        }
                    }
                    let h_before: &[f64] = if step == 0 {
                        &h0
                    } else {
                        &saved.h[base - nh..base]
                    };
                    if nwh {
                        // dW_hh += dgatesᵀ · h_before
                        gemm(
                            four_h,
                            n,
                            hidden,
                            1.0,
                            &dgates,
                            (1, four_h as isize),
                            h_before,
                            (hidden as isize, 1),
                            1.0,
                            &mut dwh,
                            (hidden as isize, 1),
                        );
                    }
                    // dh_next = dgates · W_hh
                    gemm(
                        n,
                        four_h,
                        hidden,
                        1.0,
                        &dgates,
                        (four_h as isize, 1),
                        wh.data(),
                        (hidden as isize, 1),
                        0.0,
                        &mut dh_next,
                        (hidden as isize, 1),
                    );
                    for s in 0..n {
                        dgates_x[(s * len + pos) * four_h..(s * len + pos + 1) * four_h]
                            .copy_from_slice(&dgates[s * four_h..(s + 1) * four_h]);
                    }
                }
                let gx = nx.then(|| {
                    let mut dx = vec![0.0; rows * input];
                    gemm(
                        rows,
                        four_h,
                        input,
                        1.0,
                        &dgates_x,
                        (four_h as isize, 1),
                        wi.data(),
                        (input as isize, 1),
                        0.0,
                        &mut dx,
                        (input as isize, 1),
                    );
                    Tensor::from_parts(vec![n, len, input], dx)
                });
                let gwi = nwi.then(|| {
                    let mut dwi = vec![0.0; four_h * input];
                    gemm(
                        four_h,
                        rows,
                        input,
                        1.0,
                        &dgates_x,
                        (1, four_h as isize),
                        x.data(),
                        (input as isize, 1),
                        0.0,
                        &mut dwi,
                        (input as isize, 1),
                    );
                    Tensor::from_parts(vec![four_h, input], dwi)
                });
                let gb = nb.then(|| {
                    let mut db = vec![0.0; four_h];
                    for r in dgates_x.chunks(four_h) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    Tensor::from_parts(vec![four_h], db)
                });
                vec![
                    gx,
                    gwi,
                    nwh.then(|| Tensor::from_parts(vec![four_h, hidden], dwh)),
                    gb,
                ]
            },
        );
        Ok(LstmOutput {
            output,
            h_last,
            c_last,
        })
    }
}
