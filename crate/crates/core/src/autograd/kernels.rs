// SPDX-License-Identifier: Apache-2.0

//! Dense kernels: GEMM wrapper and im2col-based 2-D (transposed) convolution.

use rayon::prelude::*;

/// `C = A * B + beta * C` with `A: m x k`, `B: k x n`, all row-major unless
/// the corresponding `trans_*` flag says the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths were checked above and the strides describe
    // in-bounds row- or column-major layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a convolution from a "big" image to a "small" one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dh: usize,
    pub dw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_len(input: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
        let eff = d * (k - 1) + 1;
        assert!(input + 2 * p >= eff, "kernel larger than padded input");
        (input + 2 * p - eff) / s + 1
    }

    pub fn k(&self) -> usize {
        self.kh * self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k()
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unfolds `img` (`channels x h x w`) into `col` (`channels*kh*kw x oh*ow`).
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let off_i = (ki * g.dh) as isize - g.ph as isize;
                let off_j = (kj * g.dw) as isize - g.pw as isize;
                for oi in 0..g.oh {
                    let ii = (oi * g.sh) as isize + off_i;
                    let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.sw) as isize + off_j;
                        *d = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `img`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let off_i = (ki * g.dh) as isize - g.ph as isize;
                let off_j = (kj * g.dw) as isize - g.pw as isize;
                for oi in 0..g.oh {
                    let ii = (oi * g.sh) as isize + off_i;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let srow = &src[oi * g.ow..(oi + 1) * g.ow];
                    for (oj, s) in srow.iter().enumerate() {
                        let jj = (oj * g.sw) as isize + off_j;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Parameters of a grouped 2-D convolution over NCHW tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dSpec {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    /// Per-group input geometry (`channels = cin / groups`).
    pub geom: ConvGeom,
}

impl Conv2dSpec {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn in_plane(&self) -> usize {
        self.geom.h * self.geom.w
    }

    fn out_plane(&self) -> usize {
        self.geom.oh * self.geom.ow
    }

    fn weight_group_len(&self) -> usize {
        self.cout_g() * self.cin_g() * self.geom.k()
    }
}

pub(crate) fn conv2d_forward(
    s: &Conv2dSpec,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = s.cin * s.in_plane();
    let out_len = s.cout * s.out_plane();
    let mut out = vec![0.0; s.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let mut col = if s.geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; s.geom.col_rows() * s.geom.col_cols()]
        };
        for g in 0..s.groups {
            let xg = &xb[g * s.cin_g() * s.in_plane()..(g + 1) * s.cin_g() * s.in_plane()];
            let src: &[f64] = if s.geom.is_pointwise() {
                xg
            } else {
                im2col(xg, &s.geom, &mut col);
                &col
            };
            let wg = &w[g * s.weight_group_len()..(g + 1) * s.weight_group_len()];
            let og = &mut ob[g * s.cout_g() * s.out_plane()..(g + 1) * s.cout_g() * s.out_plane()];
            gemm(
                s.cout_g(),
                s.geom.col_rows(),
                s.out_plane(),
                wg,
                false,
                src,
                false,
                0.0,
                og,
            );
        }
        if let Some(bias) = bias {
            for (c, plane) in ob.chunks_mut(s.out_plane()).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; `dx` is `None` when not requested.
pub(crate) fn conv2d_backward(
    s: &Conv2dSpec,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    has_bias: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_len = s.cin * s.in_plane();
    let out_len = s.cout * s.out_plane();
    let wlen = s.groups * s.weight_group_len();
    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..s.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let db_ = &dout[b * out_len..(b + 1) * out_len];
            let mut dxb = if need_dx {
                vec![0.0; in_len]
            } else {
                Vec::new()
            };
            let mut dwb = if need_dw { vec![0.0; wlen] } else { Vec::new() };
            let pointwise = s.geom.is_pointwise();
            let mut col = vec![
                0.0;
                if pointwise {
                    0
                } else {
                    s.geom.col_rows() * s.geom.col_cols()
                }
            ];
            let mut dcol = vec![
                0.0;
                if pointwise || !need_dx {
                    0
                } else {
                    s.geom.col_rows() * s.geom.col_cols()
                }
            ];
            for g in 0..s.groups {
                let xg = &xb[g * s.cin_g() * s.in_plane()..(g + 1) * s.cin_g() * s.in_plane()];
                let dog =
                    &db_[g * s.cout_g() * s.out_plane()..(g + 1) * s.cout_g() * s.out_plane()];
                let wg = &w[g * s.weight_group_len()..(g + 1) * s.weight_group_len()];
                if need_dw {
                    let src: &[f64] = if pointwise {
                        xg
                    } else {
                        im2col(xg, &s.geom, &mut col);
                        &col
                    };
                    let dwg = &mut dwb[g * s.weight_group_len()..(g + 1) * s.weight_group_len()];
                    gemm(
                        s.cout_g(),
                        s.out_plane(),
                        s.geom.col_rows(),
                        dog,
                        false,
                        src,
                        true,
                        1.0,
                        dwg,
                    );
                }
                if need_dx {
                    let dxg =
                        &mut dxb[g * s.cin_g() * s.in_plane()..(g + 1) * s.cin_g() * s.in_plane()];
                    if pointwise {
                        gemm(
                            s.cin_g(),
                            s.cout_g(),
                            s.out_plane(),
                            wg,
                            true,
                            dog,
                            false,
                            1.0,
                            dxg,
                        );
                    } else {
                        gemm(
                            s.geom.col_rows(),
                            s.cout_g(),
                            s.out_plane(),
                            wg,
                            true,
                            dog,
                            false,
                            0.0,
                            &mut dcol,
                        );
                        col2im(&dcol, &s.geom, dxg);
                    }
                }
            }
            (dxb, dwb)
        })
        .collect();
    let mut dw = vec![0.0; if need_dw { wlen } else { 0 }];
    let mut dx = if need_dx {
        Some(Vec::with_capacity(s.batch * in_len))
    } else {
        None
    };
    for (dxb, dwb) in per_batch {
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&dxb);
        }
        for (a, v) in dw.iter_mut().zip(&dwb) {
            *a += v;
        }
    }
    let mut db = vec![0.0; if has_bias { s.cout } else { 0 }];
    if has_bias {
        for b in 0..s.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = b * out_len + c * s.out_plane();
                *acc += dout[off..off + s.out_plane()].iter().sum::<f64>();
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: the small input is scattered into the big output.
/// Weight layout is `cin x cout x kh x kw`; `geom` describes the big output
/// (`channels = cout`) and the small input (`oh x ow`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvT2dSpec {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

pub(crate) fn conv_t2d_forward(
    s: &ConvT2dSpec,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let small = s.geom.oh * s.geom.ow;
    let big = s.geom.h * s.geom.w;
    let in_len = s.cin * small;
    let out_len = s.cout * big;
    let mut out = vec![0.0; s.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let mut col = vec![0.0; s.geom.col_rows() * small];
        gemm(
            s.geom.col_rows(),
            s.cin,
            small,
            w,
            true,
            xb,
            false,
            0.0,
            &mut col,
        );
        col2im(&col, &s.geom, ob);
        if let Some(bias) = bias {
            for (c, plane) in ob.chunks_mut(big).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    });
    out
}

pub(crate) fn conv_t2d_backward(
    s: &ConvT2dSpec,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    has_bias: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let small = s.geom.oh * s.geom.ow;
    let big = s.geom.h * s.geom.w;
    let in_len = s.cin * small;
    let out_len = s.cout * big;
    let rows = s.geom.col_rows();
    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..s.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let dob = &dout[b * out_len..(b + 1) * out_len];
            let mut col = vec![0.0; rows * small];
            im2col(dob, &s.geom, &mut col);
            let mut dwb = vec![0.0; s.cin * rows];
            gemm(s.cin, small, rows, xb, false, &col, true, 0.0, &mut dwb);
            let dxb = if need_dx {
                let mut d = vec![0.0; in_len];
                gemm(s.cin, rows, small, w, false, &col, false, 0.0, &mut d);
                d
            } else {
                Vec::new()
            };
            (dxb, dwb)
        })
        .collect();
    let mut dw = vec![0.0; s.cin * rows];
    let mut dx = if need_dx {
        Some(Vec::with_capacity(s.batch * in_len))
    } else {
        None
    };
    for (dxb, dwb) in per_batch {
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&dxb);
        }
        for (a, v) in dw.iter_mut().zip(&dwb) {
            *a += v;
        }
    }
    let mut db = vec![0.0; if has_bias { s.cout } else { 0 }];
    if has_bias {
        for b in 0..s.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                let off = b * out_len + c * big;
                *acc += dout[off..off + big].iter().sum::<f64>();
            }
        }
    }
    (dx, dw, db)
}
