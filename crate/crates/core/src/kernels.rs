//! Slice-level kernels shared by the tape ops: convolution via im2col + gemm,
//! separable Gaussian filtering with reflect borders, and bilinear sampling
//! tables.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.c_in / self.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.cig() * self.k * self.k
    }
}

/// Unfolds one group of one sample into a `[cig*k*k, ho*wo]` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, plane: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cig() {
        let src = &plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *o = if ix >= 0 && ix < g.w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], plane: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cig() {
        let dst = &mut plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, plane: &[T], kernel: &[T], out: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    for ky in 0..k {
        for kx in 0..k {
            let wv = kernel[ky * k + kx];
            for oy in 0..g.ho {
                let iy = oy as isize * s + ky as isize - p;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                let dst_row = &mut out[oy * g.wo..(oy + 1) * g.wo];
                for (ox, o) in dst_row.iter_mut().enumerate() {
                    let ix = ox as isize * s + kx as isize - p;
                    if ix >= 0 && ix < g.w as isize {
                        *o += wv * src_row[ix as usize];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
    let (cig, cog, patch) = (g.cig(), g.cog(), g.patch());
    let mut cols = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw_out]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let plane_len = cig * g.h * g.w;
            let in_off = (n * g.c_in + grp * cig) * g.h * g.w;
            let plane = &input[in_off..in_off + plane_len];
            let out_off = (n * g.c_out + grp * cog) * hw_out;
            let dst = &mut out[out_off..out_off + cog * hw_out];
            let wg = &weight[grp * cog * patch..(grp + 1) * cog * patch];
            if g.is_depthwise() {
                depthwise_forward(g, plane, wg, dst);
                continue;
            }
            let b: &[T] = if g.is_pointwise() {
                plane
            } else {
                im2col(g, plane, &mut cols);
                &cols
            };
            T::gemm(
                cog,
                patch,
                hw_out,
                T::one(),
                wg,
                patch as isize,
                1,
                b,
                hw_out as isize,
                1,
                T::zero(),
                dst,
                hw_out as isize,
                1,
            );
        }
    }
    if let Some(bias) = bias {
        for n in 0..g.n {
            for (co, &bv) in bias.iter().enumerate() {
                let off = (n * g.c_out + co) * hw_out;
                for o in &mut out[off..off + hw_out] {
                    *o += bv;
                }
            }
        }
    }
    out
}

/// Accumulates conv gradients into whichever of `dx`, `dw`, `db` are given.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw_out = g.ho * g.wo;
    let (cig, cog, patch) = (g.cig(), g.cog(), g.patch());
    if let Some(db) = db {
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let off = (n * g.c_out + co) * hw_out;
                *d += T::total(dout[off..off + hw_out].iter().copied());
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let (k, s, p) = (g.k, g.stride as isize, g.padding as isize);
    let needs_cols = !g.is_pointwise() && !g.is_depthwise();
    let mut cols = if needs_cols {
        vec![T::zero(); patch * hw_out]
    } else {
        Vec::new()
    };
    let mut dcols = if needs_cols && dx.is_some() {
        vec![T::zero(); patch * hw_out]
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let plane_len = cig * g.h * g.w;
            let in_off = (n * g.c_in + grp * cig) * g.h * g.w;
            let plane = &input[in_off..in_off + plane_len];
            let out_off = (n * g.c_out + grp * cog) * hw_out;
            let dy = &dout[out_off..out_off + cog * hw_out];
            let w_off = grp * cog * patch;
            let wg = &weight[w_off..w_off + cog * patch];

            if g.is_depthwise() {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wg[ky * k + kx];
                        let mut acc = T::zero();
                        for oy in 0..g.ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row = iy as usize * g.w;
                            for ox in 0..g.wo {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < g.w as isize {
                                    let d = dy[oy * g.wo + ox];
                                    acc += d * plane[row + ix as usize];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[in_off + row + ix as usize] += wv * d;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[w_off + ky * k + kx] += acc;
                        }
                    }
                }
                continue;
            }

            if needs_cols {
                im2col(g, plane, &mut cols);
            }
            let colv: &[T] = if needs_cols { &cols } else { plane };
            if let Some(dw) = dw.as_deref_mut() {
                // dW_g += dy [cog, P] @ cols^T [P, patch]
                T::gemm(
                    cog,
                    hw_out,
                    patch,
                    T::one(),
                    dy,
                    hw_out as isize,
                    1,
                    colv,
                    1,
                    hw_out as isize,
                    T::one(),
                    &mut dw[w_off..w_off + cog * patch],
                    patch as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dplane = &mut dx[in_off..in_off + plane_len];
                if needs_cols {
                    // dcols = W_g^T [patch, cog] @ dy [cog, P]
                    T::gemm(
                        patch,
                        cog,
                        hw_out,
                        T::one(),
                        wg,
                        1,
                        patch as isize,
                        dy,
                        hw_out as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        hw_out as isize,
                        1,
                    );
                    col2im(g, &dcols, dplane);
                } else {
                    T::gemm(
                        patch,
                        cog,
                        hw_out,
                        T::one(),
                        wg,
                        1,
                        patch as isize,
                        dy,
                        hw_out as isize,
                        1,
                        T::one(),
                        dplane,
                        hw_out as isize,
                        1,
                    );
                }
            }
        }
    }
}

/// Mirror-reflects an index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable filtering of `planes` independent `h x w` images.
pub fn blur_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    let mut out = vec![T::zero(); x.len()];
    let col_idx: Vec<Vec<usize>> = (0..w)
        .map(|xi| (0..kernel.len()).map(|t| reflect(xi as isize + t as isize - r, w)).collect())
        .collect();
    let row_idx: Vec<Vec<usize>> = (0..h)
        .map(|yi| (0..kernel.len()).map(|t| reflect(yi as isize + t as isize - r, h)).collect())
        .collect();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for xi in 0..w {
                let mut acc = T::zero();
                for (t, &ix) in col_idx[xi].iter().enumerate() {
                    acc += kernel[t] * row[ix];
                }
                tmp[y * w + xi] = acc;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let d = &mut dst[y * w..(y + 1) * w];
            for (t, &iy) in row_idx[y].iter().enumerate() {
                let kv = kernel[t];
                let s = &tmp[iy * w..(iy + 1) * w];
                for (o, &v) in d.iter_mut().zip(s) {
                    *o += kv * v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur_forward`], accumulated into `dx`.
pub fn blur_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    dx: &mut [T],
) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for p in 0..planes {
        tmp.fill(T::zero());
        let g = &dy[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for t in 0..kernel.len() {
                let iy = reflect(y as isize + t as isize - r, h);
                let kv = kernel[t];
                for xi in 0..w {
                    tmp[iy * w + xi] += kv * g[y * w + xi];
                }
            }
        }
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xi in 0..w {
                let v = tmp[y * w + xi];
                for (t, &kv) in kernel.iter().enumerate() {
                    let ix = reflect(xi as isize + t as isize - r, w);
                    d[y * w + ix] += kv * v;
                }
            }
        }
    }
}

/// One output sample of a 1-D linear interpolation: two source indices and
/// their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-center sampling positions `(i + 0.5) * in / out - 0.5`,
/// clamped below at 0 and at the last sample above.
pub fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn resize_taps_half_pixel() {
        let taps = resize_taps(2, 4);
        let w1: Vec<f64> = taps.iter().map(|t| t.w1).collect();
        assert_eq!(w1, vec![0.0, 0.25, 0.75, 0.0]);
        assert_eq!(taps[3].i0, 1);
        let same = resize_taps(5, 5);
        assert!(same.iter().enumerate().all(|(i, t)| t.i0 == i && t.w0 == 1.0));
    }
}
