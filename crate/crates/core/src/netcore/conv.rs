//! Ring convolution: circular padding along the angular (row) axis, zero
//! padding along the radial (column) axis, stride 1, cross-correlation.

use crate::error::{Error, Result};
use crate::netcore::linalg::{gemm, view};
use crate::netcore::Tensor;
use crate::par::{self, Exec};

/// Convolution parameters: weight `C_out × C_in × kh × kw`, bias `C_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[c_out, c_in, kh, kw]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ring_conv2d(x, &self.weight, &self.bias)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn kernel_dims(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = x.chw()?;
    let [c_out, k_in, kh, kw] = weight.shape()[..] else {
        return Err(Error::Shape(format!(
            "kernel must be C_out×C_in×kh×kw, got {:?}",
            weight.shape()
        )));
    };
    if k_in != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {k_in} input channels, input has {c_in}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("kernel {kh}x{kw} must be odd")));
    }
    Ok((c_in, h, w, c_out, kh, kw))
}

// Overlap of a row shifted by `du` with `[0, w)`: returns (dst_start, dst_end).
fn column_span(du: isize, w: usize) -> (usize, usize) {
    let lo = (-du).max(0) as usize;
    let hi = (w as isize - du).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

// Each output pixel's receptive field as a column: row `(i·kh + ky)·kw + kx`
// of the `C_in·kh·kw × h·w` matrix. Rows wrap, columns are zero-padded.
fn im2col(exec: Exec, x: &[f64], c_in: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut cols = vec![0.0; c_in * kh * kw * hw];
    par::for_each_chunk_mut(exec, &mut cols, kh * kw * hw, |i, block| {
        let src = &x[i * hw..(i + 1) * hw];
        for ky in 0..kh {
            let dv = ky as isize - ph;
            for kx in 0..kw {
                let du = kx as isize - pw;
                let (lo, hi) = column_span(du, w);
                let row = &mut block[(ky * kw + kx) * hw..(ky * kw + kx + 1) * hw];
                for v in 0..h {
                    let sv = (v as isize + dv).rem_euclid(h as isize) as usize;
                    let s0 = ((sv * w) as isize + lo as isize + du) as usize;
                    row[v * w + lo..v * w + hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    });
    cols
}

// Adjoint of `im2col`.
fn col2im(exec: Exec, cols: &[f64], c_in: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut x = vec![0.0; c_in * hw];
    par::for_each_chunk_mut(exec, &mut x, hw, |i, dst| {
        let block = &cols[i * kh * kw * hw..(i + 1) * kh * kw * hw];
        for ky in 0..kh {
            let dv = ky as isize - ph;
            for kx in 0..kw {
                let du = kx as isize - pw;
                let (lo, hi) = column_span(du, w);
                let row = &block[(ky * kw + kx) * hw..(ky * kw + kx + 1) * hw];
                for v in 0..h {
                    let sv = (v as isize + dv).rem_euclid(h as isize) as usize;
                    let s0 = ((sv * w) as isize + lo as isize + du) as usize;
                    for (d, &g) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&row[v * w + lo..v * w + hi]) {
                        *d += g;
                    }
                }
            }
        }
    });
    x
}

// Few output channels leave the matrix product too thin to pay for the
// unrolling; those layers accumulate shifted rows directly.
const DIRECT_MAX_OUT: usize = 4;

fn direct_forward(exec: Exec, x: &Tensor, weight: &Tensor, bias: &Tensor, out: &mut Tensor) {
    let (c_in, h, w, _, kh, kw) = kernel_dims(x, weight).expect("checked by caller");
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let wd = weight.data();
    par::for_each_chunk_mut(exec, out.data_mut(), h * w, |o, plane| {
        plane.fill(bias.data()[o]);
        for i in 0..c_in {
            let src = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let dv = ky as isize - ph;
                for kx in 0..kw {
                    let k = wd[((o * c_in + i) * kh + ky) * kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let du = kx as isize - pw;
                    let (lo, hi) = column_span(du, w);
                    for v in 0..h {
                        let sv = (v as isize + dv).rem_euclid(h as isize) as usize;
                        let s0 = ((sv * w) as isize + lo as isize + du) as usize;
                        for (d, &sx) in plane[v * w + lo..v * w + hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
                            *d += k * sx;
                        }
                    }
                }
            }
        }
    });
}

fn direct_backward(exec: Exec, x: &Tensor, weight: &Tensor, gd: &[f64]) -> (Tensor, Tensor) {
    let (c_in, h, w, c_out, kh, kw) = kernel_dims(x, weight).expect("checked by caller");
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let wd = weight.data();
    let mut gw = Tensor::zeros(weight.shape());
    par::for_each_chunk_mut(exec, gw.data_mut(), c_in * kh * kw, |o, gw_o| {
        let g = &gd[o * h * w..(o + 1) * h * w];
        for i in 0..c_in {
            let src = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let dv = ky as isize - ph;
                for kx in 0..kw {
                    let du = kx as isize - pw;
                    let (lo, hi) = column_span(du, w);
                    let mut acc = 0.0;
                    for v in 0..h {
                        let sv = (v as isize + dv).rem_euclid(h as isize) as usize;
                        let s0 = ((sv * w) as isize + lo as isize + du) as usize;
                        acc += g[v * w + lo..v * w + hi]
                            .iter()
                            .zip(&src[s0..s0 + (hi - lo)])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    gw_o[(i * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    let mut gx = Tensor::zeros(&[c_in, h, w]);
    par::for_each_chunk_mut(exec, gx.data_mut(), h * w, |i, gx_i| {
        for o in 0..c_out {
            let g = &gd[o * h * w..(o + 1) * h * w];
            for ky in 0..kh {
                let dv = ky as isize - ph;
                for kx in 0..kw {
                    let k = wd[((o * c_in + i) * kh + ky) * kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let du = kx as isize - pw;
                    let (lo, hi) = column_span(du, w);
                    for v in 0..h {
                        let sv = (v as isize + dv).rem_euclid(h as isize) as usize;
                        let s0 = ((sv * w) as isize + lo as isize + du) as usize;
                        for (d, &gv) in gx_i[s0..s0 + (hi - lo)].iter_mut().zip(&g[v * w + lo..v * w + hi]) {
                            *d += k * gv;
                        }
                    }
                }
            }
        }
    });
    (gw, gx)
}

pub fn ring_conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    ring_conv2d_with(Exec::default(), x, weight, bias)
}

/// Wide layers are lowered to one matrix product over the unrolled receptive
/// fields. `exec` never changes the summation order, so both paths give
/// identical results.
pub fn ring_conv2d_with(exec: Exec, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, w, c_out, kh, kw) = kernel_dims(x, weight)?;
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "bias {:?} for {c_out} output channels",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[c_out, h, w]);
    if c_out <= DIRECT_MAX_OUT {
        direct_forward(exec, x, weight, bias, &mut out);
        return Ok(out);
    }
    let hw = h * w;
    let k = c_in * kh * kw;
    let unrolled;
    let cols = if kh * kw == 1 {
        x.data()
    } else {
        unrolled = im2col(exec, x.data(), c_in, h, w, kh, kw);
        &unrolled
    };
    for (o, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        plane.fill(bias.data()[o]);
    }
    gemm(out.data_mut(), view(weight.data(), c_out, k, false), view(cols, k, hw, false), 1.0);
    Ok(out)
}

thread_local! {
    static BACKWARD_FAULT: std::cell::Cell<f64> = const { std::cell::Cell::new(0.0) };
}

/// Test hook: adds `delta` to the first weight gradient of every
/// [`ring_conv2d_backward`] on this thread until reset with `0.0`.
#[doc(hidden)]
pub fn inject_backward_fault(delta: f64) {
    BACKWARD_FAULT.with(|f| f.set(delta));
}

fn apply_fault(gw: &mut Tensor) {
    let delta = BACKWARD_FAULT.with(|f| f.get());
    if delta != 0.0 {
        gw.data_mut()[0] += delta;
    }
}

pub fn ring_conv2d_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    ring_conv2d_backward_with(Exec::default(), x, weight, grad_out)
}

pub fn ring_conv2d_backward_with(
    exec: Exec,
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (c_in, h, w, c_out, kh, kw) = kernel_dims(x, weight)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, h, w]
        )));
    }
    let hw = h * w;
    let k = c_in * kh * kw;
    let gd = grad_out.data();

    let bias = Tensor::from_fn(&[c_out], |o| gd[o * hw..(o + 1) * hw].iter().sum());

    if c_out <= DIRECT_MAX_OUT {
        let (mut weight, input) = direct_backward(exec, x, weight, gd);
        apply_fault(&mut weight);
        return Ok(ConvGrads { input, weight, bias });
    }
    let pointwise = kh * kw == 1;
    let unrolled;
    let cols = if pointwise {
        x.data()
    } else {
        unrolled = im2col(exec, x.data(), c_in, h, w, kh, kw);
        &unrolled
    };
    let mut gw = Tensor::zeros(weight.shape());
    gemm(gw.data_mut(), view(gd, c_out, hw, false), view(cols, k, hw, true), 0.0);
    apply_fault(&mut gw);

    let mut gcols = vec![0.0; k * hw];
    gemm(&mut gcols, view(weight.data(), c_out, k, true), view(gd, c_out, hw, false), 0.0);
    let gx = if pointwise {
        Tensor::from_vec(&[c_in, h, w], gcols)?
    } else {
        Tensor::from_vec(&[c_in, h, w], col2im(exec, &gcols, c_in, h, w, kh, kw))?
    };

    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = ring_conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn angular_wrap_around_difference() {
        let x = Tensor::from_vec(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        let y = ring_conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0, -2.0, 2.0]);
    }

    #[test]
    fn radial_border_is_zero_padded() {
        let x = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = ring_conv2d(&x, &k, &Tensor::full(&[1], 0.5)).unwrap();
        assert_eq!(y.data(), &[3.5, 6.5, 5.5]);
    }

    #[test]
    fn constant_input_is_constant_along_angle() {
        let x = Tensor::full(&[2, 6, 5], 1.25);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = ring_conv2d(&x, &k, &b).unwrap();
        for o in 0..3 {
            let p = y.plane(o);
            for u in 0..5 {
                assert!((0..6).all(|v| p[v * 5 + u] == p[u]));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(ring_conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1])).is_err());
        assert!(ring_conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1])).is_err());
        assert!(ring_conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = Tensor::from_fn(&[2, 4, 6], |i| (i as f64).cos());
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).sin());
        let g = ring_conv2d_backward(&x, &k, &Tensor::zeros(&[3, 4, 6])).unwrap();
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let x = Tensor::from_fn(&[3, 7, 5], |i| (i as f64 * 0.3).sin());
        let k = Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f64 * 0.7).cos());
        let b = Tensor::zeros(&[4]);
        let a = ring_conv2d_with(Exec::Sequential, &x, &k, &b).unwrap();
        let p = ring_conv2d_with(Exec::Parallel, &x, &k, &b).unwrap();
        assert_eq!(a, p);
        let g = Tensor::from_fn(&[4, 7, 5], |i| (i as f64 * 0.11).sin());
        assert_eq!(
            ring_conv2d_backward_with(Exec::Sequential, &x, &k, &g).unwrap(),
            ring_conv2d_backward_with(Exec::Parallel, &x, &k, &g).unwrap()
        );
    }
}
