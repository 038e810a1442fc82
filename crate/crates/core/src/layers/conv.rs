use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Borrowed convolution parameters: `weight` is (out_c, in_c, k, k), `bias` is (1, out_c, 1, 1).
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, T: Scalar> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<'a, T: Scalar> ConvParams<'a, T> {
    pub fn new(weight: &'a Tensor<T>, bias: &'a Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
            return Err(shape_err!("conv kernel must be 1x1 or 3x3, got {}x{}", ws.h, ws.w));
        }
        let bs = bias.shape();
        if bs.n != 1 || bs.c != ws.n || bs.h != 1 || bs.w != 1 {
            return Err(shape_err!("conv bias shape {bs} does not match {} output channels", ws.n));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }
}

#[derive(Debug, Clone)]
pub struct ConvTape<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    out_shape: Shape4,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

// Unfolds one batch item into a (in_c*k*k) × (h*w) matrix with zero "same" padding.
fn im2col<T: Scalar>(item: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for ci in 0..c {
        let plane = &item[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

// Adjoint of `im2col`: accumulates column gradients back onto the image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, item: &mut [T]) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for ci in 0..c {
        let plane = &mut item[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded cross-correlation: `out[o] = Σ_i x[i] ⋆ w[o, i] + bias[o]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    p: ConvParams<'_, T>,
) -> Result<(Tensor<T>, ConvTape<T>)> {
    let s = x.shape();
    if s.c != p.in_channels() {
        return Err(shape_err!(
            "conv expects {} input channels, got {}",
            p.in_channels(),
            s.c
        ));
    }
    let (oc, k) = (p.out_channels(), p.kernel());
    let kk = s.c * k * k;
    let plane = s.plane();
    let out_shape = s.with_c(oc);
    let mut out = Tensor::zeros(out_shape);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
    let bias = p.bias.data();
    for n in 0..s.n {
        let item = x.item(n);
        let cols: &[T] = if k == 1 {
            item
        } else {
            im2col(item, s.c, s.h, s.w, k, &mut col);
            &col
        };
        let dst = out.item_mut(n);
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        T::gemm(oc, kk, plane, T::one(), p.weight.data(), false, cols, false, T::one(), dst);
    }
    let tape = ConvTape {
        input: x.clone(),
        weight: p.weight.clone(),
        out_shape,
    };
    Ok((out, tape))
}

/// Returns `(grad_in, grads)` for a convolution recorded in `tape`.
pub fn conv2d_backward<T: Scalar>(
    tape: &ConvTape<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    if grad_out.shape() != tape.out_shape {
        return Err(shape_err!(
            "conv backward: grad shape {} does not match output {}",
            grad_out.shape(),
            tape.out_shape
        ));
    }
    let s = tape.input.shape();
    let ws = tape.weight.shape();
    let (oc, k) = (ws.n, ws.h);
    let kk = s.c * k * k;
    let plane = s.plane();

    let mut grad_w = Tensor::zeros(ws);
    let mut grad_b = vec![0.0f64; oc];
    let mut grad_in = Tensor::zeros(s);
    let mut col = vec![T::zero(); kk * plane];
    let mut dcol = vec![T::zero(); kk * plane];

    for n in 0..s.n {
        let item = tape.input.item(n);
        let g = grad_out.item(n);
        for (o, chunk) in g.chunks(plane).enumerate() {
            grad_b[o] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let cols: &[T] = if k == 1 {
            item
        } else {
            im2col(item, s.c, s.h, s.w, k, &mut col);
            &col
        };
        // dW += dY · colᵀ
        T::gemm(oc, plane, kk, T::one(), g, false, cols, true, T::one(), grad_w.data_mut());
        // dcol = Wᵀ · dY
        if k == 1 {
            T::gemm(kk, oc, plane, T::one(), tape.weight.data(), true, g, false, T::zero(), grad_in.item_mut(n));
        } else {
            T::gemm(kk, oc, plane, T::one(), tape.weight.data(), true, g, false, T::zero(), &mut dcol);
            col2im(&dcol, s.c, s.h, s.w, k, grad_in.item_mut(n));
        }
    }

    let bias = Tensor::from_vec(
        Shape4::new(1, oc, 1, 1)?,
        grad_b.into_iter().map(T::of_f64).collect(),
    )?;
    Ok((grad_in, ConvGrads { weight: grad_w, bias }))
}
