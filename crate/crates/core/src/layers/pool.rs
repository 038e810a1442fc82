use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Argmax offsets recorded by a 2×2 max-pool, one per pooled cell.
///
/// Offset `dy * 2 + dx` locates the winner inside its window:
/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pooled: Shape4,
    offsets: Vec<u8>,
}

impl PoolIndices {
    pub fn new(pooled: Shape4, offsets: Vec<u8>) -> Result<Self> {
        if offsets.len() != pooled.len() {
            return Err(shape_err!(
                "{} pool offsets for pooled shape {pooled}",
                offsets.len()
            ));
        }
        if let Some(bad) = offsets.iter().find(|&&o| o > 3) {
            return Err(shape_err!("pool offset {bad} outside 0..=3"));
        }
        Ok(PoolIndices { pooled, offsets })
    }

    pub fn pooled_shape(&self) -> Shape4 {
        self.pooled
    }

    /// Shape of the tensor the indices were taken from.
    pub fn unpooled_shape(&self) -> Shape4 {
        self.pooled.with_hw(self.pooled.h * 2, self.pooled.w * 2)
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    /// Flat index into the unpooled tensor for pooled flat index `i`.
    #[inline]
    fn source(&self, i: usize) -> usize {
        let p = self.pooled;
        let x = i % p.w;
        let y = (i / p.w) % p.h;
        let nc = i / p.plane();
        let o = self.offsets[i] as usize;
        let (sy, sx) = (2 * y + o / 2, 2 * x + o % 2);
        (nc * 2 * p.h + sy) * 2 * p.w + sx
    }
}

#[derive(Debug, Clone)]
pub struct PoolTape {
    indices: PoolIndices,
}

#[derive(Debug, Clone)]
pub struct UnpoolTape {
    indices: PoolIndices,
}

/// Non-overlapping 2×2 max-pool with stride 2.
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices, PoolTape)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(shape_err!("max-pool needs even height and width, got {s}"));
    }
    let pooled = s.with_hw(s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(pooled);
    let mut offsets = vec![0u8; pooled.len()];
    let src = x.data();
    let mut i = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..pooled.h {
            for xx in 0..pooled.w {
                let r0 = base + 2 * y * s.w + 2 * xx;
                let window = [src[r0], src[r0 + 1], src[r0 + s.w], src[r0 + s.w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if window[k] > window[best] {
                        best = k;
                    }
                }
                out.data_mut()[i] = window[best];
                offsets[i] = best as u8;
                i += 1;
            }
        }
    }
    let indices = PoolIndices { pooled, offsets };
    let tape = PoolTape {
        indices: indices.clone(),
    };
    Ok((out, indices, tape))
}

/// Routes each pooled gradient back to its argmax position.
pub fn maxpool2x2_backward<T: Scalar>(tape: &PoolTape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    scatter(&tape.indices, grad_out, "max-pool backward")
}

/// Places each value at its recorded argmax position inside a 2×2 block; every other position is 0.
pub fn unpool2x2_forward<T: Scalar>(
    v: &Tensor<T>,
    idx: &PoolIndices,
) -> Result<(Tensor<T>, UnpoolTape)> {
    let out = scatter(idx, v, "unpool")?;
    Ok((
        out,
        UnpoolTape {
            indices: idx.clone(),
        },
    ))
}

/// Gathers the gradient at the recorded positions (adjoint of the scatter).
pub fn unpool2x2_backward<T: Scalar>(tape: &UnpoolTape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let idx = &tape.indices;
    if grad_out.shape() != idx.unpooled_shape() {
        return Err(shape_err!(
            "unpool backward: grad shape {} does not match {}",
            grad_out.shape(),
            idx.unpooled_shape()
        ));
    }
    let g = grad_out.data();
    let data = (0..idx.pooled.len()).map(|i| g[idx.source(i)]).collect();
    Tensor::from_vec(idx.pooled, data)
}

fn scatter<T: Scalar>(idx: &PoolIndices, v: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    if v.shape() != idx.pooled {
        return Err(shape_err!(
            "{what}: shape {} does not match pooled shape {}",
            v.shape(),
            idx.pooled
        ));
    }
    let mut out = Tensor::zeros(idx.unpooled_shape());
    let dst = out.data_mut();
    for (i, &val) in v.data().iter().enumerate() {
        dst[idx.source(i)] = val;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn single_window_max_and_index() {
        let x = Tensor::from_vec(sh(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (v, idx, _) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(v.data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);

        let c = Tensor::new(sh(1, 1, 2, 2), 0.5);
        let (_, idx, _) = maxpool2x2_forward(&c).unwrap();
        assert_eq!(idx.offsets(), &[0]);

        assert!(maxpool2x2_forward(&Tensor::<f64>::new(sh(1, 1, 3, 2), 0.0)).is_err());
    }

    #[test]
    fn backward_routes_to_argmax_and_conserves_mass() {
        let x = Tensor::from_vec(sh(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, _, tape) = maxpool2x2_forward(&x).unwrap();
        let g = maxpool2x2_backward(&tape, &Tensor::new(sh(1, 1, 1, 1), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let x = Tensor::<f64>::random(sh(2, 3, 4, 6), &mut RngStream::new(3), 1.0).unwrap();
        let (v, _, tape) = maxpool2x2_forward(&x).unwrap();
        let go = Tensor::<f64>::random(v.shape(), &mut RngStream::new(4), 1.0).unwrap();
        let gi = maxpool2x2_backward(&tape, &go).unwrap();
        assert!((gi.sum_f64() - go.sum_f64()).abs() < 1e-12);
        assert!(maxpool2x2_backward(&tape, &x).is_err());
    }

    #[test]
    fn unpool_places_value_at_index() {
        let idx = PoolIndices::new(sh(1, 1, 1, 1), vec![3]).unwrap();
        let v = Tensor::new(sh(1, 1, 1, 1), 4.0);
        let (u, _) = unpool2x2_forward(&v, &idx).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 4.0]);
        assert!(unpool2x2_forward(&Tensor::new(sh(1, 1, 2, 1), 1.0), &idx).is_err());
        assert!(PoolIndices::new(sh(1, 1, 1, 1), vec![4]).is_err());
    }

    #[test]
    fn unpool_gradient_ignores_non_indexed_positions() {
        let x = Tensor::<f64>::random(sh(1, 2, 4, 4), &mut RngStream::new(6), 1.0).unwrap();
        let (v, idx, _) = maxpool2x2_forward(&x).unwrap();
        let (u, tape) = unpool2x2_forward(&v, &idx).unwrap();
        let mut g = Tensor::new(u.shape(), 1.0);
        for (gv, uv) in g.data_mut().iter_mut().zip(u.data()) {
            if *uv != 0.0 {
                *gv = 0.0;
            }
        }
        let gi = unpool2x2_backward(&tape, &g).unwrap();
        assert_eq!(gi.max_abs_f64(), 0.0);
        // gather after scatter recovers the values
        assert!(unpool2x2_backward(&tape, &u).unwrap().bit_eq(&v));
    }

    proptest! {
        #[test]
        fn pool_of_unpool_recovers_nonnegative_values(
            seed in any::<u64>(), n in 1usize..3, c in 1usize..3, h in 1usize..4, w in 1usize..4
        ) {
            let mut rng = RngStream::new(seed);
            let pooled = sh(n, c, h, w);
            let offsets = (0..pooled.len()).map(|_| rng.range_inclusive(0, 3) as u8).collect();
            let idx = PoolIndices::new(pooled, offsets).unwrap();
            let v = Tensor::<f64>::random(pooled, &mut rng, 1.0).unwrap().map(|x| x.abs() + 1e-3);
            let (u, _) = unpool2x2_forward(&v, &idx).unwrap();
            let (back, idx2, _) = maxpool2x2_forward(&u).unwrap();
            prop_assert!(back.bit_eq(&v));
            prop_assert_eq!(idx2, idx);
        }
    }
}
