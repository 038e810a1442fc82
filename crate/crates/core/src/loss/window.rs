/// Mirror index without repeating the edge sample: -1 → 1, n → n-2.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Uniform `size×size` window mean over one plane, reflection-padded at the borders.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoxFilter {
    pub h: usize,
    pub w: usize,
    pub size: usize,
}

impl BoxFilter {
    fn radius(&self) -> isize {
        (self.size / 2) as isize
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.h, self.w, self.radius());
        let inv = 1.0 / self.size as f64;
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for k in -r..=r {
                    s += x[y * w + reflect_index(xx as isize + k, w)];
                }
                rows[y * w + xx] = s * inv;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for k in -r..=r {
                    s += rows[reflect_index(y as isize + k, h) * w + xx];
                }
                out[y * w + xx] = s * inv;
            }
        }
        out
    }

    /// Transpose of [`BoxFilter::apply`].
    pub fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.h, self.w, self.radius());
        let inv = 1.0 / self.size as f64;
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = g[y * w + xx] * inv;
                for k in -r..=r {
                    rows[reflect_index(y as isize + k, h) * w + xx] += v;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = rows[y * w + xx] * inv;
                for k in -r..=r {
                    out[y * w + reflect_index(xx as isize + k, w)] += v;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn reflection_matches_mirror_convention() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-2, 1), 0);
    }

    #[test]
    fn adjoint_satisfies_dot_identity() {
        let f = BoxFilter { h: 6, w: 9, size: 5 };
        let mut rng = RngStream::new(2);
        let x: Vec<f64> = (0..54).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let g: Vec<f64> = (0..54).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let lhs: f64 = f.apply(&x).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&f.adjoint(&g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_plane_is_fixed_point() {
        let f = BoxFilter { h: 7, w: 7, size: 7 };
        let out = f.apply(&[0.3; 49]);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
