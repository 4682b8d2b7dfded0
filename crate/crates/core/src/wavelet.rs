//! Orthonormal sparsifying transforms for 2-D complex images.

use ndarray::{s, Array2, ArrayViewMut1, Axis};

use crate::error::{Error, Result};
use crate::spin_sim::C64;

/// An orthonormal transform `Ψ` (so `Ψ^{-1} = Ψ^H`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Multi-level separable Haar. Both dims must be divisible by `2^levels`.
    Haar { levels: usize },
}

impl Transform {
    /// Deepest Haar decomposition the grid supports.
    pub fn max_haar(nx: usize, ny: usize) -> Self {
        let mut levels = 0;
        while nx % (1 << (levels + 1)) == 0 && ny % (1 << (levels + 1)) == 0 && (nx >> levels) > 1 && (ny >> levels) > 1 {
            levels += 1;
        }
        Transform::Haar { levels }
    }

    pub fn check(&self, nx: usize, ny: usize) -> Result<()> {
        if let Transform::Haar { levels } = *self {
            let block = 1usize << levels;
            if nx % block != 0 || ny % block != 0 {
                return Err(Error::invalid(format!(
                    "{nx}x{ny} grid not divisible by 2^{levels} for Haar"
                )));
            }
        }
        Ok(())
    }

    /// Image → coefficients.
    pub fn forward(&self, img: &Array2<C64>) -> Array2<C64> {
        let mut a = img.clone();
        if let Transform::Haar { levels } = *self {
            let (mut nx, mut ny) = a.dim();
            for _ in 0..levels {
                let mut sub = a.slice_mut(s![..nx, ..ny]);
                for lane in sub.lanes_mut(Axis(1)) {
                    haar_step(lane);
                }
                for lane in sub.lanes_mut(Axis(0)) {
                    haar_step(lane);
                }
                nx /= 2;
                ny /= 2;
            }
        }
        a
    }

    /// Coefficients → image.
    pub fn inverse(&self, coef: &Array2<C64>) -> Array2<C64> {
        let mut a = coef.clone();
        if let Transform::Haar { levels } = *self {
            let (nx, ny) = a.dim();
            for l in (0..levels).rev() {
                let (bx, by) = (nx >> l, ny >> l);
                let mut sub = a.slice_mut(s![..bx, ..by]);
                for lane in sub.lanes_mut(Axis(0)) {
                    haar_inverse_step(lane);
                }
                for lane in sub.lanes_mut(Axis(1)) {
                    haar_inverse_step(lane);
                }
            }
        }
        a
    }
}

fn haar_step(mut lane: ArrayViewMut1<C64>) {
    let n = lane.len() / 2;
    let src: Vec<C64> = lane.iter().copied().collect();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        lane[i] = (src[2 * i] + src[2 * i + 1]) * r;
        lane[n + i] = (src[2 * i] - src[2 * i + 1]) * r;
    }
}

fn haar_inverse_step(mut lane: ArrayViewMut1<C64>) {
    let n = lane.len() / 2;
    let src: Vec<C64> = lane.iter().copied().collect();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        lane[2 * i] = (src[i] + src[n + i]) * r;
        lane[2 * i + 1] = (src[i] - src[n + i]) * r;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn haar_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((16, 8), |_| C64::new(rng.gen(), rng.gen()));
        let w = Transform::max_haar(16, 8);
        assert_eq!(w, Transform::Haar { levels: 3 });
        let c = w.forward(&x);
        let energy = |a: &Array2<C64>| a.iter().map(|v| v.norm_sqr()).sum::<f64>();
        assert!((energy(&c) - energy(&x)).abs() < 1e-12 * energy(&x));
        let back = w.inverse(&c);
        assert!(x.iter().zip(back.iter()).all(|(a, b)| (a - b).norm() < 1e-14));
    }

    #[test]
    fn constant_image_compresses_to_one_coefficient() {
        let x = Array2::from_elem((8, 8), C64::new(2.0, 0.0));
        let c = Transform::Haar { levels: 3 }.forward(&x);
        assert!((c[(0, 0)].re - 16.0).abs() < 1e-12);
        assert_eq!(c.iter().filter(|v| v.norm() > 1e-12).count(), 1);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        assert!(Transform::Haar { levels: 2 }.check(12, 6).is_err());
        assert!(Transform::Haar { levels: 1 }.check(12, 6).is_ok());
        assert!(Transform::Identity.check(7, 3).is_ok());
    }
}
