//! Centered, unitary 2-D FFT. DC sits at index `(nx/2, ny/2)`.

use std::sync::Arc;

use ndarray::{Array2, ArrayViewMut2, Axis};
use rustfft::{Fft, FftPlanner};

use crate::spin_sim::C64;

#[derive(Clone)]
pub struct Fft2 {
    nx: usize,
    ny: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .finish()
    }
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            ny,
            fwd_x: planner.plan_fft_forward(nx),
            fwd_y: planner.plan_fft_forward(ny),
            inv_x: planner.plan_fft_inverse(nx),
            inv_y: planner.plan_fft_inverse(ny),
            scale: 1.0 / ((nx * ny) as f64).sqrt(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Image → centered k-space.
    pub fn forward(&self, img: &Array2<C64>) -> Array2<C64> {
        let mut a = roll(img, self.nx - self.nx / 2, self.ny - self.ny / 2);
        self.transform(a.view_mut(), &self.fwd_x, &self.fwd_y);
        roll(&a, self.nx / 2, self.ny / 2)
    }

    /// Centered k-space → image. Exact adjoint (and inverse) of [`forward`].
    ///
    /// [`forward`]: Fft2::forward
    pub fn inverse(&self, ksp: &Array2<C64>) -> Array2<C64> {
        let mut a = roll(ksp, self.nx - self.nx / 2, self.ny - self.ny / 2);
        self.transform(a.view_mut(), &self.inv_x, &self.inv_y);
        roll(&a, self.nx / 2, self.ny / 2)
    }

    fn transform(&self, mut a: ArrayViewMut2<C64>, fx: &Arc<dyn Fft<f64>>, fy: &Arc<dyn Fft<f64>>) {
        let mut buf = vec![C64::new(0.0, 0.0); self.nx.max(self.ny)];
        for mut lane in a.lanes_mut(Axis(1)) {
            let b = &mut buf[..self.ny];
            b.iter_mut().zip(lane.iter()).for_each(|(d, s)| *d = *s);
            fy.process(b);
            lane.iter_mut().zip(b.iter()).for_each(|(d, s)| *d = *s);
        }
        for mut lane in a.lanes_mut(Axis(0)) {
            let b = &mut buf[..self.nx];
            b.iter_mut().zip(lane.iter()).for_each(|(d, s)| *d = *s);
            fx.process(b);
            lane.iter_mut()
                .zip(b.iter())
                .for_each(|(d, s)| *d = *s * self.scale);
        }
    }
}

/// Circular shift: `out[(i + sx) % nx, (j + sy) % ny] = a[i, j]`.
pub fn roll(a: &Array2<C64>, sx: usize, sy: usize) -> Array2<C64> {
    let (nx, ny) = a.dim();
    let mut out = Array2::zeros((nx, ny));
    for ((i, j), v) in a.indexed_iter() {
        out[((i + sx) % nx, (j + sy) % ny)] = *v;
    }
    out
}

/// Signed centered frequency index of grid position `i` on an axis of `n`.
pub fn centered_freq(i: usize, n: usize) -> f64 {
    i as f64 - (n / 2) as f64
}
