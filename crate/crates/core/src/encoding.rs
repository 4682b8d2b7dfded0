//! Linear measurement model `E_ij = P_i F S_j`, optionally right-multiplied
//! by a temporal basis `Φ_K`.
//!
//! Image stacks are `Array3<C64>` shaped `(frames, nx, ny)`; k-space is
//! centered (DC at `(nx/2, ny/2)`) and masks are stored in that layout.
//! Measurements are laid out echo-major, then coil, then acquired locations
//! in row-major grid order.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::spin_sim::C64;
use crate::subspace::SubspaceBasis;

/// A single binary k-space mask (`true` = acquired).
pub type Mask = Array2<bool>;

/// One mask per echo.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMasks {
    masks: Array3<bool>,
}

impl SamplingMasks {
    pub fn new(masks: Array3<bool>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::invalid("sampling masks must be non-empty"));
        }
        Ok(Self { masks })
    }

    pub fn from_frames(frames: &[Mask]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("need at least one mask"))?;
        let (nx, ny) = first.dim();
        let mut masks = Array3::from_elem((frames.len(), nx, ny), false);
        for (i, m) in frames.iter().enumerate() {
            if m.dim() != (nx, ny) {
                return Err(Error::dims("sampling masks", (nx, ny), m.dim()));
            }
            masks.index_axis_mut(Axis(0), i).assign(m);
        }
        Self::new(masks)
    }

    /// The same mask at every echo.
    pub fn repeated(mask: &Mask, n_echoes: usize) -> Result<Self> {
        Self::from_frames(&vec![mask.clone(); n_echoes])
    }

    pub fn fully_sampled(n_echoes: usize, nx: usize, ny: usize) -> Self {
        Self {
            masks: Array3::from_elem((n_echoes, nx, ny), true),
        }
    }

    pub fn n_echoes(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, nx, ny) = self.masks.dim();
        (nx, ny)
    }

    pub fn frame(&self, i: usize) -> ArrayView2<'_, bool> {
        self.masks.index_axis(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array3<bool> {
        &self.masks
    }

    /// Acquired locations per echo.
    pub fn counts(&self) -> Vec<usize> {
        self.masks
            .outer_iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .collect()
    }

    /// `M = Σ_i |mask_i|`.
    pub fn total(&self) -> usize {
        self.masks.iter().filter(|&&b| b).count()
    }

    /// Union over echoes.
    pub fn union(&self) -> Mask {
        let (nx, ny) = self.dims();
        let mut u = Array2::from_elem((nx, ny), false);
        for m in self.masks.outer_iter() {
            Zip::from(&mut u).and(&m).for_each(|a, &b| *a |= b);
        }
        u
    }
}

/// Coil sensitivities `S_j`, shaped `(coils, nx, ny)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    maps: Array3<C64>,
    uniform: bool,
}

impl SensitivityMaps {
    /// Single all-ones coil.
    pub fn uniform(nx: usize, ny: usize) -> Self {
        Self {
            maps: Array3::from_elem((1, nx, ny), C64::new(1.0, 0.0)),
            uniform: true,
        }
    }

    pub fn new(maps: Array3<C64>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid("sensitivity maps must be non-empty"));
        }
        let uniform = maps.len_of(Axis(0)) == 1 && maps.iter().all(|&v| v == C64::new(1.0, 0.0));
        Ok(Self { maps, uniform })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, nx, ny) = self.maps.dim();
        (nx, ny)
    }

    pub fn coil(&self, j: usize) -> ArrayView2<'_, C64> {
        self.maps.index_axis(Axis(0), j)
    }

    pub fn as_array(&self) -> &Array3<C64> {
        &self.maps
    }

    /// Root-sum-of-squares must be positive wherever `support` is set.
    pub fn check_coverage(&self, support: &Mask) -> Result<()> {
        for ((ix, iy), &inside) in support.indexed_iter() {
            if inside {
                let rss: f64 = (0..self.n_coils())
                    .map(|j| self.maps[(j, ix, iy)].norm_sqr())
                    .sum();
                if rss <= 0.0 {
                    return Err(Error::invalid(format!(
                        "coil maps vanish at ({ix}, {iy}) inside the support"
                    )));
                }
            }
        }
        Ok(())
    }

    fn weight(&self, j: usize, img: &Array2<C64>) -> Array2<C64> {
        if self.uniform {
            img.clone()
        } else {
            img * &self.coil(j)
        }
    }

    fn weight_conj_into(&self, j: usize, img: &Array2<C64>, acc: &mut Array2<C64>) {
        if self.uniform {
            *acc += img;
        } else {
            Zip::from(acc)
                .and(img)
                .and(&self.coil(j))
                .for_each(|a, &v, &s| *a += s.conj() * v);
        }
    }
}

/// The composed forward operator and its adjoint.
#[derive(Clone, Debug)]
pub struct Encoder {
    masks: SamplingMasks,
    maps: SensitivityMaps,
    basis: Option<SubspaceBasis>,
    fft: Fft2,
    /// Acquired `(ix, iy)` per echo, row-major.
    samples: Vec<Vec<(usize, usize)>>,
    /// Start of each echo's block in the measurement vector.
    offsets: Vec<usize>,
}

impl Encoder {
    pub fn new(
        masks: SamplingMasks,
        maps: Option<SensitivityMaps>,
        basis: Option<SubspaceBasis>,
    ) -> Result<Self> {
        let (nx, ny) = masks.dims();
        let maps = maps.unwrap_or_else(|| SensitivityMaps::uniform(nx, ny));
        if maps.dims() != (nx, ny) {
            return Err(Error::dims("coil maps", (nx, ny), maps.dims()));
        }
        if let Some(b) = &basis {
            if b.n_echoes() != masks.n_echoes() {
                return Err(Error::dims("basis rows", masks.n_echoes(), b.n_echoes()));
            }
        }
        let samples: Vec<Vec<(usize, usize)>> = masks
            .masks
            .outer_iter()
            .map(|m| {
                m.indexed_iter()
                    .filter(|(_, &b)| b)
                    .map(|(idx, _)| idx)
                    .collect()
            })
            .collect();
        let coils = maps.n_coils();
        let mut offsets = Vec::with_capacity(samples.len() + 1);
        let mut acc = 0;
        for s in &samples {
            offsets.push(acc);
            acc += s.len() * coils;
        }
        offsets.push(acc);
        Ok(Self {
            fft: Fft2::new(nx, ny),
            masks,
            maps,
            basis,
            samples,
            offsets,
        })
    }

    /// Same sampling and coils, different (or no) basis.
    pub fn with_basis(&self, basis: Option<SubspaceBasis>) -> Result<Self> {
        Self::new(self.masks.clone(), Some(self.maps.clone()), basis)
    }

    pub fn masks(&self) -> &SamplingMasks {
        &self.masks
    }

    pub fn maps(&self) -> &SensitivityMaps {
        &self.maps
    }

    pub fn basis(&self) -> Option<&SubspaceBasis> {
        self.basis.as_ref()
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks.dims()
    }

    pub fn n_echoes(&self) -> usize {
        self.masks.n_echoes()
    }

    /// `K` with a basis, `T` without.
    pub fn domain_frames(&self) -> usize {
        self.basis.as_ref().map_or(self.n_echoes(), |b| b.rank())
    }

    pub fn domain_shape(&self) -> (usize, usize, usize) {
        let (nx, ny) = self.dims();
        (self.domain_frames(), nx, ny)
    }

    pub fn n_measurements(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn zeros_domain(&self) -> Array3<C64> {
        Array3::zeros(self.domain_shape())
    }

    fn check_domain(&self, x: &Array3<C64>) -> Result<()> {
        if x.dim() != self.domain_shape() {
            return Err(Error::dims("encoder domain", self.domain_shape(), x.dim()));
        }
        Ok(())
    }

    /// Echo image `i` of the domain stack (`Φ_K α` row `i` with a basis).
    fn echo_image(&self, x: &Array3<C64>, i: usize) -> Array2<C64> {
        match &self.basis {
            None => x.index_axis(Axis(0), i).to_owned(),
            Some(b) => {
                let (nx, ny) = self.dims();
                let mut img = Array2::zeros((nx, ny));
                for (k, frame) in x.outer_iter().enumerate() {
                    let w = b.phi_k[(i, k)];
                    Zip::from(&mut img).and(&frame).for_each(|a, &v| *a += w * v);
                }
                img
            }
        }
    }

    /// Folds per-echo images back onto the domain (`Φ_K^H` with a basis).
    fn fold_echoes(&self, echoes: Vec<Array2<C64>>) -> Array3<C64> {
        let (nx, ny) = self.dims();
        match &self.basis {
            None => {
                let mut out = Array3::zeros((echoes.len(), nx, ny));
                for (i, e) in echoes.into_iter().enumerate() {
                    out.index_axis_mut(Axis(0), i).assign(&e);
                }
                out
            }
            Some(b) => {
                let mut out = Array3::zeros((b.rank(), nx, ny));
                for (k, mut frame) in out.outer_iter_mut().enumerate() {
                    for (i, e) in echoes.iter().enumerate() {
                        let w = b.phi_k[(i, k)].conj();
                        Zip::from(&mut frame).and(e).for_each(|a, &v| *a += w * v);
                    }
                }
                out
            }
        }
    }

    /// `y = A x`.
    pub fn forward(&self, x: &Array3<C64>) -> Result<Array1<C64>> {
        self.check_domain(x)?;
        let blocks: Vec<Vec<C64>> = (0..self.n_echoes())
            .into_par_iter()
            .map(|i| {
                let img = self.echo_image(x, i);
                let mut out = Vec::with_capacity(self.samples[i].len() * self.maps.n_coils());
                for j in 0..self.maps.n_coils() {
                    let k = self.fft.forward(&self.maps.weight(j, &img));
                    out.extend(self.samples[i].iter().map(|&idx| k[idx]));
                }
                out
            })
            .collect();
        Ok(Array1::from_iter(blocks.into_iter().flatten()))
    }

    /// `A^H y`.
    pub fn adjoint(&self, y: &Array1<C64>) -> Result<Array3<C64>> {
        if y.len() != self.n_measurements() {
            return Err(Error::dims("measurements", self.n_measurements(), y.len()));
        }
        let (nx, ny) = self.dims();
        let echoes: Vec<Array2<C64>> = (0..self.n_echoes())
            .into_par_iter()
            .map(|i| {
                let n = self.samples[i].len();
                let mut img = Array2::zeros((nx, ny));
                for j in 0..self.maps.n_coils() {
                    let start = self.offsets[i] + j * n;
                    let mut k = Array2::zeros((nx, ny));
                    for (s, &idx) in self.samples[i].iter().enumerate() {
                        k[idx] = y[start + s];
                    }
                    self.maps.weight_conj_into(j, &self.fft.inverse(&k), &mut img);
                }
                img
            })
            .collect();
        Ok(self.fold_echoes(echoes))
    }

    /// `A^H A x` evaluated echo by echo in k-space, never forming `y`.
    pub fn normal(&self, x: &Array3<C64>) -> Result<Array3<C64>> {
        self.check_domain(x)?;
        let (nx, ny) = self.dims();
        let echoes: Vec<Array2<C64>> = (0..self.n_echoes())
            .into_par_iter()
            .map(|i| {
                let img = self.echo_image(x, i);
                let mask = self.masks.frame(i);
                let mut acc = Array2::zeros((nx, ny));
                for j in 0..self.maps.n_coils() {
                    let mut k = self.fft.forward(&self.maps.weight(j, &img));
                    Zip::from(&mut k).and(&mask).for_each(|v, &m| {
                        if !m {
                            *v = C64::new(0.0, 0.0);
                        }
                    });
                    self.maps.weight_conj_into(j, &self.fft.inverse(&k), &mut acc);
                }
                acc
            })
            .collect();
        Ok(self.fold_echoes(echoes))
    }

    /// Precomputes the per-frequency `K×K` blocks of `Φ_K^H P Φ_K`.
    pub fn build_normal_kernel(&self) -> Result<NormalKernel> {
        let basis = self
            .basis
            .as_ref()
            .ok_or_else(|| Error::invalid("normal kernel requires a subspace basis"))?;
        let (nx, ny) = self.dims();
        let kk = basis.rank();
        let phi = &basis.phi_k;
        let mut psi = Array3::zeros((nx * ny, kk, kk));
        for (i, m) in self.masks.masks.outer_iter().enumerate() {
            // outer product conj(φ_i) φ_i^T, added wherever echo i sampled
            let mut block = Array2::<C64>::zeros((kk, kk));
            for a in 0..kk {
                for b in 0..kk {
                    block[(a, b)] = phi[(i, a)].conj() * phi[(i, b)];
                }
            }
            for ((ix, iy), &on) in m.indexed_iter() {
                if on {
                    let mut dst = psi.index_axis_mut(Axis(0), ix * ny + iy);
                    dst += &block;
                }
            }
        }
        Ok(NormalKernel { psi, nx, ny })
    }
}

/// Block-diagonal k-space operator `Ψ_K`: one Hermitian `K×K` block per
/// frequency, indexed row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalKernel {
    psi: Array3<C64>,
    nx: usize,
    ny: usize,
}

impl NormalKernel {
    pub fn rank(&self) -> usize {
        self.psi.len_of(Axis(1))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn block(&self, ix: usize, iy: usize) -> ArrayView2<'_, C64> {
        self.psi.index_axis(Axis(0), ix * self.ny + iy)
    }

    /// `Σ_j S_j^H F^H Ψ_K F S_j α`, i.e. `A^H A α` without leaving the
    /// coefficient domain.
    pub fn apply(&self, enc: &Encoder, alpha: &Array3<C64>) -> Result<Array3<C64>> {
        let kk = self.rank();
        let (nx, ny) = (self.nx, self.ny);
        if alpha.dim() != (kk, nx, ny) || enc.dims() != (nx, ny) {
            return Err(Error::dims("normal kernel", (kk, nx, ny), alpha.dim()));
        }
        let maps = enc.maps();
        let per_coil: Vec<Array3<C64>> = (0..maps.n_coils())
            .into_par_iter()
            .map(|j| {
                let spectra: Vec<Array2<C64>> = alpha
                    .outer_iter()
                    .map(|a| enc.fft().forward(&maps.weight(j, &a.to_owned())))
                    .collect();
                let mut mixed = vec![Array2::<C64>::zeros((nx, ny)); kk];
                for ix in 0..nx {
                    for iy in 0..ny {
                        let blk = self.block(ix, iy);
                        for a in 0..kk {
                            let mut acc = C64::new(0.0, 0.0);
                            for b in 0..kk {
                                acc += blk[(a, b)] * spectra[b][(ix, iy)];
                            }
                            mixed[a][(ix, iy)] = acc;
                        }
                    }
                }
                let mut out = Array3::zeros((kk, nx, ny));
                for (a, m) in mixed.iter().enumerate() {
                    let mut dst = out.index_axis_mut(Axis(0), a).to_owned();
                    maps.weight_conj_into(j, &enc.fft().inverse(m), &mut dst);
                    out.index_axis_mut(Axis(0), a).assign(&dst);
                }
                out
            })
            .collect();
        let mut total = Array3::zeros((kk, nx, ny));
        for p in per_coil {
            total += &p;
        }
        Ok(total)
    }
}

/// `⟨a, b⟩ = Σ conj(a) b` over any stack.
pub fn inner<'a, I>(a: I, b: I) -> C64
where
    I: IntoIterator<Item = &'a C64>,
{
    a.into_iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sq<'a, I>(a: I) -> f64
where
    I: IntoIterator<Item = &'a C64>,
{
    a.into_iter().map(|v| v.norm_sqr()).sum()
}
