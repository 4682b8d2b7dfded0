//! Numerical phantoms, coil maps and simulated acquisitions.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoding::{Encoder, SamplingMasks, SensitivityMaps};
use crate::error::{Error, Result};
use crate::spin_sim::{simulate_fse, SequenceParams, TissueParams, C64};

/// Ellipse in normalized coordinates: the grid spans `[-1, 1]` on both
/// axes, first axis first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axes.
    pub axes: (f64, f64),
    pub angle_deg: f64,
    pub region: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: (usize, usize),
    /// Rasterized in order; later ellipses overwrite earlier ones.
    pub ellipses: Vec<Ellipse>,
    /// Tissue per nonzero region id.
    pub regions: BTreeMap<u32, TissueParams>,
}

impl PhantomSpec {
    pub fn empty(nx: usize, ny: usize) -> Self {
        Self {
            dims: (nx, ny),
            ellipses: Vec::new(),
            regions: BTreeMap::new(),
        }
    }

    /// 64×64 scene with four tissues nested in a head-like outline.
    pub fn desk() -> Self {
        let regions = BTreeMap::from([
            (1, TissueParams::new(1000.0, 100.0)),
            (2, TissueParams::new(800.0, 60.0).with_rho(C64::new(0.8, 0.0))),
            (3, TissueParams::new(1500.0, 200.0).with_rho(C64::new(0.9, 0.0))),
            (4, TissueParams::new(600.0, 40.0).with_rho(C64::new(0.7, 0.0))),
        ]);
        let e = |cx, cy, ax, ay, angle_deg, region| Ellipse {
            center: (cx, cy),
            axes: (ax, ay),
            angle_deg,
            region,
        };
        Self {
            dims: (64, 64),
            ellipses: vec![
                e(0.0, 0.0, 0.85, 0.7, 0.0, 1),
                e(-0.3, -0.3, 0.3, 0.2, 20.0, 2),
                e(0.3, -0.25, 0.25, 0.3, -30.0, 3),
                e(0.1, 0.35, 0.2, 0.25, 0.0, 4),
            ],
            regions,
        }
    }
}

/// Tissue of the background label 0.
pub fn background() -> TissueParams {
    TissueParams::new(1000.0, 100.0).with_rho(C64::new(0.0, 0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub dims: (usize, usize),
    pub labels: Array2<u32>,
    /// Includes the background id 0 with `ρ = 0`.
    pub regions: BTreeMap<u32, TissueParams>,
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let (nx, ny) = spec.dims;
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("phantom grid must be nonempty"));
    }
    if spec.regions.contains_key(&0) {
        return Err(Error::invalid("region id 0 is reserved for background"));
    }
    for (id, t) in &spec.regions {
        t.validate()
            .map_err(|e| Error::invalid(format!("region {id}: {e}")))?;
    }
    let mut labels = Array2::zeros((nx, ny));
    for (k, el) in spec.ellipses.iter().enumerate() {
        let (cx, cy) = el.center;
        if !(cx.abs() <= 1.0 && cy.abs() <= 1.0) {
            return Err(Error::invalid(format!("ellipse {k} center ({cx}, {cy}) outside [-1, 1]")));
        }
        if !(el.axes.0 > 0.0 && el.axes.1 > 0.0) {
            return Err(Error::invalid(format!("ellipse {k} needs positive semi-axes")));
        }
        if el.region != 0 && !spec.regions.contains_key(&el.region) {
            return Err(Error::invalid(format!("ellipse {k} uses undefined region {}", el.region)));
        }
        let (s, c) = el.angle_deg.to_radians().sin_cos();
        for ((i, j), label) in labels.indexed_iter_mut() {
            let x = 2.0 * (i as f64 + 0.5) / nx as f64 - 1.0 - cx;
            let y = 2.0 * (j as f64 + 0.5) / ny as f64 - 1.0 - cy;
            let u = (x * c + y * s) / el.axes.0;
            let v = (-x * s + y * c) / el.axes.1;
            if u * u + v * v <= 1.0 {
                *label = el.region;
            }
        }
    }
    let mut regions = spec.regions.clone();
    regions.insert(0, background());
    Ok(Phantom {
        dims: spec.dims,
        labels,
        regions,
    })
}

impl Phantom {
    /// Voxels with a nonzero label.
    pub fn support(&self) -> Array2<bool> {
        self.labels.mapv(|l| l != 0)
    }

    /// Region ids present in the label map, background excluded.
    pub fn present_regions(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn map<F: Fn(&TissueParams) -> f64>(&self, f: F) -> Array2<f64> {
        self.labels.mapv(|l| f(&self.regions[&l]))
    }

    pub fn rho(&self) -> Array2<C64> {
        self.labels.mapv(|l| self.regions[&l].rho)
    }

    /// Noiseless echo images `x_i(r) = ρ(r) f_i(θ(r))`, one simulation per
    /// region.
    pub fn contrast_images(&self, seq: &SequenceParams) -> Result<Array3<C64>> {
        let mut evolutions = BTreeMap::new();
        for (&id, t) in &self.regions {
            let unit = TissueParams { rho: C64::new(1.0, 0.0), ..*t };
            evolutions.insert(id, simulate_fse(&unit, seq)?.samples);
        }
        let (nx, ny) = self.dims;
        Ok(Array3::from_shape_fn((seq.n_echoes, nx, ny), |(i, a, b)| {
            let l = self.labels[(a, b)];
            self.regions[&l].rho * evolutions[&l][i]
        }))
    }
}

/// Smooth synthetic receive coils placed evenly on a ring around the grid.
/// Magnitudes fall off with distance from each coil and phases vary
/// linearly across the field of view.
pub fn ring_coil_maps(n_coils: usize, nx: usize, ny: usize) -> Result<SensitivityMaps> {
    if n_coils == 0 {
        return Err(Error::invalid("need at least one coil"));
    }
    let maps = Array3::from_shape_fn((n_coils, nx, ny), |(c, i, j)| {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
        let (px, py) = (1.5 * theta.cos(), 1.5 * theta.sin());
        let x = 2.0 * (i as f64 + 0.5) / nx as f64 - 1.0;
        let y = 2.0 * (j as f64 + 0.5) / ny as f64 - 1.0;
        let d2 = (x - px).powi(2) + (y - py).powi(2);
        let mag = (-d2 / 4.0).exp();
        C64::from_polar(mag, theta + 0.5 * (x * theta.cos() - y * theta.sin()))
    });
    SensitivityMaps::new(maps)
}

/// Adds i.i.d. complex Gaussian noise, `σ/√2` per real component.
pub fn add_noise(y: &mut Array1<C64>, sigma: f64, seed: u64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and nonnegative"));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma / 2f64.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    for v in y.iter_mut() {
        *v += C64::new(n.sample(&mut rng), n.sample(&mut rng));
    }
    Ok(())
}

/// Encodes the phantom's echo images and adds measurement noise.
pub fn simulate_acquisition(
    phantom: &Phantom,
    seq: &SequenceParams,
    masks: &SamplingMasks,
    maps: Option<&SensitivityMaps>,
    sigma: f64,
    seed: u64,
) -> Result<Array1<C64>> {
    if masks.dims() != phantom.dims {
        return Err(Error::dims("acquisition masks", phantom.dims, masks.dims()));
    }
    let enc = Encoder::new(masks.clone(), maps.cloned(), None)?;
    let mut y = enc.forward(&phantom.contrast_images(seq)?)?;
    add_noise(&mut y, sigma, seed)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::Fft2;

    #[test]
    fn empty_spec_is_background() {
        let p = make_phantom(&PhantomSpec::empty(8, 6)).unwrap();
        assert!(p.labels.iter().all(|&l| l == 0));
        assert!(p.rho().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn disc_area_matches_analytic() {
        let mut spec = PhantomSpec::empty(64, 64);
        spec.regions.insert(1, TissueParams::new(1000.0, 100.0));
        let r = 20.0;
        spec.ellipses.push(Ellipse { center: (0.0, 0.0), axes: (r / 32.0, r / 32.0), angle_deg: 0.0, region: 1 });
        let p = make_phantom(&spec).unwrap();
        let count = p.labels.iter().filter(|&&l| l == 1).count() as f64;
        let area = std::f64::consts::PI * r * r;
        assert!((count - area).abs() < 0.03 * area, "{count} vs {area}");
    }

    #[test]
    fn later_ellipses_win() {
        let mut spec = PhantomSpec::empty(32, 32);
        spec.regions.insert(1, TissueParams::new(1000.0, 100.0));
        spec.regions.insert(2, TissueParams::new(800.0, 60.0));
        spec.ellipses.push(Ellipse { center: (0.0, 0.0), axes: (0.8, 0.8), angle_deg: 0.0, region: 1 });
        spec.ellipses.push(Ellipse { center: (0.0, 0.0), axes: (0.3, 0.3), angle_deg: 0.0, region: 2 });
        let p = make_phantom(&spec).unwrap();
        assert_eq!(p.labels[(16, 16)], 2);
        assert_eq!(p.labels[(16, 6)], 1);
        assert_eq!(p.labels[(0, 0)], 0);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = PhantomSpec::empty(16, 16);
        spec.regions.insert(1, TissueParams::new(1000.0, 100.0));
        spec.ellipses.push(Ellipse { center: (1.2, 0.0), axes: (0.2, 0.2), angle_deg: 0.0, region: 1 });
        assert!(make_phantom(&spec).is_err());
        spec.ellipses[0].center = (0.0, 0.0);
        spec.ellipses[0].region = 5;
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn desk_scene_has_four_regions() {
        let p = make_phantom(&PhantomSpec::desk()).unwrap();
        assert_eq!(p.present_regions(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn noiseless_full_acquisition_is_the_fft() {
        let p = make_phantom(&PhantomSpec::desk()).unwrap();
        let seq = SequenceParams::cpmg(4, 10.0);
        let masks = SamplingMasks::fully_sampled(4, 64, 64);
        let y = simulate_acquisition(&p, &seq, &masks, None, 0.0, 0).unwrap();
        let x = p.contrast_images(&seq).unwrap();
        let fft = Fft2::new(64, 64);
        let n = 64 * 64;
        for i in 0..4 {
            let k = Array2::from_shape_vec((64, 64), y.slice(ndarray::s![i * n..(i + 1) * n]).to_vec()).unwrap();
            let img = fft.inverse(&k);
            let want = x.index_axis(ndarray::Axis(0), i);
            assert!(img.iter().zip(want.iter()).all(|(a, b)| (a - b).norm() < 1e-12));
        }
    }

    #[test]
    fn noise_is_seeded_with_requested_variance() {
        let mut a = Array1::zeros(100_000);
        let mut b = Array1::zeros(100_000);
        add_noise(&mut a, 0.3, 9).unwrap();
        add_noise(&mut b, 0.3, 9).unwrap();
        assert_eq!(a, b);
        let var = a.iter().map(|v| v.norm_sqr()).sum::<f64>() / a.len() as f64;
        assert!((var - 0.09).abs() < 0.02 * 0.09, "{var}");
    }

    #[test]
    fn ring_coils_cover_the_grid() {
        let maps = ring_coil_maps(4, 16, 16).unwrap();
        assert!(maps.check_coverage(&Array2::from_elem((16, 16), true)).is_ok());
    }
}
