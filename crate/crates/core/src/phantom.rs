//! Synthetic phantom corpus: normal head-like images built from smoothed
//! concentric ellipses with controlled variability, and anomalous variants
//! with exact ground-truth lesion masks.
//!
//! Everything is a pure function of the sample seed, so a corpus regenerates
//! bit-exactly from its manifest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::ImageGrid;
use crate::error::{Error, Result};
use crate::rng::{seeded, Prng};

/// Phantom images are square with this side length.
pub const IMAGE_SIZE: usize = 64;

/// Stream id separating phantom draws from every other consumer of a seed.
const PHANTOM_STREAM: u64 = 0x9e3779b9;

/// Lesion area relative to the foreground: small < 1%, medium 1-5%, large > 5%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    None,
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub fn name(self) -> &'static str {
        match self {
            SizeClass::None => "none",
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => SizeClass::None,
            "small" => SizeClass::Small,
            "medium" => SizeClass::Medium,
            "large" => SizeClass::Large,
            _ => return Err(Error::InvalidArgument("unknown size class")),
        })
    }

    /// Classifies a measured foreground-relative area.
    pub fn of_area_fraction(frac: f64) -> Self {
        if frac == 0.0 {
            SizeClass::None
        } else if frac < 0.01 {
            SizeClass::Small
        } else if frac <= 0.05 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LesionType {
    /// Intensity blob brighter than the surrounding tissue.
    Hyper,
    /// Intensity blob darker than the surrounding tissue.
    Hypo,
    /// Radial warp locally enlarging one ventricle.
    Structural,
}

impl LesionType {
    pub fn name(self) -> &'static str {
        match self {
            LesionType::Hyper => "hyper",
            LesionType::Hypo => "hypo",
            LesionType::Structural => "structural",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "hyper" => LesionType::Hyper,
            "hypo" => LesionType::Hypo,
            "structural" => LesionType::Structural,
            _ => return Err(Error::InvalidArgument("unknown lesion type")),
        })
    }
}

/// One generated phantom, with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: ImageGrid,
    /// Binary lesion mask; all zero for normals.
    pub lesion_mask: Vec<u8>,
    pub size_class: SizeClass,
    pub lesion_type: Option<LesionType>,
    pub seed: u64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    phi: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    fn q(&self, x: f64, y: f64) -> f64 {
        #[allow(unused_imports)]
        use crate::math::F64Ext as _;
        let dx = x - self.cx;
        let dy = y - self.cy;
        let c = self.phi.cos();
        let s = self.phi.sin();
        let xr = c * dx + s * dy;
        let yr = -s * dx + c * dy;
        ((xr / self.a) * (xr / self.a) + (yr / self.b) * (yr / self.b) + 1e-12).sqrt()
    }

    /// Antialiased coverage with roughly `edge` pixels of transition.
    fn coverage(&self, x: f64, y: f64, edge: f64) -> f64 {
        #[allow(unused_imports)]
        use crate::math::F64Ext as _;
        let s = (1.0 - self.q(x, y)) * self.a.min_f(self.b);
        (s / edge + 0.5).clamp(0.0, 1.0)
    }
}

struct Anatomy {
    inner: Ellipse,
    vents: [Ellipse; 2],
    image: Vec<f64>,
    foreground: Vec<u8>,
}

fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn build_anatomy(rng: &mut Prng) -> Anatomy {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    let n = IMAGE_SIZE;
    let half = n as f64 / 2.0;
    let cx = half + uniform(rng, -2.0, 2.0);
    let cy = half + uniform(rng, -2.0, 2.0);
    let phi = uniform(rng, -0.12, 0.12);
    let a = uniform(rng, 22.0, 26.0);
    let b = uniform(rng, 18.5, 22.5);
    let skull_th = 1.8;
    let outer = Ellipse { cx, cy, a, b, phi };
    let inner = Ellipse { cx, cy, a: a - skull_th, b: b - skull_th, phi };

    let skull_intensity = uniform(rng, 0.77, 0.87);
    let cortex_intensity = uniform(rng, 0.48, 0.56);
    let radial_gradient = uniform(rng, 0.0, 0.08);

    let vent_scale = uniform(rng, 0.8, 1.25);
    let vent_intensity = uniform(rng, 0.14, 0.20);
    let make_vent = |side: f64, rng: &mut Prng| {
        let offset = 4.5 + uniform(rng, -0.8, 0.8);
        let vcx = cx + side * offset;
        let vcy = cy + uniform(rng, -0.6, 0.6);
        let av = uniform(rng, 2.5, 4.0) * vent_scale;
        let bv = uniform(rng, 1.6, 2.4) * vent_scale;
        let vphi = phi + uniform(rng, -0.2, 0.2);
        Ellipse { cx: vcx, cy: vcy, a: av, b: bv, phi: vphi }
    };
    let vent_l = make_vent(-1.0, rng);
    let vent_r = make_vent(1.0, rng);

    let bias_amp = uniform(rng, 0.0, 0.05);
    let bias_fx = uniform(rng, 0.3, 1.0);
    let bias_fy = uniform(rng, 0.3, 1.0);
    let bias_phase = uniform(rng, 0.0, core::f64::consts::TAU);
    let texture_amp = uniform(rng, 0.005, 0.015);

    let mut image = vec![0.0; n * n];
    let mut foreground = vec![0u8; n * n];
    for yi in 0..n {
        for xi in 0..n {
            let (x, y) = (xi as f64, yi as f64);
            let cov_out = outer.coverage(x, y, 1.5);
            let cov_brain = inner.coverage(x, y, 1.5);
            let mut v = skull_intensity * (cov_out - cov_brain);
            let shade = cortex_intensity * (1.0 + radial_gradient * (inner.q(x, y) - 0.5));
            v += shade * cov_brain;
            for vent in [&vent_l, &vent_r] {
                let cv = vent.coverage(x, y, 1.0);
                v = v * (1.0 - cv) + vent_intensity * cv * cov_brain;
            }
            let fg = cov_out >= 0.5;
            if fg {
                v += bias_amp
                    * (core::f64::consts::TAU * (bias_fx * x + bias_fy * y) / n as f64
                        + bias_phase)
                        .cos();
                v += texture_amp * uniform(rng, -1.0, 1.0);
            }
            image[yi * n + xi] = v.clamp(0.0, 1.0);
            foreground[yi * n + xi] = u8::from(fg);
        }
    }
    Anatomy { inner, vents: [vent_l, vent_r], image, foreground }
}

/// Generates a normal phantom. Identical seeds produce bit-identical samples.
pub fn gen_normal(seed: u64) -> PhantomSample {
    let mut rng = seeded(seed, PHANTOM_STREAM);
    let anatomy = build_anatomy(&mut rng);
    let n = IMAGE_SIZE;
    PhantomSample {
        image: ImageGrid::new(n, n, anatomy.image, anatomy.foreground).expect("valid phantom"),
        lesion_mask: vec![0; n * n],
        size_class: SizeClass::None,
        lesion_type: None,
        seed,
    }
}

/// Target area band (fraction of foreground) the generator aims for, chosen
/// inside the class interval so discretization cannot cross a boundary.
fn target_band(class: SizeClass) -> Result<(f64, f64)> {
    match class {
        SizeClass::Small => Ok((0.0035, 0.0090)),
        SizeClass::Medium => Ok((0.0150, 0.0450)),
        SizeClass::Large => Ok((0.0550, 0.0850)),
        SizeClass::None => Err(Error::InvalidArgument("anomalies need a non-empty size class")),
    }
}

fn accept_band(class: SizeClass) -> (f64, f64) {
    match class {
        SizeClass::Small => (0.001, 0.0095),
        SizeClass::Medium => (0.0105, 0.0495),
        SizeClass::Large => (0.0505, 0.1400),
        SizeClass::None => (0.0, 0.0),
    }
}

/// Generates an anomalous phantom of the requested size class and lesion type
/// by modifying `gen_normal(seed)`; the lesion mask marks the affected pixels
/// and always lies inside the foreground.
pub fn gen_anomalous(
    seed: u64,
    size_class: SizeClass,
    lesion_type: LesionType,
) -> Result<PhantomSample> {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    let (band_lo, band_hi) = target_band(size_class)?;
    let (acc_lo, acc_hi) = accept_band(size_class);
    let mut rng = seeded(seed, PHANTOM_STREAM);
    let anatomy = build_anatomy(&mut rng);
    let n = IMAGE_SIZE;
    let fg_area: usize = anatomy.foreground.iter().map(|&v| v as usize).sum();
    let fg_area_f = fg_area as f64;

    let mut best: Option<(Vec<f64>, Vec<u8>, f64)> = None;
    for _attempt in 0..80 {
        let (values, mask) = match lesion_type {
            LesionType::Hyper | LesionType::Hypo => {
                intensity_lesion(&anatomy, &mut rng, lesion_type, size_class, band_lo, band_hi, fg_area_f)
            }
            LesionType::Structural => structural_lesion(&anatomy, &mut rng, band_lo, band_hi, fg_area_f),
        };
        let area = mask.iter().filter(|&&m| m > 0).count() as f64 / fg_area_f;
        if area >= acc_lo && area <= acc_hi {
            let image = ImageGrid::new(n, n, values, anatomy.foreground.clone())?;
            return Ok(PhantomSample {
                image,
                lesion_mask: mask,
                size_class,
                lesion_type: Some(lesion_type),
                seed,
            });
        }
        // keep the attempt closest to the band in case every try misses
        let target = 0.5 * (band_lo + band_hi);
        let dist = (area - target).abs();
        if best.as_ref().map_or(true, |(_, _, d)| dist < *d) && area > 0.0 {
            best = Some((values, mask, dist));
        }
    }
    let (values, mask, _) =
        best.ok_or(Error::Degenerate("could not place a lesion of the requested class"))?;
    let image = ImageGrid::new(n, n, values, anatomy.foreground.clone())?;
    Ok(PhantomSample {
        image,
        lesion_mask: mask,
        size_class,
        lesion_type: Some(lesion_type),
        seed,
    })
}

fn intensity_lesion(
    anatomy: &Anatomy,
    rng: &mut Prng,
    lesion_type: LesionType,
    size_class: SizeClass,
    band_lo: f64,
    band_hi: f64,
    fg_area: f64,
) -> (Vec<f64>, Vec<u8>) {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    let n = IMAGE_SIZE;
    let area = uniform(rng, band_lo, band_hi) * fg_area;
    let radius = (area / core::f64::consts::PI).sqrt().max_f(1.1);
    // candidate centers: inner-brain pixels away from the skull
    let margin = Ellipse {
        cx: anatomy.inner.cx,
        cy: anatomy.inner.cy,
        a: anatomy.inner.a - 4.0,
        b: anatomy.inner.b - 4.0,
        phi: anatomy.inner.phi,
    };
    let (cx, cy) = loop {
        let x = uniform(rng, 0.0, n as f64);
        let y = uniform(rng, 0.0, n as f64);
        if margin.q(x, y) < 0.85 {
            break (x, y);
        }
    };
    let mut delta = match lesion_type {
        LesionType::Hyper => uniform(rng, 0.26, 0.36),
        LesionType::Hypo => -uniform(rng, 0.22, 0.32),
        LesionType::Structural => unreachable!("intensity path"),
    };
    // focal lesions in the smallest class get extra contrast
    if size_class == SizeClass::Small {
        delta *= 1.25;
    }
    let mut values = anatomy.image.clone();
    let mut mask = vec![0u8; n * n];
    for yi in 0..n {
        for xi in 0..n {
            let i = yi * n + xi;
            if anatomy.foreground[i] == 0 {
                continue;
            }
            let d = ((xi as f64 - cx) * (xi as f64 - cx) + (yi as f64 - cy) * (yi as f64 - cy))
                .sqrt();
            let weight = ((radius + 0.75 - d) / 1.5).clamp(0.0, 1.0);
            if weight > 0.0 {
                values[i] = (values[i] + delta * weight).clamp(0.0, 1.0);
            }
            // weight > 0.5 is the disk d < radius
            if weight > 0.5 {
                mask[i] = 1;
            }
        }
    }
    (values, mask)
}

fn structural_lesion(
    anatomy: &Anatomy,
    rng: &mut Prng,
    band_lo: f64,
    band_hi: f64,
    fg_area: f64,
) -> (Vec<f64>, Vec<u8>) {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    let n = IMAGE_SIZE;
    let vent = &anatomy.vents[rng.random_range(0..2usize)];
    // scale the warp with the requested area band
    let band_mid = 0.5 * (band_lo + band_hi);
    let target_area = uniform(rng, band_lo, band_hi) * fg_area;
    let strength = uniform(rng, 0.25, 0.75).min_f(0.2 + 2.0 * band_mid * 10.0);
    let reach = (target_area / core::f64::consts::PI).sqrt() * uniform(rng, 1.7, 2.4)
        + vent.a.max_f(vent.b);
    // keep the warp inside the brain
    let to_edge = (1.0 - anatomy.inner.q(vent.cx, vent.cy))
        * anatomy.inner.a.min_f(anatomy.inner.b)
        - 1.5;
    let reach = reach.min_f(to_edge.max_f(3.0));

    let mut values = anatomy.image.clone();
    let mut mask = vec![0u8; n * n];
    for yi in 0..n {
        for xi in 0..n {
            let i = yi * n + xi;
            if anatomy.foreground[i] == 0 {
                continue;
            }
            let dx = xi as f64 - vent.cx;
            let dy = yi as f64 - vent.cy;
            let d = (dx * dx + dy * dy).sqrt();
            if d >= reach {
                continue;
            }
            // pull samples toward the ventricle center so it appears enlarged
            let shrink = 1.0 - strength * (1.0 - d / reach) * (1.0 - d / reach);
            let sx = vent.cx + dx * shrink;
            let sy = vent.cy + dy * shrink;
            let v = bilinear(&anatomy.image, n, sx, sy);
            values[i] = v.clamp(0.0, 1.0);
            // affected pixels: where the warp materially changed the image
            if (values[i] - anatomy.image[i]).abs() > 0.08 {
                mask[i] = 1;
            }
        }
    }
    (values, mask)
}

fn bilinear(values: &[f64], n: usize, x: f64, y: f64) -> f64 {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    let clampi = |v: f64| -> usize { (v.max_f(0.0) as usize).min(n - 1) };
    let x0 = clampi(x.floor());
    let y0 = clampi(y.floor());
    let x1 = (x0 + 1).min(n - 1);
    let y1 = (y0 + 1).min(n - 1);
    let wx = (x - x0 as f64).clamp(0.0, 1.0);
    let wy = (y - y0 as f64).clamp(0.0, 1.0);
    values[y0 * n + x0] * (1.0 - wx) * (1.0 - wy)
        + values[y0 * n + x1] * wx * (1.0 - wy)
        + values[y1 * n + x0] * (1.0 - wx) * wy
        + values[y1 * n + x1] * wx * wy
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub size_class: SizeClass,
    pub lesion_type: Option<LesionType>,
}

/// Seed-complete description of a corpus; regenerating from it reproduces
/// every image bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub base_seed: u64,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test_normal: Vec<ManifestEntry>,
    pub test_anomalous: Vec<ManifestEntry>,
}

/// Default split sizes: 512 / 64 / 64 / 96.
pub const DEFAULT_SPLITS: (usize, usize, usize, usize) = (512, 64, 64, 96);

/// Builds the split manifest with disjoint seed ranges per split. Training
/// and validation hold normals only. Anomalous entries cycle through the
/// three size classes and, within each class, the three lesion types.
pub fn make_splits(
    n_train: usize,
    n_val: usize,
    n_test_normal: usize,
    n_test_anomalous: usize,
    base_seed: u64,
) -> Result<CorpusManifest> {
    const RANGE: u64 = 100_000;
    if n_train == 0 || n_val == 0 || n_test_normal == 0 || n_test_anomalous == 0 {
        return Err(Error::InvalidArgument("every split needs at least one sample"));
    }
    if [n_train, n_val, n_test_normal, n_test_anomalous]
        .iter()
        .any(|&n| n as u64 >= RANGE)
    {
        return Err(Error::InvalidArgument("split sizes must stay below the seed range"));
    }
    let normal_split = |prefix: &str, offset: u64, count: usize| -> Vec<ManifestEntry> {
        (0..count)
            .map(|i| ManifestEntry {
                id: format!("{prefix}_{i:04}"),
                seed: base_seed + offset + i as u64,
                size_class: SizeClass::None,
                lesion_type: None,
            })
            .collect()
    };
    let classes = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];
    let types = [LesionType::Hyper, LesionType::Hypo, LesionType::Structural];
    let anomalous: Vec<ManifestEntry> = (0..n_test_anomalous)
        .map(|i| ManifestEntry {
            id: format!("testa_{i:04}"),
            seed: base_seed + 3 * RANGE + i as u64,
            size_class: classes[i % 3],
            lesion_type: Some(types[(i / 3) % 3]),
        })
        .collect();
    Ok(CorpusManifest {
        base_seed,
        train: normal_split("train", 0, n_train),
        val: normal_split("val", RANGE, n_val),
        test_normal: normal_split("testn", 2 * RANGE, n_test_normal),
        test_anomalous: anomalous,
    })
}

/// Materializes one manifest entry.
pub fn generate(entry: &ManifestEntry) -> Result<PhantomSample> {
    match entry.lesion_type {
        None => Ok(gen_normal(entry.seed)),
        Some(lt) => gen_anomalous(entry.seed, entry.size_class, lt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_bit_identical() {
        let a = gen_normal(42);
        let b = gen_normal(42);
        assert_eq!(a, b);
        let c = gen_anomalous(42, SizeClass::Medium, LesionType::Hyper).unwrap();
        let d = gen_anomalous(42, SizeClass::Medium, LesionType::Hyper).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn intensities_clamped_and_mask_zero_for_normals() {
        let s = gen_normal(7);
        assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.lesion_mask.iter().all(|&m| m == 0));
        assert_eq!(s.size_class, SizeClass::None);
    }

    #[test]
    fn foreground_fraction_sweep() {
        for seed in 0..1000u64 {
            let s = gen_normal(seed);
            let frac = s.image.foreground().iter().filter(|&&f| f > 0).count() as f64
                / (IMAGE_SIZE * IMAGE_SIZE) as f64;
            assert!((0.3..=0.7).contains(&frac), "seed {seed}: fraction {frac}");
        }
    }

    #[test]
    fn lesion_mask_nonempty_and_inside_foreground() {
        for (i, (&class, &lt)) in [SizeClass::Small, SizeClass::Medium, SizeClass::Large]
            .iter()
            .flat_map(|c| {
                [LesionType::Hyper, LesionType::Hypo, LesionType::Structural]
                    .iter()
                    .map(move |t| (c, t))
            })
            .enumerate()
        {
            let s = gen_anomalous(1000 + i as u64, class, lt).unwrap();
            let ones = s.lesion_mask.iter().filter(|&&m| m > 0).count();
            assert!(ones > 0, "class {class:?} type {lt:?}");
            for (i, &m) in s.lesion_mask.iter().enumerate() {
                assert!(m == 0 || s.image.foreground()[i] > 0);
            }
        }
    }

    #[test]
    fn hyper_raises_and_hypo_lowers_masked_intensity() {
        for seed in [3u64, 9, 27] {
            let normal = gen_normal(seed);
            let hyper = gen_anomalous(seed, SizeClass::Medium, LesionType::Hyper).unwrap();
            let mean = |s: &PhantomSample, mask: &[u8]| {
                let (mut sum, mut n) = (0.0, 0usize);
                for (i, &m) in mask.iter().enumerate() {
                    if m > 0 {
                        sum += s.image.values()[i];
                        n += 1;
                    }
                }
                sum / n as f64
            };
            assert!(mean(&hyper, &hyper.lesion_mask) > mean(&normal, &hyper.lesion_mask));
            let hypo = gen_anomalous(seed, SizeClass::Medium, LesionType::Hypo).unwrap();
            assert!(mean(&hypo, &hypo.lesion_mask) < mean(&normal, &hypo.lesion_mask));
        }
    }

    #[test]
    fn measured_areas_match_size_classes() {
        for seed in 0..24u64 {
            for (class, lt) in [
                (SizeClass::Small, LesionType::Hyper),
                (SizeClass::Medium, LesionType::Hypo),
                (SizeClass::Large, LesionType::Hyper),
                (SizeClass::Medium, LesionType::Structural),
            ] {
                let s = gen_anomalous(4000 + seed, class, lt).unwrap();
                let fg = s.image.foreground().iter().filter(|&&f| f > 0).count() as f64;
                let area = s.lesion_mask.iter().filter(|&&m| m > 0).count() as f64 / fg;
                assert_eq!(
                    SizeClass::of_area_fraction(area),
                    class,
                    "seed {seed} class {class:?} type {lt:?} area {area}"
                );
            }
        }
    }

    #[test]
    fn splits_disjoint_and_normal_only_training() {
        let m = make_splits(512, 64, 64, 96, 1234).unwrap();
        assert_eq!(m.train.len(), 512);
        assert_eq!(m.val.len(), 64);
        assert_eq!(m.test_normal.len(), 64);
        assert_eq!(m.test_anomalous.len(), 96);
        assert!(m.train.iter().chain(&m.val).all(|e| e.lesion_type.is_none()));
        let mut seeds: Vec<u64> = m
            .train
            .iter()
            .chain(&m.val)
            .chain(&m.test_normal)
            .chain(&m.test_anomalous)
            .map(|e| e.seed)
            .collect();
        seeds.sort_unstable();
        let before = seeds.len();
        seeds.dedup();
        assert_eq!(seeds.len(), before);
        // 32 of each size class among the 96 anomalous entries
        for class in [SizeClass::Small, SizeClass::Medium, SizeClass::Large] {
            let n = m.test_anomalous.iter().filter(|e| e.size_class == class).count();
            assert_eq!(n, 32);
        }
        assert!(make_splits(0, 1, 1, 1, 0).is_err());
    }
}
