//! Synthetic thorax PET-CT slices with analytic ground truth.
//!
//! Geometry lives in normalized coordinates: `x` and `y` span `[-1, 1]`
//! across the image (y grows downwards), `z` indexes the axial position of a
//! slice. Tumors are spheres, so neighbouring slices cut them at different
//! radii.

pub mod bundle;
pub mod threshold;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use threshold::{
    adaptive_threshold_lungs, blind_pet_oracle, connected_threshold_tumor, LungMask, TumorMask,
};

pub const OTHER: u8 = 0;
pub const LUNGS: u8 = 1;
pub const MEDIASTINUM: u8 = 2;
pub const TUMOR: u8 = 3;
pub const NUM_CLASSES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["other", "lungs", "mediastinum", "tumors"];

/// Per-pixel class indices of one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{}",
                num_classes - 1
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.labels.contains(&class)
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

/// One registered CT/PET slice pair with its labels. CT is `[h, w]` in
/// `[0, 1]`; PET is `[h, w]` in SUV.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySlice {
    pub index: usize,
    pub ct: Tensor,
    pub pet_suv: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub name: String,
    pub spec: PhantomSpec,
    /// Tumors actually rendered (sampled or taken from the spec).
    pub tumors: Vec<TumorSpec>,
    pub slices: Vec<StudySlice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl Ellipse {
    /// `(dx/rx)^2 + (dy/ry)^2`: below 1 inside.
    fn level(&self, x: f32, y: f32) -> f32 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        self.level(x, y) <= 1.0
    }

    /// True when the whole disc of radius `r` around `(x, y)` lies inside.
    fn contains_disc(&self, x: f32, y: f32, r: f32) -> bool {
        self.rx > r
            && self.ry > r
            && Ellipse {
                rx: self.rx - r,
                ry: self.ry - r,
                ..*self
            }
            .contains(x, y)
    }

    fn shifted(&self, dx: f32, dy: f32, scale: f32) -> Ellipse {
        Ellipse {
            cx: self.cx + dx,
            cy: self.cy + dy,
            rx: self.rx * scale,
            ry: self.ry * scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumorSpec {
    /// `[x, y, z]`.
    pub center: [f32; 3],
    pub radius: f32,
    pub peak_suv: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `[h, w]`.
    pub image_size: [usize; 2],
    pub slices_per_study: usize,
    pub slice_spacing: f32,
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
    pub mediastinum: Ellipse,
    pub heart: Ellipse,
    /// Range of the cardiac peak SUV.
    pub heart_suv: [f32; 2],
    /// Inclusive range of the number of sampled tumors.
    pub tumor_count: [usize; 2],
    pub tumor_radius: [f32; 2],
    pub tumor_peak_suv: [f32; 2],
    /// Fixed tumors; when present they replace random sampling.
    pub tumors: Option<Vec<TumorSpec>>,
    /// Maximum random shift of the anatomy per study.
    pub jitter: f32,
    pub ct_sigma: f32,
    pub pet_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: [64, 64],
            slices_per_study: 3,
            slice_spacing: 0.06,
            body: Ellipse {
                cx: 0.0,
                cy: 0.0,
                rx: 0.92,
                ry: 0.8,
            },
            lungs: [
                Ellipse {
                    cx: -0.44,
                    cy: -0.02,
                    rx: 0.28,
                    ry: 0.5,
                },
                Ellipse {
                    cx: 0.44,
                    cy: -0.02,
                    rx: 0.28,
                    ry: 0.5,
                },
            ],
            mediastinum: Ellipse {
                cx: 0.0,
                cy: 0.05,
                rx: 0.16,
                ry: 0.55,
            },
            heart: Ellipse {
                cx: 0.1,
                cy: 0.3,
                rx: 0.2,
                ry: 0.2,
            },
            heart_suv: [8.0, 14.0],
            tumor_count: [1, 7],
            tumor_radius: [0.07, 0.13],
            tumor_peak_suv: [5.0, 20.0],
            tumors: None,
            jitter: 0.04,
            ct_sigma: 0.02,
            pet_sigma: 0.15,
            seed: 0,
        }
    }
}

// Tissue values.
const CT_AIR: f32 = 0.0;
const CT_BODY: f32 = 0.45;
const CT_LUNG: f32 = 0.08;
const CT_MEDIASTINUM: f32 = 0.75;
const CT_HEART: f32 = 0.55;
const CT_TUMOR: f32 = 0.6;
const PET_BODY: f32 = 1.0;
const PET_LUNG: f32 = 0.5;
const PET_MEDIASTINUM: f32 = 1.5;

/// Minimum gap between a tumor and the heart or another tumor.
const TUMOR_GAP: f32 = 0.05;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Spec(format!("image size {h}x{w} is too small")));
        }
        if self.slices_per_study == 0 {
            return Err(Error::Spec("at least one slice per study is required".into()));
        }
        if !(self.ct_sigma >= 0.0 && self.pet_sigma >= 0.0) {
            return Err(Error::Spec("noise levels must be non-negative".into()));
        }
        let [lo, hi] = self.tumor_count;
        if lo < 1 || hi > 7 || lo > hi {
            return Err(Error::Spec(format!(
                "tumor count range {lo}..={hi} must lie within 1..=7"
            )));
        }
        let [plo, phi] = self.tumor_peak_suv;
        if !(5.0..=20.0).contains(&plo) || !(5.0..=20.0).contains(&phi) || plo > phi {
            return Err(Error::Spec(format!(
                "tumor peak SUV range {plo}..{phi} must lie within [5, 20]"
            )));
        }
        let [rlo, rhi] = self.tumor_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Spec("tumor radius range must be positive".into()));
        }
        if !(self.heart_suv[0] > 0.0 && self.heart_suv[0] <= self.heart_suv[1]) {
            return Err(Error::Spec("heart SUV range must be positive".into()));
        }
        if let Some(tumors) = &self.tumors {
            if tumors.is_empty() || tumors.len() > 7 {
                return Err(Error::Spec(format!(
                    "{} fixed tumors given; 1 to 7 are allowed",
                    tumors.len()
                )));
            }
            for t in tumors {
                let [x, y, _] = t.center;
                if !(t.radius > 0.0) || !(5.0..=20.0).contains(&t.peak_suv) {
                    return Err(Error::Spec(format!(
                        "tumor at ({x}, {y}) needs a positive radius and a peak SUV in [5, 20]"
                    )));
                }
                if !self.body.contains_disc(x, y, t.radius) {
                    return Err(Error::Spec(format!(
                        "tumor at ({x}, {y}) with radius {} is not inside the body",
                        t.radius
                    )));
                }
            }
        }
        Ok(())
    }

    /// Axial positions of the candidate slices, centred on 0.
    fn slice_positions(&self) -> Vec<f32> {
        let n = self.slices_per_study;
        (0..n)
            .map(|j| (j as f32 - (n - 1) as f32 / 2.0) * self.slice_spacing)
            .collect()
    }
}

/// Study-specific anatomy after jitter.
struct Anatomy {
    body: Ellipse,
    lungs: [Ellipse; 2],
    mediastinum: Ellipse,
    heart: Ellipse,
    heart_suv: f32,
}

impl Anatomy {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Anatomy {
        let j = spec.jitter;
        let mut off = || if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
        let (dx, dy) = (off(), off());
        let scale = 1.0 + off() * 0.5;
        let (hx, hy) = (off(), off());
        let [slo, shi] = spec.heart_suv;
        Anatomy {
            body: spec.body.shifted(dx, dy, 1.0),
            lungs: spec.lungs.map(|l| l.shifted(dx, dy, scale)),
            mediastinum: spec.mediastinum.shifted(dx, dy, 1.0),
            heart: spec.heart.shifted(dx + hx, dy + hy, 1.0),
            heart_suv: if shi > slo { rng.gen_range(slo..=shi) } else { slo },
        }
    }

    /// Cross-sections shrink away from `z = 0`.
    fn taper(z: f32) -> f32 {
        (1.0 - 0.8 * z.abs()).max(0.2)
    }

    fn at(&self, z: f32) -> Anatomy {
        let t = Anatomy::taper(z);
        Anatomy {
            body: self.body,
            lungs: self.lungs.map(|l| Ellipse {
                ry: l.ry * t,
                ..l
            }),
            mediastinum: self.mediastinum,
            heart: self.heart.shifted(0.0, 0.0, t),
            heart_suv: self.heart_suv,
        }
    }

    fn region_of(&self, x: f32, y: f32) -> Option<u8> {
        if self.heart.contains(x, y) {
            None
        } else if self.mediastinum.contains(x, y) {
            Some(MEDIASTINUM)
        } else if self.lungs.iter().any(|l| l.contains(x, y)) {
            Some(LUNGS)
        } else {
            None
        }
    }
}

fn pixel_center(i: usize, n: usize) -> f32 {
    (i as f32 + 0.5) / n as f32 * 2.0 - 1.0
}

/// Normalized coordinate back to the nearest pixel index.
pub fn to_pixel(v: f32, n: usize) -> usize {
    let p = ((v + 1.0) / 2.0 * n as f32 - 0.5).round();
    p.clamp(0.0, (n - 1) as f32) as usize
}

fn sample_tumors(spec: &PhantomSpec, anatomy: &Anatomy, rng: &mut ChaCha8Rng) -> Result<Vec<TumorSpec>> {
    let [lo, hi] = spec.tumor_count;
    let count = rng.gen_range(lo..=hi);
    let [rlo, rhi] = spec.tumor_radius;
    let [plo, phi] = spec.tumor_peak_suv;
    let zmax = spec.slice_spacing * (spec.slices_per_study as f32 - 1.0) / 2.0;
    let mut tumors: Vec<TumorSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while tumors.len() < count {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::Spec(format!(
                "could not place {count} non-overlapping tumors"
            )));
        }
        let radius = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
        let host = *[&anatomy.lungs[0], &anatomy.lungs[1], &anatomy.mediastinum]
            .choose(rng)
            .unwrap();
        let x = rng.gen_range(host.cx - host.rx..=host.cx + host.rx);
        let y = rng.gen_range(host.cy - host.ry..=host.cy + host.ry);
        if !host.contains(x, y) || anatomy.region_of(x, y).is_none() {
            continue;
        }
        if !anatomy.body.contains_disc(x, y, radius + TUMOR_GAP) {
            continue;
        }
        // Keep clear of the (largest) heart cross-section.
        let h = anatomy.heart;
        let clear = Ellipse {
            rx: h.rx + radius + TUMOR_GAP,
            ry: h.ry + radius + TUMOR_GAP,
            ..h
        };
        if clear.contains(x, y) {
            continue;
        }
        let overlaps = tumors.iter().any(|t| {
            let d = ((t.center[0] - x).powi(2) + (t.center[1] - y).powi(2)).sqrt();
            d < t.radius + radius + TUMOR_GAP
        });
        if overlaps {
            continue;
        }
        let z = if zmax > 0.0 { rng.gen_range(-zmax..=zmax) * 0.5 } else { 0.0 };
        let peak_suv = if phi > plo { rng.gen_range(plo..=phi) } else { plo };
        tumors.push(TumorSpec {
            center: [x, y, z],
            radius,
            peak_suv,
        });
    }
    Ok(tumors)
}

fn render_slice(
    spec: &PhantomSpec,
    anatomy: &Anatomy,
    tumors: &[TumorSpec],
    z: f32,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StudySlice> {
    let [h, w] = spec.image_size;
    let a = anatomy.at(z);
    let mut ct = vec![0.0f32; h * w];
    let mut pet = vec![0.0f32; h * w];
    let mut labels = vec![OTHER; h * w];
    for row in 0..h {
        let y = pixel_center(row, h);
        for col in 0..w {
            let x = pixel_center(col, w);
            let i = row * w + col;
            let (mut c, mut p, mut l) = (CT_AIR, 0.0, OTHER);
            if a.body.contains(x, y) {
                (c, p) = (CT_BODY, PET_BODY);
                if a.lungs.iter().any(|e| e.contains(x, y)) {
                    (c, p, l) = (CT_LUNG, PET_LUNG, LUNGS);
                }
                if a.mediastinum.contains(x, y) {
                    (c, p, l) = (CT_MEDIASTINUM, PET_MEDIASTINUM, MEDIASTINUM);
                }
                let hl = a.heart.level(x, y);
                if hl <= 1.0 {
                    (c, p, l) = (CT_HEART, a.heart_suv * (1.0 - 0.3 * hl), OTHER);
                }
                for t in tumors {
                    let d2 = (x - t.center[0]).powi(2)
                        + (y - t.center[1]).powi(2)
                        + (z - t.center[2]).powi(2);
                    let r2 = t.radius * t.radius;
                    if d2 <= r2 {
                        (c, p, l) = (CT_TUMOR, t.peak_suv * (1.0 - 0.5 * d2 / r2), TUMOR);
                    }
                }
            }
            ct[i] = c;
            pet[i] = p;
            labels[i] = l;
        }
    }
    if spec.ct_sigma > 0.0 {
        let n = Normal::new(0.0, spec.ct_sigma).expect("valid sigma");
        for v in &mut ct {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if spec.pet_sigma > 0.0 {
        let n = Normal::new(0.0, spec.pet_sigma).expect("valid sigma");
        for v in &mut pet {
            *v = (*v + n.sample(rng)).max(0.0);
        }
    }
    Ok(StudySlice {
        index,
        ct: Tensor::new([h, w], ct)?,
        pet_suv: Tensor::new([h, w], pet)?,
        labels: LabelMap::new(h, w, labels, NUM_CLASSES)?,
    })
}

/// Renders one study. Slices that miss any of the three ROI classes are dropped.
pub fn generate_study(spec: &PhantomSpec) -> Result<Study> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anatomy = Anatomy::sample(spec, &mut rng);
    let tumors = match &spec.tumors {
        Some(t) => t.clone(),
        None => sample_tumors(spec, &anatomy, &mut rng)?,
    };
    let mut slices = Vec::new();
    for (j, z) in spec.slice_positions().into_iter().enumerate() {
        let s = render_slice(spec, &anatomy, &tumors, z, j, &mut rng)?;
        if [LUNGS, MEDIASTINUM, TUMOR].iter().all(|&c| s.labels.contains(c)) {
            slices.push(s);
        }
    }
    Ok(Study {
        name: format!("study_{:016x}", spec.seed),
        spec: spec.clone(),
        tumors,
        slices,
    })
}

/// `count` studies whose seeds are drawn from `base.seed`. Studies that end
/// up with no usable slice are replaced by the next seed in the stream.
pub fn generate_dataset(base: &PhantomSpec, count: usize) -> Result<Vec<Study>> {
    base.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(base.seed);
    let mut studies = Vec::with_capacity(count);
    let mut tries = 0;
    while studies.len() < count {
        tries += 1;
        if tries > 10 * count + 10 {
            return Err(Error::Spec(
                "phantom spec rarely yields slices containing every ROI".into(),
            ));
        }
        let spec = PhantomSpec {
            seed: seeds.gen(),
            ..base.clone()
        };
        let mut study = generate_study(&spec)?;
        if !study.slices.is_empty() {
            study.name = format!("study_{:03}", studies.len());
            studies.push(study);
        }
    }
    Ok(studies)
}

/// `raw * dose_coefficient`.
pub fn suv_normalize(raw_pet: &Tensor, dose_coefficient: f32) -> Result<Tensor> {
    if !(dose_coefficient > 0.0 && dose_coefficient.is_finite()) {
        return Err(Error::Data(format!(
            "dose coefficient must be positive, got {dose_coefficient}"
        )));
    }
    Ok(raw_pet.map(|v| v * dose_coefficient))
}

/// Study-level folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles study indices `0..n` with `seed` and deals them into `k`
/// contiguous test folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "cannot split {n} studies into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut test = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}
