//! Ground-truth helpers: 40%-of-peak connected thresholding on PET and
//! iterative thresholding of the lung fields on CT.

use std::collections::VecDeque;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of the peak SUV used as the lower bound of a tumor region.
pub const PEAK_FRACTION: f32 = 0.4;
pub const THRESHOLD_TOLERANCE: f32 = 1e-4;
pub const MAX_THRESHOLD_ITERATIONS: usize = 100;
/// Used when the iterative threshold cannot be computed.
pub const FALLBACK_LUNG_THRESHOLD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct TumorMask {
    pub mask: Vec<bool>,
    pub peak: f32,
    pub peak_point: (usize, usize),
    pub threshold: f32,
    /// Seed had no uptake; the mask is empty.
    pub empty: bool,
    /// Every pixel of the region has the same value (e.g. a uniform image).
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LungMask {
    pub mask: Vec<bool>,
    pub threshold: f32,
    pub iterations: usize,
    /// True when the iteration failed and [`FALLBACK_LUNG_THRESHOLD`] was used.
    pub fallback: bool,
}

fn dims2(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::dim(op, format!("expected an [h, w] image, got {s:?}"))),
    }
}

/// 4-connected flood fill from `start` over pixels accepted by `keep`.
fn flood(h: usize, w: usize, start: usize, keep: impl Fn(usize) -> bool) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    if !keep(start) {
        return mask;
    }
    let mut queue = VecDeque::from([start]);
    mask[start] = true;
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !mask[j] && keep(j) {
                mask[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
    }
    mask
}

/// Climbs from `seed` to a local SUV maximum, then grows the 4-connected
/// region with `0.4 * peak <= SUV <= peak` around that maximum.
pub fn connected_threshold_tumor(pet_suv: &Tensor, seed: (usize, usize)) -> Result<TumorMask> {
    let (h, w) = dims2(pet_suv, "connected_threshold_tumor")?;
    if seed.0 >= h || seed.1 >= w {
        return Err(Error::Contract(format!(
            "seed {seed:?} outside the {h}x{w} image"
        )));
    }
    let v = pet_suv.data();
    let mut at = seed.0 * w + seed.1;
    if !(v[at] > 0.0) {
        warn!("tumor seed {seed:?} lies in a zero-uptake region; mask is empty");
        return Ok(TumorMask {
            mask: vec![false; h * w],
            peak: v[at],
            peak_point: seed,
            threshold: 0.0,
            empty: true,
            degenerate: false,
        });
    }
    loop {
        let (r, c) = ((at / w) as isize, (at % w) as isize);
        let mut best = at;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if v[j] > v[best] {
                    best = j;
                }
            }
        }
        if best == at {
            break;
        }
        at = best;
    }
    let peak = v[at];
    let threshold = PEAK_FRACTION * peak;
    let mask = flood(h, w, at, |j| v[j] >= threshold && v[j] <= peak);
    let degenerate = mask.iter().zip(v).all(|(&m, &x)| !m || x == peak);
    if degenerate {
        warn!("connected threshold region around {:?} is flat", (at / w, at % w));
    }
    Ok(TumorMask {
        mask,
        peak,
        peak_point: (at / w, at % w),
        threshold,
        empty: false,
        degenerate,
    })
}

/// Connected thresholding seeded at the hottest pixel of the slice, without
/// any anatomical knowledge. Physiological uptake hotter than the tumors
/// captures the seed.
pub fn blind_pet_oracle(pet_suv: &Tensor) -> Result<TumorMask> {
    let (_, w) = dims2(pet_suv, "blind_pet_oracle")?;
    let v = pet_suv.data();
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    connected_threshold_tumor(pet_suv, (best / w, best % w))
}

/// Iterative optimal threshold: `t <- (mean(<= t) + mean(> t)) / 2` from the
/// image mean until it moves less than the tolerance. Returns `None` when a
/// class runs empty or the iteration does not settle.
fn iterative_threshold(values: &[f32]) -> (Option<f32>, usize) {
    let mut t = (values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64) as f32;
    for it in 1..=MAX_THRESHOLD_ITERATIONS {
        let (mut lo, mut nlo, mut hi, mut nhi) = (0.0f64, 0usize, 0.0f64, 0usize);
        for &v in values {
            if v <= t {
                lo += v as f64;
                nlo += 1;
            } else {
                hi += v as f64;
                nhi += 1;
            }
        }
        if nlo == 0 || nhi == 0 {
            return (None, it);
        }
        let next = ((lo / nlo as f64 + hi / nhi as f64) / 2.0) as f32;
        if (next - t).abs() < THRESHOLD_TOLERANCE {
            return (Some(next), it);
        }
        t = next;
    }
    (None, MAX_THRESHOLD_ITERATIONS)
}

/// Lung fields of a CT slice in `[0, 1]`: low-intensity 4-connected
/// components that do not touch the image border (the air around the body
/// does). A single component spanning both halves of the image is split at
/// its narrowest column so the two fields stay apart.
pub fn adaptive_threshold_lungs(ct: &Tensor) -> Result<LungMask> {
    let (h, w) = dims2(ct, "adaptive_threshold_lungs")?;
    let v = ct.data();
    let (found, iterations) = iterative_threshold(v);
    let (threshold, fallback) = match found {
        Some(t) => (t, false),
        None => {
            warn!(
                "iterative lung threshold did not converge; falling back to {FALLBACK_LUNG_THRESHOLD}"
            );
            (FALLBACK_LUNG_THRESHOLD, true)
        }
    };
    let low: Vec<bool> = v.iter().map(|&x| x <= threshold).collect();
    let min_size = ((h * w) as f32 * 0.002).ceil().max(4.0) as usize;
    let mut seen = vec![false; h * w];
    let mut components: Vec<Vec<bool>> = Vec::new();
    for start in 0..h * w {
        if seen[start] || !low[start] {
            continue;
        }
        let comp = flood(h, w, start, |j| low[j]);
        let mut size = 0;
        let mut touches_border = false;
        for (j, _) in comp.iter().enumerate().filter(|(_, &m)| m) {
            seen[j] = true;
            size += 1;
            let (r, c) = (j / w, j % w);
            touches_border |= r == 0 || c == 0 || r + 1 == h || c + 1 == w;
        }
        if !touches_border && size >= min_size {
            components.push(comp);
        }
    }
    if components.len() == 1 {
        split_at_narrowest_column(&mut components[0], h, w);
    }
    let mut mask = vec![false; h * w];
    for comp in &components {
        for (m, &c) in mask.iter_mut().zip(comp) {
            *m |= c;
        }
    }
    Ok(LungMask {
        mask,
        threshold,
        iterations,
        fallback,
    })
}

fn split_at_narrowest_column(comp: &mut [bool], h: usize, w: usize) {
    let counts: Vec<usize> = (0..w)
        .map(|c| (0..h).filter(|&r| comp[r * w + c]).count())
        .collect();
    let cols: Vec<usize> = (0..w).filter(|&c| counts[c] > 0).collect();
    let (Some(&first), Some(&last)) = (cols.first(), cols.last()) else {
        return;
    };
    if !(first < w / 2 && last >= w / 2) {
        return;
    }
    let span = last - first + 1;
    let (lo, hi) = (first + span / 3, last - span / 3);
    if lo > hi {
        return;
    }
    let cut = (lo..=hi).min_by_key(|&c| counts[c]).unwrap();
    for r in 0..h {
        comp[r * w + cut] = false;
    }
}
