//! Fusion-map channels of the co-learning units: per-channel min-max images,
//! per-class histograms of the raw values and ROI contrast.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One raw channel of a unit's fusion map for a single slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMap {
    pub unit: usize,
    pub channel: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Splits batch item 0 of a `[b,h,w,C]` fusion map into its channels.
pub fn channel_maps(fusion: &Tensor, unit: usize) -> Result<Vec<ChannelMap>> {
    let (_, h, w, c) = fusion.dims4()?;
    let item = &fusion.data()[..h * w * c];
    Ok((0..c)
        .map(|ch| ChannelMap {
            unit,
            channel: ch,
            height: h,
            width: w,
            values: item.iter().skip(ch).step_by(c).copied().collect(),
        })
        .collect())
}

/// Full-resolution labels sampled at the centre of each `factor x factor`
/// cell, matching a map downsampled by `factor`.
pub fn labels_at_scale(labels: &[u8], height: usize, width: usize, factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) || labels.len() != height * width {
        return Err(Error::Contract(format!(
            "cannot sample {height}x{width} labels at factor {factor}"
        )));
    }
    let (h, w, half) = (height / factor, width / factor, factor / 2);
    Ok((0..h * w)
        .map(|i| labels[((i / w) * factor + half) * width + (i % w) * factor + half])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalizedChannel {
    pub unit: usize,
    pub channel: usize,
    pub min: f32,
    pub max: f32,
    /// All values equal; the image is uniformly zero.
    pub degenerate: bool,
    #[serde(skip)]
    pub pixels: Vec<u16>,
}

/// Independent min-max normalization of one channel to `0..=65535`.
pub fn normalize_channel(map: &ChannelMap) -> NormalizedChannel {
    let (min, max) = min_max(&map.values);
    let degenerate = !(max > min);
    let pixels = if degenerate {
        vec![0; map.values.len()]
    } else {
        let span = (max - min) as f64;
        map.values
            .iter()
            .map(|&v| (((v - min) as f64 / span) * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect()
    };
    NormalizedChannel {
        unit: map.unit,
        channel: map.channel,
        min,
        max,
        degenerate,
        pixels,
    }
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramRow {
    pub channel: usize,
    pub class: u8,
    pub bin_lo: f32,
    pub bin_hi: f32,
    pub count: usize,
}

/// Histograms of the raw channel values per label class, over `bins` equal
/// bins spanning the channel's range. Every bin is emitted, so the counts of
/// a (channel, class) pair sum to that class's pixel count.
pub fn histograms(map: &ChannelMap, labels: &[u8], num_classes: usize, bins: usize) -> Result<Vec<HistogramRow>> {
    if labels.len() != map.values.len() || bins == 0 {
        return Err(Error::Contract(format!(
            "histogram of {} values against {} labels in {bins} bins",
            map.values.len(),
            labels.len()
        )));
    }
    let (min, max) = min_max(&map.values);
    let (bins, width) = if max > min {
        (bins, (max - min) / bins as f32)
    } else {
        (1, 0.0)
    };
    let mut counts = vec![vec![0usize; bins]; num_classes];
    for (&v, &l) in map.values.iter().zip(labels) {
        let b = if width > 0.0 {
            (((v - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::Data(format!("label {l} outside 0..{}", num_classes - 1)))?[b] += 1;
    }
    let mut rows = Vec::with_capacity(num_classes * bins);
    for (class, per_bin) in counts.iter().enumerate() {
        for (b, &count) in per_bin.iter().enumerate() {
            let lo = min + width * b as f32;
            rows.push(HistogramRow {
                channel: map.channel,
                class: class as u8,
                bin_lo: lo,
                bin_hi: if b + 1 == bins { max } else { lo + width },
                count,
            });
        }
    }
    Ok(rows)
}

pub const HISTOGRAM_HEADER: &str = "channel,class,bin_lo,bin_hi,count";

pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut out = format!("{HISTOGRAM_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{:.6e},{:.6e},{}", r.channel, r.class, r.bin_lo, r.bin_hi, r.count).unwrap();
    }
    out
}

/// Mean absolute value inside the class divided by the mean outside it.
/// `None` when either side is empty or the outside mean is zero.
pub fn roi_contrast(map: &ChannelMap, labels: &[u8], class: u8) -> Option<f64> {
    let (mut sin, mut nin, mut sout, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &l) in map.values.iter().zip(labels) {
        if l == class {
            sin += v.abs() as f64;
            nin += 1;
        } else {
            sout += v.abs() as f64;
            nout += 1;
        }
    }
    if nin == 0 || nout == 0 || sout == 0.0 {
        return None;
    }
    Some((sin / nin as f64) / (sout / nout as f64))
}
