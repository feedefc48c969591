//! On-disk slice bundles.
//!
//! ```text
//! <out>/dataset.json
//! <out>/<study>/study.json
//! <out>/<study>/ct_0000.pgm      16-bit, CT * 65535
//! <out>/<study>/pet_0000.pgm     16-bit, SUV * 1000
//! <out>/<study>/labels_0000.pgm  8-bit class indices
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelMap, PhantomSpec, Study, StudySlice, TumorSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::io::{read_json, read_pgm16, read_pgm8, write_json, write_pgm16, write_pgm8};
use crate::tensor::Tensor;

pub const CT_SCALE: f32 = 65535.0;
pub const PET_SCALE: f32 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub name: String,
    pub seed: u64,
    pub slice_count: usize,
    pub slice_indices: Vec<usize>,
    pub tumors: Vec<TumorSpec>,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub studies: Vec<String>,
    pub seeds: Vec<u64>,
    pub slice_counts: Vec<usize>,
    pub total_slices: usize,
    pub spec: PhantomSpec,
}

fn quantize(v: f32, scale: f32) -> u16 {
    (v * scale).round().clamp(0.0, u16::MAX as f32) as u16
}

pub fn write_study(dir: &Path, study: &Study) -> Result<()> {
    for s in &study.slices {
        let (h, w) = (s.labels.height(), s.labels.width());
        let ct: Vec<u16> = s.ct.data().iter().map(|&v| quantize(v, CT_SCALE)).collect();
        let pet: Vec<u16> = s.pet_suv.data().iter().map(|&v| quantize(v, PET_SCALE)).collect();
        write_pgm16(&dir.join(format!("ct_{:04}.pgm", s.index)), w, h, &ct)?;
        write_pgm16(&dir.join(format!("pet_{:04}.pgm", s.index)), w, h, &pet)?;
        write_pgm8(&dir.join(format!("labels_{:04}.pgm", s.index)), w, h, s.labels.as_slice())?;
    }
    let manifest = StudyManifest {
        name: study.name.clone(),
        seed: study.spec.seed,
        slice_count: study.slices.len(),
        slice_indices: study.slices.iter().map(|s| s.index).collect(),
        tumors: study.tumors.clone(),
        spec: study.spec.clone(),
    };
    write_json(&dir.join("study.json"), &manifest)
}

pub fn write_dataset(out: &Path, base: &PhantomSpec, studies: &[Study]) -> Result<DatasetManifest> {
    for s in studies {
        write_study(&out.join(&s.name), s)?;
    }
    let manifest = DatasetManifest {
        studies: studies.iter().map(|s| s.name.clone()).collect(),
        seeds: studies.iter().map(|s| s.spec.seed).collect(),
        slice_counts: studies.iter().map(|s| s.slices.len()).collect(),
        total_slices: studies.iter().map(|s| s.slices.len()).sum(),
        spec: base.clone(),
    };
    write_json(&out.join("dataset.json"), &manifest)?;
    Ok(manifest)
}

fn check_extent(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::format(
            path,
            format!("image is {}x{}, expected {}x{}", got.1, got.0, want.1, want.0),
        ));
    }
    Ok(())
}

pub fn read_slice(dir: &Path, index: usize) -> Result<StudySlice> {
    let ct_path = dir.join(format!("ct_{index:04}.pgm"));
    let pet_path = dir.join(format!("pet_{index:04}.pgm"));
    let lab_path = dir.join(format!("labels_{index:04}.pgm"));
    let (w, h, ct) = read_pgm16(&ct_path)?;
    let (pw, ph, pet) = read_pgm16(&pet_path)?;
    check_extent(&pet_path, (ph, pw), (h, w))?;
    let (lw, lh, labels) = read_pgm8(&lab_path)?;
    check_extent(&lab_path, (lh, lw), (h, w))?;
    Ok(StudySlice {
        index,
        ct: Tensor::new([h, w], ct.iter().map(|&v| v as f32 / CT_SCALE).collect())?,
        pet_suv: Tensor::new([h, w], pet.iter().map(|&v| v as f32 / PET_SCALE).collect())?,
        labels: LabelMap::new(h, w, labels, NUM_CLASSES)?,
    })
}

pub fn read_study(dir: &Path) -> Result<Study> {
    let manifest: StudyManifest = read_json(&dir.join("study.json"))?;
    if manifest.slice_indices.len() != manifest.slice_count {
        return Err(Error::format(
            dir.join("study.json"),
            "slice_count disagrees with slice_indices",
        ));
    }
    let slices = manifest
        .slice_indices
        .iter()
        .map(|&i| read_slice(dir, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Study {
        name: manifest.name,
        spec: manifest.spec,
        tumors: manifest.tumors,
        slices,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Study>> {
    let manifest: DatasetManifest = read_json(&dir.join("dataset.json"))?;
    manifest
        .studies
        .iter()
        .map(|name| read_study(&dir.join(name)))
        .collect()
}
