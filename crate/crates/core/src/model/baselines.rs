//! Input preparation shared by the baselines: display-range normalization and
//! uniform pixel intermixing for the fused-input network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SUV at which PET display values saturate.
pub const PET_DISPLAY_MAX_SUV: f32 = 20.0;

/// Share of PET in a pixel-intermixed image; CT gets the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct FusionRatio {
    pet_weight: f32,
}

impl FusionRatio {
    pub fn new(pet_weight: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&pet_weight) {
            return Err(Error::Config(format!(
                "fusion ratio PET weight must lie in [0, 1], got {pet_weight}"
            )));
        }
        Ok(FusionRatio { pet_weight })
    }

    pub fn pet_weight(self) -> f32 {
        self.pet_weight
    }

    pub fn ct_weight(self) -> f32 {
        1.0 - self.pet_weight
    }
}

impl TryFrom<f32> for FusionRatio {
    type Error = Error;

    fn try_from(v: f32) -> Result<Self> {
        FusionRatio::new(v)
    }
}

impl From<FusionRatio> for f32 {
    fn from(r: FusionRatio) -> f32 {
        r.pet_weight
    }
}

/// `(1 - w) * ct + w * pet`, clamped to `[0, 1]`.
pub fn intermix(ct: &Tensor, pet: &Tensor, ratio: FusionRatio) -> Result<Tensor> {
    let (wc, wp) = (ratio.ct_weight(), ratio.pet_weight());
    ct.zip_map(pet, |c, p| (wc * c + wp * p).clamp(0.0, 1.0))
}

/// Min-max normalization of one CT slice to `[0, 1]`. A constant slice maps to 0.
pub fn display_ct(ct: &Tensor) -> Tensor {
    let lo = ct.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = ct.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Tensor::zeros(ct.shape().to_vec());
    }
    ct.map(|v| (v - lo) / range)
}

/// PET SUVs clipped at [`PET_DISPLAY_MAX_SUV`] and scaled to `[0, 1]`.
pub fn display_pet(suv: &Tensor) -> Tensor {
    suv.map(|v| v.clamp(0.0, PET_DISPLAY_MAX_SUV) / PET_DISPLAY_MAX_SUV)
}
