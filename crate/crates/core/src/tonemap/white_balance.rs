use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ExposureTag;

/// How learned gain triples are shared across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WbSharing {
    PerFrame,
    PerTag,
    Global,
}

impl std::str::FromStr for WbSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-frame" => Ok(Self::PerFrame),
            "per-tag" => Ok(Self::PerTag),
            "global" => Ok(Self::Global),
            other => Err(Error::input(format!("unknown white balance sharing `{other}`"))),
        }
    }
}

/// Per-frame channel gains `w^(i)`.
///
/// Each frame's gain is `exposure_i * exp(log_gain[group(i)])`, where
/// `exposure_i` is the known relative exposure of the capture (1 when the
/// exposure is learned instead) and the log gains are the learnable part.
/// The group holding the reference frame is frozen at unit gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteBalance {
    log_gains: Vec<f64>,
    group_of_frame: Vec<usize>,
    frozen_group: Option<usize>,
    exposure: Vec<f64>,
}

impl WhiteBalance {
    /// Gains for a frame sequence. `exposure`, when given, supplies the
    /// known relative exposure per frame; otherwise the learned gains must
    /// absorb it and start from unit gain.
    pub fn new(tags: &[ExposureTag], exposure: Option<&[f64]>, sharing: WbSharing, reference: usize) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::input("white balance needs at least one frame"));
        }
        if reference >= tags.len() {
            return Err(Error::input(format!("reference frame {reference} out of range")));
        }
        let exposure = match exposure {
            Some(e) if e.len() != tags.len() => {
                return Err(Error::input("exposure list does not match frame count"));
            }
            Some(e) if e.iter().any(|&s| !(s > 0.0) || !s.is_finite()) => {
                return Err(Error::input("exposure scales must be positive"));
            }
            Some(e) => e.to_vec(),
            None => vec![1.0; tags.len()],
        };
        let group_of_frame: Vec<usize> = match sharing {
            WbSharing::PerFrame => (0..tags.len()).collect(),
            WbSharing::PerTag => tags.iter().map(|t| ExposureTag::ALL.iter().position(|a| a == t).unwrap()).collect(),
            WbSharing::Global => vec![0; tags.len()],
        };
        let groups = group_of_frame.iter().max().unwrap() + 1;
        Ok(Self {
            log_gains: vec![0.0; 3 * groups],
            frozen_group: Some(group_of_frame[reference]),
            group_of_frame,
            exposure,
        })
    }

    /// Explicit per-frame gains with nothing frozen.
    pub fn from_gains(gains: Vec<[f64; 3]>) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::input("white balance needs at least one frame"));
        }
        if gains.iter().flatten().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::input("white balance gains must be positive"));
        }
        Ok(Self {
            log_gains: gains.iter().flatten().map(|g| g.ln()).collect(),
            group_of_frame: (0..gains.len()).collect(),
            frozen_group: None,
            exposure: vec![1.0; gains.len()],
        })
    }

    pub fn frame_count(&self) -> usize {
        self.group_of_frame.len()
    }

    pub fn gain(&self, frame: usize) -> Result<[f64; 3]> {
        let g = *self
            .group_of_frame
            .get(frame)
            .ok_or_else(|| Error::input(format!("frame {frame} has no white balance entry")))?;
        let s = self.exposure[frame];
        Ok(std::array::from_fn(|c| s * self.log_gains[3 * g + c].exp()))
    }

    pub fn log_gains(&self) -> &[f64] {
        &self.log_gains
    }

    pub fn log_gains_mut(&mut self) -> &mut [f64] {
        &mut self.log_gains
    }

    /// Mask over [`Self::log_gains`]; `false` marks frozen entries.
    pub fn trainable_mask(&self) -> Vec<bool> {
        (0..self.log_gains.len()).map(|k| Some(k / 3) != self.frozen_group).collect()
    }

    /// Add `dL/d(log gain)` given `dL/dx * x` for channel `c` of `frame`.
    #[inline]
    pub fn accumulate_grad(&self, frame: usize, c: usize, dx_times_x: f64, grad: &mut [f64]) {
        let g = self.group_of_frame[frame];
        if Some(g) != self.frozen_group {
            grad[3 * g + c] += dx_times_x;
        }
    }

    /// Mean gain over the given frames, used to render at an exposure level.
    pub fn mean_gain(&self, frames: &[usize]) -> Result<[f64; 3]> {
        if frames.is_empty() {
            return Err(Error::input("no frames to average white balance over"));
        }
        let mut acc = [0.0; 3];
        for &f in frames {
            let g = self.gain(f)?;
            for c in 0..3 {
                acc[c] += g[c];
            }
        }
        Ok(acc.map(|v| v / frames.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ExposureTag::*;

    #[test]
    fn reference_group_is_frozen() {
        let tags = [Low, Mid, High, Low, Mid, High];
        let wb = WhiteBalance::new(&tags, None, WbSharing::PerFrame, 1).unwrap();
        let mask = wb.trainable_mask();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 3);
        assert!(!mask[3] && !mask[4] && !mask[5]);
        let mut g = vec![0.0; wb.log_gains().len()];
        wb.accumulate_grad(1, 0, 5.0, &mut g);
        assert_eq!(g[3], 0.0);
        wb.accumulate_grad(2, 0, 5.0, &mut g);
        assert_eq!(g[6], 5.0);
    }

    #[test]
    fn known_exposure_multiplies_gain() {
        let tags = [Low, Mid, High];
        let wb = WhiteBalance::new(&tags, Some(&[0.25, 1.0, 4.0]), WbSharing::Global, 1).unwrap();
        assert_eq!(wb.gain(2).unwrap(), [4.0; 3]);
        assert_eq!(wb.trainable_mask(), vec![false; 3]);
        let per_tag = WhiteBalance::new(&tags, None, WbSharing::PerTag, 1).unwrap();
        assert_eq!(per_tag.log_gains().len(), 9);
        assert!(wb.gain(3).is_err());
    }
}
