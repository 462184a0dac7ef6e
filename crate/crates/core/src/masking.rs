//! Two-view temporal masking.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the two kept subsets of a video relate to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Disjoint views: the first two blocks of one permutation.
    #[default]
    NonOverlapped,
    /// Two independent uniform subsets, which may intersect.
    Overlapped,
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingStrategy::NonOverlapped => "non_overlapped",
            SamplingStrategy::Overlapped => "overlapped",
        })
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_overlapped" => Ok(SamplingStrategy::NonOverlapped),
            "overlapped" => Ok(SamplingStrategy::Overlapped),
            other => Err(Error::arg(format!(
                "unknown sampling strategy {other:?} (expected non_overlapped | overlapped)"
            ))),
        }
    }
}

/// Kept and masked frame indices for both views of one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub view_a: Vec<usize>,
    pub view_b: Vec<usize>,
    pub masked_a: Vec<usize>,
    pub masked_b: Vec<usize>,
    pub num_frames: usize,
    pub keep: usize,
}

impl MaskPlan {
    /// A degenerate plan that keeps every frame in a single view (the
    /// no-mask ablation). Both views and both masked sets are the full range.
    pub fn full(num_frames: usize) -> MaskPlan {
        let all: Vec<usize> = (0..num_frames).collect();
        MaskPlan {
            view_a: all.clone(),
            view_b: all.clone(),
            masked_a: all.clone(),
            masked_b: all,
            num_frames,
            keep: num_frames,
        }
    }
}

/// `floor((1 - ratio) * M)`, the per-view kept frame count.
pub fn keep_count(num_frames: usize, ratio: f64) -> Result<usize> {
    if num_frames == 0 {
        return Err(Error::arg("frame count must be positive"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::arg(format!("masking ratio {ratio} outside [0, 1)")));
    }
    // The epsilon absorbs representation error such as (1 - 0.9) * 10 =
    // 0.9999999999999998, which must count as one frame.
    let keep = ((1.0 - ratio) * num_frames as f64 + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::arg(format!(
            "masking ratio too high for M: ratio {ratio} keeps 0 of {num_frames} frames"
        )));
    }
    Ok(keep.min(num_frames))
}

pub fn make_mask_plan<R: Rng + ?Sized>(
    num_frames: usize,
    ratio: f64,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<MaskPlan> {
    let keep = keep_count(num_frames, ratio)?;
    let (mut view_a, mut view_b) = match strategy {
        SamplingStrategy::NonOverlapped => {
            if 2 * keep > num_frames {
                return Err(Error::arg(format!(
                    "non-overlapped views need 2*keep <= M, got keep {keep} with M {num_frames}"
                )));
            }
            let mut perm: Vec<usize> = (0..num_frames).collect();
            perm.shuffle(rng);
            (perm[..keep].to_vec(), perm[keep..2 * keep].to_vec())
        }
        SamplingStrategy::Overlapped => (
            rand::seq::index::sample(rng, num_frames, keep).into_vec(),
            rand::seq::index::sample(rng, num_frames, keep).into_vec(),
        ),
    };
    view_a.sort_unstable();
    view_b.sort_unstable();
    let masked_a = complement(&view_a, num_frames);
    let masked_b = complement(&view_b, num_frames);
    Ok(MaskPlan {
        view_a,
        view_b,
        masked_a,
        masked_b,
        num_frames,
        keep,
    })
}

fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}
