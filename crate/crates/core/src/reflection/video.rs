//! Execution videos as ordered frame references plus per-step frame boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FRAME_BUDGET: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VideoError {
    #[error("video has no frames")]
    Empty,
    #[error("downsampling target must be at least 2, got {0}")]
    TargetTooSmall(usize),
    #[error("invalid step boundaries: {0}")]
    Boundaries(String),
}

/// Frames `first..=last` cover plan step `step`. Serialized as `[step, first, last]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, usize)", into = "(usize, usize, usize)")]
pub struct StepBoundary {
    pub step: usize,
    pub first: usize,
    pub last: usize,
}

impl From<(usize, usize, usize)> for StepBoundary {
    fn from((step, first, last): (usize, usize, usize)) -> Self {
        Self { step, first, last }
    }
}

impl From<StepBoundary> for (usize, usize, usize) {
    fn from(b: StepBoundary) -> Self {
        (b.step, b.first, b.last)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VideoRef {
    pub frames: Vec<String>,
    pub step_boundaries: Vec<StepBoundary>,
}

impl VideoRef {
    pub fn new(frames: Vec<String>, step_boundaries: Vec<StepBoundary>) -> Self {
        Self { frames, step_boundaries }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn executed_steps(&self) -> usize {
        self.step_boundaries.len()
    }

    /// Boundaries as an executor must report them: steps `0..m` in order,
    /// within the frame list and non-overlapping.
    pub fn validate(&self) -> Result<(), VideoError> {
        let mut prev_last: Option<usize> = None;
        for (i, b) in self.step_boundaries.iter().enumerate() {
            let fail = |msg: String| Err(VideoError::Boundaries(msg));
            if b.step != i {
                return fail(format!("boundary {i} names step {}", b.step));
            }
            if b.first > b.last {
                return fail(format!("step {i} starts at frame {} after it ends at {}", b.first, b.last));
            }
            if b.last >= self.frames.len() {
                return fail(format!("step {i} ends at frame {} of {}", b.last, self.frames.len()));
            }
            if let Some(p) = prev_last {
                if b.first <= p {
                    return fail(format!("step {i} overlaps the previous step"));
                }
            }
            prev_last = Some(b.last);
        }
        Ok(())
    }

    /// Frames `first..=last`, with boundaries clipped and rebased to the window.
    pub fn window(&self, first: usize, last: usize) -> VideoRef {
        let last = last.min(self.frames.len().saturating_sub(1));
        if self.frames.is_empty() || first > last {
            return VideoRef::default();
        }
        let frames = self.frames[first..=last].to_vec();
        let step_boundaries = self
            .step_boundaries
            .iter()
            .filter(|b| b.last >= first && b.first <= last)
            .map(|b| StepBoundary {
                step: b.step,
                first: b.first.max(first) - first,
                last: b.last.min(last) - first,
            })
            .collect();
        VideoRef { frames, step_boundaries }
    }
}

/// Indices kept when sampling `len` frames down to `target`:
/// `round(i * (len - 1) / (target - 1))` for `i in 0..target`, or all frames
/// when there are no more than `target`.
pub fn sample_indices(len: usize, target: usize) -> Vec<usize> {
    if len <= target {
        return (0..len).collect();
    }
    let span = (len - 1) as u128;
    let steps = (target - 1) as u128;
    (0..target as u128)
        // round-half-up in integer arithmetic
        .map(|i| ((2 * i * span + steps) / (2 * steps)) as usize)
        .collect()
}

/// Uniformly keeps `min(target, len)` frames, first and last included.
/// Step boundaries move to the nearest kept frame, so they stay ordered but
/// may share a frame when a step is shorter than the sampling stride.
pub fn downsample(video: &VideoRef, target: usize) -> Result<VideoRef, VideoError> {
    if target < 2 {
        return Err(VideoError::TargetTooSmall(target));
    }
    if video.frames.is_empty() {
        return Err(VideoError::Empty);
    }
    if video.frames.len() <= target {
        return Ok(video.clone());
    }
    let kept = sample_indices(video.frames.len(), target);
    let nearest = |frame: usize| -> usize {
        match kept.binary_search(&frame) {
            Ok(pos) => pos,
            Err(0) => 0,
            Err(pos) if pos >= kept.len() => kept.len() - 1,
            Err(pos) => {
                if frame - kept[pos - 1] <= kept[pos] - frame {
                    pos - 1
                } else {
                    pos
                }
            }
        }
    };
    let frames = kept.iter().map(|&i| video.frames[i].clone()).collect();
    let step_boundaries = video
        .step_boundaries
        .iter()
        .map(|b| StepBoundary {
            step: b.step,
            first: nearest(b.first),
            last: nearest(b.last),
        })
        .collect();
    Ok(VideoRef { frames, step_boundaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(n: usize) -> VideoRef {
        VideoRef::new((0..n).map(|i| format!("f{i}")).collect(), vec![])
    }

    #[test]
    fn identity_at_or_below_target() {
        let v = video(30);
        assert_eq!(downsample(&v, 30).unwrap(), v);
        let v = video(2);
        assert_eq!(downsample(&v, 30).unwrap(), v);
    }

    #[test]
    fn ninety_frames_keep_endpoints() {
        let out = downsample(&video(90), 30).unwrap();
        assert_eq!(out.len(), 30);
        assert_eq!(out.frames[0], "f0");
        assert_eq!(out.frames[1], "f3");
        assert_eq!(out.frames[2], "f6");
        assert_eq!(out.frames[29], "f89");
    }

    #[test]
    fn errors() {
        assert_eq!(downsample(&video(0), 30), Err(VideoError::Empty));
        assert_eq!(downsample(&video(5), 1), Err(VideoError::TargetTooSmall(1)));
    }

    #[test]
    fn boundaries_follow_kept_frames() {
        let mut v = video(100);
        v.step_boundaries = (0..10)
            .map(|s| StepBoundary {
                step: s,
                first: s * 10,
                last: s * 10 + 9,
            })
            .collect();
        v.validate().unwrap();
        let out = downsample(&v, 30).unwrap();
        assert_eq!(out.step_boundaries.len(), 10);
        for pair in out.step_boundaries.windows(2) {
            assert!(pair[0].first <= pair[1].first);
            assert!(pair[0].last <= pair[1].last);
        }
        assert_eq!(out.step_boundaries[0].first, 0);
        assert_eq!(out.step_boundaries[9].last, 29);
    }

    #[test]
    fn validate_rejects_overlap_and_gaps_in_steps() {
        let mut v = video(10);
        v.step_boundaries = vec![
            StepBoundary { step: 0, first: 0, last: 4 },
            StepBoundary { step: 1, first: 4, last: 9 },
        ];
        assert!(v.validate().is_err());
        v.step_boundaries[1] = StepBoundary { step: 2, first: 5, last: 9 };
        assert!(v.validate().is_err());
        v.step_boundaries[1] = StepBoundary { step: 1, first: 5, last: 10 };
        assert!(v.validate().is_err());
    }

    #[test]
    fn window_rebases_boundaries() {
        let mut v = video(10);
        v.step_boundaries = vec![
            StepBoundary { step: 0, first: 0, last: 4 },
            StepBoundary { step: 1, first: 5, last: 9 },
        ];
        let w = v.window(5, 9);
        assert_eq!(w.frames[0], "f5");
        assert_eq!(w.step_boundaries, vec![StepBoundary { step: 1, first: 0, last: 4 }]);
    }
}
