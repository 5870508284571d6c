//! Scene-change gating of model inference.
//!
//! For each frame `I_t` the gate computes `SAD(I_t, I_{t-1}) = Σ|I_t − I_{t−1}|`.
//! If it exceeds the threshold the model runs; otherwise the previous
//! prediction is reused and the model is not invoked.

use crate::error::{FerError, Result};
use crate::imgproc::GrayImage;
use crate::label::EmotionLabel;

/// A grayscale frame with its position in the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    pub image: GrayImage,
}

/// Sum of absolute pixel differences, exact in integer arithmetic.
pub fn sad(a: &GrayImage, b: &GrayImage) -> Result<u64> {
    if !a.same_size(b) {
        return Err(FerError::input(format!(
            "SAD of {}x{} and {}x{} frames",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneType {
    Static = 0,
    Change = 1,
}

/// `Change` iff `sad > threshold` (strictly).
pub fn classify_scene(sad: u64, threshold: f64) -> SceneType {
    if sad as f64 > threshold {
        SceneType::Change
    } else {
        SceneType::Static
    }
}

/// Threshold for a per-pixel tolerance `tau` on a `width x height` frame.
pub fn threshold_for(tau: f64, width: usize, height: usize) -> f64 {
    tau * (width * height) as f64
}

#[derive(Debug, Clone)]
pub struct GateState {
    prev_frame: Option<GrayImage>,
    prev_prediction: Option<EmotionLabel>,
    threshold: f64,
    frames_seen: u64,
    invocations: u64,
}

/// Outcome of one [`GateState::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateDecision {
    pub label: EmotionLabel,
    pub scene: SceneType,
    /// `None` for the first frame, which has no predecessor.
    pub sad: Option<u64>,
    pub model_invoked: bool,
}

impl GateState {
    /// `threshold` must be non-negative; `f64::INFINITY` never re-runs the model.
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(FerError::config(format!(
                "scene-change threshold must be >= 0, got {threshold}"
            )));
        }
        Ok(GateState {
            prev_frame: None,
            prev_prediction: None,
            threshold,
            frames_seen: 0,
            invocations: 0,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    pub fn prev_frame(&self) -> Option<&GrayImage> {
        self.prev_frame.as_ref()
    }

    pub fn prev_prediction(&self) -> Option<EmotionLabel> {
        self.prev_prediction
    }

    /// Gated prediction for `frame`. The first frame always runs the model.
    ///
    /// On a model error the frame counter still advances but the stored frame and
    /// prediction are left unchanged, so the next frame is compared against the
    /// last successfully processed one.
    pub fn step<E>(
        &mut self,
        frame: &GrayImage,
        mut model: impl FnMut(&GrayImage) -> Result<EmotionLabel, E>,
    ) -> Result<GateDecision, E>
    where
        E: From<FerError>,
    {
        let (sad_value, scene) = match (&self.prev_frame, self.prev_prediction) {
            (Some(prev), Some(_)) => {
                let s = sad(frame, prev)?;
                (Some(s), classify_scene(s, self.threshold))
            }
            _ => (None, SceneType::Change),
        };
        self.frames_seen += 1;
        let label = match (scene, self.prev_prediction) {
            (SceneType::Static, Some(prev)) => prev,
            _ => {
                self.invocations += 1;
                model(frame)?
            }
        };
        self.prev_frame = Some(frame.clone());
        self.prev_prediction = Some(label);
        Ok(GateDecision {
            label,
            scene,
            sad: sad_value,
            model_invoked: scene == SceneType::Change,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: &[u8]) -> GrayImage {
        GrayImage::new(2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn sad_examples() {
        let a = img(&[1, 2, 3, 4]);
        assert_eq!(sad(&a, &a).unwrap(), 0);
        assert_eq!(sad(&a, &img(&[0, 2, 5, 4])).unwrap(), 3);
        assert_eq!(sad(&img(&[0, 255, 0, 0]), &img(&[255, 0, 0, 0])).unwrap(), 510);
        assert!(sad(&a, &GrayImage::filled(3, 2, 0)).is_err());
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(classify_scene(0, 0.0), SceneType::Static);
        assert_eq!(classify_scene(5, 4.0), SceneType::Change);
        assert_eq!(classify_scene(4, 4.0), SceneType::Static);
        assert_eq!(classify_scene(u64::MAX, f64::INFINITY), SceneType::Static);
    }

    #[test]
    fn static_frames_reuse_prediction() {
        let mut gate = GateState::new(10.0).unwrap();
        let mut calls = 0;
        let mut model = |_: &GrayImage| -> Result<EmotionLabel, FerError> {
            calls += 1;
            Ok(EmotionLabel::Surprise)
        };
        let f = img(&[9, 9, 9, 9]);
        let d0 = gate.step(&f, &mut model).unwrap();
        let d1 = gate.step(&f, &mut model).unwrap();
        assert!(d0.model_invoked && d0.sad.is_none());
        assert!(!d1.model_invoked);
        assert_eq!(d1.label, EmotionLabel::Surprise);
        assert_eq!(d1.sad, Some(0));
        assert_eq!(calls, 1);
        assert_eq!((gate.frames_seen(), gate.invocations()), (2, 1));
    }

    #[test]
    fn model_error_keeps_state_consistent() {
        let mut gate = GateState::new(0.0).unwrap();
        let r = gate.step(&img(&[1, 1, 1, 1]), |_| -> Result<EmotionLabel, FerError> {
            Err(FerError::Config("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(gate.frames_seen(), 1);
        assert!(gate.prev_frame().is_none() && gate.prev_prediction().is_none());
        let d = gate
            .step(&img(&[1, 1, 1, 1]), |_| -> Result<EmotionLabel, FerError> {
                Ok(EmotionLabel::Fear)
            })
            .unwrap();
        assert!(d.model_invoked);
    }

    #[test]
    fn negative_threshold_rejected() {
        assert!(GateState::new(-1.0).is_err());
        assert!(GateState::new(f64::NAN).is_err());
        assert!(GateState::new(f64::INFINITY).is_ok());
    }
}
