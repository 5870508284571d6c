//! Procedural FER2013-format data for smoke tests and offline demos.
//!
//! Each image is a cartoon face whose mouth, brows and eyes depend on the
//! emotion class, with random placement, lighting and pixel noise. It is not a
//! substitute for real faces; it exercises the training pipeline end to end
//! when the FER2013 corpus is not at hand.

use crate::dataset::LabeledImage;
use crate::imgproc::GrayImage;
use crate::label::{EmotionLabel, NUM_CLASSES};
use crate::model::INPUT_SIZE;
use crate::rng::RngState;

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, v: f64) {
        self.px[y * INPUT_SIZE + x] = v;
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, v: f64) {
        for y in 0..INPUT_SIZE {
            for x in 0..INPUT_SIZE {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.paint(x, y, v);
                }
            }
        }
    }

    /// Thick segment from `(x0, y0)` to `(x1, y1)`.
    fn segment(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), thickness: f64, v: f64) {
        let (vx, vy) = (x1 - x0, y1 - y0);
        let len2 = (vx * vx + vy * vy).max(1e-9);
        for y in 0..INPUT_SIZE {
            for x in 0..INPUT_SIZE {
                let (px, py) = (x as f64 - x0, y as f64 - y0);
                let t = ((px * vx + py * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (px - t * vx, py - t * vy);
                if dx * dx + dy * dy <= thickness * thickness {
                    self.paint(x, y, v);
                }
            }
        }
    }

    /// Parabola `y = cy + bend·(x − cx)²/half²` over `|x − cx| ≤ half`.
    fn curve(&mut self, cx: f64, cy: f64, half: f64, bend: f64, v: f64) {
        let steps = 12;
        let point = |i: usize| {
            let x = cx - half + 2.0 * half * i as f64 / steps as f64;
            let u = (x - cx) / half;
            (x, cy + bend * u * u)
        };
        for i in 0..steps {
            self.segment(point(i), point(i + 1), 0.9, v);
        }
    }
}

/// One synthetic face for `label`, fully determined by `rng`.
pub fn synthetic_face(label: EmotionLabel, rng: &mut RngState) -> GrayImage {
    let background = rng.uniform_range(10.0, 90.0);
    let skin = rng.uniform_range(130.0, 210.0);
    let ink = skin - rng.uniform_range(80.0, 120.0);
    let cx = 23.5 + rng.uniform_range(-2.5, 2.5);
    let cy = 24.5 + rng.uniform_range(-2.5, 2.5);
    let scale = rng.uniform_range(0.9, 1.1);

    let mut c = Canvas {
        px: vec![background; INPUT_SIZE * INPUT_SIZE],
    };
    c.ellipse(cx, cy, 16.0 * scale, 20.0 * scale, skin);

    let eye_dx = 7.0 * scale;
    let eye_y = cy - 5.0 * scale;
    let (eye_rx, eye_ry) = match label {
        EmotionLabel::Surprise | EmotionLabel::Fear => (2.6, 3.2),
        EmotionLabel::Happy | EmotionLabel::Disgust => (2.2, 1.0),
        EmotionLabel::Angry => (2.2, 1.4),
        _ => (2.0, 2.0),
    };
    for side in [-1.0, 1.0] {
        c.ellipse(cx + side * eye_dx, eye_y, eye_rx * scale, eye_ry * scale, ink);
    }

    // Brow geometry: (height above the eyes, inner-end lift).
    let (brow_up, inner_lift) = match label {
        EmotionLabel::Angry => (3.5, -2.5),
        EmotionLabel::Sad => (4.5, 2.0),
        EmotionLabel::Fear => (6.0, 2.5),
        EmotionLabel::Surprise => (7.5, 0.0),
        EmotionLabel::Disgust => (3.5, -1.0),
        _ => (5.0, 0.0),
    };
    let brow_y = eye_y - brow_up * scale;
    for side in [-1.0, 1.0] {
        let inner = (cx + side * 3.5 * scale, brow_y - inner_lift * scale);
        let outer = (cx + side * 11.0 * scale, brow_y);
        c.segment(inner, outer, 0.9, ink);
    }

    let mouth_y = cy + 9.0 * scale;
    match label {
        EmotionLabel::Happy => c.curve(cx, mouth_y + 2.0 * scale, 7.0 * scale, -4.0 * scale, ink),
        EmotionLabel::Sad => c.curve(cx, mouth_y - 1.0 * scale, 6.0 * scale, 3.5 * scale, ink),
        EmotionLabel::Neutral => c.curve(cx, mouth_y, 6.0 * scale, 0.0, ink),
        EmotionLabel::Angry => {
            c.curve(cx, mouth_y, 4.5 * scale, 1.0 * scale, ink);
        }
        EmotionLabel::Surprise => c.ellipse(cx, mouth_y + 1.0, 3.0 * scale, 4.5 * scale, ink),
        EmotionLabel::Fear => c.ellipse(cx, mouth_y, 6.5 * scale, 2.0 * scale, ink),
        EmotionLabel::Disgust => {
            c.segment(
                (cx - 6.0 * scale, mouth_y + 1.5 * scale),
                (cx + 6.0 * scale, mouth_y - 2.0 * scale),
                0.9,
                ink,
            );
            // wrinkled nose
            for side in [-1.0, 1.0] {
                c.segment(
                    (cx + side * 1.5 * scale, cy + 1.0 * scale),
                    (cx + side * 3.5 * scale, cy + 3.0 * scale),
                    0.6,
                    ink,
                );
            }
        }
    }

    let noise = rng.uniform_range(4.0, 14.0);
    let pixels = c
        .px
        .iter()
        .map(|&v| (v + noise * rng.normal()).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(INPUT_SIZE, INPUT_SIZE, pixels).expect("canvas is 48x48")
}

/// `n` labeled faces with classes assigned round-robin; sample `i` depends only on `(seed, i)`.
pub fn synthetic_fer(n: usize, seed: u64) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let label = EmotionLabel::from_index(i % NUM_CLASSES).expect("index < 7");
            let mut rng = RngState::derived(seed, i as u64);
            LabeledImage {
                image: synthetic_face(label, &mut rng),
                label,
                usage: Some("Training".to_string()),
            }
        })
        .collect()
}
