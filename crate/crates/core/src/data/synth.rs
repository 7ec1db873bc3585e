use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ImageData, ImageRecord, Modality, Priority, SourceId};
use crate::error::{Error, Result};

/// hue in [0,1), full-ish saturation; returns rgb in [0,1]
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generates `n` synthetic lesion records with class-conditional blobs:
/// each class has its own hue and blob radius over a noisy dark
/// background, so a small classifier can separate them. Labels follow
/// the `class-K` convention with priorities round-robin over the tiers,
/// and exactly 60% of records are dermatoscopic.
pub fn synth_dataset(
    n: usize,
    resolution: usize,
    class_count: usize,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    if class_count < 1 || n < class_count {
        return Err(Error::InvalidConfig(format!(
            "need n >= class_count >= 1, got n={n} class_count={class_count}"
        )));
    }
    if resolution < 8 {
        return Err(Error::InvalidConfig(format!(
            "resolution must be at least 8, got {resolution}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = resolution as f64;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % class_count;
        let hue = class as f64 / class_count as f64;
        let color = hsv_to_rgb(hue, 0.85, 0.9);
        let radius = r * (0.16 + 0.07 * (class % 3) as f64);

        let cx = r / 2.0 + rng.random_range(-r / 8.0..r / 8.0);
        let cy = r / 2.0 + rng.random_range(-r / 8.0..r / 8.0);
        let mut img = Array3::<f64>::zeros((3, resolution, resolution));
        for y in 0..resolution {
            for x in 0..resolution {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // soft-edged blob over a dim noisy background
                let edge = ((radius - d) / (0.15 * radius)).clamp(0.0, 1.0);
                for c in 0..3 {
                    let noise = rng.random_range(-0.04..0.04);
                    let base = 0.10 + noise;
                    let v = base + edge * (color[c] - base) + noise * edge;
                    img[[c, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }

        records.push(ImageRecord {
            image: ImageData::Pixels(Arc::new(img)),
            source_id: SourceId::Synthetic,
            original_label: format!("class-{class}"),
            priority: Priority::from_index(class),
            patient_id: format!("pt-{}", i / 2),
            modality: if i % 5 < 3 {
                Modality::Dermatoscopic
            } else {
                Modality::Clinical
            },
        });
    }
    Ok(records)
}
