use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::{ImageData, ImageRecord, Modality, PriorityMap, SourceId};
use crate::error::{Error, Result};

pub(crate) fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn save_png(px: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w) = (px.shape()[1], px.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                (px[[0, y, x]] * 255.0).round() as u8,
                (px[[1, y, x]] * 255.0).round() as u8,
                (px[[2, y, x]] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

const HEADER: &str = "path,source_id,original_label,patient_id,modality";

fn check_field(path: &Path, field: &str) -> Result<()> {
    if field.contains(',') || field.contains('\n') {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: format!("field {field:?} contains a delimiter"),
        });
    }
    Ok(())
}

/// Materializes records under `dir`: in-memory pixels become PNGs in
/// `dir/images/`, and `dir/manifest.csv` lists every record. Priority is
/// never written; readers recompute it from the label. Returns the
/// manifest path.
pub fn write_manifest(records: &[ImageRecord], dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let manifest_path = dir.join("manifest.csv");

    let mut lines = vec![HEADER.to_string()];
    for (i, record) in records.iter().enumerate() {
        let rel: String = match &record.image {
            ImageData::Pixels(px) => {
                let rel = format!("images/{i:05}.png");
                save_png(px, &dir.join(&rel))?;
                rel
            }
            ImageData::File(path) => path.to_string_lossy().into_owned(),
        };
        for field in [&rel, &record.original_label, &record.patient_id] {
            check_field(&manifest_path, field)?;
        }
        lines.push(format!(
            "{rel},{},{},{},{}",
            record.source_id, record.original_label, record.patient_id, record.modality
        ));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a manifest written by `write_manifest` (or hand-authored in the
/// same five-column form). Relative image paths resolve against the
/// manifest's directory; priorities are computed through `map`.
pub fn read_manifest(path: &Path, map: &PriorityMap) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != HEADER {
                return Err(Error::MalformedLog {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: format!("expected header {HEADER:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedLog {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let source_id: SourceId = fields[1].parse()?;
        let modality: Modality = fields[4].parse()?;
        let image_path = {
            let p = PathBuf::from(fields[0]);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        records.push(ImageRecord {
            image: ImageData::File(image_path),
            source_id,
            original_label: fields[2].to_string(),
            priority: map.map_to_priority(fields[2], source_id)?,
            patient_id: fields[3].to_string(),
            modality,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Priority};

    #[test]
    fn manifest_roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth_dataset(9, 8, 3, 42).unwrap();
        let manifest = write_manifest(&records, dir.path()).unwrap();
        let map = PriorityMap::new();
        let back = read_manifest(&manifest, &map).unwrap();
        assert_eq!(back.len(), records.len());
        for (orig, got) in records.iter().zip(back.iter()) {
            assert_eq!(orig.original_label, got.original_label);
            assert_eq!(orig.priority, got.priority);
            assert_eq!(orig.patient_id, got.patient_id);
            assert_eq!(orig.modality, got.modality);
            let a = orig.pixels(8).unwrap();
            let b = got.pixels(8).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                // one quantization step through the 8-bit file format
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn materialization_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let records = synth_dataset(4, 8, 2, 5).unwrap();
        write_manifest(&records, dir_a.path()).unwrap();
        write_manifest(&records, dir_b.path()).unwrap();
        let manifest_a = std::fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let manifest_b = std::fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest_a, manifest_b);
        let png_a = std::fs::read(dir_a.path().join("images/00000.png")).unwrap();
        let png_b = std::fs::read(dir_b.path().join("images/00000.png")).unwrap();
        assert_eq!(png_a, png_b);
    }

    #[test]
    fn priority_is_recomputed_not_read() {
        let dir = tempfile::tempdir().unwrap();
        let records = synth_dataset(3, 8, 3, 0).unwrap();
        let manifest = write_manifest(&records, dir.path()).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(!text.contains("P1"), "priority must not be serialized");
        let back = read_manifest(&manifest, &PriorityMap::new()).unwrap();
        assert_eq!(back[1].priority, Priority::P2);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, format!("{HEADER}\nimages/x.png,synthetic,class-0\n")).unwrap();
        let err = read_manifest(&path, &PriorityMap::new()).unwrap_err();
        match err {
            Error::MalformedLog { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_isic_label_fails_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            format!("{HEADER}\nimages/x.png,isic,Mystery,p0,dermatoscopic\n"),
        )
        .unwrap();
        let err = read_manifest(&path, &PriorityMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { .. }), "{err}");
    }
}
