//! NIH ChestX-ray14-style CSV ingestion. The label file carries
//! pipe-separated finding names per image; the box file carries one box per
//! row in input-pixel units.

use super::{csv_err, BBox, Sample};
use crate::error::{Error, Result};
use ndarray::Array2;
use std::collections::HashMap;
use std::path::Path;

/// The 14 ChestX-ray14 disease labels.
pub const NIH_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural_Thickening",
    "Pneumonia",
    "Pneumothorax",
];

fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    }))
}

fn field<'a>(rec: &'a csv::StringRecord, headers: &csv::StringRecord, name: &str) -> Result<&'a str> {
    let idx = headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Data(format!("missing csv column '{name}'")))?;
    rec.get(idx)
        .ok_or_else(|| Error::Data(format!("short csv row (no '{name}')")))
}

/// Parse the label index plus optional box file into samples, binarizing
/// labels over `classes`. "No Finding" maps to the all-zero vector. Box rows
/// must reference an image present in the label file.
pub fn load_nih_index(
    labels_csv: &Path,
    bbox_csv: Option<&Path>,
    images_dir: &Path,
    classes: &[String],
) -> Result<Vec<Sample>> {
    let class_of: HashMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut rdr = csv::Reader::from_path(labels_csv)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_csv.display())))?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut samples = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let image_id = field(&rec, &headers, "Image Index")?.trim().to_string();
        let findings = field(&rec, &headers, "Finding Labels")?.trim();
        let patient_id = field(&rec, &headers, "Patient ID")?.trim().to_string();
        let mut labels = vec![0u8; classes.len()];
        if findings != "No Finding" && !findings.is_empty() {
            for token in findings.split('|') {
                let token = token.trim();
                let &c = class_of
                    .get(token)
                    .ok_or_else(|| Error::Data(format!("{image_id}: unknown finding label '{token}'")))?;
                labels[c] = 1;
            }
        }
        let pixels = load_gray(&images_dir.join(&image_id))?;
        index_of.insert(image_id.clone(), samples.len());
        samples.push(Sample {
            image_id,
            pixels,
            labels,
            patient_id,
            boxes: Vec::new(),
            annotated: false,
        });
    }

    if let Some(bbox_csv) = bbox_csv {
        let mut rdr = csv::Reader::from_path(bbox_csv)
            .map_err(|e| Error::Data(format!("{}: {e}", bbox_csv.display())))?;
        let headers = rdr.headers().map_err(csv_err)?.clone();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let image_id = field(&rec, &headers, "Image Index")?.trim();
            let token = field(&rec, &headers, "Finding Label")?.trim();
            let parse = |name: &str| -> Result<f64> {
                field(&rec, &headers, name)?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("{image_id}: bad box field {name}: {e}")))
            };
            let bbox = BBox { x: parse("x")?, y: parse("y")?, w: parse("w")?, h: parse("h")? };
            let &c = class_of
                .get(token)
                .ok_or_else(|| Error::Data(format!("{image_id}: unknown finding label '{token}'")))?;
            let &si = index_of
                .get(image_id)
                .ok_or_else(|| Error::Data(format!("box row references absent image '{image_id}'")))?;
            samples[si].boxes.push((c, bbox));
            samples[si].annotated = true;
        }
    }

    for s in &samples {
        s.validate(classes.len())?;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn classes() -> Vec<String> {
        NIH_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    fn write_fixture(dir: &Path) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        for id in ["a.png", "b.png", "c.png"] {
            let img = image::GrayImage::from_pixel(8, 8, image::Luma([128]));
            img.save(dir.join("images").join(id)).unwrap();
        }
        let mut f = std::fs::File::create(dir.join("labels.csv")).unwrap();
        writeln!(f, "Image Index,Finding Labels,Patient ID").unwrap();
        writeln!(f, "a.png,Cardiomegaly|Effusion,1").unwrap();
        writeln!(f, "b.png,No Finding,1").unwrap();
        writeln!(f, "c.png,Nodule,2").unwrap();
        let mut f = std::fs::File::create(dir.join("bboxes.csv")).unwrap();
        writeln!(f, "Image Index,Finding Label,x,y,w,h").unwrap();
        writeln!(f, "c.png,Nodule,2,3,4,4").unwrap();
    }

    #[test]
    fn three_row_fixture_parses_to_expected_samples() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let samples = load_nih_index(
            &dir.path().join("labels.csv"),
            Some(&dir.path().join("bboxes.csv")),
            &dir.path().join("images"),
            &classes(),
        )
        .unwrap();
        assert_eq!(samples.len(), 3);

        let a = &samples[0];
        assert_eq!(a.image_id, "a.png");
        assert_eq!(a.patient_id, "1");
        let ones: Vec<usize> = a.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![1, 4]); // Cardiomegaly, Effusion
        assert!(a.boxes.is_empty() && !a.annotated);

        assert!(samples[1].labels.iter().all(|&l| l == 0));

        let c = &samples[2];
        assert_eq!(c.labels[10], 1); // Nodule
        assert_eq!(c.boxes, vec![(10, BBox { x: 2.0, y: 3.0, w: 4.0, h: 4.0 })]);
        assert!(c.annotated);
        assert_eq!(c.pixels.shape(), [8, 8]);
        assert!((c.pixels[[0, 0]] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_label_token_names_the_token() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let mut f = std::fs::File::create(dir.path().join("labels.csv")).unwrap();
        writeln!(f, "Image Index,Finding Labels,Patient ID").unwrap();
        writeln!(f, "a.png,Cardiomegalia,1").unwrap();
        let err = load_nih_index(&dir.path().join("labels.csv"), None, &dir.path().join("images"), &classes())
            .unwrap_err();
        assert!(err.to_string().contains("Cardiomegalia"));
    }

    #[test]
    fn bbox_for_absent_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let mut f = std::fs::File::create(dir.path().join("bboxes.csv")).unwrap();
        writeln!(f, "Image Index,Finding Label,x,y,w,h").unwrap();
        writeln!(f, "zz.png,Nodule,2,3,4,4").unwrap();
        let err = load_nih_index(
            &dir.path().join("labels.csv"),
            Some(&dir.path().join("bboxes.csv")),
            &dir.path().join("images"),
            &classes(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("zz.png"));
    }
}
