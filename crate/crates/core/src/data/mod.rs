//! Dataset plumbing: sample/bbox types, NIH-format CSV ingestion,
//! patient-disjoint splits, preprocessing/augmentation, the synthetic
//! planted-signal dataset, and on-disk dataset directories.

pub mod nih;
pub mod preprocess;
pub mod split;
pub mod synthetic;

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Axis-aligned box in input-pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    /// Grayscale pixels in [0, 1], [H, W].
    pub pixels: Array2<f64>,
    /// Binary label vector, length C.
    pub labels: Vec<u8>,
    pub patient_id: String,
    /// Ground-truth boxes per positive class (class index, box).
    pub boxes: Vec<(usize, BBox)>,
    /// Whether the sample's boxes are exposed to training (prior condition).
    pub annotated: bool,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != num_classes {
            return Err(Error::Data(format!(
                "{}: label vector length {} != {num_classes}",
                self.image_id,
                self.labels.len()
            )));
        }
        let (h, w) = (self.pixels.shape()[0] as f64, self.pixels.shape()[1] as f64);
        for (c, b) in &self.boxes {
            if *c >= num_classes || self.labels[*c] != 1 {
                return Err(Error::Data(format!(
                    "{}: box references class {c} which is not a positive label",
                    self.image_id
                )));
            }
            if b.w <= 0.0 || b.h <= 0.0 || b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
                return Err(Error::Data(format!("{}: box {:?} outside image bounds", self.image_id, b)));
            }
        }
        Ok(())
    }
}

/// Grid-cell mask of a box: cell included iff its pixel footprint overlaps
/// the box by any amount. `input_size` is the square image side; the grid is
/// `grid` x `grid` cells of side input_size/grid.
pub fn rasterize_box(bbox: &BBox, input_size: usize, grid: usize) -> Result<Array2<f64>> {
    if bbox.w <= 0.0 || bbox.h <= 0.0 {
        return Err(Error::Data(format!("degenerate box {bbox:?} (w and h must be > 0)")));
    }
    if bbox.x < 0.0 || bbox.y < 0.0 || bbox.x + bbox.w > input_size as f64 || bbox.y + bbox.h > input_size as f64 {
        return Err(Error::Data(format!("box {bbox:?} outside image of size {input_size}")));
    }
    let cell = input_size as f64 / grid as f64;
    let mut mask = Array2::<f64>::zeros((grid, grid));
    for i in 0..grid {
        for j in 0..grid {
            let (top, left) = (i as f64 * cell, j as f64 * cell);
            let overlaps_y = bbox.y < top + cell && bbox.y + bbox.h > top;
            let overlaps_x = bbox.x < left + cell && bbox.x + bbox.w > left;
            if overlaps_x && overlaps_y {
                mask[[i, j]] = 1.0;
            }
        }
    }
    debug_assert!(mask.iter().any(|&v| v > 0.0));
    Ok(mask)
}

fn png_path(dir: &Path, image_id: &str) -> std::path::PathBuf {
    dir.join("images").join(image_id)
}

/// Write a dataset directory: images/ (8-bit gray PNG), labels.csv and
/// bboxes.csv in NIH column layout, classes.txt, annotated.txt.
pub fn write_dataset(dir: &Path, samples: &[Sample], classes: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    labels
        .write_record(["Image Index", "Finding Labels", "Patient ID"])
        .map_err(csv_err)?;
    let mut boxes = csv::Writer::from_path(dir.join("bboxes.csv")).map_err(csv_err)?;
    boxes
        .write_record(["Image Index", "Finding Label", "x", "y", "w", "h"])
        .map_err(csv_err)?;
    let mut annotated = std::fs::File::create(dir.join("annotated.txt"))?;
    for s in samples {
        s.validate(classes.len())?;
        let findings: Vec<&str> = s
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(c, _)| classes[c].as_str())
            .collect();
        let findings = if findings.is_empty() { "No Finding".to_string() } else { findings.join("|") };
        labels
            .write_record([s.image_id.as_str(), findings.as_str(), s.patient_id.as_str()])
            .map_err(csv_err)?;
        for (c, b) in &s.boxes {
            boxes
                .write_record([
                    s.image_id.as_str(),
                    classes[*c].as_str(),
                    &format!("{}", b.x),
                    &format!("{}", b.y),
                    &format!("{}", b.w),
                    &format!("{}", b.h),
                ])
                .map_err(csv_err)?;
        }
        if s.annotated {
            writeln!(annotated, "{}", s.image_id)?;
        }
        let (h, w) = (s.pixels.shape()[0], s.pixels.shape()[1]);
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let v = (s.pixels[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(j as u32, i as u32, image::Luma([v]));
            }
        }
        img.save(png_path(dir, &s.image_id))?;
    }
    labels.flush().map_err(Error::Io)?;
    boxes.flush().map_err(Error::Io)?;
    std::fs::write(dir.join("classes.txt"), classes.join("\n") + "\n")?;
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`].
/// Returns (samples, class names).
pub fn read_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<String>)> {
    let classes: Vec<String> = std::fs::read_to_string(dir.join("classes.txt"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("classes.txt").display())))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect();
    let mut samples = nih::load_nih_index(
        &dir.join("labels.csv"),
        Some(&dir.join("bboxes.csv")),
        &dir.join("images"),
        &classes,
    )?;
    let annotated_path = dir.join("annotated.txt");
    if annotated_path.exists() {
        let ids: std::collections::HashSet<String> = std::fs::read_to_string(&annotated_path)?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        for s in &mut samples {
            s.annotated = ids.contains(&s.image_id);
        }
    }
    Ok((samples, classes))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
