//! Datasets: a synthetic 10-class oriented-bar task and a plain CSV format.
//!
//! CSV rows are `label,p0,p1,...,p(H*W-1)` with pixel values in `[0, 255]`,
//! normalized to `[0, 1]` at load. An optional header line is skipped when
//! its first field is not an integer.

use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read dataset: {0}")]
    Io(String),
    #[error("line {line}: expected {expected} fields, got {got}")]
    WrongFieldCount {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: cannot parse field `{field}`")]
    BadField { line: usize, field: String },
    #[error("line {line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("line {line}: pixel count {got} is not a perfect square")]
    NotSquare { line: usize, got: usize },
    #[error("dataset is empty")]
    Empty,
}

pub const NUM_CLASSES: usize = 10;

/// Images as one flat buffer plus labels; images are `1 x H x W` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    labels: Vec<usize>,
    height: usize,
    width: usize,
    classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Gather a batch into an `[B, 1, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data)
            .expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Synthetic separable task: each class is an oriented bar through a
    /// jittered center, plus Gaussian noise. Deterministic per seed.
    pub fn synthetic(n: usize, seed: u64) -> Dataset {
        const SIZE: usize = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.08).unwrap();
        let mut pixels = Vec::with_capacity(n * SIZE * SIZE);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..NUM_CLASSES);
            let angle = class as f64 * std::f64::consts::PI / NUM_CLASSES as f64;
            let (sin, cos) = angle.sin_cos();
            let cx = (SIZE as f64 - 1.0) / 2.0 + rng.random_range(-1.5..1.5);
            let cy = (SIZE as f64 - 1.0) / 2.0 + rng.random_range(-1.5..1.5);
            for y in 0..SIZE {
                for x in 0..SIZE {
                    // Perpendicular distance to the bar's center line.
                    let d = (-sin * (x as f64 - cx) + cos * (y as f64 - cy)).abs();
                    let base = if d < 1.3 { 0.85 } else { 0.1 };
                    let v: f64 = base + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
        Dataset {
            pixels,
            labels,
            height: SIZE,
            width: SIZE,
            classes: NUM_CLASSES,
        }
    }

    pub fn from_csv_path(path: &Path, classes: usize) -> Result<Dataset, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text, classes)
    }

    pub fn from_csv(text: &str, classes: usize) -> Result<Dataset, DataError> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut side: Option<usize> = None;
        let mut expected_fields: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            // Header line: first field not an integer.
            if i == 0 && fields[0].trim().parse::<i64>().is_err() {
                continue;
            }
            if let Some(expected) = expected_fields {
                if fields.len() != expected {
                    return Err(DataError::WrongFieldCount {
                        line: line_no,
                        expected,
                        got: fields.len(),
                    });
                }
            } else {
                let pixel_count = fields.len().saturating_sub(1);
                if pixel_count == 0 {
                    return Err(DataError::WrongFieldCount {
                        line: line_no,
                        expected: 2,
                        got: fields.len(),
                    });
                }
                let s = (pixel_count as f64).sqrt().round() as usize;
                if s * s != pixel_count {
                    return Err(DataError::NotSquare {
                        line: line_no,
                        got: pixel_count,
                    });
                }
                side = Some(s);
                expected_fields = Some(fields.len());
            }
            let label: i64 = fields[0].trim().parse().map_err(|_| DataError::BadField {
                line: line_no,
                field: fields[0].trim().to_string(),
            })?;
            if label < 0 || label as usize >= classes {
                return Err(DataError::LabelOutOfRange {
                    line: line_no,
                    label,
                    classes,
                });
            }
            labels.push(label as usize);
            for f in &fields[1..] {
                let v: f64 = f.trim().parse().map_err(|_| DataError::BadField {
                    line: line_no,
                    field: f.trim().to_string(),
                })?;
                pixels.push((v / 255.0).clamp(0.0, 1.0));
            }
        }
        let side = side.unwrap_or(0);
        Ok(Dataset {
            pixels,
            labels,
            height: side,
            width: side,
            classes,
        })
    }

    /// CSV text round-trip of this dataset (pixels rescaled to [0, 255]).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            out.push_str(&self.labels[i].to_string());
            for &p in self.image(i) {
                out.push(',');
                out.push_str(&format!("{:.3}", p * 255.0));
            }
            out.push('\n');
        }
        out
    }

    /// Deterministic shuffle + 90/10 split into (train, validation) index
    /// lists.
    pub fn split_indices(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        // Distinct stream from the training RNG so reordering one never
        // perturbs the other.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        let val_len = (self.len() / 10).max(1).min(self.len().saturating_sub(1));
        let train_len = self.len() - val_len;
        let val = idx.split_off(train_len);
        (idx, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_deterministic() {
        let a = Dataset::synthetic(50, 1);
        let b = Dataset::synthetic(50, 1);
        assert_eq!(a, b);
        let c = Dataset::synthetic(50, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_shapes_and_ranges() {
        let d = Dataset::synthetic(20, 3);
        assert_eq!(d.len(), 20);
        assert_eq!(d.height(), 16);
        assert_eq!(d.width(), 16);
        assert!(d.labels().iter().all(|&l| l < NUM_CLASSES));
        assert!(d.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn csv_roundtrip() {
        let d = Dataset::synthetic(8, 5);
        let csv = d.to_csv();
        let back = Dataset::from_csv(&csv, NUM_CLASSES).unwrap();
        assert_eq!(back.len(), 8);
        assert_eq!(back.labels(), d.labels());
        for i in 0..8 {
            for (a, b) in d.image(i).iter().zip(back.image(i)) {
                assert!((a - b).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn csv_header_only_yields_empty() {
        let d = Dataset::from_csv("label,p0,p1,p2,p3\n", NUM_CLASSES).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn csv_wrong_field_count_names_line() {
        let text = "0,1,2,3,4\n1,5,6\n";
        let err = Dataset::from_csv(text, NUM_CLASSES).unwrap_err();
        assert_eq!(
            err,
            DataError::WrongFieldCount {
                line: 2,
                expected: 5,
                got: 3
            }
        );
    }

    #[test]
    fn csv_label_out_of_range_names_line() {
        let text = "0,1,2,3,4\n12,5,6,7,8\n";
        let err = Dataset::from_csv(text, NUM_CLASSES).unwrap_err();
        assert_eq!(
            err,
            DataError::LabelOutOfRange {
                line: 2,
                label: 12,
                classes: NUM_CLASSES
            }
        );
    }

    #[test]
    fn csv_bad_pixel_names_line() {
        let text = "0,1,2,3,4\n1,5,abc,7,8\n";
        let err = Dataset::from_csv(text, NUM_CLASSES).unwrap_err();
        assert_eq!(
            err,
            DataError::BadField {
                line: 2,
                field: "abc".to_string()
            }
        );
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = Dataset::synthetic(100, 9);
        let (t1, v1) = d.split_indices(42);
        let (t2, v2) = d.split_indices(42);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(t1.len() + v1.len(), 100);
        assert_eq!(v1.len(), 10);
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn batch_gathers_rows() {
        let d = Dataset::synthetic(10, 1);
        let b = d.batch(&[0, 3, 7]);
        assert_eq!(b.shape(), &[3, 1, 16, 16]);
        assert_eq!(&b.data()[256..512], d.image(3));
        assert_eq!(d.batch_labels(&[0, 3]), vec![d.labels()[0], d.labels()[3]]);
    }
}
