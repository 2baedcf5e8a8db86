//! KITTI object-label text format.
//!
//! Each line: `type truncated occluded alpha left top right bottom h w l x y z ry [score]`.
//! Only vehicle classes are kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VEHICLE_CLASSES: [&str; 3] = ["Car", "Van", "Truck"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_name: String,
    pub left: f32,
    pub top: f32,
    pub right: f32,
    pub bottom: f32,
}

impl BoundingBox {
    pub fn new(class_name: &str, left: f32, top: f32, right: f32, bottom: f32) -> Self {
        BoundingBox {
            class_name: class_name.to_string(),
            left,
            top,
            right,
            bottom,
        }
    }

    /// Clamp to a `width x height` frame.
    pub fn clamped(&self, width: f32, height: f32) -> Self {
        BoundingBox {
            class_name: self.class_name.clone(),
            left: self.left.clamp(0.0, width),
            top: self.top.clamp(0.0, height),
            right: self.right.clamp(0.0, width),
            bottom: self.bottom.clamp(0.0, height),
        }
    }

    pub fn scaled(&self, sx: f32, sy: f32) -> Self {
        BoundingBox {
            class_name: self.class_name.clone(),
            left: self.left * sx,
            top: self.top * sy,
            right: self.right * sx,
            bottom: self.bottom * sy,
        }
    }
}

/// Parse label text, returning the Car/Van/Truck boxes in file order.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 15 {
            return Err(Error::ParseLine {
                line: line_no,
                msg: format!("expected at least 15 fields, found {}", fields.len()),
            });
        }
        let mut nums = [0.0f32; 14];
        for (k, f) in fields[1..15].iter().enumerate() {
            nums[k] = f.parse().map_err(|_| Error::ParseLine {
                line: line_no,
                msg: format!("field {} is not a number: {f:?}", k + 2),
            })?;
        }
        if VEHICLE_CLASSES.contains(&fields[0]) {
            boxes.push(BoundingBox::new(fields[0], nums[3], nums[4], nums[5], nums[6]));
        }
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn car_line() {
        let b = parse_kitti_labels(
            "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59",
        )
        .unwrap();
        assert_eq!(b, vec![BoundingBox::new("Car", 587.01, 173.33, 614.12, 200.12)]);
    }

    #[test]
    fn other_classes_dropped() {
        let text = "Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 1.89 0.48 1.20 1.84 1.47 8.41 0.01\n\
                    DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n";
        assert!(parse_kitti_labels(text).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "\nVan 0 0 0 1 2 3 4 1 1 1 1 1 1 1\nTruck 0 0 0 1 2 x 4 1 1 1 1 1 1 1\n";
        match parse_kitti_labels(text) {
            Err(Error::ParseLine { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_kitti_labels("Car 1 2 3") {
            Err(Error::ParseLine { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
