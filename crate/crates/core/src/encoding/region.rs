use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Length of the per-region location vector: four normalized corners,
/// relative area, normalized class id, confidence.
pub const LOCATION_DIM: usize = 7;

/// Detected object box in pixel coordinates of a `image_width × image_height` image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub class_id: u32,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2, self.image_width, self.image_height, self.confidence]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("bounding box has non-finite fields"));
        }
        if self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if !(0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= self.image_width) {
            return Err(invalid(format!(
                "degenerate box: x range [{}, {}] within width {}",
                self.x1, self.x2, self.image_width
            )));
        }
        if !(0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= self.image_height) {
            return Err(invalid(format!(
                "degenerate box: y range [{}, {}] within height {}",
                self.y1, self.y2, self.image_height
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(format!("confidence {} outside [0,1]", self.confidence)));
        }
        Ok(())
    }
}

/// `(x1/W, y1/H, x2/W, y2/H, relative area, class_id/num_classes, confidence)`.
pub fn compute_location_vector(bbox: &BoundingBox, num_classes: u32) -> Result<[f64; LOCATION_DIM]> {
    bbox.validate()?;
    if num_classes == 0 || bbox.class_id >= num_classes {
        return Err(invalid(format!(
            "class id {} not below class count {num_classes}",
            bbox.class_id
        )));
    }
    let (w, h) = (bbox.image_width, bbox.image_height);
    let area = (bbox.x2 - bbox.x1) * (bbox.y2 - bbox.y1) / (w * h);
    Ok([
        bbox.x1 / w,
        bbox.y1 / h,
        bbox.x2 / w,
        bbox.y2 / h,
        area,
        f64::from(bbox.class_id) / f64::from(num_classes),
        bbox.confidence,
    ])
}

/// One image region: pooled RoI feature plus its location vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualRegion<T> {
    pub roi_feature: Vec<T>,
    pub location: [T; LOCATION_DIM],
}

impl<T: Scalar> VisualRegion<T> {
    pub fn new(roi_feature: Vec<T>, location: [T; LOCATION_DIM]) -> Result<Self> {
        let region = Self { roi_feature, location };
        region.validate()?;
        Ok(region)
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi_feature.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite RoI feature"));
        }
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !self.location[..5].iter().all(|&v| unit(v)) || self.location[4] <= T::zero() {
            return Err(invalid(format!("location vector out of range: {:?}", self.location)));
        }
        Ok(())
    }
}
