use std::fmt;

/// Axis-aligned box in pixels, half-open: `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x_max > self.x_min && self.y_max > self.y_min) || !self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = self.x_max.min(o.x_max) - self.x_min.max(o.x_min);
        let h = self.y_max.min(o.y_max) - self.y_min.max(o.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    /// Inside `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Ground-truth target box. Single-class, so `class_id` is always 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: u32,
    pub image_id: String,
}

impl Annotation {
    pub fn new(image_id: impl Into<String>, bbox: BBox) -> Self {
        Self {
            bbox,
            class_id: 0,
            image_id: image_id.into(),
        }
    }
}

/// Predicted box with confidence and pyramid level (1..=4).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
}
