use super::{BBox, IrImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

pub fn flip_image(img: &IrImage, axis: FlipAxis) -> IrImage {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (w - 1 - x, y),
                FlipAxis::Vertical => (x, h - 1 - y),
            };
            out.set(x, y, img.get(sx, sy));
        }
    }
    out
}

pub fn flip_boxes(boxes: &[BBox], width: usize, height: usize, axis: FlipAxis) -> Vec<BBox> {
    let (w, h) = (width as f64, height as f64);
    boxes
        .iter()
        .map(|b| match axis {
            FlipAxis::Horizontal => BBox::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max),
            FlipAxis::Vertical => BBox::new(b.x_min, h - b.y_max, b.x_max, h - b.y_min),
        })
        .collect()
}

pub fn flip_augment(img: &IrImage, boxes: &[BBox], axis: FlipAxis) -> (IrImage, Vec<BBox>) {
    (
        flip_image(img, axis),
        flip_boxes(boxes, img.width, img.height, axis),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_arithmetic() {
        let b = flip_boxes(
            &[BBox::new(10.0, 20.0, 30.0, 40.0)],
            100,
            100,
            FlipAxis::Horizontal,
        );
        assert_eq!(b[0], BBox::new(70.0, 20.0, 90.0, 40.0));
    }

    #[test]
    fn pixels_move_and_double_flip_is_identity() {
        let img = IrImage::new(8, 8, (0..64).map(|i| i as f32).collect()).unwrap();
        let boxes = [BBox::new(1.0, 2.0, 4.0, 7.0)];
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            let (f, fb) = flip_augment(&img, &boxes, axis);
            for y in 0..8 {
                for x in 0..8 {
                    let (tx, ty) = match axis {
                        FlipAxis::Horizontal => (7 - x, y),
                        FlipAxis::Vertical => (x, 7 - y),
                    };
                    assert_eq!(f.get(tx, ty), img.get(x, y));
                }
            }
            let (ff, ffb) = flip_augment(&f, &fb, axis);
            assert_eq!(ff, img);
            assert_eq!(ffb, boxes);
        }
    }
}
