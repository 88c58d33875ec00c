use crate::scalar::Scalar;

/// Axis-aligned box in center form. Coordinates are normalized to the image
/// for priors and decoded boxes, and in pixels for annotations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundingBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Self {
        let two = T::of(2.0);
        BoundingBox {
            cx: (x1 + x2) / two,
            cy: (y1 + y2) / two,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [T; 4] {
        let two = T::of(2.0);
        [
            self.cx - self.w / two,
            self.cy - self.h / two,
            self.cx + self.w / two,
            self.cy + self.h / two,
        ]
    }

    pub fn area(&self) -> T {
        self.w.max(T::zero()) * self.h.max(T::zero())
    }

    /// Corner coordinates clipped to the unit square.
    pub fn clipped(&self) -> Self {
        let corners = self.corners();
        if corners.iter().all(|&v| v >= T::zero() && v <= T::one()) {
            return *self;
        }
        let [x1, y1, x2, y2] = corners.map(|v| v.max(T::zero()).min(T::one()));
        BoundingBox::from_corners(x1, y1, x2, y2)
    }

    pub fn scaled(&self, sx: T, sy: T) -> Self {
        BoundingBox {
            cx: self.cx * sx,
            cy: self.cy * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        BoundingBox {
            cx: U::of(self.cx.as_f64()),
            cy: U::of(self.cy.as_f64()),
            w: U::of(self.w.as_f64()),
            h: U::of(self.h.as_f64()),
        }
    }
}

/// Intersection over union; zero for disjoint or degenerate boxes.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(T::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}
