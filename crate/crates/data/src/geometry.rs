/// 2×3 affine map `p ↦ A p + t` in continuous pixel coordinates, where pixel
/// `i` covers `[i, i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2 {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Affine2 {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
        }
    }

    /// Rotation by `deg` degrees; positive angles turn +x towards +y.
    pub fn rotation(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine2 {
            m: [[c, -s, 0.0], [s, c, 0.0]],
        }
    }

    /// Mirror about the vertical line `x = width / 2`.
    pub fn hflip(width: f64) -> Self {
        Affine2 {
            m: [[-1.0, 0.0, width], [0.0, 1.0, 0.0]],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine2 {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        })
    }

    /// The map applying `self` first, then `next`.
    pub fn then(&self, next: &Affine2) -> Self {
        let [[a, b, c], [d, e, f]] = next.m;
        let [[p, q, r], [s, t, u]] = self.m;
        Affine2 {
            m: [
                [a * p + b * s, a * q + b * t, a * r + b * u + c],
                [d * p + e * s, d * q + e * t, d * r + e * u + f],
            ],
        }
    }
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::identity()
    }
}
