use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

/// 2D affine map `p ↦ A p + b`, stored as a 2×3 matrix `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Affine2(pub [[f64; 3]; 2]);

impl Default for Affine2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine2([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    }

    /// Counter-clockwise in the x-right / y-down frame means clockwise on screen.
    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine2([[c, -s, 0.0], [s, c, 0.0]])
    }

    /// `m` applied about a fixed point `center`.
    pub fn about(center: [f64; 2], m: Affine2) -> Self {
        Affine2::translation(center[0], center[1])
            .then_after(&m)
            .then_after(&Affine2::translation(-center[0], -center[1]))
    }

    pub fn linear(&self) -> Matrix2<f64> {
        let m = &self.0;
        Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
    }

    pub fn offset(&self) -> Vector2<f64> {
        Vector2::new(self.0[0][2], self.0[1][2])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    #[inline]
    pub fn apply(&self, p: Vector2<f64>) -> Vector2<f64> {
        let m = &self.0;
        Vector2::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn then_after(&self, inner: &Affine2) -> Affine2 {
        let a = &self.0;
        let b = &inner.0;
        let mut out = [[0.0; 3]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            row[2] += a[r][2];
        }
        Affine2(out)
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.det();
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let m = &self.0;
        let ia = m[1][1] / det;
        let ib = -m[0][1] / det;
        let ic = -m[1][0] / det;
        let id = m[0][0] / det;
        let tx = -(ia * m[0][2] + ib * m[1][2]);
        let ty = -(ic * m[0][2] + id * m[1][2]);
        Some(Affine2([[ia, ib, tx], [ic, id, ty]]))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
