//! Pinhole cameras and the small amount of 3-vector algebra they need.
//!
//! Pixel coordinates are continuous with pixel `(i, j)` centred at
//! `(i + 0.5, j + 0.5)`. Camera space looks down +z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[inline]
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rodrigues rotation about unit `axis` by `angle` radians.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotation angle of `m` in radians.
pub fn rotation_angle(m: &Mat3) -> f64 {
    let tr = m[0][0] + m[1][1] + m[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let c = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        c.validate()?;
        Ok(c)
    }

    /// Square image with the principal point at the centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// All pixel quantities multiplied by `factor` (resolution change).
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    /// Continuous pixel coordinates of a camera-space point (z must be non-zero).
    #[inline]
    pub fn project(&self, pc: Vec3) -> (f64, f64) {
        (self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy)
    }

    /// Camera-space point at depth `z` (camera-frame z) seen at pixel `(u, v)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        [(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z]
    }
}

/// World-to-camera rigid transform `x_cam = R x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    translation: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - want).abs() > 1e-9 {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        if (det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rotation has determinant != +1"));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    /// Pose of a camera centred at `center` (world) with world-to-camera rotation `rotation`.
    pub fn from_center(rotation: Mat3, center: Vec3) -> Result<Self> {
        Self::new(rotation, scale(mat_vec(&rotation, center), -1.0))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    #[inline]
    pub fn to_camera(&self, pw: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, pw), self.translation)
    }

    #[inline]
    pub fn to_world(&self, pc: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(pc, self.translation))
    }

    /// Row-major 3×4 `[R|t]`.
    pub fn to_matrix(&self) -> [[f64; 4]; 3] {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.rotation[i]);
            m[i][3] = self.translation[i];
        }
        m
    }

    pub fn from_matrix(m: &[[f64; 4]; 3]) -> Result<Self> {
        let mut r = [[0.0; 3]; 3];
        let mut t = [0.0; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&m[i][..3]);
            t[i] = m[i][3];
        }
        Self::new(r, t)
    }
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_matrix().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = <[[f64; 4]; 3]>::deserialize(d)?;
        CameraPose::from_matrix(&m).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rodrigues_is_a_rotation() {
        let r = axis_angle([0.3, -1.0, 0.2], 0.4);
        let p = CameraPose::new(r, [1.0, 2.0, 3.0]).unwrap();
        assert!((rotation_angle(p.rotation()) - 0.4).abs() < 1e-12);
        let x = [0.5, -0.25, 4.0];
        let back = p.to_world(p.to_camera(x));
        for i in 0..3 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
        let c = p.center();
        assert!(norm(p.to_camera(c)) < 1e-12);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let reflect = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraPose::new(reflect, [0.0; 3]).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraPose::new(skew, [0.0; 3]).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let c = CameraIntrinsics::centered(50.0, 64, 48).unwrap();
        assert_eq!((c.cx, c.cy), (32.0, 24.0));
        let pc = c.unproject(10.25, 3.5, 2.0);
        let (u, v) = c.project(pc);
        assert!((u - 10.25).abs() < 1e-12 && (v - 3.5).abs() < 1e-12);
    }

    #[test]
    fn pose_json_is_row_major_3x4() {
        let p = CameraPose::new(axis_angle([0.0, 1.0, 0.0], 0.1), [1.0, 2.0, 3.0]).unwrap();
        let v = serde_json::to_value(p).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 3);
        assert_eq!(v[1][3].as_f64().unwrap(), 2.0);
        let back: CameraPose = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
