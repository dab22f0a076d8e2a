use super::{Quaternion, Vec3};
use serde::{Deserialize, Serialize};

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Quaternion::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose { rotation: Quaternion::IDENTITY, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `(a.compose(b)).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(&self, o: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * o.rotation,
            translation: self.rotation.rotate(o.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.conjugate();
        Pose {
            rotation: inv_rot,
            translation: inv_rot.rotate(-self.translation),
        }
    }
}
