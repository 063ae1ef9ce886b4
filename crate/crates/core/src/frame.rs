use crate::error::{MvsError, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::grid::{ColorImage, GrayImage};

/// One posed image at one resolution.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    pub index: usize,
    pub intrinsics: CameraIntrinsics,
    /// World-from-camera transform.
    pub pose: Pose,
    pub color: ColorImage,
    pub gray: GrayImage,
}

impl CameraFrame {
    pub fn new(index: usize, intrinsics: CameraIntrinsics, pose: Pose, color: ColorImage) -> Result<Self> {
        if color.width() != intrinsics.width || color.height() != intrinsics.height {
            return Err(MvsError::InvalidInput(format!(
                "frame {index}: image is {}x{} but intrinsics describe {}x{}",
                color.width(),
                color.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        let gray = color.to_gray();
        Ok(CameraFrame {
            index,
            intrinsics,
            pose,
            color,
            gray,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}
