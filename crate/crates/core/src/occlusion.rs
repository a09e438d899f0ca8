//! White-patch occlusion of single superpixels.

use alloc::format;
use alloc::string::String;

use thiserror::Error;

use crate::raster::RasterImage;
use crate::slic::SuperpixelMap;

pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OcclusionError {
    #[error("segment {segment_id} out of range for a map with {segment_count} segments")]
    SegmentOutOfRange { segment_id: usize, segment_count: usize },
    #[error("map is {map_w}x{map_h} but image is {img_w}x{img_h}")]
    SizeMismatch {
        map_w: usize,
        map_h: usize,
        img_w: usize,
        img_h: usize,
    },
}

/// Copy of `image` with every pixel of `segment_id` painted white.
pub fn occlude(image: &RasterImage, map: &SuperpixelMap, segment_id: usize) -> Result<RasterImage, OcclusionError> {
    if (map.width(), map.height()) != (image.width(), image.height()) {
        return Err(OcclusionError::SizeMismatch {
            map_w: map.width(),
            map_h: map.height(),
            img_w: image.width(),
            img_h: image.height(),
        });
    }
    if segment_id >= map.segment_count() {
        return Err(OcclusionError::SegmentOutOfRange {
            segment_id,
            segment_count: map.segment_count(),
        });
    }
    let mut out = image.clone();
    for (px, &l) in out.pixels_mut().iter_mut().zip(map.labels()) {
        if l as usize == segment_id {
            *px = WHITE;
        }
    }
    Ok(out)
}

/// Identifier of an occluded variant, as stamped into request keys and file names.
pub fn occlusion_id(segment_id: usize) -> String {
    format!("occ{segment_id}")
}

/// Inverse of [`occlusion_id`].
pub fn parse_occlusion_id(id: &str) -> Option<usize> {
    let digits = id.strip_prefix("occ")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}
