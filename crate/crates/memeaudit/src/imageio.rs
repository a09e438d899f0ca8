//! Raster decoding and PNG encoding.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use memeaudit_core::raster::RasterImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("reading image {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("decoding image {path}: {source}")]
    Decode { path: String, source: image::ImageError },
    #[error("encoding png: {0}")]
    Encode(image::ImageError),
}

/// Encoded image bytes with their MIME type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub mime: &'static str,
    pub bytes: Vec<u8>,
}

impl EncodedImage {
    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.mime,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

/// Reads an image file as-is, checking that it decodes.
pub fn read_encoded(path: &Path) -> Result<EncodedImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let format = image::guess_format(&bytes).map_err(|source| ImageError::Decode {
        path: path.display().to_string(),
        source,
    })?;
    let mime = match format {
        ImageFormat::Jpeg => "image/jpeg",
        _ => "image/png",
    };
    Ok(EncodedImage { mime, bytes })
}

pub fn load_raster(path: &Path) -> Result<RasterImage, ImageError> {
    let decode_err = |source| ImageError::Decode {
        path: path.display().to_string(),
        source,
    };
    let img = image::ImageReader::open(path)
        .map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?
        .decode()
        .map_err(decode_err)?
        .to_rgb8();
    Ok(from_rgb(&img))
}

pub fn from_rgb(img: &RgbImage) -> RasterImage {
    let pixels = img.pixels().map(|p| p.0).collect();
    RasterImage::new(img.width() as usize, img.height() as usize, pixels).expect("decoded images are non-empty")
}

pub fn to_rgb(raster: &RasterImage) -> RgbImage {
    let raw: Vec<u8> = raster.pixels().iter().flatten().copied().collect();
    RgbImage::from_raw(raster.width() as u32, raster.height() as u32, raw).expect("buffer matches dimensions")
}

pub fn encode_png(raster: &RasterImage) -> Result<EncodedImage, ImageError> {
    let mut bytes = Vec::new();
    to_rgb(raster)
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(ImageError::Encode)?;
    Ok(EncodedImage {
        mime: "image/png",
        bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let raster = RasterImage::from_fn(7, 5, |x, y| [x as u8 * 30, y as u8 * 40, 9]).unwrap();
        let png = encode_png(&raster).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, &png.bytes).unwrap();
        assert_eq!(load_raster(&p).unwrap(), raster);
        let read = read_encoded(&p).unwrap();
        assert_eq!(read.mime, "image/png");
        assert!(read.data_url().starts_with("data:image/png;base64,iVBOR"));
    }

    #[test]
    fn garbage_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"nope").unwrap();
        assert!(matches!(load_raster(&p), Err(ImageError::Decode { .. })));
    }
}
