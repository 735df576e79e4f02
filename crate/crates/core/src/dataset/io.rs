use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};

/// Integer grayscale raster as read from disk, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSlice {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

fn to_raw(img: DynamicImage) -> (RawSlice, u8) {
    let (width, height) = (img.width(), img.height());
    let (data, depth) = match img {
        DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(u16::from).collect(), 8),
        DynamicImage::ImageLuma16(b) => (b.into_raw(), 16),
        other if other.color().bytes_per_pixel() / other.color().channel_count() == 2 => {
            (other.to_luma16().into_raw(), 16)
        }
        other => (other.to_luma8().into_raw().into_iter().map(u16::from).collect(), 8),
    };
    (
        RawSlice {
            width,
            height,
            data,
        },
        depth,
    )
}

/// Decodes an in-memory PNG into a grayscale raster plus its container bit
/// depth (8 or 16). Color images are converted to luma.
pub fn decode_gray_png(bytes: &[u8]) -> Result<(RawSlice, u8)> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Png).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(to_raw(img))
}

pub fn read_gray_png(path: impl AsRef<Path>) -> Result<(RawSlice, u8)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(Cursor::new(bytes), ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(to_raw(img))
}

pub fn write_gray16_png(path: impl AsRef<Path>, raw: &RawSlice) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(raw.width, raw.height, raw.data.clone())
            .ok_or_else(|| Error::Shape(format!("raster buffer size mismatch for {}", path.display())))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes a binary mask as 8-bit PNG with foreground 255.
pub fn write_mask_png(path: impl AsRef<Path>, width: u32, height: u32, mask: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(width, height, data)
        .ok_or_else(|| Error::Shape(format!("mask buffer size mismatch for {}", path.display())))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let raw = RawSlice {
            width: 3,
            height: 2,
            data: vec![0, 1, 4095, 65535, 300, 12],
        };
        write_gray16_png(&p, &raw).unwrap();
        let (back, depth) = read_gray_png(&p).unwrap();
        assert_eq!(depth, 16);
        assert_eq!(back, raw);
    }

    #[test]
    fn mask_png_is_eight_bit_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_mask_png(&p, 2, 2, &[0, 1, 1, 0]).unwrap();
        let (back, depth) = read_gray_png(&p).unwrap();
        assert_eq!(depth, 8);
        assert_eq!(back.data, vec![0, 255, 255, 0]);
    }

    #[test]
    fn garbage_bytes_are_an_error() {
        assert!(decode_gray_png(b"not a png").is_err());
    }
}
