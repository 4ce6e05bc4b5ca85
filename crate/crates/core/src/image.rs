//! 8-bit grayscale rasters and their PNG encodings.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image buffer holds {found} pixels, expected {width}x{height}")]
    Size { width: usize, height: usize, found: usize },
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ImageError>;

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(ImageError::Size {
                width,
                height,
                found: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }
}

/// Boolean raster, stored as 1-bit PNGs on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(ImageError::Size {
                width,
                height,
                found: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

fn encode(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn encode_gray_png(image: &GrayImage) -> Result<Vec<u8>> {
    encode(
        image.width,
        image.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &image.pixels,
    )
}

/// `rgb` is interleaved `[r, g, b, r, g, b, ...]`.
pub fn encode_rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(ImageError::Size {
            width,
            height,
            found: rgb.len() / 3,
        });
    }
    encode(width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let stride = mask.width.div_ceil(8);
    let mut packed = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.bits[y * mask.width + x] {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode(mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
}

/// Decodes any PNG to 8-bit grayscale; colour inputs are reduced by
/// integer Rec. 601 luma and alpha is dropped.
pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let buf = &buf[..info.buffer_size()];
    let pixels = match channels {
        1 => buf.to_vec(),
        2 => buf.chunks_exact(2).map(|p| p[0]).collect(),
        _ => buf
            .chunks_exact(channels)
            .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
            .collect(),
    };
    GrayImage::new(width, height, pixels)
}

/// Any nonzero gray level counts as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let image = decode_gray_png(bytes)?;
    Mask::new(
        image.width,
        image.height,
        image.pixels.iter().map(|&p| p > 0).collect(),
    )
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_error(path))
}

pub fn save_gray(image: &GrayImage, path: &Path) -> Result<()> {
    write_bytes(path, &encode_gray_png(image)?)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_bytes(path, &encode_mask_png(mask)?)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    decode_gray_png(&std::fs::read(path).map_err(io_error(path))?)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_mask_png(&std::fs::read(path).map_err(io_error(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 200, 255, 7]).unwrap();
        assert_eq!(decode_gray_png(&encode_gray_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn mask_round_trip_with_ragged_width() {
        let bits: Vec<bool> = (0..11 * 3).map(|i| i % 3 == 0 || i % 7 == 1).collect();
        let mask = Mask::new(11, 3, bits).unwrap();
        let bytes = encode_mask_png(&mask).unwrap();
        assert_eq!(decode_mask_png(&bytes).unwrap(), mask);
    }

    #[test]
    fn rgb_is_reduced_to_luma() {
        let bytes = encode_rgb_png(2, 1, &[255, 255, 255, 255, 0, 0]).unwrap();
        let gray = decode_gray_png(&bytes).unwrap();
        assert_eq!(gray.pixels(), &[255, 76]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
    }
}
