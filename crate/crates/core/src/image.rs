//! Raster types flowing from the cart cameras through the vision pipelines,
//! plus their raw payload encodings.
//!
//! Color/gray payload: `u8 channels, u16 width, u16 height, pixels`.
//! Depth payload: `u16 width, u16 height, u16 depth_mm per pixel`.
//! All integers big-endian.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("image dimensions must be non-zero (got {width}x{height})")]
    ZeroSize { width: usize, height: usize },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("malformed frame payload: {0}")]
    Payload(&'static str),
    #[error("crop {x},{y} {w}x{h} outside {width}x{height}")]
    CropBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
}

fn check_dims(width: usize, height: usize, len: usize, channels: usize) -> Result<(), FrameError> {
    if width == 0 || height == 0 {
        return Err(FrameError::ZeroSize { width, height });
    }
    let expected = width * height * channels;
    if len != expected {
        return Err(FrameError::BufferLength {
            expected,
            actual: len,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, FrameError> {
        check_dims(width, height, pixels.len(), 1)?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, FrameError> {
        Self::new(width, height, vec![value; width * height])
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

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, FrameError> {
        check_dims(width, height, pixels.len(), 3)?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Interleaved RGB bytes, row-major.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// ITU-R BT.601 luma, rounded to nearest.
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ColorImage, FrameError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(FrameError::CropBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        ColorImage::new(w, h, pixels)
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.pixels.len());
        out.push(3);
        out.extend_from_slice(&(self.width as u16).to_be_bytes());
        out.extend_from_slice(&(self.height as u16).to_be_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 5 {
            return Err(FrameError::Payload("short header"));
        }
        if bytes[0] != 3 {
            return Err(FrameError::Payload("not a 3-channel image"));
        }
        let width = u16::from_be_bytes([bytes[1], bytes[2]]) as usize;
        let height = u16::from_be_bytes([bytes[3], bytes[4]]) as usize;
        ColorImage::new(width, height, bytes[5..].to_vec())
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    depth_mm: Vec<u16>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, depth_mm: Vec<u16>) -> Result<Self, FrameError> {
        check_dims(width, height, depth_mm.len(), 1)?;
        Ok(Self {
            width,
            height,
            depth_mm,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth_mm(&self) -> &[u16] {
        &self.depth_mm
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.depth_mm.len() * 2);
        out.extend_from_slice(&(self.width as u16).to_be_bytes());
        out.extend_from_slice(&(self.height as u16).to_be_bytes());
        for d in &self.depth_mm {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 4 {
            return Err(FrameError::Payload("short header"));
        }
        let width = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
        let height = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
        let body = &bytes[4..];
        if body.len() % 2 != 0 {
            return Err(FrameError::Payload("odd depth buffer length"));
        }
        let depth_mm = body
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        DepthFrame::new(width, height, depth_mm)
    }
}
