use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// `height × width × channels` grid of intensities in `[0, 1]`, row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image extent {height}×{width} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("image must have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}×{width}×{channels} image needs {} samples, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from samples that are clamped into `[0, 1]` first.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel-planar copy (`C×H×W`), the layout convolution expects.
    pub fn to_planar(&self) -> Vec<f64> {
        let area = self.height * self.width;
        let mut out = vec![0.0; area * self.channels];
        for (i, px) in self.pixels.chunks(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * area + i] = *v;
            }
        }
        out
    }

    /// Replicates a single channel into three; three-channel images pass through.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            height: self.height,
            width: self.width,
            channels: 3,
            pixels,
        }
    }

    /// 8-bit quantization, `round(v·255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

/// Reads a PNG, binary PPM (`P6`) or binary PGM (`P5`) file.
pub fn decode_image(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, path)
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes, path)
    } else {
        Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
        })
    }
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedImage {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed(path, "header ended early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(path, "missing separator after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
        });
    }
    let need = width * height * channels;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(malformed(path, format!("expected {need} samples, found {}", body.len())));
    }
    RasterImage::from_bytes(height, width, channels, &body[..need])
        .map_err(|e| malformed(path, e.to_string()))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| malformed(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| malformed(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| malformed(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let data = &buf[..info.buffer_size()];
    let (channels, samples): (usize, Vec<u8>) = match info.color_type {
        png::ColorType::Grayscale => (1, data.to_vec()),
        png::ColorType::GrayscaleAlpha => (1, data.chunks(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, data.to_vec()),
        png::ColorType::Rgba => (3, data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => {
            return Err(malformed(path, format!("unexpanded palette ({src_channels} samples)")))
        }
    };
    RasterImage::from_bytes(h, w, channels, &samples).map_err(|e| malformed(path, e.to_string()))
}

/// Binary PPM for three channels, PGM for one.
pub fn encode_pnm(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_bytes());
    out
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Writes PNG when the extension is `.png`, PPM/PGM otherwise.
pub fn write_image(img: &RasterImage, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(img)?,
        _ => encode_pnm(img),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Full-range BT.601 YCbCr → RGB, clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &RasterImage) -> Result<RasterImage> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "ycbcr_to_rgb needs 3 channels, got {}",
            img.channels()
        )));
    }
    let mut out = Vec::with_capacity(img.pixels().len());
    for px in img.pixels().chunks(3) {
        out.extend(ycbcr_to_rgb_unclamped([px[0], px[1], px[2]]));
    }
    RasterImage::from_clamped(img.height(), img.width(), 3, out)
}

pub fn ycbcr_to_rgb_unclamped([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let (cb, cr) = (cb - 0.5, cr - 0.5);
    [
        y + 1.402 * cr,
        y - 0.344136 * cb - 0.714136 * cr,
        y + 1.772 * cb,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_decoding_scales_samples() {
        let p = Path::new("mem.ppm");
        let img = decode_bytes(b"P6\n1 1\n255\n\xff\x00\x00", p).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0, 0.0]);
        assert_eq!(img.channels(), 3);

        let img = decode_bytes(b"P5\n# comment\n1 1\n255\n\x80", p).unwrap();
        assert_eq!(img.pixels(), &[128.0 / 255.0]);
        assert_eq!(img.channels(), 1);
    }

    #[test]
    fn truncated_and_unknown_inputs_are_distinct_errors() {
        let p = Path::new("broken.ppm");
        let err = decode_bytes(b"P6\n2 2\n255\n\x00\x01", p).unwrap_err();
        assert!(matches!(err, Error::MalformedImage { .. }));
        assert!(err.to_string().contains("broken.ppm"));
        let err = decode_bytes(b"GIF89a", p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
        let err = decode_bytes(b"P6\n1 1\n65535\n\x00\x00", p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
    }

    #[test]
    fn missing_file_names_path() {
        let err = decode_image(Path::new("/nonexistent/x.ppm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ppm"));
    }

    #[test]
    fn eight_bit_round_trips_are_exact() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(5 * 7 * 3).collect();
        let img = RasterImage::from_bytes(5, 7, 3, &bytes).unwrap();
        let p = Path::new("x");
        assert_eq!(decode_bytes(&encode_pnm(&img), p).unwrap(), img);
        assert_eq!(decode_bytes(&encode_png(&img).unwrap(), p).unwrap(), img);

        let gray = RasterImage::from_bytes(3, 2, 1, &[0, 1, 2, 128, 254, 255]).unwrap();
        assert_eq!(decode_bytes(&encode_pnm(&gray), p).unwrap(), gray);
        assert_eq!(decode_bytes(&encode_png(&gray).unwrap(), p).unwrap(), gray);
    }

    #[test]
    fn ycbcr_neutral_chroma() {
        let img = RasterImage::new(1, 2, 3, vec![0.5, 0.5, 0.5, 1.0, 0.5, 0.5]).unwrap();
        let rgb = ycbcr_to_rgb(&img).unwrap();
        for (a, e) in rgb.pixels().iter().zip([0.5, 0.5, 0.5, 1.0, 1.0, 1.0]) {
            assert!((a - e).abs() < 1e-15);
        }
        let gray = RasterImage::filled(1, 1, 1, 0.5).unwrap();
        assert!(ycbcr_to_rgb(&gray).is_err());
    }

    #[test]
    fn ycbcr_matches_matrix_oracle() {
        let m = [[1.0, 0.0, 1.402], [1.0, -0.344136, -0.714136], [1.0, 1.772, 0.0]];
        let triples = [[0.3, 0.7, 0.1], [0.9, 0.2, 0.8], [0.0, 1.0, 1.0], [0.51, 0.49, 0.37]];
        for t in triples {
            let v = [t[0], t[1] - 0.5, t[2] - 0.5];
            let got = ycbcr_to_rgb_unclamped(t);
            for r in 0..3 {
                let e: f64 = (0..3).map(|c| m[r][c] * v[c]).sum();
                assert!((got[r] - e).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn constructor_enforces_unit_interval() {
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(RasterImage::new(0, 1, 1, vec![]).is_err());
        let c = RasterImage::from_clamped(1, 2, 1, vec![-0.2, 1.7]).unwrap();
        assert_eq!(c.pixels(), &[0.0, 1.0]);
    }
}
