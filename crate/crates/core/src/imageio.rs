//! Image decoding and encoding: binary PPM/PGM, PNG reading, bilinear
//! resizing, and the [-1, 1] pixel scaling used throughout training.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

/// Decoded 8-bit RGB image in row-major interleaved order.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // 3 bytes per pixel
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(CoreError::InvalidArgument(format!(
                "pixel buffer length {} does not match {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }
}

/// Read a PPM (P6) or PGM (P5) binary file, or a PNG, based on content.
pub fn decode_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| {
        CoreError::Data(format!("cannot read image file {}: {e}", path.display()))
    })?;
    let name = path.display().to_string();
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(&bytes, &name)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, &name)
    } else {
        Err(CoreError::Format {
            path: name,
            detail: "unrecognized image format (expected binary PPM/PGM or PNG)".into(),
        })
    }
}

fn decode_pnm(bytes: &[u8], name: &str) -> Result<RgbImage> {
    let mut r = BufReader::new(bytes);
    let err = |detail: String| CoreError::Format {
        path: name.to_string(),
        detail,
    };
    let magic = read_pnm_token(&mut r)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(err(format!("unsupported PNM magic {m}"))),
    };
    let width: usize = read_pnm_token(&mut r)?
        .parse()
        .map_err(|_| err("bad width".into()))?;
    let height: usize = read_pnm_token(&mut r)?
        .parse()
        .map_err(|_| err("bad height".into()))?;
    let maxval: usize = read_pnm_token(&mut r)?
        .parse()
        .map_err(|_| err("bad maxval".into()))?;
    if maxval != 255 {
        return Err(err(format!("only maxval 255 supported, got {maxval}")));
    }
    let mut raw = vec![0u8; width * height * channels];
    r.read_exact(&mut raw)
        .map_err(|_| err("truncated pixel data".into()))?;
    let pixels = if channels == 3 {
        raw
    } else {
        raw.iter().flat_map(|&g| [g, g, g]).collect()
    };
    RgbImage::new(width, height, pixels)
}

/// Read one whitespace-delimited PNM header token, skipping comments.
fn read_pnm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(CoreError::Format {
                    path: "<pnm>".into(),
                    detail: "unexpected end of header".into(),
                });
            }
            return Ok(token);
        }
        let c = byte[0];
        if c == b'#' {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

fn decode_png(bytes: &[u8], name: &str) -> Result<RgbImage> {
    let err = |detail: String| CoreError::Format {
        path: name.to_string(),
        detail,
    };
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(err("only 8-bit PNG supported".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => {
            data.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        other => return Err(err(format!("unsupported PNG color type {other:?}"))),
    };
    RgbImage::new(w, h, pixels)
}

/// Write a binary PPM (P6).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

/// Write a binary PGM (P5) from a single-channel byte plane.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(CoreError::InvalidArgument(format!(
            "plane length {} does not match {width}x{height}",
            gray.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(gray)?;
    Ok(())
}

/// Bilinear resize to the target size.
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let mut out = vec![0u8; width * height * 3];
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    for y in 0..height {
        // sample at pixel centers
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let p = |yy: usize, xx: usize| img.pixels[(yy * img.width + xx) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(y * width + x) * 3 + c] = (top * (1.0 - wy) + bot * wy).round() as u8;
            }
        }
    }
    RgbImage {
        width,
        height,
        pixels: out,
    }
}

/// u8 pixels to a [3, H, W] tensor in [-1, 1].
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.pixels[(y * w + x) * 3 + c] as f64;
                data[(c * h + y) * w + x] = fl(v / 127.5 - 1.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image tensor shape")
}

/// [3, H, W] tensor in [-1, 1] back to u8 pixels (round and clamp).
pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::ShapeMismatch {
            op: "from_tensor",
            detail: format!("expected [3,H,W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut pixels = vec![0u8; w * h * 3];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = t.data()[(c * h + y) * w + x].to_f64().unwrap_or(0.0);
                pixels[(y * w + x) * 3 + c] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(w, h, pixels)
}

/// Render a single-channel tensor plane to bytes, min-max normalized.
pub fn normalize_plane_to_bytes<T: Scalar>(plane: &[T]) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in plane {
        let v = v.to_f64().unwrap_or(0.0);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    plane
        .iter()
        .map(|v| {
            let v = v.to_f64().unwrap_or(0.0);
            (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_unscale_roundtrips_every_byte() {
        let pixels: Vec<u8> = (0..=255u8).flat_map(|v| [v, v, v]).collect();
        let img = RgbImage::new(16, 16, pixels.clone()).unwrap();
        let t = to_tensor::<f32>(&img);
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let back = from_tensor(&t).unwrap();
        assert_eq!(back.pixels, pixels);
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = std::env::temp_dir().join(format!("agewave-ppm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let pixels: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage::new(4, 2, pixels).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = decode_image(&path).unwrap();
        assert_eq!(back.width, 4);
        assert_eq!(back.height, 2);
        assert_eq!(back.pixels, img.pixels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pgm_reads_as_replicated_gray() {
        let dir = std::env::temp_dir().join(format!("agewave-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, 2, 2, &[0, 85, 170, 255]).unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!(img.pixels, vec![0, 0, 0, 85, 85, 85, 170, 170, 170, 255, 255, 255]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = RgbImage::new(8, 8, vec![100; 8 * 8 * 3]).unwrap();
        let same = resize_bilinear(&img, 8, 8);
        assert_eq!(same.pixels, img.pixels);
        let down = resize_bilinear(&img, 4, 4);
        assert!(down.pixels.iter().all(|&p| p == 100));
    }

    #[test]
    fn missing_file_error_names_the_file() {
        let err = decode_image(Path::new("/nonexistent/who.ppm")).unwrap_err();
        assert!(err.to_string().contains("who.ppm"));
    }
}
