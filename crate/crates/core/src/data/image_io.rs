//! 8-bit RGB image files. Pixel values in `[-1, 1]` map linearly to `0..=255`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB bytes of a `[3, H, W]` tensor; values are clamped.
pub fn to_rgb8<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize, Vec<u8>)> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("to_rgb8", image.shape(), &[3]));
    };
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            let v = (d[c * plane + p].as_f64() + 1.0) * 127.5;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((w, h, out))
}

pub fn from_rgb8<S: Scalar>(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<S>> {
    let plane = width * height;
    if rgb.len() != 3 * plane {
        return Err(Error::format("image", format!("{} bytes for {width}x{height} RGB", rgb.len())));
    }
    Ok(Tensor::from_fn([3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        S::lit(rgb[3 * p + c] as f64 / 127.5 - 1.0)
    }))
}

pub fn encode_ppm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb8(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    // header: magic, width, height, maxval, separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("ppm", format!("bad header field {s}")));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::format("ppm", "only binary 8-bit P6 is supported"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| Error::format("ppm", "truncated pixel data"))?;
    from_rgb8(w, h, body)
}

pub fn encode_png<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb8(image)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::format("png", e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut reader = png::Decoder::new(bytes).read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", format!("unsupported {:?} {:?}", info.color_type, info.bit_depth)));
    }
    from_rgb8(info.width as usize, info.height as usize, &buf[..info.buffer_size()])
}

/// Writes PPM or PNG by extension.
pub fn write_image<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => encode_png(image)?,
        Some("ppm") => encode_ppm(image)?,
        other => return Err(Error::format("image path", format!("unknown extension {other:?}"))),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads PPM or PNG by extension.
pub fn read_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => decode_png(&bytes),
        Some("ppm") => decode_ppm(&bytes),
        other => Err(Error::format("image path", format!("unknown extension {other:?}"))),
    }
}
