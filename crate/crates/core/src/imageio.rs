//! Image files as H×W×C tensors with values in [0, 1].
//!
//! Up to three channels are stored as 8-bit PNG (grayscale or RGB). Wider
//! multi-band images use a raw tensor file:
//!
//! ```text
//! offset  size          content
//! 0       8             magic "HYDRTNS1"
//! 8       12            u32 LE height, width, channels
//! 20      4·H·W·C       f32 LE values, row-major H×W×C
//! ```

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 8] = b"HYDRTNS1";
pub const RAW_EXTENSION: &str = "tns";

/// PNG for one or three channels, the raw format otherwise.
pub fn extension_for(channels: usize) -> &'static str {
    if channels == 1 || channels == 3 {
        "png"
    } else {
        RAW_EXTENSION
    }
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, t),
        Some(RAW_EXTENSION) => write_raw(path, t),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unknown image extension",
            path.display()
        ))),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some(RAW_EXTENSION) => read_raw(path),
        _ => Err(Error::Data(format!("{}: unknown image extension", path.display()))),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.hwc()?;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::InvalidArgument(format!("png cannot hold {c} channels"))),
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    crate::fsutil::write_atomic(path, &buf)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!("{}: only 8-bit PNG is supported", path.display())));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported colour type {other:?}",
                path.display()
            )))
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, c], data)
}

pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.hwc()?;
    let mut out = Vec::with_capacity(20 + 4 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    crate::fsutil::write_atomic(path, &out)
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("not a raw tensor file"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if bytes.len() != 20 + 4 * n {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data)
}
