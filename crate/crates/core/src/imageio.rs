//! PNG encoding for renders, label maps and depth maps.

use std::io::Cursor;
use std::path::Path;

use crate::error::{io_err, Error, Result};

fn encode(w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let img_err = |e: png::EncodingError| Error::Image { path: "<memory>".into(), msg: e.to_string() };
        let mut writer = enc.write_header().map_err(img_err)?;
        writer.write_image_data(data).map_err(img_err)?;
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG from an H x W x 3 float image in [0, 1].
pub fn encode_rgb(res: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = rgb.iter().map(|v| to_u8(*v)).collect();
    encode(res, res, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn encode_labels(res: usize, labels: &[u8]) -> Result<Vec<u8>> {
    encode(res, res, png::ColorType::Grayscale, png::BitDepth::Eight, labels)
}

/// Depth mapped linearly from [near, far] onto 16-bit grey.
pub fn encode_depth(res: usize, depth: &[f32], near: f64, far: f64) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for d in depth {
        let u = ((*d as f64 - near) / (far - near)).clamp(0.0, 1.0);
        bytes.extend_from_slice(&((u * 65535.0).round() as u16).to_be_bytes());
    }
    encode(res, res, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
];

pub fn encode_label_preview(res: usize, labels: &[u8]) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| PALETTE[*l as usize % PALETTE.len()]).collect();
    encode(res, res, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn write_rgb(path: &Path, res: usize, rgb: &[f32]) -> Result<()> {
    write(path, &encode_rgb(res, rgb)?)
}

pub fn write_labels(path: &Path, res: usize, labels: &[u8]) -> Result<()> {
    write(path, &encode_labels(res, labels)?)
}

pub fn write_label_preview(path: &Path, res: usize, labels: &[u8]) -> Result<()> {
    write(path, &encode_label_preview(res, labels)?)
}

pub fn write_depth(path: &Path, res: usize, depth: &[f32], near: f64, far: f64) -> Result<()> {
    write(path, &encode_depth(res, depth, near, far)?)
}

/// Decoded 8-bit image: (width, height, channels, samples).
pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Decoded> {
    let img_err = |msg: String| Error::Image { path: origin.to_path_buf(), msg };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        data: buf,
    })
}

pub fn read(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

/// Square single-channel label map.
pub fn decode_labels(bytes: &[u8], origin: &Path) -> Result<(usize, Vec<u8>)> {
    let d = decode(bytes, origin)?;
    if d.channels != 1 || d.width != d.height {
        return Err(Error::Image {
            path: origin.to_path_buf(),
            msg: format!("expected square single-channel labels, got {}x{}x{}", d.width, d.height, d.channels),
        });
    }
    Ok((d.width, d.data))
}

pub fn read_labels(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_labels(&bytes, path)
}

/// Square RGB image as floats in [0, 1].
pub fn read_rgb(path: &Path) -> Result<(usize, Vec<f32>)> {
    let d = read(path)?;
    if d.channels != 3 || d.width != d.height {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected square RGB, got {}x{}x{}", d.width, d.height, d.channels),
        });
    }
    Ok((d.width, d.data.iter().map(|v| *v as f32 / 255.0).collect()))
}
