//! 8-bit RGB images as PNG or binary PPM (P6), and 16-bit grey label PNGs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Reads an 8-bit RGB image; the format is detected from the file's magic bytes.
pub fn read_image(path: &Path) -> Result<Raster> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let decoded = if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        Err("unrecognised image format (expected PNG or P6 PPM)".to_string())
    };
    decoded.map_err(|m| Error::Data(format!("{}: {m}", path.display())))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(format!("unsupported PNG colour type {other:?}")),
    };
    Ok(Raster::from_u8(w, h, 3, &rgb))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    // header: P6 <ws> width <ws> height <ws> maxval <single ws> data
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PPM header")?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("PPM maxval {maxval} unsupported (need 255)"));
    }
    pos += 1;
    let need = w * h * 3;
    let data = bytes.get(pos..pos + need).ok_or("truncated PPM data")?;
    Ok(Raster::from_u8(w, h, 3, data))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn png_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

pub fn write_png(path: &Path, image: &Raster) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Param(format!("PNG writer expects 3 channels, got {}", image.channels)));
    }
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&image.to_u8()).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn write_ppm(path: &Path, image: &Raster) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Param(format!("PPM writer expects 3 channels, got {}", image.channels)));
    }
    let mut w = create(path)?;
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)
        .and_then(|_| w.write_all(&image.to_u8()))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// 16-bit greyscale PNG of per-pixel labels.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u16]) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Reads back a 16-bit label PNG as `(width, height, labels)`.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(f));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Data(format!("{}: not a 16-bit grey label image", path.display())));
    }
    let labels = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((info.width as usize, info.height as usize, labels))
}
