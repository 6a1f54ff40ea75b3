//! Image file I/O: 8-bit PNG and BMP, 1 or 3 channels.
//!
//! Masks are serialized as single-channel PNG with values {0, 255}.
//! Class-index maps use paletted (indexed) PNG so the stored bytes are the
//! class ids themselves.

use super::{BinaryMask, RasterImage};
use crate::{Error, Result};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

/// Read a PNG or BMP file. Grayscale sources load as 1 channel, everything
/// else as RGB.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    let dynimg = image::open(path)?;
    let img = match dynimg {
        DynamicImage::ImageLuma8(g) => RasterImage::from_data(
            g.width() as usize,
            g.height() as usize,
            1,
            g.into_raw(),
        )?,
        DynamicImage::ImageLumaA8(ga) => {
            let g = DynamicImage::ImageLumaA8(ga).to_luma8();
            RasterImage::from_data(g.width() as usize, g.height() as usize, 1, g.into_raw())?
        }
        other => {
            let rgb = other.to_rgb8();
            RasterImage::from_data(
                rgb.width() as usize,
                rgb.height() as usize,
                3,
                rgb.into_raw(),
            )?
        }
    };
    Ok(img)
}

/// Write a PNG or BMP file; the format follows the path extension.
pub fn write_image(path: &Path, img: &RasterImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    match img.channels {
        1 => {
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
                    .expect("dimensions match data");
            buf.save(path)?;
        }
        _ => {
            let buf: ImageBuffer<Rgb<u8>, _> =
                ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
                    .expect("dimensions match data");
            buf.save(path)?;
        }
    }
    Ok(())
}

/// Write a mask as an L8 PNG with foreground = 255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = RasterImage::from_data(mask.width, mask.height, 1, data)?;
    write_image(path, &img)
}

/// Read a {0,255} mask PNG; values >= 128 count as foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = read_image(path)?;
    let gray = img.to_gray();
    BinaryMask::from_data(
        gray.width,
        gray.height,
        gray.data.iter().map(|&v| v >= 128).collect(),
    )
}

/// Write class indices as a paletted PNG. `palette` maps each index to an
/// RGB display color; stored pixel bytes are the indices.
pub fn write_indexed_png(
    path: &Path,
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
) -> Result<()> {
    if indices.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "index buffer length {} != {}x{}",
            indices.len(),
            width,
            height
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    encoder.set_palette(flat);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
    writer
        .write_image_data(indices)
        .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
    Ok(())
}

/// Read a paletted PNG back as raw class indices.
pub fn read_indexed_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(file);
    // Keep the palette indices instead of expanding to RGB.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::InvalidInput(format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::InvalidInput(format!("png decode: {e}")))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::InvalidInput(
            "expected 8-bit indexed png".to_string(),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
