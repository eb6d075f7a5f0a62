//! PNG import/export. RGB images are 8-bit with round-half-even
//! quantization from [0,1]*255; masks are 1-bit grayscale.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use std::path::Path;

/// Write a [3,H,W] tensor with values in [0,1] as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape_mismatch(
            "save_rgb",
            "[3,H,W]",
            format!("{:?}", image.shape()),
        ));
    };
    if *c != 3 {
        return Err(Error::shape_mismatch(
            "save_rgb",
            "3 channels",
            format!("{c} channels"),
        ));
    }
    let (h, w) = (*h, *w);
    let mut bytes = Vec::with_capacity(h * w * 3);
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = data[ch * h * w + y * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round_ties_even() as u8);
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Read an 8-bit RGB(A) PNG into a [3,H,W] tensor with values in [0,1].
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(Error::Decode {
                path: path.display().to_string(),
                message: format!("unsupported color type {other:?}"),
            })
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Decode {
            path: path.display().to_string(),
            message: format!("unsupported bit depth {:?}", info.bit_depth),
        });
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * channels;
            for ch in 0..3 {
                let v = buf[px + ch.min(channels - 1)] as f32 / 255.0;
                data[ch * h * w + y * w + x] = v;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a binary [U,U] grid (values exactly 0 or 1) as a 1-bit PNG.
pub fn save_mask(path: &Path, grid: &Tensor) -> Result<()> {
    let [h, w] = grid.shape() else {
        return Err(Error::shape_mismatch(
            "save_mask",
            "[H,W]",
            format!("{:?}", grid.shape()),
        ));
    };
    let (h, w) = (*h, *w);
    let row_bytes = w.div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if grid.data()[y * w + x] >= 0.5 {
                bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Read a 1-bit grayscale PNG back into a binary [H,W] grid.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(Error::Decode {
            path: path.display().to_string(),
            message: "expected 1-bit grayscale mask".into(),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let bit = (buf[y * row_bytes + x / 8] >> (7 - x % 8)) & 1;
            data[y * w + x] = bit as f32;
        }
    }
    Tensor::new(vec![h, w], data)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_quantization_rounds_half_even() {
        // 0.5/255 is exactly half between 0 and 1 -> rounds to 0 (even);
        // 1.5/255 rounds to 2.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        let t = Tensor::new(
            vec![3, 1, 2],
            vec![0.5 / 255.0, 1.5 / 255.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        save_rgb(&p, &t).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 2.0 / 255.0);
    }

    #[test]
    fn rgb_roundtrip_is_exact_on_multiples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.png");
        let vals: Vec<f32> = (0..3 * 4 * 4).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::new(vec![3, 4, 4], vals.clone()).unwrap();
        save_rgb(&p, &t).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(back.data(), &vals[..]);
    }

    #[test]
    fn mask_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let vals: Vec<f32> = (0..17 * 9).map(|i| ((i * 7) % 3 == 0) as u8 as f32).collect();
        let t = Tensor::new(vec![9, 17], vals.clone()).unwrap();
        save_mask(&p, &t).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back.data(), &vals[..]);
    }

    #[test]
    fn corrupt_png_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png at all").unwrap();
        let err = load_rgb(&p).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "got: {err}");
    }
}
