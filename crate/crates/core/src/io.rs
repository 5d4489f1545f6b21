//! Disparity and image file formats.
//!
//! Disparity maps read and write as PFM (grayscale "Pf", little-endian
//! float32, bottom-to-top row order) and as lossless 16-bit PNG with 1/256 px
//! quantization where the zero value marks invalid pixels. Stereo views save
//! as 16-bit RGB PNG.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{SceneDataset, StereoPair};
use crate::tensor::{Grid, Mask, Vol};

/// Write a disparity map as grayscale PFM. The negative scale declares
/// little-endian sample order.
pub fn write_pfm(path: &Path, map: &Grid) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(32 + map.data.len() * 4);
    buf.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", map.w, map.h).as_bytes());
    // PFM rows run bottom to top
    for y in (0..map.h).rev() {
        for x in 0..map.w {
            buf.extend_from_slice(&(map.at(y, x) as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path)?;
    // header: three whitespace-terminated tokens
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PFM header".into()));
        }
        let s = String::from_utf8_lossy(&bytes[start..pos]).to_string();
        pos += 1; // single whitespace after the token
        Ok(s)
    };
    let magic = token(&bytes)?;
    if magic != "Pf" {
        return Err(Error::Parse(format!("not a grayscale PFM (magic '{magic}')")));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::Parse("bad PFM width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::Parse("bad PFM height".into()))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| Error::Parse("bad PFM scale".into()))?;
    let little = scale < 0.0;
    let data_start = pos;
    if bytes.len() < data_start + w * h * 4 {
        return Err(Error::Parse("PFM payload truncated".into()));
    }
    let mut map = Grid::zeros(h, w);
    for ry in 0..h {
        let y = h - 1 - ry;
        for x in 0..w {
            let off = data_start + (ry * w + x) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            *map.at_mut(y, x) = v as f64;
        }
    }
    Ok(map)
}

/// 16-bit PNG disparity: value = round(256 * d), zero marks invalid.
pub fn write_disparity_png(path: &Path, map: &Grid, mask: Option<&Mask>) -> Result<()> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(map.w as u32, map.h as u32);
    for y in 0..map.h {
        for x in 0..map.w {
            let valid = mask.map_or(true, |m| m.at(y, x));
            let v = if valid {
                ((map.at(y, x) * 256.0).round().clamp(0.0, 65535.0)) as u16
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn read_disparity_png(path: &Path) -> Result<(Grid, Mask)> {
    let img = image::open(path).map_err(|e| Error::Parse(format!("png: {e}")))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = Grid::zeros(h, w);
    let mut mask = Mask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            if v != 0 {
                *map.at_mut(y, x) = v as f64 / 256.0;
                mask.set(y, x, true);
            }
        }
    }
    Ok((map, mask))
}

/// 16-bit RGB PNG for stereo views; values in [0, 1] quantized to u16.
pub fn write_image_png(path: &Path, image: &Vol) -> Result<()> {
    let mut img =
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(image.w as u32, image.h as u32);
    for y in 0..image.h {
        for x in 0..image.w {
            let px: [u16; 3] = std::array::from_fn(|c| {
                (image.at(c, 0, y, x).clamp(0.0, 1.0) * 65535.0).round() as u16
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn read_image_png(path: &Path) -> Result<Vol> {
    let img = image::open(path).map_err(|e| Error::Parse(format!("png: {e}")))?.into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vol::zeros(3, 1, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *out.at_mut(c, 0, y, x) = px.0[c] as f64 / 65535.0;
            }
        }
    }
    Ok(out)
}

/// Write one scene to `dir`: per split, numbered pair directories with the
/// two views, the PFM and PNG disparities, and a validity mask.
pub fn write_scene(dir: &Path, ds: &SceneDataset) -> Result<()> {
    for (split, pairs) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, pair) in pairs.iter().enumerate() {
            let pdir = dir.join(split).join(format!("pair_{i:04}"));
            fs::create_dir_all(&pdir)?;
            write_image_png(&pdir.join("left.png"), &pair.left)?;
            write_image_png(&pdir.join("right.png"), &pair.right)?;
            if let Some(gt) = &pair.gt_disparity {
                write_pfm(&pdir.join("disparity.pfm"), gt)?;
                write_disparity_png(&pdir.join("disparity.png"), gt, pair.gt_mask.as_ref())?;
            }
        }
    }
    fs::write(
        dir.join("scene.toml"),
        toml::to_string_pretty(&ds.spec).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}

/// A stereo pair loaded back from disk.
pub fn read_pair(pdir: &Path) -> Result<StereoPair> {
    let left = read_image_png(&pdir.join("left.png"))?;
    let right = read_image_png(&pdir.join("right.png"))?;
    let (gt_disparity, gt_mask) = if pdir.join("disparity.pfm").exists() {
        let gt = read_pfm(&pdir.join("disparity.pfm"))?;
        let mask = if pdir.join("disparity.png").exists() {
            Some(read_disparity_png(&pdir.join("disparity.png"))?.1)
        } else {
            None
        };
        (Some(gt), mask)
    } else {
        (None, None)
    };
    Ok(StereoPair { left, right, gt_disparity, gt_mask })
}
