//! PNG reading and writing for pixel arrays, masks, image grids and simple charts.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::corpus::{Mask, Pixels};
use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Saves `pixels` as a 16-bit RGB PNG.
pub fn save_rgb(path: &Path, pixels: &Pixels) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, _) = pixels.dim();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::format(path, e))
}

/// Loads an 8- or 16-bit PNG into `[0, 1]` pixel values.
pub fn load_rgb(path: &Path) -> Result<Pixels> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let rgb = img.to_rgb16();
    let (w, h) = rgb.dimensions();
    Ok(Pixels::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
    }))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = mask.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| Error::format(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

fn to_rgb8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles equally sized images into rows of `columns`, each upscaled by `zoom`.
pub fn save_grid(path: &Path, images: &[Pixels], columns: usize, zoom: usize) -> Result<()> {
    ensure_parent(path)?;
    if images.is_empty() {
        return Err(Error::Parameter("image grid needs at least one image".into()));
    }
    let columns = columns.max(1);
    let (h, w, _) = images[0].dim();
    let rows = images.len().div_ceil(columns);
    let pad = 2;
    let cell_w = w * zoom + pad;
    let cell_h = h * zoom + pad;
    let mut out = RgbImage::from_pixel((columns * cell_w) as u32, (rows * cell_h) as u32, Rgb([255, 255, 255]));
    for (i, img) in images.iter().enumerate() {
        let (ox, oy) = ((i % columns) * cell_w, (i / columns) * cell_h);
        for y in 0..h * zoom {
            for x in 0..w * zoom {
                let (sy, sx) = (y / zoom, x / zoom);
                let p = Rgb([
                    to_rgb8(img[[sy, sx, 0]]),
                    to_rgb8(img[[sy, sx, 1]]),
                    to_rgb8(img[[sy, sx, 2]]),
                ]);
                out.put_pixel((ox + x) as u32, (oy + y) as u32, p);
            }
        }
    }
    out.save(path).map_err(|e| Error::format(path, e))
}

/// A labelled polyline for [`save_line_chart`].
pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: [u8; 3],
}

/// Renders series as polylines on a plain canvas with axes; no text.
pub fn save_line_chart(path: &Path, series: &[Series<'_>], width: u32, height: u32) -> Result<()> {
    ensure_parent(path)?;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return img.save(path).map_err(|e| Error::format(path, e));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (wf, hf) = (width as f64, height as f64);
    let map = |(x, y): (f64, f64)| {
        (
            margin + (x - x0) / (x1 - x0) * (wf - 2.0 * margin),
            hf - margin - (y - y0) / (y1 - y0) * (hf - 2.0 * margin),
        )
    };
    let axis = [90, 90, 90];
    draw_line(&mut img, (margin, hf - margin), (wf - margin, hf - margin), axis);
    draw_line(&mut img, (margin, margin), (margin, hf - margin), axis);
    for s in series {
        for pair in s.points.windows(2) {
            draw_line(&mut img, map(pair[0]), map(pair[1]), s.color);
        }
        for &p in s.points {
            let (cx, cy) = map(p);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut img, cx + dx as f64, cy + dy as f64, s.color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::format(path, e))
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (xi, yi) = (x.round() as i64, y.round() as i64);
    if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
        img.put_pixel(xi as u32, yi as u32, Rgb(color));
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, color);
    }
}
