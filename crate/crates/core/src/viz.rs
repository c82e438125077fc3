//! Cluster overlay: every image pixel tinted by the cluster its feature-map
//! cell joined, cluster centers marked in white.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, RgbImage};

use crate::config::{PipelineConfig, LEVELS};
use crate::dataio::Frame;
use crate::error::{Result, VloError};
use crate::local_fuser::LocalFuseCache;
use crate::nn::ParamStore;
use crate::pipeline::encode_frame;
use crate::tensor::FeatureGrid;

/// Distinct, deterministic colour per center index.
pub fn center_color(i: usize) -> [u8; 3] {
    // Golden-ratio hue walk at full saturation.
    let hue = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v: f64| (40.0 + 215.0 * v).round() as u8)
}

/// Overlay at the resolution of `image`; `stride` maps image pixels to
/// feature-map cells.
pub fn cluster_overlay(image: &FeatureGrid, cache: &LocalFuseCache, map_h: usize, map_w: usize, stride: usize) -> Result<RgbImage> {
    if image.c != 3 {
        return Err(VloError::InvalidInput(format!("overlay needs an RGB image, got {} channels", image.c)));
    }
    if cache.assignment.center_of.len() != map_h * map_w {
        return Err(VloError::InvalidInput("assignment does not match the feature map".into()));
    }
    let mut out = RgbImage::new(image.w as u32, image.h as u32);
    for r in 0..image.h {
        for c in 0..image.w {
            let px = image.pixel(r, c);
            let gray = (px[0] + px[1] + px[2]) / 3.0 * 255.0;
            let cell = (r / stride).min(map_h - 1) * map_w + (c / stride).min(map_w - 1);
            let rgb = match cache.assignment.center_of[cell] {
                Some(i) => {
                    let k = center_color(i);
                    [0, 1, 2].map(|ch| (0.35 * gray + 0.65 * k[ch] as f64).round() as u8)
                }
                None => [(0.4 * gray).round() as u8; 3],
            };
            out.put_pixel(c as u32, r as u32, image::Rgb(rgb));
        }
    }
    for (p, ok) in cache.coords.iter().zip(&cache.valid) {
        if !ok {
            continue;
        }
        let x = ((p[0] + 0.5) * stride as f64 - 0.5).round() as i64;
        let y = ((p[1] + 0.5) * stride as f64 - 0.5).round() as i64;
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (u, v) = (x + dx, y + dy);
            if u >= 0 && v >= 0 && (u as usize) < image.w && (v as usize) < image.h {
                out.put_pixel(u as u32, v as u32, image::Rgb([255, 255, 255]));
            }
        }
    }
    Ok(out)
}

/// Runs the encoders on `frame` and draws the clusters of `level`.
pub fn cluster_viz(params: &ParamStore, cfg: &PipelineConfig, frame: &Frame, level: usize) -> Result<RgbImage> {
    if level >= LEVELS {
        return Err(VloError::InvalidInput(format!("level {level} out of range 0..{LEVELS}")));
    }
    let (_, cache) = encode_frame(params, cfg, frame)?;
    let map = &cache.image_levels[level];
    cluster_overlay(&frame.image, &cache.local[level], map.h, map.w, PipelineConfig::level_stride(level))
}

/// Binary (P6) portable pixmap.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let err = |reason: String| VloError::Load {
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::create(path).map_err(|e| err(e.to_string()))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_fuser::{local_fuse, LocalFuseOptions};
    use crate::nn::ParamStore;

    #[test]
    fn palette_is_deterministic_and_varied() {
        assert_eq!(center_color(3), center_color(3));
        assert_ne!(center_color(0), center_color(1));
    }

    #[test]
    fn single_center_colours_its_whole_region() {
        let mut p = ParamStore::new(1);
        crate::local_fuser::init_local_fuser(&mut p, 0, 3);
        let mut feat = FeatureGrid::zeros(4, 6, 3);
        for (i, v) in feat.data.iter_mut().enumerate() {
            *v = 0.1 + (i % 5) as f64 * 0.2;
        }
        let opts = LocalFuseOptions {
            region_h: 4,
            region_w: 6,
            with_positions: false,
            on_values: false,
        };
        let (_, cache) = local_fuse(&p, 0, opts, &feat, &[[2.3, 1.6]], &[true]).unwrap();
        let image = FeatureGrid::zeros(8, 12, 3);
        let img = cluster_overlay(&image, &cache, 4, 6, 2).unwrap();
        let tint = *img.get_pixel(0, 0);
        let white = image::Rgb([255, 255, 255]);
        let non_white: Vec<_> = img.pixels().filter(|p| **p != white).collect();
        assert!(non_white.len() >= 8 * 12 - 5);
        assert!(non_white.iter().all(|p| **p == tint));
    }

    #[test]
    fn writes_binary_pixmap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &RgbImage::new(3, 2)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert!(bytes.ends_with(&[0u8; 18]));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let img = RgbImage::new(2, 2);
        assert!(write_ppm(Path::new("/nonexistent-dir/x.ppm"), &img).is_err());
    }
}
