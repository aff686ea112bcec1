//! PNG encoding and the relevancy overlay.
//!
//! Scores are min-max normalized to t ∈ [0, 1]. Each pixel becomes
//! `(1 − a)·color + a·turbo(t)` with `a = OVERLAY_ALPHA · t`, so
//! irrelevant regions show the plain render and hot regions the ramp.

use anyhow::{ensure, Result};
use sparsesplat::query::RelevancyMap;
use sparsesplat::raster::Framebuffer;

pub const OVERLAY_ALPHA: f32 = 0.7;

/// Polynomial fit of the turbo colormap.
pub fn turbo(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) as f64;
    let poly = |c: [f64; 6]| c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
    [
        poly([0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943]),
        poly([0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]),
        poly([0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973]),
    ]
    .map(|v| v.clamp(0.0, 1.0) as f32)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB8 bytes of a 3-channel framebuffer.
pub fn color_bytes(fb: &Framebuffer) -> Result<Vec<u8>> {
    ensure!(fb.channels == 3, "color image needs 3 channels, got {}", fb.channels);
    Ok(fb.data.iter().map(|&v| to_byte(v)).collect())
}

pub fn overlay_bytes(color: &Framebuffer, map: &RelevancyMap) -> Result<Vec<u8>> {
    ensure!(
        color.channels == 3 && (color.width, color.height) == (map.width, map.height),
        "overlay needs a color render the size of the map"
    );
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(color.data.len());
    for (px, &s) in color.pixels().zip(&map.scores) {
        let t = if hi > lo { (s - lo) / span } else { 0.0 };
        let a = OVERLAY_ALPHA * t;
        let ramp = turbo(t);
        out.extend((0..3).map(|c| to_byte((1.0 - a) * px[c] + a * ramp[c])));
    }
    Ok(out)
}

pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    ensure!(rgb.len() == width * height * 3, "pixel buffer does not match {width}x{height}");
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, u32::try_from(width)?, u32::try_from(height)?);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsesplat::raster::ChannelTag;

    #[test]
    fn turbo_runs_from_blue_to_red() {
        let [r0, _, b0] = turbo(0.15);
        assert!(b0 > r0);
        let [r1, _, b1] = turbo(1.0);
        assert!(r1 > b1);
        assert_eq!(turbo(-3.0), turbo(0.0));
    }

    #[test]
    fn flat_map_leaves_render_untouched() {
        let color = Framebuffer::from_data(2, 1, 3, ChannelTag::Color, vec![0.2, 0.4, 0.6, 1.0, 0.0, 0.5]).unwrap();
        let map = RelevancyMap::from_scores(2, 1, vec![0.3, 0.3]).unwrap();
        assert_eq!(overlay_bytes(&color, &map).unwrap(), color_bytes(&color).unwrap());
    }

    #[test]
    fn hottest_pixel_takes_most_ramp() {
        let color = Framebuffer::zeros(2, 1, 3, ChannelTag::Color);
        let map = RelevancyMap::from_scores(2, 1, vec![0.1, 0.9]).unwrap();
        let out = overlay_bytes(&color, &map).unwrap();
        assert_eq!(&out[..3], &[0, 0, 0]);
        let expected = turbo(1.0).map(|v| to_byte(OVERLAY_ALPHA * v));
        assert_eq!(&out[3..], &expected);
    }

    #[test]
    fn png_has_signature_and_is_deterministic() {
        let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| i as u8).collect();
        let a = encode_png(4, 3, &rgb).unwrap();
        assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(a, encode_png(4, 3, &rgb).unwrap());
        assert!(encode_png(4, 4, &rgb).is_err());
    }
}
