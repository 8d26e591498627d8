//! PNG contact sheets: one row per video, one column per frame.

use std::path::Path;

use fashionflow::{Error, Result, Tensor};
use image::{Rgb, RgbImage};

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Write `(f, 3, h, w)` videos in `[-1, 1]` as a frame grid.
pub fn write_grid(path: &Path, videos: &[Tensor]) -> Result<()> {
    let first = videos.first().ok_or_else(|| Error::Contract("no videos to draw".into()))?;
    let [f, _, h, w] = match *first.shape() {
        [f, 3, h, w] => [f, 3, h, w],
        ref s => return Err(Error::Shape(format!("grid needs (f, 3, h, w) videos, got {s:?}"))),
    };
    let mut img = RgbImage::new((f * w) as u32, (videos.len() * h) as u32);
    for (row, v) in videos.iter().enumerate() {
        if v.shape() != first.shape() {
            return Err(Error::Shape("grid videos must share one shape".into()));
        }
        for t in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let px = |c: usize| to_byte(v.data()[((t * 3 + c) * h + y) * w + x]);
                    img.put_pixel((t * w + x) as u32, (row * h + y) as u32, Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}
