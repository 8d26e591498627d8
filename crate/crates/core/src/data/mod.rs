//! Synthetic video data, the VTEN tensor file format, the checkpoint
//! container and the on-disk dataset layout.

pub mod checkpoint;
pub mod synthetic;
pub mod vten;

use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::Checkpoint;
pub use synthetic::{generate_dataset, generate_linear, Dataset, SyntheticVideoSpec, VideoSample};
pub use vten::{read_tensor, write_tensor};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub fn video_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("vid_{index:04}.vten"))
}

pub fn cond_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("cond_{index:04}.vten"))
}

/// Write `vid_%04d.vten` and `cond_%04d.vten` for every sample.
pub fn write_split(dir: &Path, samples: &[VideoSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_tensor(video_path(dir, i), &s.video)?;
        write_tensor(cond_path(dir, i), &s.cond)?;
    }
    Ok(())
}

/// Write `train/` and `test/` under `root`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    write_split(&root.join("train"), &ds.train)?;
    write_split(&root.join("test"), &ds.test)
}

/// Read every `vid_%04d.vten` of a directory in index order, with the
/// matching `cond_%04d.vten` when present (frame 0 otherwise).
pub fn read_split(dir: &Path) -> Result<Vec<VideoSample>> {
    let mut out = Vec::new();
    for i in 0.. {
        let vp = video_path(dir, i);
        if !vp.exists() {
            break;
        }
        let video = read_tensor(&vp)?;
        if video.rank() != 4 || video.dim(1) != 3 {
            return Err(shape_err!("{} holds {:?}, expected (f, 3, h, w)", vp.display(), video.shape()));
        }
        let cp = cond_path(dir, i);
        let cond = if cp.exists() { read_tensor(&cp)? } else { first_frame(&video) };
        out.push(VideoSample { video, cond });
    }
    if out.is_empty() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "no vid_0000.vten found");
        return Err(Error::io(dir, e));
    }
    Ok(out)
}

/// Frame 0 of an `(f, 3, h, w)` video.
pub fn first_frame(video: &Tensor) -> Tensor {
    let plane = video.len() / video.dim(0).max(1);
    Tensor::from_parts_unchecked(video.shape()[1..].to_vec(), video.data()[..plane].to_vec())
}

/// Stack `(f, c, h, w)` videos into a `(b, c, f, h, w)` batch.
pub fn stack_videos(videos: &[&Tensor]) -> Result<Tensor> {
    let first = videos.first().ok_or_else(|| shape_err!("cannot stack zero videos"))?;
    let mut data = Vec::with_capacity(first.len() * videos.len());
    for v in videos {
        if v.shape() != first.shape() || v.rank() != 4 {
            return Err(shape_err!("cannot stack videos of shapes {:?} and {:?}", first.shape(), v.shape()));
        }
        data.extend(v.rearrange("f c h w -> c f h w", &[])?.into_data());
    }
    let s = first.shape();
    Tensor::from_vec(vec![videos.len(), s[1], s[0], s[2], s[3]], data)
}

/// Split a `(b, c, f, h, w)` batch into `(f, c, h, w)` videos.
pub fn unstack_videos(batch: &Tensor) -> Result<Vec<Tensor>> {
    if batch.rank() != 5 {
        return Err(shape_err!("expected a (b, c, f, h, w) batch, got {:?}", batch.shape()));
    }
    let per = batch.len() / batch.dim(0).max(1);
    let s = batch.shape();
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::from_vec(vec![s[1], s[2], s[3], s[4]], c.to_vec())?.rearrange("c f h w -> f c h w", &[]))
        .collect()
}

/// Stack `(c, h, w)` images into `(b, c, h, w)`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| shape_err!("cannot stack zero images"))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(shape_err!("cannot stack images of shapes {:?} and {:?}", first.shape(), im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::from_vec(shape, data)
}
