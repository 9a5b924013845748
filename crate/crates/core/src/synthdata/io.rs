//! On-disk frame format and dataset manifest.
//!
//! Frame file (little-endian): magic `PPKF`, u32 version = 1, u32 W, u32 H,
//! f32 fx, fy, cx, cy, u32 K; then RGB as `u8[H*W*3]` with value
//! `round(255*c)`, depth as `f32[H*W]`, labels as `i8[H*W]`.
//!
//! Manifest (`manifest.txt`): a first line `count=<n> classes=<K> seed=<s>`
//! followed by one relative file name per line.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::real::Real;
use crate::synthdata::RgbdFrame;
use crate::tensor::DenseArray;

/// A fully loaded dataset: frames plus manifest metadata.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub frames: Vec<RgbdFrame<F>>,
    pub class_count: usize,
    pub seed: u64,
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

const MAGIC: &[u8; 4] = b"PPKF";
const VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    offset: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                self.offset as u64,
                format!("unexpected end of file while reading {what}"),
            ));
        }
        let slice = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Writes one frame; `class_count` is recorded in the header.
pub fn write_frame<F: Real>(path: &Path, frame: &RgbdFrame<F>, class_count: usize) -> Result<()> {
    let (w, h) = (frame.intr.width, frame.intr.height);
    if frame.color.shape() != [h, w, 3] || frame.depth.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "frame arrays {:?}/{:?} do not match intrinsics {}x{}",
            frame.color.shape(),
            frame.depth.shape(),
            w,
            h
        )));
    }
    if frame.labels.len() != h * w {
        return Err(Error::Shape(format!(
            "frame has {} labels for {} pixels",
            frame.labels.len(),
            h * w
        )));
    }
    let mut bytes = Vec::with_capacity(24 + h * w * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for v in [frame.intr.fx, frame.intr.fy, frame.intr.cx, frame.intr.cy] {
        bytes.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    bytes.extend_from_slice(&(class_count as u32).to_le_bytes());
    for &c in frame.color.data() {
        bytes.push((c.widen() * 255.0).round() as u8);
    }
    for &d in frame.depth.data() {
        bytes.extend_from_slice(&(d.widen() as f32).to_le_bytes());
    }
    for &l in &frame.labels {
        bytes.push(l as i8 as u8);
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads one frame back, returning it with the recorded class count.
pub fn read_frame<F: Real>(path: &Path) -> Result<(RgbdFrame<F>, usize)> {
    let path_str = path.display().to_string();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path_str.clone(), e))?;
    let mut cur = Cursor {
        buf: &buf,
        offset: 0,
        path: &path_str,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(&path_str, 0, format!("bad magic {magic:?}, expected PPKF")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            &path_str,
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let w = cur.u32("width")? as usize;
    let h = cur.u32("height")? as usize;
    if w == 0 || h == 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::format(&path_str, 8, format!("implausible extents {w}x{h}")));
    }
    let fx = cur.f32("fx")?;
    let fy = cur.f32("fy")?;
    let cx = cur.f32("cx")?;
    let cy = cur.f32("cy")?;
    let class_count = cur.u32("class count")? as usize;
    let intr = CameraIntrinsics::new(
        F::of(fx as f64),
        F::of(fy as f64),
        F::of(cx as f64),
        F::of(cy as f64),
        w,
        h,
    )?;

    let n = h * w;
    let color_bytes = cur.take(n * 3, "color plane")?;
    let color = DenseArray::from_vec(
        &[h, w, 3],
        color_bytes.iter().map(|&b| F::of(b as f64 / 255.0)).collect(),
    )?;
    let depth_offset = cur.offset;
    let depth_bytes = cur.take(n * 4, "depth plane")?;
    let mut depth_vals = Vec::with_capacity(n);
    for (i, chunk) in depth_bytes.chunks_exact(4).enumerate() {
        let d = f32::from_le_bytes(chunk.try_into().unwrap());
        if !d.is_finite() || d < 0.0 {
            return Err(Error::format(
                &path_str,
                (depth_offset + i * 4) as u64,
                format!("invalid depth value {d}"),
            ));
        }
        depth_vals.push(F::of(d as f64));
    }
    let depth = DenseArray::from_vec(&[h, w], depth_vals)?;
    let labels_offset = cur.offset;
    let label_bytes = cur.take(n, "label plane")?;
    let labels: Vec<i64> = label_bytes.iter().map(|&b| b as i8 as i64).collect();
    for (i, &l) in labels.iter().enumerate() {
        if l < -1 || l >= class_count as i64 {
            return Err(Error::format(
                &path_str,
                (labels_offset + i) as u64,
                format!("label {l} outside -1..{}", class_count as i64 - 1),
            ));
        }
    }
    if cur.offset != buf.len() {
        return Err(Error::format(
            &path_str,
            cur.offset as u64,
            format!("{} trailing bytes after frame payload", buf.len() - cur.offset),
        ));
    }
    Ok((
        RgbdFrame {
            color,
            depth,
            labels,
            intr,
        },
        class_count,
    ))
}

/// Writes `frames` plus a manifest into `dir` (created if needed).
pub fn write_dataset<F: Real>(
    dir: &Path,
    frames: &[RgbdFrame<F>],
    class_count: usize,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = format!("count={} classes={} seed={}\n", frames.len(), class_count, seed);
    for (i, frame) in frames.iter().enumerate() {
        let name = format!("frame_{i:05}.ppkf");
        write_frame(&dir.join(&name), frame, class_count)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn read_dataset<F: Real>(dir: &Path) -> Result<Dataset<F>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| {
        Error::format(manifest_path.display().to_string(), 0, "empty manifest")
    })?;
    let mut count = None;
    let mut classes = None;
    let mut seed = None;
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            Error::format(
                manifest_path.display().to_string(),
                0,
                format!("malformed manifest field '{field}'"),
            )
        })?;
        let parsed: u64 = value.parse().map_err(|_| {
            Error::format(
                manifest_path.display().to_string(),
                0,
                format!("manifest field '{field}' is not an integer"),
            )
        })?;
        match key {
            "count" => count = Some(parsed as usize),
            "classes" => classes = Some(parsed as usize),
            "seed" => seed = Some(parsed),
            other => {
                return Err(Error::format(
                    manifest_path.display().to_string(),
                    0,
                    format!("unknown manifest field '{other}'"),
                ))
            }
        }
    }
    let (count, class_count, seed) = match (count, classes, seed) {
        (Some(c), Some(k), Some(s)) => (c, k, s),
        _ => {
            return Err(Error::format(
                manifest_path.display().to_string(),
                0,
                "manifest header must declare count, classes, and seed",
            ))
        }
    };
    let names: Vec<PathBuf> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| dir.join(l.trim()))
        .collect();
    if names.len() != count {
        return Err(Error::format(
            manifest_path.display().to_string(),
            0,
            format!("manifest declares {count} frames but lists {}", names.len()),
        ));
    }
    let mut frames = Vec::with_capacity(count);
    for name in names {
        let (frame, k) = read_frame(&name)?;
        if k != class_count {
            return Err(Error::format(
                name.display().to_string(),
                20,
                format!("frame declares {k} classes but manifest says {class_count}"),
            ));
        }
        frames.push(frame);
    }
    Ok(Dataset {
        frames,
        class_count,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synthdata::{
        default_intrinsics, generate_scene, render_frame, sample_camera_pose, SceneSpec,
    };

    fn toy_frame(seed: u64) -> RgbdFrame<f64> {
        let scene: SceneSpec<f64> = generate_scene(&mut Rng::new(seed, 0), 3, 6);
        let pose = sample_camera_pose(&scene, &mut Rng::new(seed, 1));
        render_frame(&scene, &pose, &default_intrinsics(), 0.02, &mut Rng::new(seed, 2)).unwrap()
    }

    #[test]
    fn frame_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let frame = toy_frame(1);
        let path = dir.path().join("frame.ppkf");
        write_frame(&path, &frame, 6).unwrap();
        let (back, k) = read_frame::<f64>(&path).unwrap();
        assert_eq!(k, 6);
        assert_eq!(back.depth.data(), frame.depth.data());
        assert_eq!(back.labels, frame.labels);
        // Color is already 8-bit quantized at render time, so it round-trips
        // exactly as well.
        assert_eq!(back.color.data(), frame.color.data());
        assert_eq!(back.intr, frame.intr);
    }

    #[test]
    fn truncated_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let frame = toy_frame(2);
        let path = dir.path().join("frame.ppkf");
        write_frame(&path, &frame, 6).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_frame::<f64>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame.ppkf"), "{msg}");
        assert!(msg.contains("unexpected end of file"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let frame = toy_frame(3);
        let path = dir.path().join("frame.ppkf");
        write_frame(&path, &frame, 6).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_frame::<f64>(&path).unwrap_err().to_string().contains("magic"));

        let mut bytes2 = std::fs::read(&path).unwrap();
        bytes2[0] = b'P';
        bytes2[4] = 9;
        std::fs::write(&path, &bytes2).unwrap();
        assert!(read_frame::<f64>(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn dataset_roundtrip_and_checksums() {
        use sha2::{Digest, Sha256};
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<RgbdFrame<f64>> = (0..20).map(toy_frame).collect();
        write_dataset(dir.path(), &frames, 6, 99).unwrap();

        let listed = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(listed, 21); // frames + manifest

        let ds = read_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_count, 6);
        assert_eq!(ds.seed, 99);
        for (a, b) in ds.frames.iter().zip(&frames) {
            assert_eq!(a, b);
        }

        // Writing the same frames again produces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &frames, 6, 99).unwrap();
        for i in 0..20 {
            let name = format!("frame_{i:05}.ppkf");
            let h1 = Sha256::digest(std::fs::read(dir.path().join(&name)).unwrap());
            let h2 = Sha256::digest(std::fs::read(dir2.path().join(&name)).unwrap());
            assert_eq!(h1, h2, "frame {i} bytes differ between writes");
        }
    }
}
