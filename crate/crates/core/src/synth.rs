//! Long/short exposure synthesis from sharp frame sequences.
//!
//! Frames are first densified by linear cross-fading, then a long exposure is
//! formed by averaging a window of frames, a readout gap is skipped, and a
//! short exposure averages the following frames. The last frame of the long
//! window and the first frame of the short window are kept as sharp
//! references.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::io::{read_png, write_png};
use crate::rng::{stream, Role};
use crate::tensor::{Shape, Tensor};

/// Ordered frames of one video, all the same shape.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<Tensor<f32>>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor<f32>>, fps: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(invalid(format!("sequence needs at least 2 frames, got {}", frames.len())));
        }
        if !(fps > 0.0) {
            return Err(invalid("frame rate must be positive"));
        }
        let shape = frames[0].shape();
        if shape.n != 1 {
            return Err(Error::shape("frame sequence", format!("frame batch must be 1, got {shape}")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shape("frame sequence", format!("frame {i} is {} not {shape}", f.shape())));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid(format!("frame {i} has values outside [0, 1]")));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Tensor<f32>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].shape()
    }
}

/// Inserts `factor - 1` cross-faded frames between every consecutive pair.
pub fn interpolate_sequence(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(invalid("interpolation factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(seq.clone());
    }
    let frames = seq.frames();
    let mut out = Vec::with_capacity((frames.len() - 1) * factor + 1);
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        out.push(a.clone());
        for j in 1..factor {
            let t = j as f64 / factor as f64;
            out.push(
                a.zip_map(b, "interpolate", |x, y| ((1.0 - t) * x as f64 + t * y as f64) as f32)?,
            );
        }
    }
    out.push(frames[frames.len() - 1].clone());
    FrameSequence::new(out, seq.fps * factor as f64)
}

/// Frame counts of the two exposure windows, in interpolated frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub interp_factor: usize,
    pub long_frames: usize,
    pub gap_frames: usize,
    pub short_frames: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            interp_factor: 8,
            long_frames: 64,
            gap_frames: 8,
            short_frames: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interp_factor == 0 || self.long_frames == 0 || self.short_frames == 0 {
            return Err(invalid("interp_factor, long_frames and short_frames must be positive"));
        }
        Ok(())
    }

    /// Interpolated frames spanned by one tuple.
    pub fn window(&self) -> usize {
        self.long_frames + self.gap_frames + self.short_frames
    }
}

/// Provenance of an [`ExposureTuple`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TupleMeta {
    pub source: String,
    pub start: usize,
    pub l_last_index: usize,
    pub s_first_index: usize,
    pub interp_factor: usize,
}

/// Long exposure, short exposure and their sharp boundary frames.
#[derive(Clone, Debug)]
pub struct ExposureTuple {
    pub long: Tensor<f32>,
    pub short: Tensor<f32>,
    pub l_last: Tensor<f32>,
    pub s_first: Tensor<f32>,
    pub meta: TupleMeta,
}

impl ExposureTuple {
    pub fn shape(&self) -> Shape {
        self.long.shape()
    }

    /// Same spatial window of all four images.
    pub fn crop(&self, y: usize, x: usize, side: usize) -> Result<ExposureTuple> {
        Ok(ExposureTuple {
            long: self.long.crop(y, x, side, side)?,
            short: self.short.crop(y, x, side, side)?,
            l_last: self.l_last.crop(y, x, side, side)?,
            s_first: self.s_first.crop(y, x, side, side)?,
            meta: self.meta.clone(),
        })
    }
}

fn mean_of(frames: &[Tensor<f32>]) -> Tensor<f32> {
    let shape = frames[0].shape();
    let mut acc = vec![0.0f64; shape.numel()];
    for f in frames {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / frames.len() as f64;
    Tensor::from_vec(shape, acc.into_iter().map(|v| (v * inv) as f32).collect()).expect("mean shape")
}

/// Averages the long and short windows starting at `start`.
pub fn synthesize_tuple(seq: &FrameSequence, cfg: &SynthConfig, start: usize) -> Result<ExposureTuple> {
    cfg.validate()?;
    let end = start + cfg.window();
    if end > seq.len() {
        return Err(invalid(format!(
            "window [{start}, {end}) overflows a {}-frame sequence",
            seq.len()
        )));
    }
    let frames = seq.frames();
    let long_end = start + cfg.long_frames;
    let short_start = long_end + cfg.gap_frames;
    Ok(ExposureTuple {
        long: mean_of(&frames[start..long_end]),
        short: mean_of(&frames[short_start..end]),
        l_last: frames[long_end - 1].clone(),
        s_first: frames[short_start].clone(),
        meta: TupleMeta {
            source: String::new(),
            start,
            l_last_index: long_end - 1,
            s_first_index: short_start,
            interp_factor: cfg.interp_factor,
        },
    })
}

/// Window placement over a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingPolicy {
    /// Distance between consecutive window starts, in interpolated frames.
    pub stride: usize,
    pub seed: u64,
}

/// Window starts for a sequence of `len` frames: `(len - window) / stride + 1`
/// windows, shifted as a block by a seeded offset within the leftover slack.
pub fn plan_windows(len: usize, window: usize, policy: SamplingPolicy, video_index: u64) -> Result<Vec<usize>> {
    if policy.stride == 0 {
        return Err(invalid("sampling stride must be positive"));
    }
    if window > len {
        return Err(invalid(format!("{len} frames cannot hold a {window}-frame window")));
    }
    let count = (len - window) / policy.stride + 1;
    let slack = (len - window) - (count - 1) * policy.stride;
    let offset = stream(policy.seed, video_index, Role::Manifest).random_range(0..=slack);
    Ok((0..count).map(|i| offset + i * policy.stride).collect())
}

/// Position of a square crop inside a tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub y: usize,
    pub x: usize,
    pub side: usize,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub long: PathBuf,
    pub short: PathBuf,
    pub l_last: PathBuf,
    pub s_first: PathBuf,
    pub meta: TupleMeta,
    pub crop: Option<Crop>,
}

/// Ordered list of tuples on disk.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl fmt::Display for Manifest {
    /// Tab-separated: id, l, s, l_last, s_first, source, start, l_last index,
    /// s_first index, interpolation factor, crop (`y,x,side` or `-`).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let crop = match e.crop {
                Some(c) => format!("{},{},{}", c.y, c.x, c.side),
                None => "-".to_string(),
            };
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.id,
                e.long.display(),
                e.short.display(),
                e.l_last.display(),
                e.s_first.display(),
                e.meta.source,
                e.meta.start,
                e.meta.l_last_index,
                e.meta.s_first_index,
                e.meta.interp_factor,
                crop
            )?;
        }
        Ok(())
    }
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.tsv";

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            if cols.len() != 11 {
                return Err(bad(&format!("{} columns, expected 11", cols.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("not a number: {s:?}")));
            let crop = match cols[10] {
                "-" => None,
                c => {
                    let parts: Vec<&str> = c.split(',').collect();
                    if parts.len() != 3 {
                        return Err(bad("crop must be y,x,side"));
                    }
                    Some(Crop {
                        y: num(parts[0])?,
                        x: num(parts[1])?,
                        side: num(parts[2])?,
                    })
                }
            };
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                long: cols[1].into(),
                short: cols[2].into(),
                l_last: cols[3].into(),
                s_first: cols[4].into(),
                meta: TupleMeta {
                    source: cols[5].to_string(),
                    start: num(cols[6])?,
                    l_last_index: num(cols[7])?,
                    s_first_index: num(cols[8])?,
                    interp_factor: num(cols[9])?,
                },
                crop,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    /// Reads `path`, resolving tuple paths against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_file(path.as_ref(), self.to_string().as_bytes())
    }

    /// Loads the four images of entry `i`, applying its crop if any.
    pub fn load_tuple(&self, i: usize) -> Result<ExposureTuple> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| invalid(format!("manifest has no entry {i}")))?;
        let tuple = ExposureTuple {
            long: read_png(self.root.join(&e.long))?,
            short: read_png(self.root.join(&e.short))?,
            l_last: read_png(self.root.join(&e.l_last))?,
            s_first: read_png(self.root.join(&e.s_first))?,
            meta: e.meta.clone(),
        };
        match e.crop {
            Some(c) => tuple.crop(c.y, c.x, c.side),
            None => Ok(tuple),
        }
    }

    /// CRC32 of the manifest text, used to tag evaluation reports.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_string().as_bytes())
    }
}

/// Numbered PNG frames of one video directory, in numeric filename order.
pub fn read_frame_dir(dir: impl AsRef<Path>, fps: f64) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let mut files: Vec<(u64, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
            digits.parse().ok().map(|n| (n, p))
        })
        .collect();
    files.sort();
    let frames = files.iter().map(|(_, p)| read_png(p)).collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, fps).map_err(|e| invalid(format!("{}: {e}", dir.display())))
}

/// Synthesizes every planned window of every video and writes the tuples as
/// `<out>/<video>_<k>/{l,s,l_last,s_first}.png` plus `<out>/manifest.tsv`.
pub fn build_dataset(
    videos: &[(String, FrameSequence)],
    cfg: &SynthConfig,
    policy: SamplingPolicy,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if videos.is_empty() {
        return Err(invalid("no source videos"));
    }
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut entries = Vec::new();
    for (vi, (name, seq)) in videos.iter().enumerate() {
        let dense = interpolate_sequence(seq, cfg.interp_factor)?;
        let starts = plan_windows(dense.len(), cfg.window(), policy, vi as u64)?;
        let written: Vec<ManifestEntry> = starts
            .par_iter()
            .enumerate()
            .map(|(k, &start)| {
                let mut t = synthesize_tuple(&dense, cfg, start)?;
                t.meta.source = name.clone();
                let id = format!("{name}_{k:04}");
                let rel = PathBuf::from(&id);
                for (file, img) in [("l.png", &t.long), ("s.png", &t.short), ("l_last.png", &t.l_last), ("s_first.png", &t.s_first)] {
                    write_png(out_dir.join(&rel).join(file), img)?;
                }
                Ok(ManifestEntry {
                    id,
                    long: rel.join("l.png"),
                    short: rel.join("s.png"),
                    l_last: rel.join("l_last.png"),
                    s_first: rel.join("s_first.png"),
                    meta: t.meta,
                    crop: None,
                })
            })
            .collect::<Result<_>>()?;
        entries.extend(written);
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(out_dir.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}

/// Procedurally generated test footage: a smooth colour gradient with a few
/// rectangles and a bright dot moving at constant seeded velocities.
pub fn procedural_video(h: usize, w: usize, frames: usize, seed: u64) -> Result<FrameSequence> {
    let mut rng = stream(seed, 0, Role::Procedural);
    let shape = Shape::new(1, 3, h, w);
    struct Mover {
        y: f64,
        x: f64,
        vy: f64,
        vx: f64,
        hh: f64,
        ww: f64,
        color: [f32; 3],
    }
    let movers: Vec<Mover> = (0..3)
        .map(|_| Mover {
            y: rng.random_range(0.0..h as f64),
            x: rng.random_range(0.0..w as f64),
            vy: rng.random_range(-1.5..1.5),
            vx: rng.random_range(-3.0..3.0),
            hh: rng.random_range(0.1..0.3) * h as f64,
            ww: rng.random_range(0.1..0.3) * w as f64,
            color: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        })
        .collect();
    let tint: [f32; 3] = [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)];
    let dot_v = (rng.random_range(-1.0..1.0), rng.random_range(1.0..2.5));
    let seq = (0..frames)
        .map(|f| {
            let t = f as f64;
            Tensor::from_fn(shape, |_, c, y, x| {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = tint[c] * (0.5 + 0.5 * (xf / w as f64) as f32) * (0.6 + 0.4 * (yf / h as f64) as f32);
                // Fine texture so sharp frames have local variance.
                v += 0.08 * (((x / 2 + y / 3 + c) % 3) as f32 - 1.0);
                for m in &movers {
                    let cy = (m.y + m.vy * t).rem_euclid(h as f64);
                    let cx = (m.x + m.vx * t).rem_euclid(w as f64);
                    if (yf - cy).abs() < m.hh / 2.0 && (xf - cx).abs() < m.ww / 2.0 {
                        v = m.color[c] + 0.1 * (((x + y) % 2) as f32 - 0.5);
                    }
                }
                let dy = (h as f64 / 2.0 + dot_v.0 * t).rem_euclid(h as f64);
                let dx = (w as f64 / 4.0 + dot_v.1 * t).rem_euclid(w as f64);
                if (yf - dy).abs() < 1.5 && (xf - dx).abs() < 1.5 {
                    v = 1.0;
                }
                v.clamp(0.0, 1.0)
            })
        })
        .collect();
    FrameSequence::new(seq, 60.0)
}

/// Procedural videos just long enough for one window each, one tuple per
/// video, synthesized at the first window.
pub fn procedural_tuples(count: usize, side: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<ExposureTuple>> {
    cfg.validate()?;
    let frames = (cfg.window() - 1).div_ceil(cfg.interp_factor) + 1;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let video = procedural_video(side, side, frames.max(2), seed.wrapping_add(i as u64))?;
            let dense = interpolate_sequence(&video, cfg.interp_factor)?;
            let mut t = synthesize_tuple(&dense, cfg, 0)?;
            t.meta.source = format!("procedural{i}");
            Ok(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32) -> Tensor<f32> {
        Tensor::full(Shape::new(1, 1, 2, 2), v)
    }

    #[test]
    fn factor_one_is_identity() {
        let seq = FrameSequence::new(vec![constant(0.2), constant(0.7), constant(0.1)], 60.0).unwrap();
        let out = interpolate_sequence(&seq, 1).unwrap();
        assert_eq!(out.frames(), seq.frames());
        assert!(interpolate_sequence(&seq, 0).is_err());
    }

    #[test]
    fn linear_ramp_between_frames() {
        let seq = FrameSequence::new(vec![constant(0.0), constant(1.0)], 60.0).unwrap();
        let out = interpolate_sequence(&seq, 4).unwrap();
        let vals: Vec<f32> = out.frames().iter().map(|f| f.data()[0]).collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(out.fps(), 240.0);
    }

    #[test]
    fn sequence_validation() {
        assert!(FrameSequence::new(vec![constant(0.0)], 60.0).is_err());
        assert!(FrameSequence::new(vec![constant(0.0), constant(1.5)], 60.0).is_err());
        let other = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(FrameSequence::new(vec![constant(0.0), other], 60.0).is_err());
    }

    #[test]
    fn window_plan_counts() {
        let p = SamplingPolicy { stride: 100, seed: 1 };
        assert_eq!(plan_windows(50, 20, p, 0).unwrap().len(), 1);
        let p = SamplingPolicy { stride: 10, seed: 1 };
        let starts = plan_windows(55, 20, p, 0).unwrap();
        assert_eq!(starts.len(), 4);
        assert!(starts.iter().all(|&s| s + 20 <= 55));
        assert!(plan_windows(10, 20, p, 0).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            root: PathBuf::from("/data"),
            entries: vec![ManifestEntry {
                id: "v_0001".into(),
                long: "v_0001/l.png".into(),
                short: "v_0001/s.png".into(),
                l_last: "v_0001/l_last.png".into(),
                s_first: "v_0001/s_first.png".into(),
                meta: TupleMeta {
                    source: "v".into(),
                    start: 3,
                    l_last_index: 66,
                    s_first_index: 75,
                    interp_factor: 8,
                },
                crop: Some(Crop { y: 4, x: 8, side: 32 }),
            }],
        };
        let back = Manifest::parse(&m.to_string(), "/data").unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("a\tb\n", "/").is_err());
    }
}
