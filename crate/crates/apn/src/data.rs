//! Seeded synthetic sprite videos, sliding-window clip extraction, and the
//! dataset file formats.
//!
//! A scene is a few sprites drifting with constant velocity on a toroidal
//! grid (positions wrap). Anomalies inject a speed violation (fast_sprite),
//! an appearance violation (alien_shape: a plus-shaped sprite area-matched
//! to the normal square so frame energy stays comparable), or a temporal
//! discontinuity (teleport). Frames are already normalized to [-1, 1] with
//! background 0. (spec, seed) fully determines every byte.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{substream, Error, Result};

pub const VIDEO_MAGIC: &[u8; 8] = b"APNVID1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Square,
    Circle,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub shape: SpriteShape,
    /// Edge length (square) or diameter (circle), pixels.
    pub size: usize,
    /// Rendered intensity in (0, 1].
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    FastSprite,
    AlienShape,
    Teleport,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub onset: usize,
    pub duration: usize,
    /// Velocity multiplier for fast_sprite (1.0 makes it indistinguishable
    /// from normal motion, the null-control knob).
    #[serde(default = "default_speed_multiplier")]
    pub speed_multiplier: f64,
}

fn default_speed_multiplier() -> f64 {
    4.0
}

/// One video's generation recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub sprites: Vec<SpriteSpec>,
    /// Speed range in pixels/frame for the normal regime.
    pub velocity_min: f64,
    pub velocity_max: f64,
    pub anomaly: Option<AnomalySpec>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec(format!("{}: empty grid", self.id)));
        }
        if self.n_frames == 0 {
            return Err(Error::InvalidSpec(format!("{}: zero frames", self.id)));
        }
        if self.sprites.is_empty() {
            return Err(Error::InvalidSpec(format!("{}: no sprites", self.id)));
        }
        for s in &self.sprites {
            if s.size == 0 || s.size >= self.height.min(self.width) {
                return Err(Error::InvalidSpec(format!(
                    "{}: sprite size {} out of range",
                    self.id, s.size
                )));
            }
            if !(0.0..=1.0).contains(&s.intensity) || s.intensity == 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "{}: intensity {} outside (0, 1]",
                    self.id, s.intensity
                )));
            }
        }
        if self.velocity_min < 0.0 || self.velocity_max < self.velocity_min {
            return Err(Error::InvalidSpec(format!("{}: bad velocity range", self.id)));
        }
        if let Some(a) = &self.anomaly {
            if a.duration == 0 || a.onset + a.duration > self.n_frames {
                return Err(Error::InvalidSpec(format!(
                    "{}: anomaly window {}..{} outside 0..{}",
                    self.id,
                    a.onset,
                    a.onset + a.duration,
                    self.n_frames
                )));
            }
            if a.speed_multiplier <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "{}: speed multiplier must be positive",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Frames plus per-frame anomaly labels.
#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    /// Each frame is 1 x h x w in [-1, 1].
    pub frames: Vec<Tensor>,
    pub labels: Vec<u8>,
}

/// One training/eval unit: T input frames, the next frame as target, the
/// target frame's label.
#[derive(Debug, Clone)]
pub struct ClipSample {
    /// T x h x w (input frames stacked as channels).
    pub inputs: Tensor,
    /// 1 x h x w.
    pub target: Tensor,
    pub label: u8,
    pub video_id: String,
    /// Index of the target frame within its video.
    pub frame_index: usize,
}

struct SpriteState {
    shape: SpriteShape,
    size: usize,
    intensity: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// Renders a deterministic video from the spec. Labels are 1 exactly on
/// frames inside the anomaly window.
pub fn generate_video(spec: &SceneSpec) -> Result<Video> {
    spec.validate()?;
    let mut rng = substream(spec.seed, &format!("data/{}", spec.id));
    let (h, w) = (spec.height, spec.width);

    let mut sprites: Vec<SpriteState> = spec
        .sprites
        .iter()
        .map(|s| {
            let x = rng.gen_range(0.0..w as f64);
            let y = rng.gen_range(0.0..h as f64);
            let speed = if spec.velocity_max > spec.velocity_min {
                rng.gen_range(spec.velocity_min..spec.velocity_max)
            } else {
                spec.velocity_min
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            SpriteState {
                shape: s.shape,
                size: s.size,
                intensity: s.intensity,
                x,
                y,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut labels = Vec::with_capacity(spec.n_frames);
    for t in 0..spec.n_frames {
        let active = spec
            .anomaly
            .as_ref()
            .map(|a| t >= a.onset && t < a.onset + a.duration)
            .unwrap_or(false);
        labels.push(active as u8);

        let mut pixels = vec![0.0f64; h * w];
        for (si, sp) in sprites.iter().enumerate() {
            // The anomaly affects the first sprite only.
            let alien = active
                && si == 0
                && spec.anomaly.as_ref().map(|a| a.kind) == Some(AnomalyKind::AlienShape);
            render_sprite(&mut pixels, h, w, sp, alien);
        }
        // Quantize through f32 so in-memory frames match the on-disk format
        // exactly (the frames file stores f32).
        let pixels: Vec<f64> = pixels.into_iter().map(|v| v as f32 as f64).collect();
        frames.push(Tensor::new(vec![1, h, w], pixels)?);

        // Advance positions for the next frame.
        for (si, sp) in sprites.iter_mut().enumerate() {
            let anomaly = spec.anomaly.as_ref();
            let teleporting = active
                && si == 0
                && anomaly.map(|a| a.kind) == Some(AnomalyKind::Teleport);
            if teleporting {
                sp.x = rng.gen_range(0.0..w as f64);
                sp.y = rng.gen_range(0.0..h as f64);
                continue;
            }
            // The alien object holds still while present.
            if active && si == 0 && anomaly.map(|a| a.kind) == Some(AnomalyKind::AlienShape) {
                continue;
            }
            let mult = if active
                && si == 0
                && anomaly.map(|a| a.kind) == Some(AnomalyKind::FastSprite)
            {
                anomaly.map(|a| a.speed_multiplier).unwrap_or(1.0)
            } else {
                1.0
            };
            sp.x = wrap(sp.x + mult * sp.vx, w as f64);
            sp.y = wrap(sp.y + mult * sp.vy, h as f64);
        }
    }
    Ok(Video { id: spec.id.clone(), frames, labels })
}

fn wrap(v: f64, modulus: f64) -> f64 {
    let r = v % modulus;
    if r < 0.0 {
        r + modulus
    } else {
        r
    }
}

fn render_sprite(pixels: &mut [f64], h: usize, w: usize, sp: &SpriteState, alien: bool) {
    let cx = sp.x.round() as isize;
    let cy = sp.y.round() as isize;
    let half = (sp.size / 2) as isize;
    let size = sp.size as isize;
    let put = |pixels: &mut [f64], yy: isize, xx: isize, v: f64| {
        let y = yy.rem_euclid(h as isize) as usize;
        let x = xx.rem_euclid(w as isize) as usize;
        let p = &mut pixels[y * w + x];
        *p = p.max(v);
    };
    if alien {
        // Appearance violation in the abandoned-object style: a plus shape
        // with thin arms spanning twice the sprite size, area-matched to
        // the normal square so raw frame energy stays comparable. It holds
        // still for the whole window (see the position update), which makes
        // it trivially predictable for the frame-prediction cue; only the
        // feature statistics give it away.
        let arm = (sp.size / 2).max(1) as isize;
        let long = size;
        for dy in -arm / 2..arm - arm / 2 {
            for dx in -long..long {
                put(pixels, cy + dy, cx + dx, sp.intensity);
            }
        }
        for dy in -long..long {
            for dx in -arm / 2..arm - arm / 2 {
                put(pixels, cy + dy, cx + dx, sp.intensity);
            }
        }
        return;
    }
    match sp.shape {
        SpriteShape::Square => {
            for dy in -half..size - half {
                for dx in -half..size - half {
                    put(pixels, cy + dy, cx + dx, sp.intensity);
                }
            }
        }
        SpriteShape::Circle => {
            let r = sp.size as f64 / 2.0;
            let ri = r.ceil() as isize;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if (dy * dy + dx * dx) as f64 <= r * r {
                        put(pixels, cy + dy, cx + dx, sp.intensity);
                    }
                }
            }
        }
    }
}

/// Sliding windows: sample i takes frames [i, i+T) as inputs and frame i+T
/// as target; a video of length L yields L - T samples. All-background
/// clips are filtered (none occur with visible sprites).
pub fn window(video: &Video, t_window: usize) -> Result<Vec<ClipSample>> {
    let len = video.frames.len();
    if len < t_window + 1 {
        return Err(Error::TooShort { len, needed: t_window + 1 });
    }
    let (h, w) = {
        let s = video.frames[0].shape();
        (s[1], s[2])
    };
    let mut out = Vec::with_capacity(len - t_window);
    for i in 0..len - t_window {
        let mut data = Vec::with_capacity(t_window * h * w);
        for f in &video.frames[i..i + t_window] {
            data.extend_from_slice(f.data());
        }
        let inputs = Tensor::new(vec![t_window, h, w], data)?;
        let target = video.frames[i + t_window].clone();
        let degenerate = inputs.data().iter().all(|&v| v == 0.0)
            && target.data().iter().all(|&v| v == 0.0);
        if degenerate {
            continue;
        }
        out.push(ClipSample {
            inputs,
            target,
            label: video.labels[i + t_window],
            video_id: video.id.clone(),
            frame_index: i + t_window,
        });
    }
    Ok(out)
}

// -- frames file --------------------------------------------------------------
// magic "APNVID1\n", u32-LE n_frames, h, w, then f32-LE pixels frame-major.

pub fn store_video(path: &Path, video: &Video) -> Result<()> {
    let (h, w) = {
        let s = video.frames[0].shape();
        (s[1], s[2])
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(VIDEO_MAGIC)?;
    f.write_all(&(video.frames.len() as u32).to_le_bytes())?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(video.frames.len() * h * w * 4);
    for frame in &video.frames {
        for &v in frame.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a frames file; pixels widen f32 -> f64. Labels are not stored in
/// the frames file (they live in the dataset manifest), so they come back
/// empty here.
pub fn load_video(path: &Path, id: &str) -> Result<Video> {
    let display = path.display().to_string();
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut f, &mut magic, &display, 8)?;
    if &magic != VIDEO_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: String::from_utf8_lossy(VIDEO_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut head = [0u8; 12];
    read_exact_or_truncated(&mut f, &mut head, &display, 20)?;
    let n_frames = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let expected = 20 + (n_frames * h * w * 4) as u64;
    let mut payload = vec![0u8; n_frames * h * w * 4];
    read_exact_or_truncated(&mut f, &mut payload, &display, expected)?;
    let mut frames = Vec::with_capacity(n_frames);
    for fi in 0..n_frames {
        let mut data = Vec::with_capacity(h * w);
        for p in 0..h * w {
            let off = (fi * h * w + p) * 4;
            let bits: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(bits) as f64);
        }
        frames.push(Tensor::new(vec![1, h, w], data)?);
    }
    Ok(Video { id: id.to_string(), frames, labels: Vec::new() })
}

fn read_exact_or_truncated(
    f: &mut std::fs::File,
    buf: &mut [u8],
    path: &str,
    expected_total: u64,
) -> Result<()> {
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = f.read(&mut buf[filled..])?;
        if n == 0 {
            let found = f.metadata().map(|m| m.len()).unwrap_or(0);
            return Err(Error::TruncatedFile {
                path: path.to_string(),
                expected: expected_total,
                found,
            });
        }
        filled += n;
    }
    Ok(())
}

// -- dataset spec & manifest ---------------------------------------------------

/// Whole-dataset recipe: train scenes must be anomaly-free (the unsupervised
/// contract), test scenes may inject anomalies.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train: Vec<SceneSpec>,
    pub test: Vec<SceneSpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        for s in &self.train {
            s.validate()?;
            if s.anomaly.is_some() {
                return Err(Error::InvalidSpec(format!(
                    "training scene {:?} declares an anomaly; training data must be normal only",
                    s.id
                )));
            }
        }
        for s in &self.test {
            s.validate()?;
        }
        let mut ids: Vec<&str> =
            self.train.iter().chain(&self.test).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.train.len() + self.test.len() {
            return Err(Error::InvalidSpec("duplicate scene ids".into()));
        }
        Ok(())
    }

    /// The seeded default: three normal training scenes and three test
    /// scenes, one per anomaly type.
    pub fn default_desk(seed: u64) -> Self {
        let scene = |id: &str, idx: u64, anomaly: Option<AnomalySpec>, frames: usize| SceneSpec {
            id: id.to_string(),
            height: 64,
            width: 64,
            n_frames: frames,
            sprites: vec![
                SpriteSpec { shape: SpriteShape::Square, size: 8, intensity: 0.9 },
                SpriteSpec { shape: SpriteShape::Circle, size: 8, intensity: 0.6 },
            ],
            velocity_min: 1.0,
            velocity_max: 2.0,
            anomaly,
            seed: seed.wrapping_add(idx),
        };
        DatasetSpec {
            train: vec![
                scene("train_000", 0, None, 200),
                scene("train_001", 1, None, 200),
                scene("train_002", 2, None, 200),
            ],
            test: vec![
                scene(
                    "test_000",
                    100,
                    Some(AnomalySpec {
                        kind: AnomalyKind::FastSprite,
                        onset: 40,
                        duration: 30,
                        speed_multiplier: 4.0,
                    }),
                    100,
                ),
                scene(
                    "test_001",
                    101,
                    Some(AnomalySpec {
                        kind: AnomalyKind::AlienShape,
                        onset: 30,
                        duration: 30,
                        speed_multiplier: 4.0,
                    }),
                    100,
                ),
                scene(
                    "test_002",
                    102,
                    Some(AnomalySpec {
                        kind: AnomalyKind::Teleport,
                        onset: 50,
                        duration: 25,
                        speed_multiplier: 4.0,
                    }),
                    100,
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub split: String,
    pub labels: Vec<u8>,
}

/// Canonical-JSON dataset manifest written beside the videos.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub videos: Vec<ManifestEntry>,
}

/// Generates every video of the spec into `out/train` and `out/test` and
/// writes `manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out.join("train"))?;
    std::fs::create_dir_all(out.join("test"))?;
    let mut videos = Vec::new();
    for (split, scenes) in [("train", &spec.train), ("test", &spec.test)] {
        for scene in scenes.iter() {
            let video = generate_video(scene)?;
            let rel = format!("{split}/{}.apnvid", scene.id);
            store_video(&out.join(&rel), &video)?;
            videos.push(ManifestEntry {
                id: scene.id.clone(),
                path: rel,
                split: split.to_string(),
                labels: video.labels,
            });
        }
    }
    let manifest = DatasetManifest { spec: spec.clone(), videos };
    write_canonical_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one split ("train"/"test") with labels re-attached from the
/// manifest.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<Video>> {
    let mut out = Vec::new();
    for entry in manifest.videos.iter().filter(|v| v.split == split) {
        let mut video = load_video(&dir.join(&entry.path), &entry.id)?;
        if video.frames.len() != entry.labels.len() {
            return Err(Error::InvalidSpec(format!(
                "{}: {} frames but {} labels in manifest",
                entry.id,
                video.frames.len(),
                entry.labels.len()
            )));
        }
        video.labels = entry.labels.clone();
        out.push(video);
    }
    Ok(out)
}

/// Serializes with sorted keys (serde_json's Value uses a BTreeMap).
pub fn write_canonical_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let v = serde_json::to_value(value)?;
    let text = serde_json::to_string_pretty(&v)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}
