//! Synthetic scene streams, the synthetic oracle and trace files.
//!
//! A stream is a sequence of pre-featurized frames. Each scene has its own
//! class mix and its own look: class signatures are rotated by the scene's
//! `appearance_shift` toward scene-private directions, and a scene background
//! is added everywhere. Objects persist across frames with random-walk motion
//! and are rendered into the cell that owns their center.
//!
//! Scene changes blend the two scenes' features linearly over
//! `transition_len` frames; labels switch at the midpoint.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{box_logits, BoundingBox, Detection, DetectionTensor, GridShape, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::models::FeatureFrame;

/// Trace format version written by [`write_trace`].
pub const TRACE_VERSION: u32 = 1;

/// Oracle objectness logit on object cells (sigmoid ~ 0.993).
pub const OBJECT_LOGIT: f64 = 5.0;
/// Oracle objectness logit on clean empty cells.
pub const BACKGROUND_LOGIT: f64 = -5.0;
/// Oracle logit of the labeled class; other classes get the negation.
pub const CLASS_LOGIT: f64 = 4.0;

const MIN_EXTENT: f64 = 0.05;
const MAX_EXTENT: f64 = 0.45;
/// Cell offsets written by the oracle stay inside this margin.
const OFFSET_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub scene_id: u32,
    pub class_distribution: Vec<f64>,
    pub object_count_range: [usize; 2],
    /// Standard deviation of the per-frame center step.
    pub motion_sigma: f64,
    pub duration_range: [usize; 2],
    /// Rotation (radians) of class signatures away from their canonical look.
    pub appearance_shift: f64,
    pub background_level: f64,
    /// Mean object lifetime in frames; `None` keeps objects for the whole
    /// scene.
    pub mean_lifetime: Option<f64>,
    /// Box extent range.
    pub size_range: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            scene_id: 0,
            class_distribution: vec![0.25; 4],
            object_count_range: [2, 5],
            motion_sigma: 0.005,
            duration_range: [400, 600],
            appearance_shift: 0.0,
            background_level: 0.3,
            mean_lifetime: None,
            size_range: [0.12, 0.3],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let field = |f: &str| format!("scenes[{}].{f}", self.scene_id);
        if self.class_distribution.len() != classes {
            return Err(Error::config(
                field("class_distribution"),
                format!("expected {classes} entries, found {}", self.class_distribution.len()),
            ));
        }
        if self.class_distribution.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config(field("class_distribution"), "entries must be >= 0"));
        }
        let sum: f64 = self.class_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                field("class_distribution"),
                format!("sums to {sum}, not 1"),
            ));
        }
        if self.object_count_range[0] > self.object_count_range[1] {
            return Err(Error::config(field("object_count_range"), "min > max"));
        }
        if self.duration_range[0] > self.duration_range[1] || self.duration_range[0] == 0 {
            return Err(Error::config(field("duration_range"), "need 1 <= min <= max"));
        }
        if !(self.motion_sigma >= 0.0) {
            return Err(Error::config(field("motion_sigma"), "must be >= 0"));
        }
        let [lo, hi] = self.size_range;
        if !(lo >= MIN_EXTENT && lo <= hi && hi <= MAX_EXTENT) {
            return Err(Error::config(
                field("size_range"),
                format!("need {MIN_EXTENT} <= min <= max <= {MAX_EXTENT}"),
            ));
        }
        if let Some(l) = self.mean_lifetime {
            if !(l >= 1.0) {
                return Err(Error::config(field("mean_lifetime"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// One labeled object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub object_id: u64,
}

impl GroundTruthObject {
    pub fn as_detection(&self) -> Detection {
        Detection::certain(self.bbox, self.class_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub scene_id: u32,
    pub frame: FeatureFrame,
    pub gt: Vec<GroundTruthObject>,
    pub oracle_tensor: Option<DetectionTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub s: usize,
    pub c: usize,
    pub d: usize,
}

impl TraceHeader {
    pub fn shape(&self) -> GridShape {
        GridShape { s: self.s, c: self.c }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub header: TraceHeader,
    pub frames: Vec<FrameRecord>,
}

impl Stream {
    pub fn shape(&self) -> GridShape {
        self.header.shape()
    }

    /// Frames where the labeled scene differs from the previous frame's.
    pub fn change_points(&self) -> Vec<u64> {
        self.frames
            .windows(2)
            .filter(|w| w[0].scene_id != w[1].scene_id)
            .map(|w| w[1].frame_id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub s: usize,
    pub c: usize,
    pub d: usize,
    pub n_frames: usize,
    pub transition_len: usize,
    pub seed: u64,
    /// Seeds class signatures and scene looks; streams that share it share
    /// the same visual world.
    pub world_seed: u64,
    pub feature_noise: f64,
    pub object_amplitude: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            s: 8,
            c: 4,
            d: 16,
            n_frames: 1000,
            transition_len: 4,
            seed: 0,
            world_seed: 0x5eed,
            feature_noise: 0.05,
            object_amplitude: 1.5,
        }
    }
}

impl StreamConfig {
    pub fn shape(&self) -> GridShape {
        GridShape { s: self.s, c: self.c }
    }

    pub fn validate(&self) -> Result<()> {
        GridShape::new(self.s, self.c)?;
        if self.d < self.c + 4 {
            return Err(Error::config(
                "stream.d",
                format!("need at least c + 4 = {} feature channels", self.c + 4),
            ));
        }
        if self.n_frames == 0 {
            return Err(Error::config("stream.n_frames", "must be >= 1"));
        }
        if self.transition_len < 2 {
            return Err(Error::config("stream.transition_len", "must be >= 2"));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::config("stream.feature_noise", "must be >= 0"));
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Removes the components of `v` along each (orthonormal) basis vector.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
    }
}

/// Canonical directions shared by every scene.
#[derive(Debug, Clone)]
struct World {
    class_sigs: Vec<Vec<f64>>,
    /// x offset, y offset, width, height
    box_dirs: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &StreamConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..cfg.c + 4 {
            let mut v = random_unit(&mut rng, cfg.d);
            orthogonalize(&mut v, &basis);
            normalize(&mut v);
            basis.push(v);
        }
        let box_dirs = basis.split_off(cfg.c);
        Self {
            class_sigs: basis,
            box_dirs,
        }
    }
}

/// Scene-specific rendering of the world.
#[derive(Debug, Clone)]
struct SceneLook {
    sigs: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl SceneLook {
    fn new(world: &World, spec: &SceneSpec, cfg: &StreamConfig) -> Self {
        let salt = (spec.scene_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed ^ salt);
        let mut canon = world.class_sigs.clone();
        canon.extend(world.box_dirs.iter().cloned());
        let (cos, sin) = (spec.appearance_shift.cos(), spec.appearance_shift.sin());
        let mut private: Vec<Vec<f64>> = Vec::new();
        let sigs = world
            .class_sigs
            .iter()
            .map(|v| {
                let mut q = random_unit(&mut rng, cfg.d);
                orthogonalize(&mut q, &canon);
                orthogonalize(&mut q, &private);
                normalize(&mut q);
                private.push(q.clone());
                v.iter().zip(&q).map(|(a, b)| cos * a + sin * b).collect()
            })
            .collect();
        let background = random_unit(&mut rng, cfg.d)
            .into_iter()
            .map(|x| x * spec.background_level)
            .collect();
        Self { sigs, background }
    }
}

#[derive(Debug, Clone)]
struct LiveObject {
    gt: GroundTruthObject,
    /// Frame at which the object is replaced.
    expires: Option<u64>,
}

/// One contiguous stretch of a scene.
#[derive(Debug, Clone, Default)]
struct Instance {
    spec: usize,
    /// First labeled frame.
    start: u64,
    objects: Vec<LiveObject>,
    /// Last frame the objects were advanced to; `None` before first use.
    stepped: Option<u64>,
}

struct Generator<'a> {
    cfg: &'a StreamConfig,
    scenes: &'a [SceneSpec],
    world: World,
    looks: Vec<SceneLook>,
    rng: ChaCha8Rng,
    next_object: u64,
}

impl Generator<'_> {
    fn sample_class(&mut self, spec: &SceneSpec) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (k, &p) in spec.class_distribution.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        spec.class_distribution.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn spawn(&mut self, spec_idx: usize, now: u64) -> LiveObject {
        let scenes = self.scenes;
        let spec = &scenes[spec_idx];
        let class_id = self.sample_class(spec);
        let [lo, hi] = spec.size_range;
        let w = self.rng.random_range(lo..=hi);
        let h = self.rng.random_range(lo..=hi);
        let cx = self.rng.random_range(w / 2.0..=1.0 - w / 2.0);
        let cy = self.rng.random_range(h / 2.0..=1.0 - h / 2.0);
        let expires = spec.mean_lifetime.map(|mean| {
            // geometric lifetime with the given mean
            let u: f64 = self.rng.random_range(f64::EPSILON..1.0);
            now + 1 + (-(u.ln()) * mean).floor() as u64
        });
        let object_id = self.next_object;
        self.next_object += 1;
        LiveObject {
            gt: GroundTruthObject {
                bbox: BoundingBox { cx, cy, w, h },
                class_id,
                object_id,
            },
            expires,
        }
    }

    fn populate(&mut self, inst: &mut Instance, now: u64) {
        let [lo, hi] = self.scenes[inst.spec].object_count_range;
        let n = self.rng.random_range(lo..=hi);
        inst.objects = (0..n).map(|_| self.spawn(inst.spec, now)).collect();
    }

    fn advance(&mut self, inst: &mut Instance, now: u64) {
        let sigma = self.scenes[inst.spec].motion_sigma;
        let step = Normal::new(0.0, sigma.max(0.0)).unwrap();
        for i in 0..inst.objects.len() {
            if inst.objects[i].expires.is_some_and(|t| t <= now) {
                inst.objects[i] = self.spawn(inst.spec, now);
                continue;
            }
            if sigma > 0.0 {
                let b = &mut inst.objects[i].gt.bbox;
                b.cx = (b.cx + step.sample(&mut self.rng)).clamp(b.w / 2.0, 1.0 - b.w / 2.0);
                b.cy = (b.cy + step.sample(&mut self.rng)).clamp(b.h / 2.0, 1.0 - b.h / 2.0);
            }
        }
    }

    /// Noise-free rendering of one instance into `out`.
    fn render(&self, inst: &Instance, out: &mut [f64]) {
        let (s, d) = (self.cfg.s, self.cfg.d);
        let look = &self.looks[inst.spec];
        for cell in out.chunks_exact_mut(d) {
            cell.copy_from_slice(&look.background);
        }
        let sf = s as f64;
        for obj in &inst.objects {
            let b = &obj.gt.bbox;
            let col = ((b.cx * sf).floor() as usize).min(s - 1);
            let row = ((b.cy * sf).floor() as usize).min(s - 1);
            let fx = b.cx * sf - col as f64;
            let fy = b.cy * sf - row as f64;
            let cell = &mut out[(row * s + col) * d..(row * s + col + 1) * d];
            let coeffs = [fx - 0.5, fy - 0.5, 3.0 * (b.w - 0.2), 3.0 * (b.h - 0.2)];
            let sig = &look.sigs[obj.gt.class_id];
            for k in 0..d {
                let mut v = self.cfg.object_amplitude * sig[k];
                for (c, dir) in coeffs.iter().zip(&self.world.box_dirs) {
                    v += c * dir[k];
                }
                cell[k] += v;
            }
        }
    }
}

/// Generates a deterministic stream from `scenes`, visited in order and
/// cycled until `n_frames` frames exist.
pub fn generate_stream(scenes: &[SceneSpec], cfg: &StreamConfig) -> Result<Stream> {
    if scenes.is_empty() {
        return Err(Error::config("scenes", "at least one scene is required"));
    }
    cfg.validate()?;
    for s in scenes {
        s.validate(cfg.c)?;
    }
    let world = World::new(cfg);
    let looks = scenes.iter().map(|s| SceneLook::new(&world, s, cfg)).collect();
    let mut gen = Generator {
        cfg,
        scenes,
        world,
        looks,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        next_object: 0,
    };

    let n = cfg.n_frames as u64;
    let mut instances: Vec<Instance> = Vec::new();
    if scenes.len() == 1 {
        instances.push(Instance {
            spec: 0,
            start: 0,
            objects: Vec::new(),
            stepped: None,
        });
    } else {
        let mut start = 0u64;
        let mut k = 0;
        while start < n {
            let [lo, hi] = scenes[k % scenes.len()].duration_range;
            let len = gen.rng.random_range(lo..=hi) as u64;
            instances.push(Instance {
                spec: k % scenes.len(),
                start,
                objects: Vec::new(),
                stepped: None,
            });
            start += len;
            k += 1;
        }
    }

    let (s, d) = (cfg.s, cfg.d);
    let len = cfg.transition_len as u64;
    let half = len / 2;
    let noise = Normal::new(0.0, cfg.feature_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut cur = 0usize;
    let mut buf_a = vec![0.0; s * s * d];
    let mut buf_b = vec![0.0; s * s * d];

    for t in 0..n {
        if cur + 1 < instances.len() && t >= instances[cur + 1].start {
            cur += 1;
        }
        // transition windows span [b - half, b - half + len) around each
        // boundary b; `incoming` is the later instance of the active window
        let incoming = if cur + 1 < instances.len() && t + half >= instances[cur + 1].start {
            Some(cur + 1)
        } else if cur > 0 && t + half < instances[cur].start + len {
            Some(cur)
        } else {
            None
        };
        let visible: Vec<usize> = match incoming {
            Some(i) => vec![i - 1, i],
            None => vec![cur],
        };
        for &i in &visible {
            let mut inst = std::mem::take(&mut instances[i]);
            match inst.stepped {
                None => {
                    gen.populate(&mut inst, t);
                    inst.stepped = Some(t);
                }
                Some(last) if last < t => {
                    gen.advance(&mut inst, t);
                    inst.stepped = Some(t);
                }
                Some(_) => {}
            }
            instances[i] = inst;
        }
        let mut values = vec![0.0; s * s * d];
        match incoming {
            Some(i) => {
                gen.render(&instances[i - 1], &mut buf_a);
                gen.render(&instances[i], &mut buf_b);
                let offset = t + half - instances[i].start;
                let alpha = (offset + 1) as f64 / (len + 1) as f64;
                for ((v, a), b) in values.iter_mut().zip(&buf_a).zip(&buf_b) {
                    *v = (1.0 - alpha) * a + alpha * b;
                }
            }
            None => {
                gen.render(&instances[cur], &mut values);
            }
        }
        if cfg.feature_noise > 0.0 {
            for v in values.iter_mut() {
                *v += noise.sample(&mut gen.rng);
            }
        }
        let labeled = &instances[cur];
        frames.push(FrameRecord {
            frame_id: t,
            scene_id: scenes[labeled.spec].scene_id,
            frame: FeatureFrame::new(t, s, d, values)?,
            gt: labeled.objects.iter().map(|o| o.gt).collect(),
            oracle_tensor: None,
        });
    }

    Ok(Stream {
        header: TraceHeader {
            version: TRACE_VERSION,
            s,
            c: cfg.c,
            d,
        },
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoiseSpec {
    /// Fraction of empty cells that receive a spurious response.
    pub empty_cell_noise_rate: f64,
    /// Range of spurious objectness logits.
    pub noise_logit_range: [f64; 2],
    /// Standard deviation of the noise on spurious cells' box and class
    /// channels.
    pub noise_channel_sigma: f64,
    pub box_jitter_sigma: f64,
    pub class_flip_prob: f64,
}

impl Default for OracleNoiseSpec {
    fn default() -> Self {
        Self {
            empty_cell_noise_rate: 0.1,
            noise_logit_range: [-3.0, -1.0],
            noise_channel_sigma: 1.0,
            box_jitter_sigma: 0.005,
            class_flip_prob: 0.0,
        }
    }
}

impl OracleNoiseSpec {
    pub fn clean() -> Self {
        Self {
            empty_cell_noise_rate: 0.0,
            noise_logit_range: [-3.0, -1.0],
            noise_channel_sigma: 0.0,
            box_jitter_sigma: 0.0,
            class_flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.empty_cell_noise_rate) {
            return Err(Error::config("oracle.empty_cell_noise_rate", "must lie in [0, 1]"));
        }
        let [lo, hi] = self.noise_logit_range;
        if !(lo <= hi) {
            return Err(Error::config("oracle.noise_logit_range", "lo must be <= hi"));
        }
        if !(0.0..=1.0).contains(&self.class_flip_prob) {
            return Err(Error::config("oracle.class_flip_prob", "must lie in [0, 1]"));
        }
        if !(self.box_jitter_sigma >= 0.0 && self.noise_channel_sigma >= 0.0) {
            return Err(Error::config("oracle", "noise scales must be >= 0"));
        }
        Ok(())
    }
}

/// Near-ground-truth oracle output.
///
/// When two objects share a cell the one nearer the cell center wins.
pub fn synth_oracle<R: Rng + ?Sized>(
    gt: &[GroundTruthObject],
    noise: &OracleNoiseSpec,
    shape: GridShape,
    rng: &mut R,
) -> DetectionTensor {
    let mut t = DetectionTensor::zeros(shape);
    for i in 0..shape.cells() {
        t.cell_mut(i)[0] = BACKGROUND_LOGIT;
    }
    let s = shape.s as f64;
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; shape.cells()];
    for (k, o) in gt.iter().enumerate() {
        let (row, col) = shape.cell_of(o.bbox.cx, o.bbox.cy);
        let dx = o.bbox.cx * s - (col as f64 + 0.5);
        let dy = o.bbox.cy * s - (row as f64 + 0.5);
        let dist = dx * dx + dy * dy;
        let idx = row * shape.s + col;
        match owner[idx] {
            Some((_, best)) if best <= dist => {}
            _ => owner[idx] = Some((k, dist)),
        }
    }
    let jitter = Normal::new(0.0, noise.box_jitter_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let chan = Normal::new(0.0, noise.noise_channel_sigma.max(f64::MIN_POSITIVE)).unwrap();
    for idx in 0..shape.cells() {
        let (row, col) = (idx / shape.s, idx % shape.s);
        match owner[idx] {
            Some((k, _)) => {
                let o = &gt[k];
                let mut b = o.bbox;
                if noise.box_jitter_sigma > 0.0 {
                    b.cx += jitter.sample(rng);
                    b.cy += jitter.sample(rng);
                    b.w += jitter.sample(rng);
                    b.h += jitter.sample(rng);
                }
                // keep the center inside the owning cell
                let x0 = (col as f64 + OFFSET_MARGIN) / s;
                let x1 = (col as f64 + 1.0 - OFFSET_MARGIN) / s;
                let y0 = (row as f64 + OFFSET_MARGIN) / s;
                let y1 = (row as f64 + 1.0 - OFFSET_MARGIN) / s;
                b.cx = b.cx.clamp(x0, x1);
                b.cy = b.cy.clamp(y0, y1);
                b.w = b.w.clamp(0.01, 0.99);
                b.h = b.h.clamp(0.01, 0.99);
                let mut class_id = o.class_id;
                if shape.c > 1 && noise.class_flip_prob > 0.0 && rng.random_bool(noise.class_flip_prob) {
                    class_id = (class_id + rng.random_range(1..shape.c)) % shape.c;
                }
                let cell = t.cell_mut(idx);
                cell[0] = OBJECT_LOGIT;
                cell[1..5].copy_from_slice(&box_logits(shape, &b, row, col));
                for (k, v) in cell[BOX_CHANNELS..].iter_mut().enumerate() {
                    *v = if k == class_id { CLASS_LOGIT } else { -CLASS_LOGIT };
                }
            }
            None => {
                if noise.empty_cell_noise_rate > 0.0 && rng.random_bool(noise.empty_cell_noise_rate) {
                    let [lo, hi] = noise.noise_logit_range;
                    let cell = t.cell_mut(idx);
                    cell[0] = if lo < hi { rng.random_range(lo..hi) } else { lo };
                    if noise.noise_channel_sigma > 0.0 {
                        for v in cell[1..].iter_mut() {
                            *v = chan.sample(rng);
                        }
                    }
                }
            }
        }
    }
    t
}

/// Deterministic per-frame oracle: the tensor of a frame depends only on the
/// frame's labels, the noise spec and `seed`, never on call order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub shape: GridShape,
    pub noise: OracleNoiseSpec,
    pub seed: u64,
}

impl SyntheticOracle {
    pub fn new(shape: GridShape, noise: OracleNoiseSpec, seed: u64) -> Self {
        Self { shape, noise, seed }
    }

    pub fn tensor_for(&self, rec: &FrameRecord) -> DetectionTensor {
        if let Some(t) = &rec.oracle_tensor {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ rec.frame_id.wrapping_mul(0xA076_1D64_78BD_642F));
        synth_oracle(&rec.gt, &self.noise, self.shape, &mut rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TraceGt {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class_id: usize,
    object_id: u64,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    frame_id: u64,
    scene_id: u32,
    features: Vec<f64>,
    gt: Vec<TraceGt>,
    #[serde(default)]
    oracle: Option<Vec<f64>>,
}

/// Writes the header line followed by one JSON record per frame.
pub fn write_trace(stream: &Stream, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer(&mut w, &stream.header)?;
    w.write_all(b"\n")?;
    for f in &stream.frames {
        let line = TraceLine {
            frame_id: f.frame_id,
            scene_id: f.scene_id,
            features: f.frame.values().to_vec(),
            gt: f
                .gt
                .iter()
                .map(|g| TraceGt {
                    cx: g.bbox.cx,
                    cy: g.bbox.cy,
                    w: g.bbox.w,
                    h: g.bbox.h,
                    class_id: g.class_id,
                    object_id: g.object_id,
                })
                .collect(),
            oracle: f.oracle_tensor.as_ref().map(|t| t.values().to_vec()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Stream> {
    let path = path.as_ref();
    let err = |line: usize, reason: String| Error::Trace {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| err(1, "missing header line".into()))??;
    let header: TraceHeader = serde_json::from_str(&first).map_err(|e| err(1, format!("malformed header: {e}")))?;
    if header.version != TRACE_VERSION {
        return Err(Error::Version {
            what: "trace",
            found: header.version,
            expected: TRACE_VERSION,
        });
    }
    let shape = GridShape::new(header.s, header.c).map_err(|e| err(1, e.to_string()))?;
    if header.d == 0 {
        return Err(err(1, "feature channels must be >= 1".into()));
    }
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line).map_err(|e| err(no, format!("malformed record: {e}")))?;
        let want = header.s * header.s * header.d;
        if rec.features.len() != want {
            return Err(err(
                no,
                format!(
                    "dimension mismatch: header declares {}x{}x{} = {want} features, record has {}",
                    header.s,
                    header.s,
                    header.d,
                    rec.features.len()
                ),
            ));
        }
        let frame =
            FeatureFrame::new(rec.frame_id, header.s, header.d, rec.features).map_err(|e| err(no, e.to_string()))?;
        let gt = rec
            .gt
            .into_iter()
            .map(|g| {
                if g.class_id >= header.c {
                    return Err(err(no, format!("class {} out of range", g.class_id)));
                }
                Ok(GroundTruthObject {
                    bbox: BoundingBox::new(g.cx, g.cy, g.w, g.h).map_err(|e| err(no, e.to_string()))?,
                    class_id: g.class_id,
                    object_id: g.object_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let oracle_tensor = match rec.oracle {
            Some(v) => Some(DetectionTensor::from_values(shape, v).map_err(|e| err(no, e.to_string()))?),
            None => None,
        };
        frames.push(FrameRecord {
            frame_id: rec.frame_id,
            scene_id: rec.scene_id,
            frame,
            gt,
            oracle_tensor,
        });
    }
    Ok(Stream { header, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{decode_tensor, iou, partition_cells};

    fn cfg(n: usize, seed: u64) -> StreamConfig {
        StreamConfig {
            n_frames: n,
            seed,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn static_scene_keeps_labels() {
        let scene = SceneSpec {
            motion_sigma: 0.0,
            ..SceneSpec::default()
        };
        let st = generate_stream(&[scene], &cfg(50, 1)).unwrap();
        assert_eq!(st.len(), 50);
        let first = &st.frames[0].gt;
        assert!(!first.is_empty());
        assert!(st.frames.iter().all(|f| &f.gt == first));
        assert!(st.change_points().is_empty());
    }

    #[test]
    fn same_seed_same_stream() {
        let scenes = [
            SceneSpec::default(),
            SceneSpec {
                scene_id: 1,
                appearance_shift: 1.0,
                ..SceneSpec::default()
            },
        ];
        let a = generate_stream(&scenes, &cfg(300, 5)).unwrap();
        let b = generate_stream(&scenes, &cfg(300, 5)).unwrap();
        assert_eq!(a, b);
        let c = generate_stream(&scenes, &cfg(300, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn disjoint_class_supports_split_at_change() {
        let a = SceneSpec {
            scene_id: 0,
            class_distribution: vec![0.5, 0.5, 0.0, 0.0],
            duration_range: [100, 100],
            ..SceneSpec::default()
        };
        let b = SceneSpec {
            scene_id: 1,
            class_distribution: vec![0.0, 0.0, 0.5, 0.5],
            duration_range: [100, 100],
            ..SceneSpec::default()
        };
        let st = generate_stream(&[a, b], &cfg(200, 2)).unwrap();
        assert_eq!(st.change_points(), vec![100]);
        let before: Vec<usize> = st.frames[..100]
            .iter()
            .flat_map(|f| f.gt.iter().map(|g| g.class_id))
            .collect();
        let after: Vec<usize> = st.frames[100..]
            .iter()
            .flat_map(|f| f.gt.iter().map(|g| g.class_id))
            .collect();
        assert!(before.iter().all(|&c| c < 2));
        assert!(after.iter().all(|&c| c >= 2));
    }

    #[test]
    fn transition_blends_features() {
        let a = SceneSpec {
            scene_id: 0,
            duration_range: [50, 50],
            background_level: 1.0,
            ..SceneSpec::default()
        };
        let b = SceneSpec {
            scene_id: 1,
            ..a.clone()
        };
        let c = StreamConfig {
            feature_noise: 0.0,
            transition_len: 4,
            ..cfg(100, 3)
        };
        let st = generate_stream(&[a, b], &c).unwrap();
        // features move away from scene A during frames 48..52
        let base = &st.frames[40].frame;
        let diffs: Vec<f64> = (44..56)
            .map(|t| st.frames[t].frame.mean_abs_diff(base).unwrap())
            .collect();
        assert!(diffs[0] < diffs[5]);
        assert!(diffs[4] < diffs[6], "{diffs:?}");
    }

    #[test]
    fn class_frequencies_follow_scene_distribution() {
        let dist = vec![0.1, 0.2, 0.3, 0.4];
        let scene = SceneSpec {
            class_distribution: dist.clone(),
            mean_lifetime: Some(10.0),
            ..SceneSpec::default()
        };
        let st = generate_stream(&[scene], &cfg(2000, 4)).unwrap();
        // count each object once
        let mut seen = std::collections::BTreeMap::new();
        for f in &st.frames {
            for g in &f.gt {
                seen.insert(g.object_id, g.class_id);
            }
        }
        let mut counts = [0.0; 4];
        for c in seen.values() {
            counts[*c] += 1.0;
        }
        let n: f64 = counts.iter().sum();
        let tv: f64 = counts.iter().zip(&dist).map(|(c, p)| (c / n - p).abs()).sum::<f64>() / 2.0;
        assert!(n > 500.0);
        assert!(tv <= 0.05, "tv {tv}");
    }

    #[test]
    fn rejects_bad_scene_specs() {
        assert!(generate_stream(&[], &cfg(10, 0)).is_err());
        let bad = SceneSpec {
            class_distribution: vec![0.5, 0.6, 0.0, 0.0],
            ..SceneSpec::default()
        };
        let e = generate_stream(&[bad], &cfg(10, 0)).unwrap_err();
        assert!(e.to_string().contains("class_distribution"));
        let bad = SceneSpec {
            object_count_range: [3, 1],
            ..SceneSpec::default()
        };
        assert!(generate_stream(&[bad], &cfg(10, 0)).is_err());
        let short = StreamConfig {
            transition_len: 1,
            ..cfg(10, 0)
        };
        assert!(generate_stream(&[SceneSpec::default()], &short).is_err());
    }

    fn obj(cx: f64, cy: f64, class_id: usize) -> GroundTruthObject {
        GroundTruthObject {
            bbox: BoundingBox::new(cx, cy, 0.2, 0.25).unwrap(),
            class_id,
            object_id: 0,
        }
    }

    #[test]
    fn clean_oracle_without_objects_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = synth_oracle(&[], &OracleNoiseSpec::clean(), GridShape::new(8, 4).unwrap(), &mut rng);
        assert!(decode_tensor(&t, 0.5).is_empty());
    }

    #[test]
    fn clean_oracle_round_trips_one_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = obj(0.43, 0.61, 2);
        let t = synth_oracle(&[g], &OracleNoiseSpec::clean(), GridShape::new(8, 4).unwrap(), &mut rng);
        let dets = decode_tensor(&t, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 2);
        assert!(iou(&dets[0].bbox, &g.bbox) >= 0.95);
        assert!(dets[0].objectness >= 0.95);
    }

    #[test]
    fn sub_threshold_noise_stays_out_of_high_partition() {
        let shape = GridShape::new(8, 4).unwrap();
        let noise = OracleNoiseSpec {
            empty_cell_noise_rate: 0.2,
            noise_logit_range: [-2.0, -0.1],
            ..OracleNoiseSpec::default()
        };
        let gt = [obj(0.1, 0.1, 0), obj(0.7, 0.3, 1)];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = synth_oracle(&gt, &noise, shape, &mut rng);
            let (h, _) = partition_cells(&t, 0.5);
            assert_eq!(h.count(), 2);
            assert!(h.contains(0) && h.contains(2 * 8 + 5));
        }
    }

    #[test]
    fn shared_cell_goes_to_nearest_center() {
        let shape = GridShape::new(4, 2).unwrap();
        // both in cell (0, 0); the second is closer to its center (0.125)
        let far = obj(0.02, 0.02, 0);
        let near = obj(0.12, 0.13, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = synth_oracle(&[far, near], &OracleNoiseSpec::clean(), shape, &mut rng);
        let dets = decode_tensor(&t, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
    }

    #[test]
    fn oracle_is_deterministic_per_frame() {
        let st = generate_stream(&[SceneSpec::default()], &cfg(5, 0)).unwrap();
        let o = SyntheticOracle::new(st.shape(), OracleNoiseSpec::default(), 9);
        let a = o.tensor_for(&st.frames[3]);
        let _ = o.tensor_for(&st.frames[1]);
        assert_eq!(a, o.tensor_for(&st.frames[3]));
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.trace");
        let mut st = generate_stream(&[SceneSpec::default()], &cfg(10, 1)).unwrap();
        let o = SyntheticOracle::new(st.shape(), OracleNoiseSpec::default(), 1);
        st.frames[2].oracle_tensor = Some(o.tensor_for(&st.frames[2]));
        write_trace(&st, &path).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.header, st.header);
        assert_eq!(back.len(), 10);
        for (a, b) in st.frames.iter().zip(&back.frames) {
            assert_eq!(a.frame_id, b.frame_id);
            assert_eq!(a.gt, b.gt);
            for (x, y) in a.frame.values().iter().zip(b.frame.values()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        assert!(back.frames[2].oracle_tensor.is_some());
    }

    #[test]
    fn truncated_trace_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.trace");
        let st = generate_stream(&[SceneSpec::default()], &cfg(4, 1)).unwrap();
        write_trace(&st, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 40]).unwrap();
        match read_trace(&path) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected trace error, got {other:?}"),
        }
    }

    #[test]
    fn header_dimension_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.trace");
        let c = StreamConfig { s: 4, ..cfg(2, 1) };
        let st = generate_stream(&[SceneSpec::default()], &c).unwrap();
        write_trace(&st, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let patched = text.replacen("\"s\":4", "\"s\":8", 1);
        std::fs::write(&path, patched).unwrap();
        let e = read_trace(&path).unwrap_err();
        assert!(matches!(e, Error::Trace { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("dimension mismatch"));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.trace");
        std::fs::write(&path, "{\"version\":7,\"s\":2,\"c\":1,\"d\":5}\n").unwrap();
        assert!(matches!(read_trace(&path), Err(Error::Version { found: 7, .. })));
    }
}
