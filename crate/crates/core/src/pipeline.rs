//! End-to-end runners.
//!
//! Every frame goes through the frozen backbone, the adaptive (TKD) decoder
//! and the frozen general decoder; the two decoded outputs are merged. In
//! sequential mode a positive key-frame decision runs the oracle and the
//! distillation step inline. In parallel mode the frame is handed to a
//! worker thread that owns all parameter writes, and inference keeps using
//! the last committed snapshot.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{decode_tensor, nms, Detection, DetectionTensor};
use crate::distill::{distill_step, tkd_loss_grad, DistillConfig, FeedbackRecord};
use crate::error::{Error, Result};
use crate::eval::EvalSummary;
use crate::models::{decoder_forward, sgd_step, Backbone, DecoderParams, FeatureFrame, FeatureSummary, ParamStore};
use crate::selector::{Decision, PeriodicSelector, RandomSelector, SceneChangeSelector, SelectorConfig, SelectorState};
use crate::sim::{generate_stream, FrameRecord, OracleNoiseSpec, SceneSpec, Stream, StreamConfig, SyntheticOracle};

/// Checkpoint format version written by [`checkpoint_save`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Parallel,
    FrozenStudent,
    Mixed { p_oracle: f64 },
    OracleOnly,
}

impl Mode {
    pub fn name(&self) -> String {
        match self {
            Mode::Sequential => "sequential".into(),
            Mode::Parallel => "parallel".into(),
            Mode::FrozenStudent => "frozen_student".into(),
            Mode::Mixed { p_oracle } => format!("mixed({p_oracle})"),
            Mode::OracleOnly => "oracle_only".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorKind {
    Tkd,
    Random { p: f64 },
    SceneChange { threshold: f64 },
    Periodic { every: u64 },
}

impl SelectorKind {
    pub fn name(&self) -> String {
        match self {
            SelectorKind::Tkd => "tkd".into(),
            SelectorKind::Random { p } => format!("random({p})"),
            SelectorKind::SceneChange { threshold } => format!("scene_change({threshold})"),
            SelectorKind::Periodic { every } => format!("periodic({every})"),
        }
    }
}

/// Simulated oracle compute time per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleDelay {
    Fixed {
        micros: u64,
    },
    /// A multiple of the student's measured median forward time.
    StudentMultiple {
        factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub selector: SelectorKind,
    /// Parameters of the LSTM-gated selector; `tau` also applies to the
    /// baseline selectors.
    pub tkd_selector: SelectorConfig,
    pub distill: DistillConfig,
    pub oracle_delay: OracleDelay,
    pub oracle_noise: OracleNoiseSpec,
    pub queue_capacity: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
    /// Run the parallel-mode worker at idle scheduling priority so that it
    /// only uses CPU time inference leaves unused.
    pub background_worker: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sequential,
            selector: SelectorKind::Tkd,
            tkd_selector: SelectorConfig::default(),
            distill: DistillConfig::default(),
            oracle_delay: OracleDelay::Fixed { micros: 0 },
            oracle_noise: OracleNoiseSpec::default(),
            queue_capacity: 4,
            conf_threshold: 0.5,
            nms_iou: 0.45,
            seed: 0,
            background_worker: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tkd_selector.validate()?;
        self.distill.validate()?;
        self.oracle_noise.validate()?;
        if let Mode::Mixed { p_oracle } = self.mode {
            if !(0.0..=1.0).contains(&p_oracle) {
                return Err(Error::config("pipeline.mode.p_oracle", "must lie in [0, 1]"));
            }
        }
        match self.selector {
            SelectorKind::Random { p } if !(0.0..=1.0).contains(&p) => {
                return Err(Error::config("pipeline.selector.p", "must lie in [0, 1]"));
            }
            SelectorKind::Periodic { every: 0 } => {
                return Err(Error::config("pipeline.selector.every", "must be >= 1"));
            }
            SelectorKind::SceneChange { threshold } if !(threshold >= 0.0) => {
                return Err(Error::config("pipeline.selector.threshold", "must be >= 0"));
            }
            _ => {}
        }
        if let OracleDelay::StudentMultiple { factor } = self.oracle_delay {
            if !(factor >= 0.0 && factor.is_finite()) {
                return Err(Error::config("pipeline.oracle_delay.factor", "must be >= 0"));
            }
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("pipeline.queue_capacity", "must be >= 1"));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::config("pipeline.conf_threshold", "must lie in (0, 1)"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::config("pipeline.nms_iou", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// The oracle a run with this configuration consults; evaluation against
    /// oracle-as-GT must use the same one.
    pub fn oracle(&self, stream: &Stream) -> SyntheticOracle {
        SyntheticOracle::new(stream.shape(), self.oracle_noise, self.seed ^ 0x0AC1_E5EE_D000_0001)
    }
}

/// Architecture and pretraining of the student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub backbone_seed: u64,
    pub decoder_seed: u64,
    /// Frames of canonical-appearance data the general decoder is fit on.
    pub pretrain_frames: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_scenes: usize,
    pub pretrain_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            backbone_seed: 11,
            decoder_seed: 13,
            pretrain_frames: 1200,
            pretrain_epochs: 3,
            pretrain_lr: 0.5,
            pretrain_scenes: 6,
            pretrain_seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        if self.pretrain_scenes == 0 || self.pretrain_frames < self.pretrain_scenes {
            return Err(Error::config(
                "model.pretrain_frames",
                "need at least one frame per pretraining scene",
            ));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(Error::config("model.pretrain_lr", "must be > 0"));
        }
        Ok(())
    }
}

/// Frozen backbone, frozen general decoder and the adaptive decoder.
#[derive(Debug)]
pub struct Student {
    pub backbone: Backbone,
    pub general: Arc<DecoderParams>,
    tkd: ParamStore,
}

impl Clone for Student {
    fn clone(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            general: Arc::clone(&self.general),
            tkd: ParamStore::new((*self.tkd.snapshot()).clone()),
        }
    }
}

/// One student forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub features: FeatureFrame,
    pub summary: FeatureSummary,
    pub tkd_version: u64,
    pub detections: Vec<Detection>,
}

impl Student {
    /// The adaptive decoder starts as a copy of `general`.
    pub fn new(backbone: Backbone, general: DecoderParams) -> Self {
        let tkd = ParamStore::new(general.clone());
        Self {
            backbone,
            general: Arc::new(general),
            tkd,
        }
    }

    /// Fits the general decoder on canonical-appearance scenes of the world
    /// described by `world` (its seed, sizes and noise are reused).
    pub fn pretrain(world: &StreamConfig, model: &ModelConfig) -> Result<Self> {
        model.validate()?;
        let scenes: Vec<SceneSpec> = (0..model.pretrain_scenes)
            .map(|i| {
                let per = model.pretrain_frames / model.pretrain_scenes;
                SceneSpec {
                    scene_id: 1_000_000 + i as u32,
                    class_distribution: vec![1.0 / world.c as f64; world.c],
                    mean_lifetime: Some(15.0),
                    duration_range: [per, per],
                    ..SceneSpec::default()
                }
            })
            .collect();
        let cfg = StreamConfig {
            n_frames: model.pretrain_frames,
            seed: model.pretrain_seed,
            transition_len: 2,
            ..*world
        };
        let stream = generate_stream(&scenes, &cfg)?;
        let backbone = Backbone::new(world.d, model.backbone_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(model.decoder_seed);
        let mut params = DecoderParams::random(world.d, model.hidden, world.c, &mut rng);
        let oracle = SyntheticOracle::new(stream.shape(), OracleNoiseSpec::clean(), model.pretrain_seed);
        let full = DistillConfig {
            lambda: 0.0,
            ..DistillConfig::default()
        };
        let feats: Vec<(FeatureFrame, DetectionTensor)> = stream
            .frames
            .iter()
            .map(|f| (backbone.forward(&f.frame).0, oracle.tensor_for(f)))
            .collect();
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for _ in 0..model.pretrain_epochs {
            // shuffled passes
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for &i in &order {
                let (x, target) = &feats[i];
                let out = decoder_forward(&params, x)?;
                let g_out = tkd_loss_grad(&out, target, &full)?;
                let g = crate::models::decoder_grad(&params, x, &g_out)?;
                params = sgd_step(&params, &g, model.pretrain_lr)?;
            }
        }
        params.version = 0;
        Ok(Self::new(backbone, params))
    }

    pub fn tkd(&self) -> Arc<DecoderParams> {
        self.tkd.snapshot()
    }

    /// Same backbone and general decoder with a different adaptive decoder.
    pub fn with_tkd(&self, tkd: DecoderParams) -> Result<Self> {
        if (tkd.d, tkd.hidden, tkd.classes) != (self.general.d, self.general.hidden, self.general.classes) {
            return Err(Error::config(
                "decoder",
                format!(
                    "adaptive decoder is {}->{}->{} classes, general is {}->{}->{}",
                    tkd.d, tkd.hidden, tkd.classes, self.general.d, self.general.hidden, self.general.classes
                ),
            ));
        }
        Ok(Self {
            backbone: self.backbone.clone(),
            general: Arc::clone(&self.general),
            tkd: ParamStore::new(tkd),
        })
    }

    /// A copy whose adaptive decoder is reset to the general decoder.
    pub fn reset(&self) -> Self {
        Self::new(self.backbone.clone(), (*self.general).clone())
    }

    pub fn infer(&self, raw: &FeatureFrame, conf_threshold: f64, nms_iou: f64) -> Result<Inference> {
        if raw.d() != self.backbone.d() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature channels", self.backbone.d()),
                found: format!("{}", raw.d()),
            });
        }
        let (features, summary) = self.backbone.forward(raw);
        let tkd = self.tkd.snapshot();
        let tkd_out = decoder_forward(&tkd, &features)?;
        let general_out = decoder_forward(&self.general, &features)?;
        let detections = merge_detections(&tkd_out, &general_out, conf_threshold, nms_iou)?;
        Ok(Inference {
            features,
            summary,
            tkd_version: tkd.version,
            detections,
        })
    }
}

/// Union of both decoders' detections, deduplicated by class-aware NMS.
pub fn merge_detections(
    tkd_out: &DetectionTensor,
    general_out: &DetectionTensor,
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    tkd_out.shape().check_same(&general_out.shape())?;
    let mut all = decode_tensor(tkd_out, conf_threshold);
    all.extend(decode_tensor(general_out, conf_threshold));
    Ok(nms(&all, iou_threshold))
}

/// Per-frame entry of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame_id: u64,
    pub scene_id: u32,
    pub decision: Decision,
    pub latency_us: f64,
    /// Adaptive decoder version used for this frame's output.
    pub params_version: u64,
    pub answered_by_oracle: bool,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: String,
    pub selector: String,
    pub frames: Vec<FrameLog>,
    pub fps: f64,
    pub wall_time_s: f64,
    pub key_frames: usize,
    pub key_frame_fraction: f64,
    pub loss_trace: Vec<FeedbackRecord>,
    /// Key frames evicted from the full worker queue.
    pub dropped_key_frames: usize,
    /// Key frames still queued when the stream ended.
    pub unprocessed_key_frames: usize,
    /// Adaptive decoder versions published during the run, initial first.
    pub committed_versions: Vec<u64>,
    pub student_forward_us: f64,
    pub oracle_delay_us: f64,
    pub abort: Option<String>,
    pub eval: Option<EvalSummary>,
}

impl PipelineReport {
    pub fn decisions(&self) -> impl Iterator<Item = &Decision> {
        self.frames.iter().map(|f| &f.decision)
    }

    pub fn is_complete(&self) -> bool {
        self.abort.is_none()
    }

    /// Mean latency over frames split by key-frame status: (non-key, key).
    pub fn mean_latency_us(&self) -> (f64, f64) {
        let mean = |key: bool| {
            let v: Vec<f64> = self
                .frames
                .iter()
                .filter(|f| f.decision.train == key)
                .map(|f| f.latency_us)
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        (mean(false), mean(true))
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: PipelineReport,
    pub decoder: DecoderParams,
    pub selector: Option<SelectorState>,
}

/// Oracle with simulated compute time.
#[derive(Debug, Clone, Copy)]
struct TimedOracle {
    oracle: SyntheticOracle,
    delay: Duration,
}

impl TimedOracle {
    fn run(&self, rec: &FrameRecord) -> DetectionTensor {
        let started = Instant::now();
        let t = self.oracle.tensor_for(rec);
        if let Some(rest) = self.delay.checked_sub(started.elapsed()) {
            thread::sleep(rest);
        }
        t
    }
}

enum FrameSelector {
    Tkd(Box<SelectorState>),
    Random(RandomSelector),
    SceneChange(SceneChangeSelector),
    Periodic(PeriodicSelector),
}

impl FrameSelector {
    fn new(cfg: &PipelineConfig, summary_len: usize) -> Result<Self> {
        let tau = cfg.tkd_selector.tau;
        let seed = cfg.seed ^ 0x5E1E_C700;
        Ok(match cfg.selector {
            SelectorKind::Tkd => Self::Tkd(Box::new(SelectorState::new(&cfg.tkd_selector, summary_len, seed)?)),
            SelectorKind::Random { p } => Self::Random(RandomSelector::new(p, tau, seed)?),
            SelectorKind::SceneChange { threshold } => Self::SceneChange(SceneChangeSelector::new(threshold, tau)),
            SelectorKind::Periodic { every } => Self::Periodic(PeriodicSelector::new(every, tau)?),
        })
    }

    fn decide(&mut self, raw: &FeatureFrame, summary: &FeatureSummary) -> Result<Decision> {
        match self {
            Self::Tkd(s) => s.decide(raw.frame_id, summary),
            Self::Random(s) => Ok(s.decide(raw.frame_id)),
            Self::SceneChange(s) => s.decide(raw),
            Self::Periodic(s) => Ok(s.decide(raw.frame_id)),
        }
    }

    fn feedback(&mut self, fb: &FeedbackRecord, summary: &FeatureSummary) -> Result<()> {
        if let Self::Tkd(s) = self {
            s.apply_feedback(fb, summary)?;
        }
        Ok(())
    }

    fn cancel(&mut self, frame_id: u64) {
        if let Self::Tkd(s) = self {
            s.cancel(frame_id);
        }
    }

    fn into_state(self) -> Option<SelectorState> {
        match self {
            Self::Tkd(s) => Some(*s),
            _ => None,
        }
    }
}

/// Median wall time of one student forward pass over the first frames of
/// `stream`, after one untimed warm-up pass.
pub fn calibrate_student(student: &Student, stream: &Stream, cfg: &PipelineConfig, frames: usize) -> Result<Duration> {
    let n = frames.clamp(1, stream.len().max(1)).min(stream.len());
    if n == 0 {
        return Ok(Duration::ZERO);
    }
    let probe = student.reset();
    student.infer(&stream.frames[0].frame, cfg.conf_threshold, cfg.nms_iou)?;
    let mut times = Vec::with_capacity(n);
    for rec in &stream.frames[..n] {
        let t = Instant::now();
        std::hint::black_box(probe.infer(&rec.frame, cfg.conf_threshold, cfg.nms_iou)?);
        times.push(t.elapsed());
    }
    times.sort();
    Ok(times[n / 2])
}

struct RunState {
    logs: Vec<FrameLog>,
    loss_trace: Vec<FeedbackRecord>,
    committed: Vec<u64>,
    abort: Option<String>,
}

impl RunState {
    fn new(initial_version: u64, n: usize) -> Self {
        Self {
            logs: Vec::with_capacity(n),
            loss_trace: Vec::new(),
            committed: vec![initial_version],
            abort: None,
        }
    }
}

fn finish(
    cfg: &PipelineConfig,
    st: RunState,
    started: Instant,
    forward: Duration,
    delay: Duration,
    dropped: usize,
    unprocessed: usize,
) -> PipelineReport {
    let wall = started.elapsed().as_secs_f64();
    let n = st.logs.len();
    let key_frames = st.logs.iter().filter(|f| f.decision.train).count();
    PipelineReport {
        mode: cfg.mode.name(),
        selector: match cfg.mode {
            Mode::Sequential | Mode::Parallel => cfg.selector.name(),
            _ => "none".into(),
        },
        fps: if wall > 0.0 { n as f64 / wall } else { 0.0 },
        wall_time_s: wall,
        key_frames,
        key_frame_fraction: if n > 0 { key_frames as f64 / n as f64 } else { 0.0 },
        frames: st.logs,
        loss_trace: st.loss_trace,
        dropped_key_frames: dropped,
        unprocessed_key_frames: unprocessed,
        committed_versions: st.committed,
        student_forward_us: forward.as_secs_f64() * 1e6,
        oracle_delay_us: delay.as_secs_f64() * 1e6,
        abort: st.abort,
        eval: None,
    }
}

fn setup(stream: &Stream, cfg: &PipelineConfig, student: &Student) -> Result<(Duration, TimedOracle)> {
    cfg.validate()?;
    let shape = stream.shape();
    if student.general.classes != shape.c || student.backbone.d() != stream.header.d {
        return Err(Error::config(
            "stream",
            format!(
                "stream has c={} d={}, student expects c={} d={}",
                shape.c,
                stream.header.d,
                student.general.classes,
                student.backbone.d()
            ),
        ));
    }
    let forward = calibrate_student(student, stream, cfg, 50)?;
    let delay = match cfg.oracle_delay {
        OracleDelay::Fixed { micros } => Duration::from_micros(micros),
        OracleDelay::StudentMultiple { factor } => forward.mul_f64(factor),
    };
    Ok((
        forward,
        TimedOracle {
            oracle: cfg.oracle(stream),
            delay,
        },
    ))
}

/// Runs `stream` through the configured mode. `Mode::Parallel` is
/// dispatched to [`run_parallel`]; every other mode runs on this thread.
pub fn run(stream: &Stream, cfg: &PipelineConfig, student: &Student) -> Result<RunOutcome> {
    match cfg.mode {
        Mode::Parallel => run_parallel(stream, cfg, student),
        _ => run_sequential(stream, cfg, student),
    }
}

/// Single-threaded run: key frames are distilled inline, so their latency
/// includes oracle and training time.
pub fn run_sequential(stream: &Stream, cfg: &PipelineConfig, student: &Student) -> Result<RunOutcome> {
    let (forward, oracle) = setup(stream, cfg, student)?;
    let student = student.clone();
    let adaptive = matches!(cfg.mode, Mode::Sequential | Mode::Parallel);
    let mut selector = if adaptive {
        Some(FrameSelector::new(cfg, 2 * stream.header.d)?)
    } else {
        None
    };
    let mut mix_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3117_ED00);
    let mut st = RunState::new(student.tkd().version, stream.len());
    let started = Instant::now();

    for rec in &stream.frames {
        let t0 = Instant::now();
        let to_oracle = match cfg.mode {
            Mode::OracleOnly => true,
            Mode::Mixed { p_oracle } => mix_rng.random_bool(p_oracle),
            _ => false,
        };
        let (decision, version, detections) = if to_oracle {
            let t = oracle.run(rec);
            let dets = nms(&decode_tensor(&t, cfg.conf_threshold), cfg.nms_iou);
            (
                Decision::negative(rec.frame_id, 0.0, false),
                student.tkd().version,
                dets,
            )
        } else {
            let inf = student.infer(&rec.frame, cfg.conf_threshold, cfg.nms_iou)?;
            let decision = match selector.as_mut() {
                Some(sel) => sel.decide(&rec.frame, &inf.summary)?,
                None => Decision::negative(rec.frame_id, 0.0, false),
            };
            if decision.train {
                let target = oracle.run(rec);
                let params = student.tkd.snapshot();
                match distill_step(&params, &inf.features, &target, &cfg.distill) {
                    Ok((next, mut fb)) => {
                        fb.decision_source = decision.source();
                        st.committed.push(student.tkd.commit(next)?);
                        if let Some(sel) = selector.as_mut() {
                            sel.feedback(&fb, &inf.summary)?;
                        }
                        st.loss_trace.push(fb);
                    }
                    Err(Error::NonFinite(what)) => {
                        st.abort = Some(format!("frame {}: non-finite {what}", rec.frame_id));
                    }
                    Err(e) => return Err(e),
                }
            }
            (decision, inf.tkd_version, inf.detections)
        };
        st.logs.push(FrameLog {
            frame_id: rec.frame_id,
            scene_id: rec.scene_id,
            decision,
            latency_us: t0.elapsed().as_secs_f64() * 1e6,
            params_version: version,
            answered_by_oracle: to_oracle,
            detections,
        });
        if st.abort.is_some() {
            break;
        }
    }

    let report = finish(cfg, st, started, forward, oracle.delay, 0, 0);
    Ok(RunOutcome {
        report,
        decoder: (*student.tkd()).clone(),
        selector: selector.and_then(FrameSelector::into_state),
    })
}

struct Job<'a> {
    /// Backbone features of the key frame, copied at selection time.
    features: FeatureFrame,
    record: &'a FrameRecord,
    source: crate::distill::DecisionSource,
}

struct QueueInner<'a> {
    jobs: VecDeque<Job<'a>>,
    closed: bool,
}

/// Bounded drop-oldest queue feeding the distillation worker.
struct KeyQueue<'a> {
    inner: Mutex<QueueInner<'a>>,
    ready: Condvar,
    capacity: usize,
}

impl<'a> KeyQueue<'a> {
    fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(QueueInner {
                jobs: VecDeque::with_capacity(capacity),
                closed: false,
            }),
            ready: Condvar::new(),
            capacity,
        }
    }

    /// Enqueues without blocking; returns the evicted job, if any.
    fn push(&self, job: Job<'a>) -> Option<Job<'a>> {
        let mut q = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let evicted = if q.jobs.len() >= self.capacity {
            q.jobs.pop_front()
        } else {
            None
        };
        q.jobs.push_back(job);
        drop(q);
        self.ready.notify_one();
        evicted
    }

    fn pop(&self) -> Option<Job<'a>> {
        let mut q = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if q.closed {
                return None;
            }
            if let Some(job) = q.jobs.pop_front() {
                return Some(job);
            }
            q = self.ready.wait(q).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Stops the worker and returns the frame ids left unprocessed.
    fn close(&self) -> Vec<u64> {
        let mut q = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        q.closed = true;
        let left = q.jobs.drain(..).map(|j| j.record.frame_id).collect();
        drop(q);
        self.ready.notify_all();
        left
    }
}

#[cfg(target_os = "linux")]
fn lower_thread_priority() {
    // SAFETY: both calls only change the scheduling attributes of the
    // calling thread and take plain values.
    unsafe {
        let param = libc::sched_param { sched_priority: 0 };
        if libc::sched_setscheduler(0, libc::SCHED_IDLE, &param) != 0 {
            libc::setpriority(libc::PRIO_PROCESS, 0, 19);
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn lower_thread_priority() {}

fn worker_loop(
    queue: &KeyQueue<'_>,
    store: &ParamStore,
    oracle: &TimedOracle,
    distill: &DistillConfig,
    tx: mpsc::Sender<std::result::Result<FeedbackRecord, String>>,
    background: bool,
) {
    if background {
        lower_thread_priority();
    }
    while let Some(job) = queue.pop() {
        let target = oracle.run(job.record);
        let params = store.snapshot();
        let msg = distill_step(&params, &job.features, &target, distill)
            .and_then(|(next, mut fb)| {
                fb.decision_source = job.source;
                store.commit(next)?;
                Ok(fb)
            })
            .map_err(|e| format!("distillation worker failed on frame {}: {e}", job.record.frame_id));
        let failed = msg.is_err();
        if tx.send(msg).is_err() || failed {
            return;
        }
    }
}

/// Two-thread run: inference on the calling thread, oracle and distillation
/// on a worker. Inference never waits for the worker; it reads the latest
/// committed decoder at each frame and applies feedback at frame
/// boundaries.
pub fn run_parallel(stream: &Stream, cfg: &PipelineConfig, student: &Student) -> Result<RunOutcome> {
    let (forward, oracle) = setup(stream, cfg, student)?;
    let student = student.clone();
    let mut selector = FrameSelector::new(cfg, 2 * stream.header.d)?;
    let mut st = RunState::new(student.tkd().version, stream.len());
    let mut summaries: HashMap<u64, FeatureSummary> = HashMap::new();
    let mut dropped = 0usize;
    let queue = KeyQueue::new(cfg.queue_capacity);
    let (tx, rx) = mpsc::channel();
    let started = Instant::now();

    let apply = |msg: std::result::Result<FeedbackRecord, String>,
                 st: &mut RunState,
                 selector: &mut FrameSelector,
                 summaries: &mut HashMap<u64, FeatureSummary>|
     -> Result<()> {
        match msg {
            Ok(fb) => {
                if let Some(summary) = summaries.remove(&fb.frame_id) {
                    selector.feedback(&fb, &summary)?;
                }
                st.committed.push(fb.version);
                st.loss_trace.push(fb);
            }
            Err(e) => {
                st.abort.get_or_insert(e);
            }
        }
        Ok(())
    };

    let unprocessed = thread::scope(|scope| -> Result<usize> {
        let worker = {
            let (queue, store, oracle, distill) = (&queue, &student.tkd, &oracle, &cfg.distill);
            let background = cfg.background_worker;
            thread::Builder::new()
                .name("tkd-distill".into())
                .spawn_scoped(scope, move || {
                    worker_loop(queue, store, oracle, distill, tx, background)
                })?
        };

        for rec in &stream.frames {
            let t0 = Instant::now();
            while let Ok(msg) = rx.try_recv() {
                apply(msg, &mut st, &mut selector, &mut summaries)?;
            }
            if st.abort.is_some() {
                break;
            }
            let inf = student.infer(&rec.frame, cfg.conf_threshold, cfg.nms_iou)?;
            let decision = selector.decide(&rec.frame, &inf.summary)?;
            if decision.train {
                summaries.insert(rec.frame_id, inf.summary.clone());
                let job = Job {
                    features: inf.features.clone(),
                    record: rec,
                    source: decision.source(),
                };
                if let Some(old) = queue.push(job) {
                    dropped += 1;
                    summaries.remove(&old.record.frame_id);
                    selector.cancel(old.record.frame_id);
                }
            }
            st.logs.push(FrameLog {
                frame_id: rec.frame_id,
                scene_id: rec.scene_id,
                decision,
                latency_us: t0.elapsed().as_secs_f64() * 1e6,
                params_version: inf.tkd_version,
                answered_by_oracle: false,
                detections: inf.detections,
            });
        }

        let left = queue.close();
        for id in &left {
            summaries.remove(id);
            selector.cancel(*id);
        }
        if worker.join().is_err() {
            st.abort.get_or_insert_with(|| "distillation worker panicked".into());
        }
        while let Ok(msg) = rx.try_recv() {
            apply(msg, &mut st, &mut selector, &mut summaries)?;
        }
        Ok(left.len())
    })?;

    if let Some(reason) = &st.abort {
        if st.logs.is_empty() {
            return Err(Error::Worker(reason.clone()));
        }
    }
    let report = finish(cfg, st, started, forward, oracle.delay, dropped, unprocessed);
    Ok(RunOutcome {
        report,
        decoder: (*student.tkd()).clone(),
        selector: selector.into_state(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    decoder: DecoderParams,
    selector: SelectorState,
}

pub fn checkpoint_save(path: impl AsRef<Path>, decoder: &DecoderParams, selector: &SelectorState) -> Result<()> {
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION,
        decoder: decoder.clone(),
        selector: selector.clone(),
    };
    fs::write(path.as_ref(), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<(DecoderParams, SelectorState)> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(format!("unreadable: {e}")))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing version field".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            what: "checkpoint",
            found: version.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(value).map_err(|e| bad(format!("malformed: {e}")))?;
    let d = &doc.decoder;
    let out = d.outputs();
    if d.w1.len() != d.hidden * d.d || d.b1.len() != d.hidden || d.w2.len() != out * d.hidden || d.b2.len() != out {
        return Err(bad("decoder weight arrays do not match declared sizes".into()));
    }
    if !d.is_finite() || !doc.selector.lstm.is_finite() {
        return Err(bad("non-finite weights".into()));
    }
    Ok((doc.decoder, doc.selector))
}
