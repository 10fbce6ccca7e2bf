//! Key-frame selection.
//!
//! [`SelectorState`] combines an LSTM vote with a random safeguard drawn with
//! probability `p_t`, subject to a training-prevention window of `tau` frames
//! after every positive decision. Feedback from each distillation event trains
//! the LSTM one step toward label 1 when the loss change is below `sigma`
//! (helpful) and label 0 otherwise.
//!
//! `p_t` tracks how well the LSTM is doing: under
//! [`ProbabilityRule::Correctness`] it drops by 0.05 when the LSTM vote
//! matched the outcome and doubles when it did not. For events the LSTM voted
//! for this is the same as "helpful: -0.05, unhelpful: x2";
//! [`ProbabilityRule::Helpfulness`] applies that form to every event.
//!
//! The baselines ([`RandomSelector`], [`SceneChangeSelector`],
//! [`PeriodicSelector`]) apply the same `tau` window.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{DecisionSource, FeedbackRecord};
use crate::error::{Error, Result};
use crate::models::lstm::train_from;
use crate::models::{lstm_forward, FeatureFrame, FeatureSummary, LstmParams, LstmState};

/// Amount `p_t` drops after a helpful event.
pub const P_STEP: f64 = 0.05;

/// How feedback moves the random-trigger probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityRule {
    /// Decrease when the LSTM vote agreed with the observed helpfulness.
    #[default]
    Correctness,
    /// Decrease when the event was helpful, regardless of the LSTM vote.
    Helpfulness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub p_init: f64,
    pub p_min: f64,
    pub tau: u32,
    pub sigma: f64,
    pub lstm_hidden: usize,
    pub lstm_lr: f64,
    /// Standard deviation of the initial LSTM weights.
    pub lstm_init_scale: f64,
    pub p_rule: ProbabilityRule,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            p_init: 1.0,
            p_min: 0.05,
            tau: 2,
            sigma: -0.1,
            lstm_hidden: 8,
            lstm_lr: 0.05,
            lstm_init_scale: 0.1,
            p_rule: ProbabilityRule::Correctness,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(Error::config("selector.p_min", "must lie in (0, 1]"));
        }
        if !(self.p_min..=1.0).contains(&self.p_init) {
            return Err(Error::config("selector.p_init", "must lie in [p_min, 1]"));
        }
        if !self.sigma.is_finite() {
            return Err(Error::config("selector.sigma", "must be finite"));
        }
        if self.lstm_hidden == 0 {
            return Err(Error::config("selector.lstm_hidden", "must be >= 1"));
        }
        if !(self.lstm_lr > 0.0) {
            return Err(Error::config("selector.lstm_lr", "must be > 0"));
        }
        Ok(())
    }
}

/// One per-frame selection outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub frame_id: u64,
    pub train: bool,
    pub lstm_vote: bool,
    pub random_vote: bool,
    /// Suppressed by the training-prevention window.
    pub suppressed: bool,
    /// Random-trigger probability in force when the decision was made.
    pub p_t: f64,
    pub score: Option<f64>,
}

impl Decision {
    /// A non-training decision.
    pub fn negative(frame_id: u64, p_t: f64, suppressed: bool) -> Self {
        Self {
            frame_id,
            train: false,
            lstm_vote: false,
            random_vote: false,
            suppressed,
            p_t,
            score: None,
        }
    }

    pub fn source(&self) -> DecisionSource {
        match (self.lstm_vote, self.random_vote) {
            (true, true) => DecisionSource::Both,
            (true, false) => DecisionSource::Lstm,
            (false, true) => DecisionSource::Random,
            (false, false) => DecisionSource::Schedule,
        }
    }
}

/// Counts frames since the last positive decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct PreventionWindow {
    tau: u32,
    since_train: u32,
}

impl PreventionWindow {
    fn new(tau: u32) -> Self {
        Self { tau, since_train: tau }
    }

    /// Advances one frame; true when the frame is inside the window.
    fn blocked(&mut self) -> bool {
        if self.since_train < self.tau {
            self.since_train += 1;
            true
        } else {
            false
        }
    }

    fn record(&mut self, train: bool) {
        if train {
            self.since_train = 0;
        } else {
            self.since_train = self.since_train.saturating_add(1);
        }
    }
}

/// State of the LSTM-gated selector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorState {
    pub p_t: f64,
    pub p_min: f64,
    pub sigma: f64,
    pub lstm_lr: f64,
    #[serde(default)]
    pub p_rule: ProbabilityRule,
    window: PreventionWindow,
    pub lstm: LstmParams,
    rng: ChaCha8Rng,
    /// LSTM state preceding each positive decision awaiting feedback, and
    /// the LSTM vote on that frame.
    pending: BTreeMap<u64, (LstmState, bool)>,
}

impl SelectorState {
    pub fn new(cfg: &SelectorConfig, summary_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = LstmParams::random(summary_len, cfg.lstm_hidden, cfg.lstm_init_scale, &mut rng);
        Ok(Self {
            p_t: cfg.p_init,
            p_min: cfg.p_min,
            sigma: cfg.sigma,
            lstm_lr: cfg.lstm_lr,
            p_rule: cfg.p_rule,
            window: PreventionWindow::new(cfg.tau),
            lstm,
            rng,
            pending: BTreeMap::new(),
        })
    }

    pub fn tau(&self) -> u32 {
        self.window.tau
    }

    pub fn frames_since_train(&self) -> u32 {
        self.window.since_train
    }

    /// Marks the last frame as trained, e.g. to start inside the window.
    pub fn set_frames_since_train(&mut self, n: u32) {
        self.window.since_train = n;
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Forgets a positive decision whose feedback will never arrive.
    pub fn cancel(&mut self, frame_id: u64) {
        self.pending.remove(&frame_id);
    }

    pub fn decide(&mut self, frame_id: u64, summary: &FeatureSummary) -> Result<Decision> {
        self.decide_with(frame_id, summary, None)
    }

    /// As [`decide`](Self::decide), optionally overriding the LSTM score.
    pub fn decide_with(
        &mut self,
        frame_id: u64,
        summary: &FeatureSummary,
        forced_score: Option<f64>,
    ) -> Result<Decision> {
        let prev = self.lstm.state.clone();
        let (score, next) = lstm_forward(&self.lstm, summary)?;
        // the LSTM observes every frame, including suppressed ones
        self.lstm.state = next;
        if self.window.blocked() {
            return Ok(Decision::negative(frame_id, self.p_t, true));
        }
        let score = forced_score.unwrap_or(score);
        let lstm_vote = score >= 0.5;
        let random_vote = self.rng.random_bool(self.p_t);
        let train = lstm_vote || random_vote;
        self.window.record(train);
        if train {
            self.pending.insert(frame_id, (prev, lstm_vote));
        }
        Ok(Decision {
            frame_id,
            train,
            lstm_vote,
            random_vote,
            suppressed: false,
            p_t: self.p_t,
            score: Some(score),
        })
    }

    /// Applies the outcome of a distillation event triggered by this
    /// selector. Returns whether the event counted as helpful.
    pub fn apply_feedback(&mut self, fb: &FeedbackRecord, summary_at_decision: &FeatureSummary) -> Result<bool> {
        let (from, lstm_vote) = self
            .pending
            .remove(&fb.frame_id)
            .ok_or(Error::UnexpectedFeedback(fb.frame_id))?;
        let helpful = fb.delta_l < self.sigma;
        let good = match self.p_rule {
            ProbabilityRule::Correctness => lstm_vote == helpful,
            ProbabilityRule::Helpfulness => helpful,
        };
        self.p_t = if good {
            (self.p_t - P_STEP).max(self.p_min)
        } else {
            (2.0 * self.p_t).min(1.0)
        };
        self.lstm = train_from(&self.lstm, &from, summary_at_decision, helpful, self.lstm_lr)?;
        Ok(helpful)
    }
}

/// I.i.d. Bernoulli selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomSelector {
    pub prob: f64,
    window: PreventionWindow,
    rng: ChaCha8Rng,
}

impl RandomSelector {
    pub fn new(prob: f64, tau: u32, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::config("selector.random", "probability must lie in [0, 1]"));
        }
        Ok(Self {
            prob,
            window: PreventionWindow::new(tau),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn decide(&mut self, frame_id: u64) -> Decision {
        if self.window.blocked() {
            return Decision::negative(frame_id, self.prob, true);
        }
        let random_vote = self.rng.random_bool(self.prob);
        self.window.record(random_vote);
        Decision {
            random_vote,
            train: random_vote,
            ..Decision::negative(frame_id, self.prob, false)
        }
    }
}

/// Decision stream of a [`RandomSelector`].
pub fn random_selector(prob: f64, tau: u32, seed: u64) -> Result<impl Iterator<Item = Decision>> {
    let mut sel = RandomSelector::new(prob, tau, seed)?;
    Ok((0u64..).map(move |id| sel.decide(id)))
}

/// True when the mean absolute difference between consecutive frames
/// exceeds `threshold`.
pub fn scene_change_selector(prev: &FeatureFrame, cur: &FeatureFrame, threshold: f64) -> Result<Decision> {
    let diff = prev.mean_abs_diff(cur)?;
    let train = diff > threshold;
    Ok(Decision {
        train,
        score: Some(diff),
        ..Decision::negative(cur.frame_id, 0.0, false)
    })
}

#[derive(Debug, Clone)]
pub struct SceneChangeSelector {
    pub threshold: f64,
    window: PreventionWindow,
    prev: Option<FeatureFrame>,
}

impl SceneChangeSelector {
    pub fn new(threshold: f64, tau: u32) -> Self {
        Self {
            threshold,
            window: PreventionWindow::new(tau),
            prev: None,
        }
    }

    pub fn decide(&mut self, frame: &FeatureFrame) -> Result<Decision> {
        let prev = self.prev.replace(frame.clone());
        if self.window.blocked() {
            return Ok(Decision::negative(frame.frame_id, 0.0, true));
        }
        let d = match prev {
            Some(p) => scene_change_selector(&p, frame, self.threshold)?,
            None => Decision::negative(frame.frame_id, 0.0, false),
        };
        self.window.record(d.train);
        Ok(d)
    }
}

/// Every `n`-th frame.
#[derive(Debug, Clone)]
pub struct PeriodicSelector {
    pub every: u64,
    window: PreventionWindow,
    seen: u64,
}

impl PeriodicSelector {
    pub fn new(every: u64, tau: u32) -> Result<Self> {
        if every == 0 {
            return Err(Error::config("selector.periodic", "period must be >= 1"));
        }
        Ok(Self {
            every,
            window: PreventionWindow::new(tau),
            seen: 0,
        })
    }

    pub fn decide(&mut self, frame_id: u64) -> Decision {
        let due = self.seen % self.every == 0;
        self.seen += 1;
        if self.window.blocked() {
            return Decision::negative(frame_id, 0.0, true);
        }
        self.window.record(due);
        Decision {
            train: due,
            ..Decision::negative(frame_id, 0.0, false)
        }
    }
}
