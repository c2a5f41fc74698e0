//! The two-step PocketVAE, the one-step VAE baseline, the genre-conditioned
//! code prior and the genre classifier, with their losses, schedules and
//! training loops.

mod classifier;
mod onestep;
mod pocketvae;
mod prior;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{derive_template, ControlPatterns, Template, MICROTIMING_CLASSES, VELOCITY_CLASSES};
use crate::grid::{DrumSegment, Genre, CLASSES, STEPS};
use crate::layers::{Direction, GruLayer, Linear};
use crate::numerics::{Adam, AdamConfig, Checkpoint, CheckpointError, NumericsError, ParamStore, Rng, Scalar, Tape, Tensor, Var};

pub use classifier::GenreClassifier;
pub use onestep::OneStepModel;
pub use pocketvae::{GrooveLatents, PocketLosses, PocketVae};
pub use prior::{CodeSequence, Prior};

/// Width of the template / note-score embedding produced by the skeleton encoder.
pub const SKEL_DIM: usize = 16;
/// Cells in one 32×7 matrix.
pub const CELLS: usize = STEPS * CLASSES;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("segment {0} has no genre label but the model is genre-conditioned")]
    MissingGenre(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("checkpoint has no configuration blob")]
    MissingConfig,
    #[error("checkpoint configuration: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Pocketvae,
    Onestep,
    Prior,
    GenreClf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pocketvae => "pocketvae",
            ModelKind::Onestep => "onestep",
            ModelKind::Prior => "prior",
            ModelKind::GenreClf => "genre-clf",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [ModelKind::Pocketvae, ModelKind::Onestep, ModelKind::Prior, ModelKind::GenreClf]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

/// Layer widths. `full()` is the full-size architecture; `desk()` is the
/// reduced one used for single-core runs and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub skel_hidden: usize,
    pub note_hidden: usize,
    pub conv_channels: [usize; 2],
    pub code_dim: usize,
    pub codebook_size: usize,
    pub groove_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub prior_hidden: usize,
    pub prior_layers: usize,
    pub prior_embed: usize,
    pub classifier_hidden: usize,
    pub classifier_layers: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            skel_hidden: 128,
            note_hidden: 256,
            conv_channels: [128, 64],
            code_dim: 16,
            codebook_size: 64,
            groove_hidden: 256,
            latent_dim: 64,
            decoder_hidden: 256,
            decoder_layers: 2,
            prior_hidden: 128,
            prior_layers: 2,
            prior_embed: 16,
            classifier_hidden: 128,
            classifier_layers: 2,
        }
    }

    pub fn desk() -> Self {
        Self {
            skel_hidden: 32,
            note_hidden: 48,
            conv_channels: [48, 32],
            code_dim: 16,
            codebook_size: 64,
            groove_hidden: 48,
            latent_dim: 32,
            decoder_hidden: 64,
            decoder_layers: 2,
            prior_hidden: 64,
            prior_layers: 2,
            prior_embed: 16,
            classifier_hidden: 32,
            classifier_layers: 2,
        }
    }

    /// Miniature widths for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            skel_hidden: 8,
            note_hidden: 8,
            conv_channels: [8, 8],
            code_dim: 4,
            codebook_size: 4,
            groove_hidden: 8,
            latent_dim: 4,
            decoder_hidden: 8,
            decoder_layers: 2,
            prior_hidden: 8,
            prior_layers: 2,
            prior_embed: 4,
            classifier_hidden: 8,
            classifier_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            self.skel_hidden,
            self.note_hidden,
            self.conv_channels[0],
            self.conv_channels[1],
            self.code_dim,
            self.codebook_size,
            self.groove_hidden,
            self.latent_dim,
            self.decoder_hidden,
            self.decoder_layers,
            self.prior_hidden,
            self.prior_layers,
            self.prior_embed,
            self.classifier_hidden,
            self.classifier_layers,
        ];
        if sizes.contains(&0) {
            return Err(ModelError::Config("every layer width must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Which optional controls the VEL/TIME modules see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub use_genre: bool,
    pub use_patterns: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta_target: f64,
    pub beta1_cb: f64,
    pub beta2_cmt: f64,
    pub tf_start: f64,
    pub tf_end: f64,
    /// Invoke the checkpoint hook every this many steps; 0 means only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            beta_target: 0.2,
            beta1_cb: 0.2,
            beta2_cmt: 0.2,
            tf_start: 1.0,
            tf_end: 0.5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return err("steps and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        for (name, x) in [
            ("beta_target", self.beta_target),
            ("beta1_cb", self.beta1_cb),
            ("beta2_cmt", self.beta2_cmt),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return err(&format!("{name} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.tf_start) || !(0.0..=1.0).contains(&self.tf_end) || self.tf_end > self.tf_start {
            return err("teacher forcing must satisfy 0 <= tf_end <= tf_start <= 1");
        }
        Ok(())
    }

    fn tau(&self) -> f64 {
        (self.steps as f64 / 4.0).max(1.0)
    }

    /// Teacher-forcing ratio at `step`, decaying from `tf_start` toward `tf_end`.
    pub fn tf(&self, step: usize) -> f64 {
        self.tf_end + (self.tf_start - self.tf_end) * (-(step as f64) / self.tau()).exp()
    }

    /// KL weight at `step`, rising from 0 toward `beta_target`.
    pub fn beta(&self, step: usize) -> f64 {
        self.beta_target * (1.0 - (-(step as f64) / self.tau()).exp())
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        })
    }
}

/// Per-step loss values as written to the TSV log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_recon: f64,
    pub l_cb: f64,
    pub l_cmt: f64,
    pub l_vel: f64,
    pub l_time: f64,
    pub total: f64,
    pub tf: f64,
    pub beta: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\tL_recon\tL_cb\tL_cmt\tL_vel\tL_time\ttotal\ttf\tbeta";

impl LossRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.6}\t{:.6}",
            self.step, self.l_recon, self.l_cb, self.l_cmt, self.l_vel, self.l_time, self.total, self.tf, self.beta
        )
    }
}

/// A training segment with its derived template and control patterns.
#[derive(Clone, Debug)]
pub struct Example {
    pub seg: DrumSegment,
    pub template: Template,
    pub patterns: ControlPatterns,
}

impl Example {
    pub fn new(seg: DrumSegment) -> Self {
        Self {
            template: derive_template(&seg),
            patterns: ControlPatterns::from_segment(&seg),
            seg,
        }
    }

    pub fn from_segments(segs: impl IntoIterator<Item = DrumSegment>) -> Vec<Self> {
        segs.into_iter().map(Self::new).collect()
    }
}

/// Optional controls for transfer and generation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditions {
    pub genre: Option<Genre>,
    pub patterns: Option<ControlPatterns>,
}

/// Row-major host-side batch: `[B, 32, 7]` matrices, `[B, 32, 5]` and
/// `[B, 32, 3]` pattern one-hots and `[B, 6]` genre one-hots.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub n: Vec<f32>,
    pub v: Vec<f32>,
    pub m: Vec<f32>,
    pub p: Vec<f32>,
    pub cv: Vec<f32>,
    pub cm: Vec<f32>,
    pub genre: Vec<f32>,
    pub genre_idx: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let mut b = Batch {
            size: examples.len(),
            n: Vec::new(),
            v: Vec::new(),
            m: Vec::new(),
            p: Vec::new(),
            cv: Vec::new(),
            cm: Vec::new(),
            genre: Vec::new(),
            genre_idx: Vec::new(),
        };
        for ex in examples {
            b.n.extend(ex.seg.flat_n());
            b.v.extend(ex.seg.flat_v());
            b.m.extend(ex.seg.flat_m());
            b.p.extend(ex.template.flat());
            b.cv.extend(ex.patterns.velocity.one_hot());
            b.cm.extend(ex.patterns.microtiming.one_hot());
            match ex.seg.genre {
                Some(g) => b.genre.extend(g.one_hot()),
                None => b.genre.extend([0.0; Genre::COUNT]),
            }
            b.genre_idx.push(ex.seg.genre.map(Genre::index));
        }
        b
    }

    pub(crate) fn require_genres(&self, examples: &[&Example]) -> Result<Vec<usize>, ModelError> {
        self.genre_idx
            .iter()
            .zip(examples)
            .map(|(g, ex)| g.ok_or_else(|| ModelError::MissingGenre(ex.seg.source_id.clone())))
            .collect()
    }
}

pub(crate) fn grid_tensor<T: Scalar>(data: &[f32], batch: usize, width: usize) -> Result<Tensor<T>, NumericsError> {
    Tensor::from_f32(&[batch, STEPS, width], data)
}

pub(crate) fn input_grid<T: Scalar>(tape: &mut Tape<'_, T>, data: &[f32], batch: usize, width: usize) -> Result<Var, NumericsError> {
    let t = grid_tensor(data, batch, width)?;
    tape.input(t)
}

/// Deterministic epoch-wise shuffled batches.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: Rng::stream(seed, "train.batches"),
        };
        s.reshuffle_if_needed();
        s
    }

    fn reshuffle_if_needed(&mut self) {
        if self.pos >= self.order.len() {
            self.order.sort_unstable();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
    }

    pub(crate) fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_needed();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Random draws and schedule values for one loss evaluation.
pub struct StepContext {
    pub tf: f64,
    pub beta: f64,
    pub beta1_cb: f64,
    pub beta2_cmt: f64,
    pub rng: Rng,
}

impl StepContext {
    pub fn for_step(cfg: &TrainConfig, step: usize) -> Self {
        Self {
            tf: cfg.tf(step),
            beta: cfg.beta(step),
            beta1_cb: cfg.beta1_cb,
            beta2_cmt: cfg.beta2_cmt,
            rng: Rng::stream(cfg.seed, &format!("train.step.{step}")),
        }
    }
}

/// Callbacks during training.
pub trait TrainMonitor<M> {
    fn on_step(&mut self, _row: &LossRow) {}

    fn on_checkpoint(&mut self, _model: &M, _step: usize) -> Result<(), ModelError> {
        Ok(())
    }
}

impl<M> TrainMonitor<M> for () {}

/// Collects the loss rows as TSV lines.
#[derive(Default)]
pub struct LossLog {
    pub lines: Vec<String>,
}

impl LossLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(LOSS_LOG_HEADER);
        s.push('\n');
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

impl<M> TrainMonitor<M> for LossLog {
    fn on_step(&mut self, row: &LossRow) {
        self.lines.push(row.to_tsv());
    }
}

pub(crate) trait Trainable: Sized {
    type Item;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    /// Loss of one batch on an `f32` tape, with the logged components.
    fn batch_loss(&self, tape: &mut Tape<'_, f32>, items: &[&Self::Item], ctx: &mut StepContext) -> Result<(Var, LossRow), ModelError>;
}

pub(crate) fn run_training<M: Trainable>(
    model: &mut M,
    examples: &[M::Item],
    cfg: &TrainConfig,
    monitor: &mut dyn TrainMonitor<M>,
) -> Result<Vec<LossRow>, ModelError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut sampler = BatchSampler::new(examples.len(), cfg.seed);
    let mut adam = cfg.adam();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<&M::Item> = sampler.next(cfg.batch_size).into_iter().map(|i| &examples[i]).collect();
        let mut ctx = StepContext::for_step(cfg, step);
        let (grads, mut row) = {
            let mut tape = Tape::new(model.store());
            let (loss, row) = model.batch_loss(&mut tape, &picked, &mut ctx)?;
            (tape.backward(loss)?, row)
        };
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(store);
        row.step = step;
        row.tf = ctx.tf;
        row.beta = ctx.beta;
        monitor.on_step(&row);
        rows.push(row);
        let done = step + 1;
        if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            monitor.on_checkpoint(model, done)?;
        }
    }
    Ok(rows)
}

/// Configuration blob stored inside every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub flags: ConditionFlags,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl SavedConfig {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let text = ckpt.config.as_deref().ok_or(ModelError::MissingConfig)?;
        Ok(serde_json::from_str(text)?)
    }

    pub(crate) fn expect(ckpt: &Checkpoint, kind: ModelKind) -> Result<Self, ModelError> {
        let cfg = Self::from_checkpoint(ckpt)?;
        if cfg.kind != kind {
            return Err(ModelError::WrongKind {
                expected: kind,
                found: cfg.kind,
            });
        }
        Ok(cfg)
    }
}

pub(crate) fn save(store: &ParamStore<f32>, config: SavedConfig) -> Result<Checkpoint, ModelError> {
    let json = serde_json::to_string(&config)?;
    Ok(Checkpoint::from_store(store, Some(json)))
}

/// Shared bidirectional encoder: BiGRU final states, concatenated, then a
/// linear map to `SKEL_DIM`. Encodes templates (`h_p`) and note scores (`h_n`).
#[derive(Clone, Debug)]
pub(crate) struct SkelEncoder {
    gru: GruLayer,
    out: Linear,
}

impl SkelEncoder {
    pub(crate) fn new(store: &mut ParamStore<f32>, name: &str, hidden: usize, rng: &mut Rng) -> Result<Self, NumericsError> {
        let gru = GruLayer::new(store, &format!("{name}.gru"), CLASSES, hidden, Direction::Bi, rng)?;
        let out = Linear::new(store, &format!("{name}.out"), 2 * hidden, SKEL_DIM, rng)?;
        Ok(Self { gru, out })
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let out = self.gru.forward(tape, x, &[])?;
        let h = tape.concat(&out.finals, 1)?;
        self.out.forward(tape, h)
    }
}

/// Closed-form `KL(N(mean, exp(logvar)) || N(0, I))`, averaged over latent
/// dimensions and the batch.
pub(crate) fn kl_standard_normal<T: Scalar>(tape: &mut Tape<'_, T>, mean: Var, logvar: Var) -> Result<Var, NumericsError> {
    let mu2 = tape.square(mean)?;
    let var = tape.exp(logvar)?;
    let a = tape.sub(logvar, mu2)?;
    let a = tape.sub(a, var)?;
    let a = tape.affine(a, -0.5, -0.5)?;
    tape.mean(a)
}

/// `mean + exp(logvar / 2) * eps` with `eps` drawn from `rng`.
pub(crate) fn reparameterize<T: Scalar>(tape: &mut Tape<'_, T>, mean: Var, logvar: Var, rng: &mut Rng) -> Result<Var, NumericsError> {
    let shape = tape.shape(mean).to_vec();
    let eps = Tensor::from_fn(&shape, |_| T::from_f64(rng.normal()));
    let eps = tape.input(eps)?;
    let std = tape.affine(logvar, 0.5, 0.0)?;
    let std = tape.exp(std)?;
    let noise = tape.mul(std, eps)?;
    tape.add(mean, noise)
}

pub(crate) fn mse<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var, NumericsError> {
    let d = tape.sub(pred, target)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// Previous-step decoder input under teacher forcing: per batch row, the
/// ground truth with probability `tf`, else the model's own prediction.
pub(crate) fn teacher_mix<T: Scalar>(
    tape: &mut Tape<'_, T>,
    truth: Var,
    pred: Var,
    tf: f64,
    rng: &mut Rng,
) -> Result<Var, NumericsError> {
    let shape = tape.shape(truth).to_vec();
    let (batch, width) = (shape[0], shape[1]);
    let coins: Vec<bool> = (0..batch).map(|_| rng.bernoulli(tf)).collect();
    if coins.iter().all(|&c| c) {
        return Ok(truth);
    }
    if coins.iter().all(|&c| !c) {
        return Ok(pred);
    }
    let mask = Tensor::from_fn(&shape, |k| if coins[k / width] { T::one() } else { T::zero() });
    let mask = tape.input(mask)?;
    let diff = tape.sub(truth, pred)?;
    let diff = tape.mul(diff, mask)?;
    tape.add(pred, diff)
}

/// Column counts of the optional pattern inputs.
pub(crate) const PATTERN_WIDTH_V: usize = VELOCITY_CLASSES;
pub(crate) const PATTERN_WIDTH_M: usize = MICROTIMING_CLASSES;

pub(crate) fn scalar_value<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}
