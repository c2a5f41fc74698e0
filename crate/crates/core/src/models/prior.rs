use crate::grid::Genre;
use crate::layers::{Direction, GruStack, HiddenInit, Linear, CODE_LEN};
use crate::numerics::{Checkpoint, NumericsError, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

use super::{
    run_training, save, scalar_value, ConditionFlags, Conditions, Example, LossRow, ModelConfig, ModelError, ModelKind,
    PocketVae, SavedConfig, StepContext, TrainConfig, TrainMonitor, Trainable,
};

/// One training sequence for the prior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
    pub genre: Genre,
}

/// Autoregressive genre-conditioned model over code sequences. Position 0
/// reads a dedicated start token, so the embedding table has one row more
/// than the codebook.
#[derive(Clone, Debug)]
pub struct Prior {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    embed: ParamId,
    init: HiddenInit,
    gru: GruStack,
    out: Linear,
}

impl Prior {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "init.prior");
        let mut store = ParamStore::new();
        let k = config.codebook_size;
        let embed = store.add_uniform("prior.embed", &[k + 1, config.prior_embed], config.prior_embed, &mut rng)?;
        let gru = GruStack::new(
            &mut store,
            "prior.gru",
            config.prior_embed,
            config.prior_hidden,
            config.prior_layers,
            Direction::Forward,
            &mut rng,
        )?;
        let init = HiddenInit::new(&mut store, "prior.init", Genre::COUNT, gru.num_states(), config.prior_hidden, &mut rng)?;
        let out = Linear::new(&mut store, "prior.out", config.prior_hidden, k, &mut rng)?;
        Ok(Self {
            config,
            store,
            embed,
            init,
            gru,
            out,
        })
    }

    pub fn start_token(&self) -> usize {
        self.config.codebook_size
    }

    fn genre_input<T: Scalar>(tape: &mut Tape<'_, T>, genres: &[Genre]) -> Result<Var, NumericsError> {
        let flat: Vec<f32> = genres.iter().flat_map(|g| g.one_hot()).collect();
        tape.input(Tensor::from_f32(&[genres.len(), Genre::COUNT], &flat)?)
    }

    /// Teacher-forced logits `[B·8, K]` for the given sequences.
    fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, seqs: &[&CodeSequence]) -> Result<Var, ModelError> {
        let b = seqs.len();
        let k = self.config.codebook_size;
        let mut inputs = Vec::with_capacity(b * CODE_LEN);
        for s in seqs {
            if s.codes.len() != CODE_LEN || s.codes.iter().any(|&c| c >= k) {
                return Err(ModelError::Config(format!("invalid code sequence {:?}", s.codes)));
            }
            inputs.push(self.start_token());
            inputs.extend(&s.codes[..CODE_LEN - 1]);
        }
        let table = tape.param(self.embed);
        let x = tape.embedding(table, &inputs)?;
        let x = tape.reshape(x, &[b, CODE_LEN, self.config.prior_embed])?;
        let genres: Vec<Genre> = seqs.iter().map(|s| s.genre).collect();
        let g = Self::genre_input(tape, &genres)?;
        let h0 = self.init.forward(tape, g)?;
        let out = self.gru.forward(tape, x, &h0)?;
        let logits = self.out.forward(tape, out.outputs)?;
        Ok(tape.reshape(logits, &[b * CODE_LEN, k])?)
    }

    /// Mean per-position cross-entropy.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, seqs: &[&CodeSequence]) -> Result<Var, ModelError> {
        let logits = self.logits(tape, seqs)?;
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s.codes.iter().copied()).collect();
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    /// Per-position next-code distributions given the full sequence
    /// (teacher-forced), each of length `K`.
    pub fn distributions(&self, seq: &CodeSequence) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new(&self.store);
        let logits = self.logits(&mut tape, &[seq])?;
        let probs = tape.softmax(logits)?;
        Ok(tape
            .value(probs)
            .data()
            .chunks(self.config.codebook_size)
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect())
    }

    /// Sample a code sequence. Temperatures at or below 1e-6 decode greedily.
    pub fn sample(&self, genre: Genre, temperature: f64, seed: u64) -> Result<Vec<usize>, ModelError> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be non-negative, got {temperature}")));
        }
        let mut rng = Rng::stream(seed, "prior.sample");
        let mut tape = Tape::new(&self.store);
        let g = Self::genre_input(&mut tape, &[genre])?;
        let mut h = self.init.forward(&mut tape, g)?;
        let table = tape.param(self.embed);
        let mut prev = self.start_token();
        let mut codes = Vec::with_capacity(CODE_LEN);
        for _ in 0..CODE_LEN {
            let x = tape.embedding(table, &[prev])?;
            let y = self.gru.step(&mut tape, x, &mut h)?;
            let logits = self.out.forward(&mut tape, y)?;
            let logits: Vec<f64> = tape.value(logits).data().iter().map(|&x| x as f64).collect();
            let c = if temperature <= 1e-6 {
                argmax(&logits)
            } else {
                categorical(&logits, temperature, &mut rng)
            };
            codes.push(c);
            prev = c;
        }
        Ok(codes)
    }

    pub fn train(
        &mut self,
        seqs: &[CodeSequence],
        cfg: &TrainConfig,
        monitor: &mut dyn TrainMonitor<Self>,
    ) -> Result<Vec<LossRow>, ModelError> {
        run_training(self, seqs, cfg, monitor)
    }

    /// Encode every training segment with `vae` into a code sequence labelled
    /// with its genre.
    pub fn code_dataset(vae: &PocketVae, examples: &[Example]) -> Result<Vec<CodeSequence>, ModelError> {
        let none = Conditions::default();
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(64) {
            let items: Vec<_> = chunk.iter().map(|e| (&e.seg, &none)).collect();
            let lat = vae.encode_latents(&items)?;
            for (e, l) in chunk.iter().zip(lat) {
                let genre = e.seg.genre.ok_or_else(|| ModelError::MissingGenre(e.seg.source_id.clone()))?;
                out.push(CodeSequence { codes: l.codes, genre });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Result<Checkpoint, ModelError> {
        save(
            &self.store,
            SavedConfig {
                kind: ModelKind::Prior,
                model: self.config.clone(),
                flags: ConditionFlags::default(),
                train: train.cloned(),
            },
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg = SavedConfig::expect(ckpt, ModelKind::Prior)?;
        let mut model = Self::new(cfg.model, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn categorical(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

impl Trainable for Prior {
    type Item = CodeSequence;

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape<'_, f32>, items: &[&CodeSequence], _ctx: &mut StepContext) -> Result<(Var, LossRow), ModelError> {
        let loss = self.loss(tape, items)?;
        let v = scalar_value(tape, loss);
        Ok((
            loss,
            LossRow {
                l_recon: v,
                total: v,
                ..LossRow::default()
            },
        ))
    }
}
