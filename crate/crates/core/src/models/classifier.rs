use crate::grid::{DrumSegment, Genre, CLASSES};
use crate::layers::{Direction, GruStack, Linear};
use crate::numerics::{Checkpoint, ParamStore, Rng, Scalar, Tape, Var};

use super::{
    input_grid, prior::argmax, run_training, save, scalar_value, ConditionFlags, Example, LossRow, ModelConfig,
    ModelError, ModelKind, SavedConfig, StepContext, TrainConfig, TrainMonitor, Trainable,
};

/// Stacked BiGRU over `[N ; V ; M]`, mean-pooled over time, then a linear
/// map to genre logits.
#[derive(Clone, Debug)]
pub struct GenreClassifier {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    gru: GruStack,
    out: Linear,
}

impl GenreClassifier {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "init.genre_clf");
        let mut store = ParamStore::new();
        let gru = GruStack::new(
            &mut store,
            "clf.gru",
            3 * CLASSES,
            config.classifier_hidden,
            config.classifier_layers,
            Direction::Bi,
            &mut rng,
        )?;
        let out = Linear::new(&mut store, "clf.out", gru.out_dim(), Genre::COUNT, &mut rng)?;
        Ok(Self { config, store, gru, out })
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, segs: &[&DrumSegment]) -> Result<Var, ModelError> {
        let b = segs.len();
        let mut flat = Vec::with_capacity(b * 32 * 3 * CLASSES);
        for s in segs {
            for t in 0..32 {
                flat.extend(s.n[t].iter().map(|&x| x as f32));
                flat.extend(s.v[t]);
                flat.extend(s.m[t]);
            }
        }
        let x = input_grid(tape, &flat, b, 3 * CLASSES)?;
        let out = self.gru.forward(tape, x, &[])?;
        let pooled = tape.sum_axis(out.outputs, 1)?;
        let pooled = tape.scale(pooled, 1.0 / 32.0)?;
        Ok(self.out.forward(tape, pooled)?)
    }

    /// Class probabilities per segment.
    pub fn predict_proba(&self, segs: &[DrumSegment]) -> Result<Vec<[f64; Genre::COUNT]>, ModelError> {
        let mut out = Vec::with_capacity(segs.len());
        for chunk in segs.chunks(128) {
            let refs: Vec<&DrumSegment> = chunk.iter().collect();
            let mut tape = Tape::new(&self.store);
            let logits = self.logits(&mut tape, &refs)?;
            let probs = tape.softmax(logits)?;
            for row in tape.value(probs).data().chunks(Genre::COUNT) {
                let mut p = [0.0; Genre::COUNT];
                for (d, &s) in p.iter_mut().zip(row) {
                    *d = s as f64;
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    pub fn classify(&self, segs: &[DrumSegment]) -> Result<Vec<Genre>, ModelError> {
        Ok(self
            .predict_proba(segs)?
            .iter()
            .map(|p| Genre::from_index(argmax(p)).expect("argmax is a valid genre index"))
            .collect())
    }

    pub fn train(
        &mut self,
        examples: &[Example],
        cfg: &TrainConfig,
        monitor: &mut dyn TrainMonitor<Self>,
    ) -> Result<Vec<LossRow>, ModelError> {
        run_training(self, examples, cfg, monitor)
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Result<Checkpoint, ModelError> {
        save(
            &self.store,
            SavedConfig {
                kind: ModelKind::GenreClf,
                model: self.config.clone(),
                flags: ConditionFlags::default(),
                train: train.cloned(),
            },
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg = SavedConfig::expect(ckpt, ModelKind::GenreClf)?;
        let mut model = Self::new(cfg.model, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

impl Trainable for GenreClassifier {
    type Item = Example;

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape<'_, f32>, items: &[&Example], _ctx: &mut StepContext) -> Result<(Var, LossRow), ModelError> {
        let segs: Vec<&DrumSegment> = items.iter().map(|e| &e.seg).collect();
        let targets = items
            .iter()
            .map(|e| e.seg.genre.map(Genre::index).ok_or_else(|| ModelError::MissingGenre(e.seg.source_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let logits = self.logits(tape, &segs)?;
        let loss = tape.cross_entropy(logits, &targets)?;
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
