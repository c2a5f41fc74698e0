use crate::dataset::{derive_template, Template};
use crate::grid::{DrumSegment, CLASSES, STEPS};
use crate::layers::{Direction, GruLayer, GruStack, HiddenInit, Linear};
use crate::numerics::{Checkpoint, NumericsError, ParamStore, Rng, Scalar, Tape, Tensor, Var};

use super::{
    input_grid, kl_standard_normal, mse, reparameterize, run_training, save, scalar_value, teacher_mix, Batch,
    ConditionFlags, Example, LossRow, ModelConfig, ModelError, ModelKind, SavedConfig, SkelEncoder, StepContext,
    TrainConfig, TrainMonitor, Trainable, SKEL_DIM,
};

const CHANNELS: usize = 3 * CLASSES;

/// Baseline conditional VAE that emits notes, velocities and microtiming
/// together: BiGRU encoder over `[N ; V ; M ; P]`, autoregressive decoder
/// with 21 output channels per step. Both are initialized from the
/// template embedding.
#[derive(Clone, Debug)]
pub struct OneStepModel {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    skel: SkelEncoder,
    enc_init: HiddenInit,
    enc: GruLayer,
    mean: Linear,
    logvar: Linear,
    dec_init: HiddenInit,
    dec: GruStack,
    out: Linear,
}

/// Decoder outputs, each `[B, 32, 7]`.
pub(crate) struct OneStepOutput {
    pub n_probs: Var,
    pub v: Var,
    pub m: Var,
}

impl OneStepModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "init.onestep");
        let mut store = ParamStore::new();
        let (h, l, dh) = (config.groove_hidden, config.latent_dim, config.decoder_hidden);
        let skel = SkelEncoder::new(&mut store, "skel", config.skel_hidden, &mut rng)?;
        let enc_init = HiddenInit::new(&mut store, "one.enc_init", SKEL_DIM, 2, h, &mut rng)?;
        let enc = GruLayer::new(&mut store, "one.enc", CHANNELS + CLASSES, h, Direction::Bi, &mut rng)?;
        let mean = Linear::new(&mut store, "one.mean", 2 * h, l, &mut rng)?;
        let logvar = Linear::new(&mut store, "one.logvar", 2 * h, l, &mut rng)?;
        let dec = GruStack::new(&mut store, "one.dec", CHANNELS + CLASSES, dh, config.decoder_layers, Direction::Forward, &mut rng)?;
        let dec_init = HiddenInit::new(&mut store, "one.dec_init", l + SKEL_DIM, dec.num_states(), dh, &mut rng)?;
        let out = Linear::new(&mut store, "one.out", dh, CHANNELS, &mut rng)?;
        Ok(Self {
            config,
            store,
            skel,
            enc_init,
            enc,
            mean,
            logvar,
            dec_init,
            dec,
            out,
        })
    }

    fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, nvm: Var, p: Var, h_p: Var) -> Result<(Var, Var), NumericsError> {
        let x = tape.concat(&[nvm, p], 2)?;
        let h0 = self.enc_init.forward(tape, h_p)?;
        let out = self.enc.forward(tape, x, &h0)?;
        let h = tape.concat(&out.finals, 1)?;
        Ok((self.mean.forward(tape, h)?, self.logvar.forward(tape, h)?))
    }

    /// Decode 32 steps. During training, `truth` carries the `[N;V;M]`
    /// target (`[B, 32, 21]`) and the ground-truth notes mask V and M; at
    /// inference the notes are the thresholded probabilities.
    fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        p: Var,
        h_p: Var,
        mut teacher: Option<(Var, Var, f64, &mut Rng)>,
    ) -> Result<OneStepOutput, NumericsError> {
        let batch = tape.shape(z)[0];
        let c = tape.concat(&[z, h_p], 1)?;
        let mut h = self.dec_init.forward(tape, c)?;
        let mut prev = tape.input(Tensor::zeros(&[batch, CHANNELS]))?;
        let (mut ns, mut vs, mut ms) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..STEPS {
            let p_t = tape.select(p, 1, t)?;
            let x = tape.concat(&[prev, p_t], 1)?;
            let y = self.dec.step(tape, x, &mut h)?;
            let o = self.out.forward(tape, y)?;
            let np = tape.slice(o, 1, 0, CLASSES)?;
            let np = tape.sigmoid(np)?;
            let vo = tape.slice(o, 1, CLASSES, 2 * CLASSES)?;
            let vo = tape.sigmoid(vo)?;
            let mo = tape.slice(o, 1, 2 * CLASSES, CHANNELS)?;
            let mo = tape.tanh(mo)?;
            let (mask, fed_n) = match &teacher {
                Some((_, n, _, _)) => (tape.select(*n, 1, t)?, np),
                None => {
                    let bin = Tensor::from_fn(&[batch, CLASSES], |k| {
                        if tape.value(np).data()[k] >= T::from_f64(0.5) {
                            T::one()
                        } else {
                            T::zero()
                        }
                    });
                    let bin = tape.input(bin)?;
                    (bin, bin)
                }
            };
            let vo = tape.mul(vo, mask)?;
            let mo = tape.mul(mo, mask)?;
            let pred = tape.concat(&[fed_n, vo, mo], 1)?;
            ns.push(np);
            vs.push(vo);
            ms.push(mo);
            prev = match teacher.as_mut() {
                Some((truth, _, tf, rng)) if t + 1 < STEPS => {
                    let truth_t = tape.select(*truth, 1, t)?;
                    teacher_mix(tape, truth_t, pred, *tf, rng)?
                }
                _ => pred,
            };
        }
        Ok(OneStepOutput {
            n_probs: tape.stack(&ns, 1)?,
            v: tape.stack(&vs, 1)?,
            m: tape.stack(&ms, 1)?,
        })
    }

    /// `BCE(N) + MSE(V) + MSE(M) + β·KL`, returned as (total, bce, mse_v, mse_m, kl).
    pub(crate) fn losses<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &Batch,
        ctx: &mut StepContext,
    ) -> Result<[Var; 5], NumericsError> {
        let b = batch.size;
        let n_t = super::grid_tensor::<T>(&batch.n, b, CLASSES)?;
        let n = tape.input(n_t.clone())?;
        let v = input_grid(tape, &batch.v, b, CLASSES)?;
        let m = input_grid(tape, &batch.m, b, CLASSES)?;
        let p = input_grid(tape, &batch.p, b, CLASSES)?;
        let nvm = tape.concat(&[n, v, m], 2)?;
        let h_p = self.skel.forward(tape, p)?;
        let (mu, lv) = self.encode(tape, nvm, p, h_p)?;
        let z = reparameterize(tape, mu, lv, &mut ctx.rng)?;
        let out = self.decode(tape, z, p, h_p, Some((nvm, n, ctx.tf, &mut ctx.rng)))?;
        let bce = tape.bce(out.n_probs, &n_t)?;
        let mv = mse(tape, out.v, v)?;
        let mm = mse(tape, out.m, m)?;
        let kl = kl_standard_normal(tape, mu, lv)?;
        let bkl = tape.scale(kl, ctx.beta)?;
        let total = tape.add(bce, mv)?;
        let total = tape.add(total, mm)?;
        let total = tape.add(total, bkl)?;
        Ok([total, bce, mv, mm, kl])
    }

    /// Total training loss of one batch.
    pub fn loss_total<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch, ctx: &mut StepContext) -> Result<Var, NumericsError> {
        Ok(self.losses(tape, batch, ctx)?[0])
    }

    pub fn train(
        &mut self,
        examples: &[Example],
        cfg: &TrainConfig,
        monitor: &mut dyn TrainMonitor<Self>,
    ) -> Result<Vec<LossRow>, ModelError> {
        run_training(self, examples, cfg, monitor)
    }

    /// Posterior means of each segment, conditioned on its own template.
    pub fn encode_latents(&self, segs: &[&DrumSegment]) -> Result<Vec<Vec<f32>>, ModelError> {
        if segs.is_empty() {
            return Ok(Vec::new());
        }
        let examples: Vec<Example> = segs.iter().map(|s| Example::new((*s).clone())).collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&refs);
        let b = batch.size;
        let mut tape = Tape::new(&self.store);
        let n = input_grid(&mut tape, &batch.n, b, CLASSES)?;
        let v = input_grid(&mut tape, &batch.v, b, CLASSES)?;
        let m = input_grid(&mut tape, &batch.m, b, CLASSES)?;
        let p = input_grid(&mut tape, &batch.p, b, CLASSES)?;
        let nvm = tape.concat(&[n, v, m], 2)?;
        let h_p = self.skel.forward(&mut tape, p)?;
        let (mu, _) = self.encode(&mut tape, nvm, p, h_p)?;
        Ok(tape.value(mu).data().chunks(self.config.latent_dim).map(<[f32]>::to_vec).collect())
    }

    pub fn decode_latents(&self, items: &[(&Template, &[f32])]) -> Result<Vec<DrumSegment>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let b = items.len();
        let l = self.config.latent_dim;
        let mut p_flat = Vec::new();
        let mut z_flat = Vec::new();
        for (tpl, z) in items {
            if z.len() != l {
                return Err(ModelError::Config(format!("latent vectors must have {l} entries")));
            }
            p_flat.extend(tpl.flat());
            z_flat.extend_from_slice(z);
        }
        let mut tape = Tape::new(&self.store);
        let p = input_grid(&mut tape, &p_flat, b, CLASSES)?;
        let h_p = self.skel.forward(&mut tape, p)?;
        let z = tape.input(Tensor::from_f32(&[b, l], &z_flat)?)?;
        let out = self.decode(&mut tape, z, p, h_p, None)?;
        let (nd, vd, md) = (
            tape.value(out.n_probs).to_f32_vec(),
            tape.value(out.v).to_f32_vec(),
            tape.value(out.m).to_f32_vec(),
        );
        let cells = STEPS * CLASSES;
        Ok((0..b)
            .map(|i| {
                let r = i * cells..(i + 1) * cells;
                DrumSegment::from_flat(&nd[r.clone()], &vd[r.clone()], &md[r], "decoded")
            })
            .collect())
    }

    pub fn transfer_groove(&self, template: &Template, reference: &DrumSegment) -> Result<DrumSegment, ModelError> {
        let z = self.encode_latents(&[reference])?.remove(0);
        Ok(self.decode_latents(&[(template, &z)])?.remove(0))
    }

    /// Reconstruct each segment onto its own derived template.
    pub fn reconstruct_all(&self, segs: &[DrumSegment]) -> Result<Vec<DrumSegment>, ModelError> {
        let mut out = Vec::with_capacity(segs.len());
        for chunk in segs.chunks(64) {
            let refs: Vec<&DrumSegment> = chunk.iter().collect();
            let zs = self.encode_latents(&refs)?;
            let templates: Vec<Template> = chunk.iter().map(derive_template).collect();
            let items: Vec<(&Template, &[f32])> = templates.iter().zip(&zs).map(|(t, z)| (t, z.as_slice())).collect();
            out.extend(self.decode_latents(&items)?);
        }
        Ok(out)
    }

    pub fn generate(&self, template: &Template, seed: u64) -> Result<DrumSegment, ModelError> {
        let mut rng = Rng::stream(seed, "generate.latents");
        let z: Vec<f32> = (0..self.config.latent_dim).map(|_| rng.normal() as f32).collect();
        Ok(self.decode_latents(&[(template, &z)])?.remove(0))
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Result<Checkpoint, ModelError> {
        save(
            &self.store,
            SavedConfig {
                kind: ModelKind::Onestep,
                model: self.config.clone(),
                flags: ConditionFlags::default(),
                train: train.cloned(),
            },
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg = SavedConfig::expect(ckpt, ModelKind::Onestep)?;
        let mut model = Self::new(cfg.model, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

impl Trainable for OneStepModel {
    type Item = Example;

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Logged with the KL term folded into `L_vel` so the components still
    /// sum to the total.
    fn batch_loss(&self, tape: &mut Tape<'_, f32>, items: &[&Example], ctx: &mut StepContext) -> Result<(Var, LossRow), ModelError> {
        let batch = Batch::from_examples(items);
        let [total, bce, mv, mm, kl] = self.losses(tape, &batch, ctx)?;
        let row = LossRow {
            l_recon: scalar_value(tape, bce),
            l_vel: scalar_value(tape, mv) + ctx.beta * scalar_value(tape, kl),
            l_time: scalar_value(tape, mm),
            total: scalar_value(tape, total),
            ..LossRow::default()
        };
        Ok((total, row))
    }
}
