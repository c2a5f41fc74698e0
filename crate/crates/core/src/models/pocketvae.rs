use crate::dataset::{derive_template, ControlPatterns, MicrotimingPattern, Template, VelocityPattern};
use crate::grid::{DrumSegment, Genre, CLASSES, STEPS};
use crate::midi_io::DrumClass;
use crate::layers::{Codebook, ConvDecoder, ConvEncoder, Direction, FrozenCodes, GruLayer, GruStack, HiddenInit, Linear, CODE_LEN};
use crate::numerics::{NumericsError, ParamStore, Rng, Scalar, Tape, Tensor, Var};

use super::{
    input_grid, kl_standard_normal, mse, reparameterize, run_training, save, scalar_value, teacher_mix, Batch,
    ConditionFlags, Conditions, Example, LossRow, ModelConfig, ModelError, ModelKind, Prior, SavedConfig,
    SkelEncoder, StepContext, TrainConfig, TrainMonitor, Trainable, PATTERN_WIDTH_M, PATTERN_WIDTH_V, SKEL_DIM,
};
use crate::numerics::Checkpoint;

/// Everything needed to redraw a groove onto a template.
#[derive(Clone, Debug, PartialEq)]
pub struct GrooveLatents {
    pub codes: Vec<usize>,
    pub z_v: Vec<f32>,
    pub z_m: Vec<f32>,
}

/// Loss graph nodes of one evaluation.
pub struct PocketLosses<T> {
    pub l_recon: Var,
    pub l_cb: Var,
    pub l_cmt: Var,
    pub l_vel: Var,
    pub l_time: Var,
    pub total: Var,
    pub frozen: FrozenCodes<T>,
}

#[derive(Clone, Debug)]
struct NoteVae {
    enc_init: HiddenInit,
    enc_gru: GruLayer,
    conv: ConvEncoder,
    codebook: Codebook,
    deconv: ConvDecoder,
    dec_init: HiddenInit,
    dec_gru: GruLayer,
    out: Linear,
}

impl NoteVae {
    fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self, NumericsError> {
        let h = cfg.note_hidden;
        let [c1, c2] = cfg.conv_channels;
        Ok(Self {
            enc_init: HiddenInit::new(store, "note.enc_init", SKEL_DIM, 2, h, rng)?,
            enc_gru: GruLayer::new(store, "note.enc_gru", 2 * CLASSES, h, Direction::Bi, rng)?,
            conv: ConvEncoder::new(store, "note.enc", [2 * h, c1, c2, cfg.code_dim], rng)?,
            codebook: Codebook::new(store, "note", cfg.codebook_size, cfg.code_dim, rng)?,
            deconv: ConvDecoder::new(store, "note.dec", [cfg.code_dim, c2, c1, h], rng)?,
            dec_init: HiddenInit::new(store, "note.dec_init", SKEL_DIM, 2, h, rng)?,
            dec_gru: GruLayer::new(store, "note.dec_gru", h + CLASSES, h, Direction::Bi, rng)?,
            out: Linear::new(store, "note.out", 2 * h, CLASSES, rng)?,
        })
    }

    /// `[N ; P]` with hidden init from `h_p` → `z_N: [B, 8, D]`.
    fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, n: Var, p: Var, h_p: Var) -> Result<Var, NumericsError> {
        let x = tape.concat(&[n, p], 2)?;
        let h0 = self.enc_init.forward(tape, h_p)?;
        let out = self.enc_gru.forward(tape, x, &h0)?;
        self.conv.forward(tape, out.outputs)
    }

    /// Codes `[B, 8, D]` → per-cell onset probabilities `[B, 32, 7]`.
    fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, e: Var, p: Var, h_p: Var) -> Result<Var, NumericsError> {
        let y = self.deconv.forward(tape, e)?;
        let x = tape.concat(&[y, p], 2)?;
        let h0 = self.dec_init.forward(tape, h_p)?;
        let out = self.dec_gru.forward(tape, x, &h0)?;
        let logits = self.out.forward(tape, out.outputs)?;
        tape.sigmoid(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GrooveKind {
    Velocity,
    Microtiming,
}

/// VEL or TIME module: BiGRU posterior encoder and an autoregressive
/// 2-layer GRU decoder whose outputs are masked by the note score.
#[derive(Clone, Debug)]
struct GrooveVae {
    kind: GrooveKind,
    enc_init: HiddenInit,
    enc: GruLayer,
    mean: Linear,
    logvar: Linear,
    dec_init: HiddenInit,
    dec: GruStack,
    out: Linear,
}

impl GrooveVae {
    fn new(
        store: &mut ParamStore<f32>,
        kind: GrooveKind,
        cfg: &ModelConfig,
        cond_dim: usize,
        pattern_width: usize,
        rng: &mut Rng,
    ) -> Result<Self, NumericsError> {
        let name = match kind {
            GrooveKind::Velocity => "vel",
            GrooveKind::Microtiming => "time",
        };
        let (h, l, dh) = (cfg.groove_hidden, cfg.latent_dim, cfg.decoder_hidden);
        let in_dim = 2 * CLASSES + pattern_width;
        let dec = GruStack::new(store, &format!("{name}.dec"), in_dim, dh, cfg.decoder_layers, Direction::Forward, rng)?;
        Ok(Self {
            kind,
            enc_init: HiddenInit::new(store, &format!("{name}.enc_init"), cond_dim, 2, h, rng)?,
            enc: GruLayer::new(store, &format!("{name}.enc"), in_dim, h, Direction::Bi, rng)?,
            mean: Linear::new(store, &format!("{name}.mean"), 2 * h, l, rng)?,
            logvar: Linear::new(store, &format!("{name}.logvar"), 2 * h, l, rng)?,
            dec_init: HiddenInit::new(store, &format!("{name}.dec_init"), l + cond_dim, dec.num_states(), dh, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dh, CLASSES, rng)?,
            dec,
        })
    }

    fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        values: Var,
        n: Var,
        pattern: Option<Var>,
        cond: Var,
    ) -> Result<(Var, Var), NumericsError> {
        let mut parts = vec![values, n];
        parts.extend(pattern);
        let x = tape.concat(&parts, 2)?;
        let h0 = self.enc_init.forward(tape, cond)?;
        let out = self.enc.forward(tape, x, &h0)?;
        let h = tape.concat(&out.finals, 1)?;
        Ok((self.mean.forward(tape, h)?, self.logvar.forward(tape, h)?))
    }

    /// Decode 32 steps. With `teacher`, the previous-step input is the
    /// ground truth with probability `tf` per batch row.
    fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        n: Var,
        pattern: Option<Var>,
        cond: Var,
        mut teacher: Option<(Var, f64, &mut Rng)>,
    ) -> Result<Var, NumericsError> {
        let batch = tape.shape(z)[0];
        let c = tape.concat(&[z, cond], 1)?;
        let mut h = self.dec_init.forward(tape, c)?;
        let mut prev = tape.input(Tensor::zeros(&[batch, CLASSES]))?;
        let mut outs = Vec::with_capacity(STEPS);
        for t in 0..STEPS {
            let n_t = tape.select(n, 1, t)?;
            let mut parts = vec![prev, n_t];
            if let Some(pat) = pattern {
                parts.push(tape.select(pat, 1, t)?);
            }
            let x = tape.concat(&parts, 1)?;
            let y = self.dec.step(tape, x, &mut h)?;
            let o = self.out.forward(tape, y)?;
            let o = match self.kind {
                GrooveKind::Velocity => tape.sigmoid(o)?,
                GrooveKind::Microtiming => tape.tanh(o)?,
            };
            let o = tape.mul(o, n_t)?;
            outs.push(o);
            prev = match teacher.as_mut() {
                Some((truth, tf, rng)) if t + 1 < STEPS => {
                    let truth_t = tape.select(*truth, 1, t)?;
                    teacher_mix(tape, truth_t, o, *tf, rng)?
                }
                _ => o,
            };
        }
        tape.stack(&outs, 1)
    }
}

/// The two-step model: SKEL encoder, NOTE VQ-VAE, VEL and TIME VAEs.
#[derive(Clone, Debug)]
pub struct PocketVae {
    pub config: ModelConfig,
    pub flags: ConditionFlags,
    pub store: ParamStore<f32>,
    skel: SkelEncoder,
    note: NoteVae,
    vel: GrooveVae,
    time: GrooveVae,
}

impl PocketVae {
    pub fn new(config: ModelConfig, flags: ConditionFlags, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "init.pocketvae");
        let mut store = ParamStore::new();
        let cond_dim = SKEL_DIM + if flags.use_genre { Genre::COUNT } else { 0 };
        let (pv, pm) = if flags.use_patterns {
            (PATTERN_WIDTH_V, PATTERN_WIDTH_M)
        } else {
            (0, 0)
        };
        let skel = SkelEncoder::new(&mut store, "skel", config.skel_hidden, &mut rng)?;
        let note = NoteVae::new(&mut store, &config, &mut rng)?;
        let vel = GrooveVae::new(&mut store, GrooveKind::Velocity, &config, cond_dim, pv, &mut rng)?;
        let time = GrooveVae::new(&mut store, GrooveKind::Microtiming, &config, cond_dim, pm, &mut rng)?;
        Ok(Self {
            config,
            flags,
            store,
            skel,
            note,
            vel,
            time,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.note.codebook
    }

    /// Template (or note score) embedding for a single matrix.
    pub fn skel_encode(&self, x: &[[u8; CLASSES]; STEPS]) -> Result<Vec<f32>, ModelError> {
        let flat: Vec<f32> = x.iter().flatten().map(|&b| b as f32).collect();
        let mut tape = Tape::new(&self.store);
        let xv = input_grid(&mut tape, &flat, 1, CLASSES)?;
        let h = self.skel.forward(&mut tape, xv)?;
        Ok(tape.value(h).to_f32_vec())
    }

    fn cond<T: Scalar>(&self, tape: &mut Tape<'_, T>, h_n: Var, genre: &[f32], batch: usize) -> Result<Var, NumericsError> {
        if self.flags.use_genre {
            let g = tape.input(Tensor::from_f32(&[batch, Genre::COUNT], genre)?)?;
            tape.concat(&[h_n, g], 1)
        } else {
            Ok(h_n)
        }
    }

    fn patterns<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<(Option<Var>, Option<Var>), NumericsError> {
        if !self.flags.use_patterns {
            return Ok((None, None));
        }
        let cv = input_grid(tape, &batch.cv, batch.size, PATTERN_WIDTH_V)?;
        let cm = input_grid(tape, &batch.cm, batch.size, PATTERN_WIDTH_M)?;
        Ok((Some(cv), Some(cm)))
    }

    /// The joint loss `L_note + L_vel + L_time` with
    /// `L_note = L_recon + β1·L_cb + β2·L_cmt`. With `frozen`, the quantizer
    /// replays the given codes so the graph is smooth in every parameter.
    pub fn losses<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &Batch,
        ctx: &mut StepContext,
        weights: (f64, f64),
        frozen: Option<&FrozenCodes<T>>,
    ) -> Result<PocketLosses<T>, NumericsError> {
        let b = batch.size;
        let n_t = super::grid_tensor::<T>(&batch.n, b, CLASSES)?;
        let n = tape.input(n_t.clone())?;
        let p = input_grid(tape, &batch.p, b, CLASSES)?;
        let v = input_grid(tape, &batch.v, b, CLASSES)?;
        let m = input_grid(tape, &batch.m, b, CLASSES)?;
        let (cv, cm) = self.patterns(tape, batch)?;

        let h_p = self.skel.forward(tape, p)?;
        let z = self.note.encode(tape, n, p, h_p)?;
        let vq = self.note.codebook.quantize(tape, z, frozen)?;
        let probs = self.note.decode(tape, vq.quantized, p, h_p)?;
        let l_recon = tape.bce(probs, &n_t)?;

        let h_n = self.skel.forward(tape, n)?;
        let cond = self.cond(tape, h_n, &batch.genre, b)?;

        let mut groove = |tape: &mut Tape<'_, T>, module: &GrooveVae, truth: Var, pat: Option<Var>| -> Result<Var, NumericsError> {
            let (mu, lv) = module.encode(tape, truth, n, pat, cond)?;
            let z = reparameterize(tape, mu, lv, &mut ctx.rng)?;
            let out = module.decode(tape, z, n, pat, cond, Some((truth, ctx.tf, &mut ctx.rng)))?;
            let rec = mse(tape, out, truth)?;
            let kl = kl_standard_normal(tape, mu, lv)?;
            let kl = tape.scale(kl, ctx.beta)?;
            tape.add(rec, kl)
        };
        let l_vel = groove(tape, &self.vel, v, cv)?;
        let l_time = groove(tape, &self.time, m, cm)?;

        let cb = tape.scale(vq.l_cb, weights.0)?;
        let cmt = tape.scale(vq.l_cmt, weights.1)?;
        let l_note = tape.add(l_recon, cb)?;
        let l_note = tape.add(l_note, cmt)?;
        let total = tape.add(l_note, l_vel)?;
        let total = tape.add(total, l_time)?;
        Ok(PocketLosses {
            l_recon,
            l_cb: vq.l_cb,
            l_cmt: vq.l_cmt,
            l_vel,
            l_time,
            total,
            frozen: vq.frozen,
        })
    }

    pub fn train(
        &mut self,
        examples: &[Example],
        cfg: &TrainConfig,
        monitor: &mut dyn TrainMonitor<Self>,
    ) -> Result<Vec<LossRow>, ModelError> {
        run_training(self, examples, cfg, monitor)
    }

    /// Resolve the genre a segment is conditioned on.
    fn genre_for(&self, explicit: Option<Genre>, fallback: Option<Genre>, id: &str) -> Result<Option<Genre>, ModelError> {
        let g = explicit.or(fallback);
        if self.flags.use_genre && g.is_none() {
            return Err(ModelError::MissingGenre(id.to_string()));
        }
        Ok(g)
    }

    /// Latents of each segment: note codes from its own template, and the
    /// posterior means of the velocity and microtiming encoders.
    pub fn encode_latents(&self, items: &[(&DrumSegment, &Conditions)]) -> Result<Vec<GrooveLatents>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut examples = Vec::with_capacity(items.len());
        for (seg, c) in items {
            let mut seg = (*seg).clone();
            seg.genre = self.genre_for(c.genre, seg.genre, &seg.source_id)?;
            let mut ex = Example::new(seg);
            if let Some(p) = &c.patterns {
                ex.patterns = p.clone();
            }
            examples.push(ex);
        }
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&refs);
        let b = batch.size;
        let mut tape = Tape::new(&self.store);
        let n = input_grid(&mut tape, &batch.n, b, CLASSES)?;
        let p = input_grid(&mut tape, &batch.p, b, CLASSES)?;
        let v = input_grid(&mut tape, &batch.v, b, CLASSES)?;
        let m = input_grid(&mut tape, &batch.m, b, CLASSES)?;
        let (cv, cm) = self.patterns(&mut tape, &batch)?;
        let h_p = self.skel.forward(&mut tape, p)?;
        let z = self.note.encode(&mut tape, n, p, h_p)?;
        let table = tape.param(self.note.codebook.h);
        let codes = self.note.codebook.indices(tape.value(table).data(), tape.value(z).data());
        let h_n = self.skel.forward(&mut tape, n)?;
        let cond = self.cond(&mut tape, h_n, &batch.genre, b)?;
        let (mu_v, _) = self.vel.encode(&mut tape, v, n, cv, cond)?;
        let (mu_m, _) = self.time.encode(&mut tape, m, n, cm, cond)?;
        let l = self.config.latent_dim;
        let (zv, zm) = (tape.value(mu_v).data(), tape.value(mu_m).data());
        Ok((0..b)
            .map(|i| GrooveLatents {
                codes: codes[i * CODE_LEN..(i + 1) * CODE_LEN].to_vec(),
                z_v: zv[i * l..(i + 1) * l].to_vec(),
                z_m: zm[i * l..(i + 1) * l].to_vec(),
            })
            .collect())
    }

    /// Decode latents onto templates. Without explicit patterns, a
    /// pattern-conditioned model gets velocity class 3 on every step where the
    /// decoded score plays a cymbal and on-grid microtiming everywhere.
    pub fn decode_latents(&self, items: &[(&Template, &GrooveLatents, &Conditions)]) -> Result<Vec<DrumSegment>, ModelError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let b = items.len();
        let l = self.config.latent_dim;
        let mut p_flat = Vec::with_capacity(b * STEPS * CLASSES);
        let mut codes = Vec::with_capacity(b * CODE_LEN);
        let mut zv = Vec::with_capacity(b * l);
        let mut zm = Vec::with_capacity(b * l);
        let mut genres = Vec::with_capacity(b);
        for (tpl, lat, c) in items {
            if lat.codes.len() != CODE_LEN || lat.codes.iter().any(|&k| k >= self.config.codebook_size) {
                return Err(ModelError::Config(format!("code sequence {:?} is invalid for this codebook", lat.codes)));
            }
            if lat.z_v.len() != l || lat.z_m.len() != l {
                return Err(ModelError::Config(format!("latent vectors must have {l} entries")));
            }
            p_flat.extend(tpl.flat());
            codes.extend(&lat.codes);
            zv.extend(&lat.z_v);
            zm.extend(&lat.z_m);
            genres.push(self.genre_for(c.genre, None, "template")?);
        }
        let mut tape = Tape::new(&self.store);
        let p = input_grid(&mut tape, &p_flat, b, CLASSES)?;
        let h_p = self.skel.forward(&mut tape, p)?;
        let table = tape.param(self.note.codebook.h);
        let e = tape.embedding(table, &codes)?;
        let e = tape.reshape(e, &[b, CODE_LEN, self.config.code_dim])?;
        let probs = self.note.decode(&mut tape, e, p, h_p)?;
        let n_flat: Vec<f32> = tape
            .value(probs)
            .data()
            .iter()
            .map(|&x| if x >= 0.5 { 1.0 } else { 0.0 })
            .collect();

        let n = input_grid(&mut tape, &n_flat, b, CLASSES)?;
        let h_n = self.skel.forward(&mut tape, n)?;
        let g_flat: Vec<f32> = genres
            .iter()
            .flat_map(|g| g.map(Genre::one_hot).unwrap_or([0.0; Genre::COUNT]))
            .collect();
        let cond = self.cond(&mut tape, h_n, &g_flat, b)?;
        let (cv, cm) = if self.flags.use_patterns {
            let mut cv = Vec::new();
            let mut cm = Vec::new();
            for (i, (_, _, c)) in items.iter().enumerate() {
                let pats = match &c.patterns {
                    Some(p) => p.clone(),
                    None => default_patterns(&n_flat[i * STEPS * CLASSES..(i + 1) * STEPS * CLASSES]),
                };
                cv.extend(pats.velocity.one_hot());
                cm.extend(pats.microtiming.one_hot());
            }
            (
                Some(input_grid(&mut tape, &cv, b, PATTERN_WIDTH_V)?),
                Some(input_grid(&mut tape, &cm, b, PATTERN_WIDTH_M)?),
            )
        } else {
            (None, None)
        };
        let zv = tape.input(Tensor::from_f32(&[b, l], &zv)?)?;
        let zm = tape.input(Tensor::from_f32(&[b, l], &zm)?)?;
        let v_out = self.vel.decode(&mut tape, zv, n, cv, cond, None)?;
        let m_out = self.time.decode(&mut tape, zm, n, cm, cond, None)?;
        let (vd, md) = (tape.value(v_out).to_f32_vec(), tape.value(m_out).to_f32_vec());
        let cells = STEPS * CLASSES;
        Ok((0..b)
            .map(|i| {
                let r = i * cells..(i + 1) * cells;
                let mut seg = DrumSegment::from_flat(&n_flat[r.clone()], &vd[r.clone()], &md[r], "decoded");
                seg.genre = genres[i];
                seg
            })
            .collect())
    }

    /// Extract latents from each reference and decode them onto the paired
    /// template. Missing conditions fall back to the reference's own genre
    /// and control patterns.
    pub fn transfer_batch(&self, items: &[(&Template, &DrumSegment, &Conditions)]) -> Result<Vec<DrumSegment>, ModelError> {
        let resolved: Vec<Conditions> = items
            .iter()
            .map(|(_, r, c)| Conditions {
                genre: c.genre.or(r.genre),
                patterns: Some(c.patterns.clone().unwrap_or_else(|| ControlPatterns::from_segment(r))),
            })
            .collect();
        let enc: Vec<(&DrumSegment, &Conditions)> = items.iter().zip(&resolved).map(|((_, r, _), c)| (*r, c)).collect();
        let latents = self.encode_latents(&enc)?;
        let dec: Vec<(&Template, &GrooveLatents, &Conditions)> = items
            .iter()
            .zip(&latents)
            .zip(&resolved)
            .map(|(((t, _, _), l), c)| (*t, l, c))
            .collect();
        self.decode_latents(&dec)
    }

    pub fn transfer_groove(&self, template: &Template, reference: &DrumSegment, conditions: &Conditions) -> Result<DrumSegment, ModelError> {
        Ok(self.transfer_batch(&[(template, reference, conditions)])?.remove(0))
    }

    /// Encode `seg` and decode it back onto `template`.
    pub fn reconstruct(&self, seg: &DrumSegment, template: &Template, conditions: &Conditions) -> Result<DrumSegment, ModelError> {
        self.transfer_groove(template, seg, conditions)
    }

    /// Reconstruct each segment onto its own derived template.
    pub fn reconstruct_all(&self, segs: &[DrumSegment]) -> Result<Vec<DrumSegment>, ModelError> {
        let templates: Vec<Template> = segs.iter().map(derive_template).collect();
        let none = Conditions::default();
        let items: Vec<_> = templates.iter().zip(segs).map(|(t, s)| (t, s, &none)).collect();
        let mut out = Vec::with_capacity(segs.len());
        for chunk in items.chunks(64) {
            out.extend(self.transfer_batch(chunk)?);
        }
        Ok(out)
    }

    /// Codes sampled from the prior, groove latents from the standard normal.
    pub fn generate(
        &self,
        prior: &Prior,
        template: &Template,
        genre: Genre,
        patterns: Option<&ControlPatterns>,
        seed: u64,
    ) -> Result<DrumSegment, ModelError> {
        if prior.config.codebook_size != self.config.codebook_size {
            return Err(ModelError::Config("prior and model codebook sizes differ".into()));
        }
        let codes = prior.sample(genre, 1.0, seed)?;
        let mut rng = Rng::stream(seed, "generate.latents");
        let l = self.config.latent_dim;
        let z_v = (0..l).map(|_| rng.normal() as f32).collect();
        let z_m = (0..l).map(|_| rng.normal() as f32).collect();
        let lat = GrooveLatents { codes, z_v, z_m };
        let cond = Conditions {
            genre: Some(genre),
            patterns: patterns.cloned(),
        };
        Ok(self.decode_latents(&[(template, &lat, &cond)])?.remove(0))
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Result<Checkpoint, ModelError> {
        save(
            &self.store,
            SavedConfig {
                kind: ModelKind::Pocketvae,
                model: self.config.clone(),
                flags: self.flags,
                train: train.cloned(),
            },
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg = SavedConfig::expect(ckpt, ModelKind::Pocketvae)?;
        let mut model = Self::new(cfg.model, cfg.flags, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

fn default_patterns(n_flat: &[f32]) -> ControlPatterns {
    let mut velocity = VelocityPattern([0; STEPS]);
    for t in 0..STEPS {
        if DrumClass::CYMBALS.iter().any(|c| n_flat[t * CLASSES + c.index()] >= 0.5) {
            velocity.0[t] = 3;
        }
    }
    ControlPatterns {
        velocity,
        microtiming: MicrotimingPattern::on_grid(),
    }
}

impl Trainable for PocketVae {
    type Item = Example;

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn batch_loss(&self, tape: &mut Tape<'_, f32>, examples: &[&Example], ctx: &mut StepContext) -> Result<(Var, LossRow), ModelError> {
        let batch = Batch::from_examples(examples);
        if self.flags.use_genre {
            batch.require_genres(examples)?;
        }
        let weights = (ctx.beta1_cb, ctx.beta2_cmt);
        let l = self.losses(tape, &batch, ctx, weights, None)?;
        let row = LossRow {
            l_recon: scalar_value(tape, l.l_recon),
            l_cb: scalar_value(tape, l.l_cb),
            l_cmt: scalar_value(tape, l.l_cmt),
            l_vel: scalar_value(tape, l.l_vel),
            l_time: scalar_value(tape, l.l_time),
            total: scalar_value(tape, l.total),
            ..LossRow::default()
        };
        Ok((l.total, row))
    }
}
