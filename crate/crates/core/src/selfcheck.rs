//! Finite-difference gradient checks for every layer type and for the full
//! joint loss of each model at a miniature configuration.

use crate::grid::Genre;
use crate::layers::{Codebook, ConvDecoder, ConvEncoder, Direction, GruLayer, GruStack, HiddenInit, Linear};
use crate::models::{
    Batch, CodeSequence, ConditionFlags, Example, GenreClassifier, ModelConfig, ModelError, OneStepModel, PocketVae,
    Prior, StepContext, TrainConfig,
};
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::numerics::{NumericsError, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::synthdata::{generate_corpus, two_genre_specs};

/// Central-difference step for graphs containing ReLU.
pub const RELU_STEP: f64 = 1e-6;

fn random_input<T: Scalar>(tape: &mut Tape<'_, T>, shape: &[usize], rng: &mut Rng) -> Result<Var, NumericsError> {
    tape.input(Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(-1.0, 1.0))))
}

/// `sum(x ⊙ R)` for a fixed random `R`, so every output coordinate matters.
fn project<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = Rng::stream(seed, "selfcheck.projection");
    let shape = tape.shape(x).to_vec();
    let r = random_input(tape, &shape, &mut rng)?;
    let y = tape.mul(x, r)?;
    tape.sum(y)
}

fn layer_checks() -> Result<Vec<GradCheckReport>, NumericsError> {
    let default = GradCheckOptions::default();
    let relu = GradCheckOptions {
        step: RELU_STEP,
        ..default
    };
    let mut reports = Vec::new();

    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng)?;
    reports.push(check_gradients("linear", &store, &default, |tape: &mut Tape<'_, f64>| {
        let mut r = Rng::new(1);
        let x = random_input(tape, &[2, 4, 5], &mut r)?;
        let y = lin.forward(tape, x)?;
        project(tape, y, 1)
    })?);

    for (name, dir) in [("gru_forward", Direction::Forward), ("gru_bidirectional", Direction::Bi)] {
        let mut rng = Rng::new(12);
        let mut store = ParamStore::new();
        let gru = GruLayer::new(&mut store, "gru", 3, 4, dir, &mut rng)?;
        let init = HiddenInit::new(&mut store, "init", 2, dir.count(), 4, &mut rng)?;
        reports.push(check_gradients(name, &store, &default, |tape: &mut Tape<'_, f64>| {
            let mut r = Rng::new(2);
            let x = random_input(tape, &[2, 32, 3], &mut r)?;
            let c = random_input(tape, &[2, 2], &mut r)?;
            let h0 = init.forward(tape, c)?;
            let out = gru.forward(tape, x, &h0)?;
            let mut parts = vec![out.outputs];
            let f = tape.concat(&out.finals, 1)?;
            parts.push(f);
            let a = project(tape, parts[0], 2)?;
            let b = project(tape, parts[1], 3)?;
            tape.add(a, b)
        })?);
    }

    let mut rng = Rng::new(13);
    let mut store = ParamStore::new();
    let stack = GruStack::new(&mut store, "stack", 3, 4, 2, Direction::Forward, &mut rng)?;
    reports.push(check_gradients("gru_stack_steps", &store, &default, |tape: &mut Tape<'_, f64>| {
        let mut r = Rng::new(3);
        let mut h: Vec<Var> = (0..2).map(|_| random_input(tape, &[2, 4], &mut r)).collect::<Result<_, _>>()?;
        let mut outs = Vec::new();
        for _ in 0..8 {
            let x = random_input(tape, &[2, 3], &mut r)?;
            outs.push(stack.step(tape, x, &mut h)?);
        }
        let y = tape.stack(&outs, 1)?;
        project(tape, y, 4)
    })?);

    let mut rng = Rng::new(14);
    let mut store = ParamStore::new();
    let enc = ConvEncoder::new(&mut store, "enc", [5, 6, 4, 3], &mut rng)?;
    reports.push(check_gradients("conv_encoder", &store, &relu, |tape: &mut Tape<'_, f64>| {
        let mut r = Rng::new(5);
        let x = random_input(tape, &[2, 32, 5], &mut r)?;
        let y = enc.forward(tape, x)?;
        project(tape, y, 5)
    })?);

    let mut rng = Rng::new(15);
    let mut store = ParamStore::new();
    let dec = ConvDecoder::new(&mut store, "dec", [3, 4, 6, 5], &mut rng)?;
    reports.push(check_gradients("conv_decoder", &store, &relu, |tape: &mut Tape<'_, f64>| {
        let mut r = Rng::new(6);
        let x = random_input(tape, &[2, 8, 3], &mut r)?;
        let y = dec.forward(tape, x)?;
        project(tape, y, 6)
    })?);

    let mut rng = Rng::new(16);
    let mut store = ParamStore::new();
    let pre = Linear::new(&mut store, "pre", 3, 4, &mut rng)?;
    let book = Codebook::new(&mut store, "vq", 4, 4, &mut rng)?;
    let frozen = {
        let s64: ParamStore<f64> = store.cast();
        let mut tape = Tape::new(&s64);
        let mut r = Rng::new(7);
        let x = random_input(&mut tape, &[2, 8, 3], &mut r)?;
        let z = pre.forward(&mut tape, x)?;
        book.quantize(&mut tape, z, None)?.frozen
    };
    reports.push(check_gradients("vector_quantizer", &store, &default, |tape: &mut Tape<'_, f64>| {
        let mut r = Rng::new(7);
        let x = random_input(tape, &[2, 8, 3], &mut r)?;
        let z = pre.forward(tape, x)?;
        let vq = book.quantize(tape, z, Some(&frozen))?;
        let down = project(tape, vq.quantized, 7)?;
        let l = tape.add(down, vq.l_cb)?;
        tape.add(l, vq.l_cmt)
    })?);
    Ok(reports)
}

fn tiny_examples(n: usize) -> Vec<Example> {
    let segs = generate_corpus(&two_genre_specs(), n.div_ceil(2), 3).expect("built-in specs are valid");
    Example::from_segments(segs.into_iter().take(n))
}

fn model_checks() -> Result<Vec<GradCheckReport>, ModelError> {
    let relu = GradCheckOptions {
        step: RELU_STEP,
        ..GradCheckOptions::default()
    };
    let cfg = ModelConfig::tiny();
    let train = TrainConfig::default();
    let examples = tiny_examples(1);
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::from_examples(&refs);
    let mut reports = Vec::new();
    // Mid-schedule values so teacher forcing mixes and the KL term is active.
    let ctx = || StepContext {
        tf: 0.5,
        beta: 0.1,
        beta1_cb: train.beta1_cb,
        beta2_cmt: train.beta2_cmt,
        rng: Rng::stream(5, "selfcheck.step"),
    };

    let flags = ConditionFlags {
        use_genre: true,
        use_patterns: true,
    };
    let vae = PocketVae::new(cfg.clone(), flags, 21)?;
    let weights = (train.beta1_cb, train.beta2_cmt);
    let frozen = {
        let s64: ParamStore<f64> = vae.store.cast();
        let mut tape = Tape::new(&s64);
        vae.losses(&mut tape, &batch, &mut ctx(), weights, None)?.frozen
    };
    reports.push(check_gradients("pocketvae_joint_loss", &vae.store, &relu, |tape: &mut Tape<'_, f64>| {
        Ok::<_, NumericsError>(vae.losses(tape, &batch, &mut ctx(), weights, Some(&frozen))?.total)
    })?);

    let one = OneStepModel::new(cfg.clone(), 22)?;
    reports.push(check_gradients("onestep_loss", &one.store, &GradCheckOptions::default(), |tape: &mut Tape<'_, f64>| {
        Ok::<_, NumericsError>(one.loss_total(tape, &batch, &mut ctx())?)
    })?);

    let prior = Prior::new(cfg.clone(), 23)?;
    let seqs = [
        CodeSequence {
            codes: vec![0, 1, 2, 3, 3, 2, 1, 0],
            genre: Genre::Funk,
        },
        CodeSequence {
            codes: vec![2, 2, 0, 1, 3, 0, 0, 1],
            genre: Genre::Rock,
        },
    ];
    let seq_refs: Vec<&CodeSequence> = seqs.iter().collect();
    reports.push(check_gradients("prior_loss", &prior.store, &GradCheckOptions::default(), |tape: &mut Tape<'_, f64>| {
        prior.loss(tape, &seq_refs)
    })?);

    let clf = GenreClassifier::new(cfg, 24)?;
    let segs: Vec<_> = examples.iter().map(|e| &e.seg).collect();
    let target = vec![examples[0].seg.genre.map_or(0, Genre::index)];
    reports.push(check_gradients("genre_classifier_loss", &clf.store, &GradCheckOptions::default(), |tape: &mut Tape<'_, f64>| {
        let logits = clf.logits(tape, &segs)?;
        Ok::<_, ModelError>(tape.cross_entropy(logits, &target)?)
    })?);
    Ok(reports)
}

/// Run every check; the suite passes when every report passes.
pub fn gradient_suite() -> Result<Vec<GradCheckReport>, ModelError> {
    let mut reports = layer_checks()?;
    reports.extend(model_checks()?);
    Ok(reports)
}
