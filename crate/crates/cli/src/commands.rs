use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pocketgroove::dataset::{
    derive_template, midi_to_segments, preprocess, write_manifest_at, ControlPatterns, Manifest, MicrotimingPattern,
    PreprocessOptions, Split, Template, VelocityPattern,
};
use pocketgroove::eval::{codebook_counts, genre_eval, MetricReport};
use pocketgroove::grid::{segment_to_midi, DrumSegment, Genre, DEFAULT_TEMPO_BPM, STEPS};
use pocketgroove::knn::KnnIndex;
use pocketgroove::midi_io::{write_smf, DrumClass};
use pocketgroove::models::{
    Conditions, Example, GenreClassifier, LossLog, LossRow, ModelError, ModelKind, OneStepModel, PocketVae, Prior,
    SavedConfig, TrainConfig, TrainMonitor,
};
use pocketgroove::numerics::Checkpoint;
use pocketgroove::selfcheck::gradient_suite;
use pocketgroove::synthdata::{generate_corpus, parse_specs, write_corpus};

use crate::config::RunConfig;
use crate::patterns;
use crate::UsageError;

#[derive(Parser, Debug)]
#[command(name = "pocketgroove", version, about = "Drum groove transfer and generation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a MIDI corpus, segment it into .pgseg files and write a manifest
    Preprocess(PreprocessArgs),
    /// Generate a synthetic corpus from style specs
    Synth(SynthArgs),
    /// Train a model on the train split of a manifest
    Train(TrainArgs),
    /// Transfer the groove of a reference performance onto a template
    Transfer(TransferArgs),
    /// Generate a groove for a template from the prior
    Generate(GenerateArgs),
    /// Nearest-neighbor groove transfer
    Knn(KnnArgs),
    /// Reconstruction metrics on a manifest split
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks
    Gradcheck,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test ratios
    #[arg(long, default_value = "0.8,0.1,0.1")]
    splits: String,
    /// Keep only this MIDI channel (1-16); all channels by default
    #[arg(long)]
    channel: Option<u8>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML file of [[style]] tables
    #[arg(long)]
    spec: PathBuf,
    /// Segments per style
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "0.8,0.1,0.1")]
    splits: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    model: ModelKind,
    /// Overrides `manifest` in the config file
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `out` in the config file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained PocketVAE checkpoint that supplies codes (prior only)
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Print a loss row every N steps (0 = never)
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct OutputArgs {
    #[arg(long)]
    out: PathBuf,
    /// Export tempo in BPM
    #[arg(long, default_value_t = DEFAULT_TEMPO_BPM)]
    tempo: f64,
}

#[derive(Args, Debug)]
struct PatternArgs {
    /// 32-row velocity class file (0..=5)
    #[arg(long)]
    vel_pattern: Option<PathBuf>,
    /// 32-row microtiming class file (-1, 0, 1)
    #[arg(long)]
    mt_pattern: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = parse_genre)]
    genre: Option<Genre>,
    #[command(flatten)]
    patterns: PatternArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long, value_parser = parse_genre)]
    genre: Genre,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    patterns: PatternArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Valid => Some(Split::Valid),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Args, Debug)]
struct KnnArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    template: PathBuf,
    #[arg(long, default_value_t = pocketgroove::knn::DEFAULT_K)]
    k: usize,
    /// Manifest split that forms the index
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// PocketVAE or one-step checkpoint
    #[arg(long, required_unless_present = "oracle_identity")]
    ckpt: Option<PathBuf>,
    /// Genre classifier applied to the reconstructions
    #[arg(long)]
    genre_clf: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Replace the model by the identity (metric sanity check)
    #[arg(long, conflicts_with = "ckpt")]
    oracle_identity: bool,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

fn parse_genre(s: &str) -> Result<Genre, String> {
    s.parse::<Genre>().map_err(|e| e.to_string())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--splits: expected three numbers, got `{s}`")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(usage(format!("--splits: expected three numbers, got `{s}`"))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Transfer(a) => run_transfer(a),
        Command::Generate(a) => run_generate(a),
        Command::Knn(a) => run_knn(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck => run_gradcheck(),
    }
}

fn run_preprocess(a: PreprocessArgs) -> Result<()> {
    let channel = match a.channel {
        None => None,
        Some(c @ 1..=16) => Some(c - 1),
        Some(c) => return Err(usage(format!("--channel must be 1..=16, got {c}"))),
    };
    let opts = PreprocessOptions {
        ratios: parse_ratios(&a.splits)?,
        seed: a.seed,
        channel,
    };
    let (manifest, stats) = preprocess(&a.input, &a.out, &opts)?;
    write_manifest_at(&manifest, &a.manifest)?;
    for (path, reason) in &stats.rejected {
        eprintln!("rejected {path}: {reason}");
    }
    eprintln!(
        "{} tracks, {} kept, {} segments -> {}",
        stats.tracks,
        stats.kept,
        stats.segments,
        a.manifest.display()
    );
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let specs = parse_specs(&text)?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let segs = generate_corpus(&specs, a.count, a.seed)?;
    write_corpus(&segs, &a.out, parse_ratios(&a.splits)?, a.seed)?;
    eprintln!("{} segments -> {}", segs.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

/// Loss log plus periodic checkpoints written to the output path.
struct CliMonitor<M> {
    log: LossLog,
    out: PathBuf,
    log_every: usize,
    save: Box<dyn Fn(&M) -> Result<Checkpoint, ModelError>>,
}

impl<M> TrainMonitor<M> for CliMonitor<M> {
    fn on_step(&mut self, row: &LossRow) {
        TrainMonitor::<M>::on_step(&mut self.log, row);
        if self.log_every > 0 && row.step % self.log_every == 0 {
            eprintln!("step {} total {:.6}", row.step, row.total);
        }
    }

    fn on_checkpoint(&mut self, model: &M, _step: usize) -> Result<(), ModelError> {
        (self.save)(model)?.write(&self.out)?;
        Ok(())
    }
}

fn loss_log_path(out: &Path) -> PathBuf {
    out.with_extension("loss.tsv")
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::read(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    rc.manifest = a.manifest.or(rc.manifest);
    rc.out = a.out.or(rc.out);
    rc.vae = a.vae.or(rc.vae);
    let manifest_path = rc.manifest.clone().ok_or_else(|| usage("--manifest is required"))?;
    let out = rc.out.clone().ok_or_else(|| usage("--out is required"))?;
    let manifest = Manifest::read(&manifest_path)?;
    let segs = manifest.load_segments(Some(Split::Train))?;
    if segs.is_empty() {
        bail!("the train split of {} is empty", manifest_path.display());
    }
    let examples = Example::from_segments(segs);
    let train = rc.train.clone();
    let seed = train.seed;
    fn monitor<M: 'static>(out: &Path, log_every: usize, train: &TrainConfig, save: fn(&M, Option<&TrainConfig>) -> Result<Checkpoint, ModelError>) -> CliMonitor<M> {
        let train = train.clone();
        CliMonitor {
            log: LossLog::default(),
            out: out.to_path_buf(),
            log_every,
            save: Box::new(move |m| save(m, Some(&train))),
        }
    }
    let log = match a.model {
        ModelKind::Pocketvae => {
            let mut m = PocketVae::new(rc.model.clone(), rc.flags, seed)?;
            let mut mon = monitor(&out, a.log_every, &train, PocketVae::to_checkpoint);
            m.train(&examples, &train, &mut mon)?;
            mon.log
        }
        ModelKind::Onestep => {
            let mut m = OneStepModel::new(rc.model.clone(), seed)?;
            let mut mon = monitor(&out, a.log_every, &train, OneStepModel::to_checkpoint);
            m.train(&examples, &train, &mut mon)?;
            mon.log
        }
        ModelKind::Prior => {
            let vae_path = rc.vae.clone().ok_or_else(|| usage("training a prior requires --vae"))?;
            let vae = PocketVae::from_checkpoint(&read_checkpoint(&vae_path)?)?;
            let seqs = Prior::code_dataset(&vae, &examples)?;
            let mut cfg = rc.model.clone();
            cfg.codebook_size = vae.config.codebook_size;
            let mut m = Prior::new(cfg, seed)?;
            let mut mon = monitor(&out, a.log_every, &train, Prior::to_checkpoint);
            m.train(&seqs, &train, &mut mon)?;
            mon.log
        }
        ModelKind::GenreClf => {
            let mut m = GenreClassifier::new(rc.model.clone(), seed)?;
            let mut mon = monitor(&out, a.log_every, &train, GenreClassifier::to_checkpoint);
            m.train(&examples, &train, &mut mon)?;
            mon.log
        }
    };
    let log_path = loss_log_path(&out);
    std::fs::write(&log_path, log.to_tsv()).with_context(|| format!("writing {}", log_path.display()))?;
    eprintln!("{} -> {}", a.model, out.display());
    Ok(())
}

/// First two-bar window of a MIDI file.
fn first_segment(path: &Path) -> Result<DrumSegment> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let id = path.display().to_string();
    let segs = midi_to_segments(&bytes, &id, None).with_context(|| format!("in {}", path.display()))?;
    segs.into_iter().next().with_context(|| format!("{} has no drum notes", path.display()))
}

fn load_template(path: &Path) -> Result<Template> {
    Ok(derive_template(&first_segment(path)?))
}

/// Supplied pattern files; a missing half defaults to class 3 on the
/// template's cymbal steps, or on-grid timing.
fn load_patterns(a: &PatternArgs, template: &Template) -> Result<Option<ControlPatterns>> {
    if a.vel_pattern.is_none() && a.mt_pattern.is_none() {
        return Ok(None);
    }
    let velocity = match &a.vel_pattern {
        Some(p) => patterns::read_velocity(p)?,
        None => {
            let mut v = VelocityPattern([0; STEPS]);
            for (t, row) in template.p.iter().enumerate() {
                if DrumClass::CYMBALS.iter().any(|c| row[c.index()] == 1) {
                    v.0[t] = 3;
                }
            }
            v
        }
    };
    let microtiming = match &a.mt_pattern {
        Some(p) => patterns::read_microtiming(p)?,
        None => MicrotimingPattern::on_grid(),
    };
    Ok(Some(ControlPatterns { velocity, microtiming }))
}

fn write_midi(seg: &DrumSegment, o: &OutputArgs) -> Result<()> {
    if !(o.tempo.is_finite() && o.tempo > 0.0) {
        return Err(usage(format!("--tempo must be positive, got {}", o.tempo)));
    }
    let bytes = write_smf(&segment_to_midi(seg, o.tempo))?;
    std::fs::write(&o.out, bytes).with_context(|| format!("writing {}", o.out.display()))
}

fn run_transfer(a: TransferArgs) -> Result<()> {
    let template = load_template(&a.template)?;
    let reference = first_segment(&a.reference)?;
    let ckpt = read_checkpoint(&a.ckpt)?;
    let out = match SavedConfig::from_checkpoint(&ckpt)?.kind {
        ModelKind::Pocketvae => {
            let vae = PocketVae::from_checkpoint(&ckpt)?;
            let cond = Conditions {
                genre: a.genre,
                patterns: load_patterns(&a.patterns, &template)?,
            };
            vae.transfer_groove(&template, &reference, &cond)?
        }
        ModelKind::Onestep => {
            if a.genre.is_some() || a.patterns.vel_pattern.is_some() || a.patterns.mt_pattern.is_some() {
                return Err(usage("the one-step model takes no genre or pattern controls"));
            }
            OneStepModel::from_checkpoint(&ckpt)?.transfer_groove(&template, &reference)?
        }
        other => return Err(usage(format!("transfer needs a pocketvae or onestep checkpoint, got {other}"))),
    };
    write_midi(&out, &a.output)
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let template = load_template(&a.template)?;
    let vae = PocketVae::from_checkpoint(&read_checkpoint(&a.ckpt)?)?;
    let prior = Prior::from_checkpoint(&read_checkpoint(&a.prior)?)?;
    let pats = load_patterns(&a.patterns, &template)?;
    let seg = vae.generate(&prior, &template, a.genre, pats.as_ref(), a.seed)?;
    write_midi(&seg, &a.output)
}

fn run_knn(a: KnnArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let index = KnnIndex::build(manifest.load_segments(a.split.split())?);
    if a.k == 0 || a.k > index.len() {
        return Err(usage(format!("--k {} must be between 1 and the corpus size {}", a.k, index.len())));
    }
    let template = load_template(&a.template)?;
    let seg = index.transfer(&template, a.k)?;
    write_midi(&seg, &a.output)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let truth = manifest.load_segments(a.split.split())?;
    if truth.is_empty() {
        bail!("no segments in the selected split of {}", a.manifest.display());
    }
    let mut codes = None;
    let pred = match &a.ckpt {
        None => truth.clone(),
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            match SavedConfig::from_checkpoint(&ckpt)?.kind {
                ModelKind::Pocketvae => {
                    let vae = PocketVae::from_checkpoint(&ckpt)?;
                    let examples = Example::from_segments(truth.iter().cloned());
                    let seqs = Prior::code_dataset(&vae, &examples)?;
                    let pairs: Vec<(Vec<usize>, Genre)> = seqs.into_iter().map(|s| (s.codes, s.genre)).collect();
                    codes = Some(codebook_counts(&pairs, vae.config.codebook_size));
                    vae.reconstruct_all(&truth)?
                }
                ModelKind::Onestep => OneStepModel::from_checkpoint(&ckpt)?.reconstruct_all(&truth)?,
                other => return Err(usage(format!("eval needs a pocketvae or onestep checkpoint, got {other}"))),
            }
        }
    };
    let mut report = MetricReport::reconstruction(&pred, &truth)?;
    report.codebook_hist = codes;
    if let Some(path) = &a.genre_clf {
        let clf = GenreClassifier::from_checkpoint(&read_checkpoint(path)?)?;
        let predicted = clf.classify(&pred)?;
        let genres: Vec<Genre> = truth.iter().map(|s| s.genre.expect("manifest segments carry a genre")).collect();
        report.genre = Some(genre_eval(&predicted, &genres)?);
    }
    report.write_dir(&a.report)?;
    print!("{}", report.metrics_tsv());
    Ok(())
}

fn run_gradcheck() -> Result<()> {
    let reports = gradient_suite()?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    if !ok {
        bail!("gradient check failed");
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}
