//! Track filtering, template and control-pattern derivation, manifests and
//! train/valid/test splits.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::grid::{self, DrumSegment, Genre, GridError, Matrix, CLASSES, STEPS};
use crate::midi_io::{self, DrumClass, MidiError, MidiSequence, TimeSignature};
use crate::numerics::Rng;

/// Steps that carry the backbeat snare (beats two and four of both bars).
pub const BACKBEAT_STEPS: [usize; 4] = [4, 12, 20, 28];
pub const SIXTEENTH_THRESHOLD: usize = 24;
pub const KICK_THRESHOLD: i32 = 40;
pub const VELOCITY_CLASSES: usize = 5;
pub const MICROTIMING_CLASSES: usize = 3;
pub const MICROTIMING_DEADBAND: f32 = 0.1;
pub const THREADS_ENV: &str = "POCKETGROOVE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Empty(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid split ratios {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("{path}: {message}")]
    Track { path: String, message: String },
}

fn io_err(path: &Path, e: impl fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    Meter(TimeSignature),
    Fill,
    InstrumentCount(usize),
    MissingKickOrSnare,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Meter(ts) => write!(f, "meter {ts} is not 4/4"),
            RejectReason::Fill => f.write_str("fill-in file"),
            RejectReason::InstrumentCount(n) => write!(f, "only {n} instrument classes"),
            RejectReason::MissingKickOrSnare => f.write_str("no kick or no snare"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Reject(RejectReason),
}

/// Corpus filter for one parsed track.
pub fn filter_track(seq: &MidiSequence, filename: &str, genre: Genre) -> FilterDecision {
    if seq.time_signature != TimeSignature::FOUR_FOUR {
        return FilterDecision::Reject(RejectReason::Meter(seq.time_signature));
    }
    if filename.to_lowercase().contains("fill") {
        return FilterDecision::Reject(RejectReason::Fill);
    }
    let mut present = [false; CLASSES];
    for e in &seq.events {
        if let Some(c) = midi_io::map_percussion(e.pitch) {
            present[c.index()] = true;
        }
    }
    let count = present.iter().filter(|&&p| p).count();
    if count < 3 {
        return FilterDecision::Reject(RejectReason::InstrumentCount(count));
    }
    let has_core = present[DrumClass::Kick.index()] && present[DrumClass::Snare.index()];
    if !has_core && genre != Genre::Jazz {
        return FilterDecision::Reject(RejectReason::MissingKickOrSnare);
    }
    FilterDecision::Keep
}

/// Binary skeleton score; the Tom row is always empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub p: Matrix<u8>,
}

impl Template {
    pub fn empty() -> Self {
        Self { p: [[0; CLASSES]; STEPS] }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.p.iter().flatten().map(|&x| x as f32).collect()
    }

    /// The template as a playable segment: full velocity, on the grid.
    pub fn to_segment(&self, source_id: &str) -> DrumSegment {
        let mut seg = DrumSegment::empty(source_id);
        for t in 0..STEPS {
            for i in 0..CLASSES {
                if self.p[t][i] == 1 {
                    seg.n[t][i] = 1;
                    seg.v[t][i] = 1.0;
                }
            }
        }
        seg
    }

    pub fn hit_count(&self) -> usize {
        self.p.iter().flatten().map(|&x| x as usize).sum()
    }
}

fn velocity_int(v: f32) -> i32 {
    (v as f64 * 127.0).round() as i32
}

/// Cymbal class with the most hits, lowest index on ties; `None` without cymbals.
pub fn dominant_cymbal(seg: &DrumSegment) -> Option<(DrumClass, usize)> {
    let mut best: Option<(DrumClass, usize)> = None;
    for c in DrumClass::CYMBALS {
        let h = seg.class_hits(c);
        if h > 0 && best.is_none_or(|(_, bh)| h > bh) {
            best = Some((c, h));
        }
    }
    best
}

/// Rule-reduce a segment to its skeleton: a saturated dominant cymbal, loud
/// snares, kicks above velocity 40, no toms.
pub fn derive_template(seg: &DrumSegment) -> Template {
    let mut tpl = Template::empty();
    if let Some((c, h)) = dominant_cymbal(seg) {
        let stride = if h > SIXTEENTH_THRESHOLD { 1 } else { 2 };
        for t in (0..STEPS).step_by(stride) {
            tpl.p[t][c.index()] = 1;
        }
    }

    let snare = DrumClass::Snare.index();
    let backbeat: Vec<i32> = BACKBEAT_STEPS
        .iter()
        .filter(|&&t| seg.n[t][snare] == 1)
        .map(|&t| velocity_int(seg.v[t][snare]))
        .collect();
    // Without backbeat snares there is no reference level and every snare stays.
    let (num, den) = if backbeat.is_empty() {
        (0, 1)
    } else {
        (backbeat.iter().sum::<i32>(), backbeat.len() as i32)
    };
    for t in 0..STEPS {
        if seg.n[t][snare] == 1 && velocity_int(seg.v[t][snare]) * den >= num {
            tpl.p[t][snare] = 1;
        }
    }

    let kick = DrumClass::Kick.index();
    for t in 0..STEPS {
        if seg.n[t][kick] == 1 && velocity_int(seg.v[t][kick]) > KICK_THRESHOLD {
            tpl.p[t][kick] = 1;
        }
    }
    tpl
}

/// Per-step velocity class of the cymbals: 0 for no cymbal, else 1..=5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VelocityPattern(pub [u8; STEPS]);

/// Per-step microtiming class: -1 pushed, 0 on grid, +1 laid back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicrotimingPattern(pub [i8; STEPS]);

impl VelocityPattern {
    /// 32×5 row-major one-hot, zero rows where no cymbal plays.
    pub fn one_hot(&self) -> Vec<f32> {
        let mut out = vec![0.0; STEPS * VELOCITY_CLASSES];
        for (t, &c) in self.0.iter().enumerate() {
            if c > 0 {
                out[t * VELOCITY_CLASSES + c as usize - 1] = 1.0;
            }
        }
        out
    }

    pub fn class_value(class: u8) -> f32 {
        0.2 * class as f32
    }
}

impl MicrotimingPattern {
    pub fn on_grid() -> Self {
        Self([0; STEPS])
    }

    /// 32×3 row-major one-hot with columns ordered (-1, 0, +1).
    pub fn one_hot(&self) -> Vec<f32> {
        let mut out = vec![0.0; STEPS * MICROTIMING_CLASSES];
        for (t, &c) in self.0.iter().enumerate() {
            out[t * MICROTIMING_CLASSES + (c + 1) as usize] = 1.0;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlPatterns {
    pub velocity: VelocityPattern,
    pub microtiming: MicrotimingPattern,
}

impl ControlPatterns {
    pub fn from_segment(seg: &DrumSegment) -> Self {
        Self {
            velocity: derive_velocity_pattern(seg),
            microtiming: derive_microtiming_pattern(seg),
        }
    }
}

/// Bucket a loudness in [0,1] into classes 1..=5. Values sitting on a class
/// boundary in `f32` (0.2, 0.4, ...) belong to the lower class.
pub fn velocity_class(v: f32) -> u8 {
    let scaled = 5.0 * v as f64 - 1e-6;
    (scaled.ceil() as i64).clamp(1, 5) as u8
}

pub fn derive_velocity_pattern(seg: &DrumSegment) -> VelocityPattern {
    let mut out = [0u8; STEPS];
    for (t, slot) in out.iter_mut().enumerate() {
        let loudest = DrumClass::CYMBALS
            .iter()
            .filter(|c| seg.hit(t, **c))
            .map(|c| seg.v[t][c.index()])
            .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.max(v))));
        if let Some(v) = loudest {
            *slot = velocity_class(v);
        }
    }
    VelocityPattern(out)
}

pub fn microtiming_class(mean: f32) -> i8 {
    if mean > MICROTIMING_DEADBAND {
        1
    } else if mean < -MICROTIMING_DEADBAND {
        -1
    } else {
        0
    }
}

pub fn derive_microtiming_pattern(seg: &DrumSegment) -> MicrotimingPattern {
    let mut out = [0i8; STEPS];
    for (t, slot) in out.iter_mut().enumerate() {
        let (sum, count) = (0..CLASSES)
            .filter(|&i| seg.n[t][i] == 1)
            .fold((0.0f64, 0usize), |(s, c), i| (s + seg.m[t][i] as f64, c + 1));
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        *slot = microtiming_class(mean as f32);
    }
    MicrotimingPattern(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// A `.mid` file, a `.pgseg` file or a directory of `.pgseg` files;
    /// relative paths resolve against the manifest's directory.
    pub path: String,
    pub genre: Genre,
    pub split: Split,
    pub n_segments: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

pub const MANIFEST_HEADER: &str = "path\tgenre\tsplit\tn_segments";

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path, r.genre, r.split, r.n_segments));
        }
        out
    }

    pub fn parse_tsv(text: &str, base_dir: &Path) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(DatasetError::Manifest {
                    line: 1,
                    message: format!("expected header '{MANIFEST_HEADER}'"),
                })
            }
        }
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| DatasetError::Manifest { line: i + 1, message };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns, found {}", cols.len())));
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(bad(format!("duplicate path '{}'", cols[0])));
            }
            rows.push(ManifestRow {
                path: cols[0].to_string(),
                genre: cols[1].parse().map_err(|e: GridError| bad(e.to_string()))?,
                split: cols[2].parse().map_err(bad)?,
                n_segments: cols[3].trim().parse().map_err(|e| bad(format!("n_segments: {e}")))?,
            });
        }
        Ok(Self {
            rows,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_tsv(&text, &base)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_tsv()).map_err(|e| io_err(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Load segments of one split (or all rows); each segment takes the row's
    /// genre and its path as source id.
    pub fn load_segments(&self, split: Option<Split>) -> Result<Vec<DrumSegment>, DatasetError> {
        let mut out = Vec::new();
        for row in self.rows.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            let mut segs = load_path(&self.resolve(row), &row.path, Some(row.genre))?;
            for s in &mut segs {
                s.genre = Some(row.genre);
                s.source_id = row.path.clone();
            }
            out.extend(segs);
        }
        Ok(out)
    }
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Load segments from a `.pgseg` file, a directory of them, or a MIDI file.
pub fn load_path(path: &Path, source_id: &str, genre: Option<Genre>) -> Result<Vec<DrumSegment>, DatasetError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| has_ext(p, &["pgseg"]))
            .collect();
        files.sort();
        return files
            .iter()
            .map(|f| grid::read_pgseg(f).map_err(DatasetError::from))
            .collect();
    }
    if has_ext(path, &["pgseg"]) {
        return Ok(vec![grid::read_pgseg(path)?]);
    }
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    midi_to_segments(&bytes, source_id, genre)
}

/// Parse, quantize and segment one MIDI file.
pub fn midi_to_segments(bytes: &[u8], source_id: &str, genre: Option<Genre>) -> Result<Vec<DrumSegment>, DatasetError> {
    let seq = midi_io::parse_smf(bytes)?;
    let full = grid::quantize_to_grid(&seq)?;
    Ok(grid::segment(&full, source_id, genre)?)
}

/// Deterministic shuffled assignment of `n` tracks to splits.
pub fn assign_splits(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>, DatasetError> {
    let (a, b, c) = ratios;
    let total = a + b + c;
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || total <= 0.0 || !total.is_finite() {
        return Err(DatasetError::BadRatios(ratios));
    }
    let n_train = ((n as f64 * a / total).round() as usize).min(n);
    let n_valid = ((n as f64 * b / total).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, "dataset.split").shuffle(&mut order);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackSource {
    pub path: PathBuf,
    /// Path relative to the scanned directory, `/`-separated.
    pub rel: String,
    pub genre: Genre,
}

/// Find MIDI files under `dir`. The genre comes from the top-level folder
/// name, or from a sidecar `<file>.genre` text file.
pub fn scan_tracks(dir: &Path) -> Result<Vec<TrackSource>, DatasetError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
        for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let p = entry.map_err(|e| io_err(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if has_ext(&p, &["mid", "midi"]) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let rel_path = path.strip_prefix(dir).unwrap_or(&path);
        let rel = rel_path
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let sidecar = path.with_extension("genre");
        let genre = if sidecar.is_file() {
            let text = std::fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?;
            text.trim().parse::<Genre>().ok()
        } else {
            None
        };
        let genre = genre.or_else(|| {
            let mut comps = rel_path.components();
            let first = comps.next()?;
            comps.next()?;
            first.as_os_str().to_str()?.parse().ok()
        });
        let genre = genre.ok_or_else(|| DatasetError::Track {
            path: path.display().to_string(),
            message: "no genre folder or .genre sidecar".into(),
        })?;
        out.push(TrackSource { path, rel, genre });
    }
    if out.is_empty() {
        return Err(DatasetError::Empty(format!("no MIDI files under {}", dir.display())));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum TrackOutcome {
    Kept(Vec<DrumSegment>),
    Rejected(RejectReason),
}

#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// Keep only notes on this zero-based channel; `None` keeps all.
    pub channel: Option<u8>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            ratios: (0.8, 0.1, 0.1),
            seed: 0,
            channel: None,
        }
    }
}

pub fn process_track(src: &TrackSource, channel: Option<u8>) -> Result<TrackOutcome, DatasetError> {
    let wrap = |e: DatasetError| DatasetError::Track {
        path: src.path.display().to_string(),
        message: e.to_string(),
    };
    let bytes = std::fs::read(&src.path).map_err(|e| io_err(&src.path, e))?;
    let mut seq = midi_io::parse_smf(&bytes).map_err(|e| wrap(e.into()))?;
    if let Some(ch) = channel {
        seq.filter_channel(ch);
    }
    let name = src.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if let FilterDecision::Reject(r) = filter_track(&seq, &name, src.genre) {
        return Ok(TrackOutcome::Rejected(r));
    }
    let full = grid::quantize_to_grid(&seq).map_err(|e| wrap(e.into()))?;
    let segs = grid::segment(&full, &src.rel, Some(src.genre)).map_err(|e| wrap(e.into()))?;
    Ok(TrackOutcome::Kept(segs))
}

/// Thread cap from `POCKETGROOVE_THREADS`; unset or invalid means no cap.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn process_all(sources: &[TrackSource], channel: Option<u8>) -> Result<Vec<TrackOutcome>, DatasetError> {
    use rayon::prelude::*;
    let run = || sources.par_iter().map(|s| process_track(s, channel)).collect::<Result<Vec<_>, _>>();
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| DatasetError::Empty(e.to_string()))?
            .install(run),
        None => run(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreprocessStats {
    pub tracks: usize,
    pub kept: usize,
    pub rejected: Vec<(String, String)>,
    pub segments: usize,
}

/// Filter and count every track under `dir` and split the kept ones. Rows
/// point at the MIDI files, relative to `dir`.
pub fn build_manifest(dir: &Path, ratios: (f64, f64, f64), seed: u64) -> Result<Manifest, DatasetError> {
    let opts = PreprocessOptions { ratios, seed, channel: None };
    let (manifest, _, _) = collect(dir, &opts)?;
    Ok(manifest)
}

type Collected = (Manifest, Vec<Vec<DrumSegment>>, PreprocessStats);

fn collect(dir: &Path, opts: &PreprocessOptions) -> Result<Collected, DatasetError> {
    let sources = scan_tracks(dir)?;
    let outcomes = process_all(&sources, opts.channel)?;
    let mut stats = PreprocessStats {
        tracks: sources.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (src, outcome) in sources.iter().zip(outcomes) {
        match outcome {
            TrackOutcome::Kept(segs) => kept.push((src, segs)),
            TrackOutcome::Rejected(r) => stats.rejected.push((src.rel.clone(), r.to_string())),
        }
    }
    if kept.is_empty() {
        return Err(DatasetError::Empty(format!("every track under {} was rejected", dir.display())));
    }
    let splits = assign_splits(kept.len(), opts.ratios, opts.seed)?;
    stats.kept = kept.len();
    let mut rows = Vec::with_capacity(kept.len());
    let mut segments = Vec::with_capacity(kept.len());
    for ((src, segs), split) in kept.into_iter().zip(splits) {
        stats.segments += segs.len();
        rows.push(ManifestRow {
            path: src.rel.clone(),
            genre: src.genre,
            split,
            n_segments: segs.len(),
        });
        segments.push(segs);
    }
    let manifest = Manifest {
        rows,
        base_dir: dir.to_path_buf(),
    };
    Ok((manifest, segments, stats))
}

/// Convert a MIDI corpus to `.pgseg` files, one directory per track under
/// `out_dir`, and return a manifest whose paths are relative to `out_dir`.
pub fn preprocess(in_dir: &Path, out_dir: &Path, opts: &PreprocessOptions) -> Result<(Manifest, PreprocessStats), DatasetError> {
    let (mut manifest, segments, stats) = collect(in_dir, opts)?;
    for (row, segs) in manifest.rows.iter_mut().zip(segments) {
        let rel = Path::new(&row.path).with_extension("");
        let dir = out_dir.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for (k, seg) in segs.iter().enumerate() {
            let f = dir.join(format!("{:04}.pgseg", k));
            grid::write_pgseg(&f, seg)?;
        }
        row.path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
    }
    manifest.base_dir = out_dir.to_path_buf();
    Ok((manifest, stats))
}

/// Write a manifest file so that its rows still resolve from the file's location.
pub fn write_manifest_at(manifest: &Manifest, file: &Path) -> Result<(), DatasetError> {
    let file_dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    };
    let dir = if file_dir.as_os_str().is_empty() { PathBuf::from(".") } else { file_dir };
    let base = if manifest.base_dir.as_os_str().is_empty() { PathBuf::from(".") } else { manifest.base_dir.clone() };
    if same(&dir, &base) {
        return manifest.write(file);
    }
    let abs_base = base.canonicalize().map_err(|e| io_err(&base, e))?;
    let mut rebased = manifest.clone();
    for row in &mut rebased.rows {
        if !Path::new(&row.path).is_absolute() {
            row.path = abs_base.join(&row.path).display().to_string();
        }
    }
    rebased.write(file)
}
