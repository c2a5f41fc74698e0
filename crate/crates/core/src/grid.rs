//! Fixed 16th-note grid: note, velocity and microtiming matrices, 2-bar
//! segmentation, export back to MIDI and the `.pgseg` segment file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::midi_io::{DrumClass, MidiNoteEvent, MidiSequence, TimeSignature, NUM_CLASSES, PPQ};

pub const STEPS: usize = 32;
pub const CLASSES: usize = NUM_CLASSES;
pub const STEPS_PER_BAR: usize = 16;
pub const TICKS_PER_STEP: i64 = 120;
pub const HALF_STEP: i64 = 60;
pub const DEFAULT_TEMPO_BPM: f64 = 100.0;
/// Channel used on export (GM percussion, zero-based).
pub const DRUM_CHANNEL: u8 = 9;

pub type Matrix<T> = [[T; CLASSES]; STEPS];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("velocity {0} outside 0..=127")]
    VelocityOutOfRange(i64),
    #[error("microtiming offset {0} ticks outside (-60, 60]")]
    MicrotimingOutOfRange(i64),
    #[error("time signature {0} is not 4/4")]
    NotFourFour(TimeSignature),
    #[error("resolution {0} ppq, expected 480")]
    WrongResolution(u16),
    #[error("track has {0} steps, need at least one bar (16)")]
    TooShort(usize),
    #[error("unknown genre '{0}'")]
    UnknownGenre(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("pgseg: {0}")]
    Format(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Genre {
    Electronic,
    Rock,
    Funk,
    Jazz,
    Blues,
    Hiphop,
}

impl Genre {
    pub const COUNT: usize = 6;
    pub const ALL: [Genre; Genre::COUNT] = [
        Genre::Electronic,
        Genre::Rock,
        Genre::Funk,
        Genre::Jazz,
        Genre::Blues,
        Genre::Hiphop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Genre::Electronic => "electronic",
            Genre::Rock => "rock",
            Genre::Funk => "funk",
            Genre::Jazz => "jazz",
            Genre::Blues => "blues",
            Genre::Hiphop => "hiphop",
        }
    }

    pub fn one_hot(self) -> [f32; Genre::COUNT] {
        let mut g = [0.0; Genre::COUNT];
        g[self.index()] = 1.0;
        g
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Genre {
    type Error = GridError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Genre> for String {
    fn from(g: Genre) -> String {
        g.name().to_string()
    }
}

impl FromStr for Genre {
    type Err = GridError;

    /// Case-insensitive; "hip hop", "hip-hop" and "hip_hop" all mean hiphop.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_'))
            .flat_map(char::to_lowercase)
            .collect();
        Genre::ALL
            .into_iter()
            .find(|g| g.name() == key)
            .ok_or_else(|| GridError::UnknownGenre(s.to_string()))
    }
}

/// One 2-bar excerpt. Rows are 16th-note steps, columns are drum classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DrumSegment {
    pub n: Matrix<u8>,
    pub v: Matrix<f32>,
    pub m: Matrix<f32>,
    pub genre: Option<Genre>,
    pub source_id: String,
}

impl DrumSegment {
    pub fn empty(source_id: impl Into<String>) -> Self {
        Self {
            n: [[0; CLASSES]; STEPS],
            v: [[0.0; CLASSES]; STEPS],
            m: [[0.0; CLASSES]; STEPS],
            genre: None,
            source_id: source_id.into(),
        }
    }

    pub fn set_hit(&mut self, t: usize, class: DrumClass, v: f32, m: f32) {
        let i = class.index();
        self.n[t][i] = 1;
        self.v[t][i] = v;
        self.m[t][i] = m;
    }

    pub fn clear_hit(&mut self, t: usize, class: DrumClass) {
        let i = class.index();
        self.n[t][i] = 0;
        self.v[t][i] = 0.0;
        self.m[t][i] = 0.0;
    }

    pub fn hit(&self, t: usize, class: DrumClass) -> bool {
        self.n[t][class.index()] == 1
    }

    pub fn hit_count(&self) -> usize {
        self.n.iter().flatten().map(|&x| x as usize).sum()
    }

    pub fn class_hits(&self, class: DrumClass) -> usize {
        self.n.iter().filter(|row| row[class.index()] == 1).count()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for t in 0..STEPS {
            for i in 0..CLASSES {
                let (n, v, m) = (self.n[t][i], self.v[t][i], self.m[t][i]);
                let bad = match n {
                    0 => v != 0.0 || m != 0.0,
                    1 => !(0.0..=1.0).contains(&v) || !(m > -1.0 && m <= 1.0),
                    _ => true,
                };
                if bad {
                    return Err(GridError::InvalidSegment(format!(
                        "cell ({t},{i}) has N={n}, V={v}, M={m}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flatten a matrix row-major into `f32`s.
    pub fn flat_n(&self) -> Vec<f32> {
        self.n.iter().flatten().map(|&x| x as f32).collect()
    }

    pub fn flat_v(&self) -> Vec<f32> {
        self.v.iter().flatten().copied().collect()
    }

    pub fn flat_m(&self) -> Vec<f32> {
        self.m.iter().flatten().copied().collect()
    }

    /// Rebuild from flat row-major arrays; N is thresholded at 0.5 and V/M
    /// are masked by it.
    pub fn from_flat(n: &[f32], v: &[f32], m: &[f32], source_id: impl Into<String>) -> Self {
        let mut seg = Self::empty(source_id);
        for t in 0..STEPS {
            for i in 0..CLASSES {
                let k = t * CLASSES + i;
                if n[k] >= 0.5 {
                    seg.n[t][i] = 1;
                    seg.v[t][i] = v[k].clamp(0.0, 1.0);
                    seg.m[t][i] = m[k].clamp(-1.0 + f32::EPSILON, 1.0);
                }
            }
        }
        seg
    }
}

pub fn velocity_to_unit(v: i64) -> Result<f32, GridError> {
    if !(0..=127).contains(&v) {
        return Err(GridError::VelocityOutOfRange(v));
    }
    Ok((v as f64 / 127.0) as f32)
}

pub fn ticks_to_microtiming(dt: i64) -> Result<f32, GridError> {
    if dt <= -HALF_STEP || dt > HALF_STEP {
        return Err(GridError::MicrotimingOutOfRange(dt));
    }
    Ok((dt as f64 / HALF_STEP as f64) as f32)
}

/// Nearest grid step of a tick and the signed offset from it; midpoints go
/// to the earlier step.
pub fn snap_tick(tick: u64) -> (usize, i64) {
    let step = (tick + HALF_STEP as u64 - 1) / TICKS_PER_STEP as u64;
    (step as usize, tick as i64 - step as i64 * TICKS_PER_STEP)
}

/// Whole-track matrices, `steps` rows of [`CLASSES`] values each.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGrid {
    pub steps: usize,
    pub n: Vec<[u8; CLASSES]>,
    pub v: Vec<[f32; CLASSES]>,
    pub m: Vec<[f32; CLASSES]>,
}

impl FullGrid {
    pub fn zeros(steps: usize) -> Self {
        Self {
            steps,
            n: vec![[0; CLASSES]; steps],
            v: vec![[0.0; CLASSES]; steps],
            m: vec![[0.0; CLASSES]; steps],
        }
    }
}

/// Snap every mapped note to the grid. Unmapped pitches are dropped; when two
/// notes land in one cell the louder wins (the earlier on a tie).
pub fn quantize_to_grid(seq: &MidiSequence) -> Result<FullGrid, GridError> {
    if seq.time_signature != TimeSignature::FOUR_FOUR {
        return Err(GridError::NotFourFour(seq.time_signature));
    }
    if seq.ppq != PPQ {
        return Err(GridError::WrongResolution(seq.ppq));
    }
    let hits: Vec<(usize, i64, usize, u8)> = seq
        .events
        .iter()
        .filter_map(|e| {
            let class = crate::midi_io::map_percussion(e.pitch)?;
            let (step, dt) = snap_tick(e.onset_ticks);
            Some((step, dt, class.index(), e.velocity))
        })
        .collect();
    let last = hits.iter().map(|h| h.0).max();
    let bars = last.map_or(0, |s| s / STEPS_PER_BAR + 1);
    let mut grid = FullGrid::zeros(bars * STEPS_PER_BAR);
    let mut best = vec![[0u8; CLASSES]; grid.steps];
    for (step, dt, i, vel) in hits {
        if grid.n[step][i] == 1 && vel <= best[step][i] {
            continue;
        }
        best[step][i] = vel;
        grid.n[step][i] = 1;
        grid.v[step][i] = velocity_to_unit(vel as i64)?;
        grid.m[step][i] = ticks_to_microtiming(dt)?;
    }
    Ok(grid)
}

/// Cut 2-bar windows with a 1-bar hop. A single bar is repeated to fill a window.
pub fn segment(grid: &FullGrid, source_id: &str, genre: Option<Genre>) -> Result<Vec<DrumSegment>, GridError> {
    if grid.steps < STEPS_PER_BAR {
        return Err(GridError::TooShort(grid.steps));
    }
    let padded = grid.steps.div_ceil(STEPS_PER_BAR) * STEPS_PER_BAR;
    let total = padded.max(STEPS);
    let row = |t: usize| {
        let t = if padded < STEPS { t % padded } else { t };
        if t < grid.steps {
            (grid.n[t], grid.v[t], grid.m[t])
        } else {
            ([0; CLASSES], [0.0; CLASSES], [0.0; CLASSES])
        }
    };
    let mut out = Vec::new();
    let mut start = 0;
    while start + STEPS <= total {
        let mut seg = DrumSegment::empty(source_id);
        seg.genre = genre;
        for t in 0..STEPS {
            let (n, v, m) = row(start + t);
            seg.n[t] = n;
            seg.v[t] = v;
            seg.m[t] = m;
        }
        out.push(seg);
        start += STEPS_PER_BAR;
    }
    Ok(out)
}

/// Render a segment as MIDI on the percussion channel.
pub fn segment_to_midi(seg: &DrumSegment, tempo_bpm: f64) -> MidiSequence {
    let mut events = Vec::new();
    for t in 0..STEPS {
        for class in DrumClass::ALL {
            let i = class.index();
            if seg.n[t][i] == 0 {
                continue;
            }
            let dt = ((HALF_STEP as f64 * seg.m[t][i] as f64).round() as i64).clamp(1 - HALF_STEP, HALF_STEP);
            let tick = (t as i64 * TICKS_PER_STEP + dt).max(0) as u64;
            let velocity = (127.0 * seg.v[t][i] as f64).round().clamp(1.0, 127.0) as u8;
            events.push(MidiNoteEvent {
                onset_ticks: tick,
                pitch: class.canonical_pitch(),
                velocity,
                channel: DRUM_CHANNEL,
            });
        }
    }
    events.sort_by_key(|e| e.onset_ticks);
    let tempo = (60_000_000.0 / tempo_bpm.max(1.0)).round().clamp(1.0, ((1 << 24) - 1) as f64);
    MidiSequence {
        ppq: PPQ,
        tempo_us_per_quarter: tempo as u32,
        time_signature: TimeSignature::FOUR_FOUR,
        events,
    }
}

const PGSEG_MAGIC: &[u8; 4] = b"PGSG";
const PGSEG_VERSION: u16 = 1;
pub const PGSEG_LEN: usize = 4 + 2 + 2 + 2 + 1 + STEPS * CLASSES * 9;
const NO_GENRE: u8 = 255;

pub fn pgseg_to_bytes(seg: &DrumSegment) -> Vec<u8> {
    let mut out = Vec::with_capacity(PGSEG_LEN);
    out.extend_from_slice(PGSEG_MAGIC);
    out.extend_from_slice(&PGSEG_VERSION.to_le_bytes());
    out.extend_from_slice(&(STEPS as u16).to_le_bytes());
    out.extend_from_slice(&(CLASSES as u16).to_le_bytes());
    out.push(seg.genre.map_or(NO_GENRE, |g| g.index() as u8));
    out.extend(seg.n.iter().flatten());
    for x in seg.v.iter().chain(seg.m.iter()).flatten() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn pgseg_from_bytes(bytes: &[u8], source_id: &str) -> Result<DrumSegment, GridError> {
    let err = |m: &str| Err(GridError::Format(m.to_string()));
    if bytes.len() < 11 || &bytes[..4] != PGSEG_MAGIC {
        return err("bad magic");
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    if u16_at(4) != PGSEG_VERSION {
        return err("unsupported version");
    }
    if u16_at(6) as usize != STEPS || u16_at(8) as usize != CLASSES {
        return err("unexpected matrix shape");
    }
    if bytes.len() != PGSEG_LEN {
        return Err(GridError::Format(format!("length {} != {}", bytes.len(), PGSEG_LEN)));
    }
    let mut seg = DrumSegment::empty(source_id);
    seg.genre = match bytes[10] {
        NO_GENRE => None,
        g => Some(Genre::from_index(g as usize).ok_or_else(|| GridError::Format(format!("genre code {g}")))?),
    };
    let mut off = 11;
    for t in 0..STEPS {
        for i in 0..CLASSES {
            seg.n[t][i] = bytes[off];
            off += 1;
        }
    }
    for mat in [&mut seg.v, &mut seg.m] {
        for row in mat.iter_mut() {
            for x in row.iter_mut() {
                *x = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
                off += 4;
            }
        }
    }
    seg.validate()?;
    Ok(seg)
}

pub fn write_pgseg(path: &Path, seg: &DrumSegment) -> Result<(), GridError> {
    std::fs::write(path, pgseg_to_bytes(seg)).map_err(|e| io_error(path, e))
}

/// Read a segment; its source id is the file stem.
pub fn read_pgseg(path: &Path) -> Result<DrumSegment, GridError> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    pgseg_from_bytes(&bytes, &id)
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> GridError {
    GridError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_with(events: &[(u64, u8, u8)]) -> MidiSequence {
        MidiSequence {
            events: events
                .iter()
                .map(|&(t, p, v)| MidiNoteEvent { onset_ticks: t, pitch: p, velocity: v, channel: 9 })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn velocity_mapping() {
        assert_eq!(velocity_to_unit(127).unwrap(), 1.0);
        assert_eq!(velocity_to_unit(0).unwrap(), 0.0);
        // 64/127 as an exact rational, compared in f64
        let exact = 64.0f64 / 127.0;
        assert!((velocity_to_unit(64).unwrap() as f64 - exact).abs() < 1e-7);
        assert!((velocity_to_unit(64).unwrap() - 0.50394).abs() < 1e-5);
        assert!(velocity_to_unit(128).is_err());
        assert!(velocity_to_unit(-1).is_err());
    }

    #[test]
    fn microtiming_mapping() {
        assert_eq!(ticks_to_microtiming(60).unwrap(), 1.0);
        assert_eq!(ticks_to_microtiming(0).unwrap(), 0.0);
        assert_eq!(ticks_to_microtiming(-30).unwrap(), -0.5);
        assert!(ticks_to_microtiming(-60).is_err());
        assert!(ticks_to_microtiming(61).is_err());
    }

    #[test]
    fn snapping_examples() {
        let g = quantize_to_grid(&seq_with(&[(130, 36, 100), (480, 38, 90), (60, 42, 80)])).unwrap();
        assert_eq!(g.steps, 16);
        assert_eq!(g.n[1][0], 1);
        assert_eq!(g.v[1][0], 100.0 / 127.0);
        assert_eq!(g.m[1][0], (10.0f64 / 60.0) as f32);
        assert_eq!(g.n[4][1], 1);
        assert_eq!(g.m[4][1], 0.0);
        assert_eq!(g.n[0][2], 1);
        assert_eq!(g.m[0][2], 1.0);
    }

    #[test]
    fn duplicate_hits_keep_loudest() {
        let g = quantize_to_grid(&seq_with(&[(0, 36, 50), (10, 35, 90), (20, 36, 70)])).unwrap();
        assert_eq!(g.v[0][0], 90.0 / 127.0);
        assert_eq!(g.m[0][0], (10.0f64 / 60.0) as f32);
    }

    #[test]
    fn non_four_four_rejected() {
        let mut s = seq_with(&[(0, 36, 100)]);
        s.time_signature = TimeSignature { numerator: 3, denominator: 4 };
        assert!(matches!(quantize_to_grid(&s), Err(GridError::NotFourFour(_))));
    }

    #[test]
    fn track_length_rounds_up_to_whole_bars() {
        let g = quantize_to_grid(&seq_with(&[(120 * 17, 36, 100)])).unwrap();
        assert_eq!(g.steps, 32);
        let g = quantize_to_grid(&seq_with(&[])).unwrap();
        assert_eq!(g.steps, 0);
        assert!(matches!(segment(&g, "x", None), Err(GridError::TooShort(0))));
    }

    fn numbered(steps: usize) -> FullGrid {
        let mut g = FullGrid::zeros(steps);
        for t in 0..steps {
            g.n[t][0] = 1;
            g.v[t][0] = t as f32 / steps as f32;
        }
        g
    }

    #[test]
    fn sliding_windows() {
        let g = numbered(64);
        let segs = segment(&g, "a", Some(Genre::Funk)).unwrap();
        assert_eq!(segs.len(), 3);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.v[0][0], g.v[16 * k][0]);
            assert_eq!(s.genre, Some(Genre::Funk));
        }
    }

    #[test]
    fn one_bar_is_tiled() {
        let g = numbered(16);
        let segs = segment(&g, "a", None).unwrap();
        assert_eq!(segs.len(), 1);
        for t in 0..16 {
            assert_eq!(segs[0].v[t], segs[0].v[t + 16]);
            assert_eq!(segs[0].v[t][0], g.v[t][0]);
        }
    }

    #[test]
    fn two_bars_is_identity() {
        let g = numbered(32);
        let segs = segment(&g, "a", None).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].v.to_vec(), g.v);
        assert_eq!(segs[0].n.to_vec(), g.n);
    }

    #[test]
    fn export_examples() {
        let mut seg = DrumSegment::empty("x");
        assert!(segment_to_midi(&seg, 100.0).events.is_empty());
        seg.set_hit(0, DrumClass::Kick, 1.0, 1.0);
        let midi = segment_to_midi(&seg, 100.0);
        assert_eq!(midi.events.len(), 1);
        assert_eq!(midi.events[0].onset_ticks, 60);
        assert_eq!(midi.events[0].velocity, 127);
        assert_eq!(midi.events[0].pitch, 35);
        assert_eq!(midi.tempo_us_per_quarter, 600_000);
    }

    #[test]
    fn export_clamps_unrepresentable_offsets() {
        let mut seg = DrumSegment::empty("x");
        seg.set_hit(0, DrumClass::Snare, 0.0, -0.5);
        seg.set_hit(3, DrumClass::Snare, 0.5, -0.999);
        let midi = segment_to_midi(&seg, 100.0);
        assert_eq!(midi.events[0].onset_ticks, 0);
        assert_eq!(midi.events[0].velocity, 1);
        assert_eq!(midi.events[1].onset_ticks, 360 - 59);
    }

    #[test]
    fn genre_parsing() {
        assert_eq!("hip hop".parse::<Genre>().unwrap(), Genre::Hiphop);
        assert_eq!("Hip-Hop".parse::<Genre>().unwrap(), Genre::Hiphop);
        assert_eq!("hiphop".parse::<Genre>().unwrap(), Genre::Hiphop);
        assert_eq!("JAZZ".parse::<Genre>().unwrap(), Genre::Jazz);
        assert!("polka".parse::<Genre>().is_err());
        for g in Genre::ALL {
            assert_eq!(g.name().parse::<Genre>().unwrap(), g);
            assert_eq!(g.one_hot().iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn pgseg_layout() {
        let mut seg = DrumSegment::empty("s");
        seg.genre = Some(Genre::Blues);
        seg.set_hit(2, DrumClass::Ride, 0.25, -0.5);
        let bytes = pgseg_to_bytes(&seg);
        assert_eq!(bytes.len(), PGSEG_LEN);
        assert_eq!(&bytes[..11], &[b'P', b'G', b'S', b'G', 1, 0, 32, 0, 7, 0, 4]);
        assert_eq!(bytes[11 + 2 * 7 + 4], 1);
        assert_eq!(pgseg_from_bytes(&bytes, "s").unwrap(), seg);
        assert!(pgseg_from_bytes(&bytes[..100], "s").is_err());
        let mut bad = bytes.clone();
        bad[10] = 9;
        assert!(pgseg_from_bytes(&bad, "s").is_err());
    }
}
