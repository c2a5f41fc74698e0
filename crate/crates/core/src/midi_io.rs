//! Standard MIDI File reading and writing, and the General MIDI percussion
//! map onto seven drum classes.
//!
//! Only what a drum grid needs is kept: note-on events (velocity > 0) from
//! every track, the first tempo and the first time signature. Timing is
//! rescaled to 480 ticks per quarter note on read.

use std::fmt;

/// Normalized resolution: one 16th note spans 120 ticks.
pub const PPQ: u16 = 480;
pub const DEFAULT_TEMPO_US: u32 = 500_000;
pub const NUM_CLASSES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DrumClass {
    Kick = 0,
    Snare = 1,
    HihatClosed = 2,
    HihatOpen = 3,
    Ride = 4,
    Crash = 5,
    Tom = 6,
}

impl DrumClass {
    pub const ALL: [DrumClass; NUM_CLASSES] = [
        DrumClass::Kick,
        DrumClass::Snare,
        DrumClass::HihatClosed,
        DrumClass::HihatOpen,
        DrumClass::Ride,
        DrumClass::Crash,
        DrumClass::Tom,
    ];

    pub const CYMBALS: [DrumClass; 4] = [
        DrumClass::HihatClosed,
        DrumClass::HihatOpen,
        DrumClass::Ride,
        DrumClass::Crash,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_cymbal(self) -> bool {
        matches!(self, Self::HihatClosed | Self::HihatOpen | Self::Ride | Self::Crash)
    }

    /// GM pitches grouped into this class; the first is used on export.
    pub fn pitches(self) -> &'static [u8] {
        match self {
            Self::Kick => &[35, 36],
            Self::Snare => &[37, 38, 40],
            Self::HihatClosed => &[42, 44],
            Self::HihatOpen => &[46],
            Self::Ride => &[51, 53, 59],
            Self::Crash => &[49, 52, 55, 57],
            Self::Tom => &[41, 43, 45, 47, 48, 50],
        }
    }

    pub fn canonical_pitch(self) -> u8 {
        self.pitches()[0]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kick => "kick",
            Self::Snare => "snare",
            Self::HihatClosed => "hihat_closed",
            Self::HihatOpen => "hihat_open",
            Self::Ride => "ride",
            Self::Crash => "crash",
            Self::Tom => "tom",
        }
    }
}

/// Drum class of a GM percussion pitch; unmapped pitches give `None`.
pub fn map_percussion(pitch: u8) -> Option<DrumClass> {
    DrumClass::ALL
        .into_iter()
        .find(|c| c.pitches().contains(&pitch))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MidiNoteEvent {
    pub onset_ticks: u64,
    pub pitch: u8,
    pub velocity: u8,
    pub channel: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub const FOUR_FOUR: TimeSignature = TimeSignature {
        numerator: 4,
        denominator: 4,
    };
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self::FOUR_FOUR
    }
}

impl fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MidiSequence {
    pub ppq: u16,
    pub tempo_us_per_quarter: u32,
    pub time_signature: TimeSignature,
    pub events: Vec<MidiNoteEvent>,
}

impl Default for MidiSequence {
    fn default() -> Self {
        Self {
            ppq: PPQ,
            tempo_us_per_quarter: DEFAULT_TEMPO_US,
            time_signature: TimeSignature::FOUR_FOUR,
            events: Vec::new(),
        }
    }
}

impl MidiSequence {
    pub fn validate(&self) -> Result<(), MidiError> {
        let invalid = |m: String| Err(MidiError::InvalidSequence(m));
        if self.ppq == 0 || self.ppq > 0x7fff {
            return invalid(format!("ppq {} out of range", self.ppq));
        }
        if self.tempo_us_per_quarter == 0 || self.tempo_us_per_quarter >= 1 << 24 {
            return invalid(format!("tempo {} out of range", self.tempo_us_per_quarter));
        }
        let d = self.time_signature.denominator;
        if d == 0 || !d.is_power_of_two() || self.time_signature.numerator == 0 {
            return invalid(format!("time signature {}", self.time_signature));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.velocity == 0 || e.velocity > 127 || e.pitch > 127 || e.channel > 15 {
                return invalid(format!("event {i} has out-of-range fields: {e:?}"));
            }
            if i > 0 && self.events[i - 1].onset_ticks > e.onset_ticks {
                return invalid(format!("event {i} is out of order"));
            }
        }
        Ok(())
    }

    /// Keep only events on the given channel.
    pub fn filter_channel(&mut self, channel: u8) {
        self.events.retain(|e| e.channel == channel);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MidiError {
    #[error("unexpected end of data at byte {offset}")]
    UnexpectedEof { offset: usize },
    #[error("malformed chunk at byte {offset}: {reason}")]
    BadChunk { offset: usize, reason: String },
    #[error("unsupported MIDI file format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteTiming,
    #[error("data byte without running status at byte {offset}")]
    RunningStatus { offset: usize },
    #[error("invalid event at byte {offset}: {reason}")]
    BadEvent { offset: usize, reason: String },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, MidiError> {
        if self.pos >= self.end {
            return Err(MidiError::UnexpectedEof { offset: self.pos });
        }
        self.pos += 1;
        Ok(self.bytes[self.pos - 1])
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if n > self.end - self.pos {
            return Err(MidiError::UnexpectedEof { offset: self.end });
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(MidiError::BadEvent {
            offset: start,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }

    fn data_byte(&mut self) -> Result<u8, MidiError> {
        let at = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(MidiError::BadEvent {
                offset: at,
                reason: format!("expected data byte, found status {b:#04x}"),
            });
        }
        Ok(b)
    }
}

struct TrackScan {
    notes: Vec<MidiNoteEvent>,
    tempo: Option<(u64, u32)>,
    time_signature: Option<(u64, TimeSignature)>,
}

fn scan_track(bytes: &[u8], start: usize, end: usize) -> Result<TrackScan, MidiError> {
    let mut c = Cursor { bytes, pos: start, end };
    let mut out = TrackScan {
        notes: Vec::new(),
        tempo: None,
        time_signature: None,
    };
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while c.pos < c.end {
        tick += c.vlq()? as u64;
        let at = c.pos;
        let first = c.u8()?;
        let (status, first_data) = if first & 0x80 == 0 {
            match running {
                Some(s) => (s, Some(first)),
                None => return Err(MidiError::RunningStatus { offset: at }),
            }
        } else {
            (first, None)
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let d1 = match first_data {
                    Some(d) => d,
                    None => c.data_byte()?,
                };
                let kind = status & 0xf0;
                let d2 = if kind == 0xc0 || kind == 0xd0 { 0 } else { c.data_byte()? };
                if kind == 0x90 && d2 > 0 {
                    out.notes.push(MidiNoteEvent {
                        onset_ticks: tick,
                        pitch: d1,
                        velocity: d2,
                        channel: status & 0x0f,
                    });
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = c.vlq()? as usize;
                c.take(len)?;
            }
            0xff => {
                running = None;
                let kind = c.u8()?;
                let len = c.vlq()? as usize;
                let data = c.take(len)?;
                match kind {
                    0x2f => break,
                    0x51 if out.tempo.is_none() => {
                        if len != 3 {
                            return Err(MidiError::BadEvent { offset: at, reason: "tempo meta length".into() });
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        out.tempo = Some((tick, us));
                    }
                    0x58 if out.time_signature.is_none() => {
                        if len < 2 || data[1] > 7 {
                            return Err(MidiError::BadEvent { offset: at, reason: "time signature meta".into() });
                        }
                        out.time_signature = Some((
                            tick,
                            TimeSignature {
                                numerator: data[0],
                                denominator: 1 << data[1],
                            },
                        ));
                    }
                    _ => {}
                }
            }
            _ => {
                return Err(MidiError::BadEvent {
                    offset: at,
                    reason: format!("status {status:#04x} not allowed in a file"),
                })
            }
        }
    }
    Ok(out)
}

/// Rescale a tick count from `ppq` to [`PPQ`], rounding half away from zero.
pub fn rescale_ticks(ticks: u64, ppq: u16) -> u64 {
    let num = ticks as u128 * PPQ as u128 * 2 + ppq as u128;
    (num / (2 * ppq as u128)) as u64
}

/// Parse a format-0 or format-1 Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<MidiSequence, MidiError> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    let id = c.take(4)?;
    if id != b"MThd" {
        return Err(MidiError::BadChunk {
            offset: 0,
            reason: "missing MThd header".into(),
        });
    }
    let header_len = c.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::BadChunk {
            offset: 4,
            reason: format!("header length {header_len}"),
        });
    }
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(MidiError::UnexpectedEof { offset: bytes.len() })?;
    let format = c.u16()?;
    let ntracks = c.u16()?;
    let division = c.u16()?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteTiming);
    }
    if division == 0 {
        return Err(MidiError::BadChunk {
            offset: 12,
            reason: "zero ticks per quarter".into(),
        });
    }
    c.pos = header_end;

    let mut notes: Vec<MidiNoteEvent> = Vec::new();
    let mut tempo: Option<(u64, u32)> = None;
    let mut time_signature: Option<(u64, TimeSignature)> = None;
    let mut found = 0;
    while found < ntracks as usize && c.pos < bytes.len() {
        let chunk_at = c.pos;
        let id = c.take(4)?;
        let len = c.u32()? as usize;
        let start = c.pos;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or(MidiError::BadChunk {
                offset: chunk_at,
                reason: format!("chunk length {len} exceeds file"),
            })?;
        c.pos = end;
        if id != b"MTrk" {
            continue;
        }
        found += 1;
        let scan = scan_track(bytes, start, end)?;
        notes.extend(scan.notes);
        if let Some(t) = scan.tempo {
            if tempo.is_none_or(|(tick, _)| t.0 < tick) {
                tempo = Some(t);
            }
        }
        if let Some(t) = scan.time_signature {
            if time_signature.is_none_or(|(tick, _)| t.0 < tick) {
                time_signature = Some(t);
            }
        }
    }
    if found < ntracks as usize {
        return Err(MidiError::BadChunk {
            offset: c.pos,
            reason: format!("expected {ntracks} tracks, found {found}"),
        });
    }
    if division != PPQ {
        for n in &mut notes {
            n.onset_ticks = rescale_ticks(n.onset_ticks, division);
        }
    }
    notes.sort_by_key(|n| n.onset_ticks);
    Ok(MidiSequence {
        ppq: PPQ,
        tempo_us_per_quarter: tempo.map_or(DEFAULT_TEMPO_US, |t| t.1),
        time_signature: time_signature.map_or(TimeSignature::FOUR_FOUR, |t| t.1),
        events: notes,
    })
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Length of emitted notes in ticks (a 32nd note at 480 PPQ).
const NOTE_LENGTH: u64 = 60;

/// Write a format-0 Standard MIDI File.
pub fn write_smf(seq: &MidiSequence) -> Result<Vec<u8>, MidiError> {
    seq.validate()?;
    // (tick, order, status, data1, data2); note-offs sort before note-ons at
    // the same tick so a re-struck note is not cut short.
    let mut timeline: Vec<(u64, u8, usize, [u8; 3])> = Vec::with_capacity(seq.events.len() * 2);
    for (i, e) in seq.events.iter().enumerate() {
        let next_same = seq.events[i + 1..]
            .iter()
            .find(|n| n.pitch == e.pitch && n.channel == e.channel)
            .map(|n| n.onset_ticks - e.onset_ticks);
        let length = match next_same {
            Some(gap) if gap > 0 => gap.min(NOTE_LENGTH),
            _ => NOTE_LENGTH,
        };
        timeline.push((e.onset_ticks, 1, i, [0x90 | e.channel, e.pitch, e.velocity]));
        timeline.push((e.onset_ticks + length, 0, i, [0x80 | e.channel, e.pitch, 0]));
    }
    timeline.sort_by_key(|&(tick, order, i, _)| (tick, order, i));

    let mut track = Vec::new();
    let tempo = seq.tempo_us_per_quarter.to_be_bytes();
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03, tempo[1], tempo[2], tempo[3]]);
    let ts = seq.time_signature;
    track.extend_from_slice(&[
        0x00,
        0xff,
        0x58,
        0x04,
        ts.numerator,
        ts.denominator.trailing_zeros() as u8,
        24,
        8,
    ]);
    let mut last = 0u64;
    for (tick, _, _, msg) in timeline {
        let delta = u32::try_from(tick - last)
            .ok()
            .filter(|&d| d < 1 << 28)
            .ok_or_else(|| MidiError::InvalidSequence(format!("delta time too large at tick {tick}")))?;
        push_vlq(&mut track, delta);
        track.extend_from_slice(&msg);
        last = tick;
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&seq.ppq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percussion_map_examples() {
        assert_eq!(map_percussion(36), Some(DrumClass::Kick));
        assert_eq!(map_percussion(38), Some(DrumClass::Snare));
        assert_eq!(map_percussion(39), None);
        assert_eq!(map_percussion(42), Some(DrumClass::HihatClosed));
        assert_eq!(map_percussion(46), Some(DrumClass::HihatOpen));
        assert_eq!(map_percussion(59), Some(DrumClass::Ride));
        assert_eq!(map_percussion(57), Some(DrumClass::Crash));
        assert_eq!(map_percussion(50), Some(DrumClass::Tom));
    }

    #[test]
    fn percussion_map_is_total_and_consistent() {
        let mut mapped = 0;
        for p in 0..=127u8 {
            if let Some(c) = map_percussion(p) {
                mapped += 1;
                assert!(c.pitches().contains(&p));
            }
        }
        assert_eq!(mapped, 21);
        for c in DrumClass::ALL {
            assert_eq!(map_percussion(c.canonical_pitch()), Some(c));
            assert_eq!(DrumClass::from_index(c.index()), Some(c));
        }
    }

    #[test]
    fn rescale_rounds_half_away_from_zero() {
        assert_eq!(rescale_ticks(120, 240), 240);
        assert_eq!(rescale_ticks(1, 960), 1); // 0.5 -> 1
        assert_eq!(rescale_ticks(1, 961), 0); // 0.4995 -> 0
        assert_eq!(rescale_ticks(7, 96), 35);
    }

    #[test]
    fn vlq_encoding() {
        for (v, bytes) in [
            (0u32, vec![0x00]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x3fff, vec![0xff, 0x7f]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, v);
            assert_eq!(out, bytes);
            let mut c = Cursor { bytes: &out, pos: 0, end: out.len() };
            assert_eq!(c.vlq().unwrap(), v);
        }
    }

    #[test]
    fn empty_sequence_writes_header_and_end_of_track() {
        let seq = MidiSequence::default();
        let bytes = write_smf(&seq).unwrap();
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0xff, 0x2f, 0x00]);
        assert_eq!(parse_smf(&bytes).unwrap(), seq);
    }

    #[test]
    fn empty_track_list_parses_to_empty_sequence() {
        let mut bytes = b"MThd".to_vec();
        bytes.extend_from_slice(&6u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 1, 0, 0, 0, 96]);
        let seq = parse_smf(&bytes).unwrap();
        assert!(seq.events.is_empty());
        assert_eq!(seq.ppq, 480);
        assert_eq!(seq.time_signature, TimeSignature::FOUR_FOUR);
    }

    fn file_with_track(division: u16, track: &[u8]) -> Vec<u8> {
        let mut bytes = b"MThd".to_vec();
        bytes.extend_from_slice(&6u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 1]);
        bytes.extend_from_slice(&division.to_be_bytes());
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        bytes
    }

    #[test]
    fn running_status_and_rescaling() {
        // ppq 240: note at 0, running-status note at 120, note-on vel 0 (off).
        let track = [
            0x00, 0x99, 36, 100, //
            0x78, 38, 90, //
            0x10, 38, 0, //
            0x00, 0xff, 0x2f, 0x00,
        ];
        let seq = parse_smf(&file_with_track(240, &track)).unwrap();
        assert_eq!(seq.events.len(), 2);
        assert_eq!(seq.events[1].onset_ticks, 240);
        assert_eq!(seq.events[1].pitch, 38);
        assert_eq!(seq.events[1].channel, 9);
    }

    #[test]
    fn data_byte_without_status_is_an_error() {
        let track = [0x00, 36, 100, 0x00, 0xff, 0x2f, 0x00];
        let err = parse_smf(&file_with_track(480, &track)).unwrap_err();
        assert_eq!(err, MidiError::RunningStatus { offset: 23 });
    }

    #[test]
    fn meta_cancels_running_status() {
        let track = [
            0x00, 0x99, 36, 100, //
            0x00, 0xff, 0x01, 0x01, b'x', //
            0x00, 38, 90, //
            0x00, 0xff, 0x2f, 0x00,
        ];
        assert!(matches!(
            parse_smf(&file_with_track(480, &track)),
            Err(MidiError::RunningStatus { .. })
        ));
    }

    #[test]
    fn malformed_headers_report_offsets() {
        assert!(matches!(parse_smf(b"RIFF"), Err(MidiError::BadChunk { offset: 0, .. })));
        let mut bytes = file_with_track(480, &[0x00, 0xff, 0x2f, 0x00]);
        let n = bytes.len();
        bytes[n - 5] = 0x40; // inflate track length
        assert!(matches!(parse_smf(&bytes), Err(MidiError::BadChunk { offset: 14, .. })));
        let track = [0x00, 0x99, 36];
        assert!(matches!(
            parse_smf(&file_with_track(480, &track)),
            Err(MidiError::UnexpectedEof { .. })
        ));
    }

    #[test]
    fn smpte_and_format_two_rejected() {
        assert_eq!(parse_smf(&file_with_track(0xe728, &[])), Err(MidiError::SmpteTiming));
        let mut bytes = file_with_track(480, &[]);
        bytes[9] = 2;
        assert_eq!(parse_smf(&bytes), Err(MidiError::UnsupportedFormat(2)));
    }

    #[test]
    fn first_tempo_and_time_signature_win() {
        let seq = MidiSequence {
            tempo_us_per_quarter: 600_000,
            time_signature: TimeSignature { numerator: 3, denominator: 4 },
            events: vec![MidiNoteEvent { onset_ticks: 10, pitch: 36, velocity: 90, channel: 9 }],
            ..Default::default()
        };
        let bytes = write_smf(&seq).unwrap();
        let back = parse_smf(&bytes).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn invalid_sequences_rejected_by_writer() {
        let mut seq = MidiSequence::default();
        seq.events.push(MidiNoteEvent { onset_ticks: 5, pitch: 36, velocity: 0, channel: 9 });
        assert!(write_smf(&seq).is_err());
        seq.events[0].velocity = 10;
        seq.events.push(MidiNoteEvent { onset_ticks: 1, pitch: 36, velocity: 10, channel: 9 });
        assert!(write_smf(&seq).is_err());
    }
}
