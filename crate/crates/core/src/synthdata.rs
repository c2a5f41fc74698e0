//! Procedural drum corpus. Each segment is laid out as a skeleton (kick,
//! backbeat snare, cymbal ostinato) and then decorated with ghost notes,
//! a velocity contour and microtiming.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetError, Manifest, ManifestRow};
use crate::grid::{self, DrumSegment, Genre, STEPS, STEPS_PER_BAR};
use crate::midi_io::DrumClass;
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CymbalRate {
    #[serde(rename = "8th")]
    Eighth,
    #[serde(rename = "16th")]
    Sixteenth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityContour {
    Flat,
    OffbeatAccent,
    Crescendo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub genre: Genre,
    pub cymbal_rate: CymbalRate,
    pub backbeat_velocity: f64,
    pub ghost_rate: f64,
    /// Microtiming of the off-beat 16ths ("e" and "a").
    pub swing_push: f64,
    pub velocity_contour: VelocityContour,
    /// Spread of the per-step timing offset shared by all notes on a step.
    #[serde(default = "default_jitter")]
    pub timing_jitter: f64,
}

fn default_jitter() -> f64 {
    0.05
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("style {index}: {message}")]
    InvalidSpec { index: usize, message: String },
    #[error("per_style must be at least 1")]
    EmptyRequest,
    #[error("style file: {0}")]
    Parse(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Grid(#[from] grid::GridError),
}

impl StyleSpec {
    pub fn validate(&self, index: usize) -> Result<(), SynthError> {
        let bad = |message: &str| {
            Err(SynthError::InvalidSpec {
                index,
                message: message.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.ghost_rate) {
            return bad("ghost_rate must lie in [0, 1]");
        }
        if !(self.backbeat_velocity > 0.0 && self.backbeat_velocity <= 1.0) {
            return bad("backbeat_velocity must lie in (0, 1]");
        }
        if !(self.swing_push > -1.0 && self.swing_push <= 1.0) {
            return bad("swing_push must lie in (-1, 1]");
        }
        if !(0.0..=1.0).contains(&self.timing_jitter) {
            return bad("timing_jitter must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleFile {
    style: Vec<StyleSpec>,
}

/// Parse a TOML file made of `[[style]]` tables.
pub fn parse_specs(text: &str) -> Result<Vec<StyleSpec>, SynthError> {
    let file: StyleFile = toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
    for (i, s) in file.style.iter().enumerate() {
        s.validate(i)?;
    }
    Ok(file.style)
}

/// Two styles that share a 16th hi-hat skeleton but differ in ghost notes,
/// accents and timing feel.
pub fn two_genre_specs() -> Vec<StyleSpec> {
    vec![
        StyleSpec {
            genre: Genre::Funk,
            cymbal_rate: CymbalRate::Sixteenth,
            backbeat_velocity: 0.9,
            ghost_rate: 0.45,
            swing_push: 0.4,
            velocity_contour: VelocityContour::OffbeatAccent,
            timing_jitter: 0.15,
        },
        StyleSpec {
            genre: Genre::Rock,
            cymbal_rate: CymbalRate::Sixteenth,
            backbeat_velocity: 0.8,
            ghost_rate: 0.0,
            swing_push: -0.2,
            velocity_contour: VelocityContour::Crescendo,
            timing_jitter: 0.15,
        },
    ]
}

const KICK_PATTERNS: [&[usize]; 5] = [
    &[0, 8],
    &[0, 6, 8],
    &[0, 10],
    &[0, 3, 8, 11],
    &[0, 7, 10],
];

fn cymbal_velocity(contour: VelocityContour, t: usize) -> f64 {
    let pos = t % STEPS_PER_BAR;
    match contour {
        VelocityContour::Flat => 0.6,
        VelocityContour::OffbeatAccent => match pos % 4 {
            0 => 0.4,
            2 => 0.9,
            _ => 0.55,
        },
        VelocityContour::Crescendo => 0.3 + 0.65 * pos as f64 / (STEPS_PER_BAR - 1) as f64,
    }
}

fn lattice_velocity(v: f64) -> f32 {
    ((v * 127.0).round().clamp(1.0, 127.0) / 127.0) as f32
}

fn lattice_timing(m: f64) -> f32 {
    ((m * 60.0).round().clamp(-59.0, 60.0) / 60.0) as f32
}

fn generate_one(spec: &StyleSpec, rng: &mut Rng, source_id: String) -> DrumSegment {
    let mut seg = DrumSegment::empty(source_id);
    seg.genre = Some(spec.genre);
    let kicks = KICK_PATTERNS[rng.below(KICK_PATTERNS.len())];
    let backbeat = (spec.backbeat_velocity + 0.05 * rng.normal()).clamp(0.5, 1.0);

    // Per-step velocity (before lattice snapping) and class presence.
    let stride = match spec.cymbal_rate {
        CymbalRate::Sixteenth => 1,
        CymbalRate::Eighth => 2,
    };
    let mut cells: Vec<(usize, DrumClass, f64)> = Vec::new();
    for bar in 0..STEPS / STEPS_PER_BAR {
        let base = bar * STEPS_PER_BAR;
        for &k in kicks {
            cells.push((base + k, DrumClass::Kick, 0.8 + 0.08 * rng.normal()));
        }
        for beat in [4, 12] {
            cells.push((base + beat, DrumClass::Snare, backbeat));
        }
    }
    let crash = rng.bernoulli(0.25);
    for t in (0..STEPS).step_by(stride) {
        let class = if crash && t == 0 { DrumClass::Crash } else { DrumClass::HihatClosed };
        let v = cymbal_velocity(spec.velocity_contour, t) + 0.04 * rng.normal();
        cells.push((t, class, v));
    }
    for t in 0..STEPS {
        let on_backbeat = t % 8 == 4;
        let taken = cells.iter().any(|&(s, c, _)| s == t && c == DrumClass::Snare);
        if !on_backbeat && !taken && t % 2 == 1 && rng.bernoulli(spec.ghost_rate) {
            cells.push((t, DrumClass::Snare, 0.12 + 0.1 * rng.uniform()));
        }
    }
    if rng.bernoulli(0.2) {
        cells.push((STEPS - 2, DrumClass::Tom, 0.7 + 0.1 * rng.normal()));
    }

    let mut step_offset = [0.0f64; STEPS];
    for (t, off) in step_offset.iter_mut().enumerate() {
        let feel = if t % 2 == 1 { spec.swing_push } else { 0.0 };
        *off = feel + spec.timing_jitter * rng.normal();
    }
    for (t, class, v) in cells {
        let m = step_offset[t] + 0.02 * rng.normal();
        seg.set_hit(t, class, lattice_velocity(v.clamp(0.0, 1.0)), lattice_timing(m.clamp(-0.99, 1.0)));
    }
    seg
}

/// Deterministic corpus of `per_style` segments for every style, in spec order.
pub fn generate_corpus(specs: &[StyleSpec], per_style: usize, seed: u64) -> Result<Vec<DrumSegment>, SynthError> {
    if per_style == 0 {
        return Err(SynthError::EmptyRequest);
    }
    let mut out = Vec::with_capacity(specs.len() * per_style);
    for (si, spec) in specs.iter().enumerate() {
        spec.validate(si)?;
        for k in 0..per_style {
            let mut rng = Rng::stream(seed, &format!("synth.{si}.{k}"));
            out.push(generate_one(spec, &mut rng, format!("{}_{si}_{k:04}", spec.genre)));
        }
    }
    Ok(out)
}

/// Write one `.pgseg` per segment plus `manifest.tsv`, splitting by segment
/// (every synthetic segment is its own track).
pub fn write_corpus(segments: &[DrumSegment], out_dir: &Path, ratios: (f64, f64, f64), seed: u64) -> Result<Manifest, SynthError> {
    std::fs::create_dir_all(out_dir).map_err(|e| grid::io_error(out_dir, e))?;
    let splits = dataset::assign_splits(segments.len(), ratios, seed)?;
    let mut rows = Vec::with_capacity(segments.len());
    for (seg, split) in segments.iter().zip(splits) {
        let name = format!("{}.pgseg", seg.source_id);
        grid::write_pgseg(&out_dir.join(&name), seg)?;
        rows.push(ManifestRow {
            path: name,
            genre: seg.genre.unwrap_or(Genre::Rock),
            split,
            n_segments: 1,
        });
    }
    let manifest = Manifest {
        rows,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{derive_template, filter_track, FilterDecision};

    fn spec(contour: VelocityContour, ghost_rate: f64, swing: f64) -> StyleSpec {
        StyleSpec {
            genre: Genre::Funk,
            cymbal_rate: CymbalRate::Eighth,
            backbeat_velocity: 0.85,
            ghost_rate,
            swing_push: swing,
            velocity_contour: contour,
            timing_jitter: 0.05,
        }
    }

    #[test]
    fn deterministic() {
        let specs = two_genre_specs();
        assert_eq!(generate_corpus(&specs, 5, 3).unwrap(), generate_corpus(&specs, 5, 3).unwrap());
        assert_ne!(generate_corpus(&specs, 5, 3).unwrap(), generate_corpus(&specs, 5, 4).unwrap());
    }

    #[test]
    fn segments_are_valid_and_pass_filter() {
        let corpus = generate_corpus(&two_genre_specs(), 20, 1).unwrap();
        for seg in &corpus {
            seg.validate().unwrap();
            let midi = grid::segment_to_midi(seg, 100.0);
            assert_eq!(filter_track(&midi, &seg.source_id, seg.genre.unwrap()), FilterDecision::Keep);
        }
    }

    #[test]
    fn no_ghosts_means_template_keeps_snare_row() {
        let corpus = generate_corpus(&[spec(VelocityContour::Flat, 0.0, 0.0)], 20, 9).unwrap();
        for seg in &corpus {
            let tpl = derive_template(seg);
            for t in 0..STEPS {
                assert_eq!(tpl.p[t][DrumClass::Snare.index()], seg.n[t][DrumClass::Snare.index()]);
            }
        }
    }

    #[test]
    fn swing_shifts_offbeats() {
        let corpus = generate_corpus(&[spec(VelocityContour::Flat, 0.3, 0.5)], 200, 2).unwrap();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for seg in &corpus {
            for t in (1..STEPS).step_by(2) {
                for i in 0..grid::CLASSES {
                    if seg.n[t][i] == 1 {
                        sum += seg.m[t][i] as f64;
                        n += 1;
                    }
                }
            }
        }
        let mean = sum / n as f64;
        assert!((0.3..=0.7).contains(&mean), "mean offbeat microtiming {mean}");
    }

    fn velocity_curve(corpus: &[DrumSegment]) -> [f64; STEPS] {
        let mut sum = [0.0; STEPS];
        let mut cnt = [0usize; STEPS];
        for seg in corpus {
            for t in 0..STEPS {
                for c in DrumClass::CYMBALS {
                    if seg.hit(t, c) {
                        sum[t] += seg.v[t][c.index()] as f64;
                        cnt[t] += 1;
                    }
                }
            }
        }
        std::array::from_fn(|t| if cnt[t] > 0 { sum[t] / cnt[t] as f64 } else { 0.0 })
    }

    #[test]
    fn contours_are_separable() {
        let contours = [VelocityContour::Flat, VelocityContour::OffbeatAccent, VelocityContour::Crescendo];
        let curves: Vec<_> = contours
            .iter()
            .map(|&c| velocity_curve(&generate_corpus(&[spec(c, 0.2, 0.0)], 100, 5).unwrap()))
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                let gap = (0..STEPS).map(|t| (curves[a][t] - curves[b][t]).abs()).fold(0.0, f64::max);
                assert!(gap >= 0.1, "{:?} vs {:?}: {gap}", contours[a], contours[b]);
            }
        }
    }

    #[test]
    fn spec_file_parsing() {
        let text = r#"
[[style]]
genre = "hip hop"
cymbal_rate = "8th"
backbeat_velocity = 0.8
ghost_rate = 0.1
swing_push = 0.3
velocity_contour = "offbeat_accent"
"#;
        let specs = parse_specs(text).unwrap();
        assert_eq!(specs[0].genre, Genre::Hiphop);
        assert_eq!(specs[0].cymbal_rate, CymbalRate::Eighth);
        assert_eq!(specs[0].timing_jitter, 0.05);
        assert!(parse_specs(&text.replace("ghost_rate = 0.1", "ghost_rate = 1.5")).is_err());
        assert!(parse_specs(&format!("{}\nbogus = 1\n", text)).is_err());
        assert!(parse_specs(&text.replace("hip hop", "polka")).is_err());
        assert!(matches!(generate_corpus(&specs, 0, 0), Err(SynthError::EmptyRequest)));
    }
}
