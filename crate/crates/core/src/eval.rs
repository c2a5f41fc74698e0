//! Reconstruction and control metrics: per-step note F1, per-metrical-position
//! KL distances, MSE, genre accuracy with confusion, and codebook usage.

use std::fmt::Write as _;
use std::path::Path;

use crate::grid::{DrumSegment, Genre, CLASSES, STEPS};

pub const KL_BINS: usize = 50;
pub const KL_EPSILON: f64 = 1e-6;
pub const METRICAL_POSITIONS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and reference counts differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no metrical position has onsets in both sets")]
    NoOnsets,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn check_len(pred: usize, truth: usize) -> Result<(), EvalError> {
    if pred != truth {
        return Err(EvalError::LengthMismatch { pred, truth });
    }
    Ok(())
}

/// F1 of one step row, `None` when both rows are empty.
pub fn step_f1(pred: &[u8; CLASSES], truth: &[u8; CLASSES]) -> Option<f64> {
    let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean per-step F1 over all non-empty steps of all segment pairs. When
/// every step of every pair is empty on both sides the score is 1.
pub fn note_f1(pred: &[DrumSegment], truth: &[DrumSegment]) -> Result<f64, EvalError> {
    check_len(pred.len(), truth.len())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for s in 0..STEPS {
            if let Some(f) = step_f1(&p.n[s], &t.n[s]) {
                sum += f;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 1.0 } else { sum / count as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Velocity,
    Microtiming,
}

impl ValueKind {
    pub fn range(self) -> (f64, f64) {
        match self {
            ValueKind::Velocity => (0.0, 1.0),
            ValueKind::Microtiming => (-1.0, 1.0),
        }
    }

    fn matrix(self, seg: &DrumSegment) -> &[[f32; CLASSES]; STEPS] {
        match self {
            ValueKind::Velocity => &seg.v,
            ValueKind::Microtiming => &seg.m,
        }
    }
}

/// Bin of `x` among `KL_BINS` equal bins over the kind's range; the upper
/// edge belongs to the last bin.
pub fn bin_index(x: f64, kind: ValueKind) -> usize {
    let (lo, hi) = kind.range();
    let b = ((x - lo) / (hi - lo) * KL_BINS as f64).floor();
    (b.max(0.0) as usize).min(KL_BINS - 1)
}

/// Normalized histogram with `KL_EPSILON` added to every bin, renormalized.
pub fn smoothed_histogram(values: &[f64], kind: ValueKind) -> Vec<f64> {
    let mut h = vec![0.0; KL_BINS];
    for &x in values {
        h[bin_index(x, kind)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    let z = 1.0 + KL_BINS as f64 * KL_EPSILON;
    h.iter().map(|&c| (c / n + KL_EPSILON) / z).collect()
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Onset-cell values pooled by metrical position (step mod 4).
pub fn pooled_values(segs: &[DrumSegment], kind: ValueKind) -> [Vec<f64>; METRICAL_POSITIONS] {
    let mut pools: [Vec<f64>; METRICAL_POSITIONS] = Default::default();
    for seg in segs {
        let vals = kind.matrix(seg);
        for t in 0..STEPS {
            for i in 0..CLASSES {
                if seg.n[t][i] == 1 {
                    pools[t % METRICAL_POSITIONS].push(vals[t][i] as f64);
                }
            }
        }
    }
    pools
}

/// `KL(true || predicted)` per metrical position; `None` where either pool is empty.
pub fn metrical_kl_positions(pred: &[DrumSegment], truth: &[DrumSegment], kind: ValueKind) -> [Option<f64>; METRICAL_POSITIONS] {
    let (pp, tp) = (pooled_values(pred, kind), pooled_values(truth, kind));
    std::array::from_fn(|k| {
        if pp[k].is_empty() || tp[k].is_empty() {
            None
        } else {
            Some(kl_divergence(&smoothed_histogram(&tp[k], kind), &smoothed_histogram(&pp[k], kind)))
        }
    })
}

/// Mean of the per-position KL values over positions with onsets on both sides.
pub fn metrical_kl(pred: &[DrumSegment], truth: &[DrumSegment], kind: ValueKind) -> Result<f64, EvalError> {
    check_len(pred.len(), truth.len())?;
    let vals: Vec<f64> = metrical_kl_positions(pred, truth, kind).into_iter().flatten().collect();
    if vals.is_empty() {
        return Err(EvalError::NoOnsets);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean squared error over every cell of every segment.
pub fn masked_mse(pred: &[DrumSegment], truth: &[DrumSegment], kind: ValueKind) -> Result<f64, EvalError> {
    check_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let (a, b) = (kind.matrix(p), kind.matrix(t));
        for s in 0..STEPS {
            for i in 0..CLASSES {
                sum += ((a[s][i] - b[s][i]) as f64).powi(2);
            }
        }
    }
    Ok(sum / (pred.len() * STEPS * CLASSES) as f64)
}

/// Mean squared error over the reference's onset cells only.
pub fn onset_mse(pred: &[DrumSegment], truth: &[DrumSegment], kind: ValueKind) -> Result<f64, EvalError> {
    check_len(pred.len(), truth.len())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (a, b) = (kind.matrix(p), kind.matrix(t));
        for s in 0..STEPS {
            for i in 0..CLASSES {
                if t.n[s][i] == 1 {
                    sum += ((a[s][i] - b[s][i]) as f64).powi(2);
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub type Confusion = [[usize; Genre::COUNT]; Genre::COUNT];

#[derive(Clone, Debug, PartialEq)]
pub struct GenreEval {
    pub accuracy: f64,
    /// Rows are true genres, columns predicted ones.
    pub confusion: Confusion,
}

pub fn genre_eval(predicted: &[Genre], truth: &[Genre]) -> Result<GenreEval, EvalError> {
    check_len(predicted.len(), truth.len())?;
    let mut confusion = [[0; Genre::COUNT]; Genre::COUNT];
    let mut correct = 0;
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t.index()][p.index()] += 1;
        correct += (p == t) as usize;
    }
    let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
    Ok(GenreEval { accuracy, confusion })
}

/// Raw code counts: `counts[k][g]`.
pub fn codebook_counts(sequences: &[(Vec<usize>, Genre)], codebook_size: usize) -> Vec<[usize; Genre::COUNT]> {
    let mut counts = vec![[0; Genre::COUNT]; codebook_size];
    for (codes, g) in sequences {
        for &c in codes {
            if c < codebook_size {
                counts[c][g.index()] += 1;
            }
        }
    }
    counts
}

/// Code histogram normalized per genre column; columns without any code stay zero.
pub fn codebook_usage(sequences: &[(Vec<usize>, Genre)], codebook_size: usize) -> Vec<[f64; Genre::COUNT]> {
    let counts = codebook_counts(sequences, codebook_size);
    let mut totals = [0usize; Genre::COUNT];
    for row in &counts {
        for (t, &c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    counts
        .iter()
        .map(|row| std::array::from_fn(|g| if totals[g] == 0 { 0.0 } else { row[g] as f64 / totals[g] as f64 }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub note_f1: f64,
    pub vel_kl: f64,
    pub vel_mse: f64,
    pub mt_kl: f64,
    pub mt_mse: f64,
    pub genre: Option<GenreEval>,
    pub codebook_hist: Option<Vec<[usize; Genre::COUNT]>>,
}

impl MetricReport {
    /// Reconstruction metrics of `pred` against `truth`. A KL with no
    /// onsets on either side is reported as 0.
    pub fn reconstruction(pred: &[DrumSegment], truth: &[DrumSegment]) -> Result<Self, EvalError> {
        let kl = |kind| match metrical_kl(pred, truth, kind) {
            Err(EvalError::NoOnsets) => Ok(0.0),
            other => other,
        };
        Ok(Self {
            note_f1: note_f1(pred, truth)?,
            vel_kl: kl(ValueKind::Velocity)?,
            vel_mse: masked_mse(pred, truth, ValueKind::Velocity)?,
            mt_kl: kl(ValueKind::Microtiming)?,
            mt_mse: masked_mse(pred, truth, ValueKind::Microtiming)?,
            genre: None,
            codebook_hist: None,
        })
    }

    pub fn metrics_tsv(&self) -> String {
        let acc = self.genre.as_ref().map_or_else(|| "NA".to_string(), |g| format!("{:.6}", g.accuracy));
        format!(
            "note_f1\tvel_kl\tvel_mse\tmt_kl\tmt_mse\tgenre_acc\n{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            self.note_f1, self.vel_kl, self.vel_mse, self.mt_kl, self.mt_mse, acc
        )
    }

    pub fn confusion_tsv(&self) -> Option<String> {
        let g = self.genre.as_ref()?;
        let mut s = String::from("true\\predicted");
        for genre in Genre::ALL {
            let _ = write!(s, "\t{genre}");
        }
        s.push('\n');
        for genre in Genre::ALL {
            s.push_str(genre.name());
            for c in g.confusion[genre.index()] {
                let _ = write!(s, "\t{c}");
            }
            s.push('\n');
        }
        Some(s)
    }

    /// Per-genre normalized code histogram, one row per code.
    pub fn codebook_tsv(&self) -> Option<String> {
        let counts = self.codebook_hist.as_ref()?;
        let mut totals = [0usize; Genre::COUNT];
        for row in counts {
            for (t, &c) in totals.iter_mut().zip(row) {
                *t += c;
            }
        }
        let mut s = String::from("code");
        for genre in Genre::ALL {
            let _ = write!(s, "\t{genre}");
        }
        s.push('\n');
        for (k, row) in counts.iter().enumerate() {
            let _ = write!(s, "{k}");
            for g in 0..Genre::COUNT {
                let v = if totals[g] == 0 { 0.0 } else { row[g] as f64 / totals[g] as f64 };
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        Some(s)
    }

    /// Write `metrics.tsv` and, when present, `confusion.tsv` and `codebook.tsv`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |p: &Path, e: std::io::Error| EvalError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut files = vec![("metrics.tsv", self.metrics_tsv())];
        files.extend(self.confusion_tsv().map(|s| ("confusion.tsv", s)));
        files.extend(self.codebook_tsv().map(|s| ("codebook.tsv", s)));
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_seg(rng: &mut Rng, density: f64) -> DrumSegment {
        let mut s = DrumSegment::empty("r");
        for t in 0..STEPS {
            for i in 0..CLASSES {
                if rng.bernoulli(density) {
                    s.n[t][i] = 1;
                    s.v[t][i] = rng.uniform_range(0.01, 1.0) as f32;
                    s.m[t][i] = rng.uniform_range(-0.99, 0.99) as f32;
                }
            }
        }
        s
    }

    #[test]
    fn identical_nonempty_f1_is_one() {
        let mut rng = Rng::new(1);
        let segs: Vec<_> = (0..5).map(|_| random_seg(&mut rng, 0.3)).collect();
        assert_eq!(note_f1(&segs, &segs).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_f1_is_zero() {
        let mut a = DrumSegment::empty("a");
        let mut b = DrumSegment::empty("b");
        a.n[0][0] = 1;
        b.n[0][1] = 1;
        a.n[5][2] = 1;
        b.n[6][2] = 1;
        assert_eq!(note_f1(&[a], &[b]).unwrap(), 0.0);
    }

    #[test]
    fn row_f1_hand_computed() {
        let pred = [1, 1, 1, 0, 0, 0, 0];
        let truth = [1, 1, 0, 1, 0, 0, 0];
        // TP = 2, FP = 1, FN = 1: 2·2 / (2·2 + 1 + 1)
        assert!((step_f1(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(step_f1(&[0; 7], &[0; 7]), None);
    }

    #[test]
    fn empty_rows_are_skipped() {
        let mut a = DrumSegment::empty("a");
        a.n[3][0] = 1;
        let b = a.clone();
        assert_eq!(note_f1(&[a], &[b]).unwrap(), 1.0);
        let e = DrumSegment::empty("e");
        assert_eq!(note_f1(&[e.clone()], &[e]).unwrap(), 1.0);
    }

    #[test]
    fn kl_of_identical_sets_is_zero() {
        let mut rng = Rng::new(2);
        let segs: Vec<_> = (0..8).map(|_| random_seg(&mut rng, 0.3)).collect();
        for kind in [ValueKind::Velocity, ValueKind::Microtiming] {
            assert!(metrical_kl(&segs, &segs, kind).unwrap().abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_of_degenerate_histograms_matches_closed_form() {
        // every onset velocity of the reference in bin 10, every predicted one in bin 40
        let mut t = DrumSegment::empty("t");
        let mut p = DrumSegment::empty("p");
        for s in 0..4 {
            t.set_hit(s, crate::midi_io::DrumClass::Kick, 10.5 / 50.0, 0.0);
            p.set_hit(s, crate::midi_io::DrumClass::Kick, 40.5 / 50.0, 0.0);
        }
        let z = 1.0 + 50.0 * KL_EPSILON;
        let hi = (1.0 + KL_EPSILON) / z;
        let lo = KL_EPSILON / z;
        // the reference puts `hi` in bin 10 and `lo` everywhere else, the prediction mirrors it at bin 40
        let expected = hi * (hi / lo).ln() + lo * (lo / hi).ln();
        let got = metrical_kl(&[p], &[t], ValueKind::Velocity).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn kl_mean_over_positions() {
        let mut rng = Rng::new(5);
        let a: Vec<_> = (0..6).map(|_| random_seg(&mut rng, 0.3)).collect();
        let b: Vec<_> = (0..6).map(|_| random_seg(&mut rng, 0.3)).collect();
        let per = metrical_kl_positions(&a, &b, ValueKind::Microtiming);
        let mean = per.iter().map(|x| x.unwrap()).sum::<f64>() / 4.0;
        assert!((metrical_kl(&a, &b, ValueKind::Microtiming).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn kl_without_onsets_is_error() {
        let e = DrumSegment::empty("e");
        assert!(matches!(
            metrical_kl(&[e.clone()], &[e], ValueKind::Velocity),
            Err(EvalError::NoOnsets)
        ));
    }

    #[test]
    fn mse_identity_and_offset() {
        let mut rng = Rng::new(6);
        let a: Vec<_> = (0..3).map(|_| random_seg(&mut rng, 0.3)).collect();
        assert_eq!(masked_mse(&a, &a, ValueKind::Velocity).unwrap(), 0.0);
        let mut x = DrumSegment::empty("x");
        let mut y = DrumSegment::empty("y");
        for t in 0..STEPS {
            for i in 0..CLASSES {
                x.v[t][i] = 0.5;
                y.v[t][i] = 0.4;
            }
        }
        // 0.4f32 is not exactly 0.4, so allow f32 representation error
        assert!((masked_mse(&[x], &[y], ValueKind::Velocity).unwrap() - 0.01).abs() < 1e-7);
    }

    #[test]
    fn mse_matches_reverse_order_recount() {
        let mut rng = Rng::new(7);
        let a: Vec<_> = (0..9).map(|_| random_seg(&mut rng, 0.4)).collect();
        let b: Vec<_> = (0..9).map(|_| random_seg(&mut rng, 0.4)).collect();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for k in (0..9).rev() {
            for i in (0..CLASSES).rev() {
                for t in (0..STEPS).rev() {
                    sum += (a[k].m[t][i] as f64 - b[k].m[t][i] as f64).powi(2);
                    n += 1;
                }
            }
        }
        let got = masked_mse(&a, &b, ValueKind::Microtiming).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-6);
    }

    #[test]
    fn echo_classifier_is_perfect() {
        let truth: Vec<Genre> = (0..60).map(|i| Genre::ALL[i % 6]).collect();
        let ev = genre_eval(&truth, &truth).unwrap();
        assert_eq!(ev.accuracy, 1.0);
        for (r, row) in ev.confusion.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                assert_eq!(x, if r == c { 10 } else { 0 });
            }
        }
    }

    #[test]
    fn uniform_random_classifier_near_one_sixth() {
        let mut rng = Rng::new(8);
        let truth: Vec<Genre> = (0..2000).map(|_| Genre::ALL[rng.below(6)]).collect();
        let pred: Vec<Genre> = (0..2000).map(|_| Genre::ALL[rng.below(6)]).collect();
        let ev = genre_eval(&pred, &truth).unwrap();
        assert!((ev.accuracy - 1.0 / 6.0).abs() < 0.05, "{}", ev.accuracy);
        for g in Genre::ALL {
            let count = truth.iter().filter(|&&t| t == g).count();
            assert_eq!(ev.confusion[g.index()].iter().sum::<usize>(), count);
        }
    }

    #[test]
    fn single_code_usage_is_one_hot() {
        let seqs = vec![(vec![3; 8], Genre::Funk), (vec![3; 8], Genre::Rock)];
        let u = codebook_usage(&seqs, 64);
        for (k, row) in u.iter().enumerate() {
            let want = if k == 3 { 1.0 } else { 0.0 };
            assert_eq!(row[Genre::Funk.index()], want);
            assert_eq!(row[Genre::Rock.index()], want);
            assert_eq!(row[Genre::Jazz.index()], 0.0);
        }
    }

    #[test]
    fn usage_matches_independent_tally() {
        let mut rng = Rng::new(9);
        let seqs: Vec<(Vec<usize>, Genre)> = (0..50)
            .map(|_| ((0..8).map(|_| rng.below(64)).collect(), Genre::ALL[rng.below(6)]))
            .collect();
        let u = codebook_usage(&seqs, 64);
        for g in Genre::ALL {
            let codes: Vec<usize> = seqs.iter().filter(|s| s.1 == g).flat_map(|s| s.0.clone()).collect();
            if codes.is_empty() {
                continue;
            }
            let col: f64 = u.iter().map(|r| r[g.index()]).sum();
            assert!((col - 1.0).abs() < 1e-12);
            for k in 0..64 {
                let c = codes.iter().filter(|&&x| x == k).count() as f64 / codes.len() as f64;
                assert!((u[k][g.index()] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_reconstruction_report() {
        let mut rng = Rng::new(10);
        let segs: Vec<_> = (0..10).map(|_| random_seg(&mut rng, 0.2)).collect();
        let r = MetricReport::reconstruction(&segs, &segs).unwrap();
        assert_eq!(r.note_f1, 1.0);
        assert!(r.vel_kl.abs() <= 1e-9 && r.mt_kl.abs() <= 1e-9);
        assert_eq!((r.vel_mse, r.mt_mse), (0.0, 0.0));
    }

    fn perm_strategy() -> impl Strategy<Value = (u64, Vec<usize>)> {
        (any::<u64>(), Just((0..6).collect::<Vec<usize>>()).prop_shuffle())
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant((seed, perm) in perm_strategy()) {
            let mut rng = Rng::new(seed);
            let a: Vec<_> = (0..6).map(|_| random_seg(&mut rng, 0.3)).collect();
            let b: Vec<_> = (0..6).map(|_| random_seg(&mut rng, 0.3)).collect();
            let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
            let pb: Vec<_> = perm.iter().map(|&i| b[i].clone()).collect();
            let r1 = MetricReport::reconstruction(&a, &b).unwrap();
            let r2 = MetricReport::reconstruction(&pa, &pb).unwrap();
            prop_assert!((r1.note_f1 - r2.note_f1).abs() < 1e-12);
            prop_assert!((r1.vel_kl - r2.vel_kl).abs() < 1e-9);
            prop_assert!((r1.mt_kl - r2.mt_kl).abs() < 1e-9);
            prop_assert!((r1.vel_mse - r2.vel_mse).abs() < 1e-12);
        }

        #[test]
        fn kl_is_non_negative(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a: Vec<_> = (0..3).map(|_| random_seg(&mut rng, 0.3)).collect();
            let b: Vec<_> = (0..3).map(|_| random_seg(&mut rng, 0.3)).collect();
            for kind in [ValueKind::Velocity, ValueKind::Microtiming] {
                prop_assert!(metrical_kl(&a, &b, kind).unwrap() >= -1e-12);
            }
        }

        #[test]
        fn f1_in_unit_interval_and_monotone(seed in any::<u64>(), t in 0usize..STEPS, i in 0usize..CLASSES) {
            let mut rng = Rng::new(seed);
            let truth = random_seg(&mut rng, 0.3);
            let mut pred = random_seg(&mut rng, 0.3);
            let before = note_f1(&[pred.clone()], &[truth.clone()]).unwrap();
            prop_assert!((0.0..=1.0).contains(&before));
            if pred.n[t][i] != truth.n[t][i] {
                pred.n[t][i] = truth.n[t][i];
                let after = note_f1(&[pred], &[truth]).unwrap();
                prop_assert!(after >= before - 1e-12, "{before} -> {after}");
            }
        }
    }
}
