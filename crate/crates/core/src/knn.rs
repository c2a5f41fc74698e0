//! Nearest-neighbor groove transfer over binary templates.

use crate::dataset::{derive_template, Template};
use crate::grid::{DrumSegment, CLASSES, STEPS};

pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KnnError {
    #[error("the index is empty")]
    EmptyIndex,
    #[error("k = {k} exceeds the index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("k must be positive")]
    ZeroK,
}

/// Exhaustive inner-product index of flattened templates.
#[derive(Clone, Debug, Default)]
pub struct KnnIndex {
    templates: Vec<Vec<u8>>,
    payloads: Vec<DrumSegment>,
}

fn flat(t: &Template) -> Vec<u8> {
    t.p.iter().flatten().copied().collect()
}

impl KnnIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index every segment under its derived template.
    pub fn build(segs: impl IntoIterator<Item = DrumSegment>) -> Self {
        let mut idx = Self::new();
        for s in segs {
            idx.insert(&derive_template(&s), s);
        }
        idx
    }

    pub fn insert(&mut self, template: &Template, payload: DrumSegment) {
        self.templates.push(flat(template));
        self.payloads.push(payload);
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn payload(&self, i: usize) -> &DrumSegment {
        &self.payloads[i]
    }

    pub fn score(&self, i: usize, template: &Template) -> u32 {
        self.templates[i]
            .iter()
            .zip(template.p.iter().flatten())
            .map(|(&a, &b)| (a & b) as u32)
            .sum()
    }

    /// Indices of the `k` highest inner products, best first; equal scores
    /// keep insertion order.
    pub fn query(&self, template: &Template, k: usize) -> Result<Vec<usize>, KnnError> {
        if self.is_empty() {
            return Err(KnnError::EmptyIndex);
        }
        if k == 0 {
            return Err(KnnError::ZeroK);
        }
        if k > self.len() {
            return Err(KnnError::KTooLarge { k, size: self.len() });
        }
        let mut scored: Vec<(u32, usize)> = (0..self.len()).map(|i| (self.score(i, template), i)).collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
    }

    /// Query and aggregate the neighbors' grooves.
    pub fn transfer(&self, template: &Template, k: usize) -> Result<DrumSegment, KnnError> {
        let hits = self.query(template, k)?;
        let refs: Vec<&DrumSegment> = hits.iter().map(|&i| &self.payloads[i]).collect();
        aggregate(&refs)
    }
}

/// Majority vote on notes (at least K/2 votes), elementwise means of
/// velocity and microtiming over all K neighbors, masked by the vote.
pub fn aggregate(neighbors: &[&DrumSegment]) -> Result<DrumSegment, KnnError> {
    let k = neighbors.len();
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    let mut out = DrumSegment::empty("knn");
    for t in 0..STEPS {
        for i in 0..CLASSES {
            let votes: usize = neighbors.iter().map(|s| s.n[t][i] as usize).sum();
            if 2 * votes >= k {
                let v: f64 = neighbors.iter().map(|s| s.v[t][i] as f64).sum::<f64>() / k as f64;
                let m: f64 = neighbors.iter().map(|s| s.m[t][i] as f64).sum::<f64>() / k as f64;
                out.n[t][i] = 1;
                out.v[t][i] = v as f32;
                out.m[t][i] = (m as f32).max(-1.0 + f32::EPSILON);
            }
        }
    }
    Ok(out)
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
                    s.v[t][i] = rng.uniform_range(0.05, 1.0) as f32;
                    s.m[t][i] = rng.uniform_range(-0.9, 0.9) as f32;
                }
            }
        }
        s
    }

    fn random_template(rng: &mut Rng, density: f64) -> Template {
        let mut t = Template::empty();
        for row in t.p.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.bernoulli(density) as u8;
            }
        }
        t
    }

    /// Brute-force oracle: full score list sorted with a stable sort.
    fn brute_query(templates: &[Template], q: &Template, k: usize) -> Vec<usize> {
        let mut scores: Vec<(i64, usize)> = templates
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut s = 0i64;
                for r in 0..STEPS {
                    for c in 0..CLASSES {
                        s += t.p[r][c] as i64 * q.p[r][c] as i64;
                    }
                }
                (-s, i)
            })
            .collect();
        scores.sort();
        scores.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn brute_aggregate(ns: &[&DrumSegment]) -> DrumSegment {
        let k = ns.len() as f64;
        let mut out = DrumSegment::empty("b");
        for t in 0..STEPS {
            for i in 0..CLASSES {
                let mut votes = 0.0;
                let (mut v, mut m) = (0.0f64, 0.0f64);
                for s in ns.iter().rev() {
                    votes += s.n[t][i] as f64;
                    v += s.v[t][i] as f64;
                    m += s.m[t][i] as f64;
                }
                if votes >= k / 2.0 {
                    out.n[t][i] = 1;
                    out.v[t][i] = (v / k) as f32;
                    out.m[t][i] = (m / k) as f32;
                }
            }
        }
        out
    }

    #[test]
    fn self_query_scores_popcount() {
        let mut rng = Rng::new(3);
        let tpls: Vec<Template> = (0..10).map(|_| random_template(&mut rng, 0.2)).collect();
        let mut idx = KnnIndex::new();
        for t in &tpls {
            idx.insert(t, DrumSegment::empty("x"));
        }
        let q = &tpls[4];
        assert_eq!(idx.score(4, q) as usize, q.hit_count());
        let mut single = KnnIndex::new();
        single.insert(q, DrumSegment::empty("x"));
        assert_eq!(single.query(q, 1).unwrap(), vec![0]);
    }

    #[test]
    fn own_template_is_among_top_k() {
        let mut rng = Rng::new(4);
        let tpls: Vec<Template> = (0..30).map(|_| random_template(&mut rng, 0.3)).collect();
        let mut idx = KnnIndex::new();
        for t in &tpls {
            idx.insert(t, DrumSegment::empty("x"));
        }
        let top = idx.query(&tpls[17], 20).unwrap();
        assert!(top.contains(&17) || top.iter().all(|&i| idx.score(i, &tpls[17]) >= idx.score(17, &tpls[17])));
    }

    #[test]
    fn disjoint_template_scores_zero() {
        let mut a = Template::empty();
        let mut b = Template::empty();
        a.p[0][0] = 1;
        a.p[4][1] = 1;
        b.p[2][2] = 1;
        let mut idx = KnnIndex::new();
        idx.insert(&a, DrumSegment::empty("a"));
        assert_eq!(idx.score(0, &b), 0);
    }

    #[test]
    fn k_larger_than_index_is_error() {
        let mut idx = KnnIndex::new();
        idx.insert(&Template::empty(), DrumSegment::empty("a"));
        assert_eq!(idx.query(&Template::empty(), 2), Err(KnnError::KTooLarge { k: 2, size: 1 }));
        assert_eq!(KnnIndex::new().query(&Template::empty(), 1), Err(KnnError::EmptyIndex));
    }

    #[test]
    fn majority_threshold_boundary() {
        let mut segs = Vec::new();
        for k in 0..20 {
            let mut s = DrumSegment::empty("n");
            if k < 10 {
                s.n[0][0] = 1;
                s.v[0][0] = 0.5;
            }
            if k < 9 {
                s.n[1][0] = 1;
                s.v[1][0] = 0.5;
            }
            segs.push(s);
        }
        let refs: Vec<&DrumSegment> = segs.iter().collect();
        let out = aggregate(&refs).unwrap();
        assert_eq!(out.n[0][0], 1, "10 of 20 votes is a hit");
        assert_eq!(out.n[1][0], 0, "9 of 20 votes is not");
        assert!((out.v[0][0] - 0.25).abs() < 1e-7);
        assert_eq!(out.v[1][0], 0.0);
    }

    #[test]
    fn velocity_mean_of_two() {
        let mut a = DrumSegment::empty("a");
        let mut b = DrumSegment::empty("b");
        a.set_hit(3, crate::midi_io::DrumClass::Snare, 0.2, 0.0);
        b.set_hit(3, crate::midi_io::DrumClass::Snare, 0.4, 0.0);
        let out = aggregate(&[&a, &b]).unwrap();
        assert!((out.v[3][1] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        let mut rng = Rng::new(2024);
        for _ in 0..200 {
            let size = 1 + rng.below(50);
            let density = rng.uniform_range(0.02, 0.5);
            let segs: Vec<DrumSegment> = (0..size).map(|_| random_seg(&mut rng, density)).collect();
            let tpls: Vec<Template> = (0..size).map(|_| random_template(&mut rng, density)).collect();
            let mut idx = KnnIndex::new();
            for (t, s) in tpls.iter().zip(&segs) {
                idx.insert(t, s.clone());
            }
            let q = random_template(&mut rng, density);
            let k = 1 + rng.below(size);
            let got = idx.query(&q, k).unwrap();
            assert_eq!(got, brute_query(&tpls, &q, k));
            let refs: Vec<&DrumSegment> = got.iter().map(|&i| &segs[i]).collect();
            let agg = aggregate(&refs).unwrap();
            let oracle = brute_aggregate(&refs);
            assert_eq!(agg.n, oracle.n);
            for t in 0..STEPS {
                for i in 0..CLASSES {
                    assert!((agg.v[t][i] - oracle.v[t][i]).abs() < 1e-6);
                    assert!((agg.m[t][i] - oracle.m[t][i]).abs() < 1e-6);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn aggregate_is_a_valid_segment(seed in any::<u64>(), k in 1usize..25) {
            let mut rng = Rng::new(seed);
            let segs: Vec<DrumSegment> = (0..k).map(|_| random_seg(&mut rng, 0.3)).collect();
            let refs: Vec<&DrumSegment> = segs.iter().collect();
            prop_assert!(aggregate(&refs).unwrap().validate().is_ok());
        }

        #[test]
        fn query_scores_invariant_under_permutation(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let size = 2 + rng.below(30);
            let tpls: Vec<Template> = (0..size).map(|_| random_template(&mut rng, 0.25)).collect();
            let q = random_template(&mut rng, 0.25);
            let k = 1 + rng.below(size);
            let mut perm: Vec<usize> = (0..size).collect();
            rng.shuffle(&mut perm);
            let mut a = KnnIndex::new();
            let mut b = KnnIndex::new();
            for t in &tpls { a.insert(t, DrumSegment::empty("x")); }
            for &i in &perm { b.insert(&tpls[i], DrumSegment::empty("x")); }
            let sa: Vec<u32> = a.query(&q, k).unwrap().iter().map(|&i| a.score(i, &q)).collect();
            let sb: Vec<u32> = b.query(&q, k).unwrap().iter().map(|&i| b.score(i, &q)).collect();
            prop_assert_eq!(sa, sb);
        }
    }
}
