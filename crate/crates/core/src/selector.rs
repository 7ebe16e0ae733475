//! Score-based output selection over candidate pools.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelFrontend, Waveform};
use crate::clap_lite::ClapModel;
use crate::embedding::Embedding;
use crate::error::{config_err, input_err, Result};
use crate::fad::{fit_stats, frechet_distance};

pub const DEFAULT_POOL_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Keep candidates in generation order.
    None,
    Top1,
    Threshold,
}

impl std::str::FromStr for SelectionMode {
    type Err = crate::FlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "top1" => Ok(Self::Top1),
            "threshold" => Ok(Self::Threshold),
            other => config_err(format!("unknown selection mode `{other}` (none, top1, threshold)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    TunedText,
    TextVariant,
    AudioEmbeddingPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub pool_size: usize,
    pub thresholds: BTreeMap<String, f64>,
    pub mode: SelectionMode,
    pub target_source: TargetSource,
    pub seed: u64,
    pub backfill: bool,
}

impl SelectionPolicy {
    pub fn new(mode: SelectionMode, pool_size: usize) -> Self {
        Self {
            pool_size,
            thresholds: BTreeMap::new(),
            mode,
            target_source: TargetSource::TunedText,
            seed: 0,
            backfill: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return config_err("selection pool size must be at least 1");
        }
        for (c, t) in &self.thresholds {
            if !(-1.0..=1.0).contains(t) {
                return config_err(format!("threshold {t} for class {c} outside [-1, 1]"));
            }
        }
        Ok(())
    }

    /// `theta_c`, defaulting to the vacuous threshold -1.
    pub fn threshold(&self, class: &str) -> f64 {
        self.thresholds.get(class).copied().unwrap_or(-1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub clip_id: String,
    pub audio: Option<Waveform>,
    pub embedding: Embedding,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub class: String,
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    /// Scores every candidate against `target` by cosine similarity.
    pub fn scored(class: &str, items: Vec<(String, Option<Waveform>, Embedding)>, target: &Embedding) -> Result<Self> {
        let candidates = items
            .into_iter()
            .map(|(clip_id, audio, embedding)| {
                let embedding = embedding.normalized();
                let score = embedding.cosine(target)?;
                Ok(Candidate {
                    clip_id,
                    audio,
                    embedding,
                    score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            class: class.to_string(),
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.clip_id == clip_id)
    }
}

/// `cos(f_audio(mel(w)), target)`.
pub fn score_candidate(w: &Waveform, target: &Embedding, encoder: &ClapModel, frontend: &MelFrontend) -> Result<f64> {
    encoder.encode_audio(&frontend.mel(w)?)?.cosine(target)
}

/// Indices ordered by descending score, ties by ascending clip id.
fn ranked(pool: &CandidatePool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (&pool.candidates[a], &pool.candidates[b]);
        cb.score.total_cmp(&ca.score).then_with(|| ca.clip_id.cmp(&cb.clip_id))
    });
    idx
}

/// Candidates passing `theta` before any backfill, in pool order.
pub fn passing(pool: &CandidatePool, theta: f64) -> Vec<String> {
    pool.candidates
        .iter()
        .filter(|c| c.score >= theta)
        .map(|c| c.clip_id.clone())
        .collect()
}

/// Top-1 mode: the `want` best candidates. Threshold mode: every candidate with
/// `score >= theta_c` in pool order, backfilled by descending score up to `want`.
/// No-selection mode: the first `want` candidates.
pub fn select(pool: &CandidatePool, policy: &SelectionPolicy, want: usize) -> Result<Vec<String>> {
    if pool.is_empty() {
        return input_err(format!("empty candidate pool for class {}", pool.class));
    }
    match policy.mode {
        SelectionMode::None => Ok(pool.candidates.iter().take(want).map(|c| c.clip_id.clone()).collect()),
        SelectionMode::Top1 => {
            if pool.len() < want {
                return input_err(format!("pool of {} cannot supply {want} clips", pool.len()));
            }
            Ok(ranked(pool)
                .into_iter()
                .take(want)
                .map(|i| pool.candidates[i].clip_id.clone())
                .collect())
        }
        SelectionMode::Threshold => {
            let mut chosen = passing(pool, policy.threshold(&pool.class));
            if policy.backfill && chosen.len() < want {
                for i in ranked(pool) {
                    if chosen.len() >= want {
                        break;
                    }
                    let id = &pool.candidates[i].clip_id;
                    if !chosen.contains(id) {
                        chosen.push(id.clone());
                    }
                }
            }
            Ok(chosen)
        }
    }
}

/// One target drawn uniformly with `seed`.
pub fn draw_target(targets: &[Embedding], seed: u64) -> Result<&Embedding> {
    if targets.is_empty() {
        return input_err("multi-target selection needs at least one target");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(&targets[rng.random_range(0..targets.len())])
}

/// Rescores the pool against one target drawn uniformly with `seed`, then selects.
pub fn multi_target_select(
    pool: &CandidatePool,
    targets: &[Embedding],
    policy: &SelectionPolicy,
    want: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let target = draw_target(targets, seed)?;
    let mut rescored = pool.clone();
    for c in &mut rescored.candidates {
        c.score = c.embedding.cosine(target)?;
    }
    select(&rescored, policy, want)
}

/// Mean cosine of each embedding to every other one.
pub fn mean_intra_cosine(embeddings: &[Embedding]) -> Result<Vec<f64>> {
    let n = embeddings.len();
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = embeddings[i].cosine(&embeddings[j])?;
            sums[i] += c;
            sums[j] += c;
        }
    }
    Ok(sums.into_iter().map(|s| s / (n.max(2) - 1) as f64).collect())
}

/// The `top_m` class embeddings with the highest mean intra-class cosine, as
/// `(index, embedding)` in rank order.
pub fn build_audio_target_pool(class_embeddings: &[Embedding], top_m: usize) -> Result<Vec<(usize, Embedding)>> {
    if top_m == 0 || top_m > class_embeddings.len() {
        return input_err(format!(
            "audio target pool of {top_m} requested from {} class clips",
            class_embeddings.len()
        ));
    }
    let scores = mean_intra_cosine(class_embeddings)?;
    let mut idx: Vec<usize> = (0..class_embeddings.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .take(top_m)
        .map(|i| (i, class_embeddings[i].normalized()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub class: String,
    pub theta: f64,
    /// Requested clips whose group had at least one candidate passing `theta`.
    pub n_selected: usize,
    pub fad: Option<f64>,
}

pub fn default_grid() -> Vec<f64> {
    std::iter::once(-1.0).chain((0..10).map(|i| i as f64 / 10.0)).collect()
}

/// The clip picked from one requested clip's group: the first passing candidate in
/// pool order, else the best-scoring one.
pub fn pick_from_group(group: &CandidatePool, theta: f64) -> Result<(String, bool)> {
    let policy = SelectionPolicy {
        thresholds: BTreeMap::from([(group.class.clone(), theta)]),
        ..SelectionPolicy::new(SelectionMode::Threshold, group.len().max(1))
    };
    let passed = !passing(group, theta).is_empty();
    let chosen = select(group, &policy, 1)?;
    Ok((chosen[0].clone(), passed))
}

/// Evaluates every grid point on one class's groups and returns the FAD-minimizing
/// threshold (ties resolved towards the smaller threshold) with the per-point rows.
/// Points where fewer than two groups pass are skipped.
pub fn calibrate_class(
    groups: &[CandidatePool],
    reference: &[Embedding],
    grid: &[f64],
) -> Result<(f64, Vec<CalibrationRow>)> {
    if grid.is_empty() {
        return config_err("calibration grid is empty");
    }
    let class = groups.first().map(|g| g.class.clone()).unwrap_or_default();
    let ref_stats = fit_stats(reference)?;
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &theta in &sorted {
        let mut chosen = Vec::with_capacity(groups.len());
        let mut n_passed = 0;
        for g in groups {
            let (id, passed) = pick_from_group(g, theta)?;
            n_passed += passed as usize;
            chosen.push(g.get(&id).expect("picked id comes from the group").embedding.clone());
        }
        let fad = if n_passed >= 2 && chosen.len() >= 2 {
            Some(frechet_distance(&fit_stats(&chosen)?, &ref_stats)?)
        } else {
            log::info!("calibration {class}: theta {theta} passes {n_passed} groups, skipped");
            None
        };
        if let Some(f) = fad {
            if best.is_none_or(|(_, bf)| f < bf) {
                best = Some((theta, f));
            }
        }
        rows.push(CalibrationRow {
            class: class.clone(),
            theta,
            n_selected: n_passed,
            fad,
        });
    }
    let theta = best.map(|(t, _)| t).unwrap_or(-1.0);
    Ok((theta, rows))
}

pub fn calibration_csv(rows: &[CalibrationRow]) -> String {
    let mut s = String::from("class,theta,n_selected,fad\n");
    for r in rows {
        let f = r.fad.map(|v| format!("{v:.6}")).unwrap_or_else(|| "skipped".into());
        let _ = writeln!(s, "{},{:.2},{},{}", r.class, r.theta, r.n_selected, f);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pool_from_scores(scores: &[f64]) -> CandidatePool {
        CandidatePool {
            class: "Rain".into(),
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Candidate {
                    clip_id: format!("c{i:02}"),
                    audio: None,
                    embedding: Embedding::unit(vec![1.0, 0.0]),
                    score: s,
                })
                .collect(),
        }
    }

    fn threshold_policy(theta: f64) -> SelectionPolicy {
        SelectionPolicy {
            thresholds: BTreeMap::from([("Rain".to_string(), theta)]),
            ..SelectionPolicy::new(SelectionMode::Threshold, 10)
        }
    }

    #[test]
    fn degenerate_pools() {
        let p = pool_from_scores(&[-0.9]);
        assert_eq!(
            select(&p, &SelectionPolicy::new(SelectionMode::Top1, 1), 1).unwrap(),
            vec!["c00"]
        );
        let p = pool_from_scores(&[0.3, -0.5, 0.9, 0.1]);
        assert_eq!(select(&p, &threshold_policy(-1.0), 1).unwrap().len(), 4);
        assert!(select(&pool_from_scores(&[]), &threshold_policy(0.0), 1).is_err());
        assert!(select(&p, &SelectionPolicy::new(SelectionMode::Top1, 4), 5).is_err());
        assert_eq!(
            select(&p, &SelectionPolicy::new(SelectionMode::None, 4), 2).unwrap(),
            vec!["c00", "c01"]
        );
    }

    #[test]
    fn threshold_backfills_by_score() {
        let p = pool_from_scores(&[0.1, 0.8, 0.5, 0.95, 0.2]);
        assert_eq!(select(&p, &threshold_policy(0.7), 1).unwrap(), vec!["c01", "c03"]);
        assert_eq!(
            select(&p, &threshold_policy(0.9), 3).unwrap(),
            vec!["c03", "c01", "c02"]
        );
        let no_fill = SelectionPolicy {
            backfill: false,
            ..threshold_policy(0.99)
        };
        assert!(select(&p, &no_fill, 2).unwrap().is_empty());
        assert_eq!(pick_from_group(&p, 0.7).unwrap(), ("c01".to_string(), true));
        assert_eq!(pick_from_group(&p, 0.99).unwrap(), ("c03".to_string(), false));
    }

    #[test]
    fn top1_matches_sort_oracle_on_random_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.random_range(1..=10);
            // Coarse scores force ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-10..=10) as f64) / 10.0).collect();
            let want = rng.random_range(1..=n);
            let p = pool_from_scores(&scores);
            let got = select(&p, &SelectionPolicy::new(SelectionMode::Top1, n), want).unwrap();
            // Oracle: for every pair, a candidate beats another iff higher score or equal score and smaller id.
            let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
            let mut oracle: Vec<usize> = Vec::new();
            for _ in 0..want {
                let best = (0..n)
                    .filter(|i| !oracle.contains(i))
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(j) if beats(j, i) => Some(j),
                        _ => Some(i),
                    });
                oracle.push(best.unwrap());
            }
            let oracle: Vec<String> = oracle.iter().map(|i| format!("c{i:02}")).collect();
            assert_eq!(got, oracle, "{scores:?} want {want}");
        }
    }

    #[test]
    fn audio_target_pool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let embs: Vec<Embedding> = (0..9)
            .map(|_| Embedding::unit((0..4).map(|_| rng.sample::<f32, _>(StandardNormal) + 0.5).collect()))
            .collect();
        let pool = build_audio_target_pool(&embs, 3).unwrap();
        let brute: Vec<f64> = (0..9)
            .map(|i| {
                let s: f64 = (0..9)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let (a, b) = (embs[i].to_f64(), embs[j].to_f64());
                        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                        dot / (na * nb)
                    })
                    .sum();
                s / 8.0
            })
            .collect();
        let argmax = (0..9).fold(0, |b, i| if brute[i] > brute[b] { i } else { b });
        assert_eq!(pool[0].0, argmax);
        assert_eq!(build_audio_target_pool(&embs, 9).unwrap().len(), 9);
        assert!(build_audio_target_pool(&embs, 10).is_err());
    }

    #[test]
    fn multi_target_is_seeded_and_degenerates_to_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let items: Vec<(String, Option<Waveform>, Embedding)> = (0..8)
            .map(|i| {
                (
                    format!("k{i}"),
                    None,
                    Embedding::unit((0..3).map(|_| rng.sample(StandardNormal)).collect()),
                )
            })
            .collect();
        let target = Embedding::unit(vec![1.0, 0.2, -0.3]);
        let pool = CandidatePool::scored("Rain", items, &target).unwrap();
        let policy = SelectionPolicy::new(SelectionMode::Top1, 8);
        assert_eq!(
            multi_target_select(&pool, std::slice::from_ref(&target), &policy, 2, 17).unwrap(),
            select(&pool, &policy, 2).unwrap()
        );
        let targets: Vec<Embedding> = (0..4).map(|i| Embedding::unit(vec![i as f32, 1.0, 0.5])).collect();
        let a = multi_target_select(&pool, &targets, &policy, 1, 3).unwrap();
        assert_eq!(a, multi_target_select(&pool, &targets, &policy, 1, 3).unwrap());
        assert!(multi_target_select(&pool, &[], &policy, 1, 3).is_err());
    }

    #[test]
    fn calibration_grid_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut groups = Vec::new();
        for g in 0..12 {
            let items: Vec<(String, Option<Waveform>, Embedding)> = (0..4)
                .map(|i| {
                    (
                        format!("g{g}_{i}"),
                        None,
                        Embedding::unit((0..3).map(|_| rng.sample(StandardNormal)).collect()),
                    )
                })
                .collect();
            groups.push(CandidatePool::scored("Rain", items, &Embedding::unit(vec![1.0, 0.0, 0.0])).unwrap());
        }
        let reference: Vec<Embedding> = (0..20)
            .map(|_| {
                Embedding::unit(vec![
                    1.0,
                    0.3 * rng.sample::<f32, _>(StandardNormal),
                    0.3 * rng.sample::<f32, _>(StandardNormal),
                ])
            })
            .collect();
        let (theta, rows) = calibrate_class(&groups, &reference, &[-1.0]).unwrap();
        assert_eq!((theta, rows.len()), (-1.0, 1));
        let (theta, rows) = calibrate_class(&groups, &reference, &default_grid()).unwrap();
        let at = |t: f64| rows.iter().find(|r| r.theta == t).unwrap().fad;
        assert!(at(theta).unwrap() <= at(-1.0).unwrap());
        assert_eq!(calibrate_class(&groups, &reference, &default_grid()).unwrap().1, rows);
        assert!(calibration_csv(&rows).starts_with("class,theta,n_selected,fad\n"));
        assert!(calibrate_class(&groups, &reference, &[]).is_err());
    }

    proptest! {
        #[test]
        fn selection_invariants(scores in prop::collection::vec(-1f64..=1.0, 1..12), t1 in -1f64..=1.0, t2 in -1f64..=1.0, want in 1usize..6, c in 0.01f32..100.0) {
            let p = pool_from_scores(&scores);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let big = passing(&p, lo);
            let small = passing(&p, hi);
            prop_assert!(small.iter().all(|id| big.contains(id)));
            for policy in [threshold_policy(lo), SelectionPolicy::new(SelectionMode::Top1, scores.len())] {
                let w = want.min(scores.len());
                let got = select(&p, &policy, w).unwrap();
                let mut dedup = got.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(dedup.len(), got.len());
                prop_assert!(got.iter().all(|id| p.get(id).is_some()));
                prop_assert!(got.len() >= w);
                prop_assert_eq!(&got, &select(&p, &policy, w).unwrap());
            }
            // Cosine scores are invariant to rescaling the target.
            let items: Vec<(String, Option<Waveform>, Embedding)> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("c{i:02}"), None, Embedding::raw(vec![*s as f32, 1.0, (i as f32).sin()])))
                .collect();
            let target = Embedding::raw(vec![0.7, -0.2, 0.4]);
            let a = CandidatePool::scored("Rain", items.clone(), &target).unwrap();
            let b = CandidatePool::scored("Rain", items, &target.scaled(c)).unwrap();
            let policy = SelectionPolicy::new(SelectionMode::Top1, scores.len());
            let w = want.min(scores.len());
            prop_assert_eq!(select(&a, &policy, w).unwrap(), select(&b, &policy, w).unwrap());
        }
    }
}
