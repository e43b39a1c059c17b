//! Case-level fold assignment by hill climbing on class-distribution entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub folds: usize,
    pub fold_of_case: BTreeMap<String, usize>,
    /// Labeled pixels per class, per fold.
    pub fold_counts: Vec<Vec<u64>>,
    /// Shannon entropy (nats) of each fold's class distribution.
    pub fold_entropy: Vec<f64>,
    pub mean_entropy: f64,
    /// Score after each accepted swap, starting with the initial split.
    #[serde(default)]
    pub accepted_scores: Vec<f64>,
}

impl SplitAssignment {
    /// Case ids in `fold`, sorted.
    pub fn cases_in(&self, fold: usize) -> Vec<&str> {
        self.fold_of_case
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(c, _)| c.as_str())
            .collect()
    }
}

/// Fold sizes for `cases` cases: every fold gets `cases / folds`, and the
/// remainder goes to fold 0.
pub fn fold_sizes(cases: usize, folds: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    if cases < folds {
        return Err(Error::InvalidInput(format!("{cases} cases cannot fill {folds} folds")));
    }
    let mut sizes = vec![cases / folds; folds];
    sizes[0] += cases % folds;
    Ok(sizes)
}

fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    -counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Average over folds of the fold's class-distribution entropy.
pub fn mean_fold_entropy(fold_counts: &[Vec<u64>]) -> f64 {
    fold_counts.iter().map(|c| entropy(c)).sum::<f64>() / fold_counts.len() as f64
}

struct State<'a> {
    counts: &'a [Vec<u64>],
    members: Vec<Vec<usize>>,
    totals: Vec<Vec<u64>>,
    entropies: Vec<f64>,
}

impl<'a> State<'a> {
    fn new(counts: &'a [Vec<u64>], members: Vec<Vec<usize>>, classes: usize) -> Self {
        let totals: Vec<Vec<u64>> = members
            .iter()
            .map(|m| {
                let mut t = vec![0u64; classes];
                for &i in m {
                    for (a, &b) in t.iter_mut().zip(&counts[i]) {
                        *a += b;
                    }
                }
                t
            })
            .collect();
        let entropies = totals.iter().map(|t| entropy(t)).collect();
        State {
            counts,
            members,
            totals,
            entropies,
        }
    }

    fn score(&self) -> f64 {
        self.entropies.iter().sum::<f64>() / self.entropies.len() as f64
    }

    fn moved(&self, fold: usize, out: usize, inn: usize) -> Vec<u64> {
        self.totals[fold]
            .iter()
            .zip(&self.counts[out])
            .zip(&self.counts[inn])
            .map(|((&t, &o), &i)| t - o + i)
            .collect()
    }
}

/// Swap-based hill climbing on per-case class counts. Stops after
/// `max_stale_iters` consecutive rejected proposals.
pub fn hill_climb_split_counts<R: Rng + ?Sized>(
    case_ids: &[String],
    counts: &[Vec<u64>],
    folds: usize,
    max_stale_iters: usize,
    rng: &mut R,
) -> Result<SplitAssignment> {
    if case_ids.len() != counts.len() {
        return Err(Error::InvalidInput(format!(
            "{} case ids for {} count rows",
            case_ids.len(),
            counts.len()
        )));
    }
    let sizes = fold_sizes(case_ids.len(), folds)?;
    let classes = counts.first().map_or(0, Vec::len);
    if counts.iter().any(|c| c.len() != classes) {
        return Err(Error::InvalidInput("ragged class-count rows".into()));
    }

    // Round-robin over a shuffled case order, skipping folds that are full.
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(rng);
    let mut members: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut f = 0;
    for i in order {
        while members[f].len() == sizes[f] {
            f = (f + 1) % folds;
        }
        members[f].push(i);
        f = (f + 1) % folds;
    }

    let mut state = State::new(counts, members, classes);
    let mut accepted = vec![state.score()];
    let mut stale = 0;
    while stale < max_stale_iters {
        let a = rng.random_range(0..folds);
        let mut b = rng.random_range(0..folds - 1);
        if b >= a {
            b += 1;
        }
        let ia = rng.random_range(0..state.members[a].len());
        let ib = rng.random_range(0..state.members[b].len());
        let (ca, cb) = (state.members[a][ia], state.members[b][ib]);
        let ta = state.moved(a, ca, cb);
        let tb = state.moved(b, cb, ca);
        let (ea, eb) = (entropy(&ta), entropy(&tb));
        let current = state.score();
        let mut trial = state.entropies.clone();
        (trial[a], trial[b]) = (ea, eb);
        // Same summation order as `score`, so the accepted log is strictly increasing.
        let proposed = trial.iter().sum::<f64>() / folds as f64;
        if proposed > current {
            state.members[a][ia] = cb;
            state.members[b][ib] = ca;
            state.totals[a] = ta;
            state.totals[b] = tb;
            state.entropies = trial;
            accepted.push(proposed);
            stale = 0;
        } else {
            stale += 1;
        }
    }

    let mut fold_of_case = BTreeMap::new();
    for (f, m) in state.members.iter().enumerate() {
        for &i in m {
            fold_of_case.insert(case_ids[i].clone(), f);
        }
    }
    let mean_entropy = state.score();
    Ok(SplitAssignment {
        folds,
        fold_of_case,
        fold_counts: state.totals,
        fold_entropy: state.entropies,
        mean_entropy,
        accepted_scores: accepted,
    })
}

/// Best of `restarts` independent climbs.
pub fn hill_climb_split_restarts<R: Rng + ?Sized>(
    case_ids: &[String],
    counts: &[Vec<u64>],
    folds: usize,
    max_stale_iters: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<SplitAssignment> {
    let mut best: Option<SplitAssignment> = None;
    for _ in 0..restarts.max(1) {
        let s = hill_climb_split_counts(case_ids, counts, folds, max_stale_iters, rng)?;
        if best.as_ref().is_none_or(|b| s.mean_entropy > b.mean_entropy) {
            best = Some(s);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn hill_climb_split<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    folds: usize,
    max_stale_iters: usize,
    rng: &mut R,
) -> Result<SplitAssignment> {
    let ids: Vec<String> = manifest.records.iter().map(|r| r.case_id.clone()).collect();
    let counts = manifest.per_case_counts()?;
    hill_climb_split_counts(&ids, &counts, folds, max_stale_iters, rng)
}
