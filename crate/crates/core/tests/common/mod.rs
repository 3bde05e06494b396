//! Brute-force retrieval oracle shared by the integration targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_core::retrieval::{evaluate_distances, EvalReport, Labels};
use reid_core::Tensor;

pub struct Instance {
    pub dist: Tensor<f64>,
    pub qid: Vec<i64>,
    pub qcam: Vec<usize>,
    pub qjunk: Vec<bool>,
    pub gid: Vec<i64>,
    pub gcam: Vec<usize>,
    pub gjunk: Vec<bool>,
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let q = rng.random_range(1..=30);
    let g = rng.random_range(1..=100);
    let ids = rng.random_range(1..=8);
    let cams = rng.random_range(1..=4);
    // Coarse distances so that ties occur.
    let dist = Tensor::from_vec(
        q,
        g,
        (0..q * g).map(|_| rng.random_range(0..20) as f64 / 10.0).collect(),
    );
    Instance {
        dist,
        qid: (0..q).map(|_| rng.random_range(0..ids)).collect(),
        qcam: (0..q).map(|_| rng.random_range(0..cams)).collect(),
        qjunk: (0..q).map(|_| rng.random_bool(0.05)).collect(),
        gid: (0..g).map(|_| rng.random_range(0..ids)).collect(),
        gcam: (0..g).map(|_| rng.random_range(0..cams)).collect(),
        gjunk: (0..g).map(|_| rng.random_bool(0.1)).collect(),
    }
}

pub struct OracleResult {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub valid: usize,
}

/// AP per query from pairwise rank counting: the rank of a kept gallery
/// entry is one plus the number of kept entries strictly ahead of it
/// (smaller distance, or equal distance and smaller index).
pub fn oracle(x: &Instance) -> Option<OracleResult> {
    let (q, g) = x.dist.shape();
    let mut sum_ap = 0.0;
    let mut valid = 0;
    let mut first_ranks = Vec::new();
    for i in 0..q {
        if x.qjunk[i] {
            continue;
        }
        let keep = |j: usize| !x.gjunk[j] && !(x.gid[j] == x.qid[i] && x.gcam[j] == x.qcam[i]);
        let d = x.dist.row(i);
        let rank = |j: usize| {
            1 + (0..g)
                .filter(|&k| keep(k) && (d[k] < d[j] || (d[k] == d[j] && k < j)))
                .count()
        };
        let mut match_ranks: Vec<usize> = (0..g).filter(|&j| keep(j) && x.gid[j] == x.qid[i]).map(rank).collect();
        if match_ranks.is_empty() {
            continue;
        }
        match_ranks.sort_unstable();
        let mut s = 0.0;
        for (n, &r) in match_ranks.iter().enumerate() {
            s += (n + 1) as f64 / r as f64;
        }
        sum_ap += s / match_ranks.len() as f64;
        valid += 1;
        first_ranks.push(match_ranks[0]);
    }
    if valid == 0 {
        return None;
    }
    let cmc = (1..=g)
        .map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / valid as f64)
        .collect();
    Some(OracleResult {
        map: sum_ap / valid as f64,
        cmc,
        valid,
    })
}

pub fn run(x: &Instance) -> reid_core::Result<EvalReport> {
    evaluate_distances(
        &x.dist,
        Labels {
            ids: &x.qid,
            cameras: &x.qcam,
            junk: &x.qjunk,
        },
        Labels {
            ids: &x.gid,
            cameras: &x.gcam,
            junk: &x.gjunk,
        },
    )
}

/// Checks the engine against the oracle on `n` random instances and
/// returns how many produced a report.
pub fn compare(n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for i in 0..n {
        let x = instance(&mut rng);
        match (run(&x), oracle(&x)) {
            (Ok(r), Some(o)) => {
                if r.map != o.map || r.cmc != o.cmc || r.n_queries != o.valid {
                    return Err(format!("instance {i}: mAP {} vs {}", r.map, o.map));
                }
                checked += 1;
            }
            (Err(_), None) => {}
            (r, o) => {
                return Err(format!(
                    "instance {i}: engine {:?} vs oracle {:?}",
                    r.map(|r| r.map),
                    o.map(|o| o.valid)
                ))
            }
        }
    }
    Ok(checked)
}
