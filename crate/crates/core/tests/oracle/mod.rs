//! Brute-force reference implementations used by the property and acceptance
//! suites. Written independently of the library's computation paths: vectors
//! are handled as plain `Vec<f64>` / unpacked bits and every quantity is
//! computed directly from its textbook definition.

#![allow(dead_code, clippy::manual_clamp, clippy::needless_range_loop)]

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMetric {
    Cosine,
    L2,
    Hamming,
}

pub fn distance(a: &[f64], b: &[f64], metric: OracleMetric) -> f64 {
    assert_eq!(a.len(), b.len());
    match metric {
        OracleMetric::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut cos = 0.0;
            for i in 0..a.len() {
                cos += (a[i] / na) * (b[i] / nb);
            }
            let d = 1.0 - cos;
            if d < 0.0 {
                0.0
            } else if d > 2.0 {
                2.0
            } else {
                d
            }
        }
        OracleMetric::L2 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]).powi(2);
            }
            s.sqrt()
        }
        OracleMetric::Hamming => {
            let mut n = 0;
            for i in 0..a.len() {
                if a[i] != b[i] {
                    n += 1;
                }
            }
            n as f64
        }
    }
}

/// Per-query minima via an explicit double loop.
pub fn min_profile(query: &[Vec<f64>], target: &[Vec<f64>], metric: OracleMetric) -> Vec<f64> {
    let mut out = Vec::new();
    for q in query {
        let mut best = f64::MAX;
        for t in target {
            let d = distance(q, t, metric);
            if d < best {
                best = d;
            }
        }
        out.push(best);
    }
    out
}

/// Median with an explicit selection sort; `lower` picks the lower middle of
/// an even-length list, otherwise the two middle values are averaged.
pub fn median(values: &[f64], lower: bool) -> f64 {
    let mut v = values.to_vec();
    for i in 0..v.len() {
        let mut m = i;
        for j in i + 1..v.len() {
            if v[j] < v[m] {
                m = j;
            }
        }
        v.swap(i, m);
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else if lower {
        v[n / 2 - 1]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn median_of_min(
    query: &[Vec<f64>],
    target: &[Vec<f64>],
    metric: OracleMetric,
    lower: bool,
) -> f64 {
    median(&min_profile(query, target, metric), lower)
}

/// `|got - want| <= rel * |want|`, with a 1e-12 absolute floor for values at 0.
pub fn close(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs() + 1e-12
}

/// Per-class F1 from precision and recall; `None` marks a class with no true
/// and no predicted instances.
pub fn f1_per_class(counts: &[Vec<u64>]) -> Vec<Option<f64>> {
    let n = counts.len();
    let mut out = Vec::new();
    for c in 0..n {
        let tp = counts[c][c] as f64;
        let mut actual = 0.0;
        let mut predicted = 0.0;
        for k in 0..n {
            actual += counts[c][k] as f64;
            predicted += counts[k][c] as f64;
        }
        if actual == 0.0 && predicted == 0.0 {
            out.push(None);
            continue;
        }
        if actual == 0.0 || predicted == 0.0 || tp == 0.0 {
            out.push(Some(0.0));
            continue;
        }
        let precision = tp / predicted;
        let recall = tp / actual;
        out.push(Some(2.0 * precision * recall / (precision + recall)));
    }
    out
}

pub fn macro_f1(counts: &[Vec<u64>]) -> f64 {
    let scores: Vec<f64> = f1_per_class(counts).into_iter().flatten().collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Random float matrix with entries in [-1, 1).
pub fn random_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| rng.random_range(-1.0f32..1.0) as f64)
                .collect()
        })
        .collect()
}

pub fn random_bits<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
                .collect()
        })
        .collect()
}

pub fn to_f32_rows(rows: &[Vec<f64>]) -> Vec<Vec<f32>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect()
}

pub fn to_bit_rows(rows: &[Vec<f64>]) -> Vec<Vec<u8>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| v as u8).collect())
        .collect()
}

/// Candidate order: ascending distance, ties by id.
pub fn argsort(entries: &[(String, f64)]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    // Insertion sort keeps this independent of the library's sort.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&entries[idx[j - 1]], &entries[idx[j]]);
            let swap = b.1 < a.1 || (b.1 == a.1 && b.0 < a.0);
            if !swap {
                break;
            }
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx.into_iter().map(|i| entries[i].0.clone()).collect()
}

/// Raw slide for a random corpus: vectors kept as `f64` rows so the oracle
/// never touches library types.
#[derive(Debug, Clone)]
pub struct RawSlide {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: String,
    pub rows: Vec<Vec<f64>>,
}

/// Random corpus of up to `max_wsis` slides with up to `max_patches` rows each.
/// Barcode corpora use `{0, 1}` entries.
pub fn random_corpus<R: Rng>(
    rng: &mut R,
    max_wsis: usize,
    max_patches: usize,
    dim: usize,
    barcode: bool,
) -> Vec<RawSlide> {
    let n = rng.random_range(2..=max_wsis);
    let n_patients = rng.random_range(2..=n.min(8));
    let labels = ["alpha", "beta", "gamma"];
    let patient_label: Vec<&str> = (0..n_patients)
        .map(|_| labels[rng.random_range(0..labels.len())])
        .collect();
    (0..n)
        .map(|i| {
            let p = if i < n_patients {
                i
            } else {
                rng.random_range(0..n_patients)
            };
            let m = rng.random_range(1..=max_patches);
            let rows = if barcode {
                random_bits(rng, m, dim)
            } else {
                random_rows(rng, m, dim)
            };
            RawSlide {
                wsi_id: format!("w{i:02}"),
                patient_id: format!("p{p}"),
                label: patient_label[p].to_owned(),
                rows,
            }
        })
        .collect()
}

/// Ranked candidate ids for `query`, excluding its own patient.
pub fn rank(
    corpus: &[RawSlide],
    query: usize,
    metric: OracleMetric,
    lower: bool,
) -> Vec<(String, f64)> {
    let q = &corpus[query];
    let entries: Vec<(String, f64)> = corpus
        .iter()
        .filter(|s| s.patient_id != q.patient_id)
        .map(|s| {
            (
                s.wsi_id.clone(),
                median_of_min(&q.rows, &s.rows, metric, lower),
            )
        })
        .collect();
    let order = argsort(&entries);
    order
        .into_iter()
        .map(|id| {
            let d = entries.iter().find(|e| e.0 == id).unwrap().1;
            (id, d)
        })
        .collect()
}

/// Majority label among the first `k` labels; count ties go to the label seen
/// first.
pub fn vote(labels: &[String], k: usize) -> String {
    let top = &labels[..k.min(labels.len())];
    let mut best: Option<(&String, usize)> = None;
    for l in top {
        let count = top.iter().filter(|x| *x == l).count();
        match best {
            Some((_, c)) if c >= count => {}
            _ => best = Some((l, count)),
        }
    }
    best.unwrap().0.clone()
}
