//! Shared fixtures: random graph-stage instances and independent oracles.
#![allow(dead_code)]

use ddgnet::base_model::{AttentionSequence, FeatureSequence, Modality};
use ddgnet::evaluator::{temporal_iou, Proposal};
use ddgnet::graph::{DdgHyper, GcnIds};
use ddgnet::numerics::{Matrix, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub fr: FeatureSequence,
    pub ff: FeatureSequence,
    pub ar: AttentionSequence,
    pub af: AttentionSequence,
    pub params: ParamSet,
    pub gcn: GcnIds,
    pub hyper: DdgHyper,
}

/// Features drawn around a few shared directions so that similarities
/// straddle the filter threshold; attention values spread over all three
/// partition cells.
pub fn random_instance(seed: u64, t: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = rng.random_range(1..=3);
    let stream = |rng: &mut ChaCha8Rng| {
        let centers: Vec<Vec<f64>> = (0..clusters)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let which: Vec<usize> = (0..t).map(|_| rng.random_range(0..clusters)).collect();
        let spread = rng.random_range(0.05..0.6);
        Matrix::from_fn(d, t, |r, c| centers[which[c]][r] + spread * rng.random_range(-1.0..1.0))
    };
    let fr = FeatureSequence::new(Modality::Rgb, stream(&mut rng)).unwrap();
    let ff = FeatureSequence::new(Modality::Flow, stream(&mut rng)).unwrap();
    let att = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..t).map(|_| rng.random_range(0.02..0.98)).collect();
        AttentionSequence::from_slice(&v).unwrap()
    };
    let ar = att(&mut rng);
    let af = att(&mut rng);
    let hyper = DdgHyper {
        eta: rng.random_range(0.5..0.7),
        theta: rng.random_range(-0.2..0.9),
        top_k: rng.random_range(1..=t.max(1)),
        tau: rng.random_range(0.2..2.0),
        layers: rng.random_range(1..=3),
    };
    let mut params = ParamSet::new();
    let gcn = GcnIds::register(&mut params, d, hyper.layers, &mut rng);
    Instance {
        fr,
        ff,
        ar,
        af,
        params,
        gcn,
        hyper,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    A,
    B,
    M,
}

fn cosine_matrix(f: &Matrix) -> Vec<Vec<f64>> {
    let (d, t) = f.shape();
    let norm = |j: usize| (0..d).map(|r| f[(r, j)] * f[(r, j)]).sum::<f64>().sqrt();
    (0..t)
        .map(|i| {
            (0..t)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        (0..d).map(|r| f[(r, i)] * f[(r, j)]).sum::<f64>() / (norm(i) * norm(j))
                    }
                })
                .collect()
        })
        .collect()
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn dense_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|p| a[i][p] * b[p][j]).sum()).collect())
        .collect()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub struct OracleOut {
    pub rgb: Vec<Vec<f64>>,
    pub flow: Vec<Vec<f64>>,
    pub loss_fc: f64,
    /// The full T×T masked, filtered, column-normalized adjacency.
    pub adjacency: Vec<Vec<f64>>,
}

/// Graph stage evaluated on whole T×T matrices, straight from the
/// definitions: mask, filter, top-K, column softmax, branch GCNs run as
/// dense products with block-masked adjacency, ambiguous aggregation as one
/// product with the unblocked adjacency.
pub fn dense_oracle(inst: &Instance) -> OracleOut {
    let t = inst.fr.len();
    let h = inst.hyper;
    let ar = inst.ar.as_slice();
    let af = inst.af.as_slice();
    let kind: Vec<Kind> = (0..t)
        .map(|i| {
            if ar[i] > h.eta && af[i] > h.eta {
                Kind::A
            } else if ar[i] < 1.0 - h.eta && af[i] < 1.0 - h.eta {
                Kind::B
            } else {
                Kind::M
            }
        })
        .collect();
    let sr = cosine_matrix(&inst.fr.values);
    let sf = cosine_matrix(&inst.ff.values);
    let s: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| (sr[i][j] + sf[i][j]) / 2.0).collect())
        .collect();

    let allowed = |i: usize, j: usize| match kind[j] {
        Kind::M => i == j || kind[i] != Kind::M,
        k => kind[i] == k,
    };
    let mut adj = vec![vec![0.0; t]; t];
    for j in 0..t {
        let mut cand: Vec<usize> = (0..t)
            .filter(|&i| i != j && allowed(i, j) && s[i][j] >= h.theta)
            .collect();
        cand.sort_by(|&a, &b| s[b][j].total_cmp(&s[a][j]));
        cand.truncate(h.top_k);
        cand.push(j);
        let z: f64 = cand.iter().map(|&i| s[i][j].exp()).sum();
        for &i in &cand {
            adj[i][j] = s[i][j].exp() / z;
        }
    }

    let block = |k: Kind| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| {
                (0..t)
                    .map(|j| if kind[i] == k && kind[j] == k { adj[i][j] } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    let (adj_a, adj_b) = (block(Kind::A), block(Kind::B));
    let fused_att: Vec<f64> = (0..t).map(|i| (ar[i] + af[i]) / 2.0).collect();
    let w = |x: f64| (-(1.0 / x - 1.0) / h.tau).exp();

    let mut loss = 0.0;
    let mut outs = Vec::new();
    let streams = [
        (&inst.fr.values, [&inst.gcn.rgb_action, &inst.gcn.rgb_background]),
        (&inst.ff.values, [&inst.gcn.flow_action, &inst.gcn.flow_background]),
    ];
    for (f, branches) in streams {
        let fr = to_rows(f);
        let d = fr.len();
        let avg = dense_mul(&fr, &adj);
        let mut g = vec![vec![0.0; t]; d];
        for (k, branch, a) in [(Kind::A, branches[0], &adj_a), (Kind::B, branches[1], &adj_b)] {
            let mut hcur: Vec<Vec<f64>> = (0..d)
                .map(|r| (0..t).map(|j| if kind[j] == k { fr[r][j] } else { 0.0 }).collect())
                .collect();
            for &id in &branch.layers {
                let wl = to_rows(inst.params.get(id));
                hcur = dense_mul(&dense_mul(&wl, &hcur), a)
                    .into_iter()
                    .map(|row| row.into_iter().map(lrelu).collect())
                    .collect();
            }
            for r in 0..d {
                for j in 0..t {
                    if kind[j] == k {
                        g[r][j] = hcur[r][j];
                    }
                }
            }
        }
        // Ambiguous columns receive discriminative GCN features and their own raw feature.
        let src: Vec<Vec<f64>> = (0..d)
            .map(|r| {
                (0..t)
                    .map(|j| if kind[j] == Kind::M { fr[r][j] } else { g[r][j] })
                    .collect()
            })
            .collect();
        let agg = dense_mul(&src, &adj);
        let gcn: Vec<Vec<f64>> = (0..d)
            .map(|r| {
                (0..t)
                    .map(|j| if kind[j] == Kind::M { agg[r][j] } else { g[r][j] })
                    .collect()
            })
            .collect();
        let out: Vec<Vec<f64>> = (0..d)
            .map(|r| {
                (0..t)
                    .map(|j| 0.25 * avg[r][j] + 0.25 * gcn[r][j] + 0.5 * fr[r][j])
                    .collect()
            })
            .collect();
        for (k, bg) in [(Kind::A, false), (Kind::B, true)] {
            let idx: Vec<usize> = (0..t).filter(|&j| kind[j] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let mut term = 0.0;
            for &j in &idx {
                let dist = (0..d).map(|r| (gcn[r][j] - avg[r][j]).powi(2)).sum::<f64>().sqrt();
                let x = if bg { 1.0 - fused_att[j] } else { fused_att[j] };
                term += w(x) * dist;
            }
            loss += term / idx.len() as f64;
        }
        outs.push(out);
    }
    let flow = outs.pop().unwrap();
    let rgb = outs.pop().unwrap();
    OracleOut {
        rgb,
        flow,
        loss_fc: loss,
        adjacency: adj,
    }
}

pub fn max_abs_diff(m: &Matrix, rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((m[(r, c)] - v).abs());
        }
    }
    worst
}

/// Average precision by explicit enumeration: walk every prefix of the
/// ranked list, compute precision and recall at each, and integrate the
/// monotone envelope as a sum over distinct recall levels.
pub fn brute_force_ap(preds: &[(usize, Proposal)], gt: &[Vec<(usize, usize)>], iou: f64) -> Option<f64> {
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Proposal)> = preds.to_vec();
    // Stable sort keeps input order among equal scores.
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut points: Vec<(f64, f64)> = Vec::new();
    for n in 1..=ranked.len() {
        let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(v, p) in &ranked[..n] {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (j, &g) in gt[v].iter().enumerate() {
                let o = temporal_iou((p.start, p.end), g);
                if !taken[v][j] && o >= iou && o > best_iou {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                taken[v][j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total as f64, tp as f64 / n as f64));
    }
    // Interpolated precision at recall r = best precision at any recall ≥ r.
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn interval(rng: &mut ChaCha8Rng, t: usize) -> (usize, usize) {
    let s = rng.random_range(1..=t);
    let e = rng.random_range(s..=(s + 6).min(t));
    (s, e)
}

pub type ApCase = (Vec<(usize, Proposal)>, Vec<Vec<(usize, usize)>>);

/// Up to 6 proposals and 4 ground-truth segments spread over 1-3 videos.
/// Scores come from a small grid so ties occur.
pub fn random_ap_case(seed: u64) -> ApCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos = rng.random_range(1..=3);
    let mut gt = vec![Vec::new(); videos];
    for _ in 0..rng.random_range(1..=4) {
        let v = rng.random_range(0..videos);
        gt[v].push(interval(&mut rng, 20));
    }
    let preds = (0..rng.random_range(0..=6))
        .map(|_| {
            let v = rng.random_range(0..videos);
            let (start, end) = if !gt[v].is_empty() && rng.random_bool(0.5) {
                // Jitter a true segment so that matches land on either side of the cut.
                let (s, e) = gt[v][rng.random_range(0..gt[v].len())];
                let s = (s as i64 + rng.random_range(-2..=2)).max(1) as usize;
                let e = (e as i64 + rng.random_range(-2..=2)).max(s as i64) as usize;
                (s, e)
            } else {
                interval(&mut rng, 20)
            };
            let score = rng.random_range(0..8) as f64 / 8.0;
            (
                v,
                Proposal {
                    start,
                    end,
                    category: 0,
                    score,
                },
            )
        })
        .collect();
    (preds, gt)
}
