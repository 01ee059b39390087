//! Graph averaging, the per-branch GCN, and the enhancement residual.

use rand::Rng;

use crate::base_model::{Modality, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamSet, Tape, Var};

/// `fx · ax`: column j becomes the adjacency-weighted mean of its neighbors.
pub fn graph_average(fx: &Matrix, ax: &Matrix) -> Result<Matrix> {
    Ok(fx.matmul(ax)?)
}

/// Stack of square layer weights for one modality and one branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GcnBranchIds {
    pub layers: Vec<ParamId>,
}

/// GCN weights: one action and one background stack per modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GcnIds {
    pub rgb_action: GcnBranchIds,
    pub rgb_background: GcnBranchIds,
    pub flow_action: GcnBranchIds,
    pub flow_background: GcnBranchIds,
}

impl GcnIds {
    /// Registers 4·`layers` D×D weights drawn from U[−1/√D, 1/√D].
    pub fn register(params: &mut ParamSet, dim: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut branch = |name: &str| GcnBranchIds {
            layers: (1..=layers)
                .map(|l| {
                    let w = Matrix::from_fn(dim, dim, |_, _| rng.random_range(-bound..=bound));
                    params.add(format!("gcn.{name}.layer{l}"), w)
                })
                .collect(),
        };
        Self {
            rgb_action: branch("rgb.action"),
            rgb_background: branch("rgb.background"),
            flow_action: branch("flow.action"),
            flow_background: branch("flow.background"),
        }
    }

    pub fn action(&self, m: Modality) -> &GcnBranchIds {
        match m {
            Modality::Rgb => &self.rgb_action,
            Modality::Flow => &self.flow_action,
        }
    }

    pub fn background(&self, m: Modality) -> &GcnBranchIds {
        match m {
            Modality::Rgb => &self.rgb_background,
            Modality::Flow => &self.flow_background,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        [
            &self.rgb_action,
            &self.rgb_background,
            &self.flow_action,
            &self.flow_background,
        ]
        .into_iter()
        .flat_map(|b| b.layers.iter().copied())
    }
}

/// `F_l = LeakyReLU(W_l · F_{l−1} · ax)` for every layer, recorded on the tape.
pub fn gcn_on_tape(tape: &mut Tape, params: &ParamSet, branch: &GcnBranchIds, fx: Var, ax: Var) -> Result<Var> {
    let mut h = fx;
    for &id in &branch.layers {
        let w = tape.param(params, id);
        let wh = tape.matmul(w, h)?;
        let agg = tape.matmul(wh, ax)?;
        h = tape.leaky_relu(agg, LEAKY_SLOPE);
    }
    Ok(h)
}

/// Plain evaluation of a GCN stack given its layer weights.
pub fn gcn_forward(fx: &Matrix, ax: &Matrix, weights: &[Matrix]) -> Result<Matrix> {
    let d = fx.rows();
    if let Some(w) = weights.iter().find(|w| w.shape() != (d, d)) {
        return Err(Error::Shape(format!(
            "GCN weight {:?} does not match feature dimension {d}",
            w.shape()
        )));
    }
    let mut params = ParamSet::new();
    let branch = GcnBranchIds {
        layers: weights
            .iter()
            .enumerate()
            .map(|(l, w)| params.add(format!("w{l}"), w.clone()))
            .collect(),
    };
    let mut tape = Tape::new();
    let f = tape.constant(fx.clone());
    let a = tape.constant(ax.clone());
    let out = gcn_on_tape(&mut tape, &params, &branch, f, a)?;
    Ok(tape.value(out).clone())
}

/// `fa_gcn · A_{m,a} + fb_gcn · A_{m,b} + fm · A_{m,m}`. Empty branches
/// (zero columns) drop out of the sum.
pub fn ambiguous_aggregate(
    fa_gcn: &Matrix,
    fb_gcn: &Matrix,
    fm: &Matrix,
    am_action: &Matrix,
    am_background: &Matrix,
    am_self: &Matrix,
) -> Result<Matrix> {
    let mut out = fm.matmul(am_self)?;
    if fa_gcn.cols() > 0 {
        out = fa_gcn.matmul(am_action)?.add(&out)?;
    }
    if fb_gcn.cols() > 0 {
        out = out.add(&fb_gcn.matmul(am_background)?)?;
    }
    Ok(out)
}

/// `((avg + gcn) / 2 + fx) / 2`.
pub fn enhance(fx: &Matrix, fx_avg: &Matrix, fx_gcn: &Matrix) -> Result<Matrix> {
    let g = fx_avg.add(fx_gcn)?.scale(0.5);
    Ok(g.add(fx)?.scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let raw = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let sums = raw.column_sums();
        Matrix::from_fn(n, n, |i, j| raw[(i, j)] / sums[j])
    }

    #[test]
    fn average_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&mut rng, 3, 4);
        assert_eq!(graph_average(&f, &Matrix::identity(4)).unwrap(), f);
        let same = Matrix::from_fn(3, 4, |r, _| r as f64 - 0.5);
        let avg = graph_average(&same, &stochastic(&mut rng, 4)).unwrap();
        assert!(avg.sub(&same).unwrap().max_abs() < 1e-12);
        assert!(graph_average(&f, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn average_matches_per_column_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(&mut rng, 5, 4);
        let a = stochastic(&mut rng, 4);
        let got = graph_average(&f, &a).unwrap();
        for j in 0..4 {
            for r in 0..5 {
                let want: f64 = (0..4).map(|i| a[(i, j)] * f[(r, i)]).sum();
                assert!((got[(r, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_identity_and_zero() {
        let f = Matrix::from_fn(3, 4, |r, c| (r + c) as f64 * 0.25);
        let eye = vec![Matrix::identity(3); 2];
        assert_eq!(gcn_forward(&f, &Matrix::identity(4), &eye).unwrap(), f);
        let zeros = vec![Matrix::zeros(3, 3); 2];
        let out = gcn_forward(&f, &Matrix::identity(4), &zeros).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert!(gcn_forward(&f, &Matrix::identity(4), &[Matrix::zeros(2, 2)]).is_err());
    }

    #[test]
    fn two_layer_gcn_matches_unrolled_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, n) = (4, 5);
        let f = random(&mut rng, d, n);
        let a = stochastic(&mut rng, n);
        let w = vec![random(&mut rng, d, d), random(&mut rng, d, d)];
        let got = gcn_forward(&f, &a, &w).unwrap();

        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let mut h = f.clone();
        for wl in &w {
            let mut next = Matrix::zeros(d, n);
            for r in 0..d {
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..n {
                        for k in 0..d {
                            s += wl[(r, k)] * h[(k, i)] * a[(i, j)];
                        }
                    }
                    next[(r, j)] = lrelu(s);
                }
            }
            h = next;
        }
        assert!(got.sub(&h).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn aggregate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let fa = random(&mut rng, d, 2);
        let fm = random(&mut rng, d, 1);
        // Isolated ambiguous snippet: only the self weight.
        let out = ambiguous_aggregate(
            &fa,
            &Matrix::zeros(d, 0),
            &fm,
            &Matrix::zeros(2, 1),
            &Matrix::zeros(0, 1),
            &Matrix::identity(1),
        )
        .unwrap();
        assert_eq!(out, fm);

        // Unblocked oracle: [fa | fm] times the full 3×1 column.
        let col = [0.3, 0.5, 0.2];
        let am_a = Matrix::col_vector(&col[..2]).unwrap();
        let am_m = Matrix::col_vector(&col[2..]).unwrap();
        let out = ambiguous_aggregate(&fa, &Matrix::zeros(d, 0), &fm, &am_a, &Matrix::zeros(0, 1), &am_m).unwrap();
        let whole = Matrix::from_fn(d, 3, |r, c| if c < 2 { fa[(r, c)] } else { fm[(r, 0)] });
        let oracle = whole.matmul(&Matrix::col_vector(&col).unwrap()).unwrap();
        assert!(out.sub(&oracle).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn enhance_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(&mut rng, 3, 4);
        assert_eq!(enhance(&f, &f, &f).unwrap(), f);
        let z = Matrix::zeros(3, 4);
        assert_eq!(enhance(&f, &z, &z).unwrap(), f.scale(0.5));
        let avg = random(&mut rng, 3, 4);
        let gcn = random(&mut rng, 3, 4);
        let got = enhance(&f, &avg, &gcn).unwrap();
        let want = avg
            .scale(0.25)
            .add(&gcn.scale(0.25))
            .unwrap()
            .add(&f.scale(0.5))
            .unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
        assert!(enhance(&f, &Matrix::zeros(2, 4), &gcn).is_err());
    }
}
