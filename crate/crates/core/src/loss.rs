//! Objectives. All pairwise losses take row-normalized online predictions
//! `q` (N, d) and target projections `z` (N, d) and are written in the
//! `2 - 2 cos` form of the squared distance between unit vectors.
//!
//! Pseudo-label masks are recomputed from the current similarities, carry
//! no gradient, and never include the diagonal.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Byol,
    /// Attraction of pseudo-positive pairs only.
    Ccsl,
    /// Attraction of pseudo-positives and repulsion of pseudo-negatives.
    /// Kept to reproduce its collapse; never a default.
    CcslWithRepulsion,
    Cssl,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Byol => "byol",
            Variant::Ccsl => "ccsl",
            Variant::CcslWithRepulsion => "ccsl-with-repulsion",
            Variant::Cssl => "cssl",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "byol" => Ok(Variant::Byol),
            "ccsl" => Ok(Variant::Ccsl),
            "ccsl-with-repulsion" => Ok(Variant::CcslWithRepulsion),
            "cssl" => Ok(Variant::Cssl),
            other => Err(format!("unknown loss variant `{other}` (byol, ccsl, ccsl-with-repulsion, cssl)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub theta_p: f64,
    pub theta_n: f64,
    /// `p = sigmoid(s / T_s)` in the sigmoid similarity loss.
    pub sigmoid_temperature: f64,
    pub nt_xent_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Byol,
            lambda: 0.1,
            theta_p: 0.8,
            theta_n: -0.5,
            sigmoid_temperature: 0.5,
            nt_xent_temperature: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_thresholds(self.theta_p, self.theta_n)?;
        if !(self.lambda >= 0.0) {
            return Err(TensorError::Contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigmoid_temperature > 0.0) || !(self.nt_xent_temperature > 0.0) {
            return Err(TensorError::Contract("temperatures must be positive".into()));
        }
        Ok(())
    }
}

fn check_thresholds(theta_p: f64, theta_n: f64) -> Result<()> {
    if theta_n < theta_p {
        Ok(())
    } else {
        Err(TensorError::Contract(format!(
            "theta_n ({theta_n}) must be below theta_p ({theta_p})"
        )))
    }
}

/// Pairwise cosine scores plus pseudo-label masks, all row-major N x N.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
    pub negative: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    pub fn positive_pairs(&self) -> usize {
        self.positive.iter().filter(|&&b| b).count()
    }

    pub fn negative_pairs(&self) -> usize {
        self.negative.iter().filter(|&&b| b).count()
    }

    fn from_scores(n: usize, scores: Vec<f64>, theta_p: f64, theta_n: f64) -> Self {
        let off = |k: usize| k / n != k % n;
        let positive = scores.iter().enumerate().map(|(k, &s)| off(k) && s >= theta_p).collect();
        let negative = scores.iter().enumerate().map(|(k, &s)| off(k) && s <= theta_n).collect();
        Self {
            n,
            scores,
            positive,
            negative,
        }
    }

    fn mask_tensor<T: Scalar>(&self, mask: &[bool]) -> Tensor<T> {
        let data = mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new([self.n, self.n], data).expect("n x n")
    }
}

/// `S[i][j] = <q_i, z_j>` with masks for `theta_p` / `theta_n`.
pub fn similarity_matrix<T: Scalar>(q: &Tensor<T>, z: &Tensor<T>, theta_p: f64, theta_n: f64) -> Result<SimilarityMatrix> {
    check_thresholds(theta_p, theta_n)?;
    if q.shape().len() != 2 || q.shape() != z.shape() {
        return Err(TensorError::Shape {
            op: "similarity_matrix",
            lhs: q.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let n = q.shape()[0];
    let mut scores = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = q.row(i).iter().zip(z.row(j)).map(|(a, b)| (*a * *b).to_f64().unwrap()).sum();
            scores.push(s);
        }
    }
    Ok(SimilarityMatrix::from_scores(n, scores, theta_p, theta_n))
}

/// Loss value with its components, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Same-image term, averaged over rows.
    pub diagonal: Var,
    /// λ-weighted cross-image term, averaged over rows.
    pub refinement: Var,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

fn check_pair<T: Scalar>(tape: &Tape<T>, op: &'static str, q: Var, z: Var) -> Result<usize> {
    let (a, b) = (tape.shape(q), tape.shape(z));
    if a.len() != 2 || a != b {
        return Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(a[0])
}

/// Row-wise `<q_i, z_i>` as an (N) vector.
fn diagonal_scores<T: Scalar>(tape: &mut Tape<T>, q: Var, z: Var) -> Result<Var> {
    let prod = tape.mul(q, z)?;
    tape.sum(prod, &[1], false)
}

/// `S = q z^T`
fn scores<T: Scalar>(tape: &mut Tape<T>, q: Var, z: Var) -> Result<Var> {
    let zt = tape.transpose(z)?;
    tape.matmul(q, zt)
}

/// `2 - 2 x`
fn distance<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let y = tape.scale(x, T::of(-2.0))?;
    tape.add_scalar(y, T::of(2.0))
}

/// `mean_i (2 - 2 <q_i, z_i>)`, in [0, 4].
pub fn byol_pair_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, z: Var) -> Result<Var> {
    check_pair(tape, "byol_pair_loss", q, z)?;
    let d = diagonal_scores(tape, q, z)?;
    let d = distance(tape, d)?;
    tape.mean_all(d)
}

/// Masks for `q`, `z` taken from the current values on the tape.
pub fn pair_masks<T: Scalar>(tape: &Tape<T>, q: Var, z: Var, config: &LossConfig) -> Result<SimilarityMatrix> {
    check_pair(tape, "pair_masks", q, z)?;
    similarity_matrix(tape.value(q), tape.value(z), config.theta_p, config.theta_n)
}

/// `sum(mask * x) / N`
fn masked_row_mean<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: Tensor<T>, n: usize) -> Result<Var> {
    let m = tape.constant(mask);
    let y = tape.mul(x, m)?;
    let s = tape.sum_all(y)?;
    tape.scale(s, T::of(1.0 / n as f64))
}

/// One direction of the cross-cosine loss:
/// `mean_i [2 - 2 S_ii + λ Σ_{j≠i} 1[S_ij ≥ θ_p] (2 - 2 S_ij)]`, with the
/// repulsion variant also adding `- λ Σ_{j≠i} 1[S_ij ≤ θ_n] (2 - 2 S_ij)`.
pub fn ccsl_loss_masked<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    z: Var,
    config: &LossConfig,
    masks: &SimilarityMatrix,
    repulsion: bool,
) -> Result<LossTerms> {
    let n = check_pair(tape, "ccsl_loss", q, z)?;
    let diagonal = byol_pair_loss(tape, q, z)?;
    let s = scores(tape, q, z)?;
    let dist = distance(tape, s)?;
    let attract = masked_row_mean(tape, dist, masks.mask_tensor(&masks.positive), n)?;
    let mut refinement = tape.scale(attract, T::of(config.lambda))?;
    if repulsion {
        let repel = masked_row_mean(tape, dist, masks.mask_tensor(&masks.negative), n)?;
        let repel = tape.scale(repel, T::of(config.lambda))?;
        refinement = tape.sub(refinement, repel)?;
    }
    let total = tape.add(diagonal, refinement)?;
    Ok(LossTerms {
        total,
        diagonal,
        refinement,
        positive_pairs: masks.positive_pairs(),
        negative_pairs: if repulsion { masks.negative_pairs() } else { 0 },
    })
}

pub fn ccsl_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, z: Var, config: &LossConfig, repulsion: bool) -> Result<LossTerms> {
    let masks = pair_masks(tape, q, z, config)?;
    ccsl_loss_masked(tape, q, z, config, &masks, repulsion)
}

/// Scalar per-pair term `ℓ(a, b)` of the sigmoid similarity loss with
/// `p = sigmoid(<a, b> / T_s)`: `-log p` above `θ_p`, `-log(1 - p)` below
/// `θ_n`, zero in between.
pub fn cssl_pairwise(a: &[f64], b: &[f64], config: &LossConfig) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let t = s / config.sigmoid_temperature;
    let mut out = 0.0;
    if s >= config.theta_p {
        out += softplus(-t);
    }
    if s <= config.theta_n {
        out += softplus(t);
    }
    out
}

/// `log(1 + e^x)`; `-log sigmoid(x) = softplus(-x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log sigmoid(c x)` elementwise.
fn log_sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var, c: f64) -> Result<Var> {
    let y = tape.scale(x, T::of(c))?;
    let y = tape.sigmoid(y)?;
    tape.log(y)
}

/// One direction of the sigmoid similarity loss:
/// `mean_i [-log p(q_i, z_i) + λ Σ_{j≠i} ℓ(q_i, z_j)]`.
pub fn cssl_loss_masked<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    z: Var,
    config: &LossConfig,
    masks: &SimilarityMatrix,
) -> Result<LossTerms> {
    let n = check_pair(tape, "cssl_loss", q, z)?;
    let inv_t = 1.0 / config.sigmoid_temperature;
    let d = diagonal_scores(tape, q, z)?;
    let d = log_sigmoid(tape, d, inv_t)?;
    let d = tape.mean_all(d)?;
    let diagonal = tape.neg(d)?;

    let s = scores(tape, q, z)?;
    let log_p = log_sigmoid(tape, s, inv_t)?;
    let log_not_p = log_sigmoid(tape, s, -inv_t)?;
    let pos = masked_row_mean(tape, log_p, masks.mask_tensor(&masks.positive), n)?;
    let neg = masked_row_mean(tape, log_not_p, masks.mask_tensor(&masks.negative), n)?;
    let pairs = tape.add(pos, neg)?;
    let refinement = tape.scale(pairs, T::of(-config.lambda))?;
    let total = tape.add(diagonal, refinement)?;
    Ok(LossTerms {
        total,
        diagonal,
        refinement,
        positive_pairs: masks.positive_pairs(),
        negative_pairs: masks.negative_pairs(),
    })
}

pub fn cssl_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, z: Var, config: &LossConfig) -> Result<LossTerms> {
    let masks = pair_masks(tape, q, z, config)?;
    cssl_loss_masked(tape, q, z, config, &masks)
}

/// One direction of the configured variant.
pub fn directional_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, z: Var, config: &LossConfig) -> Result<LossTerms> {
    match config.variant {
        Variant::Byol => {
            let total = byol_pair_loss(tape, q, z)?;
            let refinement = tape.constant(Tensor::scalar(T::zero()));
            Ok(LossTerms {
                total,
                diagonal: total,
                refinement,
                positive_pairs: 0,
                negative_pairs: 0,
            })
        }
        Variant::Ccsl => ccsl_loss(tape, q, z, config, false),
        Variant::CcslWithRepulsion => ccsl_loss(tape, q, z, config, true),
        Variant::Cssl => cssl_loss(tape, q, z, config),
    }
}

/// `loss(q(v), z(v')) + loss(q(v'), z(v))`: the second direction swaps the
/// views between the two networks.
pub fn symmetrize<T: Scalar, F>(
    tape: &mut Tape<T>,
    (q_v, z_v): (Var, Var),
    (q_vp, z_vp): (Var, Var),
    mut loss: F,
) -> Result<LossTerms>
where
    F: FnMut(&mut Tape<T>, Var, Var) -> Result<LossTerms>,
{
    let a = loss(tape, q_v, z_vp)?;
    let b = loss(tape, q_vp, z_v)?;
    Ok(LossTerms {
        total: tape.add(a.total, b.total)?,
        diagonal: tape.add(a.diagonal, b.diagonal)?,
        refinement: tape.add(a.refinement, b.refinement)?,
        positive_pairs: a.positive_pairs + b.positive_pairs,
        negative_pairs: a.negative_pairs + b.negative_pairs,
    })
}

/// Normalized temperature-scaled cross entropy over the 2N rows of `z` and
/// `z_tilde` (row `i` of each is a positive pair). Rows are normalized here.
/// Each anchor's softmax runs over the 2N - 1 other rows; the result is the
/// mean over all 2N anchors.
pub fn nt_xent<T: Scalar>(tape: &mut Tape<T>, z: Var, z_tilde: Var, temperature: f64) -> Result<Var> {
    let n = check_pair(tape, "nt_xent", z, z_tilde)?;
    if n < 2 {
        return Err(TensorError::Contract(format!("nt_xent needs at least 2 pairs, got {n}")));
    }
    if !(temperature > 0.0) {
        return Err(TensorError::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let m = 2 * n;
    let u = tape.concat(&[z, z_tilde], 0)?;
    let u = tape.l2_normalize(u)?;
    let sim = scores(tape, u, u)?;
    // Shifting by the maximum possible cosine keeps exp() bounded.
    let shifted = tape.add_scalar(sim, T::of(-1.0))?;
    let logits = tape.scale(shifted, T::of(1.0 / temperature))?;
    let e = tape.exp(logits)?;
    let mut off = Tensor::<T>::ones([m, m]);
    let mut pos = Tensor::<T>::zeros([m, m]);
    for k in 0..m {
        off.data_mut()[k * m + k] = T::zero();
        pos.data_mut()[k * m + (k + n) % m] = T::one();
    }
    let off = tape.constant(off);
    let pos = tape.constant(pos);
    let e = tape.mul(e, off)?;
    let denom = tape.sum(e, &[1], false)?;
    let log_denom = tape.log(denom)?;
    let positive = tape.mul(logits, pos)?;
    let positive = tape.sum(positive, &[1], false)?;
    let per_anchor = tape.sub(log_denom, positive)?;
    tape.mean_all(per_anchor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(move |v| v / norm)
            })
            .collect();
        Tensor::new([rows.len(), d], data).unwrap()
    }

    fn eval(q: &Tensor<f64>, z: &Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, Var, Var) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let (qv, zv) = (tape.constant(q.clone()), tape.constant(z.clone()));
        let out = f(&mut tape, qv, zv).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn byol_loss_reference_points() {
        let a = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = unit_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let c = unit_rows(&[&[-1.0, 0.0], &[0.0, -1.0]]);
        assert_eq!(eval(&a, &a, byol_pair_loss), 0.0);
        assert_eq!(eval(&a, &b, byol_pair_loss), 2.0);
        assert_eq!(eval(&a, &c, byol_pair_loss), 4.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros([2, 3]));
        let z = tape.constant(Tensor::zeros([3, 3]));
        let err = byol_pair_loss(&mut tape, q, z).unwrap_err();
        assert!(err.to_string().contains("byol_pair_loss"), "{err}");
    }

    #[test]
    fn ccsl_hand_batch() {
        // Unit rows with S = [[1, .6, 0], [.6, 1, .8], [0, .8, 1]] when q = z.
        let q = unit_rows(&[&[1.0, 0.0, 0.0], &[0.6, 0.8, 0.0], &[0.0, 1.0, 0.0]]);
        let config = LossConfig {
            theta_p: 0.5,
            lambda: 0.1,
            ..LossConfig::default()
        };
        let got = eval(&q, &q, |t, a, b| Ok(ccsl_loss(t, a, b, &config, false)?.total));
        // Pairs at or above 0.5: (0,1), (1,0) at 0.6; (1,2), (2,1) at 0.8.
        let expected = 0.1 * (2.0 * 0.8 + 2.0 * 0.4) / 3.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn cssl_reference_points() {
        let zero_threshold = LossConfig {
            theta_p: 0.0,
            theta_n: -0.5,
            sigmoid_temperature: 1.0,
            ..LossConfig::default()
        };
        let l = cssl_pairwise(&[1.0, 0.0], &[0.0, 1.0], &zero_threshold);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let dead = cssl_pairwise(&[1.0, 0.0], &[0.6, 0.8], &LossConfig::default());
        assert_eq!(dead, 0.0);

        let q = unit_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let config = LossConfig {
            lambda: 0.0,
            sigmoid_temperature: 1.0,
            ..LossConfig::default()
        };
        let got = eval(&q, &q, |t, a, b| Ok(cssl_loss(t, a, b, &config)?.total));
        assert!((got - 0.313_261_687_518_222_8).abs() < 1e-12, "{got}");
    }

    #[test]
    fn nt_xent_orthogonal_rows_give_log_three() {
        let z = unit_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let zt = unit_rows(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        let got = eval(&z, &zt, |t, a, b| nt_xent(t, a, b, 1.0));
        assert!((got - 3f64.ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn nt_xent_needs_two_pairs() {
        let z = unit_rows(&[&[1.0, 0.0]]);
        let mut tape = Tape::new();
        let a = tape.constant(z.clone());
        let b = tape.constant(z);
        assert!(matches!(nt_xent(&mut tape, a, b, 0.1), Err(TensorError::Contract(_))));
    }

    #[test]
    fn nt_xent_decreases_as_positive_similarity_rises() {
        let z = unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let mut last = f64::INFINITY;
        for angle in [1.4, 1.0, 0.6, 0.2, 0.0f64] {
            let zt = unit_rows(&[&[angle.cos(), angle.sin(), 0.0], &[0.0, 0.0, 1.0]]);
            let l = eval(&z, &zt, |t, a, b| nt_xent(t, a, b, 0.5));
            assert!(l < last, "{l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn similarity_masks() {
        let same = unit_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let s = similarity_matrix(&same, &same, 0.8, -0.5).unwrap();
        assert_eq!(s.positive_pairs(), 6);
        assert!(!s.positive[0] && !s.positive[4] && !s.positive[8]);
        let ortho = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = similarity_matrix(&ortho, &ortho, 0.5, -0.5).unwrap();
        assert_eq!((s.positive_pairs(), s.negative_pairs()), (0, 0));
        assert!(similarity_matrix(&ortho, &ortho, 0.1, 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        for s in ["byol", "ccsl", "ccsl-with-repulsion", "cssl"] {
            assert_eq!(s.parse::<Variant>().unwrap().to_string(), s);
        }
    }
}
