//! Membrane-potential feature distillation.
//!
//! Each recorded pre-reset potential `[b, c, h, w]` is flattened to a
//! `b x (c*h*w)` matrix `Q`; its Gram matrix `M = Q Q^T` is normalized by the
//! Frobenius norm. The loss sums `||G_teacher - G_student||_F` over paired
//! layers and timesteps. Only the batch size has to agree between teacher and
//! student, so layers of different width or resolution can be paired.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Row-major view of a potential as a `b x (c*h*w)` matrix.
#[derive(Debug, Clone, Copy)]
pub struct Flattened<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl Flattened<'_> {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn flatten_q(u: &Tensor4) -> Flattened<'_> {
    let s = u.shape();
    Flattened {
        rows: s.b,
        cols: s.per_sample(),
        data: u.data(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramFeature {
    /// Batch size; `g` is `b x b` row-major.
    pub b: usize,
    pub g: Vec<f64>,
    /// Frobenius norm of the unnormalized Gram matrix.
    pub norm: f64,
    pub source_shape: Shape4,
}

impl GramFeature {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.b + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn raw_gram(q: &Flattened<'_>) -> Vec<f64> {
    let b = q.rows;
    let mut m = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(x, y)| x * y).sum();
            m[i * b + j] = dot;
            m[j * b + i] = dot;
        }
    }
    m
}

/// Frobenius-normalized Gram matrix of the flattened potential.
pub fn gram(u: &Tensor4) -> Result<GramFeature> {
    let q = flatten_q(u);
    if q.rows == 0 {
        return Err(shape_err("batch >= 1", q.rows));
    }
    let mut m = raw_gram(&q);
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateGram);
    }
    for v in &mut m {
        *v /= norm;
    }
    Ok(GramFeature {
        b: q.rows,
        g: m,
        norm,
        source_shape: u.shape(),
    })
}

/// `(teacher_layer, student_layer)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPairing(pub Vec<(usize, usize)>);

impl LayerPairing {
    /// Pairs layer `l` with layer `l` for `l < n`.
    pub fn identity(n: usize) -> Self {
        LayerPairing((0..n).map(|l| (l, l)).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, teacher_layers: usize, student_layers: usize) -> Result<()> {
        for &(t, s) in &self.0 {
            if t >= teacher_layers || s >= student_layers {
                return Err(Error::InvalidConfig(format!(
                    "pair ({t}, {s}) out of range for {teacher_layers} teacher / {student_layers} student layers"
                )));
            }
        }
        Ok(())
    }
}

/// What to do when a recorded potential is all zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GramPolicy {
    #[default]
    Strict,
    /// Skip that (pair, timestep) term.
    SkipDegenerate,
}

/// Recorded potentials indexed `[layer][timestep]`.
pub type Potentials = [Vec<Tensor4>];

fn check_inputs(
    teacher: &Potentials,
    student: &Potentials,
    pairing: &LayerPairing,
    timesteps: usize,
) -> Result<()> {
    pairing.validate(teacher.len(), student.len())?;
    for &(t, s) in &pairing.0 {
        if teacher[t].len() < timesteps || student[s].len() < timesteps {
            return Err(Error::InvalidConfig(format!(
                "pair ({t}, {s}) records fewer than {timesteps} timesteps"
            )));
        }
        for step in 0..timesteps {
            let (tb, sb) = (teacher[t][step].shape().b, student[s][step].shape().b);
            if tb != sb {
                return Err(shape_err(format!("batch {tb}"), format!("batch {sb}")));
            }
        }
    }
    Ok(())
}

fn pair_term(
    teacher: &Tensor4,
    student: &Tensor4,
    policy: GramPolicy,
) -> Result<Option<(f64, GramFeature, GramFeature)>> {
    let gt = gram(teacher);
    let gs = gram(student);
    match (gt, gs) {
        (Ok(gt), Ok(gs)) => {
            let diff =
                gt.g.iter()
                    .zip(&gs.g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            Ok(Some((diff, gt, gs)))
        }
        (Err(Error::DegenerateGram), _) | (_, Err(Error::DegenerateGram))
            if policy == GramPolicy::SkipDegenerate =>
        {
            Ok(None)
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Sum over pairs and the first `timesteps` steps of the Gram distance.
pub fn mpfd_loss(
    teacher: &Potentials,
    student: &Potentials,
    pairing: &LayerPairing,
    timesteps: usize,
) -> Result<f64> {
    check_inputs(teacher, student, pairing, timesteps)?;
    let mut loss = 0.0;
    for &(t, s) in &pairing.0 {
        for step in 0..timesteps {
            if let Some((d, _, _)) =
                pair_term(&teacher[t][step], &student[s][step], GramPolicy::Strict)?
            {
                loss += d;
            }
        }
    }
    Ok(loss)
}

/// Gradient of [`mpfd_loss`] with respect to every recorded student
/// potential; unpaired layers get zeros. The teacher is a constant.
pub fn mpfd_grad(
    teacher: &Potentials,
    student: &Potentials,
    pairing: &LayerPairing,
    timesteps: usize,
) -> Result<Vec<Vec<Tensor4>>> {
    mpfd_loss_and_grad(teacher, student, pairing, timesteps, GramPolicy::Strict).map(|(_, g)| g)
}

pub fn mpfd_loss_and_grad(
    teacher: &Potentials,
    student: &Potentials,
    pairing: &LayerPairing,
    timesteps: usize,
    policy: GramPolicy,
) -> Result<(f64, Vec<Vec<Tensor4>>)> {
    check_inputs(teacher, student, pairing, timesteps)?;
    let mut grads: Vec<Vec<Tensor4>> = student
        .iter()
        .map(|steps| steps.iter().map(|u| Tensor4::zeros(u.shape())).collect())
        .collect();
    let mut loss = 0.0;
    for &(t, s) in &pairing.0 {
        for step in 0..timesteps {
            let u = &student[s][step];
            let Some((d, gt, gs)) = pair_term(&teacher[t][step], u, policy)? else {
                continue;
            };
            loss += d;
            if d == 0.0 {
                continue;
            }
            accumulate_grad(&gt, &gs, d, u, grads[s][step].data_mut());
        }
    }
    Ok((loss, grads))
}

/// Adds d||Gt - Gs||_F / dQ_s into `out`.
fn accumulate_grad(gt: &GramFeature, gs: &GramFeature, dist: f64, u: &Tensor4, out: &mut [f64]) {
    let b = gs.b;
    // dL/dGs
    let dg: Vec<f64> =
        gs.g.iter()
            .zip(&gt.g)
            .map(|(s, t)| (s - t) / dist)
            .collect();
    // project out the normalization direction, then undo the scale
    let inner: f64 = dg.iter().zip(&gs.g).map(|(a, g)| a * g).sum();
    let dm: Vec<f64> = dg
        .iter()
        .zip(&gs.g)
        .map(|(a, g)| (a - inner * g) / gs.norm)
        .collect();
    // dL/dQ = (dM + dM^T) Q
    let q = flatten_q(u);
    for i in 0..b {
        let out_row = &mut out[i * q.cols..(i + 1) * q.cols];
        for j in 0..b {
            let coeff = dm[i * b + j] + dm[j * b + i];
            if coeff == 0.0 {
                continue;
            }
            for (o, x) in out_row.iter_mut().zip(q.row(j)) {
                *o += coeff * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape4>, rng: &mut ChaCha8Rng) -> Tensor4 {
        let shape = shape.into();
        Tensor4::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flatten_preserves_row_major_order() {
        let u = Tensor4::from_vec((2, 1, 2, 2), (0..8).map(f64::from).collect()).unwrap();
        let q = flatten_q(&u);
        assert_eq!((q.rows, q.cols), (2, 4));
        assert_eq!(q.row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(q.row(1), &[4.0, 5.0, 6.0, 7.0]);
        let back = Tensor4::from_vec((2, 1, 2, 2), q.data.to_vec()).unwrap();
        assert_eq!(back, u);

        let single = Tensor4::zeros((1, 3, 2, 2));
        assert_eq!(flatten_q(&single).cols, 12);
    }

    #[test]
    fn orthonormal_rows_give_scaled_identity() {
        let mut data = vec![0.0; 3 * 4];
        data[0] = 1.0;
        data[4 + 1] = 1.0;
        data[8 + 3] = 1.0;
        let g = gram(&Tensor4::from_vec((3, 1, 2, 2), data).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 / 3f64.sqrt() } else { 0.0 };
                assert!((g.at(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_sample_gram_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gram(&random((1, 2, 3, 3), &mut rng)).unwrap();
        assert_eq!(g.g.len(), 1);
        assert!((g.g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_potential_is_degenerate() {
        assert_eq!(
            gram(&Tensor4::zeros((2, 1, 2, 2))),
            Err(Error::DegenerateGram)
        );
    }

    #[test]
    fn symmetric_unit_norm_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = random((4, 3, 2, 2), &mut rng);
            let g = gram(&u).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert!((g.at(i, j) - g.at(j, i)).abs() <= 1e-12);
                }
            }
            assert!((g.frobenius() - 1.0).abs() <= 1e-12);
            for c in [-3.0, 1e-3, 1e6] {
                let gc = gram(&u.scaled(c)).unwrap();
                for (a, b) in g.g.iter().zip(&gc.g) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = vec![vec![
            random((2, 2, 2, 2), &mut rng),
            random((2, 2, 2, 2), &mut rng),
        ]];
        let pairing = LayerPairing::identity(1);
        assert_eq!(mpfd_loss(&t, &t, &pairing, 2).unwrap(), 0.0);

        let scaled: Vec<Vec<Tensor4>> = t
            .iter()
            .map(|l| l.iter().map(|u| u.scaled(3.5)).collect())
            .collect();
        assert!(mpfd_loss(&t, &scaled, &pairing, 2).unwrap() < 1e-12);
        let g = mpfd_grad(&t, &t, &pairing, 2).unwrap();
        assert!(g
            .iter()
            .flatten()
            .all(|x| x.data().iter().all(|&v| v == 0.0)));

        // teacher rows orthonormal -> I/sqrt(2); student has one non-zero row -> [[1,0],[0,0]]
        let teacher = vec![vec![Tensor4::from_vec(
            (2, 1, 1, 2),
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap()]];
        let student = vec![vec![Tensor4::from_vec(
            (2, 1, 1, 2),
            vec![2.0, 0.0, 0.0, 0.0],
        )
        .unwrap()]];
        let expected = ((1.0 - 1.0 / 2f64.sqrt()).powi(2) + 0.5).sqrt();
        let loss = mpfd_loss(&teacher, &student, &pairing, 1).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.7654).abs() < 1e-4);
    }

    #[test]
    fn mismatched_batches_rejected() {
        let t = vec![vec![Tensor4::filled((2, 1, 2, 2), 1.0)]];
        let s = vec![vec![Tensor4::filled((3, 1, 2, 2), 1.0)]];
        assert!(matches!(
            mpfd_loss(&t, &s, &LayerPairing::identity(1), 1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(mpfd_loss(&t, &t, &LayerPairing(vec![(0, 1)]), 1).is_err());
    }

    #[test]
    fn degenerate_policy_skips_terms() {
        let t = vec![vec![Tensor4::filled((2, 1, 2, 2), 1.0)]];
        let s = vec![vec![Tensor4::zeros((2, 1, 2, 2))]];
        let p = LayerPairing::identity(1);
        assert_eq!(mpfd_loss(&t, &s, &p, 1), Err(Error::DegenerateGram));
        let (loss, g) = mpfd_loss_and_grad(&t, &s, &p, 1, GramPolicy::SkipDegenerate).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g[0][0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_shape_pairs_are_well_defined() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = vec![vec![random((3, 8, 4, 4), &mut rng)]];
        let s = vec![vec![random((3, 2, 2, 3), &mut rng)]];
        let loss = mpfd_loss(&t, &s, &LayerPairing::identity(1), 1).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        let g = mpfd_grad(&t, &s, &LayerPairing::identity(1), 1).unwrap();
        assert_eq!(g[0][0].shape(), s[0][0].shape());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = vec![vec![random((2, 3, 2, 2), &mut rng)]];
        let s = vec![vec![random((2, 3, 2, 2), &mut rng)]];
        let p = LayerPairing::identity(1);
        let g = mpfd_grad(&t, &s, &p, 1).unwrap();
        let h = 1e-6;
        for n in 0..s[0][0].shape().len() {
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus[0][0].data_mut()[n] += h;
            minus[0][0].data_mut()[n] -= h;
            let fd = (mpfd_loss(&t, &plus, &p, 1).unwrap() - mpfd_loss(&t, &minus, &p, 1).unwrap())
                / (2.0 * h);
            let a = g[0][0].data()[n];
            assert!(
                (fd - a).abs() <= 1e-4 * a.abs().max(1e-3),
                "{n}: fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn teacher_scaling_leaves_gradient_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = vec![vec![random((3, 2, 2, 2), &mut rng)]];
        let s = vec![vec![random((3, 2, 2, 2), &mut rng)]];
        let t2: Vec<Vec<Tensor4>> = vec![vec![t[0][0].scaled(40.0)]];
        let p = LayerPairing::identity(1);
        let a = mpfd_grad(&t, &s, &p, 1).unwrap();
        let b = mpfd_grad(&t2, &s, &p, 1).unwrap();
        for (x, y) in a[0][0].data().iter().zip(b[0][0].data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
