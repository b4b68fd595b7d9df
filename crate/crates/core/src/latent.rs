//! Latent standardization and the latent distance.
//!
//! A latent vector is standardized to mean 0 and population standard
//! deviation 1 over its own entries; the distance between two latents is
//! `sum_i |za_i - zb_i|^ell` over the standardized entries. No `ell`-th root
//! is taken, so for `ell > 1` the distance is not guaranteed to satisfy the
//! triangle inequality ([`check_metric_axioms`] finds violations).

use thiserror::Error;

use crate::autodiff::SIGMA_FLOOR;

/// Inclusive range of supported distance exponents.
pub const EXPONENT_RANGE: (f64, f64) = (1.0, 4.0);

/// Tolerance used by the axiom checks.
pub const AXIOM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("latent vectors need at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("latent vector contains a non-finite entry")]
    NonFinite,
    #[error("latent lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distance exponent {0} outside [1, 4]")]
    BadExponent(f64),
    #[error("empty batch")]
    EmptyBatch,
}

/// Real latent vector of dimensionality `m >= 2` with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LatentError> {
        if values.len() < 2 {
            return Err(LatentError::TooShort(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LatentError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Population standard deviation (divisor `m`).
    pub fn std(&self) -> f64 {
        let mu = self.mean();
        (self.0.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / self.0.len() as f64).sqrt()
    }
}

/// Standardizes to mean 0 and population standard deviation 1. Vectors with
/// a standard deviation below `1e-12` map to the zero vector.
pub fn standardize(z: &LatentVector) -> LatentVector {
    let mu = z.mean();
    let sigma = z.std();
    if sigma < SIGMA_FLOOR {
        return LatentVector(vec![0.0; z.dim()]);
    }
    LatentVector(z.0.iter().map(|v| (v - mu) / sigma).collect())
}

fn check_exponent(ell: f64) -> Result<(), LatentError> {
    if (EXPONENT_RANGE.0..=EXPONENT_RANGE.1).contains(&ell) {
        Ok(())
    } else {
        Err(LatentError::BadExponent(ell))
    }
}

fn standardized_distance(a: &[f64], b: &[f64], ell: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if ell == 1.0 {
                d
            } else {
                d.powf(ell)
            }
        })
        .sum()
}

/// Sum of `ell`-th powers of coordinate gaps between the standardized inputs.
pub fn latent_distance(za: &LatentVector, zb: &LatentVector, ell: f64) -> Result<f64, LatentError> {
    if za.dim() != zb.dim() {
        return Err(LatentError::LengthMismatch(za.dim(), zb.dim()));
    }
    check_exponent(ell)?;
    Ok(standardized_distance(standardize(za).values(), standardize(zb).values(), ell))
}

/// Row-major `n x n` table of latent distances.
pub fn pairwise_distances(batch: &[LatentVector], ell: f64) -> Result<Vec<f64>, LatentError> {
    let first = batch.first().ok_or(LatentError::EmptyBatch)?;
    check_exponent(ell)?;
    if let Some(bad) = batch.iter().find(|z| z.dim() != first.dim()) {
        return Err(LatentError::LengthMismatch(first.dim(), bad.dim()));
    }
    let std: Vec<LatentVector> = batch.iter().map(standardize).collect();
    let n = batch.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = standardized_distance(std[i].values(), std[j].values(), ell);
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axiom {
    Nonnegativity,
    IdentityOfIndiscernibles,
    Symmetry,
    TriangleInequality,
}

/// Sample indices violating an axiom. For the triangle inequality,
/// `d(i, k) > d(i, j) + d(j, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    pub axiom: Axiom,
    pub indices: [usize; 3],
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricAxiomReport {
    pub nonnegativity: bool,
    pub identity_of_indiscernibles: bool,
    pub symmetry: bool,
    pub triangle_inequality: bool,
    /// First violation found; present iff some flag is false.
    pub counterexample: Option<Counterexample>,
    pub triples_checked: usize,
}

impl MetricAxiomReport {
    pub fn all_hold(&self) -> bool {
        self.nonnegativity && self.identity_of_indiscernibles && self.symmetry && self.triangle_inequality
    }
}

/// Exhaustively checks the distance axioms over `samples`. Identity of
/// indiscernibles is judged on the standardized vectors.
pub fn check_metric_axioms(samples: &[LatentVector], ell: f64) -> Result<MetricAxiomReport, LatentError> {
    let n = samples.len();
    let table = pairwise_distances(samples, ell)?;
    let std: Vec<LatentVector> = samples.iter().map(standardize).collect();
    let d = |i: usize, j: usize| table[i * n + j];
    let mut report = MetricAxiomReport {
        nonnegativity: true,
        identity_of_indiscernibles: true,
        symmetry: true,
        triangle_inequality: true,
        counterexample: None,
        triples_checked: 0,
    };
    let fail = |report: &mut MetricAxiomReport, axiom, indices, lhs, rhs| {
        match axiom {
            Axiom::Nonnegativity => report.nonnegativity = false,
            Axiom::IdentityOfIndiscernibles => report.identity_of_indiscernibles = false,
            Axiom::Symmetry => report.symmetry = false,
            Axiom::TriangleInequality => report.triangle_inequality = false,
        }
        report.counterexample.get_or_insert(Counterexample {
            axiom,
            indices,
            lhs,
            rhs,
        });
    };

    for i in 0..n {
        for j in 0..n {
            // Recompute one direction directly so symmetry is actually tested.
            let dij = standardized_distance(std[i].values(), std[j].values(), ell);
            let dji = standardized_distance(std[j].values(), std[i].values(), ell);
            if dij < 0.0 {
                fail(&mut report, Axiom::Nonnegativity, [i, j, j], dij, 0.0);
            }
            if dij != dji {
                fail(&mut report, Axiom::Symmetry, [i, j, j], dij, dji);
            }
            let same = std[i]
                .values()
                .iter()
                .zip(std[j].values())
                .all(|(a, b)| (a - b).abs() <= AXIOM_TOLERANCE);
            if same != (dij <= AXIOM_TOLERANCE) {
                fail(&mut report, Axiom::IdentityOfIndiscernibles, [i, j, j], dij, 0.0);
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i == j || j == k || i == k {
                    continue;
                }
                report.triples_checked += 1;
                let rhs = d(i, j) + d(j, k);
                if d(i, k) > rhs + AXIOM_TOLERANCE {
                    fail(&mut report, Axiom::TriangleInequality, [i, j, k], d(i, k), rhs);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn lv(v: &[f64]) -> LatentVector {
        LatentVector::new(v.to_vec()).unwrap()
    }

    fn random_latent(m: usize, r: &mut rng::Pcg32) -> LatentVector {
        lv(&(0..m).map(|_| r.gen_range(-3.0..3.0)).collect::<Vec<_>>())
    }

    #[test]
    fn standardize_two_entries() {
        assert_eq!(standardize(&lv(&[0.0, 2.0])).values(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_vector_standardizes_to_zero() {
        assert_eq!(standardize(&lv(&[5.0, 5.0, 5.0])).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        let z = lv(&[1.0, -1.0, 1.0, -1.0]);
        for (a, b) in standardize(&z).values().iter().zip(z.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn construction_errors() {
        assert_eq!(LatentVector::new(vec![1.0]), Err(LatentError::TooShort(1)));
        assert_eq!(LatentVector::new(vec![1.0, f64::NAN]), Err(LatentError::NonFinite));
    }

    #[test]
    fn hand_evaluated_distances() {
        let (a, b) = (lv(&[0.0, 2.0]), lv(&[4.0, 0.0]));
        assert_eq!(latent_distance(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(latent_distance(&a, &b, 1.0).unwrap(), 4.0);
        assert_eq!(latent_distance(&a, &b, 2.0).unwrap(), 8.0);
    }

    #[test]
    fn distance_errors() {
        let (a, b) = (lv(&[0.0, 2.0]), lv(&[4.0, 0.0, 1.0]));
        assert_eq!(latent_distance(&a, &b, 1.0), Err(LatentError::LengthMismatch(2, 3)));
        assert_eq!(latent_distance(&a, &a, 0.5), Err(LatentError::BadExponent(0.5)));
        assert_eq!(pairwise_distances(&[], 1.0), Err(LatentError::EmptyBatch));
    }

    #[test]
    fn pairwise_table_contracts() {
        let same = vec![lv(&[1.0, 2.0, 4.0]); 4];
        assert!(pairwise_distances(&same, 1.3).unwrap().iter().all(|&v| v == 0.0));

        let pair = [lv(&[0.0, 2.0]), lv(&[4.0, 0.0])];
        assert_eq!(pairwise_distances(&pair, 1.0).unwrap(), vec![0.0, 4.0, 4.0, 0.0]);

        let mut r = rng::stream(8, 0);
        let batch: Vec<LatentVector> = (0..8).map(|_| random_latent(6, &mut r)).collect();
        let table = pairwise_distances(&batch, 1.4).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(table[i * 8 + j], latent_distance(&batch[i], &batch[j], 1.4).unwrap());
            }
        }
    }

    #[test]
    fn axioms_hold_for_unit_exponent() {
        let mut r = rng::stream(200, 0);
        let samples: Vec<LatentVector> = (0..200).map(|_| random_latent(16, &mut r)).collect();
        let report = check_metric_axioms(&samples, 1.0).unwrap();
        assert!(report.all_hold(), "{report:?}");
        assert!(report.counterexample.is_none());
        assert_eq!(report.triples_checked, 200 * 199 * 198);
    }

    #[test]
    fn squared_exponent_breaks_triangle_inequality() {
        let mut r = rng::stream(2, 0);
        let samples: Vec<LatentVector> = (0..30).map(|_| random_latent(4, &mut r)).collect();
        let report = check_metric_axioms(&samples, 2.0).unwrap();
        assert!(report.nonnegativity && report.symmetry);
        assert!(!report.triangle_inequality);
        let ce = report.counterexample.unwrap();
        assert_eq!(ce.axiom, Axiom::TriangleInequality);
        let [i, j, k] = ce.indices;
        let d = |a: usize, b: usize| latent_distance(&samples[a], &samples[b], 2.0).unwrap();
        assert!(d(i, k) > d(i, j) + d(j, k));
    }

    #[test]
    fn affine_copies_are_indiscernible() {
        let z = lv(&[0.3, -1.0, 2.0, 0.5]);
        let w = lv(&z.values().iter().map(|v| 3.0 * v - 7.0).collect::<Vec<_>>());
        let other = lv(&[1.0, 0.0, 0.0, 0.0]);
        let report = check_metric_axioms(&[z, w, other], 1.0).unwrap();
        assert!(report.all_hold(), "{report:?}");
    }

    proptest! {
        #[test]
        fn affine_invariance(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
            ell in 1.0f64..4.0,
        ) {
            let (za, zb) = (lv(&a), lv(&b));
            prop_assume!(za.std() > 1e-3 && zb.std() > 1e-3);
            let moved = lv(&a.iter().map(|v| scale * v + shift).collect::<Vec<_>>());
            let d0 = latent_distance(&za, &zb, ell).unwrap();
            let d1 = latent_distance(&moved, &zb, ell).unwrap();
            prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0), "{} vs {}", d0, d1);
        }

        #[test]
        fn nondecreasing_in_coordinate_gaps(
            gaps in prop::collection::vec(0.0f64..3.0, 5),
            bump in 0.0f64..2.0,
            idx in 0usize..5,
            ell in 1.0f64..4.0,
        ) {
            let sum = |g: &[f64]| g.iter().map(|d| d.powf(ell)).sum::<f64>();
            let mut bigger = gaps.clone();
            bigger[idx] += bump;
            prop_assert!(sum(&bigger) >= sum(&gaps));
            // The public distance agrees with the gap formula on standardized inputs.
            let za = lv(&[1.0, -1.0, 1.0, -1.0]);
            let zb = lv(&[-1.0, 1.0, 1.0, -1.0]);
            prop_assert!((latent_distance(&za, &zb, ell).unwrap() - 2.0 * 2f64.powf(ell)).abs() < 1e-9);
        }
    }
}
