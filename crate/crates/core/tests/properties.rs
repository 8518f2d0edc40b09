//! Property tests for the numerical kernels.

use nalgebra::{DMatrix, DVector};
use neural_kalman::covariance::{CovarianceRep, RepMethod};
use neural_kalman::experiment::output::{fig2_csv_string, read_fig2_csv, Fig2Record};
use neural_kalman::lds::sample_gaussian;
use neural_kalman::linalg::{min_sym_eigenvalue, pseudo_inverse, psd_factor, symmetrize};
use neural_kalman::oracle::{derive_transformed, t_step, z_step};
use neural_kalman::rng::RngStream;
use proptest::prelude::*;

/// Random symmetric PSD matrix built as `A A' * scale`.
fn psd_matrix(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (
        proptest::collection::vec(-2.0..2.0f64, dim * dim),
        1e-6..10.0f64,
    )
        .prop_map(move |(entries, scale)| {
            let a = DMatrix::from_vec(dim, dim, entries);
            symmetrize(&(&a * a.transpose())) * scale
        })
}

/// Random symmetric PD matrix (PSD plus a positive ridge).
fn pd_matrix(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (psd_matrix(dim), 1e-4..1.0f64)
        .prop_map(move |(m, ridge)| m + DMatrix::identity(dim, dim) * ridge)
}

proptest! {
    #[test]
    fn psd_factor_reconstructs(m in psd_matrix(3)) {
        let l = psd_factor(&m).unwrap();
        let scale = m.norm().max(1.0);
        prop_assert!((&l * l.transpose() - &m).norm() < 1e-10 * scale);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), stream in any::<u64>(), m in psd_matrix(2)) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        let va = sample_gaussian(&m, &mut a).unwrap();
        let vb = sample_gaussian(&m, &mut b).unwrap();
        prop_assert_eq!(va, vb);
    }

    #[test]
    fn covariance_paths_stay_positive_definite(z0 in pd_matrix(2), steps in 1usize..30) {
        let model = neural_kalman::lds::LdsModel::planar_rotations(15.0, 50.0, 1e-5, 1e-4);
        let tm = derive_transformed(&model).unwrap();
        let mut z = z0.clone();
        let mut t = z0 + &tm.g_tilde;
        for _ in 0..steps {
            z = z_step(&tm, &z).unwrap();
            t = t_step(&tm, &t).unwrap();
            prop_assert!(min_sym_eigenvalue(&z) > 0.0);
            prop_assert!(min_sym_eigenvalue(&t) > 0.0);
        }
    }

    #[test]
    fn pseudo_inverse_satisfies_moore_penrose(
        entries in proptest::collection::vec(-3.0..3.0f64, 6),
        rank_one in any::<bool>(),
    ) {
        let a = if rank_one {
            let u = DVector::from_vec(entries[0..3].to_vec());
            let v = DVector::from_vec(entries[3..6].to_vec());
            u * v.transpose()
        } else {
            DMatrix::from_vec(2, 3, entries)
        };
        let p = pseudo_inverse(&a).unwrap();
        let scale = a.norm().max(1.0);
        prop_assert!((&a * &p.m * &a - &a).norm() < 1e-9 * scale);
        prop_assert!((&p.m * &a * &p.m - &p.m).norm() < 1e-9 * scale.max(p.m.norm()));
    }

    #[test]
    fn steady_blending_shrinks_with_measurement_noise(
        q in 1e-6..1e-2f64,
        rho in 1e-6..1e-2f64,
        factor in 1.001..100.0f64,
    ) {
        // Scalar closed form of the steady state: HK = p*/(p* + rho) with
        // p* = (q + sqrt(q^2 + 4 q rho)) / 2.
        let hk = |q: f64, rho: f64| {
            let p = 0.5 * (q + (q * q + 4.0 * q * rho).sqrt());
            p / (p + rho)
        };
        prop_assert!(hk(q, rho * factor) <= hk(q, rho) + 1e-12);
    }

    #[test]
    fn inverse_rep_learning_keeps_symmetry(
        m in pd_matrix(2),
        raw in proptest::collection::vec(-3.0..3.0f64, 20),
        gamma in 0.0..0.05f64,
    ) {
        // Samples drawn at the represented covariance's own scale, the
        // regime where the small-rate update rule is valid.
        let l = psd_factor(&m).unwrap();
        let mut rep = CovarianceRep::from_matrix(&m, RepMethod::Inverse).unwrap();
        for pair in raw.chunks(2) {
            let s = &l * DVector::from_vec(pair.to_vec());
            rep.learn_one(&s, gamma).unwrap();
            prop_assert!(rep.symmetry_defect() < 1e-10);
        }
    }

    #[test]
    fn fig2_records_round_trip(
        seed in any::<u64>(),
        t_plot in -5i64..1000,
        feature in 0usize..1000,
        ihk in -1.0..2.0f64,
        f in -2.0..2.0f64,
    ) {
        let recs = vec![Fig2Record {
            method: "run3".into(),
            seed,
            t_plot,
            feature,
            ihk22: ihk,
            f22: f,
        }];
        let s = fig2_csv_string(&recs).unwrap();
        let back = read_fig2_csv(s.as_bytes()).unwrap();
        prop_assert_eq!(&back, &recs);
        prop_assert_eq!(fig2_csv_string(&back).unwrap(), s);
    }
}
