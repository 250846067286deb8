//! so(3)/SO(3) primitives: the hat/vee isomorphism, the Cayley-transform
//! natural chart and its tangent map, rotation error metrics, and the chart
//! conditioning guard.

use nalgebra::{Matrix3, Vector3};

/// Element of so(3) in vector form; `hat` turns it into a skew matrix.
pub type Vec3 = Vector3<f64>;
/// 3x3 real matrix; rotations are stored as plain matrices and validated
/// where the chart requires it.
pub type Mat3 = Matrix3<f64>;

/// Frobenius tolerance below which a matrix counts as skew-symmetric.
pub const SKEW_TOL: f64 = 1e-12;
/// Orthogonality defect tolerance for accepting a matrix as a rotation.
pub const ROTATION_TOL: f64 = 1e-12;
/// |det(I + R)| below this means the rotation angle is at the chart
/// singularity (angle pi) and the Cayley chart cannot represent it.
const CHART_SINGULARITY_TOL: f64 = 1e-12;
/// Default stage-norm threshold at which the chart guard reports
/// near-singular conditioning.
pub const DEFAULT_CHART_WARN_THRESHOLD: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ChartError {
    #[error("not skew-symmetric: ||S + S^T|| = {defect:.3e}")]
    NotSkew { defect: f64 },
    #[error("chart singularity: rotation angle at pi, |det(I + R)| = {det:.3e}")]
    ChartSingularity { det: f64 },
}

pub type Result<T> = std::result::Result<T, ChartError>;

/// Hat map sending `(a, b, c)` to the skew matrix acting as the cross product.
#[rustfmt::skip]
pub fn hat(v: Vec3) -> Mat3 {
    Mat3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// Inverse of [`hat`]. Fails if the input is not skew-symmetric.
pub fn vee(s: &Mat3) -> Result<Vec3> {
    let defect = (s + s.transpose()).norm();
    if defect > SKEW_TOL {
        return Err(ChartError::NotSkew { defect });
    }
    Ok(Vec3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)]))
}

/// Cayley transform `Cay(Q) = (I - Q)(I + Q)^{-1}` with `Q = hat(v)`.
///
/// Computed by a direct 3x3 linear solve of `(I + Q) X = (I - Q)` rather than
/// a closed-form rational expression. `I + Q` is invertible for every skew
/// `Q`, so this never fails.
pub fn cay(v: Vec3) -> Mat3 {
    let q = hat(v);
    let a = Mat3::identity() + q;
    let b = Mat3::identity() - q;
    a.lu()
        .solve(&b)
        .expect("I + hat(v) is invertible for all skew hat(v)")
}

/// Inverse Cayley transform; the matrix map is its own inverse.
///
/// Fails with a chart singularity when the rotation angle is at pi
/// (equivalently, -1 is an eigenvalue of `r`).
pub fn cay_inv(r: &Mat3) -> Result<Vec3> {
    let ipr = Mat3::identity() + r;
    let det = ipr.determinant();
    if det.abs() < CHART_SINGULARITY_TOL {
        return Err(ChartError::ChartSingularity { det });
    }
    let inv = ipr
        .try_inverse()
        .ok_or(ChartError::ChartSingularity { det })?;
    let s = (Mat3::identity() - r) * inv;
    // The exact result is skew; strip the roundoff-sized symmetric part.
    let skew = 0.5 * (s - s.transpose());
    Ok(Vec3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]))
}

/// Directional derivative of the Cayley transform:
/// `D_X Cay(Y) = -Y(I+X)^{-1} - (I-X)(I+X)^{-1} Y (I+X)^{-1}`
/// with `X = hat(x)`, `Y = hat(y)`.
pub fn dcay(x: Vec3, y: Vec3) -> Mat3 {
    let xm = hat(x);
    let ym = hat(y);
    let inv = (Mat3::identity() + xm)
        .try_inverse()
        .expect("I + hat(x) is invertible for all skew hat(x)");
    -ym * inv - (Mat3::identity() - xm) * inv * ym * inv
}

/// Group error between two rotations: the spectral norm of their difference
/// in the embedding space.
pub fn group_error(r1: &Mat3, r2: &Mat3) -> f64 {
    (r1 - r2).singular_values().max()
}

/// Frobenius orthogonality defect `||R^T R - I||_F`.
pub fn rotation_defect(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Whether `r` is a proper rotation within [`ROTATION_TOL`].
pub fn is_rotation(r: &Mat3) -> bool {
    rotation_defect(r) <= ROTATION_TOL && r.determinant() > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartStatus {
    Ok,
    NearSingular,
}

/// Conditioning report for the stage coordinates of one step.
#[derive(Debug, Clone, Copy)]
pub struct ChartHealth {
    pub max_stage_norm: f64,
    pub warn_threshold: f64,
    pub status: ChartStatus,
}

/// Inspect stage-coordinate norms against the chart conditioning threshold.
///
/// A near-singular report is a warning, never an abort: the Newton solver's
/// own failure modes handle true breakdown.
pub fn chart_guard(stages: &[Vec3], warn_threshold: f64) -> ChartHealth {
    assert!(warn_threshold > 0.0, "warn_threshold must be positive");
    let max_stage_norm = stages.iter().map(|xi| xi.norm()).fold(0.0, f64::max);
    let status = if max_stage_norm >= warn_threshold {
        ChartStatus::NearSingular
    } else {
        ChartStatus::Ok
    };
    ChartHealth {
        max_stage_norm,
        warn_threshold,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    /// Independent 3x3 solve of (I + Q) X = (I - Q) by Gaussian elimination
    /// with partial pivoting; exercises none of the nalgebra path.
    fn cay_by_gaussian_elimination(v: Vec3) -> Mat3 {
        let q = hat(v);
        let a = Mat3::identity() + q;
        let b = Mat3::identity() - q;
        let mut aug = [[0.0f64; 6]; 3];
        for i in 0..3 {
            for j in 0..3 {
                aug[i][j] = a[(i, j)];
                aug[i][j + 3] = b[(i, j)];
            }
        }
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for j in 0..6 {
                aug[col][j] /= p;
            }
            for row in 0..3 {
                if row != col {
                    let f = aug[row][col];
                    for j in 0..6 {
                        aug[row][j] -= f * aug[col][j];
                    }
                }
            }
        }
        Mat3::from_fn(|i, j| aug[i][j + 3])
    }

    #[test]
    fn hat_matches_componentwise_definition() {
        let m = hat(Vec3::new(1.0, -2.0, 3.0));
        #[rustfmt::skip]
        let expected = Mat3::new(
             0.0, -3.0, -2.0,
             3.0,  0.0, -1.0,
             2.0,  1.0,  0.0,
        );
        assert_eq!(m, expected);
        assert_eq!(hat(Vec3::zeros()), Mat3::zeros());
    }

    #[test]
    fn hat_vee_roundtrip_is_exact() {
        let v = Vec3::new(1.0, -2.0, 3.0);
        assert_eq!(vee(&hat(v)).unwrap(), v);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = rand_vec(&mut rng, 50.0);
            assert_eq!(vee(&hat(v)).unwrap(), v);
        }
    }

    #[test]
    fn hat_preserves_the_two_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let v = rand_vec(&mut rng, 10.0);
            let sv = hat(v).singular_values().max();
            assert!((sv - v.norm()).abs() <= 1e-13 * (1.0 + v.norm()));
        }
    }

    #[test]
    fn vee_rejects_non_skew_input() {
        let sym = Mat3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(vee(&sym), Err(ChartError::NotSkew { .. })));
        assert_eq!(vee(&Mat3::zeros()).unwrap(), Vec3::zeros());
    }

    #[test]
    fn cay_of_zero_is_identity() {
        assert_eq!(cay(Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn cay_matches_gaussian_elimination_oracle() {
        let expected = cay_by_gaussian_elimination(Vec3::new(1.0, 0.0, 0.0));
        let got = cay(Vec3::new(1.0, 0.0, 0.0));
        assert!((got - expected).norm() <= 1e-15);
        // Closed form for this input: rotation by -pi/2 about the x axis.
        #[rustfmt::skip]
        let reference = Mat3::new(
            1.0,  0.0, 0.0,
            0.0,  0.0, 1.0,
            0.0, -1.0, 0.0,
        );
        assert!((got - reference).norm() <= 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v = rand_vec(&mut rng, 3.0);
            assert!((cay(v) - cay_by_gaussian_elimination(v)).norm() <= 1e-13);
        }
    }

    #[test]
    fn cay_lands_in_so3() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let v = rand_vec(&mut rng, 10.0);
            let r = cay(v);
            assert!(rotation_defect(&r) <= 1e-13);
            assert!((r.determinant() - 1.0).abs() <= 1e-13);
        }
    }

    #[test]
    fn matrix_cayley_map_is_an_involution() {
        let matrix_map = |m: &Mat3| -> Mat3 {
            (Mat3::identity() - m) * (Mat3::identity() + m).try_inverse().unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = hat(rand_vec(&mut rng, 2.0));
            let twice = matrix_map(&matrix_map(&q));
            assert!((twice - q).norm() <= 1e-12);
        }
    }

    #[test]
    fn cay_inv_examples() {
        assert_eq!(cay_inv(&Mat3::identity()).unwrap(), Vec3::zeros());
        let v = Vec3::new(0.3, -0.2, 0.1);
        assert!((cay_inv(&cay(v)).unwrap() - v).norm() <= 1e-13);
        // Angle-pi rotation: -1 is an eigenvalue, the chart has no preimage.
        let half_turn = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0));
        assert!(matches!(
            cay_inv(&half_turn),
            Err(ChartError::ChartSingularity { .. })
        ));
    }

    #[test]
    fn cay_roundtrip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let v = rand_vec(&mut rng, 5.0);
            let r = cay(v);
            assert!((cay(cay_inv(&r).unwrap()) - r).norm() <= 1e-12);
        }
    }

    #[test]
    fn dcay_at_zero_base_point() {
        let y = Vec3::new(0.4, -1.0, 2.0);
        assert!((dcay(Vec3::zeros(), y) + 2.0 * hat(y)).norm() <= 1e-14);
        assert_eq!(dcay(Vec3::new(0.3, 0.1, -0.2), Vec3::zeros()), Mat3::zeros());
    }

    #[test]
    fn dcay_matches_central_differences_to_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 0.8);
            let y = rand_vec(&mut rng, 1.0);
            let d = dcay(x, y);
            let err = |eps: f64| -> f64 {
                let fd = (cay(x + eps * y) - cay(x - eps * y)) / (2.0 * eps);
                (fd - d).norm()
            };
            assert!(err(1e-4) <= 1e-6);
            // Central differences of a smooth map: halving eps divides the
            // error by about four, away from the roundoff floor.
            let (e2, e1) = (err(2e-3), err(1e-3));
            if e1 > 1e-11 {
                let ratio = e2 / e1;
                assert!((2.5..6.0).contains(&ratio), "ratio {ratio}");
            }
        }
    }

    #[test]
    fn dcay_forward_difference_is_first_order() {
        let x = Vec3::new(0.2, -0.3, 0.5);
        let y = Vec3::new(-0.7, 0.4, 0.1);
        let eps = 1e-6;
        let fd = (cay(x + eps * y) - cay(x)) / eps;
        assert!((fd - dcay(x, y)).norm() <= 1e-5);
    }

    #[test]
    fn group_error_examples() {
        let r = cay(Vec3::new(0.3, 0.4, -0.1));
        assert_eq!(group_error(&r, &r), 0.0);
        let half_turn = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0));
        // Difference is diag(2, 0, 2); its largest singular value is 2.
        assert!((group_error(&Mat3::identity(), &half_turn) - 2.0).abs() <= 1e-15);
        let s = cay(Vec3::new(-0.2, 0.1, 0.9));
        assert_eq!(group_error(&r, &s), group_error(&s, &r));
    }

    #[test]
    fn chart_guard_threshold_logic() {
        let all_zero = [Vec3::zeros(), Vec3::zeros()];
        let health = chart_guard(&all_zero, DEFAULT_CHART_WARN_THRESHOLD);
        assert_eq!(health.status, ChartStatus::Ok);
        assert_eq!(health.max_stage_norm, 0.0);

        let near = [Vec3::zeros(), Vec3::new(0.99, 0.0, 0.0)];
        assert_eq!(chart_guard(&near, 0.95).status, ChartStatus::NearSingular);

        let mild = [Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.2, 0.0)];
        let health = chart_guard(&mild, 1.0);
        assert_eq!(health.status, ChartStatus::Ok);
        assert!((health.max_stage_norm - 0.2).abs() <= 1e-15);
    }
}
