//! Planar two-link arm geometry.

pub const LINK1: f64 = 1.0;
pub const LINK2: f64 = 1.0;

/// End-effector position for joint angles `q`.
pub fn forward_kinematics(q: [f64; 2]) -> [f64; 2] {
    let q12 = q[0] + q[1];
    [LINK1 * q[0].cos() + LINK2 * q12.cos(), LINK1 * q[0].sin() + LINK2 * q12.sin()]
}

/// `∂ee/∂q` as `[[∂x/∂q1, ∂x/∂q2], [∂y/∂q1, ∂y/∂q2]]`.
pub fn jacobian(q: [f64; 2]) -> [[f64; 2]; 2] {
    let q12 = q[0] + q[1];
    let (s1, c1) = q[0].sin_cos();
    let (s12, c12) = q12.sin_cos();
    [[-LINK1 * s1 - LINK2 * s12, -LINK2 * s12], [LINK1 * c1 + LINK2 * c12, LINK2 * c12]]
}

/// Joint torques `Jᵀ f` produced by an end-effector force `f`.
pub fn contact_torque(q: [f64; 2], f: [f64; 2]) -> [f64; 2] {
    let j = jacobian(q);
    [j[0][0] * f[0] + j[1][0] * f[1], j[0][1] * f[0] + j[1][1] * f[1]]
}

/// Joint angles reaching `p` on the elbow-up branch (`q2 ≤ 0`), or `None` when
/// `p` is out of reach.
pub fn inverse_kinematics(p: [f64; 2]) -> Option<[f64; 2]> {
    let r2 = p[0] * p[0] + p[1] * p[1];
    let c2 = (r2 - LINK1 * LINK1 - LINK2 * LINK2) / (2.0 * LINK1 * LINK2);
    if !(-1.0..=1.0).contains(&c2) {
        return None;
    }
    let q2 = -c2.acos();
    let q1 = p[1].atan2(p[0]) - (LINK2 * q2.sin()).atan2(LINK1 + LINK2 * q2.cos());
    Some([wrap_angle(q1), q2])
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Joint step moving the end effector toward `target`, scaled so no joint
/// moves more than `max_step`.
pub fn cartesian_step(q: [f64; 2], target: [f64; 2], max_step: f64) -> [f64; 2] {
    let ee = forward_kinematics(q);
    let d = [target[0] - ee[0], target[1] - ee[1]];
    let j = jacobian(q);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    if det.abs() < 1e-9 {
        // Near a singularity fall back to the transpose direction.
        let t = contact_torque(q, d);
        return clamp_pair(t, max_step);
    }
    let dq = [(j[1][1] * d[0] - j[0][1] * d[1]) / det, (-j[1][0] * d[0] + j[0][0] * d[1]) / det];
    clamp_pair(dq, max_step)
}

fn clamp_pair(v: [f64; 2], max_step: f64) -> [f64; 2] {
    let m = v[0].abs().max(v[1].abs());
    if m > max_step {
        [v[0] * max_step / m, v[1] * max_step / m]
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn fk_reference_poses() {
        assert!(close(forward_kinematics([0.0, 0.0]), [2.0, 0.0], 1e-15));
        assert!(close(forward_kinematics([FRAC_PI_2, 0.0]), [0.0, 2.0], 1e-15));
        assert!(close(forward_kinematics([FRAC_PI_2, -FRAC_PI_2]), [1.0, 1.0], 1e-15));
    }

    #[test]
    fn torque_at_zero_pose() {
        assert_eq!(contact_torque([0.0, 0.0], [0.0, 1.0]), [2.0, 1.0]);
        assert_eq!(contact_torque([0.3, -1.2], [0.0, 0.0]), [0.0, 0.0]);
    }

    /// Columns of J match central differences of forward kinematics.
    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-6;
        for k in 0..50 {
            let q = [(k as f64 * 0.731).sin() * 3.0, (k as f64 * 1.37).cos() * 3.0];
            let j = jacobian(q);
            for col in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[col] += h;
                qm[col] -= h;
                let (p, m) = (forward_kinematics(qp), forward_kinematics(qm));
                for row in 0..2 {
                    let fd = (p[row] - m[row]) / (2.0 * h);
                    assert!((fd - j[row][col]).abs() < 1e-6, "q={q:?} row {row} col {col}");
                }
            }
            // power consistency: τ·q̇ equals f·ẋ along a small motion
            let f = [0.4, -1.3];
            let dq = [0.01 * (k as f64).sin(), -0.02];
            let tau = contact_torque(q, f);
            let a = forward_kinematics(q);
            let b = forward_kinematics([q[0] + dq[0] * h, q[1] + dq[1] * h]);
            let work_x = (f[0] * (b[0] - a[0]) + f[1] * (b[1] - a[1])) / h;
            assert!((work_x - (tau[0] * dq[0] + tau[1] * dq[1])).abs() < 1e-6);
        }
    }

    #[test]
    fn ik_round_trip() {
        for p in [[1.0, -0.6], [1.0, -1.0], [0.7, -1.0], [1.3, -1.0], [1.5, 0.2]] {
            let q = inverse_kinematics(p).unwrap();
            assert!(q[1] <= 0.0);
            assert!(close(forward_kinematics(q), p, 1e-12));
        }
        assert!(inverse_kinematics([2.5, 0.0]).is_none());
        let q = inverse_kinematics([1.0, -1.0]).unwrap();
        assert!(close(q, [0.0, -FRAC_PI_2], 1e-12));
    }

    #[test]
    fn cartesian_steps_converge() {
        let mut q = inverse_kinematics([1.0, -0.6]).unwrap();
        let target = [1.3, -1.05];
        for _ in 0..30 {
            let dq = cartesian_step(q, target, 0.1);
            assert!(dq[0].abs() <= 0.1 + 1e-15 && dq[1].abs() <= 0.1 + 1e-15);
            q = [q[0] + dq[0], q[1] + dq[1]];
        }
        assert!(close(forward_kinematics(q), target, 1e-9));
    }
}
