use std::sync::OnceLock;

use blendvoice::decoder::{BlendshapeSequence, NUM_CHANNELS};
use blendvoice::mesh::{
    apply_blendshapes, fourth_vertices, synthetic_basis, synthetic_target_face,
    triangle_transforms, unit_cube, BlendshapeBasis, TransferSolver, TriangleMesh, ANCHOR,
};
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use proptest::prelude::*;

fn basis() -> &'static BlendshapeBasis {
    static B: OnceLock<BlendshapeBasis> = OnceLock::new();
    B.get_or_init(synthetic_basis)
}

fn face_solver() -> &'static TransferSolver {
    static S: OnceLock<TransferSolver> = OnceLock::new();
    S.get_or_init(|| {
        let target = synthetic_target_face();
        let corr: Vec<usize> = (0..target.num_triangles()).collect();
        TransferSolver::new(&target, &corr).unwrap()
    })
}

fn coeffs(t: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..1.0, t * NUM_CHANNELS)
        .prop_map(move |v| Array2::from_shape_vec((t, NUM_CHANNELS), v).unwrap())
}

fn near_identity(eps: f64) -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform9(-eps..eps).prop_map(|e| Matrix3::identity() + Matrix3::from_row_slice(&e))
}

/// `x -> a·x + t` on every vertex.
fn map_affine(mesh: &TriangleMesh, a: &Matrix3<f64>, t: &Vector3<f64>) -> TriangleMesh {
    let mut v = mesh.vertices.clone();
    for i in 0..mesh.num_vertices() {
        let p = a * mesh.vertex(i) + t;
        for d in 0..3 {
            v[[i, d]] = p[d];
        }
    }
    mesh.with_vertices(v).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn blending_is_affine_in_coefficients(b1 in coeffs(3), b2 in coeffs(3), alpha in 0.0f64..1.0) {
        let mix = &b1 * alpha + &b2 * (1.0 - alpha);
        let v = |b: &Array2<f64>| apply_blendshapes(basis(), &BlendshapeSequence::new(b.clone()).unwrap()).unwrap();
        let lhs = v(&mix);
        let rhs = v(&b1) * alpha + v(&b2) * (1.0 - alpha);
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn solved_objective_beats_rest_guess_and_perturbations(
        b in coeffs(1),
        bump in prop::collection::vec(-1e-3f64..1e-3, 6),
        which in any::<prop::sample::Index>(),
    ) {
        let src = basis();
        let frame = apply_blendshapes(src, &BlendshapeSequence::new(b).unwrap()).unwrap();
        let deformed = src.neutral.with_vertices(frame.index_axis(ndarray::Axis(0), 0).to_owned()).unwrap();
        let s = triangle_transforms(&src.neutral, &deformed).unwrap();

        let solver = face_solver();
        let (verts, fourth) = solver.solve(&s).unwrap();
        let best = solver.objective(&s, &verts, &fourth).unwrap();
        let rest = solver.target();
        let guess = solver.objective(&s, &rest.vertices, &fourth_vertices(rest).unwrap()).unwrap();
        prop_assert!(best <= guess * (1.0 + 1e-12) + 1e-15, "{best} > {guess}");

        // Any other placement with the anchor held fixed does no better.
        let mut v2 = verts.clone();
        let mut f2 = fourth.clone();
        let i = 1 + which.index(rest.num_vertices() - 1);
        let j = which.index(rest.num_triangles());
        for d in 0..3 {
            v2[[i, d]] += bump[d];
            f2[[j, d]] += bump[3 + d];
        }
        prop_assert_eq!(v2.row(ANCHOR), verts.row(ANCHOR));
        let other = solver.objective(&s, &v2, &f2).unwrap();
        prop_assert!(best <= other * (1.0 + 1e-12) + 1e-15, "{best} > {other}");
    }

    #[test]
    fn identity_transfer_onto_affine_targets(a in near_identity(0.3), t in prop::array::uniform3(-2.0f64..2.0)) {
        let src = unit_cube();
        let target = map_affine(&src, &a, &Vector3::from(t));
        let corr: Vec<usize> = (0..target.num_triangles()).collect();
        let out = TransferSolver::new(&target, &corr).unwrap().transfer(&src, &src).unwrap();
        let err = max_abs_diff(&out.vertices, &target.vertices);
        prop_assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn global_similarity_transfers_about_the_anchor(
        a in near_identity(0.3),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.0f64..3.0,
        scale in 0.5f64..2.0,
        t in prop::array::uniform3(-2.0f64..2.0),
    ) {
        // The normal column scales by `scale`, like the edges, only for similarities.
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 0.1);
        let m = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner() * scale;
        let src = unit_cube();
        let target = map_affine(&src, &a, &Vector3::from(t));
        let deformed = map_affine(&src, &m, &Vector3::new(0.5, -0.25, 1.0));
        let corr: Vec<usize> = (0..target.num_triangles()).collect();
        let out = TransferSolver::new(&target, &corr).unwrap().transfer(&src, &deformed).unwrap();
        let p0 = target.vertex(ANCHOR);
        let want = map_affine(&target, &m, &(p0 - m * p0));
        let err = max_abs_diff(&out.vertices, &want.vertices);
        prop_assert!(err <= 1e-8, "{err}");
    }
}
