mod common;

use common::{central_diff, rel_err, tape_value_grad};
use diffcbf::autodiff::{NodeId, Tape};
use diffcbf::linalg::Mat;
use proptest::prelude::*;

/// `‖relu(W x) − r‖² + Σ x² · (x·y) + Σ x / (1 + x²)`, with `W`, `r`, `y` fixed.
fn composite(t: &mut Tape<f64>, x: NodeId, w: &Mat<f64>, target: &[f64], y: &[f64]) -> NodeId {
    let wn = t.constant(w.clone());
    let rn = t.constant_vec(target.to_vec());
    let yn = t.constant_vec(y.to_vec());
    let z = t.matvec(wn, x).unwrap();
    let r = t.relu(z);
    let d = t.sub(r, rn).unwrap();
    let a = t.l2norm_sq(d);
    let sq = t.square(x);
    let s = t.sum(sq);
    let xy = t.dot(x, yn).unwrap();
    let b = t.mul(s, xy).unwrap();
    let den = t.offset(sq, 1.0);
    let q = t.div(x, den).unwrap();
    let c = t.sum(q);
    let ab = t.add(a, b).unwrap();
    t.add(ab, c).unwrap()
}

/// Slicing, stacking, scaling, clamping and matrix products.
fn structural(t: &mut Tape<f64>, x: NodeId, n: usize) -> NodeId {
    let k = n / 2;
    let head = t.slice(x, 0, k).unwrap();
    let tail = t.slice(x, k, n - k).unwrap();
    let first = t.index(x, 0).unwrap();
    let scaled = t.scale_by(first, tail).unwrap();
    let joined = t.concat(&[scaled, head]).unwrap();
    let clamped = t.clamp_min(joined, -0.3);
    let neg = t.neg(clamped);
    let row = t.constant(Mat::from_fn(1, n, |_, j| 0.3 - 0.2 * j as f64));
    let outer = t.matmul(x, row).unwrap();
    let ox = t.matvec(outer, x).unwrap();
    let parts = [t.sum(neg), t.sum(ox), t.scale(first, 3.0)];
    let st = t.stack(&parts).unwrap();
    let sq = t.square(st);
    t.sum(sq)
}

fn check(x: &[f64], f: impl Fn(&mut Tape<f64>, NodeId) -> NodeId + Copy) -> f64 {
    let (_, g) = tape_value_grad(x, f);
    let fd = central_diff(
        |xp| {
            let mut t = Tape::new();
            let leaf = t.leaf(Mat::column(xp.to_vec()));
            let out = f(&mut t, leaf);
            t.scalar(out)
        },
        x,
        1e-6,
    );
    rel_err(&g, &fd)
}

fn away_from_kinks(v: &[f64], margin: f64) -> bool {
    v.iter().all(|z| z.abs() > margin)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn composite_matches_finite_differences(
        x in prop::collection::vec(-2.0f64..2.0, 4),
        w in prop::collection::vec(-1.0f64..1.0, 12),
        y in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let wm = Mat::from_vec(3, 4, w);
        prop_assume!(away_from_kinks(&wm.matvec(&x), 1e-4));
        let err = check(&x, |t, n| composite(t, n, &wm, &y[..3], &y));
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences(x in prop::collection::vec(-1.5f64..1.5, 5)) {
        let n = x.len();
        let k = n / 2;
        let scaled: Vec<f64> = x[k..].iter().map(|v| v * x[0]).collect();
        prop_assume!(scaled.iter().chain(&x[..k]).all(|v| (v + 0.3).abs() > 1e-4));
        let err = check(&x, |t, leaf| structural(t, leaf, n));
        prop_assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn sum_of_vector_has_unit_gradient() {
    let (v, g) = tape_value_grad(&[1.0, -2.0, 0.5], |t, x| t.sum(x));
    assert_eq!(v, -0.5);
    assert_eq!(g, vec![1.0; 3]);
}
