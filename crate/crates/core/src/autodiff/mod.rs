//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Graph::backward`] sweeps the tape once in reverse
//! and accumulates gradients additively across fan-out.
//!
//! Elementwise operations never broadcast. The only mixed-shape operations
//! are explicit: [`Graph::add_row_bias`], [`Graph::scale_rows`] and
//! [`Graph::scale_by`].

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{
    grad_check, grad_check_with, relative_error, GradCheckReport, ParamCheck, DEFAULT_STEP,
    DEFAULT_TOL,
};
pub use graph::{Axis, BackwardFault, Gradients, Graph, ReduceKind, Unary, Var};
pub use params::{NamedParam, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("axis {axis} is invalid for a rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let i = g.constant(Tensor::identity(2));
        let bv = g.constant(b.clone());
        let out = g.matmul(i, bv).unwrap();
        assert_eq!(g.value(out), &b);

        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.constant(mat(&[&[5.0], &[6.0]]));
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).data(), &[17.0, 39.0]);

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let out = g.matmul(z, bv).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn unary_fixed_points() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let one = g.constant(Tensor::vector(vec![1.0]));
        let t = g.tanh(zero).unwrap();
        let s = g.sigmoid(zero).unwrap();
        let e = g.apply_unary(one, Unary::Exp).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        assert_eq!(g.value(s).item(), 0.5);
        assert!((g.value(e).item() - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn log_of_non_positive_reports_index() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, -3.0]));
        match g.apply_unary(x, Unary::Log) {
            Err(AutodiffError::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 2);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.3, 3.3]));
        let y = g.softmax_row(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
        let y = g.softmax_row(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.75).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);

        let x = g.constant(Tensor::vector(vec![-42.0]));
        let y = g.softmax_row(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 999.0, -1000.0]));
        let y = g.softmax_row(x).unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.0);

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let s = g.sum(z).unwrap();
        assert_eq!(g.value(s).item(), 0.0);

        let x = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = g.reduce(x, ReduceKind::Sum, Axis::Dim(0)).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let s = g.reduce(x, ReduceKind::Sum, Axis::Dim(1)).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 7.0]);

        assert!(matches!(
            g.reduce(x, ReduceKind::Sum, Axis::Dim(2)),
            Err(AutodiffError::Axis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::full(&[2, 3], 0.7));
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w), Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::zeros(&[3]));
        let y = g.apply_unary(x, Unary::Exp).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn diamond_fan_out_accumulates() {
        // y = tanh(x) * exp(x): x feeds two consumers.
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.3));
        let a = g.tanh(x).unwrap();
        let b = g.apply_unary(x, Unary::Exp).unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        let t = 0.3f64.tanh();
        let e = 0.3f64.exp();
        let expected = (1.0 - t * t) * e + t * e;
        assert!((grads.get(x).item() - expected).abs() < 1e-15);
        // The two branch gradients sum to the fan-out gradient.
        let branch_a = grads.get(a).item() * (1.0 - t * t);
        let branch_b = grads.get(b).item() * e;
        assert!((grads.get(x).item() - (branch_a + branch_b)).abs() < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let report = grad_check(
            |g, _vars| Ok::<_, AutodiffError>(g.constant(Tensor::scalar(4.2))),
            &store,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        // f(w) = Σ (w_i - c_i)², analytic gradient 2(w - c).
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5, -1.25, 2.0]));
        let c = Tensor::vector(vec![1.0, 0.0, -1.0]);
        let report = grad_check(
            |g, vars| {
                let cv = g.constant(c.clone());
                let d = g.sub(vars[0], cv)?;
                let sq = g.mul(d, d)?;
                g.sum(sq)
            },
            &store,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    /// Every differentiable op, one composite scalar.
    fn every_op(g: &mut Graph, v: &[Var]) -> Result<Var, AutodiffError> {
        let (a, b, bias, s, tau) = (v[0], v[1], v[2], v[3], v[4]);
        let ab = g.matmul(a, b)?; // 3x3
        let biased = g.add_row_bias(ab, bias)?;
        let t = g.tanh(biased)?;
        let sg = g.sigmoid(ab)?;
        let prod = g.mul(t, sg)?;
        let diff = g.sub(prod, t)?;
        let e = g.apply_unary(diff, Unary::Exp)?;
        let shifted = g.apply_unary(e, Unary::AddConst(0.5))?;
        let l = g.apply_unary(shifted, Unary::Log)?;
        let q = g.div(l, shifted)?;
        let rows = g.scale_rows(q, s)?;
        let scaled = g.scale_by(rows, tau)?;
        let tr = g.transpose(scaled)?;
        let sm = g.softmax_row(tr)?;
        let left = g.slice_cols(sm, 0, 1)?;
        let right = g.slice_cols(sm, 1, 3)?;
        let cat = g.concat_cols(&[right, left])?;
        let top = g.slice_rows(cat, 0, 2)?;
        let bottom = g.slice_rows(cat, 2, 3)?;
        let top_sum = g.sum(top)?;
        let bottom_sum = g.sum(bottom)?;
        let tb = g.mul(top_sum, bottom_sum)?;
        let d = g.diag(cat)?;
        let lse = g.logsumexp_rows(scaled, true)?;
        let lse_all = g.logsumexp_rows(cat, false)?;
        let sq = g.mul(lse, lse_all)?;
        let sqrt = g.apply_unary(shifted, Unary::Sqrt)?;
        let rc = g.apply_unary(sqrt, Unary::Recip)?;
        let cl = g.apply_unary(rc, Unary::ClampMin(0.9))?;
        let neg = g.apply_unary(cl, Unary::Negate)?;
        let col_mean = g.reduce(neg, ReduceKind::Mean, Axis::Dim(0))?;
        let t1 = g.sum(d)?;
        let t2 = g.mean(sq)?;
        let t3 = g.sum(col_mean)?;
        let t12 = g.add(t1, t2)?;
        let t123 = g.add(t12, t3)?;
        let t123 = g.add(t123, tb)?;
        g.apply_unary(t123, Unary::Scale(0.5))
    }

    fn every_op_params() -> ParamStore {
        let mut store = ParamStore::new();
        store.add(
            "a",
            mat(&[&[0.3, -0.2], &[0.1, 0.4], &[-0.5, 0.25]]),
        );
        store.add("b", mat(&[&[0.2, -0.1, 0.6], &[0.35, 0.15, -0.3]]));
        store.add("bias", Tensor::vector(vec![0.05, -0.1, 0.2]));
        store.add("s", Tensor::vector(vec![1.5, -0.7, 0.9]));
        store.add("tau", Tensor::scalar(1.3));
        store
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let report = grad_check(every_op, &every_op_params(), DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn sabotaged_tanh_rule_is_caught() {
        let report = grad_check_with(
            every_op,
            &every_op_params(),
            DEFAULT_STEP,
            DEFAULT_TOL,
            |g| g.inject_fault(BackwardFault::Tanh),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let store = every_op_params();
        let run = || {
            let mut g = Graph::new();
            let vars = store.bind(&mut g);
            let out = every_op(&mut g, &vars).unwrap();
            g.value(out).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(row in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(row));
            let y = g.softmax_row(x).unwrap();
            let v = g.value(y).data();
            let total: f64 = v.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&p| p > 0.0 && p <= 1.0));
        }

        #[test]
        fn matmul_gradients_match_differences(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let mut store = ParamStore::new();
            store.add("a", Tensor::new(vec![2, 3], a).unwrap());
            store.add("b", Tensor::new(vec![3, 2], b).unwrap());
            let report = grad_check(
                |g, v| {
                    let c = g.matmul(v[0], v[1])?;
                    let t = g.tanh(c)?;
                    g.sum(t)
                },
                &store,
                DEFAULT_STEP,
                DEFAULT_TOL,
            ).unwrap();
            prop_assert!(report.passed(), "{:?}", report);
        }
    }
}
