//! Finite-difference checks of every tape primitive over random shapes.

use bigg_core::numerics::{grad_check, GradCheckConfig, ParamStore, Tape, Tensor, Var};
use bigg_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Registers `inputs` as parameters and grad-checks `sum(w ⊙ f(inputs))`
/// for a random weighting `w`, so every output entry gets its own cotangent.
fn check<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> std::result::Result<(), TestCaseError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("x{i}"), t).unwrap())
        .collect();
    let shape = {
        let mut tape = Tape::new(Default::default());
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let y = f(&mut tape, &vars).unwrap();
        tape.value(y).shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
    let report = grad_check(
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let y = f(tape, &vars)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            tape.sum(p)
        },
        &store,
        &GradCheckConfig::default(),
    )
    .unwrap();
    prop_assert!(
        report.passed,
        "max rel err {:.3e} at {:?}",
        report.max_relative_error,
        report.offending_parameter
    );
    Ok(())
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g), random(r, c, &mut g)], s, |t, v| t.add(v[0], v[1]))?;
    }

    #[test]
    fn subtract((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g), random(r, c, &mut g)], s, |t, v| t.sub(v[0], v[1]))?;
    }

    #[test]
    fn elementwise_multiply((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g), random(r, c, &mut g)], s, |t, v| t.mul(v[0], v[1]))?;
    }

    #[test]
    fn matrix_multiply((r, c, s) in dims(), k in 1usize..5) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, k, &mut g), random(k, c, &mut g)], s, |t, v| t.matmul(v[0], v[1]))?;
    }

    #[test]
    fn concatenate((r, c, s) in dims(), k in 1usize..4, axis in 0usize..2) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        let b = if axis == 0 { random(k, c, &mut g) } else { random(r, k, &mut g) };
        check(vec![random(r, c, &mut g), b], s, move |t, v| t.concat(v, axis))?;
    }

    #[test]
    fn gather_rows((r, c, s) in dims(), n in 1usize..7) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        let index: Vec<usize> = (0..n).map(|_| g.random_range(0..r)).collect();
        check(vec![random(r, c, &mut g)], s, move |t, v| t.gather_rows(v[0], index.clone()))?;
    }

    #[test]
    fn scatter_add_rows((r, c, s) in dims(), rows in 1usize..5) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        let index: Vec<usize> = (0..r).map(|_| g.random_range(0..rows)).collect();
        check(vec![random(r, c, &mut g)], s, move |t, v| t.scatter_add_rows(v[0], index.clone(), rows))?;
    }

    #[test]
    fn segment_softmax((n, k, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        let segments: Vec<usize> = (0..n).map(|_| g.random_range(0..k)).collect();
        check(vec![random(n, 1, &mut g)], s, move |t, v| t.segment_softmax(v[0], segments.clone(), k))?;
    }

    #[test]
    fn row_max((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        // Distinct entries per row keep the max away from ties.
        let x = random(r, c, &mut g);
        for i in 0..r {
            let mut row = x.row_slice(i).to_vec();
            row.sort_by(f64::total_cmp);
            prop_assume!(row.windows(2).all(|w| w[1] - w[0] > 1e-3));
        }
        check(vec![x], s, |t, v| t.row_max(v[0]))?;
    }

    #[test]
    fn sum((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, |t, v| t.sum(v[0]))?;
    }

    #[test]
    fn sigmoid((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, |t, v| t.sigmoid(v[0]))?;
    }

    #[test]
    fn tanh((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, |t, v| t.tanh(v[0]))?;
    }

    #[test]
    fn relu((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![off_zero(r, c, &mut g)], s, |t, v| t.relu(v[0]))?;
    }

    #[test]
    fn scale((r, c, s) in dims(), k in -3.0f64..3.0) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, move |t, v| t.scale(v[0], k))?;
    }

    #[test]
    fn add_scalar((r, c, s) in dims(), k in -3.0f64..3.0) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, move |t, v| t.add_scalar(v[0], k))?;
    }

    #[test]
    fn scalar_multiply((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(1, 1, &mut g), random(r, c, &mut g)], s, |t, v| t.scalar_mul(v[0], v[1]))?;
    }

    #[test]
    fn dropout((r, c, s) in dims(), rate in 0.0f64..0.9) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        let mask: Vec<f64> = (0..r * c).map(|_| if g.random_bool(1.0 - rate) { 1.0 } else { 0.0 }).collect();
        check(vec![random(r, c, &mut g)], s, move |t, v| t.dropout_with_mask(v[0], mask.clone(), rate))?;
    }

    #[test]
    fn reshape((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, move |t, v| t.reshape(v[0], vec![c, r]))?;
    }

    #[test]
    fn transpose((r, c, s) in dims()) {
        let mut g = ChaCha8Rng::seed_from_u64(s);
        check(vec![random(r, c, &mut g)], s, |t, v| t.transpose(v[0]))?;
    }
}
