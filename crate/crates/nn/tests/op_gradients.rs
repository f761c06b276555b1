//! Every differentiable op against central differences on random inputs.

use hardcase_nn::{backward, grad_check, Bound, ParamSet, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Fixed, non-uniform read-out so each output coordinate matters differently.
fn readout(tape: &mut Tape, out: Var) -> Result<Var> {
    let v = tape.value(out);
    let (r, c) = (v.rows(), v.cols());
    let w: Vec<f64> = (0..r * c).map(|i| 0.5 + ((i * 7 + 3) % 5) as f64 * 0.3).collect();
    let w = tape.constant(Tensor::from_vec(r, c, w).unwrap());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn check<F>(ps: &ParamSet, build: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    grad_check(ps, 1e-5, None, |p| {
        let mut tape = Tape::new();
        let b = tape.bind(p);
        let out = build(&mut tape, &b)?;
        let loss = readout(&mut tape, out)?;
        let g = backward(&tape, loss)?;
        Ok((tape.value(loss).item(), g.of(&tape, &b)))
    })
    .unwrap()
    .max_rel_error
}

fn set(tensors: Vec<Tensor>) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, t) in tensors.into_iter().enumerate() {
        ps.push(format!("p{i}"), t);
    }
    ps
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 100,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn matmul_and_affine(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![random(&mut rng, 3, 4, -1.0, 1.0), random(&mut rng, 4, 2, -1.0, 1.0), random(&mut rng, 1, 2, -1.0, 1.0)]);
        let e = check(&ps, |t, b| t.affine(b.var(0), b.var(1), b.var(2)));
        prop_assert!(e < TOL, "err {e}");
    }

    #[test]
    fn broadcasting_binary_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![
            random(&mut rng, 3, 4, -1.0, 1.0),
            random(&mut rng, 3, 1, 0.5, 2.0),
            random(&mut rng, 1, 4, 0.5, 2.0),
            random(&mut rng, 1, 1, 0.5, 2.0),
        ]);
        let e = check(&ps, |t, b| {
            let x = t.mul(b.var(0), b.var(1))?;
            let x = t.div(x, b.var(2))?;
            let x = t.sub(x, b.var(3))?;
            t.add(x, b.var(0))
        });
        prop_assert!(e < TOL, "err {e}");
    }

    #[test]
    fn smooth_unary_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![random(&mut rng, 2, 5, -2.0, 2.0), random(&mut rng, 2, 5, 0.2, 3.0)]);
        let e = check(&ps, |t, b| {
            let x = b.var(0);
            let parts = [
                t.tanh(x), t.sigmoid(x), t.exp(x), t.sin(x), t.cos(x), t.softplus(x),
                t.square(x), t.neg(x), t.scale(x, -1.7), t.add_scalar(x, 0.3),
            ];
            let y = b.var(1);
            let more = [t.log(y), t.sqrt(y)];
            let all: Vec<Var> = parts.into_iter().chain(more).collect();
            t.concat_cols(&all)
        });
        prop_assert!(e < TOL, "err {e}");
    }

    #[test]
    fn clamp_and_wrap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![random(&mut rng, 3, 3, -3.0, 3.0)]);
        let e = check(&ps, |t, b| {
            let c = t.clamp(b.var(0), -1.0, 1.0);
            let s = t.scale(b.var(0), 0.9);
            let w = t.wrap_angle(s);
            t.concat_cols(&[c, w])
        });
        prop_assert!(e < TOL, "err {e}");
    }

    #[test]
    fn reductions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![random(&mut rng, 4, 6, -2.0, 2.0)]);
        let e = check(&ps, |t, b| {
            let x = b.var(0);
            let s = t.sum(x);
            let m = t.mean(x);
            let sc = t.sum_cols(x);
            let sg = t.sum_groups(x, 3)?;
            let mg = t.mean_row_groups(x, 2)?;
            let lse = t.logsumexp_rows(x);
            let ls = t.log_softmax_rows(x);
            let flat = [s, m];
            let st = t.concat_cols(&flat)?;
            let st = t.sum(st);
            let rows = t.concat_cols(&[sc, sg, lse, ls])?;
            let rows = t.add(rows, st)?;
            let mg = t.sum(mg);
            t.add(rows, mg)
        });
        prop_assert!(e < TOL, "err {e}");
    }

    #[test]
    fn structural_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![random(&mut rng, 3, 6, -2.0, 2.0)]);
        let idx: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        let rows: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let e = check(&ps, |t, b| {
            let x = b.var(0);
            let sl = t.slice_cols(x, 1, 3)?;
            let sel = t.select_groups(x, 2, &idx)?;
            let nrm = t.row_normalize(x);
            let g = t.gather_rows(x, &rows)?;
            let g = t.sum(g);
            let out = t.concat_cols(&[sl, sel, nrm])?;
            t.mul(out, g)
        });
        prop_assert!(e < TOL, "err {e}");
    }

    #[test]
    fn row_jacobian_composes(seed in any::<u64>()) {
        // f(u, v) = (u * v, u^2 + sin v) per row, supplied with analytic jacobians.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = set(vec![random(&mut rng, 4, 1, -1.0, 1.0), random(&mut rng, 4, 1, -1.0, 1.0)]);
        let e = check(&ps, |t, b| {
            let (u, v) = (b.var(0), b.var(1));
            let uv: Vec<(f64, f64)> = t.value(u).data().iter().copied().zip(t.value(v).data().iter().copied()).collect();
            let val: Vec<f64> = uv.iter().flat_map(|&(a, c)| [a * c, a * a + c.sin()]).collect();
            let ju: Vec<f64> = uv.iter().flat_map(|&(a, c)| [c, 2.0 * a]).collect();
            let jv: Vec<f64> = uv.iter().flat_map(|&(a, c)| [a, c.cos()]).collect();
            let out = t.row_jacobian(
                Tensor::from_vec(4, 2, val).unwrap(),
                &[u, v],
                vec![Tensor::from_vec(4, 2, ju).unwrap(), Tensor::from_vec(4, 2, jv).unwrap()],
            )?;
            let tq = t.tanh(out);
            t.mul(tq, out)
        });
        prop_assert!(e < TOL, "err {e}");
    }
}
