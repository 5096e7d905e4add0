use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fdcheck::{check_gradient, jacobian_fd, relative_error};
use super::*;
use crate::math::Real;

fn random_params(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        p.add(name, shape, v).unwrap();
    }
    p
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Full check of a scalar builder: analytic gradient against FD.
fn grad_check<F>(params: &mut ParameterSet, build: F) -> f64
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var, DiffError>,
{
    value_and_grad(params, &build).unwrap();
    let analytic = params.flat_grads();
    let report = check_gradient(params, &analytic, None, |p| {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.value(l).item())
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn sum_of_squares_gradient() {
    let mut p = ParameterSet::new();
    let id = p.add("theta", &[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let loss = value_and_grad(&mut p, |t, p| {
        let th = t.param(p, id)?;
        let sq = t.mul(th, th)?;
        t.sum(sq)
    })
    .unwrap();
    assert_eq!(loss, 1.0 + 4.0 + 0.25 + 9.0);
    assert_eq!(p.grad(id), &[2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut p = ParameterSet::new();
    let id = p.add("theta", &[3], vec![1.0, 2.0, 3.0]).unwrap();
    p.grad_mut(id)[0] = 7.0;
    value_and_grad(&mut p, |t, p| {
        let _ = t.param(p, id)?;
        t.scalar(4.0)
    })
    .unwrap();
    assert!(p.grad(id).iter().all(|g| *g == 0.0));
}

#[test]
fn foreign_variable_is_structural_error() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.scalar(1.0).unwrap();
    let y = b.scalar(2.0).unwrap();
    assert!(matches!(b.add(x, y), Err(DiffError::Structural(_))));
    let mut p = ParameterSet::new();
    assert!(matches!(backprop(&b, x, &mut p), Err(DiffError::Structural(_))));
}

#[test]
fn non_finite_names_operation() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[1e300, 1e300]])).unwrap();
    let err = t.mul(x, x).unwrap_err();
    assert_eq!(err, DiffError::NonFinite { op: "mul" });
    let neg = t.scalar(-1.0).unwrap();
    assert_eq!(t.sqrt(neg).unwrap_err(), DiffError::NonFinite { op: "sqrt" });
}

fn mlp_loss(
    t: &mut Tape,
    p: &ParameterSet,
    x: &Tensor,
    y: &Tensor,
    kind: Activation,
) -> Result<Var, DiffError> {
    let ids: Vec<ParamId> = ["w1", "b1", "w2", "b2"].iter().map(|n| p.find(n).unwrap()).collect();
    let xv = t.constant(x.clone())?;
    let w1 = t.param(p, ids[0])?;
    let b1 = t.param(p, ids[1])?;
    let w2 = t.param(p, ids[2])?;
    let b2 = t.param(p, ids[3])?;
    let h = t.matmul_t(xv, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.act(h, kind)?;
    let o = t.matmul_t(h, w2)?;
    let o = t.add_row(o, b2)?;
    let yv = t.constant(y.clone())?;
    let d = t.sub(o, yv)?;
    let sq = t.mul(d, d)?;
    t.mean(sq)
}

#[test]
fn mlp_mse_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [Activation::Tanh, Activation::Relu, Activation::LeakyRelu(0.2)] {
        let mut p = random_params(&mut rng, &[("w1", &[8, 4]), ("b1", &[8]), ("w2", &[3, 8]), ("b2", &[3])]);
        let x = random_tensor(&mut rng, &[6, 4]);
        let y = random_tensor(&mut rng, &[6, 3]);
        let err = grad_check(&mut p, |t, p| mlp_loss(t, p, &x, &y, kind));
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn repeated_backprop_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = random_params(&mut rng, &[("w1", &[16, 4]), ("b1", &[16]), ("w2", &[3, 16]), ("b2", &[3])]);
    let x = random_tensor(&mut rng, &[32, 4]);
    let y = random_tensor(&mut rng, &[32, 3]);
    let mut t = Tape::new();
    let l = mlp_loss(&mut t, &p, &x, &y, Activation::Relu).unwrap();
    backprop(&t, l, &mut p).unwrap();
    let g1 = p.flat_grads();
    backprop(&t, l, &mut p).unwrap();
    assert_eq!(g1, p.flat_grads());
}

#[test]
fn conv_pool_and_gather_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = random_params(
        &mut rng,
        &[("k1", &[3, 2, 4, 4]), ("c1", &[3]), ("k2", &[2, 3, 3, 3]), ("c2", &[2])],
    );
    let img = random_tensor(&mut rng, &[2, 8, 8]);
    let mut map = SparseMap::new();
    map.push_row(&[(0, 0.25), (1, 0.75)]);
    map.push_row(&[(5, 1.0)]);
    map.push_row(&[(10, 0.5), (14, -0.5), (15, 0.3)]);
    let build = |t: &mut Tape, p: &ParameterSet| {
        let x = t.constant(img.clone())?;
        let k1 = t.param(p, ParamId(0))?;
        let c1 = t.param(p, ParamId(1))?;
        let k2 = t.param(p, ParamId(2))?;
        let c2 = t.param(p, ParamId(3))?;
        let h = t.conv2d(x, k1, 2, 1)?;
        let h = t.add_channel(h, c1)?;
        let h = t.act(h, Activation::Tanh)?;
        let h2 = t.conv2d(h, k2, 1, 1)?;
        let h2 = t.add_channel(h2, c2)?;
        let pooled = t.global_avg_pool(h2)?;
        let g = t.gather(h2, map.clone())?;
        let ps = t.row_sum_sq(pooled)?;
        let gs = t.row_sum_sq(g)?;
        let gs = t.sqrt(gs)?;
        let a = t.sum(ps)?;
        let b = t.mean(gs)?;
        t.add(a, b)
    };
    let err = grad_check(&mut p, build);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_output_resolution_follows_stride() {
    let mut t = Tape::new();
    let k = t.constant(Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
    for s in [8usize, 16] {
        let x = t.constant(Tensor::zeros(&[1, s, s])).unwrap();
        let y = t.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[1, s / 2, s / 2]);
    }
}

#[test]
fn column_ops_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = random_params(&mut rng, &[("a", &[5, 3]), ("b", &[5, 2]), ("r", &[1, 5]), ("m", &[5, 5])]);
    let mask = random_tensor(&mut rng, &[5, 5]);
    let build = |t: &mut Tape, p: &ParameterSet| {
        let a = t.param(p, ParamId(0))?;
        let b = t.param(p, ParamId(1))?;
        let r = t.param(p, ParamId(2))?;
        let m = t.param(p, ParamId(3))?;
        let ab = t.concat_cols(a, b)?;
        let c = t.column(ab, 4)?;
        let s = t.mul_col(c, ab)?;
        let s = t.sub_row(s, r)?;
        let s = t.scale(s, 0.7)?;
        let s = t.mul_const(s, mask.clone())?;
        let s = t.add(s, m)?;
        let st = t.concat_rows(&[s, ab])?;
        let st = t.rows(st, 3, 5)?;
        let st = t.reshape(st, &[25])?;
        let sq = t.mul(st, st)?;
        let ab = t.abs(ab)?;
        let l1 = t.mean(ab)?;
        let sq = t.sum(sq)?;
        t.add(sq, l1)
    };
    let err = grad_check(&mut p, build);
    assert!(err < 1e-4, "{err}");
}

/// Generic two-layer tanh MLP `R⁴ → R³` used as a forward-mode oracle.
fn mlp_generic<R: Real>(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], x: &[R; 4]) -> [R; 3] {
    let hidden = b1.len();
    let mut h = Vec::with_capacity(hidden);
    for i in 0..hidden {
        let mut s = R::cst(b1[i]);
        for k in 0..4 {
            s = s + x[k].scale(w1[i * 4 + k]);
        }
        // tanh through exp, so that the generic path stays in `Real`
        let e = (s.scale(2.0)).exp();
        h.push((e - R::cst(1.0)) / (e + R::cst(1.0)));
    }
    let mut out = [R::cst(0.0); 3];
    for (r, o) in out.iter_mut().enumerate() {
        let mut s = R::cst(b2[r]);
        for (i, hv) in h.iter().enumerate() {
            s = s + hv.scale(w2[r * hidden + i]);
        }
        *o = s;
    }
    out
}

#[test]
fn forward_jacobian_of_mlp_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let r = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (w1, b1, w2, b2) = (r(&mut rng, 40), r(&mut rng, 10), r(&mut rng, 30), r(&mut rng, 3));
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let (_, j) = forward_jacobian(|d| mlp_generic(&w1, &b1, &w2, &b2, d), x).unwrap();
        let fd = jacobian_fd(|p| mlp_generic(&w1, &b1, &w2, &b2, &p), x, 1e-5);
        for a in 0..3 {
            for b in 0..4 {
                worst = worst.max(relative_error(j[a][b], fd[a][b]));
            }
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

/// Tape version of a tanh MLP carried as a [`DualStack`].
fn dual_mlp(t: &mut Tape, p: &ParameterSet, x: &[[f64; 4]]) -> Result<DualStack, DiffError> {
    let n = x.len();
    let mut rows = Vec::with_capacity(5 * n * 4);
    for r in x {
        rows.extend_from_slice(r);
    }
    for d in 0..4 {
        for _ in 0..n {
            let mut e = [0.0; 4];
            e[d] = 1.0;
            rows.extend_from_slice(&e);
        }
    }
    let input = t.constant(Tensor::new(&[5 * n, 4], rows)?)?;
    let s = DualStack { stack: input, n };
    let w1 = t.param(p, ParamId(0))?;
    let b1 = t.param(p, ParamId(1))?;
    let w2 = t.param(p, ParamId(2))?;
    let b2 = t.param(p, ParamId(3))?;
    let s = s.linear(t, w1, b1)?.act(t, Activation::Tanh)?;
    s.linear(t, w2, b2)
}

#[test]
fn dual_stack_tangents_match_forward_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_params(&mut rng, &[("w1", &[10, 4]), ("b1", &[10]), ("w2", &[3, 10]), ("b2", &[3])]);
    let x = [[0.1, -0.3, 0.5, 0.2], [0.9, 0.4, -0.7, 0.8]];
    let mut t = Tape::new();
    let s = dual_mlp(&mut t, &p, &x).unwrap();
    for (i, xi) in x.iter().enumerate() {
        let (v, j) = forward_jacobian(
            |d| mlp_generic(p.value(ParamId(0)), p.value(ParamId(1)), p.value(ParamId(2)), p.value(ParamId(3)), d),
            *xi,
        )
        .unwrap();
        let prim = s.primal(&mut t).unwrap();
        for c in 0..3 {
            assert!((t.value(prim).at(i, c) - v[c]).abs() < 1e-12);
        }
        for d in 0..4 {
            let tg = s.tangent(&mut t, d).unwrap();
            for c in 0..3 {
                assert!((t.value(tg).at(i, c) - j[c][d]).abs() < 1e-12);
            }
        }
    }
}

/// Convective residual `u_t + (u·∇)u` of the dual MLP, summed over points.
fn convective_residual(t: &mut Tape, p: &ParameterSet, x: &[[f64; 4]]) -> Result<Var, DiffError> {
    let s = dual_mlp(t, p, x)?;
    let u = s.primal(t)?;
    let mut r = s.tangent(t, 3)?;
    for k in 0..3 {
        let uk = t.column(u, k)?;
        let jk = s.tangent(t, k)?;
        let term = t.mul_col(uk, jk)?;
        r = t.add(r, term)?;
    }
    Ok(r)
}

#[test]
fn nested_gradient_matches_fd_through_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = random_params(&mut rng, &[("w1", &[6, 4]), ("b1", &[6]), ("w2", &[3, 6]), ("b2", &[3])]);
    // zero last layer weights: the residual depends on the last bias only
    // through the convective product, which vanishes with the Jacobian
    p.value_mut(ParamId(2)).iter_mut().for_each(|v| *v = 0.0);
    let x = [[0.2, 0.1, -0.4, 0.3], [-0.5, 0.6, 0.2, 0.9], [0.0, 0.0, 0.0, 0.0]];
    let build = |t: &mut Tape, p: &ParameterSet| {
        let r = convective_residual(t, p, &x)?;
        let sq = t.mul(r, r)?;
        t.sum(sq)
    };
    nested_grad(&mut p, |t, p| convective_residual(t, p, &x)).unwrap();
    let analytic = p.flat_grads();
    let report = check_gradient(&mut p, &analytic, None, |p| {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.value(l).item())
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    // random last layer as well
    let mut p = random_params(&mut rng, &[("w1", &[6, 4]), ("b1", &[6]), ("w2", &[3, 6]), ("b2", &[3])]);
    nested_grad(&mut p, |t, p| convective_residual(t, p, &x)).unwrap();
    let analytic = p.flat_grads();
    let report = check_gradient(&mut p, &analytic, None, |p| {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.value(l).item())
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// `u = A·(x, y, z, t)` on the tape, returning the divergence per point.
fn linear_divergence(t: &mut Tape, p: &ParameterSet, x: &[[f64; 4]]) -> Result<Var, DiffError> {
    let n = x.len();
    let mut rows = Vec::new();
    for r in x {
        rows.extend_from_slice(r);
    }
    for d in 0..4 {
        for _ in 0..n {
            let mut e = [0.0; 4];
            e[d] = 1.0;
            rows.extend_from_slice(&e);
        }
    }
    let input = t.constant(Tensor::new(&[5 * n, 4], rows)?)?;
    let a = t.param(p, ParamId(0))?;
    let stack = t.matmul_t(input, a)?;
    let s = DualStack { stack, n };
    let mut div: Option<Var> = None;
    for k in 0..3 {
        let jk = s.tangent(t, k)?;
        let c = t.column(jk, k)?;
        div = Some(match div {
            None => c,
            Some(d) => t.add(d, c)?,
        });
    }
    Ok(div.unwrap())
}

#[test]
fn divergence_gradient_of_linear_field_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = random_params(&mut rng, &[("A", &[3, 4])]);
    let x = [[0.3, 0.2, 0.1, 0.5], [1.0, -1.0, 2.0, 0.0]];
    nested_grad(&mut p, |t, p| linear_divergence(t, p, &x)).unwrap();
    let a = p.value(ParamId(0)).to_vec();
    let div = a[0] + a[5] + a[10];
    let n = x.len() as f64;
    for r in 0..3 {
        for c in 0..4 {
            let expect = if r == c { 2.0 * div * n } else { 0.0 };
            assert!((p.grad(ParamId(0))[r * 4 + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_parameter_network_has_zero_gradient() {
    let mut p = ParameterSet::new();
    p.add("w1", &[6, 4], vec![0.0; 24]).unwrap();
    p.add("b1", &[6], vec![0.0; 6]).unwrap();
    p.add("w2", &[3, 6], vec![0.0; 18]).unwrap();
    p.add("b2", &[3], vec![0.0; 3]).unwrap();
    let x = [[0.2, 0.1, -0.4, 0.3]];
    let v = nested_grad(&mut p, |t, p| convective_residual(t, p, &x)).unwrap();
    assert_eq!(v, 0.0);
    assert!(p.flat_grads().iter().all(|g| *g == 0.0));
}

fn affine_map(m: &[f64; 12], x: &[f64; 4]) -> [f64; 4] {
    let mut y = [0.0; 4];
    for r in 0..3 {
        y[r] = (0..4).map(|c| m[r * 4 + c] * x[c]).sum::<f64>();
        y[r] = libm::sin(y[r]);
    }
    y[3] = x[3];
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_rule_holds(
        m in proptest::array::uniform12(-1.0f64..1.0),
        x in proptest::array::uniform4(-1.0f64..1.0),
    ) {
        // g(x) = sin(M x) lifted to R⁴, f = cos-based map to R³
        let g_dual = |d: &[Dual; 4]| -> [Dual; 4] {
            let mut y = [Dual::constant(0.0); 4];
            for r in 0..3 {
                let mut s = Dual::constant(0.0);
                for c in 0..4 {
                    s = s + d[c].scale(m[r * 4 + c]);
                }
                y[r] = s.sin();
            }
            y[3] = d[3];
            y
        };
        let f_dual = |d: &[Dual; 4]| -> [Dual; 3] {
            [d[0] * d[1] + d[3].cos(), d[2].exp() - d[0], d[1] * d[1] * d[3]]
        };
        let (_, jfg) = forward_jacobian(|d| f_dual(&g_dual(d)), x).unwrap();
        let gx = affine_map(&m, &x);
        let (_, jf) = forward_jacobian(f_dual, gx).unwrap();
        let gd = g_dual(&Dual::seed(x));
        for r in 0..3 {
            for c in 0..4 {
                let prod: f64 = (0..4).map(|k| jf[r][k] * gd[k].tangent[c]).sum();
                prop_assert!((prod - jfg[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_ops_match_fd_on_random_inputs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_params(&mut rng, &[("w1", &[5, 4]), ("b1", &[5]), ("w2", &[3, 5]), ("b2", &[3])]);
        let x = random_tensor(&mut rng, &[4, 4]);
        let y = random_tensor(&mut rng, &[4, 3]);
        let err = grad_check(&mut p, |t, p| mlp_loss(t, p, &x, &y, Activation::Tanh));
        prop_assert!(err < 1e-4);
    }
}
