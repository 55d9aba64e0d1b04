use super::tape::sigmoid;
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` over every coordinate of `x`.
fn finite_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

#[test]
fn square_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(vec![3.0]);
    let y = t.mul(x, x);
    assert_eq!(t.grad(y, x).unwrap().values(), &[6.0]);
}

#[test]
fn bilinear_gradient() {
    let mut t = Tape::new();
    let p = t.leaf(vec![2.0, 5.0]);
    let x = t.slice(p, 0, 1);
    let y = t.slice(p, 1, 1);
    let f = t.mul(x, y);
    assert_eq!(t.grad(f, p).unwrap().values(), &[5.0, 2.0]);
}

#[test]
fn cube_hvp() {
    let mut t = Tape::higher_order();
    let x = t.leaf(vec![2.0]);
    let x2 = t.mul(x, x);
    let x3 = t.mul(x2, x);
    let h = t.hvp(x3, x, &ParamVector::new(vec![1.0]).unwrap()).unwrap();
    assert!((h.values()[0] - 12.0).abs() < 1e-12);
}

#[test]
fn x2y_hvp() {
    let mut t = Tape::higher_order();
    let p = t.leaf(vec![1.0, 1.0]);
    let x = t.slice(p, 0, 1);
    let y = t.slice(p, 1, 1);
    let xx = t.mul(x, x);
    let f = t.mul(xx, y);
    let h = t.hvp(f, p, &ParamVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
    assert_eq!(h.values(), &[2.0, 2.0]);
}

#[test]
fn grad_graph_requires_higher_order() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1.0]);
    let y = t.mul(x, x);
    assert_eq!(t.grad_graph(y, x), Err(AdError::HigherOrderUnavailable));
    let v = ParamVector::new(vec![1.0]).unwrap();
    assert_eq!(t.hvp(y, x, &v), Err(AdError::HigherOrderUnavailable));
}

#[test]
fn tape_mismatch_is_reported() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.leaf(vec![1.0]);
    let y = b.leaf(vec![1.0]);
    let l = b.mul(y, y);
    assert_eq!(b.grad(l, x), Err(AdError::TapeMismatch));
    let _ = a.len();
}

#[test]
fn non_finite_gradient_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0]);
    let r = t.recip(x);
    assert_eq!(t.grad(r, x), Err(AdError::NonFinite));
}

#[test]
fn log_is_floored() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0, 1e-20]);
    let l = t.ln(x);
    assert!(t.value(l).iter().all(|v| v.is_finite()));
    let s = t.sum(l);
    assert_eq!(t.grad(s, x).unwrap().values(), &[0.0, 0.0]);
}

#[test]
fn nodes_are_topological() {
    let mut t = Tape::higher_order();
    let x = t.leaf(vec![0.3, -0.2]);
    let s = t.tanh(x);
    let m = t.mul(s, x);
    let l = t.sum(m);
    let g = t.grad_graph(l, x).unwrap();
    let l2 = t.dot(g, g);
    let _ = t.grad(l2, x).unwrap();
    for id in 0..t.len() {
        assert!(t.inputs_of(id).iter().all(|&i| i < id));
    }
}

#[test]
fn recorded_and_numeric_gradients_agree() {
    let spec = LayerSpec::two_hidden(3, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = spec.init(&mut rng);
    let mut t = Tape::higher_order();
    let pv = t.watch(&p);
    let out = mlp_forward(&mut t, pv, &spec, &[0.1, -0.4, 0.7]).unwrap();
    let ls = t.log_softmax(out);
    let l = t.sum(ls);
    let numeric = t.grad(l, pv).unwrap();
    let g = t.grad_graph(l, pv).unwrap();
    let recorded = t.value(g).to_vec();
    for (a, b) in numeric.values().iter().zip(&recorded) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn mlp_loss(spec: &LayerSpec, p: &[f64], x: &[f64], target: usize) -> f64 {
    let mut t = Tape::new();
    let pv = t.leaf(p.to_vec());
    let out = mlp_forward(&mut t, pv, spec, x).unwrap();
    let ls = t.log_softmax(out);
    -t.value(ls)[target]
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let spec = LayerSpec::two_hidden(4, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let p = spec.init(&mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let pv = t.watch(&p);
        let out = mlp_forward(&mut t, pv, &spec, &x).unwrap();
        let ls = t.log_softmax(out);
        let pick = t.slice(ls, 1, 1);
        let loss = t.neg(pick);
        let g = t.grad(loss, pv).unwrap();
        let fd = finite_diff(p.values(), 1e-5, |q| mlp_loss(&spec, q, &x, 1));
        assert!(max_rel(g.values(), &fd) < 1e-4, "{}", max_rel(g.values(), &fd));
    }
}

#[test]
fn mlp_zero_weights_give_zero_output() {
    let spec = LayerSpec::two_hidden(3, 4, 2);
    let mut t = Tape::new();
    let p = t.leaf(vec![0.0; spec.param_count()]);
    let out = mlp_forward(&mut t, p, &spec, &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(t.value(out), &[0.0, 0.0]);
}

#[test]
fn single_unit_tanh_of_zero() {
    let spec = LayerSpec::new(vec![1, 1, 1]);
    let mut t = Tape::new();
    // w1 = 1, b1 = 0, w2 = 1, b2 = 0
    let p = t.leaf(vec![1.0, 0.0, 1.0, 0.0]);
    let out = mlp_forward(&mut t, p, &spec, &[0.0]).unwrap();
    assert_eq!(t.value(out), &[0.0]);
}

#[test]
fn mlp_matches_hand_computation() {
    // 2 -> 2 -> 2 -> 1
    let spec = LayerSpec::two_hidden(2, 2, 1);
    let p = vec![
        0.1, -0.2, 0.3, 0.4, // W1
        0.05, -0.05, // b1
        0.5, 0.6, -0.7, 0.8, // W2
        0.01, 0.02, // b2
        0.9, -1.0, // W3
        0.03, // b3
    ];
    let x = [0.5, -1.5];
    let h1 = [
        (0.1 * 0.5 - 0.2 * -1.5 + 0.05f64).tanh(),
        (0.3 * 0.5 + 0.4 * -1.5 - 0.05f64).tanh(),
    ];
    let h2 = [
        (0.5 * h1[0] + 0.6 * h1[1] + 0.01).tanh(),
        (-0.7 * h1[0] + 0.8 * h1[1] + 0.02).tanh(),
    ];
    let expected = 0.9 * h2[0] - 1.0 * h2[1] + 0.03;
    let mut t = Tape::new();
    let pv = t.leaf(p);
    let out = mlp_forward(&mut t, pv, &spec, &x).unwrap();
    assert!((t.value(out)[0] - expected).abs() < 1e-12);
}

#[test]
fn mlp_rejects_wrong_length() {
    let spec = LayerSpec::two_hidden(2, 2, 1);
    let mut t = Tape::new();
    let pv = t.leaf(vec![0.0; 3]);
    assert!(matches!(
        mlp_forward(&mut t, pv, &spec, &[0.0, 0.0]),
        Err(AdError::ShapeMismatch { .. })
    ));
}

/// Plain-number LSTM used as the unrolling oracle.
fn lstm_reference(spec: &RecurrentSpec, p: &[f64], seq: &[Vec<f64>]) -> Vec<f64> {
    let h = spec.hidden;
    let mut off = 0;
    let mut take = |n: usize| {
        let s = p[off..off + n].to_vec();
        off += n;
        s
    };
    let mut layers = Vec::new();
    for l in 0..spec.layers {
        let inp = if l == 0 { spec.input } else { h };
        layers.push((take(4 * h * inp), take(4 * h * h), take(4 * h), inp));
    }
    let hw = take(spec.output * h);
    let hb = take(spec.output);
    let mut hs = vec![vec![0.0; h]; spec.layers];
    let mut cs = vec![vec![0.0; h]; spec.layers];
    let mut logits = vec![];
    for x in seq {
        let mut inp = x.clone();
        for (l, (w, u, b, n_in)) in layers.iter().enumerate() {
            let mut z = vec![0.0; 4 * h];
            for r in 0..4 * h {
                let mut acc = b[r];
                for c in 0..*n_in {
                    acc += w[r * n_in + c] * inp[c];
                }
                for c in 0..h {
                    acc += u[r * h + c] * hs[l][c];
                }
                z[r] = acc;
            }
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                cs[l][k] = f * cs[l][k] + i * g;
                hs[l][k] = o * cs[l][k].tanh();
            }
            inp = hs[l].clone();
        }
        logits = (0..spec.output)
            .map(|r| hb[r] + (0..h).map(|c| hw[r * h + c] * inp[c]).sum::<f64>())
            .collect();
    }
    logits
}

fn small_rnn() -> RecurrentSpec {
    RecurrentSpec {
        input: 3,
        hidden: 4,
        layers: 2,
        output: 3,
    }
}

#[test]
fn rnn_zero_params_zero_logits() {
    let spec = small_rnn();
    let mut t = Tape::new();
    let p = t.leaf(vec![0.0; spec.param_count()]);
    let out = rnn_forward(&mut t, p, &spec, &[vec![1.0, 0.5, -0.5], vec![0.2, 0.1, 0.0]]).unwrap();
    assert_eq!(t.value(out), &[0.0, 0.0, 0.0]);
    let sm = t.softmax(out);
    for v in t.value(sm) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn rnn_matches_manual_unroll() {
    let spec = small_rnn();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = spec.init(&mut rng);
    for len in [1, 3] {
        let seq: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut t = Tape::new();
        let pv = t.watch(&p);
        let out = rnn_forward(&mut t, pv, &spec, &seq).unwrap();
        let expected = lstm_reference(&spec, p.values(), &seq);
        for (a, b) in t.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn rnn_errors() {
    let spec = small_rnn();
    let mut t = Tape::new();
    let p = t.leaf(vec![0.0; spec.param_count()]);
    assert_eq!(rnn_forward(&mut t, p, &spec, &[]), Err(AdError::EmptySequence));
    assert!(matches!(
        rnn_forward(&mut t, p, &spec, &[vec![0.0; 2]]),
        Err(AdError::ShapeMismatch { .. })
    ));
}

#[test]
fn rnn_gradient_matches_finite_differences() {
    let spec = small_rnn();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = spec.init(&mut rng);
    let seq: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let loss_of = |q: &[f64]| {
        let mut t = Tape::new();
        let pv = t.leaf(q.to_vec());
        let out = rnn_forward(&mut t, pv, &spec, &seq).unwrap();
        let ls = t.log_softmax(out);
        -t.value(ls)[2]
    };
    let mut t = Tape::new();
    let pv = t.watch(&p);
    let out = rnn_forward(&mut t, pv, &spec, &seq).unwrap();
    let ls = t.log_softmax(out);
    let pick = t.slice(ls, 2, 1);
    let loss = t.neg(pick);
    let g = t.grad(loss, pv).unwrap();
    let fd = finite_diff(p.values(), 1e-5, loss_of);
    assert!(max_rel(g.values(), &fd) < 1e-4);
}

#[test]
fn quadratic_hvp_matches_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1usize, 3, 7] {
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Symmetric A = B + B^T
        let a: Vec<f64> = (0..n * n).map(|k| b[k] + b[(k % n) * n + k / n]).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::higher_order();
        let pv = t.leaf(p);
        let am = t.constant(a.clone());
        let ap = t.matvec(am, pv, n, n);
        let q = t.dot(pv, ap);
        let f = t.scale(q, 0.5);
        let h = t.hvp(f, pv, &ParamVector::new(v.clone()).unwrap()).unwrap();
        for r in 0..n {
            let expected: f64 = (0..n).map(|c| a[r * n + c] * v[c]).sum();
            assert!((h.values()[r] - expected).abs() < 1e-10);
        }
    }
}

#[test]
fn param_step_rejects_non_finite() {
    let p = ParamVector::new(vec![1.0, 2.0]).unwrap();
    let g = ParamVector::from_vec_unchecked(vec![f64::NAN, 0.0]);
    assert_eq!(p.step(&g, 0.1), Err(AdError::NonFinite));
    assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
    let ok = p.step(&ParamVector::new(vec![1.0, 1.0]).unwrap(), 0.5).unwrap();
    assert_eq!(ok.values(), &[0.5, 1.5]);
}

/// Unary primitives exercised by the property checks.
#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Recip,
    Square,
}

fn apply_unary(t: &mut Tape, op: Unary, x: Var) -> Var {
    match op {
        Unary::Exp => t.exp(x),
        Unary::Ln => t.ln(x),
        Unary::Tanh => t.tanh(x),
        Unary::Sigmoid => t.sigmoid(x),
        Unary::Recip => t.recip(x),
        Unary::Square => t.mul(x, x),
    }
}

fn unary_strategy() -> impl Strategy<Value = Unary> {
    prop_oneof![
        Just(Unary::Exp),
        Just(Unary::Ln),
        Just(Unary::Tanh),
        Just(Unary::Sigmoid),
        Just(Unary::Recip),
        Just(Unary::Square),
    ]
}

proptest! {
    #[test]
    fn primitive_gradients_match_finite_differences(
        op in unary_strategy(),
        xs in prop::collection::vec(0.2f64..2.0, 1..5),
        ws in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let n = xs.len();
        let w = ws[..n].to_vec();
        let f = |q: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(q.to_vec());
            let y = apply_unary(&mut t, op, x);
            let wc = t.constant(w.clone());
            let d = t.dot(y, wc);
            t.scalar(d)
        };
        let mut t = Tape::new();
        let x = t.leaf(xs.clone());
        let y = apply_unary(&mut t, op, x);
        let wc = t.constant(w.clone());
        let d = t.dot(y, wc);
        let g = t.grad(d, x).unwrap();
        let fd = finite_diff(&xs, 1e-5, f);
        prop_assert!(max_rel(g.values(), &fd) < 1e-4);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(
        xs in prop::collection::vec(-1.5f64..1.5, 2..6),
        a in unary_strategy(),
        b in unary_strategy(),
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x.abs() + 0.3).collect();
        let grad_of = |ops: &[Unary]| {
            let mut t = Tape::new();
            let x = t.leaf(shifted.clone());
            let mut total: Option<Var> = None;
            for &op in ops {
                let y = apply_unary(&mut t, op, x);
                let s = t.sum(y);
                total = Some(match total { Some(p) => t.add(p, s), None => s });
            }
            t.grad(total.unwrap(), x).unwrap()
        };
        let both = grad_of(&[a, b]);
        let ga = grad_of(&[a]);
        let gb = grad_of(&[b]);
        for i in 0..shifted.len() {
            let expected = ga.values()[i] + gb.values()[i];
            prop_assert!((both.values()[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_is_a_distribution(
        z in prop::collection::vec(-300.0f64..300.0, 1..8),
        offset in -600.0f64..600.0,
    ) {
        // Large common offsets would overflow a naive exp.
        let z: Vec<f64> = z.iter().map(|x| x / 10.0 + offset).collect();
        let mut t = Tape::new();
        let v = t.leaf(z.clone());
        let s = t.softmax(v);
        let total: f64 = t.value(s).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(t.value(s).iter().all(|p| *p > 0.0));
        let plain = softmax(&z);
        prop_assert!((plain.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
