//! Analytic gradients versus central finite differences.

use std::rc::Rc;

use latemu_tensor::nn::{Linear, LayerNorm};
use latemu_tensor::{Graph, Padding, ParamStore, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-2;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted-sum probe `sum(w * f(x))` evaluated outside the graph in f64.
fn probe(out: &Tensor, w: &[f32]) -> f64 {
    out.data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Returns the worst relative error over all inputs.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let out_shape = g.shape(out).to_vec();
    let w = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng(99));
    let wv = g.constant(w.clone());
    let weighted = g.mul(out, wv).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0f64; input.numel()];
        for j in 0..input.numel() {
            let eval = |delta: f32| {
                let mut shifted: Vec<Tensor> = inputs.to_vec();
                shifted[k].data_mut()[j] += delta;
                let mut ge = Graph::inference();
                let vs: Vec<Var> = shifted.into_iter().map(|t| ge.constant(t)).collect();
                let o = f(&mut ge, &vs);
                probe(ge.value(o), w.data())
            };
            numeric[j] = (eval(H) - eval(-H)) / (2.0 * H as f64);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.sq_norm().sqrt().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        if scale > 1e-9 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut rng(seed))
}

macro_rules! assert_grad {
    ($name:expr, $err:expr) => {{
        let e = $err;
        assert!(e < TOL, "{}: relative error {e:.2e}", $name);
    }};
}

#[test]
fn elementwise_binary_ops() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[3, 4], 2);
    assert_grad!("add", check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()));
    assert_grad!("sub", check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()));
    assert_grad!("mul", check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap()));
    assert_grad!("scale", check(&[a], |g, v| g.scale(v[0], -1.7).unwrap()));
}

#[test]
fn broadcasting_ops() {
    let x = rand_t(&[2, 3, 4], 3);
    let b = rand_t(&[4], 4);
    let b2 = rand_t(&[3, 4], 5);
    assert_grad!("add_trailing", check(&[x.clone(), b.clone()], |g, v| g.add_trailing(v[0], v[1]).unwrap()));
    assert_grad!("add_trailing2", check(&[x.clone(), b2], |g, v| g.add_trailing(v[0], v[1]).unwrap()));
    assert_grad!("mul_trailing", check(&[x.clone(), b], |g, v| g.mul_trailing(v[0], v[1]).unwrap()));
    assert_grad!("broadcast_mid", check(&[rand_t(&[2, 4], 6)], |g, v| g.broadcast_mid(v[0], 3).unwrap()));
    assert_grad!("mul_scalar", check(&[x, rand_t(&[1], 7)], |g, v| g.mul_scalar(v[0], v[1]).unwrap()));
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_t(&[4, 3], 8) } else { rand_t(&[3, 4], 8) };
        let b = if tb { rand_t(&[5, 4], 9) } else { rand_t(&[4, 5], 9) };
        assert_grad!(format!("matmul {ta} {tb}"), check(&[a, b], |g, v| g.matmul(v[0], v[1], ta, tb).unwrap()));
        let a = if ta { rand_t(&[2, 4, 3], 10) } else { rand_t(&[2, 3, 4], 10) };
        let b = if tb { rand_t(&[2, 5, 4], 11) } else { rand_t(&[2, 4, 5], 11) };
        assert_grad!(format!("bmm {ta} {tb}"), check(&[a, b], |g, v| g.matmul(v[0], v[1], ta, tb).unwrap()));
    }
}

#[test]
fn conv2d_both_paddings() {
    for pad in [Padding::Zero, Padding::Periodic] {
        let x = rand_t(&[2, 4, 5, 3], 12);
        let w = rand_t(&[3, 3, 3, 2], 13);
        assert_grad!(format!("conv3 {pad:?}"), check(&[x.clone(), w], |g, v| g.conv2d(v[0], v[1], pad).unwrap()));
        let w1 = rand_t(&[1, 1, 3, 4], 14);
        assert_grad!(format!("conv1 {pad:?}"), check(&[x, w1], |g, v| g.conv2d(v[0], v[1], pad).unwrap()));
    }
}

#[test]
fn activations_and_normalizations() {
    let x = rand_t(&[3, 6], 15);
    assert_grad!("silu", check(&[x.clone()], |g, v| g.silu(v[0]).unwrap()));
    assert_grad!("saturate", check(&[x.scale_for_test(3.0)], |g, v| g.saturate(v[0], 5.0).unwrap()));
    assert_grad!("layer_norm", check(&[x.clone()], |g, v| g.layer_norm(v[0], 1e-5).unwrap()));
    assert_grad!("softmax", check(&[x], |g, v| g.softmax(v[0]).unwrap()));
}

#[test]
fn layout_ops() {
    let x = rand_t(&[2, 3, 4], 16);
    assert_grad!("reshape", check(&[x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap()));
    assert_grad!("permute", check(&[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    assert_grad!("slice", check(&[x.clone()], |g, v| g.slice(v[0], 1, 1, 2).unwrap()));
    let y = rand_t(&[2, 2, 4], 17);
    assert_grad!("concat", check(&[x, y], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()));
}

#[test]
fn reductions_and_losses() {
    let a = rand_t(&[3, 5], 18);
    // keep |a - b| well away from zero for the kink of |.|
    let b = a.map(|v| v + if v > 0.0 { -0.6 } else { 0.6 });
    assert_grad!("sum", check(&[a.clone()], |g, v| g.sum(v[0]).unwrap()));
    assert_grad!("mean", check(&[a.clone()], |g, v| g.mean(v[0]).unwrap()));
    assert_grad!("mse", check(&[a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]).unwrap()));
    assert_grad!("l1", check(&[a, b], |g, v| g.l1(v[0], v[1]).unwrap()));
}

#[test]
fn rotary_embedding() {
    let x = rand_t(&[2, 3, 6], 19);
    let angles: Vec<f32> = (0..6).map(|i| 0.3 * i as f32 + 0.1).collect();
    let cos = Rc::new(angles.iter().map(|a| a.cos()).collect::<Vec<_>>());
    let sin = Rc::new(angles.iter().map(|a| a.sin()).collect::<Vec<_>>());
    assert_grad!("rope", check(&[x], move |g, v| g.rope(v[0], cos.clone(), sin.clone(), 2).unwrap()));
}

#[test]
fn mse_derivative_at_three() {
    // d/dx mean((x - 0)^2) = 2x / N
    let n = 8;
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[n], 3.0), true);
    let zero = g.constant(Tensor::zeros(&[n]));
    let loss = g.mse(x, zero).unwrap();
    g.backward(loss).unwrap();
    for &d in g.grad(x).unwrap().data() {
        assert!((d - 6.0 / n as f32).abs() < 1e-6);
    }
}

#[test]
fn trivial_backward_examples() {
    let mut g = Graph::new();
    let x = g.input(rand_t(&[4], 20), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 4.0);
    assert!(matches!(g.backward(y), Err(TensorError::GraphConsumed)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.input(rand_t(&[3], 21), true);
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut r = rng(22);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 5, 8, true, &mut r);
    let ln = LayerNorm::new(&mut store, "ln", 8, true);
    let l2 = Linear::new(&mut store, "l2", 8, 8, true, &mut r);
    let l3 = Linear::new(&mut store, "l3", 8, 3, true, &mut r);
    let x = rand_t(&[4, 5], 23);
    let target = rand_t(&[4, 3], 24);
    // perturb biases / affine so every parameter carries signal
    for id in store.ids().collect::<Vec<_>>() {
        let noise = Tensor::uniform(store.get(id).shape(), -0.3, 0.3, &mut r);
        let p = store.get_mut(id);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    let forward = |g: &mut Graph, store: &ParamStore| {
        let xi = g.constant(x.clone());
        let h = l1.forward(g, store, xi).unwrap();
        let h = ln.forward(g, store, h).unwrap();
        let h = g.silu(h).unwrap();
        let h = l2.forward(g, store, h).unwrap();
        let h = g.silu(h).unwrap();
        let y = l3.forward(g, store, h).unwrap();
        let t = g.constant(target.clone());
        g.mse(y, t).unwrap()
    };
    let mut g = Graph::new();
    let loss = forward(&mut g, &store);
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).unwrap().clone();
        for j in 0..store.get(id).numel() {
            let eval = |delta: f32| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += delta;
                let mut ge = Graph::inference();
                let l = forward(&mut ge, &s);
                ge.value(l).item() as f64
            };
            let num = (eval(H) - eval(-H)) / (2.0 * H as f64);
            diff += (analytic.data()[j] as f64 - num).powi(2);
            norm += num * num;
        }
    }
    let rel = diff.sqrt() / norm.sqrt();
    assert!(rel < TOL, "mlp relative error {rel:.2e}");
}

#[test]
fn periodic_conv_commutes_with_cyclic_shift() {
    let x = rand_t(&[1, 8, 8, 2], 25);
    let w = rand_t(&[3, 3, 2, 3], 26);
    let roll = |t: &Tensor, dy: usize, dx: usize| {
        let s = t.shape().to_vec();
        let mut out = Tensor::zeros(&s);
        for y in 0..s[1] {
            for xx in 0..s[2] {
                for c in 0..s[3] {
                    let src = (y * s[2] + xx) * s[3] + c;
                    let dst = (((y + dy) % s[1]) * s[2] + (xx + dx) % s[2]) * s[3] + c;
                    out.data_mut()[dst] = t.data()[src];
                }
            }
        }
        out
    };
    let conv = |t: Tensor| {
        let mut g = Graph::inference();
        let xv = g.constant(t);
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, Padding::Periodic).unwrap();
        g.value(y).clone()
    };
    let a = roll(&conv(x.clone()), 3, 5);
    let b = conv(roll(&x, 3, 5));
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-5);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(27);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 6, 16, true, &mut r);
        let mut g = Graph::inference();
        let x = g.constant(rand_t(&[3, 6], 28));
        let y = l1.forward(&mut g, &store, x).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2], 3e38), true);
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { op: "scale" }));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]), true);
    let b = g.input(Tensor::zeros(&[3, 2]), true);
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(g.matmul(a, a, false, false).is_err());
    assert!(g.matmul(a, a, false, true).is_ok());
}

trait ScaleForTest {
    fn scale_for_test(&self, c: f32) -> Tensor;
}

impl ScaleForTest for Tensor {
    fn scale_for_test(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }
}
