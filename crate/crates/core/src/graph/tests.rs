use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Projects the output of `build` onto a fixed random direction, so the root
/// is a scalar whose gradient exercises every output entry.
fn projected(ps: &ParamStore, build: &dyn Fn(&mut Graph) -> Var, seed: u64) -> (f64, Gradients) {
    let mut g = Graph::new(ps);
    let y = build(&mut g);
    let n = g.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let value = g.value(y).data.iter().zip(&dir).map(|(a, b)| a * b).sum();
    let root = g.external(y, value, dir);
    let grads = g.backward(root);
    (value, grads)
}

fn check_op(ps: ParamStore, build: &dyn Fn(&mut Graph) -> Var) {
    let (_, grads) = projected(&ps, build, 99);
    let h = 1e-6;
    for id in ps.ids() {
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; ps.get(id).numel()]);
        for i in 0..ps.get(id).numel() {
            let mut plus = ps.clone();
            plus.get_mut(id).data[i] += h;
            let mut minus = ps.clone();
            minus.get_mut(id).data[i] -= h;
            let fd = (projected(&plus, build, 99).0 - projected(&minus, build, 99).0) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                err < 1e-6,
                "{}[{i}]: analytic {} vs numeric {fd}",
                ps.name(id),
                analytic[i]
            );
        }
    }
}

fn store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    for (name, shape) in shapes {
        ps.add(*name, random_tensor(&mut rng, shape));
    }
    ps
}

fn p(g: &Graph, name: &str) -> ParamId {
    g.params().id(name).unwrap()
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        check_conv(&[2, 5, 6], stride, pad, k);
    }
    // Inputs smaller than the kernel, where padding dominates.
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3)] {
        check_conv(&[2, 1, 1], stride, pad, k);
        check_conv(&[2, 2, 1], stride, pad, k);
    }
}

fn check_conv(x: &[usize], stride: usize, pad: usize, k: usize) {
    let ps = store(1, &[("x", x), ("w", &[3, x[0], k, k]), ("b", &[3])]);
    check_op(ps, &|g| {
        let x = g.param(p(g, "x"));
        let w = g.param(p(g, "w"));
        let b = g.param(p(g, "b"));
        g.conv2d(x, w, Some(b), stride, pad)
    });
}

#[test]
fn conv2d_matches_direct_sum() {
    let ps = store(2, &[("x", &[2, 4, 5]), ("w", &[1, 2, 3, 3])]);
    let mut g = Graph::new(&ps);
    let x = g.param(p(&g, "x"));
    let w = g.param(p(&g, "w"));
    let y = g.conv2d(x, w, None, 1, 1);
    let (xv, wv) = (ps.get(p(&g, "x")), ps.get(p(&g, "w")));
    for i in 0..4 {
        for j in 0..5 {
            let mut s = 0.0;
            for c in 0..2 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (ii, jj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                        if ii >= 0 && ii < 4 && jj >= 0 && jj < 5 {
                            s += xv.data[c * 20 + ii as usize * 5 + jj as usize]
                                * wv.data[c * 9 + ki * 3 + kj];
                        }
                    }
                }
            }
            assert!((g.value(y).data[i * 5 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_gradients() {
    let ps = store(3, &[("a", &[2, 3, 3]), ("b", &[2, 3, 3]), ("s", &[1]), ("c", &[2])]);
    check_op(ps, &|g| {
        let a = g.param(p(g, "a"));
        let b = g.param(p(g, "b"));
        let s = g.param(p(g, "s"));
        let c = g.param(p(g, "c"));
        let m = g.mul(a, b);
        let e = g.add(m, a);
        let f = g.affine(e, 1.7, 0.3);
        let sg = g.sigmoid(f);
        let ge = g.gelu(b);
        let lr = g.leaky_relu(ge, 0.1);
        let sum = g.add(sg, lr);
        let cs = g.channel_scale(sum, c);
        let cl = g.clamp(cs, -0.5, 0.5);
        g.add_scalar(cl, s)
    });
}

#[test]
fn spatial_gradients_ops() {
    let ps = store(4, &[("x", &[2, 4, 6])]);
    check_op(ps, &|g| {
        let x = g.param(p(g, "x"));
        let up = g.resize(x, 8, 12);
        let down = g.resize(up, 3, 5);
        let r = g.relu(down);
        let ch = g.select_channel(r, 1);
        let m = g.channel_mean(up);
        let mm = g.reshape(m, &[1, 2]);
        let flat = g.reshape(ch, &[3, 5]);
        let a = g.matmul(mm, mm, true, false); // [2, 2]
        let s = g.slice_cols(flat, 1, 2); // [3, 2]
        let t = g.matmul(s, a, false, false);
        let q = g.reshape(t, &[1, 3, 2]);
        g.channel_mean(q)
    });
}

#[test]
fn matrix_gradients() {
    let ps = store(
        5,
        &[
            ("a", &[3, 4]),
            ("b", &[4, 5]),
            ("bt", &[5, 4]),
            ("at", &[4, 3]),
            ("gamma", &[5]),
            ("beta", &[5]),
        ],
    );
    check_op(ps, &|g| {
        let a = g.param(p(g, "a"));
        let b = g.param(p(g, "b"));
        let bt = g.param(p(g, "bt"));
        let at = g.param(p(g, "at"));
        let gamma = g.param(p(g, "gamma"));
        let beta = g.param(p(g, "beta"));
        let x1 = g.matmul(a, b, false, false);
        let x2 = g.matmul(at, bt, true, true);
        let x3 = g.matmul(a, bt, false, true);
        let x4 = g.matmul(at, b, true, false);
        let s = g.add(x1, x2);
        let s = g.add(s, x3);
        let s = g.add(s, x4);
        let s = g.add_row_bias(s, beta);
        let n = g.layer_norm(s, gamma, beta, 1e-5);
        let sm = g.softmax_rows(n);
        let top = g.slice_rows(sm, 0, 1);
        let rest = g.slice_rows(n, 1, 2);
        let cat = g.concat_cols(&[rest, rest]);
        let r = g.reshape(top, &[1, 5]);
        let cat = g.slice_cols(cat, 3, 5);
        let cat = g.transpose(cat);
        let cat = g.transpose(cat);
        let m = g.matmul(r, cat, false, true); // [1, 2]
        let sc = g.reshape(m, &[2]);
        let w0 = g.reshape(sc, &[1, 1, 2]);
        let mean = g.channel_mean(w0);
        let v = g.weighted_sum(&[(mean, 2.0)]);
        let vv = g.reshape(v, &[1, 1, 1]);
        let tail = g.reshape(sm, &[1, 3, 5]);
        let tail = g.resize(tail, 2, 2);
        let tail = g.reshape(tail, &[1, 2, 2]);
        let tm = g.channel_mean(tail);
        let tm = g.reshape(tm, &[1, 1, 1]);
        g.add(vv, tm)
    });
}

#[test]
fn untouched_parameters_get_no_gradient() {
    let ps = store(6, &[("used", &[1, 2, 2]), ("unused", &[1, 2, 2])]);
    let mut g = Graph::new(&ps);
    let a = g.param(p(&g, "used"));
    let _b = g.param(p(&g, "unused"));
    let r = g.relu(a);
    let root = g.external(r, 0.0, vec![1.0; 4]);
    let grads = g.backward(root);
    assert!(grads.get(p(&g, "unused")).is_none());
    assert!(grads.is_zero(p(&g, "unused")));
}
