use super::*;
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(lo..hi))
}

fn full(h: usize, w: usize) -> Array2<bool> {
    Array2::from_elem((h, w), true)
}

fn inv(data: Array2<f64>) -> MetricDepthMap {
    MetricDepthMap::dense(data, DepthSpace::Inverted)
}

fn norm(data: Array2<f64>) -> NormalizedDepthMap {
    NormalizedDepthMap::dense(data)
}

/// Central differences of `f` around `x`, compared against `analytic`.
fn check_fd(x: &Array2<f64>, analytic: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) {
    let h = 1e-6;
    for idx in ndarray::indices(x.dim()) {
        let mut p = x.clone();
        p[idx] += h;
        let mut m = x.clone();
        m[idx] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let a = analytic[idx];
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
        assert!(err < 1e-6, "{idx:?}: analytic {a} vs numeric {fd}");
    }
}

#[test]
fn loss_g_examples() {
    let g = GradientPair::from_parts(Array2::zeros((2, 2)), Array2::zeros((2, 2)), full(2, 2)).unwrap();
    assert_eq!(loss_g(&g, &g).unwrap(), 0.0);
    let g_hat = GradientPair::from_parts(Array2::from_elem((2, 2), 0.5), Array2::zeros((2, 2)), full(2, 2)).unwrap();
    assert!((loss_g(&g_hat, &g).unwrap() - 0.5).abs() < 1e-15);

    // Uniform errors: dropping half the pixels keeps the mean.
    let half = array![[true, false], [true, false]];
    let gh = GradientPair::from_parts(Array2::from_elem((2, 2), 0.5), Array2::zeros((2, 2)), half.clone()).unwrap();
    let gt = GradientPair::from_parts(Array2::zeros((2, 2)), Array2::zeros((2, 2)), half).unwrap();
    assert!((loss_g(&gh, &gt).unwrap() - 0.5).abs() < 1e-15);

    let empty = GradientPair::from_parts(Array2::zeros((2, 2)), Array2::zeros((2, 2)), Array2::from_elem((2, 2), false)).unwrap();
    assert_eq!(loss_g(&g, &empty), Err(LossError::EmptyMask));
}

#[test]
fn loss_n_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = rand_map(&mut rng, 3, 3, -2.0, 2.0);
    assert_eq!(loss_n(&norm(n.clone()), &norm(n.clone())).unwrap(), 0.0);
    let shifted = &n + 0.7;
    assert!((loss_n(&norm(shifted), &norm(n.clone())).unwrap() - 0.7).abs() < 1e-12);

    let n_hat = rand_map(&mut rng, 3, 3, -2.0, 2.0);
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (n_hat[[i, j]] - n[[i, j]]).abs();
        }
    }
    assert!((loss_n(&norm(n_hat), &norm(n)).unwrap() - s / 9.0).abs() < 1e-12);
}

#[test]
fn mask_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_map(&mut rng, 4, 4, 0.0, 1.0);
    let b = rand_map(&mut rng, 4, 4, 0.0, 1.0);
    let before = loss_n(&norm(a.clone()), &norm(b.clone())).unwrap() * 16.0;
    let mut t = norm(b.clone());
    t.valid[[1, 2]] = false;
    let after = loss_n(&norm(a.clone()), &t).unwrap() * 15.0;
    assert!((before - after - (a[[1, 2]] - b[[1, 2]]).abs()).abs() < 1e-12);
}

#[test]
fn multiscale_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = rand_map(&mut rng, 16, 16, 0.0, 1.0);
    let m = full(16, 16);
    let scales = [0.5, 0.25, 0.125];
    assert_eq!(loss_grad_multiscale((&d, &m), (&d, &m), &scales).unwrap(), 0.0);
    let off = &d + 3.0;
    assert!(loss_grad_multiscale((&off, &m), (&d, &m), &scales).unwrap() < 1e-12);
    let small = rand_map(&mut rng, 8, 8, 0.0, 1.0);
    assert!(matches!(
        loss_grad_multiscale((&small, &full(8, 8)), (&small, &full(8, 8)), &scales),
        Err(LossError::ScaleTooSmall { .. })
    ));
}

#[test]
fn multiscale_half_scale_by_hand() {
    let ramp = Array2::from_shape_fn((4, 4), |(i, j)| i as f64 + 2.0 * j as f64);
    let other = Array2::from_shape_fn((4, 4), |(i, j)| (i * i) as f64 + 0.5 * (j * j * j) as f64);
    // Halving with half-pixel centers averages 2x2 blocks.
    let half = |a: &Array2<f64>| {
        Array2::from_shape_fn((2, 2), |(p, q)| {
            (a[[2 * p, 2 * q]] + a[[2 * p + 1, 2 * q]] + a[[2 * p, 2 * q + 1]] + a[[2 * p + 1, 2 * q + 1]]) / 4.0
        })
    };
    let (a, b) = (half(&ramp), half(&other));
    let mut s = 0.0;
    for p in 0..2 {
        s += ((a[[p, 1]] - a[[p, 0]]) - (b[[p, 1]] - b[[p, 0]])).abs();
        s += ((a[[1, p]] - a[[0, p]]) - (b[[1, p]] - b[[0, p]])).abs();
    }
    let expect = s / (16.0 * 0.25);
    let got = loss_grad_multiscale((&ramp, &full(4, 4)), (&other, &full(4, 4)), &[0.5]).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn multiscale_mask_downscale() {
    let d = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) as f64);
    let z = Array2::zeros((4, 4));
    let mut m = full(4, 4);
    m[[0, 0]] = false;
    // The top-left 2x2 block becomes invalid, killing one x and one y entry.
    let got = loss_grad_multiscale((&d, &m), (&z, &m), &[0.5]).unwrap();
    let expect = (2.0 + 2.0) / (15.0 * 0.25);
    assert!((got - expect).abs() < 1e-12);
    let scaled = loss_grad_multiscale_parts((&d, &m), (&z, &m), &[0.5], ScaleNormalization::ScaledValid).unwrap();
    assert!((scaled.x + scaled.y - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn loss_m_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = rand_map(&mut rng, 5, 4, 0.1, 1.0);
    assert_eq!(loss_m(&inv(m.clone()), &inv(m.clone())).unwrap(), 0.0);
    let pred = inv(Array2::from_elem((1, 1), 1.0 / 2.0));
    let target = inv(Array2::from_elem((1, 1), 1.0 / 4.0));
    assert!((loss_m(&pred, &target).unwrap() - 0.25).abs() < 1e-15);
    let m_hat = rand_map(&mut rng, 5, 4, 0.1, 1.0);
    let oracle: f64 = m_hat.iter().zip(m.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 20.0;
    assert!((loss_m(&inv(m_hat.clone()), &inv(m.clone())).unwrap() - oracle).abs() < 1e-12);
    let orig = MetricDepthMap::dense(m, DepthSpace::Original);
    assert_eq!(loss_m(&inv(m_hat), &orig), Err(LossError::SpaceMismatch));
}

#[test]
fn loss_mu_examples() {
    let m = inv(array![[0.2, 0.6], [0.3, 0.5]]);
    assert!((loss_mu(&m, 0.4).unwrap()).abs() < 1e-15);
    assert!((loss_mu(&m, 0.25).unwrap() - 0.15).abs() < 1e-15);
    let perm = inv(array![[0.5, 0.3], [0.6, 0.2]]);
    assert!((loss_mu(&m, 0.1).unwrap() - loss_mu(&perm, 0.1).unwrap()).abs() < 1e-15);
    let mut empty = m.clone();
    empty.valid.fill(false);
    assert_eq!(loss_mu(&empty, 0.1), Err(LossError::EmptyMask));
}

#[test]
fn loss_logm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = rand_map(&mut rng, 3, 4, 0.1, 0.3);
    assert_eq!(loss_logm(&inv(m.clone()), &inv(m.clone())).unwrap(), 0.0);
    let e = &m * std::f64::consts::E;
    assert!((loss_logm(&inv(e), &inv(m.clone())).unwrap() - 1.0).abs() < 1e-12);
    let m_hat = rand_map(&mut rng, 3, 4, 0.1, 0.3);
    let base = loss_logm(&inv(m_hat.clone()), &inv(m.clone())).unwrap();
    let scaled = loss_logm(&inv(&m_hat * 2.5), &inv(&m * 2.5)).unwrap();
    assert!((base - scaled).abs() < 1e-12);
    let mut bad = m.clone();
    bad[[0, 0]] = 0.0;
    assert_eq!(loss_logm(&inv(m_hat), &inv(bad)), Err(LossError::NonPositiveDepth));
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (8, 8);
    let t = rand_map(&mut rng, h, w, 0.1, 0.9);
    let p = rand_map(&mut rng, h, w, 0.1, 0.9);
    let mut mask = full(h, w);
    mask[[2, 3]] = false;
    mask[[7, 0]] = false;
    let tm = MetricDepthMap::new(t.clone(), DepthSpace::Inverted, mask.clone()).unwrap();
    let with = |x: &Array2<f64>| MetricDepthMap::dense(x.clone(), DepthSpace::Inverted);

    let (_, g) = loss_m_with_grad(&with(&p), &tm).unwrap();
    check_fd(&p, &g, &|x| loss_m(&with(x), &tm).unwrap());
    let (_, g) = loss_logm_with_grad(&with(&p), &tm).unwrap();
    check_fd(&p, &g, &|x| loss_logm(&with(x), &tm).unwrap());
    let (_, g) = loss_mu_with_grad(&with(&p), 0.3).unwrap();
    check_fd(&p, &g, &|x| loss_mu(&with(x), 0.3).unwrap());
    let tn = NormalizedDepthMap { data: t.clone(), valid: mask.clone(), ..norm(t.clone()) };
    let (_, g) = loss_n_with_grad(&norm(p.clone()), &tn).unwrap();
    check_fd(&p, &g, &|x| loss_n(&norm(x.clone()), &tn).unwrap());

    for normalization in [ScaleNormalization::FullResolution, ScaleNormalization::ScaledValid] {
        let parts = loss_grad_multiscale_parts((&p, &full(h, w)), (&t, &mask), &[0.5, 0.25], normalization).unwrap();
        let f = |x: &Array2<f64>, pick: fn(&GradTerms) -> f64| {
            pick(&loss_grad_multiscale_parts((x, &full(h, w)), (&t, &mask), &[0.5, 0.25], normalization).unwrap())
        };
        check_fd(&p, &parts.grad_x, &|x| f(x, |t| t.x));
        check_fd(&p, &parts.grad_y, &|x| f(x, |t| t.y));
    }

    let gt = spatial_gradients_raw(&t, &mask).unwrap();
    let gy0 = rand_map(&mut rng, h, w, -0.5, 0.5);
    let pair = |gx: &Array2<f64>, gy: &Array2<f64>| GradientPair::from_parts(gx.clone(), gy.clone(), full(h, w)).unwrap();
    let (_, dx, dy) = loss_g_with_grad(&pair(&p, &gy0), &gt).unwrap();
    check_fd(&p, &dx, &|x| loss_g(&pair(x, &gy0), &gt).unwrap());
    check_fd(&gy0, &dy, &|y| loss_g(&pair(&p, y), &gt).unwrap());
}

fn fixture(seed: u64) -> (GradientPair, NormalizedDepthMap, MetricDepthMap, LossTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 16);
    let m = inv(rand_map(&mut rng, h, w, 0.1, 0.9));
    let n = norm(rand_map(&mut rng, h, w, -1.5, 1.5));
    let g = spatial_gradients_raw(&n.data, &n.valid).unwrap();
    let targets = LossTargets { g, n, m: Some(m) };
    let g_hat = GradientPair::from_parts(rand_map(&mut rng, h, w, -1.0, 1.0), rand_map(&mut rng, h, w, -1.0, 1.0), full(h, w)).unwrap();
    let n_hat = norm(rand_map(&mut rng, h, w, -1.5, 1.5));
    let m_hat = inv(rand_map(&mut rng, h, w, 0.1, 0.9));
    (g_hat, n_hat, m_hat, targets)
}

#[test]
fn total_loss_sums_terms() {
    let (g_hat, n_hat, m_hat, targets) = fixture(7);
    let cfg = LossConfig::default();
    let inputs = LossInputs { g_hat: Some(&g_hat), n_hat: Some(&n_hat), m_hat: Some(&m_hat) };
    let b = total_loss(inputs, &targets, &cfg, true).unwrap();
    let m = targets.m.as_ref().unwrap();
    let s = &cfg.gradient_scales;
    let nx = loss_grad_multiscale_parts((&n_hat.data, &n_hat.valid), (&targets.n.data, &targets.n.valid), s, ScaleNormalization::FullResolution).unwrap();
    let mx = loss_grad_multiscale_parts((&m_hat.data, &m_hat.valid), (&m.data, &m.valid), s, ScaleNormalization::FullResolution).unwrap();
    let mu = m.data.mean().unwrap();
    let expect = loss_g(&g_hat, &targets.g).unwrap()
        + loss_n(&n_hat, &targets.n).unwrap()
        + nx.x
        + nx.y
        + loss_m(&m_hat, m).unwrap()
        + mx.x
        + mx.y
        + loss_mu(&m_hat, mu).unwrap()
        + loss_logm(&m_hat, m).unwrap();
    assert!((b.total - expect).abs() < 1e-12);
    assert!(LossTerm::ALL.iter().all(|&t| b.get(t).is_some()));

    let only_n = LossConfig { term_weights: TermWeights::only(&[LossTerm::N]), ..cfg.clone() };
    let b = total_loss(inputs, &targets, &only_n, true).unwrap();
    assert_eq!(b.total, loss_n(&n_hat, &targets.n).unwrap());
}

#[test]
fn relative_samples_ignore_metric_prediction() {
    let (g_hat, n_hat, m_hat, mut targets) = fixture(8);
    targets.m = None;
    let cfg = LossConfig::default();
    let inputs = LossInputs { g_hat: Some(&g_hat), n_hat: Some(&n_hat), m_hat: Some(&m_hat) };
    let (b, grads) = total_loss_with_grads(inputs, &targets, &cfg, false).unwrap();
    assert!(LossTerm::ALL.iter().filter(|t| t.is_metric()).all(|&t| b.get(t).is_none()));
    assert!(grads.m.is_none());
    let other = inv(m_hat.data.mapv(|v| 1.0 - v));
    let b2 = total_loss(LossInputs { m_hat: Some(&other), ..inputs }, &targets, &cfg, false).unwrap();
    assert_eq!(b.total, b2.total);
    assert_eq!(total_loss(inputs, &targets, &cfg, true), Err(LossError::MissingTarget("metric depth")));
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad_scale = LossConfig { gradient_scales: vec![0.5, 1.5], ..Default::default() };
    assert!(bad_scale.validate().is_err());
    let zero = LossConfig { term_weights: TermWeights::uniform(0.0), ..Default::default() };
    assert!(zero.validate().is_err());
    let cfg: LossConfig = toml::from_str("gradient_scales = [0.5]\n[term_weights]\nlogM = 0.0\n").unwrap();
    assert_eq!(cfg.term_weights.logm, 0.0);
    assert_eq!(cfg.term_weights.g, 1.0);
}
