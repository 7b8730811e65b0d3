use super::*;
use crate::numerics::{dot, finite_difference_gradient, max_relative_error};

fn shape() -> ModelShape {
    ModelShape {
        vocab_size: 9,
        feature_dim: 48,
        num_attributes: 5,
    }
}

fn batch(rng: &mut Rng) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let captions = vec![vec![1, 2, 3], vec![4, 4, 0], vec![5, 6, 7, 8], vec![2]];
    let feats = (0..4).map(|_| (0..48).map(|_| rng.uniform()).collect()).collect();
    (captions, feats)
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

struct Probe {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    d: Matrix,
    e: Matrix,
}

impl Probe {
    fn new(seed: u64) -> Self {
        let mut r = Rng::new(seed);
        Probe {
            a: random_matrix(&mut r, 4, 32),
            b: random_matrix(&mut r, 4, 32),
            c: random_matrix(&mut r, 4, 5),
            d: random_matrix(&mut r, 4, 5),
            e: random_matrix(&mut r, 4, 9),
        }
    }

    fn loss(&self, m: &PedestrianModel, caps: &[Vec<usize>], feats: &[Vec<f64>]) -> f64 {
        let fr: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let t = m.encoder.encode_texts(caps).unwrap().embeddings;
        let v = m.encoder.encode_images(&fr).unwrap().embeddings;
        let mut l = dot(t.data(), self.a.data()) + dot(v.data(), self.b.data());
        for i in 0..4 {
            l += dot(&attribute_logits(t.row(i), &m.attr_head).unwrap(), self.c.row(i));
            l += dot(&attribute_logits(v.row(i), &m.attr_head).unwrap(), self.d.row(i));
            l += dot(&m.irr_head.forward(t.row(i), v.row(i)).unwrap().0, self.e.row(i));
        }
        l
    }

    fn grads(&self, m: &PedestrianModel, caps: &[Vec<usize>], feats: &[Vec<f64>]) -> PedestrianModel {
        let fr: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let tb = m.encoder.encode_texts(caps).unwrap();
        let ib = m.encoder.encode_images(&fr).unwrap();
        let mut g = m.zeros_like();
        let mut gt = self.a.clone();
        let mut gi = self.b.clone();
        for i in 0..4 {
            let t = tb.embeddings.row(i);
            let v = ib.embeddings.row(i);
            let d = m.attr_head.backward(t, self.c.row(i), &mut g.attr_head);
            gt.row_mut(i).iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            let d = m.attr_head.backward(v, self.d.row(i), &mut g.attr_head);
            gi.row_mut(i).iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            let (_, cache) = m.irr_head.forward(t, v).unwrap();
            let (da, db) = m.irr_head.backward(&cache, self.e.row(i), &mut g.irr_head);
            gt.row_mut(i).iter_mut().zip(&da).for_each(|(x, y)| *x += y);
            gi.row_mut(i).iter_mut().zip(&db).for_each(|(x, y)| *x += y);
        }
        let mut enc = m.encoder.zeros_like();
        m.encoder.backward_texts(&tb, &gt, &mut enc).unwrap();
        m.encoder.backward_images(&ib, &gi, &mut enc).unwrap();
        g.encoder = enc;
        g
    }
}

fn model(seed: u64, scale: f64) -> PedestrianModel {
    let cfg = ModelConfig {
        init_scale: scale,
        ..ModelConfig::default()
    };
    PedestrianModel::new(&cfg, &shape(), seed)
}

#[test]
fn every_parameter_matches_finite_differences() {
    for seed in 0..3 {
        let m = model(seed, 0.3);
        let (caps, feats) = batch(&mut Rng::new(100 + seed));
        let probe = Probe::new(200 + seed);
        let g = probe.grads(&m, &caps, &feats);
        let x0 = m.flatten();
        let mut work = m.clone();
        let num = finite_difference_gradient(
            |x| {
                work.assign_flat(x);
                probe.loss(&work, &caps, &feats)
            },
            &x0,
            1e-5,
        );
        let analytic = g.flatten();
        let mut off = 0;
        for (name, _, data) in m.tensors() {
            let n = data.len();
            let err = max_relative_error(&analytic[off..off + n], &num[off..off + n]);
            assert!(err < 1e-5, "{name}: {err}");
            off += n;
        }
    }
}

#[test]
fn default_init_is_small_and_finite() {
    let m = model(7, 0.05);
    assert!(m.all_finite());
    assert!(m.flatten().iter().all(|x| x.abs() < 0.05));
    let names: Vec<String> = m.tensors().into_iter().map(|t| t.0).collect();
    assert_eq!(names[0], "text.embed");
    assert!(names.contains(&"attr_head.weight".to_string()));
    assert!(names.contains(&"irr_head.out.bias".to_string()));
    assert_eq!(m, model(7, 0.05));
    assert_ne!(m, model(8, 0.05));
}

#[test]
fn text_encoder_errors_and_permutation() {
    let m = model(1, 0.3);
    assert!(matches!(m.encoder.text.forward(&[]), Err(Error::EmptyTokens)));
    assert!(matches!(m.encoder.text.forward(&[1, 99]), Err(Error::UnknownToken(_))));
    let a = m.encoder.text.forward(&[1, 2, 3]).unwrap().0;
    let b = m.encoder.text.forward(&[3, 1, 2]).unwrap().0;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
    assert_eq!(a, m.encoder.text.forward(&[1, 2, 3]).unwrap().0);
}

#[test]
fn image_encoder_zero_input_and_dims() {
    let m = model(1, 0.3);
    let enc = &m.encoder.image;
    let out = enc.forward(&[0.0; 48]).unwrap().0;
    let h1: Vec<f64> = enc.l1.bias.iter().map(|b| b.tanh()).collect();
    let expect: Vec<f64> = enc.l2.forward(&h1).unwrap().into_iter().map(f64::tanh).collect();
    assert_eq!(out, expect);
    assert!(matches!(enc.forward(&[0.0; 47]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn image_jacobian_matches_fd() {
    let m = model(4, 0.3);
    let enc = &m.encoder.image;
    let mut r = Rng::new(5);
    let x: Vec<f64> = (0..48).map(|_| r.uniform()).collect();
    let up: Vec<f64> = (0..32).map(|_| r.uniform_range(-1.0, 1.0)).collect();
    let (_, cache) = enc.forward(&x).unwrap();
    let mut g = m.encoder.zeros_like();
    let gx = enc.backward(&cache, &up, &mut g.image);
    let num = finite_difference_gradient(|xs| dot(&enc.forward(xs).unwrap().0, &up), &x, 1e-6);
    assert!(max_relative_error(&gx, &num) < 1e-5);
}

#[test]
fn embeddings_are_unit_norm() {
    let m = model(2, 0.05);
    let (caps, feats) = batch(&mut Rng::new(3));
    let fr: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    let t = m.encoder.encode_texts(&caps).unwrap();
    let v = m.encoder.encode_images(&fr).unwrap();
    for row in t.embeddings.row_iter().chain(v.embeddings.row_iter()) {
        assert!((norm(row) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn normalization_is_scale_invariant() {
    let v = [0.3, -1.2, 0.7];
    let a = normalize(&v).unwrap();
    let scaled: Vec<f64> = v.iter().map(|x| x * 17.5).collect();
    let b = normalize(&scaled).unwrap();
    for (x, y) in a.unit.iter().zip(&b.unit) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!(normalize(&[0.0; 3]).is_err());
}

#[test]
fn normalize_backward_matches_fd() {
    let v = [0.3, -1.2, 0.7, 2.0];
    let up = [1.0, 0.5, -0.25, 0.1];
    let n = normalize(&v).unwrap();
    let g = normalize_backward(&n, &up);
    let num = finite_difference_gradient(|x| dot(&normalize(x).unwrap().unit, &up), &v, 1e-6);
    assert!(max_relative_error(&g, &num) < 1e-6);
}

#[test]
fn attribute_head_is_shared_and_dense() {
    let m = model(3, 0.3);
    let zero = attribute_logits(&[0.0; 32], &m.attr_head).unwrap();
    assert_eq!(zero, m.attr_head.bias);
    let mut r = Rng::new(9);
    let e: Vec<f64> = (0..32).map(|_| r.uniform_range(-1.0, 1.0)).collect();
    let first = attribute_logits(&e, &m.attr_head).unwrap();
    let other: Vec<f64> = (0..32).map(|_| r.uniform_range(-1.0, 1.0)).collect();
    let _ = attribute_logits(&other, &m.attr_head).unwrap();
    assert_eq!(first, attribute_logits(&e, &m.attr_head).unwrap());
    let w = Matrix::from_vec(5, 32, m.attr_head.weight.clone()).unwrap();
    let col = Matrix::from_vec(32, 1, e.clone()).unwrap();
    let oracle = w.matmul(&col).unwrap();
    for q in 0..5 {
        assert!((first[q] - (oracle.get(q, 0) + m.attr_head.bias[q])).abs() < 1e-12);
    }
    assert!(matches!(
        attribute_logits(&[0.0; 31], &m.attr_head),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let m = model(5, 0.3);
    let (caps, feats) = batch(&mut Rng::new(6));
    let tb = m.encoder.encode_texts(&caps).unwrap();
    let mut g = m.encoder.zeros_like();
    m.encoder.backward_texts(&tb, &Matrix::zeros(4, 32), &mut g).unwrap();
    assert!(g.text.embed.iter().all(|x| *x == 0.0));
    let _ = feats;
}

#[test]
fn gradients_add_across_losses() {
    let m = model(8, 0.3);
    let (caps, feats) = batch(&mut Rng::new(9));
    let p = Probe::new(10);
    let q = Probe::new(11);
    let sum = Probe {
        a: {
            let mut x = p.a.clone();
            x.add_assign(&q.a).unwrap();
            x
        },
        b: {
            let mut x = p.b.clone();
            x.add_assign(&q.b).unwrap();
            x
        },
        c: {
            let mut x = p.c.clone();
            x.add_assign(&q.c).unwrap();
            x
        },
        d: {
            let mut x = p.d.clone();
            x.add_assign(&q.d).unwrap();
            x
        },
        e: {
            let mut x = p.e.clone();
            x.add_assign(&q.e).unwrap();
            x
        },
    };
    let gp = p.grads(&m, &caps, &feats).flatten();
    let gq = q.grads(&m, &caps, &feats).flatten();
    let gs = sum.grads(&m, &caps, &feats).flatten();
    for ((a, b), s) in gp.iter().zip(&gq).zip(&gs) {
        assert!((a + b - s).abs() < 1e-12);
    }
}

#[test]
fn stale_cache_is_refused() {
    let mut m = model(5, 0.3);
    let (caps, _) = batch(&mut Rng::new(6));
    let tb = m.encoder.encode_texts(&caps).unwrap();
    m.encoder.touch();
    let mut g = m.encoder.zeros_like();
    let err = m
        .encoder
        .backward_texts(&tb, &Matrix::zeros(4, 32), &mut g)
        .unwrap_err();
    assert!(matches!(err, Error::StaleCache { cache: 0, model: 1 }));
}

#[test]
fn vehicle_model_lists_tau_last() {
    let m = VehicleModel::new(
        &ModelConfig::default(),
        &ModelShape {
            vocab_size: 9,
            feature_dim: 48,
            num_attributes: 0,
        },
        0.07,
        1,
    );
    let t = m.tensors();
    assert_eq!(t.last().unwrap().0, "tau");
    assert_eq!(t.last().unwrap().2, &[0.07]);
    let mut z = m.zeros_like();
    z.assign_flat(&m.flatten());
    assert_eq!(z.flatten(), m.flatten());
}
