use super::*;
use crate::datagen::{AttributeSet, Tag};
use crate::numerics::{cosine_similarity_matrix, finite_difference_gradient, max_relative_error, Rng};

fn set(ix: &[usize]) -> AttributeSet {
    AttributeSet::from_indices(ix.iter().copied())
}

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn ac_zero_logits_is_ln2() {
    let z = Matrix::zeros(3, 4);
    let r = attribute_classification_loss(&z, &z, &[set(&[0]), set(&[1, 2]), set(&[3])]).unwrap();
    assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn ac_perfect_prediction_goes_to_zero() {
    let labels = [set(&[0, 2]), set(&[1])];
    let mut z = Matrix::zeros(2, 3);
    for i in 0..2 {
        for k in 0..3 {
            z.set(i, k, if labels[i].contains(k) { 40.0 } else { -40.0 });
        }
    }
    let r = attribute_classification_loss(&z, &z, &labels).unwrap();
    assert!(r.value < 1e-15);
}

#[test]
fn ac_matches_scalar_oracle_and_fd() {
    let mut rng = Rng::new(3);
    let li = random(&mut rng, 3, 4);
    let lt = random(&mut rng, 3, 4);
    let labels = [set(&[0, 1]), set(&[3]), set(&[1, 2, 3])];
    let r = attribute_classification_loss(&li, &lt, &labels).unwrap();
    let bce = |z: f64, y: f64| {
        let p = 1.0 / (1.0 + (-z).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    };
    let mut oracle = 0.0;
    for l in [&li, &lt] {
        let mut s = 0.0;
        for i in 0..3 {
            for k in 0..4 {
                s += bce(l.get(i, k), if labels[i].contains(k) { 1.0 } else { 0.0 });
            }
        }
        oracle += 0.5 * s / 12.0;
    }
    assert!((r.value - oracle).abs() < 1e-12);
    let num = finite_difference_gradient(
        |x| {
            attribute_classification_loss(&Matrix::from_vec(3, 4, x.to_vec()).unwrap(), &lt, &labels)
                .unwrap()
                .value
        },
        li.data(),
        1e-6,
    );
    assert!(max_relative_error(r.grad("logits_img").unwrap().data(), &num) < 1e-5);
    assert!(matches!(
        attribute_classification_loss(&li, &Matrix::zeros(3, 3), &labels),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn matching_probabilities_examples() {
    let (t2i, i2t) = matching_probabilities(&Matrix::zeros(4, 4), 0.07).unwrap();
    assert!(t2i.data().iter().chain(i2t.data()).all(|p| (p - 0.25).abs() < 1e-15));
    let (t2i, _) = matching_probabilities(&Matrix::identity(2), 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((t2i.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
    assert!((t2i.get(0, 0) - 0.7311).abs() < 1e-4);
    assert!((t2i.get(0, 1) - 0.2689).abs() < 1e-4);
    assert!(matches!(
        matching_probabilities(&Matrix::identity(2), 0.0),
        Err(Error::NonPositiveTemperature(_))
    ));
    let mut rng = Rng::new(1);
    let (t2i, i2t) = matching_probabilities(&random(&mut rng, 5, 5), 0.1).unwrap();
    for r in t2i.row_iter().chain(i2t.row_iter()) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.iter().all(|p| *p > 0.0));
    }
}

#[test]
fn inclusion_targets_examples() {
    let t = [set(&[0]), set(&[0]), set(&[1])];
    let i = [set(&[0, 1]), set(&[0]), set(&[1])];
    let q = inclusion_targets(&t, &i).unwrap();
    assert_eq!(q.rows.row(0), &[0.5, 0.5, 0.0]);
    assert_eq!(q.rows.row(2), &[0.5, 0.0, 0.5]);
    let same = [set(&[2]); 4];
    let q = inclusion_targets(&same, &[set(&[2, 3]); 4]).unwrap();
    assert!(q.rows.data().iter().all(|x| *x == 0.25));
    let err = inclusion_targets(&[set(&[0]), set(&[5])], &[set(&[0]), set(&[0])]).unwrap_err();
    assert!(matches!(err, Error::NoInclusionRow { row: 1 }));
}

#[test]
fn irm_zero_when_p_equals_q() {
    let q = inclusion_targets(&[set(&[1]); 4], &[set(&[1]); 4]).unwrap();
    let r = irm_loss(&Matrix::zeros(4, 4), 0.07, &q, 1e-8).unwrap();
    assert!(r.value.abs() < 1e-6);
}

#[test]
fn irm_decreases_as_diagonal_grows() {
    let q = TargetDistribution::one_hot(4);
    let mut last = f64::INFINITY;
    for step in 0..6 {
        let mut sims = Matrix::zeros(4, 4);
        for i in 0..4 {
            sims.set(i, i, 0.02 * step as f64);
        }
        let v = irm_loss(&sims, 0.07, &q, 1e-8).unwrap().value;
        assert!(v > 0.0 && v < last);
        last = v;
    }
}

#[test]
fn irm_gradient_matches_fd() {
    let mut rng = Rng::new(9);
    let sims = random(&mut rng, 4, 4);
    let mut sims = sims;
    sims.scale(0.3);
    let q = inclusion_targets(
        &[set(&[0]), set(&[1]), set(&[0, 1]), set(&[2])],
        &[set(&[0, 1]), set(&[1]), set(&[0, 1]), set(&[2])],
    )
    .unwrap();
    let r = irm_loss(&sims, 0.07, &q, 1e-8).unwrap();
    let num = finite_difference_gradient(
        |x| {
            irm_loss(&Matrix::from_vec(4, 4, x.to_vec()).unwrap(), 0.07, &q, 1e-8)
                .unwrap()
                .value
        },
        sims.data(),
        1e-6,
    );
    assert!(max_relative_error(r.grad("sims").unwrap().data(), &num) < 1e-5);
    assert!(matches!(
        irm_loss(&Matrix::zeros(3, 3), 0.07, &q, 1e-8),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn irm_with_one_hot_equals_direct_kl() {
    let mut rng = Rng::new(4);
    let mut sims = random(&mut rng, 5, 5);
    sims.scale(0.2);
    let tags: Vec<usize> = (0..5).collect();
    let via_tags = irm_loss(&sims, 0.07, &tag_targets(&tags), 1e-8).unwrap().value;
    let diag = [set(&[0]), set(&[1]), set(&[2]), set(&[3]), set(&[4])];
    let via_incl = irm_loss(&sims, 0.07, &inclusion_targets(&diag, &diag).unwrap(), 1e-8)
        .unwrap()
        .value;
    let (t2i, i2t) = matching_probabilities(&sims, 0.07).unwrap();
    let mut oracle = 0.0;
    for p in [&t2i, &i2t] {
        for i in 0..5 {
            for j in 0..5 {
                let q = if i == j { 1.0 } else { 0.0 };
                oracle += p.get(i, j) * (p.get(i, j) / (q + 1e-8)).ln() / 5.0;
            }
        }
    }
    oracle /= 5.0;
    assert!((via_tags - oracle).abs() < 1e-12);
    assert!((via_incl - oracle).abs() < 1e-12);
}

fn zero_head(out: usize) -> FusionHead {
    FusionHead::zeros(4, 3, out)
}

#[test]
fn irr_uniform_head_is_ln_vocab() {
    let masked = vec![MaskedCaption {
        tokens: vec![1, 0],
        target: 1,
    }];
    let e = Matrix::from_vec(1, 2, vec![0.6, 0.8]).unwrap();
    let r = irr_proxy_loss(&masked, 0, &e, &e, &zero_head(2)).unwrap();
    assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
    let unmasked = vec![MaskedCaption {
        tokens: vec![1, 1],
        target: 1,
    }];
    assert!(matches!(
        irr_proxy_loss(&unmasked, 0, &e, &e, &zero_head(2)),
        Err(Error::NoMaskPresent { row: 0 })
    ));
}

#[test]
fn irr_perfect_logits_go_to_zero() {
    let mut head = zero_head(3);
    head.out.bias = vec![-50.0, 50.0, -50.0];
    let masked = vec![MaskedCaption {
        tokens: vec![0],
        target: 1,
    }];
    let e = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    assert!(irr_proxy_loss(&masked, 0, &e, &e, &head).unwrap().value < 1e-15);
}

#[test]
fn fitm_uniform_head_is_ln2_and_perfect_is_zero() {
    let mut rng = Rng::new(1);
    let f = random(&mut rng, 3, 2);
    let neg = HardNegatives {
        anchors: vec![0, 1],
        neg_text: vec![1, 2],
        neg_image: vec![2, 0],
        skipped: vec![2],
    };
    let r = fitm_loss(&f, &f, &neg, &zero_head(2)).unwrap();
    assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
    let empty = HardNegatives {
        anchors: vec![],
        neg_text: vec![],
        neg_image: vec![],
        skipped: vec![0, 1, 2],
    };
    assert!(matches!(
        fitm_loss(&f, &f, &empty, &zero_head(2)),
        Err(Error::EmptyBatch)
    ));
}

#[test]
fn fitm_perfect_separation() {
    let f = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    // Hidden unit 0 fires on matched pairs of these one-hot embeddings.
    let mut head = FusionHead::zeros(4, 1, 2);
    head.hidden.weight = vec![20.0, -20.0, 20.0, -20.0];
    head.hidden.bias = vec![-20.0];
    head.out.weight = vec![-60.0, 60.0];
    head.out.bias = vec![0.0, 0.0];
    let neg = HardNegatives {
        anchors: vec![0],
        neg_text: vec![1],
        neg_image: vec![1],
        skipped: vec![1],
    };
    assert!(fitm_loss(&f, &f, &neg, &head).unwrap().value < 1e-12);
}

#[test]
fn tag_target_examples() {
    let tags = ["whiteAudi", "whiteAudi", "blackBMW", "redTruck"];
    let y = tag_targets(&tags);
    assert_eq!(y.rows.row(0), &[0.5, 0.5, 0.0, 0.0]);
    assert_eq!(tag_targets(&[1, 2, 3]).rows, Matrix::identity(3));
    assert!(tag_targets(&[7; 4]).rows.data().iter().all(|x| *x == 0.25));
}

#[test]
fn fitc_at_target_is_entropy() {
    // Two pairs of identical items; with sims ≡ 0 inside a tag and -∞-like elsewhere p ≈ y.
    let tags = [0, 0, 1, 1];
    let y = tag_targets(&tags);
    let mut sims = Matrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            if tags[i] != tags[j] {
                sims.set(i, j, -10.0);
            }
        }
    }
    let r = fitc_loss(&sims, 0.07, &y).unwrap();
    assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(
        fitc_loss(&sims, -1.0, &y),
        Err(Error::NonPositiveTemperature(_))
    ));
}

#[test]
fn fitc_respects_gibbs_bound() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let b = 4 + rng.below(5);
        let tags: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
        let y = tag_targets(&tags);
        let entropy: f64 = (0..b)
            .map(|i| {
                -y.rows
                    .row(i)
                    .iter()
                    .filter(|v| **v > 0.0)
                    .map(|v| v * v.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / b as f64;
        let sims = random(&mut rng, b, b);
        assert!(fitc_loss(&sims, 0.1, &y).unwrap().value >= entropy - 1e-12);
    }
}

#[test]
fn fitc_gradients_match_fd() {
    let mut rng = Rng::new(12);
    let mut sims = random(&mut rng, 5, 5);
    sims.scale(0.3);
    let y = tag_targets(&[0, 1, 0, 2, 1]);
    let r = fitc_loss(&sims, 0.09, &y).unwrap();
    let num = finite_difference_gradient(
        |x| {
            fitc_loss(&Matrix::from_vec(5, 5, x.to_vec()).unwrap(), 0.09, &y)
                .unwrap()
                .value
        },
        sims.data(),
        1e-6,
    );
    assert!(max_relative_error(r.grad("sims").unwrap().data(), &num) < 1e-5);
    let num_tau = finite_difference_gradient(|t| fitc_loss(&sims, t[0], &y).unwrap().value, &[0.09], 1e-7);
    assert!(max_relative_error(r.grad("tau").unwrap().data(), &num_tau) < 1e-5);
}

#[test]
fn fitc_is_permutation_invariant() {
    let mut rng = Rng::new(5);
    let sims = random(&mut rng, 6, 6);
    let tags = [0, 1, 0, 2, 1, 2];
    let perm = [3, 0, 5, 1, 4, 2];
    let mut ps = Matrix::zeros(6, 6);
    for i in 0..6 {
        for j in 0..6 {
            ps.set(i, j, sims.get(perm[i], perm[j]));
        }
    }
    let pt: Vec<usize> = perm.iter().map(|&i| tags[i]).collect();
    let a = fitc_loss(&sims, 0.1, &tag_targets(&tags)).unwrap().value;
    let b = fitc_loss(&ps, 0.1, &tag_targets(&pt)).unwrap().value;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn fitc_with_distinct_tags_is_info_nce() {
    let mut rng = Rng::new(6);
    let sims = random(&mut rng, 4, 4);
    let r = fitc_loss(&sims, 0.2, &tag_targets(&[0, 1, 2, 3])).unwrap();
    let (t2i, i2t) = matching_probabilities(&sims, 0.2).unwrap();
    let oracle = (0..4)
        .map(|i| -(t2i.get(i, i).ln() + i2t.get(i, i).ln()) / 2.0)
        .sum::<f64>()
        / 4.0;
    assert!((r.value - oracle).abs() < 1e-12);
}

#[test]
fn mining_examples() {
    let p = m(&[
        &[0.1, 0.2, 0.3, 0.4],
        &[0.25, 0.25, 0.25, 0.25],
        &[0.25, 0.25, 0.25, 0.25],
        &[0.25, 0.25, 0.25, 0.25],
    ]);
    let mut rng = Rng::new(1);
    let picks = sample_hard_negatives(&p, &[0, 0, 1, 2], &mut rng).unwrap();
    assert!(matches!(picks[0], Some(2 | 3)));
    let picks = sample_hard_negatives(&p, &[5, 5, 5, 5], &mut rng).unwrap();
    assert!(picks.iter().all(Option::is_none));
    for _ in 0..50 {
        let picks = sample_hard_negatives(&p, &[0, 0, 0, 1], &mut rng).unwrap();
        assert_eq!(picks[0], Some(3));
    }
}

#[test]
fn objectives_are_component_sums() {
    let mut rng = Rng::new(2);
    let b = 5;
    let unit = |rng: &mut Rng| {
        let mut x = random(rng, b, 4);
        for i in 0..b {
            let n = crate::numerics::norm(x.row(i));
            x.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        x
    };
    let (ft, fi, fm) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
    let li = random(&mut rng, b, 3);
    let lt = random(&mut rng, b, 3);
    let attrs: Vec<AttributeSet> = (0..b).map(|i| set(&[i % 3])).collect();
    let targets = inclusion_targets(&attrs, &attrs).unwrap();
    let masked: Vec<MaskedCaption> = (0..b)
        .map(|i| MaskedCaption {
            tokens: vec![0, 2],
            target: 1 + i % 3,
        })
        .collect();
    let head = FusionHead::new(8, 3, 4, 0.5, &rng.child("h"));
    let inputs = PedestrianInputs {
        f_txt: &ft,
        f_img: &fi,
        f_txt_masked: &fm,
        logits_txt: &lt,
        logits_img: &li,
        image_attributes: &attrs,
        targets: &targets,
        masked: &masked,
        mask_id: 0,
        irr_head: &head,
    };
    let cfg = LossConfig::default();
    let full = pedestrian_objective(&inputs, &cfg).unwrap();
    let irr = irr_proxy_loss(&masked, 0, &fm, &fi, &head).unwrap();
    let ac = attribute_classification_loss(&li, &lt, &attrs).unwrap();
    let irm = irm_loss(&cosine_similarity_matrix(&ft, &fi).unwrap(), 0.07, &targets, 1e-8).unwrap();
    assert!((full.value - (irr.value + ac.value + irm.value)).abs() < 1e-12);
    let only_ac = pedestrian_objective(
        &inputs,
        &LossConfig {
            w_irr: 0.0,
            w_irm: 0.0,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(only_ac.value, ac.value);
    assert_eq!(only_ac.grad("logits_img"), ac.grad("logits_img"));
    let g_full = full.grad("f_img").unwrap();
    let g_irr = irr.grad("f_img").unwrap();
    let (_, g_irm) = sims_backward(irm.grad("sims").unwrap(), &ft, &fi).unwrap();
    for k in 0..g_full.data().len() {
        assert!((g_full.data()[k] - g_irr.data()[k] - g_irm.data()[k]).abs() < 1e-12);
    }

    let tags: Vec<Tag> = (0..b)
        .map(|i| Tag {
            color_id: i % 2,
            type_id: 0,
        })
        .collect();
    let itm = FusionHead::new(8, 3, 2, 0.5, &rng.child("itm"));
    let vin = VehicleInputs {
        f_txt: &ft,
        f_img: &fi,
        tags: &tags,
        tau_fitc: 0.07,
        itm_head: &itm,
    };
    let a = vehicle_objective(&vin, &cfg, &mut Rng::new(77)).unwrap();
    let b2 = vehicle_objective(&vin, &cfg, &mut Rng::new(77)).unwrap();
    assert_eq!(a, b2);
    let sims = cosine_similarity_matrix(&ft, &fi).unwrap();
    let neg = mine_hard_negatives(&sims, 0.07, &tags, &mut Rng::new(77)).unwrap();
    let fitc = fitc_loss(&sims, 0.07, &tag_targets(&tags)).unwrap();
    let fitm = fitm_loss(&ft, &fi, &neg, &itm).unwrap();
    assert!((a.value - fitc.value - fitm.value).abs() < 1e-12);
}

#[test]
fn gradcheck_suite_passes_few_seeds() {
    for kind in LossKind::ALL {
        let r = gradcheck(kind, 5, 1e-5).unwrap();
        assert!(
            r.passed,
            "{kind}: {} in {} (seed {})",
            r.max_relative_error, r.worst_tensor, r.worst_seed
        );
    }
}
