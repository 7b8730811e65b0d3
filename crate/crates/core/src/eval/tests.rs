use super::*;
use crate::datagen::{generate, Task};
use crate::harness::{train, TrainConfig};
use crate::numerics::Matrix;

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn index(rows: &[(&str, Vec<f64>)]) -> GalleryIndex {
    GalleryIndex {
        domain: Domain::Pedestrian,
        ids: rows.iter().map(|(id, _)| id.to_string()).collect(),
        embeddings: Matrix::from_rows(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>()).unwrap(),
        augmented: false,
    }
}

#[test]
fn exact_row_ranks_first() {
    let idx = index(&[
        ("a", vec![0.0, 1.0, 0.0]),
        ("b", vec![1.0, 0.0, 0.0]),
        ("c", vec![0.0, 0.0, 1.0]),
    ]);
    let r = rank(&[1.0, 0.0, 0.0], &idx, 3).unwrap();
    assert_eq!(r[0].0, "b");
    assert_eq!(r[0].1, 1.0);
}

#[test]
fn k_beyond_gallery_returns_everything() {
    let idx = index(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
    assert_eq!(rank(&[1.0, 0.0], &idx, 50).unwrap().len(), 2);
}

#[test]
fn ties_break_by_id_not_position() {
    let e = vec![0.6, 0.8];
    let fwd = index(&[("q2", e.clone()), ("q10", e.clone()), ("a", e.clone())]);
    let rev = index(&[("a", e.clone()), ("q10", e.clone()), ("q2", e.clone())]);
    let names = |r: Vec<(String, f64)>| r.into_iter().map(|x| x.0).collect::<Vec<_>>();
    let a = names(rank(&[1.0, 0.0], &fwd, 3).unwrap());
    let b = names(rank(&[1.0, 0.0], &rev, 3).unwrap());
    assert_eq!(a, ids(&["a", "q10", "q2"]));
    assert_eq!(a, b);
}

#[test]
fn rank_rejects_wrong_dimension() {
    let idx = index(&[("a", vec![1.0, 0.0])]);
    assert!(matches!(rank(&[1.0], &idx, 1), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn recall_examples() {
    let truth = vec![ids(&["x"]); 3];
    let perfect = vec![ids(&["x", "y"]); 3];
    assert_eq!(recall_at_k(&perfect, &truth, 1).unwrap(), 1.0);
    let never = vec![ids(&["y", "z"]); 3];
    assert_eq!(recall_at_k(&never, &truth, 2).unwrap(), 0.0);

    let at = |pos: usize| {
        let mut r: Vec<String> = (0..12).map(|i| format!("n{i}")).collect();
        r[pos - 1] = "x".into();
        r
    };
    let rankings = vec![at(1), at(3), at(11)];
    assert!((recall_at_k(&rankings, &truth, 5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn recall_needs_ground_truth() {
    let r = recall_at_k(&[ids(&["a"])], &[vec![]], 1);
    assert!(matches!(r, Err(Error::MissingGroundTruth(_))));
    assert!(matches!(
        mean_ap(&[ids(&["a"])], &[vec![]], 10),
        Err(Error::MissingGroundTruth(_))
    ));
}

#[test]
fn recall_monotone_in_k() {
    let truth = vec![ids(&["c"]), ids(&["a"]), ids(&["z"])];
    let rankings = vec![ids(&["a", "b", "c"]), ids(&["a", "b", "c"]), ids(&["a", "b", "c"])];
    let mut last = 0.0;
    for k in 1..=4 {
        let r = recall_at_k(&rankings, &truth, k).unwrap();
        assert!(r >= last);
        last = r;
    }
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&ids(&["x", "a"]), &ids(&["x"]), 10), 1.0);
    assert_eq!(average_precision(&ids(&["a", "x", "b"]), &ids(&["x"]), 10), 0.5);
    assert_eq!(average_precision(&ids(&["a", "b"]), &ids(&["x"]), 10), 0.0);
    // two relevant at ranks 1 and 3: (1 + 2/3) / 2
    let ap = average_precision(&ids(&["x", "a", "y"]), &ids(&["x", "y"]), 10);
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn first_hit_rank_defaults_past_gallery() {
    assert_eq!(first_hit_rank(&ids(&["a", "b"]), &ids(&["b"]), 2), 2);
    assert_eq!(first_hit_rank(&ids(&["a", "b"]), &ids(&["z"]), 2), 3);
}

#[test]
fn fusion_keeps_order_and_domains() {
    let input: Vec<RoutedRanking> = vec![
        ("p1".into(), Some(Domain::Pedestrian), ids(&["pg1", "pg2"])),
        ("v1".into(), Some(Domain::Vehicle), ids(&["vg1"])),
        ("p2".into(), Some(Domain::Pedestrian), ids(&["pg2"])),
        (
            "v2".into(),
            Some(Domain::Vehicle),
            (0..15).map(|i| format!("vg{i}")).collect(),
        ),
    ];
    let rows = fuse_results(&input).unwrap();
    assert_eq!(rows.len(), 4);
    let order: Vec<&str> = rows.iter().map(|r| r.query_id.as_str()).collect();
    assert_eq!(order, ["p1", "v1", "p2", "v2"]);
    for r in &rows {
        let prefix = if r.domain == Domain::Pedestrian { "pg" } else { "vg" };
        assert!(r.ranks.iter().all(|id| id.starts_with(prefix)));
    }
    assert_eq!(rows[3].ranks.len(), SUBMISSION_DEPTH);

    let csv = submission_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "query_id,domain,rank1,rank2,rank3,rank4,rank5,rank6,rank7,rank8,rank9,rank10"
    );
    assert_eq!(lines[2], "v1,vehicle,vg1,,,,,,,,,");
}

#[test]
fn unrouted_query_is_an_error() {
    let input: Vec<RoutedRanking> = vec![("q".into(), None, vec![])];
    assert!(matches!(fuse_results(&input), Err(Error::UnroutedQuery(id)) if id == "q"));
}

#[test]
fn misrouted_query_scores_zero() {
    let rankings = vec![ids(&["vg1", "vg2"])];
    let truth = vec![ids(&["pg7"])];
    assert_eq!(recall_at_k(&rankings, &truth, 10).unwrap(), 0.0);
    assert_eq!(mean_ap(&rankings, &truth, 10).unwrap(), 0.0);
}

#[test]
fn median_of_runs() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0]), Some(2.5));
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[1.0, f64::NAN]), None);
}

fn small_run(task: Task, seed: u64, epochs: usize) -> (crate::harness::Checkpoint, crate::datagen::Dataset) {
    let config = match task {
        Task::Pedestrian => serde_json::json!({"train_size": 64, "query_count": 24}),
        Task::Vehicle => serde_json::json!({"train_size": 64, "query_count": 24}),
    };
    let data = generate(task, Some(config), seed).unwrap();
    let mut cfg = TrainConfig::new(task);
    cfg.batch_size = 16;
    cfg.epochs = Some(epochs);
    (train(&cfg, &data).unwrap().checkpoint, data)
}

#[test]
fn empty_gallery_rejected() {
    let (ckpt, _) = small_run(Task::Pedestrian, 1, 0);
    let r = build_gallery(Domain::Pedestrian, &[], ckpt.model.encoder(), false);
    assert!(matches!(r, Err(Error::EmptyGallery)));
}

#[test]
fn gallery_is_deterministic_and_unit_norm() {
    let (ckpt, data) = small_run(Task::Pedestrian, 2, 1);
    let d = data.as_pedestrian().unwrap();
    let a = pedestrian_gallery(d, ckpt.model.encoder()).unwrap();
    let b = pedestrian_gallery(d, ckpt.model.encoder()).unwrap();
    assert_eq!(a, b);
    for row in a.embeddings.row_iter() {
        assert!((crate::numerics::norm(row) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn augmentation_mismatch_is_reported() {
    let (ckpt, data) = small_run(Task::Vehicle, 3, 1);
    assert!(ckpt.meta.augmentation);
    let same = evaluate_branch(&ckpt, &data, None).unwrap();
    assert!(same.warnings.is_empty());
    let skewed = evaluate_branch(&ckpt, &data, Some(false)).unwrap();
    assert_eq!(skewed.warnings.len(), 1);
    assert!(skewed.warnings[0].contains("augmentation"));
}

#[test]
fn full_evaluation_routes_and_fuses() {
    let (pc, pd) = small_run(Task::Pedestrian, 4, 1);
    let (vc, vd) = small_run(Task::Vehicle, 4, 1);
    let ev = evaluate(&pc, &vc, &pd, &vd).unwrap();
    let n = pd.queries().len() + vd.queries().len();
    assert_eq!(ev.submission.len(), n);
    assert_eq!(ev.report.queries, n);
    assert_eq!(ev.report.routing_accuracy, Some(1.0));
    let ped_ids: Vec<&str> = pd
        .as_pedestrian()
        .unwrap()
        .split
        .test_gallery
        .iter()
        .map(|g| g.id.as_str())
        .collect();
    for row in &ev.submission {
        let in_ped = row.ranks.iter().all(|id| ped_ids.contains(&id.as_str()));
        assert_eq!(in_ped, row.domain == Domain::Pedestrian);
    }
    for m in ev.report.slices.values().chain([&ev.report.overall]) {
        for v in [m.recall_at_1, m.recall_at_5, m.recall_at_10, m.map_at_10] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.mean_rank >= 1.0);
    }
    assert!(ev.report.slice("confusable_color").is_some());
    assert!(ev.report.slice("strict_subset").is_some());
    assert_eq!(ev.report.config_hashes["pedestrian"], pc.meta.config_hash);

    let again = evaluate(&pc, &vc, &pd, &vd).unwrap();
    assert_eq!(
        serde_json::to_string(&ev.report).unwrap(),
        serde_json::to_string(&again.report).unwrap()
    );
    assert_eq!(ev.submission, again.submission);
}

#[test]
fn retrieve_routes_and_truncates() {
    let (pc, pd) = small_run(Task::Pedestrian, 5, 0);
    let (vc, vd) = small_run(Task::Vehicle, 5, 0);
    let (p, v) = (pd.as_pedestrian().unwrap(), vd.as_vehicle().unwrap());
    let (rules, clf) = build_router(p, v).unwrap();
    let pb = Branch {
        domain: Domain::Pedestrian,
        encoder: pc.model.encoder(),
        tokens: &p.meta.tokens,
        index: pedestrian_gallery(p, pc.model.encoder()).unwrap(),
    };
    let vb = Branch {
        domain: Domain::Vehicle,
        encoder: vc.model.encoder(),
        tokens: &v.meta.tokens,
        index: vehicle_gallery(v, vc.model.encoder(), true).unwrap(),
    };
    let words = v.meta.tokens.decode(&v.split.test_queries[0].caption_tokens);
    let (domain, top) = retrieve(&words, &rules, &clf, &pb, &vb, 3).unwrap();
    assert_eq!(domain, Domain::Vehicle);
    assert_eq!(top.len(), 3);
    let empty: [&str; 0] = [];
    assert!(matches!(
        retrieve(&empty, &rules, &clf, &pb, &vb, 3),
        Err(Error::EmptyQuery)
    ));
    let (_, none) = retrieve(&["zzzz", "truck"], &rules, &clf, &pb, &vb, 3).unwrap();
    assert_eq!(none.len(), 3);
    let (_, nothing) = retrieve(&["zzzz", "car"], &rules, &clf, &pb, &vb, 3).unwrap();
    assert!(nothing.is_empty());
}

#[test]
fn ablation_table_structure() {
    let (c1, d) = small_run(Task::Pedestrian, 6, 1);
    let base = NamedReport {
        name: "base".into(),
        report: evaluate_branch(&c1, &d, None).unwrap(),
    };
    let same = NamedReport {
        name: "same".into(),
        report: base.report.clone(),
    };
    let t = ablation_report(&base, &[same]).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.row("same").unwrap().deltas.values().all(|d| *d == 0.0));
    assert!(t.row("same").unwrap().deltas.contains_key("strict_subset.recall@10"));
    assert!(t.render_text().contains("strict_subset.recall@10"));
    let json: AblationTable = serde_json::from_str(&t.to_json().unwrap()).unwrap();
    assert_eq!(json, t);

    let (c2, d2) = small_run(Task::Pedestrian, 7, 1);
    let other = NamedReport {
        name: "other".into(),
        report: evaluate_branch(&c2, &d2, None).unwrap(),
    };
    assert!(matches!(
        ablation_report(&base, &[other]),
        Err(Error::IncomparableRuns(_))
    ));
}
