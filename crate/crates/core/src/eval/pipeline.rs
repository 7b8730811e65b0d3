use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{dataset_hash, Dataset, PedestrianDataset, TestQuery, TokenVocabulary, VehicleDataset};
use crate::error::{Error, Result};
use crate::harness::{vehicle_features, vehicle_prompter, Checkpoint};
use crate::model::DualEncoder;
use crate::router::{route_text, train_router_classifier, Domain, FitOptions, RouteSource, RuleSet, TextClassifier};

use super::{
    build_gallery, first_hit_rank, fuse_results, mean_ap, rank, recall_at_k, GalleryIndex, RoutedRanking, SubmissionRow,
};

/// One trained branch with its gallery.
#[derive(Debug, Clone)]
pub struct Branch<'a> {
    pub domain: Domain,
    pub encoder: &'a DualEncoder,
    pub tokens: &'a TokenVocabulary,
    pub index: GalleryIndex,
}

impl Branch<'_> {
    /// Full gallery ranking for a caption. Words outside this branch's
    /// vocabulary are ignored; a caption with no known word ranks nothing.
    pub fn search<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<String>> {
        if words.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let ids: Vec<usize> = words.iter().filter_map(|w| self.tokens.id(w.as_ref())).collect();
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.encoder.encode_texts(&[ids])?;
        Ok(rank(q.embeddings.row(0), &self.index, self.index.len())?
            .into_iter()
            .map(|(id, _)| id)
            .collect())
    }
}

pub fn pedestrian_gallery(d: &PedestrianDataset, encoder: &DualEncoder) -> Result<GalleryIndex> {
    let items: Vec<(String, Vec<f64>)> = d
        .split
        .test_gallery
        .iter()
        .map(|g| (g.id.clone(), g.features.clone()))
        .collect();
    build_gallery(Domain::Pedestrian, &items, encoder, false)
}

/// Vehicle gallery, color-patched first when `augment` is set.
pub fn vehicle_gallery(d: &VehicleDataset, encoder: &DualEncoder, augment: bool) -> Result<GalleryIndex> {
    let prompter = vehicle_prompter(&d.meta.vocabulary);
    let items: Vec<(String, Vec<f64>)> = d
        .split
        .test_gallery
        .iter()
        .map(|g| Ok((g.id.clone(), vehicle_features(&g.image, augment.then_some(&prompter))?)))
        .collect::<Result<_>>()?;
    build_gallery(Domain::Vehicle, &items, encoder, augment)
}

/// Rule set and fallback classifier fitted on the training captions of both datasets.
pub fn build_router(ped: &PedestrianDataset, veh: &VehicleDataset) -> Result<(RuleSet, TextClassifier)> {
    let attribute_words: Vec<String> = ped
        .meta
        .vocabulary
        .attributes
        .attributes()
        .iter()
        .flat_map(|a| a.phrase.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .collect();
    let rules = RuleSet::with_vocabulary(
        &attribute_words,
        &veh.meta.vocabulary.palette,
        &veh.meta.vocabulary.vehicle_types,
    );
    let mut captions: Vec<(Vec<String>, Domain)> = Vec::new();
    captions.extend(
        ped.split
            .train
            .iter()
            .map(|s| (ped.meta.tokens.decode(&s.caption_tokens), Domain::Pedestrian)),
    );
    captions.extend(
        veh.split
            .train
            .iter()
            .map(|s| (veh.meta.tokens.decode(&s.caption_tokens), Domain::Vehicle)),
    );
    let clf = train_router_classifier(&captions, &FitOptions::default())?;
    Ok((rules, clf))
}

/// Per-query result before aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub true_domain: Domain,
    pub routed: Option<Domain>,
    pub route_source: Option<RouteSource>,
    /// Full ranking of the searched gallery.
    pub ranking: Vec<String>,
    pub ground_truth: Vec<String>,
    pub gallery_size: usize,
    pub strict_subset: bool,
    pub confusable_color: bool,
    /// Vehicle queries: whether the top-ranked image has the query's color.
    pub color_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub count: usize,
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_at_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "mAP@10")]
    pub map_at_10: f64,
    pub mean_rank: f64,
    /// Share of queries whose top-1 image has the queried color (vehicle slices only).
    #[serde(rename = "color_correct_recall@1", skip_serializing_if = "Option::is_none", default)]
    pub color_correct_recall_at_1: Option<f64>,
}

impl SliceMetrics {
    pub fn from_outcomes(outcomes: &[&QueryOutcome]) -> Result<Self> {
        let rankings: Vec<Vec<String>> = outcomes.iter().map(|o| o.ranking.clone()).collect();
        let truth: Vec<Vec<String>> = outcomes.iter().map(|o| o.ground_truth.clone()).collect();
        let n = outcomes.len().max(1) as f64;
        let colors: Vec<bool> = outcomes.iter().filter_map(|o| o.color_correct).collect();
        Ok(SliceMetrics {
            count: outcomes.len(),
            recall_at_1: recall_at_k(&rankings, &truth, 1)?,
            recall_at_5: recall_at_k(&rankings, &truth, 5)?,
            recall_at_10: recall_at_k(&rankings, &truth, 10)?,
            map_at_10: mean_ap(&rankings, &truth, 10)?,
            mean_rank: outcomes
                .iter()
                .map(|o| first_hit_rank(&o.ranking, &o.ground_truth, o.gallery_size) as f64)
                .sum::<f64>()
                / n,
            color_correct_recall_at_1: if colors.is_empty() {
                None
            } else {
                Some(colors.iter().filter(|c| **c).count() as f64 / colors.len() as f64)
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub format: String,
    pub queries: usize,
    /// Share of queries sent to their own domain; absent when routing was bypassed.
    pub routing_accuracy: Option<f64>,
    pub overall: SliceMetrics,
    /// Keyed by slice name: `pedestrian`, `pedestrian_exact`, `strict_subset`, `vehicle`, `confusable_color`.
    pub slices: BTreeMap<String, SliceMetrics>,
    pub config_hashes: BTreeMap<String, String>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

pub const REPORT_FORMAT: &str = "xmodal-report/1";

impl RetrievalReport {
    pub fn slice(&self, name: &str) -> Option<&SliceMetrics> {
        self.slices.get(name)
    }

    fn from_outcomes(outcomes: &[QueryOutcome], routed: bool) -> Result<Self> {
        let all: Vec<&QueryOutcome> = outcomes.iter().collect();
        let pick =
            |f: &dyn Fn(&QueryOutcome) -> bool| -> Vec<&QueryOutcome> { outcomes.iter().filter(|o| f(o)).collect() };
        let mut slices = BTreeMap::new();
        let candidates: [(&str, Vec<&QueryOutcome>); 5] = [
            ("pedestrian", pick(&|o| o.true_domain == Domain::Pedestrian)),
            (
                "pedestrian_exact",
                pick(&|o| o.true_domain == Domain::Pedestrian && !o.strict_subset),
            ),
            ("strict_subset", pick(&|o| o.strict_subset)),
            ("vehicle", pick(&|o| o.true_domain == Domain::Vehicle)),
            ("confusable_color", pick(&|o| o.confusable_color)),
        ];
        for (name, subset) in candidates {
            if !subset.is_empty() {
                slices.insert(name.to_string(), SliceMetrics::from_outcomes(&subset)?);
            }
        }
        let routing_accuracy = routed.then(|| {
            outcomes.iter().filter(|o| o.routed == Some(o.true_domain)).count() as f64 / outcomes.len().max(1) as f64
        });
        Ok(RetrievalReport {
            format: REPORT_FORMAT.into(),
            queries: outcomes.len(),
            routing_accuracy,
            overall: SliceMetrics::from_outcomes(&all)?,
            slices,
            config_hashes: BTreeMap::new(),
            dataset_hashes: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }

    /// Flat `slice.metric → value` view used by ablation tables.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let mut put = |slice: &str, m: &SliceMetrics| {
            out.insert(format!("{slice}.recall@1"), m.recall_at_1);
            out.insert(format!("{slice}.recall@5"), m.recall_at_5);
            out.insert(format!("{slice}.recall@10"), m.recall_at_10);
            out.insert(format!("{slice}.mAP@10"), m.map_at_10);
            out.insert(format!("{slice}.mean_rank"), m.mean_rank);
            if let Some(c) = m.color_correct_recall_at_1 {
                out.insert(format!("{slice}.color_correct_recall@1"), c);
            }
        };
        put("overall", &self.overall);
        for (k, m) in &self.slices {
            put(k, m);
        }
        if let Some(r) = self.routing_accuracy {
            out.insert("routing_accuracy".into(), r);
        }
        out
    }
}

/// Report plus the fused submission and per-query detail.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: RetrievalReport,
    pub submission: Vec<SubmissionRow>,
    pub outcomes: Vec<QueryOutcome>,
}

fn query_words(q: &TestQuery, tokens: &TokenVocabulary) -> Vec<String> {
    tokens.decode(&q.caption_tokens)
}

fn outcome(
    q: &TestQuery,
    domain: Domain,
    routed: Option<(Domain, RouteSource)>,
    branch: Option<&Branch<'_>>,
    words: &[String],
) -> Result<QueryOutcome> {
    let (ranking, size) = match branch {
        Some(b) => (b.search(words)?, b.index.len()),
        None => (Vec::new(), 0),
    };
    Ok(QueryOutcome {
        query_id: q.id.clone(),
        true_domain: domain,
        routed: routed.map(|r| r.0),
        route_source: routed.map(|r| r.1),
        ranking,
        ground_truth: q.ground_truth.clone(),
        gallery_size: size,
        strict_subset: q.strict_subset,
        confusable_color: q.confusable_color,
        color_correct: None,
    })
}

fn vehicle_colors(d: &VehicleDataset) -> BTreeMap<String, usize> {
    d.split
        .test_gallery
        .iter()
        .map(|g| (g.id.clone(), g.tag.color_id))
        .collect()
}

fn mark_colors(o: &mut QueryOutcome, q: &TestQuery, colors: &BTreeMap<String, usize>) {
    if let Some(tag) = q.tag {
        let top = o.ranking.first().and_then(|id| colors.get(id));
        o.color_correct = Some(top == Some(&tag.color_id));
    }
}

fn check_task(ckpt: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if ckpt.meta.task != dataset.task() {
        return Err(Error::TaskDatasetMismatch {
            config: ckpt.meta.task.as_str().into(),
            dataset: dataset.task().as_str().into(),
        });
    }
    Ok(())
}

fn provenance(report: &mut RetrievalReport, ckpt: &Checkpoint, dataset: &Dataset) -> Result<()> {
    let key = match ckpt.meta.task {
        crate::datagen::Task::Pedestrian => "pedestrian",
        crate::datagen::Task::Vehicle => "vehicle",
    };
    let hash = dataset_hash(dataset)?;
    if hash != ckpt.meta.dataset_hash {
        report.warnings.push(format!(
            "{key} checkpoint was trained on dataset {}, evaluated on {hash}",
            ckpt.meta.dataset_hash
        ));
    }
    report.config_hashes.insert(key.into(), ckpt.meta.config_hash.clone());
    report.dataset_hashes.insert(key.into(), hash);
    Ok(())
}

/// Scores one branch on its own queries, bypassing the router.
///
/// `augment` overrides the checkpoint's patching flag for the vehicle
/// gallery; a mismatch is recorded as a warning.
pub fn evaluate_branch(ckpt: &Checkpoint, dataset: &Dataset, augment: Option<bool>) -> Result<RetrievalReport> {
    check_task(ckpt, dataset)?;
    let encoder = ckpt.model.encoder();
    let mut warnings = Vec::new();
    let outcomes = match dataset {
        Dataset::Pedestrian(d) => {
            let branch = Branch {
                domain: Domain::Pedestrian,
                encoder,
                tokens: &d.meta.tokens,
                index: pedestrian_gallery(d, encoder)?,
            };
            d.split
                .test_queries
                .iter()
                .map(|q| {
                    outcome(
                        q,
                        Domain::Pedestrian,
                        None,
                        Some(&branch),
                        &query_words(q, &d.meta.tokens),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
        Dataset::Vehicle(d) => {
            let flag = augment.unwrap_or(ckpt.meta.augmentation);
            if flag != ckpt.meta.augmentation {
                warnings.push(format!(
                    "gallery augmentation {flag} differs from training augmentation {}",
                    ckpt.meta.augmentation
                ));
            }
            let branch = Branch {
                domain: Domain::Vehicle,
                encoder,
                tokens: &d.meta.tokens,
                index: vehicle_gallery(d, encoder, flag)?,
            };
            let colors = vehicle_colors(d);
            d.split
                .test_queries
                .iter()
                .map(|q| {
                    let mut o = outcome(q, Domain::Vehicle, None, Some(&branch), &query_words(q, &d.meta.tokens))?;
                    mark_colors(&mut o, q, &colors);
                    Ok(o)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut report = RetrievalReport::from_outcomes(&outcomes, false)?;
    report.warnings = warnings;
    provenance(&mut report, ckpt, dataset)?;
    Ok(report)
}

/// Routes every test caption of both datasets, searches the chosen branch and
/// fuses the results. Pedestrian queries come first, each in dataset order.
pub fn evaluate(ped_ckpt: &Checkpoint, veh_ckpt: &Checkpoint, ped: &Dataset, veh: &Dataset) -> Result<Evaluation> {
    check_task(ped_ckpt, ped)?;
    check_task(veh_ckpt, veh)?;
    let (pd, vd) = match (ped, veh) {
        (Dataset::Pedestrian(p), Dataset::Vehicle(v)) => (p, v),
        _ => unreachable!("tasks checked above"),
    };
    let (rules, clf) = build_router(pd, vd)?;
    let ped_branch = Branch {
        domain: Domain::Pedestrian,
        encoder: ped_ckpt.model.encoder(),
        tokens: &pd.meta.tokens,
        index: pedestrian_gallery(pd, ped_ckpt.model.encoder())?,
    };
    let veh_branch = Branch {
        domain: Domain::Vehicle,
        encoder: veh_ckpt.model.encoder(),
        tokens: &vd.meta.tokens,
        index: vehicle_gallery(vd, veh_ckpt.model.encoder(), veh_ckpt.meta.augmentation)?,
    };
    let colors = vehicle_colors(vd);
    let mut outcomes = Vec::new();
    let all = pd
        .split
        .test_queries
        .iter()
        .map(|q| (q, Domain::Pedestrian, &pd.meta.tokens))
        .chain(
            vd.split
                .test_queries
                .iter()
                .map(|q| (q, Domain::Vehicle, &vd.meta.tokens)),
        );
    for (q, domain, tokens) in all {
        let words = query_words(q, tokens);
        let decision = route_text(&words, &rules, &clf)?;
        let branch = match decision.domain {
            Domain::Pedestrian => &ped_branch,
            Domain::Vehicle => &veh_branch,
        };
        let mut o = outcome(
            q,
            domain,
            Some((decision.domain, decision.source)),
            Some(branch),
            &words,
        )?;
        mark_colors(&mut o, q, &colors);
        outcomes.push(o);
    }
    let routed: Vec<RoutedRanking> = outcomes
        .iter()
        .map(|o| (o.query_id.clone(), o.routed, o.ranking.clone()))
        .collect();
    let submission = fuse_results(&routed)?;
    let mut report = RetrievalReport::from_outcomes(&outcomes, true)?;
    provenance(&mut report, ped_ckpt, ped)?;
    provenance(&mut report, veh_ckpt, veh)?;
    Ok(Evaluation {
        report,
        submission,
        outcomes,
    })
}

/// Routes a caption and returns the top `k` ids of the chosen branch.
pub fn retrieve<S: AsRef<str>>(
    words: &[S],
    rules: &RuleSet,
    classifier: &TextClassifier,
    pedestrian: &Branch<'_>,
    vehicle: &Branch<'_>,
    k: usize,
) -> Result<(Domain, Vec<String>)> {
    if words.is_empty() {
        return Err(Error::EmptyQuery);
    }
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be at least 1".into()));
    }
    let decision = route_text(words, rules, classifier)?;
    let branch = match decision.domain {
        Domain::Pedestrian => pedestrian,
        Domain::Vehicle => vehicle,
    };
    let mut ranking = branch.search(words)?;
    ranking.truncate(k);
    Ok((decision.domain, ranking))
}
