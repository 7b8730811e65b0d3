//! Pedestrian/vehicle routing for queries and gallery images.
//!
//! Text: keyword rules first; when the caption hits both keyword sets or
//! neither, a bag-of-words logistic classifier decides. Images: a logistic
//! classifier over encoder features. Scores of exactly 0.5 go to pedestrian.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::augment::Palette;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Pedestrian,
    Vehicle,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Pedestrian => "pedestrian",
            Domain::Vehicle => "vehicle",
        }
    }

    fn label(self) -> f64 {
        match self {
            Domain::Pedestrian => 0.0,
            Domain::Vehicle => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteSource {
    Rule,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub domain: Domain,
    pub source: RouteSource,
    /// Probability of the chosen domain; 1 for rule hits.
    pub confidence: f64,
}

impl RouteDecision {
    fn from_score(p_vehicle: f64) -> Self {
        if p_vehicle > 0.5 {
            RouteDecision {
                domain: Domain::Vehicle,
                source: RouteSource::Classifier,
                confidence: p_vehicle,
            }
        } else {
            RouteDecision {
                domain: Domain::Pedestrian,
                source: RouteSource::Classifier,
                confidence: 1.0 - p_vehicle,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub pedestrian_keywords: BTreeSet<String>,
    pub vehicle_keywords: BTreeSet<String>,
    /// Count as vehicle keywords only next to a vehicle keyword from the list above.
    pub color_words: BTreeSet<String>,
}

impl RuleSet {
    pub fn new(
        pedestrian: impl IntoIterator<Item = String>,
        vehicle: impl IntoIterator<Item = String>,
        colors: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let rules = RuleSet {
            pedestrian_keywords: pedestrian.into_iter().collect(),
            vehicle_keywords: vehicle.into_iter().collect(),
            color_words: colors.into_iter().collect(),
        };
        if let Some(w) = rules
            .pedestrian_keywords
            .iter()
            .find(|w| rules.vehicle_keywords.contains(*w) || rules.color_words.contains(*w))
        {
            return Err(Error::ConfigInvalid(format!("keyword {w:?} is in both sets")));
        }
        Ok(rules)
    }

    /// Defaults covering the caption templates of both branches.
    pub fn with_vocabulary(attribute_words: &[String], palette: &Palette, vehicle_types: &[String]) -> Self {
        let mut ped: BTreeSet<String> = ["man", "woman", "person", "wearing"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        ped.extend(attribute_words.iter().cloned());
        let mut veh: BTreeSet<String> = ["car", "audi", "bmw", "truck", "van", "suv", "sedan", "vehicle"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        veh.extend(vehicle_types.iter().cloned());
        for w in &veh {
            ped.remove(w);
        }
        let colors: BTreeSet<String> = palette.entries().iter().map(|e| e.name.clone()).collect();
        for w in &colors {
            ped.remove(w);
        }
        RuleSet {
            pedestrian_keywords: ped,
            vehicle_keywords: veh,
            color_words: colors,
        }
    }

    /// Which keyword sets the caption hits.
    pub fn hits<S: AsRef<str>>(&self, tokens: &[S]) -> (bool, bool) {
        let has = |set: &BTreeSet<String>| tokens.iter().any(|t| set.contains(t.as_ref()));
        let ped = has(&self.pedestrian_keywords);
        // a color word alone never decides; it only counts alongside a type word
        let veh = has(&self.vehicle_keywords);
        (ped, veh)
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        let v = crate::datagen::VocabularyConfig::default();
        let words: Vec<String> = v
            .attributes
            .attributes()
            .iter()
            .flat_map(|a| a.phrase.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        RuleSet::with_vocabulary(&words, &v.palette, &v.vehicle_types)
    }
}

/// Bias-free logistic regression, `p(vehicle) = σ(w·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
}

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the mean loss moves less than this between epochs.
    pub tolerance: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            learning_rate: 0.5,
            max_epochs: 500,
            tolerance: 1e-9,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl LogisticModel {
    pub fn fit(xs: &[Vec<f64>], labels: &[Domain], opts: &FitOptions) -> Result<Self> {
        if xs.len() != labels.len() {
            return Err(Error::dims(xs.len(), labels.len()));
        }
        let has = |d| labels.contains(&d);
        if !has(Domain::Pedestrian) || !has(Domain::Vehicle) {
            return Err(Error::SingleClassData);
        }
        let dim = xs[0].len();
        if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
            return Err(Error::dims(dim, bad.len()));
        }
        let mut rng = Rng::new(opts.seed).child("router-init");
        let mut w: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-0.01, 0.01)).collect();
        let n = xs.len() as f64;
        let mut prev = f64::INFINITY;
        let mut grad = vec![0.0; dim];
        for _ in 0..opts.max_epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for (x, d) in xs.iter().zip(labels) {
                let z = dot(&w, x);
                let y = d.label();
                // log(1 + e^z) - y z, computed stably
                loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                let r = sigmoid(z) - y;
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
            loss = loss / n + 0.5 * opts.l2 * dot(&w, &w);
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= opts.learning_rate * (g / n + opts.l2 * *wi);
            }
            if (prev - loss).abs() < opts.tolerance {
                break;
            }
            prev = loss;
        }
        Ok(LogisticModel { weights: w })
    }

    pub fn p_vehicle(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::dims(self.weights.len(), x.len()));
        }
        Ok(sigmoid(dot(&self.weights, x)))
    }
}

/// Bag-of-words classifier over a fixed token list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextClassifier {
    pub vocabulary: BTreeMap<String, usize>,
    pub model: LogisticModel,
}

impl TextClassifier {
    pub fn features<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut x = vec![0.0; self.vocabulary.len()];
        for t in tokens {
            if let Some(&k) = self.vocabulary.get(t.as_ref()) {
                x[k] += 1.0;
            }
        }
        x
    }

    pub fn p_vehicle<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        self.model
            .p_vehicle(&self.features(tokens))
            .expect("features sized from vocabulary")
    }

    pub fn classify<S: AsRef<str>>(&self, tokens: &[S]) -> RouteDecision {
        RouteDecision::from_score(self.p_vehicle(tokens))
    }
}

/// Fits the text fallback on labeled captions.
pub fn train_router_classifier(captions: &[(Vec<String>, Domain)], opts: &FitOptions) -> Result<TextClassifier> {
    let vocabulary: BTreeMap<String, usize> = captions
        .iter()
        .flat_map(|(t, _)| t.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(k, w)| (w, k))
        .collect();
    let mut clf = TextClassifier {
        vocabulary,
        model: LogisticModel { weights: Vec::new() },
    };
    let xs: Vec<Vec<f64>> = captions.iter().map(|(t, _)| clf.features(t)).collect();
    let labels: Vec<Domain> = captions.iter().map(|(_, d)| *d).collect();
    clf.model = LogisticModel::fit(&xs, &labels, opts)?;
    Ok(clf)
}

/// Rule-first text routing.
pub fn route_text<S: AsRef<str>>(tokens: &[S], rules: &RuleSet, classifier: &TextClassifier) -> Result<RouteDecision> {
    if tokens.is_empty() {
        return Err(Error::EmptyQuery);
    }
    match rules.hits(tokens) {
        (true, false) => Ok(RouteDecision {
            domain: Domain::Pedestrian,
            source: RouteSource::Rule,
            confidence: 1.0,
        }),
        (false, true) => Ok(RouteDecision {
            domain: Domain::Vehicle,
            source: RouteSource::Rule,
            confidence: 1.0,
        }),
        _ => Ok(classifier.classify(tokens)),
    }
}

/// Gallery-side router over image features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageRouter {
    model: Option<LogisticModel>,
}

impl ImageRouter {
    pub fn untrained() -> Self {
        ImageRouter { model: None }
    }

    pub fn train(xs: &[Vec<f64>], labels: &[Domain], opts: &FitOptions) -> Result<Self> {
        Ok(ImageRouter {
            model: Some(LogisticModel::fit(xs, labels, opts)?),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }
}

pub fn route_image(features: &[f64], router: &ImageRouter) -> Result<RouteDecision> {
    let model = router.model.as_ref().ok_or(Error::UntrainedClassifier)?;
    Ok(RouteDecision::from_score(model.p_vehicle(features)?))
}
