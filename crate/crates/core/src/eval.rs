//! Verification and identification metrics, and the leave-one-domain-out
//! harness.
//!
//! Scores are cosine similarities, so "closer" always means a larger score.
//! A pair is accepted at threshold `t` when its score is `≥ t`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Graph;

pub const DEFAULT_FAR_LEVELS: [f64; 3] = [0.001, 0.01, 0.1];
pub const SPLITS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub same: bool,
}

impl ScoredPair {
    pub fn new(score: f64, same: bool) -> Self {
        ScoredPair { score, same }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// Operating points from the strictest threshold (`+∞`, nothing accepted)
/// down to the smallest score (everything accepted).
#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
}

fn class_counts(pairs: &[ScoredPair]) -> (usize, usize) {
    let pos = pairs.iter().filter(|p| p.same).count();
    (pos, pairs.len() - pos)
}

pub fn roc(pairs: &[ScoredPair]) -> Result<Roc> {
    let (pos, neg) = class_counts(pairs);
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!(
            "ROC needs both classes, got {pos} positive and {neg} negative pairs"
        )));
    }
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::Contract(format!("non-finite score {}", p.score)));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tar: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].same {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: fp as f64 / neg as f64,
            tar: tp as f64 / pos as f64,
        });
    }
    Ok(Roc { points })
}

impl Roc {
    /// Best TAR over thresholds whose FAR does not exceed `far`; among equal
    /// TARs the higher threshold wins.
    pub fn tar_at(&self, far: f64) -> f64 {
        self.operating_point(far).tar
    }

    pub fn operating_point(&self, far: f64) -> RocPoint {
        let mut best = self.points[0];
        for p in &self.points[1..] {
            if p.far <= far && p.tar > best.tar {
                best = *p;
            }
        }
        best
    }

    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].far - w[0].far) * (w[1].tar + w[0].tar) / 2.0)
            .sum()
    }

    /// `threshold,far,tar` rows, strictest first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,far,tar\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.tar);
        }
        out
    }
}

fn accuracy_at(pairs: &[ScoredPair], threshold: f64) -> f64 {
    let correct = pairs.iter().filter(|p| (p.score >= threshold) == p.same).count();
    correct as f64 / pairs.len() as f64
}

/// Threshold maximizing accuracy on `pairs`; candidates are every distinct
/// score and `+∞`, ties go to the higher threshold.
pub fn best_threshold(pairs: &[ScoredPair]) -> f64 {
    let candidates: BTreeSet<u64> = pairs.iter().map(|p| p.score.to_bits()).collect();
    let mut scores: Vec<f64> = candidates.into_iter().map(f64::from_bits).collect();
    scores.push(f64::INFINITY);
    scores.sort_by(|a, b| b.total_cmp(a));
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for t in scores {
        let acc = accuracy_at(pairs, t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub mean: f64,
    pub std: f64,
}

/// Each split is scored at the best threshold of the other nine.
pub fn verification_accuracy_10split(splits: &[Vec<ScoredPair>]) -> Result<SplitAccuracy> {
    if splits.len() != SPLITS {
        return Err(Error::Contract(format!("expected {SPLITS} splits, got {}", splits.len())));
    }
    if let Some(i) = splits.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("split {i} is empty")));
    }
    let mut accs = Vec::with_capacity(SPLITS);
    for held in 0..SPLITS {
        let train: Vec<ScoredPair> = splits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        accs.push(accuracy_at(&splits[held], best_threshold(&train)));
    }
    let mean = accs.iter().sum::<f64>() / SPLITS as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / SPLITS as f64;
    Ok(SplitAccuracy { mean, std: var.sqrt() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub identity: u32,
    pub embedding: Vec<f64>,
}

/// Fraction of `(reference, query)` pairs with no image of another identity
/// strictly closer to the reference than the query. Competitors are every
/// reference, query and distractor of a different identity.
pub fn identification_accuracy(references: &[Labeled], queries: &[Labeled], distractors: &[Labeled]) -> Result<f64> {
    if references.len() != queries.len() {
        return Err(Error::Contract(format!(
            "{} references for {} queries",
            references.len(),
            queries.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Contract("no identification pairs".into()));
    }
    let mut correct = 0;
    for (i, (r, q)) in references.iter().zip(queries).enumerate() {
        if r.identity != q.identity {
            return Err(Error::Contract(format!(
                "pair {i} pairs identity {} with {}",
                r.identity, q.identity
            )));
        }
        let genuine = cosine(&r.embedding, &q.embedding);
        let beaten = references
            .iter()
            .chain(queries)
            .chain(distractors)
            .filter(|o| o.identity != r.identity)
            .any(|o| cosine(&r.embedding, &o.embedding) > genuine);
        if !beaten {
            correct += 1;
        }
    }
    Ok(correct as f64 / references.len() as f64)
}

/// Index of the most similar gallery member; ties go to the lowest index.
pub fn nearest(probe: &[f64], gallery: &[Labeled]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gallery.iter().enumerate() {
        let s = cosine(probe, &g.embedding);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

pub fn rank1(probes: &[Labeled], gallery: &[Labeled]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Contract("no probes".into()));
    }
    let ids: BTreeSet<u32> = gallery.iter().map(|g| g.identity).collect();
    let mut correct = 0;
    for p in probes {
        if !ids.contains(&p.identity) {
            return Err(Error::Contract(format!("probe identity {} absent from gallery", p.identity)));
        }
        let i = nearest(&p.embedding, gallery).expect("gallery is nonempty");
        if gallery[i].identity == p.identity {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Classifier-side features (the space evaluated at test time), one per sample.
pub fn embed_gallery(params: &ModelParams, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cfg = &params.config;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != cfg.input_dim) {
        return Err(Error::Dimension(format!(
            "model expects {} features, sample has {}",
            cfg.input_dim,
            bad.len()
        )));
    }
    let graph = Graph::new();
    let bound = params.bind(&graph);
    let x = graph.constant(samples.concat(), &[samples.len(), cfg.input_dim])?;
    let feats = bound.classifier_features(&bound.forward_repr(&x)?)?;
    Ok(feats.data().chunks(cfg.final_dim).map(<[f64]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub held_out_domain: u32,
    pub tar_at_far: Vec<TarAtFar>,
    pub rank1: f64,
    pub auc: f64,
    pub verification_accuracy: SplitAccuracy,
    pub identification_accuracy: f64,
}

impl EvalReport {
    pub fn tar(&self, far: f64) -> Option<f64> {
        self.tar_at_far.iter().find(|t| t.far == far).map(|t| t.tar)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fixed-width summary for terminals.
    pub fn table(&self) -> String {
        let mut out = format!("held-out domain {}\n", self.held_out_domain);
        let _ = writeln!(out, "{:>10}  {:>8}", "FAR", "TAR");
        for t in &self.tar_at_far {
            let _ = writeln!(out, "{:>10}  {:>8.4}", t.far, t.tar);
        }
        let _ = writeln!(out, "rank-1 {:.4}  auc {:.4}", self.rank1, self.auc);
        let _ = writeln!(
            out,
            "verification {:.4} ± {:.4}  identification {:.4}",
            self.verification_accuracy.mean, self.verification_accuracy.std, self.identification_accuracy
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub far_levels: Vec<f64>,
    /// Seeds the assignment of pairs to verification splits.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            far_levels: DEFAULT_FAR_LEVELS.to_vec(),
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.far_levels.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Contract(format!("FAR level {f} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Everything [`evaluate_domain`] measures, before it is condensed to a report.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub roc: Roc,
}

/// Scores every metric on one domain's samples.
///
/// All sample pairs feed the ROC. Verification splits draw equal numbers of
/// positive and negative pairs. The first sample of each identity is its
/// gallery/reference image and the remaining samples are probes/queries.
pub fn evaluate_domain(params: &ModelParams, domain: &DomainDataset, opts: &EvalOptions) -> Result<Evaluation> {
    opts.validate()?;
    let samples = domain.samples();
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let emb = embed_gallery(params, &xs)?;

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let pair = ScoredPair::new(cosine(&emb[i], &emb[j]), samples[i].identity == samples[j].identity);
            if pair.same {
                positives.push(pair);
            } else {
                negatives.push(pair);
            }
        }
    }
    let all: Vec<ScoredPair> = positives.iter().chain(&negatives).copied().collect();
    let curve = roc(&all)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let per_split = positives.len().min(negatives.len()) / SPLITS;
    if per_split == 0 {
        return Err(Error::InsufficientSamples {
            needed: SPLITS,
            got: positives.len().min(negatives.len()),
        });
    }
    let splits: Vec<Vec<ScoredPair>> = (0..SPLITS)
        .map(|k| {
            let r = k * per_split..(k + 1) * per_split;
            positives[r.clone()].iter().chain(&negatives[r]).copied().collect()
        })
        .collect();
    let verification = verification_accuracy_10split(&splits)?;

    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut references = Vec::new();
    for id in domain.identities() {
        let idx = domain.indices_of(id);
        let reference = Labeled {
            identity: id,
            embedding: emb[idx[0]].clone(),
        };
        for &k in &idx[1..] {
            probes.push(Labeled {
                identity: id,
                embedding: emb[k].clone(),
            });
            references.push(reference.clone());
        }
        gallery.push(reference);
    }
    let (rank1_rate, ident) = if probes.is_empty() {
        (0.0, 0.0)
    } else {
        (rank1(&probes, &gallery)?, identification_accuracy(&references, &probes, &[])?)
    };

    let report = EvalReport {
        held_out_domain: domain.domain_id,
        tar_at_far: opts
            .far_levels
            .iter()
            .map(|&far| TarAtFar {
                far,
                tar: curve.tar_at(far),
            })
            .collect(),
        rank1: rank1_rate,
        auc: curve.auc(),
        verification_accuracy: verification,
        identification_accuracy: ident,
    };
    Ok(Evaluation { report, roc: curve })
}

/// Trains on every domain but `held_out` and evaluates on `held_out`.
pub fn leave_one_domain_out(
    domains: &[DomainDataset],
    held_out: u32,
    train_fn: impl FnOnce(&[DomainDataset]) -> Result<ModelParams>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if domains.len() < 3 {
        return Err(Error::Contract(format!(
            "leave-one-domain-out needs at least 3 domains, got {}",
            domains.len()
        )));
    }
    let test = domains
        .iter()
        .find(|d| d.domain_id == held_out)
        .ok_or_else(|| Error::Contract(format!("no domain with id {held_out}")))?;
    let train: Vec<DomainDataset> = domains.iter().filter(|d| d.domain_id != held_out).cloned().collect();
    let params = train_fn(&train)?;
    evaluate_domain(&params, test, opts)
}

/// Mean of each report field across runs, keyed by FAR level for TARs.
pub fn mean_tar(reports: &[EvalReport]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for t in &r.tar_at_far {
            let e = sums.entry(t.far.to_string()).or_default();
            e.0 += t.tar;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
