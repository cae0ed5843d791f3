//! Episodic meta-training over source domains.
//!
//! One outer iteration visits every ordered pair `(i, j)` of distinct
//! training domains. Domain `j` plays meta-train: its batch gives `L_s`, the
//! inner step `Θ′ = Θ − α∇L_s`, and the metrics `Σ⁺`, `Σ⁻`. Domain `i` plays
//! meta-test: its batch is scored under `Θ′` (including the cross-domain
//! triplet term against `j`'s metrics) to give `L_t`. The mix
//! `λ∇L_s + (1−λ)∇L_t` of every pair is summed into `G`, and a single
//! momentum-SGD step `Θ ← Θ − (β/k)·v` follows.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_triplets, AugmentConfig, DomainDataset, TripletBatch};
use crate::error::{Error, Result};
use crate::losses::{cdt_loss, lmcl_loss, triplet_loss, LossConfig, Triplets};
use crate::metrics::{covariance_of_differences, covariance_tensor, difference_rows, Polarity};
use crate::model::{BoundParams, Gradients, ModelConfig, ModelParams};
use crate::tensor::{grad, Graph, Tensor};

/// Which loss terms take part (ablations switch them off).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub cls: bool,
    pub trp: bool,
    pub cdt: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            cls: true,
            trp: true,
            cdt: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Initial outer learning rate.
    pub beta: f64,
    /// Weight of `L_s` against `L_t`.
    pub lambda: f64,
    pub batch: usize,
    pub steps: usize,
    /// `β` halves every `decay_steps` outer iterations.
    pub decay_steps: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Rescale `G` to at most this norm before the update; `0` disables.
    pub grad_clip: f64,
    /// Differentiate through the inner step instead of the first-order shortcut.
    pub second_order: bool,
    /// Let gradients flow into `Σ⁺`/`Σ⁻` instead of treating them as constants.
    pub cov_grad: bool,
    pub toggles: LossToggles,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.05,
            beta: 0.05,
            lambda: 0.7,
            batch: 8,
            steps: 500,
            decay_steps: 200,
            weight_decay: 5e-4,
            momentum: 0.9,
            grad_clip: 5.0,
            second_order: false,
            cov_grad: false,
            toggles: LossToggles::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Contract(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(format!("inner learning rate {} must be ≥ 0", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Contract(format!("outer learning rate {} must be > 0", self.beta)));
        }
        if self.batch < 2 {
            return Err(Error::Contract(format!("batch size {} below 2", self.batch)));
        }
        if self.decay_steps == 0 {
            return Err(Error::Contract("decay_steps must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Contract(format!("gradient clip {} must be ≥ 0", self.grad_clip)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Contract(format!(
                "momentum {} / weight decay {} out of range",
                self.momentum, self.weight_decay
            )));
        }
        self.loss.validate()
    }

    /// `β₀ · 2^(−⌊t / decay_steps⌋)`.
    pub fn beta_at(&self, step: usize) -> f64 {
        let halvings = (step / self.decay_steps).min(1074) as i32;
        self.beta * 2f64.powi(-halvings)
    }
}

/// Maps global identity labels of the training domains onto `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassIndex(BTreeMap<u32, usize>);

impl ClassIndex {
    pub fn from_domains(domains: &[DomainDataset]) -> Self {
        let ids: std::collections::BTreeSet<u32> = domains.iter().flat_map(|d| d.identities()).collect();
        ClassIndex(ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn class_of(&self, identity: u32) -> Result<usize> {
        self.0
            .get(&identity)
            .copied()
            .ok_or_else(|| Error::Contract(format!("identity {identity} has no classifier row")))
    }
}

/// One (meta-test, meta-train) pair of an outer iteration. Disabled or
/// skipped terms are `None` and omitted from the JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub step: usize,
    pub meta_test: u32,
    pub meta_train: u32,
    pub l_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_cls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_trp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_trp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cdt: Option<f64>,
    /// Norm of the accumulated `G` after this episode.
    pub grad_norm: f64,
}

pub fn traces_to_jsonl(traces: &[EpisodeTrace]) -> Result<String> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn traces_from_jsonl(text: &str) -> Result<Vec<EpisodeTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_traces(path: &Path, traces: &[EpisodeTrace]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(traces_to_jsonl(traces)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// A batch pushed through the graph: inputs and feature maps per role.
#[derive(Clone, Debug)]
pub struct BatchTensors {
    pub maps: Triplets,
    pub labels: [Vec<usize>; 3],
}

/// Loss value with its separately kept terms.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Tensor,
    pub cls: Option<Tensor>,
    pub trp: Option<Tensor>,
    pub cdt: Option<Tensor>,
}

impl LossTerms {
    fn assemble(graph: &Graph, cls: Option<Tensor>, trp: Option<Tensor>, cdt: Option<Tensor>) -> Result<Self> {
        let mut total: Option<Tensor> = None;
        for t in [&cls, &trp, &cdt].into_iter().flatten() {
            total = Some(match total {
                None => t.clone(),
                Some(acc) => acc.add(t)?,
            });
        }
        Ok(LossTerms {
            total: total.unwrap_or_else(|| graph.scalar(0.0)),
            cls,
            trp,
            cdt,
        })
    }
}

/// Runs anchors, positives and negatives through the representation network.
pub fn forward_batch(params: &BoundParams, batch: &TripletBatch, classes: &ClassIndex) -> Result<BatchTensors> {
    let graph = params.tensors[0].graph();
    let b = batch.len();
    let dim = params.config.input_dim;
    let (a, p, n) = batch.stacked();
    let input = |v: Vec<f64>| -> Result<Tensor> {
        if v.len() != b * dim {
            return Err(Error::Dimension(format!(
                "batch of {b} samples does not match input dimension {dim}"
            )));
        }
        graph.constant(v, &[b, dim])
    };
    let maps = Triplets {
        anchor: params.forward_repr(&input(a)?)?,
        positive: params.forward_repr(&input(p)?)?,
        negative: params.forward_repr(&input(n)?)?,
    };
    let anchor_labels = batch
        .entries
        .iter()
        .map(|e| classes.class_of(e.anchor_identity))
        .collect::<Result<Vec<_>>>()?;
    let negative_labels = batch
        .entries
        .iter()
        .map(|e| classes.class_of(e.negative_identity))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTensors {
        maps,
        labels: [anchor_labels.clone(), anchor_labels, negative_labels],
    })
}

/// Mean LMCL over all `3B` images of the batch.
fn classification_term(params: &BoundParams, fwd: &BatchTensors, loss: &LossConfig) -> Result<Tensor> {
    let weights = params.class_weights()?;
    let maps = [&fwd.maps.anchor, &fwd.maps.positive, &fwd.maps.negative];
    let mut sum: Option<Tensor> = None;
    for (m, labels) in maps.into_iter().zip(&fwd.labels) {
        let feats = params.classifier_features(m)?.l2_normalize_rows()?;
        let l = lmcl_loss(&feats, labels, &weights, loss.s, loss.m, loss.lmcl_form)?;
        sum = Some(match sum {
            None => l,
            Some(acc) => acc.add(&l)?,
        });
    }
    Ok(sum.expect("three roles").scale(1.0 / 3.0))
}

fn triplet_term(params: &BoundParams, fwd: &BatchTensors, loss: &LossConfig) -> Result<Tensor> {
    let emb = Triplets {
        anchor: params.embed_head(&fwd.maps.anchor)?,
        positive: params.embed_head(&fwd.maps.positive)?,
        negative: params.embed_head(&fwd.maps.negative)?,
    };
    triplet_loss(&emb, loss.rho)
}

/// `L_s = E[l_cls] + l_trp` on a meta-train batch under `params`.
pub fn meta_train_loss(params: &BoundParams, fwd: &BatchTensors, cfg: &TrainConfig) -> Result<LossTerms> {
    let graph = params.tensors[0].graph();
    let cls = cfg
        .toggles
        .cls
        .then(|| classification_term(params, fwd, &cfg.loss))
        .transpose()?;
    let trp = cfg
        .toggles
        .trp
        .then(|| triplet_term(params, fwd, &cfg.loss))
        .transpose()?;
    LossTerms::assemble(graph, cls, trp, None)
}

/// `L_t = E[l_cls] + l_trp + l_cdt` on a meta-test batch under `Θ′`, with
/// the metrics estimated on the meta-train domain.
pub fn meta_test_loss(
    params_prime: &BoundParams,
    fwd: &BatchTensors,
    sigma_pos: &Tensor,
    sigma_neg: &Tensor,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let graph = params_prime.tensors[0].graph();
    let cls = cfg
        .toggles
        .cls
        .then(|| classification_term(params_prime, fwd, &cfg.loss))
        .transpose()?;
    let trp = cfg
        .toggles
        .trp
        .then(|| triplet_term(params_prime, fwd, &cfg.loss))
        .transpose()?;
    let cdt = cfg
        .toggles
        .cdt
        .then(|| {
            cdt_loss(
                &fwd.maps,
                params_prime.config.map_shape(),
                sigma_pos,
                sigma_neg,
                cfg.loss.tau,
            )
        })
        .transpose()?;
    LossTerms::assemble(graph, cls, trp, cdt)
}

/// `Σ⁺`, `Σ⁻` from a meta-train batch's feature maps. Constants unless
/// `differentiable`, in which case they stay connected to the maps.
pub fn pair_metrics(maps: &Triplets, config: &ModelConfig, differentiable: bool) -> Result<(Tensor, Tensor)> {
    let shape = config.map_shape();
    let pos = difference_rows(&maps.anchor, &maps.positive, shape)?;
    let neg = difference_rows(&maps.anchor, &maps.negative, shape)?;
    if differentiable {
        return Ok((covariance_tensor(&pos)?, covariance_tensor(&neg)?));
    }
    let graph = maps.anchor.graph();
    let fixed = |rows: &Tensor, polarity| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = rows.data().chunks(shape.d).map(<[f64]>::to_vec).collect();
        Ok(covariance_of_differences(&rows, polarity)?.to_tensor(graph))
    };
    Ok((fixed(&pos, Polarity::Positive)?, fixed(&neg, Polarity::Negative)?))
}

/// Result of [`meta_gradient`].
#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// `λ∇_Θ L_s + (1−λ)∇_Θ L_t`, per parameter.
    pub grads: Vec<Vec<f64>>,
    pub l_s: f64,
    /// `None` when `λ = 1` made the meta-test path unnecessary.
    pub l_t: Option<f64>,
}

/// The mixed gradient of one episode for any parameter list.
///
/// `inner` evaluates `L_s` at `Θ` and may hand state (e.g. metrics) to
/// `outer`, which evaluates `L_t` at the supplied `Θ′`. With `second_order`,
/// `∇_Θ L_t` is the exact derivative through `Θ′ = Θ − α∇L_s(Θ)`; otherwise
/// `∇_{Θ′} L_t` stands in for it (plus whatever reaches `Θ` directly through
/// the handed-over state).
pub fn meta_gradient<S>(
    theta: &[Tensor],
    alpha: f64,
    lambda: f64,
    second_order: bool,
    inner: impl FnOnce(&[Tensor]) -> Result<(Tensor, S)>,
    outer: impl FnOnce(&[Tensor], S) -> Result<Tensor>,
) -> Result<MetaGradient> {
    let (l_s, state) = inner(theta)?;
    let needs_outer = lambda < 1.0;
    let g_s = grad(&l_s, theta, second_order && needs_outer)?;
    // λ = 1 copies the gradient untouched so the result matches plain training bit for bit
    let mut grads: Vec<Vec<f64>> = if needs_outer {
        g_s.iter().map(|g| g.data().iter().map(|x| lambda * x).collect()).collect()
    } else {
        g_s.iter().map(Tensor::to_vec).collect()
    };
    if !needs_outer {
        return Ok(MetaGradient {
            grads,
            l_s: l_s.item(),
            l_t: None,
        });
    }

    let w = 1.0 - lambda;
    let prime: Vec<Tensor> = theta
        .iter()
        .zip(&g_s)
        .map(|(p, g)| -> Result<Tensor> {
            if second_order {
                p.sub(&g.scale(alpha))
            } else {
                let values = p.data().iter().zip(g.data().iter()).map(|(x, d)| x - alpha * d).collect();
                p.graph().param(values, &p.shape())
            }
        })
        .collect::<Result<_>>()?;
    let l_t = outer(&prime, state)?;
    let g_t: Vec<Vec<f64>> = if second_order {
        grad(&l_t, theta, false)?.iter().map(Tensor::to_vec).collect()
    } else {
        let wrt: Vec<Tensor> = prime.iter().chain(theta).cloned().collect();
        let g = grad(&l_t, &wrt, false)?;
        let n = theta.len();
        (0..n)
            .map(|i| g[i].data().iter().zip(g[n + i].data().iter()).map(|(a, b)| a + b).collect())
            .collect()
    };
    for (acc, g) in grads.iter_mut().zip(&g_t) {
        for (a, x) in acc.iter_mut().zip(g) {
            *a += w * x;
        }
    }
    Ok(MetaGradient {
        grads,
        l_s: l_s.item(),
        l_t: Some(l_t.item()),
    })
}

fn check_finite(step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: format!("{what} = {value}"),
        })
    }
}

fn value(t: &Option<Tensor>) -> Option<f64> {
    t.as_ref().map(Tensor::item)
}

/// All episodes with `domains[i]` as meta-test. Returns the summed mixed
/// gradient and one trace per meta-train domain.
pub fn run_episode(
    params: &ModelParams,
    domains: &[DomainDataset],
    i: usize,
    step: usize,
    classes: &ClassIndex,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Gradients, Vec<EpisodeTrace>)> {
    if domains.len() < 2 {
        return Err(Error::Contract(format!(
            "meta-training needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    if i >= domains.len() {
        return Err(Error::Contract(format!("meta-test domain {i} out of range")));
    }
    let mut total = Gradients::zeros_like(params);
    let mut traces = Vec::new();
    for j in (0..domains.len()).filter(|&j| j != i) {
        let batch_i = sample_triplets(&domains[i], cfg.batch, &cfg.augment, rng)?;
        let batch_j = sample_triplets(&domains[j], cfg.batch, &cfg.augment, rng)?;

        let graph = Graph::new();
        let theta = params.bind(&graph);
        let config = params.config.clone();
        let mut s_terms = (None, None);
        let mut t_terms = (None, None, None);
        let mixed = meta_gradient(
            &theta.tensors,
            cfg.alpha,
            cfg.lambda,
            cfg.second_order,
            |t| {
                let bound = BoundParams {
                    config: config.clone(),
                    tensors: t.to_vec(),
                };
                let fwd = forward_batch(&bound, &batch_j, classes)?;
                let ls = meta_train_loss(&bound, &fwd, cfg)?;
                s_terms = (value(&ls.cls), value(&ls.trp));
                Ok((ls.total, fwd.maps))
            },
            |prime, maps_j| {
                let bound = BoundParams {
                    config: config.clone(),
                    tensors: prime.to_vec(),
                };
                let (sigma_pos, sigma_neg) = if cfg.toggles.cdt {
                    pair_metrics(&maps_j, &config, cfg.cov_grad)?
                } else {
                    let zero = graph.zeros(&[config.map_d, config.map_d]);
                    (zero.clone(), zero)
                };
                let fwd = forward_batch(&bound, &batch_i, classes)?;
                let lt = meta_test_loss(&bound, &fwd, &sigma_pos, &sigma_neg, cfg)?;
                t_terms = (value(&lt.cls), value(&lt.trp), value(&lt.cdt));
                Ok(lt.total)
            },
        )?;
        check_finite(step, "L_s", mixed.l_s)?;
        if let Some(lt) = mixed.l_t {
            check_finite(step, "L_t", lt)?;
        }
        let contribution = Gradients(mixed.grads);
        if !contribution.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "meta-gradient".into(),
            });
        }
        total.add_scaled(&contribution, 1.0)?;
        traces.push(EpisodeTrace {
            step,
            meta_test: domains[i].domain_id,
            meta_train: domains[j].domain_id,
            l_s: mixed.l_s,
            l_t: mixed.l_t,
            s_cls: s_terms.0,
            s_trp: s_terms.1,
            t_cls: t_terms.0,
            t_trp: t_terms.1,
            t_cdt: t_terms.2,
            grad_norm: total.norm(),
        });
    }
    Ok((total, traces))
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: Gradients::zeros_like(params),
        }
    }
}

/// `g = G + wd·Θ; v ← μv + g; Θ ← Θ − (β_t/k)·v`, with `G` first rescaled
/// to norm `grad_clip` when it is longer.
pub fn outer_update(
    params: &mut ModelParams,
    g: &Gradients,
    k: usize,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    let aligned = g.0.len() == params.params.len()
        && state.velocity.0.len() == params.params.len()
        && params
            .params
            .iter()
            .zip(&g.0)
            .zip(&state.velocity.0)
            .all(|((p, g), v)| p.values.len() == g.len() && v.len() == g.len());
    if !aligned {
        return Err(Error::Contract("gradient does not line up with parameters".into()));
    }
    if k == 0 {
        return Err(Error::Contract("domain count must be positive".into()));
    }
    let lr = cfg.beta_at(step) / k as f64;
    let norm = g.norm();
    let shrink = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    for ((p, g), v) in params.params.iter_mut().zip(&g.0).zip(&mut state.velocity.0) {
        for ((w, d), m) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
            let total = shrink * d + cfg.weight_decay * *w;
            *m = cfg.momentum * *m + total;
            *w -= lr * *m;
        }
    }
    // a norm that overflows means later normalizations would silently produce zeros
    let sq: f64 = params.params.iter().flat_map(|p| &p.values).map(|w| w * w).sum();
    if !sq.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: format!("parameter norm overflowed (‖Θ‖² = {sq})"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: ModelParams,
    pub params: ModelParams,
    pub traces: Vec<EpisodeTrace>,
}

fn check_training_domains(domains: &[DomainDataset], model: &ModelConfig, classes: &ClassIndex) -> Result<()> {
    if domains.len() < 2 {
        return Err(Error::Contract(format!(
            "meta-training needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    crate::data::validate_domains(domains)?;
    if classes.len() != model.num_classes {
        return Err(Error::Contract(format!(
            "model has {} classes but training data has {} identities",
            model.num_classes,
            classes.len()
        )));
    }
    if let Some(dim) = domains.iter().find_map(DomainDataset::input_dim) {
        if dim != model.input_dim {
            return Err(Error::Dimension(format!(
                "data has {dim} features, model expects {}",
                model.input_dim
            )));
        }
    }
    Ok(())
}

/// Full training run; `observer` sees the parameters after every outer step.
pub fn train_with(
    domains: &[DomainDataset],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = ClassIndex::from_domains(domains);
    check_training_domains(domains, model, &classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = ModelParams::init(model, &mut rng)?;
    let mut params = initial.clone();
    let mut state = OptimizerState::new(&params);
    let mut traces = Vec::with_capacity(cfg.steps * domains.len() * (domains.len() - 1));
    for step in 0..cfg.steps {
        let mut g = Gradients::zeros_like(&params);
        for i in 0..domains.len() {
            let (contribution, mut episode) = run_episode(&params, domains, i, step, &classes, cfg, &mut rng)?;
            g.add_scaled(&contribution, 1.0)?;
            traces.append(&mut episode);
        }
        outer_update(&mut params, &g, domains.len(), &mut state, cfg, step)?;
        observer(step, &params)?;
    }
    Ok(TrainOutcome {
        initial,
        params,
        traces,
    })
}

pub fn train(domains: &[DomainDataset], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(domains, model, cfg, |_, _| Ok(()))
}

/// Plain multi-domain training on `L_s` alone, with the same sampling order
/// and optimizer as [`train`] but no inner step, metrics or meta-test loss.
pub fn train_reference(domains: &[DomainDataset], model: &ModelConfig, cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let classes = ClassIndex::from_domains(domains);
    check_training_domains(domains, model, &classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model, &mut rng)?;
    let mut state = OptimizerState::new(&params);
    for step in 0..cfg.steps {
        let mut g = Gradients::zeros_like(&params);
        for i in 0..domains.len() {
            // summed per meta-test domain, as run_episode does, so float rounding agrees
            let mut per_domain = Gradients::zeros_like(&params);
            for j in (0..domains.len()).filter(|&j| j != i) {
                let _meta_test = sample_triplets(&domains[i], cfg.batch, &cfg.augment, &mut rng)?;
                let batch_j = sample_triplets(&domains[j], cfg.batch, &cfg.augment, &mut rng)?;
                let graph = Graph::new();
                let theta = params.bind(&graph);
                let fwd = forward_batch(&theta, &batch_j, &classes)?;
                let ls = meta_train_loss(&theta, &fwd, cfg)?;
                let grads = grad(&ls.total, &theta.tensors, false)?;
                per_domain.add_scaled(&Gradients::from_tensors(&grads), 1.0)?;
            }
            g.add_scaled(&per_domain, 1.0)?;
        }
        outer_update(&mut params, &g, domains.len(), &mut state, cfg, step)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn toy_domains(k: usize) -> Vec<DomainDataset> {
        generate(&SynthConfig {
            domains: k,
            identities_per_domain: 6,
            samples_per_identity: 3,
            input_dim: 6,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_model(domains: &[DomainDataset]) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 8,
            map_h: 2,
            map_w: 1,
            map_d: 3,
            repr_dim: 6,
            final_dim: 5,
            embed_dim: 4,
            num_classes: ClassIndex::from_domains(domains).len(),
            normalize_maps: true,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch: 4,
            steps: 3,
            ..TrainConfig::default()
        }
    }

    /// `½ θᵀAθ + bᵀθ` built from tensor ops on a `[2]` parameter.
    fn quadratic(theta: &Tensor, a: [f64; 4], b: [f64; 2]) -> Result<Tensor> {
        let g = theta.graph();
        let col = theta.reshape(&[2, 1])?;
        let av = g.constant(a.to_vec(), &[2, 2])?.matmul(&col)?;
        let quad = col.mul(&av)?.sum_all().scale(0.5);
        let lin = theta.mul(&g.constant(b.to_vec(), &[2])?)?.sum_all();
        quad.add(&lin)
    }

    const A: [f64; 4] = [2.0, 0.5, 0.5, 1.0];
    const BS: [f64; 2] = [0.3, -0.7];
    const D: [f64; 4] = [1.5, -0.4, -0.4, 3.0];
    const BT: [f64; 2] = [-1.0, 0.2];

    fn toy_gradient(theta0: [f64; 2], alpha: f64, lambda: f64, second_order: bool) -> Vec<f64> {
        let g = Graph::new();
        let theta = g.param(theta0.to_vec(), &[2]).unwrap();
        let mg = meta_gradient(
            std::slice::from_ref(&theta),
            alpha,
            lambda,
            second_order,
            |t| Ok((quadratic(&t[0], A, BS)?, ())),
            |p, ()| quadratic(&p[0], D, BT),
        )
        .unwrap();
        mg.grads[0].clone()
    }

    fn mixed_objective(t: [f64; 2], alpha: f64, lambda: f64) -> f64 {
        let q = |m: [f64; 4], b: [f64; 2], x: [f64; 2]| {
            0.5 * (x[0] * (m[0] * x[0] + m[1] * x[1]) + x[1] * (m[2] * x[0] + m[3] * x[1])) + b[0] * x[0] + b[1] * x[1]
        };
        let gs = [A[0] * t[0] + A[1] * t[1] + BS[0], A[2] * t[0] + A[3] * t[1] + BS[1]];
        let prime = [t[0] - alpha * gs[0], t[1] - alpha * gs[1]];
        lambda * q(A, BS, t) + (1.0 - lambda) * q(D, BT, prime)
    }

    #[test]
    fn second_order_toy_matches_analytic_and_finite_differences() {
        let (t, alpha, lambda) = ([0.4, -1.2], 0.3, 0.7);
        let got = toy_gradient(t, alpha, lambda, true);
        // λ(Aθ + b) + (1−λ)(I − αA)ᵀ(Dθ′ + c)
        let gs = [A[0] * t[0] + A[1] * t[1] + BS[0], A[2] * t[0] + A[3] * t[1] + BS[1]];
        let p = [t[0] - alpha * gs[0], t[1] - alpha * gs[1]];
        let gt = [D[0] * p[0] + D[1] * p[1] + BT[0], D[2] * p[0] + D[3] * p[1] + BT[1]];
        let j = [1.0 - alpha * A[0], -alpha * A[2], -alpha * A[1], 1.0 - alpha * A[3]];
        let want = [
            lambda * gs[0] + (1.0 - lambda) * (j[0] * gt[0] + j[1] * gt[1]),
            lambda * gs[1] + (1.0 - lambda) * (j[2] * gt[0] + j[3] * gt[1]),
        ];
        let h = 1e-6;
        for k in 0..2 {
            assert!((got[k] - want[k]).abs() <= 1e-3 * want[k].abs().max(1e-12), "{got:?} {want:?}");
            let (mut up, mut dn) = (t, t);
            up[k] += h;
            dn[k] -= h;
            let fd = (mixed_objective(up, alpha, lambda) - mixed_objective(dn, alpha, lambda)) / (2.0 * h);
            assert!((got[k] - fd).abs() <= 1e-3 * fd.abs(), "{k}: {} vs fd {fd}", got[k]);
        }
        let first = toy_gradient(t, alpha, lambda, false);
        assert!((first[0] - want[0]).abs() > 1e-3, "first order should drop the Jacobian");
    }

    #[test]
    fn alpha_zero_first_order_evaluates_at_theta() {
        let t = [0.9, 0.1];
        let got = toy_gradient(t, 0.0, 0.25, false);
        let gs = [A[0] * t[0] + A[1] * t[1] + BS[0], A[2] * t[0] + A[3] * t[1] + BS[1]];
        let gt = [D[0] * t[0] + D[1] * t[1] + BT[0], D[2] * t[0] + D[3] * t[1] + BT[1]];
        for k in 0..2 {
            assert!((got[k] - (0.25 * gs[k] + 0.75 * gt[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_is_plain_support_gradient() {
        let t = [0.2, 0.5];
        let got = toy_gradient(t, 0.1, 1.0, true);
        let gs = [A[0] * t[0] + A[1] * t[1] + BS[0], A[2] * t[0] + A[3] * t[1] + BS[1]];
        assert_eq!(got, gs.to_vec());
    }

    #[test]
    fn training_matches_reference_when_lambda_is_one() {
        let domains = toy_domains(3);
        let model = small_model(&domains);
        let cfg = TrainConfig {
            lambda: 1.0,
            steps: 5,
            ..small_cfg()
        };
        let meta = train(&domains, &model, &cfg).unwrap();
        let reference = train_reference(&domains, &model, &cfg).unwrap();
        assert_eq!(meta.params, reference);
        assert!(meta.traces.iter().all(|t| t.l_t.is_none() && t.t_cdt.is_none()));
    }

    #[test]
    fn episode_count_and_trace_fields() {
        let domains = toy_domains(3);
        let model = small_model(&domains);
        let out = train(&domains, &model, &small_cfg()).unwrap();
        assert_eq!(out.traces.len(), 3 * 3 * 2);
        for t in &out.traces {
            assert!(t.l_s >= 0.0 && t.l_t.unwrap() >= 0.0 && t.t_cdt.unwrap() >= 0.0);
            assert_ne!(t.meta_test, t.meta_train);
        }
        let back = traces_from_jsonl(&traces_to_jsonl(&out.traces).unwrap()).unwrap();
        assert_eq!(back, out.traces);
    }

    #[test]
    fn disabled_terms_are_omitted_from_trace() {
        let domains = toy_domains(2);
        let model = small_model(&domains);
        let cfg = TrainConfig {
            toggles: LossToggles {
                cls: true,
                trp: false,
                cdt: false,
            },
            ..small_cfg()
        };
        let out = train(&domains, &model, &cfg).unwrap();
        let line = traces_to_jsonl(&out.traces[..1]).unwrap();
        assert!(line.contains("s_cls") && line.contains("t_cls"));
        assert!(!line.contains("trp") && !line.contains("cdt"), "{line}");
    }

    #[test]
    fn all_terms_off_freezes_parameters() {
        let domains = toy_domains(2);
        let model = small_model(&domains);
        let cfg = TrainConfig {
            toggles: LossToggles {
                cls: false,
                trp: false,
                cdt: false,
            },
            weight_decay: 0.0,
            ..small_cfg()
        };
        let out = train(&domains, &model, &cfg).unwrap();
        assert_eq!(out.params, out.initial);
        assert!(out.traces.iter().all(|t| t.grad_norm == 0.0));
    }

    #[test]
    fn steps_zero_returns_initialization_and_runs_are_deterministic() {
        let domains = toy_domains(3);
        let model = small_model(&domains);
        let zero = train(&domains, &model, &TrainConfig { steps: 0, ..small_cfg() }).unwrap();
        assert_eq!(zero.params, zero.initial);
        for second_order in [false, true] {
            let cfg = TrainConfig {
                second_order,
                cov_grad: second_order,
                ..small_cfg()
            };
            let a = train(&domains, &model, &cfg).unwrap();
            let b = train(&domains, &model, &cfg).unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.traces, b.traces);
            assert_ne!(a.params, a.initial);
        }
    }

    #[test]
    fn single_domain_rejected() {
        let domains = toy_domains(1);
        let model = small_model(&domains);
        assert!(matches!(train(&domains, &model, &small_cfg()), Err(Error::Contract(_))));
        let classes = ClassIndex::from_domains(&domains);
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_episode(&params, &domains, 0, 0, &classes, &small_cfg(), &mut rng).is_err());
    }

    #[test]
    fn meta_losses_recompose_from_terms() {
        let domains = toy_domains(2);
        let model = small_model(&domains);
        let classes = ClassIndex::from_domains(&domains);
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg();
        let batch = sample_triplets(&domains[0], 4, &cfg.augment, &mut rng).unwrap();
        let g = Graph::new();
        let bound = params.bind(&g);
        let fwd = forward_batch(&bound, &batch, &classes).unwrap();

        let ls = meta_train_loss(&bound, &fwd, &cfg).unwrap();
        let cls = classification_term(&bound, &fwd, &cfg.loss).unwrap().item();
        let trp = triplet_term(&bound, &fwd, &cfg.loss).unwrap().item();
        assert!((ls.total.item() - (cls + trp)).abs() < 1e-12);

        let only_trp = TrainConfig {
            toggles: LossToggles {
                cls: false,
                ..LossToggles::default()
            },
            ..cfg.clone()
        };
        assert_eq!(meta_train_loss(&bound, &fwd, &only_trp).unwrap().total.item(), trp);

        let (sp, sn) = pair_metrics(&fwd.maps, &model, false).unwrap();
        let lt = meta_test_loss(&bound, &fwd, &sp, &sn, &cfg).unwrap();
        let cdt = cdt_loss(&fwd.maps, model.map_shape(), &sp, &sn, cfg.loss.tau).unwrap().item();
        assert!((lt.total.item() - (cls + trp + cdt)).abs() < 1e-12);
        let no_cdt = TrainConfig {
            toggles: LossToggles {
                cdt: false,
                ..LossToggles::default()
            },
            ..cfg
        };
        let lt2 = meta_test_loss(&bound, &fwd, &sp, &sn, &no_cdt).unwrap();
        assert_eq!(lt2.total.item(), ls.total.item());
    }

    #[test]
    fn outer_update_cases() {
        let domains = toy_domains(2);
        let model = small_model(&domains);
        let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let start = params.clone();
        let zero_cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new(&params);
        let zero = Gradients::zeros_like(&params);
        outer_update(&mut params, &zero, 2, &mut state, &zero_cfg, 0).unwrap();
        assert_eq!(params, start);

        let cfg = TrainConfig {
            beta: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            decay_steps: 2,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let k = 3;
        let g = Gradients(start.params.iter().map(|p| p.values.iter().map(|v| v.sin()).collect()).collect());
        let mut state = OptimizerState::new(&start);
        let mut params = start.clone();
        outer_update(&mut params, &g, k, &mut state, &cfg, 0).unwrap();
        let x0 = start.params[0].values[0];
        let g0 = g.0[0][0];
        let expected = x0 - 0.1 / 3.0 * (g0 + 0.01 * x0);
        assert!((params.params[0].values[0] - expected).abs() < 1e-15);

        // Three steps against the hand-unrolled recurrence (β halves at step 2).
        let mut params = start.clone();
        let mut state = OptimizerState::new(&start);
        let (mut x, mut v) = (x0, 0.0);
        for step in 0..3 {
            outer_update(&mut params, &g, k, &mut state, &cfg, step).unwrap();
            let beta = if step < 2 { 0.1 } else { 0.05 };
            v = 0.9 * v + (g0 + 0.01 * x);
            x -= beta / 3.0 * v;
        }
        assert!((params.params[0].values[0] - x).abs() < 1e-14);

        // clipping rescales G but not the decay term
        let clip = TrainConfig {
            grad_clip: 0.5 * g.norm(),
            momentum: 0.0,
            ..cfg.clone()
        };
        let mut params = start.clone();
        let mut state = OptimizerState::new(&start);
        outer_update(&mut params, &g, k, &mut state, &clip, 0).unwrap();
        let expected = x0 - 0.1 / 3.0 * (0.5 * g0 + 0.01 * x0);
        assert!((params.params[0].values[0] - expected).abs() < 1e-15);

        let bad = Gradients(vec![vec![0.0]]);
        assert!(outer_update(&mut params, &bad, k, &mut state, &cfg, 0).is_err());
    }

    #[test]
    fn overflowing_update_is_a_numerical_failure() {
        let domains = toy_domains(2);
        let model = small_model(&domains);
        let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut state = OptimizerState::new(&params);
        let mut g = Gradients::zeros_like(&params);
        g.0[0][0] = 1.0;
        let cfg = TrainConfig {
            beta: 1e300,
            grad_clip: 0.0,
            ..small_cfg()
        };
        let err = outer_update(&mut params, &g, 1, &mut state, &cfg, 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 7, .. }), "{err}");
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            beta: 0.8,
            decay_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.beta_at(0), 0.8);
        assert_eq!(cfg.beta_at(9), 0.8);
        assert_eq!(cfg.beta_at(10), 0.4);
        assert_eq!(cfg.beta_at(35), 0.1);
    }

    #[test]
    fn sampler_shortfall_surfaces() {
        let domains = toy_domains(2);
        let model = small_model(&domains);
        let cfg = TrainConfig {
            batch: 7,
            ..small_cfg()
        };
        let err = train(&domains, &model, &cfg).unwrap_err();
        assert!(err.to_string().contains("short of batch size"), "{err}");
    }
}
