//! Synthetic multi-domain identity data, class-balanced triplet sampling and
//! the dataset file formats.
//!
//! Every domain draws its own identities (labels are globally unique, so
//! label spaces are disjoint) from a shared prototype distribution, then
//! pushes all of its samples through a domain-specific affine distortion
//! `x ↦ R·diag(s)·x + t`. Domains therefore share generative structure but
//! differ in their second-order statistics.
//!
//! # Text format
//!
//! ```text
//! cdt-dataset v1 input_dim=<D> domains=<K>
//! domain <id> samples=<n>
//! <domain_id>,<identity>,<x_1>,...,<x_D>
//! ...
//! ```
//!
//! Floats are written with 17 significant digits. The binary variant carries
//! the same fields little-endian after the magic `CDTB`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: u32,
    pub x: Vec<f64>,
}

/// Samples of one domain plus an identity → sample-index lookup.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub domain_id: u32,
    samples: Vec<Sample>,
    index: BTreeMap<u32, Vec<usize>>,
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.domain_id == other.domain_id && self.samples == other.samples
    }
}

impl DomainDataset {
    pub fn new(domain_id: u32, samples: Vec<Sample>) -> Self {
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            index.entry(s.identity).or_default().push(i);
        }
        DomainDataset {
            domain_id,
            samples,
            index,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Identities in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    pub fn num_identities(&self) -> usize {
        self.index.len()
    }

    pub fn indices_of(&self, identity: u32) -> &[usize] {
        self.index.get(&identity).map_or(&[], Vec::as_slice)
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }
}

/// Checks that identities never repeat across domains and dimensions agree.
pub fn validate_domains(domains: &[DomainDataset]) -> Result<()> {
    let mut seen = HashSet::new();
    let mut dim = None;
    for d in domains {
        for id in d.identities() {
            if !seen.insert(id) {
                return Err(Error::Contract(format!(
                    "identity {id} appears in more than one domain"
                )));
            }
        }
        for s in &d.samples {
            match dim {
                None => dim = Some(s.x.len()),
                Some(n) if n != s.x.len() => {
                    return Err(Error::Dimension(format!(
                        "domain {} mixes {n}- and {}-dimensional samples",
                        d.domain_id,
                        s.x.len()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Per-domain affine distortion parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    /// Rotation strength: the rotation is the orthogonal factor of
    /// `I + rotation·G` for Gaussian `G`. `0` is no rotation; large values
    /// approach a uniformly random one.
    pub rotation: f64,
    /// Diagonal scales are `exp(u)` with `u` uniform in `[−spread, spread]`.
    pub scale_spread: f64,
    /// Standard deviation of the translation.
    pub translation: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            rotation: 0.3,
            scale_spread: 1.0,
            translation: 0.5,
        }
    }
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            rotation: 0.0,
            scale_spread: 0.0,
            translation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub domains: usize,
    pub identities_per_domain: usize,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    /// Dimension of the identity subspace shared by all domains; `0` uses
    /// the whole input space.
    pub signal_dim: usize,
    /// Standard deviation of identity prototypes within that subspace.
    pub prototype_scale: f64,
    /// Within-identity standard deviation, before the domain distortion.
    pub identity_noise: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            domains: 3,
            identities_per_domain: 20,
            samples_per_identity: 10,
            input_dim: 16,
            signal_dim: 6,
            prototype_scale: 1.0,
            identity_noise: 0.5,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 1 {
            return Err(Error::Contract("at least one domain is required".into()));
        }
        if self.identities_per_domain == 0 || self.samples_per_identity == 0 || self.input_dim == 0 {
            return Err(Error::Contract(format!("empty synthetic configuration: {self:?}")));
        }
        let sigmas = [
            self.prototype_scale,
            self.identity_noise,
            self.shift.rotation,
            self.shift.scale_spread,
            self.shift.translation,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Contract("spreads must be finite and non-negative".into()));
        }
        if self.signal_dim > self.input_dim {
            return Err(Error::Contract(format!(
                "signal_dim {} exceeds input_dim {}",
                self.signal_dim, self.input_dim
            )));
        }
        Ok(())
    }
}

/// Gram–Schmidt on the columns of `I + strength·G`; returns the columns.
fn orthonormal_columns(n: usize, k: usize, strength: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut j = 0;
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n)
            .map(|i| {
                let e = if i == j % n { 1.0 } else { 0.0 };
                e + strength * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        j += 1;
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    cols
}

/// Row-major `n×n` rotation of the given strength.
fn random_rotation(n: usize, strength: f64, rng: &mut impl Rng) -> Vec<f64> {
    let cols = orthonormal_columns(n, n, strength, rng);
    let mut m = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m[i * n + j] = v;
        }
    }
    m
}

/// Affine map `x ↦ A x + t` with `A = R·diag(s)`.
#[derive(Clone, Debug)]
pub struct AffineTransform {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub translation: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        AffineTransform {
            dim,
            matrix,
            translation: vec![0.0; dim],
        }
    }

    pub fn random(dim: usize, shift: &DomainShift, rng: &mut impl Rng) -> Self {
        let rotation = if shift.rotation > 0.0 {
            random_rotation(dim, shift.rotation, rng)
        } else {
            Self::identity(dim).matrix
        };
        let scales: Vec<f64> = (0..dim)
            .map(|_| {
                if shift.scale_spread > 0.0 {
                    rng.random_range(-shift.scale_spread..=shift.scale_spread).exp()
                } else {
                    1.0
                }
            })
            .collect();
        let mut matrix = rotation;
        for i in 0..dim {
            for j in 0..dim {
                matrix[i * dim + j] *= scales[j];
            }
        }
        let translation = (0..dim)
            .map(|_| shift.translation * rng.sample::<f64, _>(StandardNormal))
            .collect();
        AffineTransform {
            dim,
            matrix,
            translation,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let row = &self.matrix[i * self.dim..(i + 1) * self.dim];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.translation[i]
            })
            .collect()
    }
}

/// Synthesizes `cfg.domains` datasets; a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<DomainDataset>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proto = Normal::new(0.0, cfg.prototype_scale).map_err(|e| Error::Contract(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.identity_noise).map_err(|e| Error::Contract(e.to_string()))?;
    let subspace = (cfg.signal_dim > 0 && cfg.signal_dim < cfg.input_dim)
        .then(|| orthonormal_columns(cfg.input_dim, cfg.signal_dim, 1e6, &mut rng));
    let mut out = Vec::with_capacity(cfg.domains);
    for d in 0..cfg.domains {
        let transform = AffineTransform::random(cfg.input_dim, &cfg.shift, &mut rng);
        let mut samples = Vec::with_capacity(cfg.identities_per_domain * cfg.samples_per_identity);
        for k in 0..cfg.identities_per_domain {
            let identity = u32::try_from(d * cfg.identities_per_domain + k)
                .map_err(|_| Error::Contract("too many identities".into()))?;
            let prototype: Vec<f64> = match &subspace {
                None => (0..cfg.input_dim).map(|_| proto.sample(&mut rng)).collect(),
                Some(basis) => {
                    let z: Vec<f64> = basis.iter().map(|_| proto.sample(&mut rng)).collect();
                    (0..cfg.input_dim)
                        .map(|i| basis.iter().zip(&z).map(|(u, c)| u[i] * c).sum())
                        .collect()
                }
            };
            for _ in 0..cfg.samples_per_identity {
                let raw: Vec<f64> = prototype.iter().map(|p| p + noise.sample(&mut rng)).collect();
                samples.push(Sample {
                    identity,
                    x: transform.apply(&raw),
                });
            }
        }
        out.push(DomainDataset::new(d as u32, samples));
    }
    Ok(out)
}

/// Feature-space stand-in for image augmentation: Gaussian noise plus one
/// zeroed contiguous coordinate span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Noise standard deviation as a multiple of `‖x‖/√dim`.
    pub noise: f64,
    /// Longest occluded span as a fraction of the dimension.
    pub max_occlusion: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise: 0.05,
            max_occlusion: 0.25,
        }
    }
}

/// Adds `N(0, sigma²)` to every coordinate, then zeroes `span`.
pub fn augment_with(x: &[f64], sigma: f64, span: std::ops::Range<usize>, rng: &mut impl Rng) -> Vec<f64> {
    let mut out: Vec<f64> = if sigma > 0.0 {
        x.iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        x.to_vec()
    };
    let end = span.end.min(out.len());
    for v in out.iter_mut().take(end).skip(span.start) {
        *v = 0.0;
    }
    out
}

pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let dim = x.len();
    if dim == 0 {
        return Vec::new();
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sigma = cfg.noise * norm / (dim as f64).sqrt();
    let max_len = ((dim as f64 * cfg.max_occlusion).floor() as usize).min(dim);
    let len = if max_len > 0 { rng.random_range(1..=max_len) } else { 0 };
    let start = rng.random_range(0..=dim - len);
    augment_with(x, sigma, start..start + len, rng)
}

/// One (anchor, positive, negative) triple with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletEntry {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub anchor_identity: u32,
    pub negative_identity: u32,
    pub anchor_index: usize,
    /// `None` when the positive is an augmented copy of the anchor.
    pub positive_index: Option<usize>,
    pub negative_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub domain_id: u32,
    pub entries: Vec<TripletEntry>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row-major `[B, input_dim]` matrices of anchors, positives and negatives.
    pub fn stacked(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut p = Vec::new();
        let mut n = Vec::new();
        for e in &self.entries {
            a.extend_from_slice(&e.anchor);
            p.extend_from_slice(&e.positive);
            n.extend_from_slice(&e.negative);
        }
        (a, p, n)
    }
}

/// Class-balanced sampling of `b` triplets from `b` distinct identities.
///
/// The positive is a different sample of the anchor's identity when one
/// exists, otherwise an augmented copy of the anchor. The negative comes from
/// a uniformly chosen other identity.
pub fn sample_triplets(
    ds: &DomainDataset,
    b: usize,
    augment_cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<TripletBatch> {
    let identities = ds.identities();
    if identities.len() < 2 {
        return Err(Error::Contract(format!(
            "domain {} has {} identities; triplets need at least 2",
            ds.domain_id,
            identities.len()
        )));
    }
    if identities.len() < b {
        return Err(Error::Contract(format!(
            "domain {} has {} identities, {} short of batch size {b}",
            ds.domain_id,
            identities.len(),
            b - identities.len()
        )));
    }
    let chosen = index::sample(rng, identities.len(), b);
    let mut entries = Vec::with_capacity(b);
    for slot in chosen.iter() {
        let identity = identities[slot];
        let members = ds.indices_of(identity);
        let ai = rng.random_range(0..members.len());
        let anchor_index = members[ai];
        let anchor = ds.samples[anchor_index].x.clone();
        let (positive, positive_index) = if members.len() >= 2 {
            let mut pi = rng.random_range(0..members.len() - 1);
            if pi >= ai {
                pi += 1;
            }
            (ds.samples[members[pi]].x.clone(), Some(members[pi]))
        } else {
            (augment(&anchor, augment_cfg, rng), None)
        };
        let mut ni = rng.random_range(0..identities.len() - 1);
        if ni >= slot {
            ni += 1;
        }
        let negative_identity = identities[ni];
        let neg_members = ds.indices_of(negative_identity);
        let negative_index = neg_members[rng.random_range(0..neg_members.len())];
        entries.push(TripletEntry {
            anchor,
            positive,
            negative: ds.samples[negative_index].x.clone(),
            anchor_identity: identity,
            negative_identity,
            anchor_index,
            positive_index,
            negative_index,
        });
    }
    Ok(TripletBatch {
        domain_id: ds.domain_id,
        entries,
    })
}

const TEXT_MAGIC: &str = "cdt-dataset v1";
const BINARY_MAGIC: &[u8; 4] = b"CDTB";
const BINARY_VERSION: u32 = 1;

pub fn to_text(domains: &[DomainDataset], input_dim: usize) -> String {
    let mut out = format!("{TEXT_MAGIC} input_dim={input_dim} domains={}\n", domains.len());
    for d in domains {
        let _ = writeln!(out, "domain {} samples={}", d.domain_id, d.samples.len());
        for s in &d.samples {
            let _ = write!(out, "{},{}", d.domain_id, s.identity);
            for v in &s.x {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn key_value<'a>(token: Option<&'a str>, key: &str, line: usize) -> Result<&'a str> {
    token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected {key}=<value>")))
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {what} {s:?}")))
}

/// Parses the text format; returns the domains and the declared input dimension.
pub fn from_text(text: &str) -> Result<(Vec<DomainDataset>, usize)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let rest = header
        .strip_prefix(TEXT_MAGIC)
        .ok_or_else(|| parse_err(1, format!("missing header {TEXT_MAGIC:?}")))?;
    let mut tokens = rest.split_whitespace();
    let input_dim: usize = parse_num(key_value(tokens.next(), "input_dim", 1)?, 1, "input_dim")?;
    let count: usize = parse_num(key_value(tokens.next(), "domains", 1)?, 1, "domain count")?;

    let mut domains = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(0, "unexpected end of file"))?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("domain") {
            return Err(parse_err(ln, "expected a `domain` section"));
        }
        let domain_id: u32 = parse_num(tokens.next().unwrap_or(""), ln, "domain id")?;
        let n: usize = parse_num(key_value(tokens.next(), "samples", ln)?, ln, "sample count")?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or_else(|| parse_err(0, "unexpected end of file"))?;
            let mut fields = line.split(',');
            let d: u32 = parse_num(fields.next().unwrap_or(""), ln, "domain id")?;
            if d != domain_id {
                return Err(parse_err(ln, format!("sample of domain {d} inside section {domain_id}")));
            }
            let identity: u32 = parse_num(fields.next().unwrap_or(""), ln, "identity")?;
            let x = fields
                .map(|f| parse_num::<f64>(f, ln, "value"))
                .collect::<Result<Vec<_>>>()?;
            if x.len() != input_dim {
                return Err(parse_err(ln, format!("expected {input_dim} values, found {}", x.len())));
            }
            samples.push(Sample { identity, x });
        }
        domains.push(DomainDataset::new(domain_id, samples));
    }
    if let Some((ln, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(parse_err(ln, format!("trailing content {line:?}")));
    }
    validate_domains(&domains)?;
    Ok((domains, input_dim))
}

pub fn to_binary(domains: &[DomainDataset], input_dim: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(domains.len() as u32).to_le_bytes());
    for d in domains {
        out.extend_from_slice(&d.domain_id.to_le_bytes());
        out.extend_from_slice(&(d.samples.len() as u32).to_le_bytes());
        for s in &d.samples {
            out.extend_from_slice(&s.identity.to_le_bytes());
            for v in &s.x {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::ParseBinary {
                offset: self.pos,
                msg: "truncated file".into(),
            })?;
        self.pos += N;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn from_binary(bytes: &[u8]) -> Result<(Vec<DomainDataset>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != BINARY_MAGIC {
        return Err(Error::ParseBinary {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != BINARY_VERSION {
        return Err(Error::ParseBinary {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let input_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut domains = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let domain_id = r.u32()?;
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let identity = r.u32()?;
            let x = (0..input_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { identity, x });
        }
        domains.push(DomainDataset::new(domain_id, samples));
    }
    if r.pos != bytes.len() {
        return Err(Error::ParseBinary {
            offset: r.pos,
            msg: "trailing bytes".into(),
        });
    }
    validate_domains(&domains)?;
    Ok((domains, input_dim))
}

/// Writes the text format, or the binary one when the path ends in `.bin`.
pub fn store(path: &Path, domains: &[DomainDataset], input_dim: usize) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e == "bin") {
        to_binary(domains, input_dim)
    } else {
        to_text(domains, input_dim).into_bytes()
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, recognized by its leading bytes.
pub fn load(path: &Path) -> Result<(Vec<DomainDataset>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        from_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(0, e.to_string()))?;
        from_text(text)
    }
}
