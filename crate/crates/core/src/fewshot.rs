//! N-way K-shot episodes over discriminator encodings: mean prototypes and
//! nearest-prototype labels under cosine distance.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::DiscriminatorNet;
use crate::objectives::{cosine_distance, MIN_NORM};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class.
    pub queries: usize,
}

impl EpisodeConfig {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self { n_way, k_shot, queries: 15 }
    }

    fn validate(&self) -> Result<()> {
        if self.n_way < 1 || self.k_shot < 1 || self.queries < 1 {
            return Err(Error::config("episode", format!("{self:?} needs N, K and Q >= 1")));
        }
        Ok(())
    }
}

/// Indices into the test split. Episode labels are `0..N` in the order the
/// classes were drawn; supports and queries are grouped by label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub config: EpisodeConfig,
    /// Original class id of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draws N distinct classes, then K + Q distinct images of each, all
/// uniformly without replacement.
pub fn sample_episode(labels: &[usize], cfg: EpisodeConfig, rng: &mut ChaCha8Rng) -> Result<Episode> {
    cfg.validate()?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < cfg.n_way {
        return Err(Error::InsufficientData(format!(
            "{}-way episode from {} classes",
            cfg.n_way,
            classes.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, l) in labels.iter().enumerate() {
        members[classes.binary_search(l).expect("class listed")].push(i);
    }
    let picked = sample(rng, classes.len(), cfg.n_way).into_vec();
    let mut ep = Episode {
        config: cfg,
        classes: picked.iter().map(|&c| classes[c]).collect(),
        support: Vec::with_capacity(cfg.n_way * cfg.k_shot),
        support_labels: Vec::with_capacity(cfg.n_way * cfg.k_shot),
        query: Vec::with_capacity(cfg.n_way * cfg.queries),
        query_labels: Vec::with_capacity(cfg.n_way * cfg.queries),
    };
    for (label, &c) in picked.iter().enumerate() {
        let pool = &members[c];
        let need = cfg.k_shot + cfg.queries;
        if pool.len() < need {
            return Err(Error::InsufficientData(format!(
                "class {} has {} images, episode needs {need}",
                classes[c],
                pool.len()
            )));
        }
        let chosen = sample(rng, pool.len(), need).into_vec();
        let (s, q) = chosen.split_at(cfg.k_shot);
        ep.support.extend(s.iter().map(|&i| pool[i]));
        ep.support_labels.extend(std::iter::repeat_n(label, cfg.k_shot));
        ep.query.extend(q.iter().map(|&i| pool[i]));
        ep.query_labels.extend(std::iter::repeat_n(label, cfg.queries));
    }
    Ok(ep)
}

/// Per-class mean of `encodings [M×d]`, giving `[n_way×d]`.
pub fn compute_prototypes(encodings: &Tensor<f64>, labels: &[usize], n_way: usize) -> Result<Tensor<f64>> {
    let s = encodings.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for encodings {s:?}",
            labels.len()
        )));
    }
    let d = s[1];
    let mut sums = vec![0.0; n_way * d];
    let mut counts = vec![0usize; n_way];
    for (row, &l) in encodings.data().chunks_exact(d.max(1)).zip(labels) {
        if l >= n_way {
            return Err(Error::InvalidInput(format!("label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
        for (acc, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *acc += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("class {empty} has no support encodings")));
    }
    for (chunk, &c) in sums.chunks_exact_mut(d.max(1)).zip(&counts) {
        chunk.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(Tensor::new(vec![n_way, d], sums)?)
}

/// Label of the prototype closest in cosine distance; the lowest label
/// wins ties.
pub fn classify_query(z: &[f64], prototypes: &Tensor<f64>) -> Result<usize> {
    let d = prototypes.shape().get(1).copied().unwrap_or(0);
    if prototypes.rank() != 2 || z.len() != d {
        return Err(Error::InvalidInput(format!(
            "query of length {} against prototypes {:?}",
            z.len(),
            prototypes.shape()
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for (n, c) in prototypes.data().chunks_exact(d.max(1)).enumerate() {
        if !(c.iter().map(|v| v * v).sum::<f64>().sqrt() > MIN_NORM) {
            return Err(Error::DegeneratePrototype(n));
        }
        let dist = cosine_distance(z, c)?;
        if dist < best.0 {
            best = (dist, n);
        }
    }
    Ok(best.1)
}

/// Fraction of the episode's queries labelled correctly, given encodings of
/// the whole split.
pub fn episode_accuracy(encodings: &Tensor<f64>, ep: &Episode) -> Result<f64> {
    let d = encodings.shape()[1];
    let rows = |idx: &[usize]| -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&encodings.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::new(vec![idx.len(), d], data)?)
    };
    let protos = compute_prototypes(&rows(&ep.support)?, &ep.support_labels, ep.config.n_way)?;
    let mut correct = 0;
    for (&q, &truth) in ep.query.iter().zip(&ep.query_labels) {
        if classify_query(&encodings.data()[q * d..(q + 1) * d], &protos)? == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / ep.query.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub mean: f64,
    /// Half-width `1.96·std/√episodes` (population std).
    pub ci95: f64,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    mean: f64,
    ci95: f64,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<&'a str>,
}

impl EvalReport {
    pub fn from_accuracies(cfg: EpisodeConfig, accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::InvalidInput("no episodes".into()));
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            queries: cfg.queries,
            episodes: accuracies.len(),
            mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
            accuracies,
        })
    }

    /// `episode,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }

    pub fn summary_json(&self, checkpoint: Option<&str>) -> String {
        let summary = Summary {
            mean: self.mean,
            ci95: self.ci95,
            n_way: self.n_way,
            k_shot: self.k_shot,
            queries: self.queries,
            episodes: self.episodes,
            checkpoint,
        };
        serde_json::to_string_pretty(&summary).expect("plain struct serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, checkpoint: Option<&str>) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(io(&csv))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.summary_json(checkpoint) + "\n").map_err(io(&json))
    }
}

/// Runs `episodes` episodes in order from one rng over precomputed encodings
/// `[M×d]` of a split with the given labels.
pub fn evaluate_encodings(
    encodings: &Tensor<f64>,
    labels: &[usize],
    cfg: EpisodeConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be >= 1"));
    }
    if encodings.rank() != 2 || encodings.shape()[0] != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for encodings {:?}",
            labels.len(),
            encodings.shape()
        )));
    }
    let accuracies = (0..episodes)
        .map(|_| episode_accuracy(encodings, &sample_episode(labels, cfg, rng)?))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(cfg, accuracies)
}

/// Eval-mode encodings of every image, in chunks, as `f64`.
pub fn encode_all<T: Scalar>(d: &DiscriminatorNet<T>, set: &ImageSet<T>, chunk: usize) -> Result<Tensor<f64>> {
    let width = d.config().d;
    let mut data = Vec::with_capacity(set.len() * width);
    let idx: Vec<usize> = (0..set.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        data.extend(d.encode(&set.gather(part)?)?.to_f64_vec());
    }
    Ok(Tensor::new(vec![set.len(), width], data)?)
}

/// Encodes the split with `d` and evaluates episodes over it.
pub fn evaluate<T: Scalar>(
    d: &DiscriminatorNet<T>,
    set: &ImageSet<T>,
    cfg: EpisodeConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    let enc = encode_all(d, set, 256)?;
    evaluate_encodings(&enc, set.labels(), cfg, episodes, rng)
}
