//! Predicate-classification recall.
//!
//! Every pair of an image proposes candidate triplets; with the graph
//! constraint a pair proposes only its top-scoring relation. Recall@K is the
//! share of an image's ground-truth triplets found among its K best
//! candidates, averaged over images that have any ground truth. Mean
//! Recall@K does the same per predicate and then averages predicates
//! uniformly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::mva_forward;
use crate::checkpoint::Checkpoint;
use crate::dataio::{DatasetFixture, ImageGroup, PairSample};
use crate::error::{Error, Result};
use crate::pack::DescriptionPack;
use crate::par;
use crate::scoring::{score_category_names, self_normalized_scores, SimilarityConfig};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub sample: usize,
    pub relation: usize,
    pub score: f64,
}

/// Candidates of one image, best first. Ties go to the lower sample index,
/// then the lower relation index. `scores[s]` covers every relation of the
/// active split for sample `s`.
pub fn rank_triplets(group: &ImageGroup, scores: &[Vec<f64>], graph_constraint: bool) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &s in &group.samples {
        let row = &scores[s];
        if graph_constraint {
            let best = row
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (r, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((r, v)),
                });
            if let Some((relation, score)) = best {
                out.push(Triplet { sample: s, relation, score });
            }
        } else {
            out.extend(row.iter().enumerate().map(|(relation, &score)| Triplet {
                sample: s,
                relation,
                score,
            }));
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.sample.cmp(&b.sample))
            .then(a.relation.cmp(&b.relation))
    });
    out
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(())
}

/// Per image: `(relation, hit)` for every ground-truth triplet.
fn image_hits<'a>(
    groups: &'a [ImageGroup],
    rankings: &'a [Vec<Triplet>],
    gts: &'a [Option<usize>],
    k: usize,
) -> impl Iterator<Item = Vec<(usize, bool)>> + 'a {
    groups.iter().zip(rankings).map(move |(g, ranking)| {
        let top = &ranking[..ranking.len().min(k)];
        g.samples
            .iter()
            .filter_map(|&s| {
                gts[s].map(|rel| (rel, top.iter().any(|t| t.sample == s && t.relation == rel)))
            })
            .collect()
    })
}

/// Recall@K averaged over images with at least one ground truth.
/// `gts[s]` is sample `s`'s relation in the active split, if it has one.
pub fn recall_at_k(groups: &[ImageGroup], rankings: &[Vec<Triplet>], gts: &[Option<usize>], k: usize) -> Result<f64> {
    check_k(k)?;
    let mut sum = 0.0;
    let mut images = 0usize;
    for hits in image_hits(groups, rankings, gts, k) {
        if hits.is_empty() {
            continue;
        }
        sum += hits.iter().filter(|(_, h)| *h).count() as f64 / hits.len() as f64;
        images += 1;
    }
    if images == 0 {
        return Err(Error::Degenerate("no image has a ground-truth triplet in this split".into()));
    }
    Ok(sum / images as f64)
}

/// Mean Recall@K and the per-predicate recalls it averages. A predicate's
/// recall is its per-image recall averaged over the images containing it.
pub fn mean_recall_at_k(
    groups: &[ImageGroup],
    rankings: &[Vec<Triplet>],
    gts: &[Option<usize>],
    k: usize,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    check_k(k)?;
    // relation -> (sum of per-image recalls, images containing it)
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for hits in image_hits(groups, rankings, gts, k) {
        let mut per_rel: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (rel, hit) in hits {
            let e = per_rel.entry(rel).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
        for (rel, (h, n)) in per_rel {
            let e = acc.entry(rel).or_default();
            e.0 += h as f64 / n as f64;
            e.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::Degenerate("no image has a ground-truth triplet in this split".into()));
    }
    let per: BTreeMap<usize, f64> = acc.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect();
    let mean = per.values().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub temperature: f64,
    pub graph_constraint: bool,
    /// Skip the adapter and score the mean of both regions' CLS tokens
    /// against the relation name embeddings.
    pub baseline: bool,
    /// Treat every pair as its own image.
    pub pair_level: bool,
    pub split_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            temperature: crate::scoring::DEFAULT_TEMPERATURE,
            graph_constraint: true,
            baseline: false,
            pair_level: false,
            split_name: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub temperature: f64,
    pub checkpoint_id: Option<String>,
    /// Training seed of the checkpoint.
    pub seed: Option<u64>,
    pub graph_constraint: bool,
    pub baseline: bool,
    pub pair_level: bool,
    pub zero_gt_images: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub engine_version: String,
    pub split_name: String,
    pub relations: Vec<String>,
    pub ks: Vec<usize>,
    pub r_at_k: BTreeMap<usize, f64>,
    pub mr_at_k: BTreeMap<usize, f64>,
    /// relation → K → recall, over relations with at least one ground truth.
    pub per_predicate_recall: BTreeMap<String, BTreeMap<usize, f64>>,
    pub images_evaluated: usize,
    pub ground_truth_count: usize,
    pub config_echo: ConfigEcho,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One header row and one value row, percentages with one decimal.
    pub fn render_table(&self) -> String {
        let mode = if self.config_echo.baseline { "baseline" } else { "adapter" };
        let mut header = format!("{:<12}{:<10}", "split", "mode");
        let mut row = format!("{:<12}{:<10}", self.split_name, mode);
        for (label, map) in [("R", &self.r_at_k), ("mR", &self.mr_at_k)] {
            for k in &self.ks {
                let _ = write!(header, "{:>9}", format!("{label}@{k}"));
                let _ = write!(row, "{:>9.1}", 100.0 * map[k]);
            }
        }
        format!("{header}\n{row}\n")
    }
}

/// The visual embedding each sample is scored with.
fn embed(sample: &PairSample, dataset: &DatasetFixture, checkpoint: Option<&Checkpoint>) -> Result<Vec<f32>> {
    match checkpoint {
        Some(c) => mva_forward(&sample.subject, &sample.object, &dataset.markers, &c.params),
        None => Ok(sample
            .subject
            .cls
            .iter()
            .zip(&sample.object.cls)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()),
    }
}

/// Score every pair of `dataset` over `split_relations` and report recall.
/// In baseline mode `checkpoint` is ignored except for its id.
pub fn evaluate(
    checkpoint: Option<&Checkpoint>,
    dataset: &DatasetFixture,
    pack: &DescriptionPack,
    split_relations: &[String],
    ks: &[usize],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let sim = SimilarityConfig::new(cfg.temperature)?;
    if split_relations.is_empty() {
        return Err(Error::Config(format!("split `{}` has no relations", cfg.split_name)));
    }
    if ks.is_empty() {
        return Err(Error::Config("no K values requested".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    if !cfg.baseline && checkpoint.is_none() {
        return Err(Error::Config("a checkpoint is required unless baseline mode is on".into()));
    }
    if pack.embedding_dim() != dataset.embedding_dim {
        return Err(Error::dim("evaluate", &[pack.embedding_dim()], &[dataset.embedding_dim]));
    }
    let split_pack = pack.restrict_to_relations(split_relations)?;
    let dataset_rows: Vec<usize> = split_relations
        .iter()
        .map(|n| {
            dataset.relation_index(n).ok_or_else(|| Error::Lookup {
                kind: "relation",
                name: n.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let names: Vec<Vec<f32>> = dataset_rows
        .iter()
        .map(|&r| dataset.relation_name_embeddings[r].clone())
        .collect();

    let model = if cfg.baseline { None } else { checkpoint };
    let scores: Vec<Vec<f64>> = par::map(&dataset.samples, |s| {
        let v = embed(s, dataset, model)?;
        if cfg.baseline {
            score_category_names(&v, &names, &sim)
        } else {
            Ok(self_normalized_scores(&v, &split_pack, &sim)?.per_relation)
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let gts: Vec<Option<usize>> = dataset
        .samples
        .iter()
        .map(|s| dataset_rows.iter().position(|&r| r == s.gt_relation))
        .collect();
    let singletons: Vec<ImageGroup>;
    let groups: &[ImageGroup] = if cfg.pair_level {
        singletons = (0..dataset.samples.len())
            .map(|i| ImageGroup {
                image_id: format!("pair-{i}"),
                samples: vec![i],
            })
            .collect();
        &singletons
    } else {
        &dataset.images
    };
    let rankings: Vec<Vec<Triplet>> = par::map(groups, |g| rank_triplets(g, &scores, cfg.graph_constraint));

    let mut r_at_k = BTreeMap::new();
    let mut mr_at_k = BTreeMap::new();
    let mut per_predicate_recall: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for &k in ks {
        r_at_k.insert(k, recall_at_k(groups, &rankings, &gts, k)?);
        let (mr, per) = mean_recall_at_k(groups, &rankings, &gts, k)?;
        mr_at_k.insert(k, mr);
        for (rel, v) in per {
            per_predicate_recall
                .entry(split_relations[rel].clone())
                .or_default()
                .insert(k, v);
        }
    }
    let images_evaluated = groups
        .iter()
        .filter(|g| g.samples.iter().any(|&s| gts[s].is_some()))
        .count();
    let mut sorted_ks = ks.to_vec();
    sorted_ks.sort_unstable();
    sorted_ks.dedup();
    Ok(MetricsReport {
        engine_version: crate::ENGINE_VERSION.to_string(),
        split_name: cfg.split_name.clone(),
        relations: split_relations.to_vec(),
        ks: sorted_ks,
        r_at_k,
        mr_at_k,
        per_predicate_recall,
        images_evaluated,
        ground_truth_count: gts.iter().filter(|g| g.is_some()).count(),
        config_echo: ConfigEcho {
            temperature: cfg.temperature,
            checkpoint_id: checkpoint.map(Checkpoint::id),
            seed: checkpoint.map(|c| c.seed),
            graph_constraint: cfg.graph_constraint,
            baseline: cfg.baseline,
            pair_level: cfg.pair_level,
            zero_gt_images: "excluded".into(),
        },
    })
}
