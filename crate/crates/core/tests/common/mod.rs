#![allow(dead_code)]
//! Shared generators and independent oracles for the integration suites.

pub mod formats;

use rand::Rng;
use serde_json::json;
use ssd_core::adapter::{init_params, mva_forward, AdapterDims, AdapterParams, DirectionalMarkers, Param, RegionFeatures};
use ssd_core::dataio::ImageGroup;
use ssd_core::pack::{AssociationMatrix, DescriptionPack, DescriptionPair};
use ssd_core::rng::{self, EngineRng};
use ssd_core::scoring::{self_normalized_scores, SimilarityConfig};
use ssd_core::tensor::Tensor;
use ssd_core::trainer::{loss_eq9, pair_loss_and_grads, targets, DescriptionBasis};

pub const GRAD_DIMS: AdapterDims = AdapterDims {
    embed_dim: 16,
    down_dim: 8,
    attn_dim: 8,
    heads: 2,
};
pub const GRAD_PATCHES: usize = 4;
pub const FD_STEP: f64 = 1e-3;

pub fn unit_f32(rng: &mut EngineRng, d: usize) -> Vec<f32> {
    rng::to_f32(&rng::unit_vector(rng, d))
}

/// Pack with `n` random description pairs and `r` relations, each with at
/// least one nonzero association.
pub fn random_pack(rng: &mut EngineRng, d: usize, n: usize, r: usize) -> DescriptionPack {
    let pairs = (0..n)
        .map(|i| DescriptionPair {
            raw_text: format!("raw {i}"),
            opposite_text: format!("opposite {i}"),
            raw_embedding: unit_f32(rng, d),
            opposite_embedding: unit_f32(rng, d),
        })
        .collect();
    let mut values = Vec::with_capacity(r * n);
    for _ in 0..r {
        let mut row: Vec<i8> = (0..n).map(|_| rng.random_range(-1..=1)).collect();
        if row.iter().all(|&c| c == 0) {
            row[rng.random_range(0..n)] = 1;
        }
        values.extend(row);
    }
    let names = (0..r).map(|i| format!("rel{i}")).collect();
    let assoc = AssociationMatrix::new(names, n, values).unwrap();
    DescriptionPack::new(pairs, assoc, d, json!({})).unwrap()
}

/// Region whose tokens have unit expected norm, the scale fixtures use.
pub fn random_region(rng: &mut EngineRng, m: usize, d: usize) -> RegionFeatures<f64> {
    let s = 1.0 / (d as f64).sqrt();
    let cls = rng::gaussian(rng, d).into_iter().map(|v| v * s).collect();
    let patches = Tensor::new(vec![m, d], rng::gaussian(rng, m * d).into_iter().map(|v| v * s).collect()).unwrap();
    RegionFeatures::new(cls, patches).unwrap()
}

/// Init parameters with the biases, the layer-norm affine, and the fusion
/// weights perturbed so no gradient is structurally trivial.
pub fn random_params(rng: &mut EngineRng, dims: AdapterDims, seed: u64) -> AdapterParams<f64> {
    let mut p = init_params(dims, seed).unwrap().cast::<f64>();
    for which in [Param::LnGain, Param::LnBias, Param::FuseWeight, Param::FuseBias] {
        for v in p.get_mut(which).data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    p
}

/// The loss recomputed through the plain forward pass and the scoring
/// module, not the tape.
#[allow(clippy::too_many_arguments)]
pub fn reference_loss(
    params: &AdapterParams<f64>,
    pack: &DescriptionPack,
    relation: usize,
    subject: &RegionFeatures<f64>,
    object: &RegionFeatures<f64>,
    markers: &DirectionalMarkers<f64>,
    margin: f64,
    alpha: f64,
    temperature: f64,
) -> f64 {
    let v = mva_forward(subject, object, markers, params).unwrap();
    let sim = SimilarityConfig::new(temperature).unwrap();
    let s = self_normalized_scores(&v, pack, &sim).unwrap();
    loss_eq9(&s.per_description_delta, pack.associations().row(relation), margin, alpha).unwrap()
}

pub struct GradReport {
    /// Worst over tensors of `max |analytic − numeric| / max(|analytic|, |numeric|)`,
    /// both maxima taken over the tensor's entries.
    pub max_rel_err: f64,
    /// Worst single-entry relative error, floored at [`REL_FLOOR`].
    pub max_entry_rel_err: f64,
    pub worst: Param,
    pub checked: usize,
}

pub const REL_FLOOR: f64 = 1e-3;

/// Compare tape gradients of the training loss with central differences for
/// every parameter entry of one random instance.
pub fn gradient_check(seed: u64) -> GradReport {
    let mut rng = rng::seeded(seed);
    let d = GRAD_DIMS.embed_dim;
    let n = rng.random_range(3..=8);
    let r = rng.random_range(1..=4);
    let pack = random_pack(&mut rng, d, n, r);
    let relation = rng.random_range(0..r);
    let params = random_params(&mut rng, GRAD_DIMS, seed);
    let subject = random_region(&mut rng, GRAD_PATCHES, d);
    let object = random_region(&mut rng, GRAD_PATCHES, d);
    let markers = DirectionalMarkers::new(rng::unit_vector(&mut rng, d), rng::unit_vector(&mut rng, d)).unwrap();
    let alpha = rng.random_range(0.5..3.0);
    let margin = 0.1 * rng.random_range(-1.0..1.0) - 0.03;
    let temperature = rng.random_range(1.0..10.0);

    let target = targets(pack.associations().row(relation), alpha, margin);
    let basis = DescriptionBasis::<f64>::new(&pack);
    let (_, grads) = pair_loss_and_grads(&params, &basis, &subject, &object, &markers, &target, temperature).unwrap();

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_entry_rel_err: 0.0,
        worst: Param::DownProj,
        checked: 0,
    };
    let mut probe = params.clone();
    for (pi, &p) in Param::ALL.iter().enumerate() {
        let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
        for i in 0..probe.get(p).len() {
            let orig = probe.get(p).data()[i];
            let eval = |x: f64, probe: &mut AdapterParams<f64>| {
                probe.get_mut(p).data_mut()[i] = x;
                reference_loss(probe, &pack, relation, &subject, &object, &markers, margin, alpha, temperature)
            };
            let up = eval(orig + FD_STEP, &mut probe);
            let down = eval(orig - FD_STEP, &mut probe);
            probe.get_mut(p).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[pi].data()[i];
            let diff = (analytic - numeric).abs();
            max_diff = max_diff.max(diff);
            max_mag = max_mag.max(analytic.abs()).max(numeric.abs());
            let entry = diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_entry_rel_err = report.max_entry_rel_err.max(entry);
            report.checked += 1;
        }
        let rel = if max_mag == 0.0 { max_diff } else { max_diff / max_mag };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = p;
        }
    }
    report
}

/// Recall@K and mean Recall@K by direct enumeration: every candidate's rank
/// is counted as the number of candidates that beat it.
pub fn brute_force_recall(
    groups: &[ImageGroup],
    scores: &[Vec<f64>],
    gts: &[Option<usize>],
    k: usize,
    graph_constraint: bool,
) -> Option<(f64, f64)> {
    let mut image_recalls = Vec::new();
    let mut per_pred: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for g in groups {
        // candidates: (sample, relation, score)
        let mut cands = Vec::new();
        for &s in &g.samples {
            let row = &scores[s];
            for (rel, &sc) in row.iter().enumerate() {
                let keep = !graph_constraint
                    || row.iter().enumerate().all(|(o, &os)| os < sc || (os == sc && o >= rel));
                if keep {
                    cands.push((s, rel, sc));
                }
            }
        }
        let beats = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
            a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1))
        };
        let in_top_k = |c: &(usize, usize, f64)| cands.iter().filter(|o| beats(o, c)).count() < k;
        let gt_list: Vec<(usize, usize)> = g.samples.iter().filter_map(|&s| gts[s].map(|r| (s, r))).collect();
        if gt_list.is_empty() {
            continue;
        }
        let hit = |&(s, r): &(usize, usize)| cands.iter().any(|c| c.0 == s && c.1 == r && in_top_k(c));
        let hits = gt_list.iter().filter(|x| hit(x)).count();
        image_recalls.push(hits as f64 / gt_list.len() as f64);
        let preds: std::collections::BTreeSet<usize> = gt_list.iter().map(|x| x.1).collect();
        for p in preds {
            let of_p: Vec<_> = gt_list.iter().filter(|x| x.1 == p).collect();
            let h = of_p.iter().filter(|x| hit(x)).count();
            per_pred.entry(p).or_default().push(h as f64 / of_p.len() as f64);
        }
    }
    if image_recalls.is_empty() {
        return None;
    }
    let r = image_recalls.iter().sum::<f64>() / image_recalls.len() as f64;
    let means: Vec<f64> = per_pred.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let mr = means.iter().sum::<f64>() / means.len() as f64;
    Some((r, mr))
}
