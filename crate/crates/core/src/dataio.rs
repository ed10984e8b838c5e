//! Dataset fixtures: labeled subject/object pairs with precomputed region
//! features, grouped by image, plus split tags and a seeded generator for
//! desk-scale synthetic data.
//!
//! `features.bin` payload order, after the 16-byte `SSDDATA1` header (whose
//! counts are the sample count S and the embedding width D):
//!
//! ```text
//! R × D   relation name embeddings, in `relations` order
//! D       subject marker
//! D       object marker
//! S × [ subject.cls D | subject.patches M·D | object.cls D | object.patches M·D | clip sims R ]
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapter::{DirectionalMarkers, RegionFeatures};
use crate::container::{self, Blob, DATA_MAGIC};
use crate::error::{Error, Result};
use crate::pack::{DescriptionPack, UNIT_NORM_TOLERANCE};
use crate::rng::{self, EngineRng};
use crate::scoring::planted_direction;
use crate::tensor::{norm, Tensor};

pub const DATA_VERSION: u32 = 1;
pub const DATA_MANIFEST: &str = "data.json";
pub const DATA_BLOB: &str = "features.bin";

pub const BASE_SPLIT: &str = "base";
pub const NOVEL_SPLIT: &str = "novel";

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub subject: RegionFeatures,
    pub object: RegionFeatures,
    /// Index into the fixture's relation list.
    pub gt_relation: usize,
    /// Frozen-model similarity of the pair to every relation name.
    pub clip_relation_sims: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGroup {
    pub image_id: String,
    pub samples: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFixture {
    pub embedding_dim: usize,
    pub patch_count: usize,
    pub relation_names: Vec<String>,
    pub relation_name_embeddings: Vec<Vec<f32>>,
    pub markers: DirectionalMarkers,
    pub images: Vec<ImageGroup>,
    pub samples: Vec<PairSample>,
    pub split_tags: BTreeMap<String, Vec<String>>,
    pub provenance: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataManifest {
    version: u32,
    embedding_dim: usize,
    patch_count: usize,
    relations: Vec<String>,
    split_tags: BTreeMap<String, Vec<String>>,
    images: Vec<ImageGroup>,
    samples: Vec<SampleLabel>,
    provenance: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLabel {
    gt_relation: String,
}

fn check_unit(v: &[f32], what: impl FnOnce() -> String) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Validation(format!("{} has norm {n:.6}, expected 1", what())));
    }
    Ok(())
}

impl DatasetFixture {
    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|n| n == name)
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.split_tags
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup {
                kind: "split",
                name: name.to_string(),
            })
    }

    /// Check every fixture invariant; errors name the offending sample,
    /// image, or relation.
    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.embedding_dim, self.patch_count);
        if d == 0 || m == 0 {
            return Err(Error::Validation(format!("embedding_dim {d} and patch_count {m} must be positive")));
        }
        let r = self.relation_names.len();
        if r == 0 {
            return Err(Error::Validation("fixture lists no relations".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.relation_names {
            if !seen.insert(name) {
                return Err(Error::Validation(format!("relation `{name}` is listed twice")));
            }
        }
        if self.relation_name_embeddings.len() != r {
            return Err(Error::Validation(format!(
                "{} relation name embeddings for {r} relations",
                self.relation_name_embeddings.len()
            )));
        }
        for (i, e) in self.relation_name_embeddings.iter().enumerate() {
            if e.len() != d {
                return Err(Error::dim("relation name embedding", &[d], &[e.len()]));
            }
            check_unit(e, || format!("name embedding of `{}`", self.relation_names[i]))?;
        }
        for (side, mk) in [("subject", &self.markers.subject), ("object", &self.markers.object)] {
            if mk.len() != d {
                return Err(Error::dim("marker", &[d], &[mk.len()]));
            }
            check_unit(mk, || format!("{side} marker"))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            for (side, reg) in [("subject", &s.subject), ("object", &s.object)] {
                if reg.dim() != d || reg.patches.shape() != [m, d] {
                    return Err(Error::Validation(format!(
                        "sample {i}: {side} region has shape {:?}, expected {m} × {d}",
                        reg.patches.shape()
                    )));
                }
                reg.validate()
                    .map_err(|e| Error::Validation(format!("sample {i}: {side} region: {e}")))?;
            }
            if s.gt_relation >= r {
                return Err(Error::Validation(format!(
                    "sample {i}: relation index {} out of range ({r} relations)",
                    s.gt_relation
                )));
            }
            if s.clip_relation_sims.len() != r || s.clip_relation_sims.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "sample {i}: clip_relation_sims must be {r} finite values"
                )));
            }
        }
        let mut owner = vec![None::<usize>; self.samples.len()];
        let mut ids = HashSet::new();
        for (g, img) in self.images.iter().enumerate() {
            if !ids.insert(&img.image_id) {
                return Err(Error::Validation(format!("image id `{}` repeats", img.image_id)));
            }
            if img.samples.is_empty() {
                return Err(Error::Validation(format!("image `{}` has no samples", img.image_id)));
            }
            for &s in &img.samples {
                let slot = owner.get_mut(s).ok_or_else(|| {
                    Error::Validation(format!(
                        "image `{}` references sample {s}, but there are {} samples",
                        img.image_id,
                        self.samples.len()
                    ))
                })?;
                if let Some(prev) = slot.replace(g) {
                    return Err(Error::Validation(format!(
                        "sample {s} belongs to both image `{}` and `{}`",
                        self.images[prev].image_id, img.image_id
                    )));
                }
            }
        }
        if let Some(s) = owner.iter().position(Option::is_none) {
            return Err(Error::Validation(format!("sample {s} belongs to no image")));
        }
        for (split, names) in &self.split_tags {
            for n in names {
                if self.relation_index(n).is_none() {
                    return Err(Error::Validation(format!("split `{split}` names unknown relation `{n}`")));
                }
            }
        }
        if let (Some(b), Some(n)) = (self.split_tags.get(BASE_SPLIT), self.split_tags.get(NOVEL_SPLIT)) {
            check_disjoint(b, n)?;
        }
        if !self.provenance.is_object() {
            return Err(Error::Validation("provenance must be a JSON object".into()));
        }
        Ok(())
    }

    /// Keep only samples whose ground truth is in `relations`; images left
    /// empty are dropped. Relation indices and tags are unchanged.
    pub fn filter_to_relations<S: AsRef<str>>(&self, relations: &[S]) -> Result<Self> {
        let mut keep = vec![false; self.relation_count()];
        for name in relations {
            let i = self.relation_index(name.as_ref()).ok_or_else(|| Error::Lookup {
                kind: "relation",
                name: name.as_ref().to_string(),
            })?;
            keep[i] = true;
        }
        let mut remap = vec![None; self.samples.len()];
        let mut samples = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if keep[s.gt_relation] {
                remap[i] = Some(samples.len());
                samples.push(s.clone());
            }
        }
        let images = self
            .images
            .iter()
            .filter_map(|img| {
                let kept: Vec<usize> = img.samples.iter().filter_map(|&s| remap[s]).collect();
                (!kept.is_empty()).then(|| ImageGroup {
                    image_id: img.image_id.clone(),
                    samples: kept,
                })
            })
            .collect();
        Ok(Self {
            samples,
            images,
            ..self.clone()
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        container::ensure_dir(dir)?;
        let manifest = DataManifest {
            version: DATA_VERSION,
            embedding_dim: self.embedding_dim,
            patch_count: self.patch_count,
            relations: self.relation_names.clone(),
            split_tags: self.split_tags.clone(),
            images: self.images.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleLabel {
                    gt_relation: self.relation_names[s.gt_relation].clone(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        container::write_json(&dir.join(DATA_MANIFEST), &manifest)?;
        let mut payload = Vec::with_capacity(self.payload_len());
        for e in &self.relation_name_embeddings {
            payload.extend_from_slice(e);
        }
        payload.extend_from_slice(&self.markers.subject);
        payload.extend_from_slice(&self.markers.object);
        for s in &self.samples {
            for reg in [&s.subject, &s.object] {
                payload.extend_from_slice(&reg.cls);
                payload.extend_from_slice(reg.patches.data());
            }
            payload.extend_from_slice(&s.clip_relation_sims);
        }
        container::write_blob(
            &dir.join(DATA_BLOB),
            DATA_MAGIC,
            self.samples.len() as u32,
            self.embedding_dim as u32,
            &payload,
        )
    }

    fn payload_len(&self) -> usize {
        payload_len(self.relation_count(), self.embedding_dim, self.patch_count, self.samples.len())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(DATA_MANIFEST);
        let blob_path = dir.join(DATA_BLOB);
        let manifest: DataManifest = container::read_json(&manifest_path)?;
        if manifest.version != DATA_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported dataset version {}",
                manifest_path.display(),
                manifest.version
            )));
        }
        let (d, m, r) = (manifest.embedding_dim, manifest.patch_count, manifest.relations.len());
        let s_count = manifest.samples.len();
        if d == 0 || m == 0 {
            return Err(Error::Validation(format!(
                "{}: embedding_dim {d} and patch_count {m} must be positive",
                manifest_path.display()
            )));
        }
        let blob = container::read_blob(&blob_path, DATA_MAGIC, |bs, bd| {
            if bs as usize != s_count || bd as usize != d {
                return Err(Error::format(
                    &blob_path,
                    8,
                    format!("header says S={bs}, D={bd}; manifest says S={s_count}, D={d}"),
                ));
            }
            Ok(payload_len(r, d, m, s_count))
        })?;
        let Blob { payload, .. } = blob;
        let mut cursor = payload.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            head.to_vec()
        };
        let relation_name_embeddings = (0..r).map(|_| take(d)).collect();
        let markers = DirectionalMarkers {
            subject: take(d),
            object: take(d),
        };
        let mut samples = Vec::with_capacity(s_count);
        for (i, label) in manifest.samples.iter().enumerate() {
            let gt = manifest
                .relations
                .iter()
                .position(|n| n == &label.gt_relation)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "sample {i}: unknown relation `{}`",
                        label.gt_relation
                    ))
                })?;
            let mut region = || RegionFeatures {
                cls: take(d),
                patches: Tensor::new(vec![m, d], take(m * d)).expect("sized by payload_len"),
            };
            let subject = region();
            let object = region();
            samples.push(PairSample {
                subject,
                object,
                gt_relation: gt,
                clip_relation_sims: take(r),
            });
        }
        let fixture = Self {
            embedding_dim: d,
            patch_count: m,
            relation_names: manifest.relations,
            relation_name_embeddings,
            markers,
            images: manifest.images,
            samples,
            split_tags: manifest.split_tags,
            provenance: manifest.provenance,
        };
        fixture.validate()?;
        Ok(fixture)
    }
}

fn payload_len(r: usize, d: usize, m: usize, s: usize) -> usize {
    r * d + 2 * d + s * (2 * (m + 1) * d + r)
}

fn check_disjoint(base: &[String], novel: &[String]) -> Result<()> {
    let b: HashSet<&String> = base.iter().collect();
    let overlap: Vec<&str> = novel.iter().filter(|n| b.contains(n)).map(String::as_str).collect();
    if !overlap.is_empty() {
        return Err(Error::Validation(format!(
            "base and novel splits overlap on: {}",
            overlap.join(", ")
        )));
    }
    Ok(())
}

/// Replace the base/novel tags of `fixture`.
pub fn define_splits<S: AsRef<str>>(fixture: &DatasetFixture, base: &[S], novel: &[S]) -> Result<DatasetFixture> {
    let base: Vec<String> = base.iter().map(|s| s.as_ref().to_string()).collect();
    let novel: Vec<String> = novel.iter().map(|s| s.as_ref().to_string()).collect();
    if base.is_empty() || novel.is_empty() {
        return Err(Error::Validation(format!(
            "splits must be nonempty (base has {}, novel has {})",
            base.len(),
            novel.len()
        )));
    }
    check_disjoint(&base, &novel)?;
    for n in base.iter().chain(&novel) {
        if fixture.relation_index(n).is_none() {
            return Err(Error::Lookup {
                kind: "relation",
                name: n.clone(),
            });
        }
    }
    let mut out = fixture.clone();
    out.split_tags.insert(BASE_SPLIT.into(), base);
    out.split_tags.insert(NOVEL_SPLIT.into(), novel);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub embedding_dim: usize,
    pub patch_count: usize,
    pub relations: usize,
    pub images: usize,
    pub pairs_per_image: usize,
    /// Per-patch noise norm relative to the unit planted signal.
    pub cluster_spread: f64,
    pub novel_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embedding_dim: 32,
            patch_count: 4,
            relations: 6,
            images: 60,
            pairs_per_image: 3,
            cluster_spread: 1.0,
            novel_fraction: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0
            || self.patch_count == 0
            || self.relations < 2
            || self.images == 0
            || self.pairs_per_image == 0
        {
            return Err(Error::Config(format!(
                "synthetic counts must be positive (and at least 2 relations): {self:?}"
            )));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config(format!("cluster_spread must be ≥ 0, got {}", self.cluster_spread)));
        }
        if !(0.0..1.0).contains(&self.novel_fraction) {
            return Err(Error::Config(format!("novel_fraction must be in [0, 1), got {}", self.novel_fraction)));
        }
        Ok(())
    }

    pub fn novel_count(&self) -> usize {
        ((self.relations as f64 * self.novel_fraction).round() as usize).clamp(1, self.relations - 1)
    }
}

/// Minimum score gap by which a noiseless planted direction must beat every
/// other selected relation.
const PLANT_SEPARATION: f64 = 1e-3;

/// Pick relations in pack order, skipping any whose planted direction would
/// not rank itself strictly first against those already picked (and vice
/// versa). Returns pack row indices and their planted unit directions.
fn select_separable_relations(pack: &DescriptionPack, want: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let dirs: Vec<Vec<f64>> = (0..pack.relation_count()).map(|r| planted_direction(pack, r)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut chosen: Vec<(usize, Vec<f64>)> = Vec::new();
    for (r, w) in dirs.iter().enumerate() {
        if chosen.len() == want {
            break;
        }
        let n = dot(w, w).sqrt();
        if n < 1e-6 {
            continue;
        }
        let u: Vec<f64> = w.iter().map(|x| x / n).collect();
        let ok = chosen.iter().all(|(o, ou)| {
            dot(&u, w) - dot(&u, &dirs[*o]) > PLANT_SEPARATION
                && dot(ou, &dirs[*o]) - dot(ou, w) > PLANT_SEPARATION
        });
        if ok {
            chosen.push((r, u));
        }
    }
    if chosen.len() < want {
        return Err(Error::Config(format!(
            "pack yields only {} mutually separable relations, {want} requested",
            chosen.len()
        )));
    }
    Ok(chosen)
}

fn noisy_region(rng: &mut EngineRng, planted: &[f64], m: usize, spread: f64) -> RegionFeatures {
    let d = planted.len();
    let cls = rng::to_f32(&rng::unit_vector(rng, d));
    let scale = spread / (d as f64).sqrt();
    let mut patches = Vec::with_capacity(m * d);
    for _ in 0..m {
        let noise = rng::gaussian(rng, d);
        patches.extend(planted.iter().zip(&noise).map(|(p, z)| (p + scale * z) as f32));
    }
    RegionFeatures {
        cls,
        patches: Tensor::new(vec![m, d], patches).expect("m × d"),
    }
}

/// Seeded synthetic fixture whose region patches carry a planted relation
/// direction and whose CLS tokens are pure nuisance.
///
/// Each relation's planted direction is the normalized association-weighted
/// sum of its descriptions' `t_a − t_p`. Every patch of both regions is that
/// direction plus isotropic noise of norm ≈ `cluster_spread`, so the mean of
/// all patches recovers the relation as the spread goes to zero. A fraction
/// of the relations is tagged novel.
pub fn generate_synthetic(cfg: &SynthConfig, pack: &DescriptionPack) -> Result<DatasetFixture> {
    cfg.validate()?;
    let d = cfg.embedding_dim;
    if pack.embedding_dim() != d {
        return Err(Error::dim("generate_synthetic", &[d], &[pack.embedding_dim()]));
    }
    if pack.relation_count() < cfg.relations {
        return Err(Error::Config(format!(
            "pack has {} relations, {} requested",
            pack.relation_count(),
            cfg.relations
        )));
    }
    let chosen = select_separable_relations(pack, cfg.relations)?;
    let relation_names: Vec<String> = chosen.iter().map(|(r, _)| pack.relation_names()[*r].clone()).collect();
    let planted: Vec<&Vec<f64>> = chosen.iter().map(|(_, u)| u).collect();

    let mut rng = rng::seeded(cfg.seed);
    let name_dirs: Vec<Vec<f64>> = planted
        .iter()
        .map(|u| {
            let g = rng::unit_vector(&mut rng, d);
            rng::normalized(&u.iter().zip(&g).map(|(a, b)| a + b).collect::<Vec<_>>())
        })
        .collect();
    let markers = DirectionalMarkers {
        subject: rng::to_f32(&rng::unit_vector(&mut rng, d)),
        object: rng::to_f32(&rng::unit_vector(&mut rng, d)),
    };

    let mut order: Vec<usize> = (0..cfg.relations).collect();
    order.shuffle(&mut rng);
    let mut novel_idx: Vec<usize> = order[..cfg.novel_count()].to_vec();
    novel_idx.sort_unstable();
    let novel: Vec<String> = novel_idx.iter().map(|&i| relation_names[i].clone()).collect();
    let base: Vec<String> = (0..cfg.relations)
        .filter(|i| !novel_idx.contains(i))
        .map(|i| relation_names[i].clone())
        .collect();

    let mut samples = Vec::with_capacity(cfg.images * cfg.pairs_per_image);
    let mut images = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let mut ids = Vec::with_capacity(cfg.pairs_per_image);
        for _ in 0..cfg.pairs_per_image {
            let gt = rand::Rng::random_range(&mut rng, 0..cfg.relations);
            let subject = noisy_region(&mut rng, planted[gt], cfg.patch_count, cfg.cluster_spread);
            let object = noisy_region(&mut rng, planted[gt], cfg.patch_count, cfg.cluster_spread);
            let aggregate = patch_mean(&[&subject, &object]);
            let an = aggregate.iter().map(|x| x * x).sum::<f64>().sqrt();
            let clip_relation_sims = name_dirs
                .iter()
                .map(|e| (e.iter().zip(&aggregate).map(|(a, b)| a * b).sum::<f64>() / an) as f32)
                .collect();
            ids.push(samples.len());
            samples.push(PairSample {
                subject,
                object,
                gt_relation: gt,
                clip_relation_sims,
            });
        }
        images.push(ImageGroup {
            image_id: format!("synth-{i:05}"),
            samples: ids,
        });
    }

    let mut provenance = json!({
        "generator": "ssd-core generate_synthetic",
        "config": cfg,
        "pack_relation_rows": chosen.iter().map(|(r, _)| r).collect::<Vec<_>>(),
        "cls": "nuisance: independent random unit vectors",
    });
    // Patch noise norm is ≈ spread; the planted signal has unit norm.
    let snr = if cfg.cluster_spread == 0.0 { f64::INFINITY } else { 1.0 / cfg.cluster_spread };
    if snr < 0.1 {
        provenance["warning"] = json!(format!("planted signal-to-noise {snr:.3} is below 0.1"));
    }

    let fixture = DatasetFixture {
        embedding_dim: d,
        patch_count: cfg.patch_count,
        relation_names,
        relation_name_embeddings: name_dirs.iter().map(|e| rng::to_f32(e)).collect(),
        markers,
        images,
        samples,
        split_tags: BTreeMap::from([(BASE_SPLIT.to_string(), base), (NOVEL_SPLIT.to_string(), novel)]),
        provenance,
    };
    fixture.validate()?;
    Ok(fixture)
}

/// Mean of all patch rows of the given regions.
pub fn patch_mean(regions: &[&RegionFeatures]) -> Vec<f64> {
    let d = regions[0].dim();
    let mut acc = vec![0.0f64; d];
    let mut rows = 0usize;
    for reg in regions {
        for r in 0..reg.patch_count() {
            for (a, v) in acc.iter_mut().zip(reg.patches.row_slice(r)) {
                *a += *v as f64;
            }
            rows += 1;
        }
    }
    acc.iter().map(|a| a / rows as f64).collect()
}
