//! Description packs: raw/opposite description pairs with their unit text
//! embeddings, and the relation × description association table.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{self, PACK_MAGIC};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::norm;

pub const PACK_VERSION: u32 = 1;
pub const PACK_MANIFEST: &str = "pack.json";
pub const PACK_BLOB: &str = "embeddings.bin";

/// Allowed deviation of a stored embedding's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionPair {
    pub raw_text: String,
    pub opposite_text: String,
    pub raw_embedding: Vec<f32>,
    pub opposite_embedding: Vec<f32>,
}

/// How strongly a relation implies a description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Association {
    Contradiction = -1,
    Possible = 0,
    Certain = 1,
}

impl Association {
    pub fn value(self) -> i8 {
        self as i8
    }
}

/// R × N table with entries in {-1, 0, 1}, row-major by relation.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    values: Vec<i8>,
    relation_names: Vec<String>,
    description_count: usize,
}

impl AssociationMatrix {
    pub fn new(relation_names: Vec<String>, description_count: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != relation_names.len() * description_count {
            return Err(Error::dim(
                "association matrix",
                &[relation_names.len(), description_count],
                &[values.len()],
            ));
        }
        let m = Self {
            values,
            relation_names,
            description_count,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.relation_names.is_empty() {
            return Err(Error::Validation("association matrix has no relations".into()));
        }
        let mut seen = HashSet::new();
        for (r, name) in self.relation_names.iter().enumerate() {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("relation `{name}` (row {r}) is listed twice")));
            }
            let row = self.row(r);
            if let Some(n) = row.iter().position(|v| !(-1..=1).contains(v)) {
                return Err(Error::Validation(format!(
                    "association row {r} (`{name}`), column {n}: value {} outside {{-1, 0, 1}}",
                    row[n]
                )));
            }
            if row.iter().all(|&v| v == 0) {
                return Err(Error::Validation(format!(
                    "association row {r} (`{name}`) is all zero; the relation could never be scored"
                )));
            }
        }
        Ok(())
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn description_count(&self) -> usize {
        self.description_count
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.values[r * self.description_count..(r + 1) * self.description_count]
    }

    pub fn get(&self, r: usize, n: usize) -> i8 {
        self.values[r * self.description_count + n]
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|n| n == name)
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionPack {
    pairs: Vec<DescriptionPair>,
    associations: AssociationMatrix,
    embedding_dim: usize,
    provenance: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackManifest {
    version: u32,
    embedding_dim: usize,
    relations: Vec<String>,
    descriptions: Vec<DescriptionText>,
    associations: Vec<Vec<i64>>,
    provenance: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptionText {
    raw: String,
    opposite: String,
}

impl DescriptionPack {
    pub fn new(
        pairs: Vec<DescriptionPair>,
        associations: AssociationMatrix,
        embedding_dim: usize,
        provenance: Value,
    ) -> Result<Self> {
        let pack = Self {
            pairs,
            associations,
            embedding_dim,
            provenance,
        };
        pack.validate()?;
        Ok(pack)
    }

    /// Check every pack invariant. Errors name the offending pair or row.
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be positive".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::Validation("pack has no description pairs".into()));
        }
        if self.pairs.len() != self.associations.description_count {
            return Err(Error::Validation(format!(
                "{} description pairs but association matrix has {} columns",
                self.pairs.len(),
                self.associations.description_count
            )));
        }
        if !self.provenance.is_object() {
            return Err(Error::Validation("provenance must be a JSON object".into()));
        }
        for (n, pair) in self.pairs.iter().enumerate() {
            if pair.raw_text == pair.opposite_text {
                return Err(Error::Validation(format!(
                    "pair {n}: raw and opposite text are identical (`{}`)",
                    pair.raw_text
                )));
            }
            for (side, emb) in [("raw", &pair.raw_embedding), ("opposite", &pair.opposite_embedding)] {
                if emb.len() != self.embedding_dim {
                    return Err(Error::Validation(format!(
                        "pair {n}: {side} embedding has dimension {}, pack declares {}",
                        emb.len(),
                        self.embedding_dim
                    )));
                }
                if emb.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("pair {n}: {side} embedding is not finite")));
                }
                let nr = norm(emb);
                if (nr - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::Validation(format!(
                        "pair {n}: {side} embedding has norm {nr:.6}, expected 1 ± {UNIT_NORM_TOLERANCE}"
                    )));
                }
            }
        }
        self.associations.validate()
    }

    pub fn pairs(&self) -> &[DescriptionPair] {
        &self.pairs
    }

    pub fn associations(&self) -> &AssociationMatrix {
        &self.associations
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn description_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn relation_count(&self) -> usize {
        self.associations.relation_count()
    }

    pub fn relation_names(&self) -> &[String] {
        self.associations.relation_names()
    }

    pub fn provenance(&self) -> &Value {
        &self.provenance
    }

    /// `t_a − t_p` for every pair, row-major N × D.
    pub fn delta_rows(&self) -> Vec<Vec<f32>> {
        self.pairs
            .iter()
            .map(|p| {
                p.raw_embedding
                    .iter()
                    .zip(&p.opposite_embedding)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect()
    }

    /// Copy of the pack with every raw/opposite pair swapped.
    pub fn with_pairs_swapped(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|p| DescriptionPair {
                raw_text: p.opposite_text.clone(),
                opposite_text: p.raw_text.clone(),
                raw_embedding: p.opposite_embedding.clone(),
                opposite_embedding: p.raw_embedding.clone(),
            })
            .collect();
        Self {
            pairs,
            ..self.clone()
        }
    }

    /// Keep only the named association rows, in the order given.
    pub fn restrict_to_relations<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation("cannot restrict a pack to an empty relation list".into()));
        }
        let n = self.description_count();
        let mut values = Vec::with_capacity(names.len() * n);
        let mut kept = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let r = self.associations.relation_index(name).ok_or_else(|| Error::Lookup {
                kind: "relation",
                name: name.to_string(),
            })?;
            values.extend_from_slice(self.associations.row(r));
            kept.push(name.to_string());
        }
        let associations = AssociationMatrix::new(kept, n, values)?;
        Ok(Self {
            associations,
            ..self.clone()
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(PACK_MANIFEST);
        let blob_path = dir.join(PACK_BLOB);
        let manifest: PackManifest = container::read_json(&manifest_path)?;
        if manifest.version != PACK_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported pack version {}",
                manifest_path.display(),
                manifest.version
            )));
        }
        let n = manifest.descriptions.len();
        let d = manifest.embedding_dim;
        let blob = container::read_blob(&blob_path, PACK_MAGIC, |bn, bd| {
            if bn as usize != n || bd as usize != d {
                return Err(Error::format(
                    &blob_path,
                    8,
                    format!("header says N={bn}, D={bd}; manifest says N={n}, D={d}"),
                ));
            }
            Ok(2 * n * d)
        })?;

        if manifest.associations.len() != manifest.relations.len() {
            return Err(Error::Validation(format!(
                "{}: {} relations but {} association rows",
                manifest_path.display(),
                manifest.relations.len(),
                manifest.associations.len()
            )));
        }
        let mut values = Vec::with_capacity(manifest.relations.len() * n);
        for (r, row) in manifest.associations.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!(
                    "association row {r} (`{}`) has {} entries, expected {n}",
                    manifest.relations[r],
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if !(-1..=1).contains(&v) {
                    return Err(Error::Validation(format!(
                        "association row {r} (`{}`), column {c}: value {v} outside {{-1, 0, 1}}",
                        manifest.relations[r]
                    )));
                }
                values.push(v as i8);
            }
        }
        let associations = AssociationMatrix::new(manifest.relations, n, values)?;

        let (raw, opposite) = blob.payload.split_at(n * d);
        let pairs = manifest
            .descriptions
            .into_iter()
            .enumerate()
            .map(|(i, t)| DescriptionPair {
                raw_text: t.raw,
                opposite_text: t.opposite,
                raw_embedding: raw[i * d..(i + 1) * d].to_vec(),
                opposite_embedding: opposite[i * d..(i + 1) * d].to_vec(),
            })
            .collect();
        Self::new(pairs, associations, d, manifest.provenance)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        container::ensure_dir(dir)?;
        let r = self.relation_count();
        let manifest = PackManifest {
            version: PACK_VERSION,
            embedding_dim: self.embedding_dim,
            relations: self.relation_names().to_vec(),
            descriptions: self
                .pairs
                .iter()
                .map(|p| DescriptionText {
                    raw: p.raw_text.clone(),
                    opposite: p.opposite_text.clone(),
                })
                .collect(),
            associations: (0..r)
                .map(|i| self.associations.row(i).iter().map(|&v| v as i64).collect())
                .collect(),
            provenance: self.provenance.clone(),
        };
        container::write_json(&dir.join(PACK_MANIFEST), &manifest)?;
        let mut payload = Vec::with_capacity(2 * self.pairs.len() * self.embedding_dim);
        payload.extend(self.pairs.iter().flat_map(|p| p.raw_embedding.iter().copied()));
        payload.extend(self.pairs.iter().flat_map(|p| p.opposite_embedding.iter().copied()));
        container::write_blob(
            &dir.join(PACK_BLOB),
            PACK_MAGIC,
            self.pairs.len() as u32,
            self.embedding_dim as u32,
            &payload,
        )
    }

    /// The shipped 21-pair pack over the 50 Visual Genome predicates.
    ///
    /// Texts and associations come from `assets/default_pack_source.json`.
    /// No text encoder runs inside the engine, so the embeddings are seeded
    /// stand-ins: each raw embedding is a random unit vector and its opposite
    /// sits at cosine ≈ 0.8 from it, which is the regime CLIP text embeddings
    /// of a sentence and its negation usually fall into.
    pub fn default_reconstruction(embedding_dim: usize, seed: u64) -> Result<Self> {
        let source = default_source();
        let mut rng = rng::seeded(seed);
        let mut pairs = Vec::new();
        for (raw_text, opposite_text) in &source.descriptions {
            let raw = rng::unit_vector(&mut rng, embedding_dim);
            let noise = rng::unit_vector(&mut rng, embedding_dim);
            let opposite: Vec<f64> = raw.iter().zip(&noise).map(|(a, b)| 0.8 * a + 0.6 * b).collect();
            pairs.push(DescriptionPair {
                raw_text: raw_text.clone(),
                opposite_text: opposite_text.clone(),
                raw_embedding: rng::to_f32(&raw),
                opposite_embedding: rng::to_f32(&rng::normalized(&opposite)),
            });
        }
        let n = pairs.len();
        let names: Vec<String> = source.relations.iter().map(|r| r.0.clone()).collect();
        let mut values = vec![0i8; names.len() * n];
        for (r, (_, certain, contra)) in source.relations.iter().enumerate() {
            for &c in certain {
                values[r * n + c] = Association::Certain.value();
            }
            for &c in contra {
                values[r * n + c] = Association::Contradiction.value();
            }
        }
        let associations = AssociationMatrix::new(names, n, values)?;
        let provenance = json!({
            "generator": "ssd-core default_reconstruction",
            "prompts_version": "v1",
            "associations": "reconstructed offline from LLM association judgments; not published values",
            "embeddings": format!("seeded placeholders (seed {seed}), not text-encoder output"),
            "descriptions": source.note,
        });
        Self::new(pairs, associations, embedding_dim, provenance)
    }
}

struct DefaultSource {
    note: String,
    descriptions: Vec<(String, String)>,
    relations: Vec<(String, Vec<usize>, Vec<usize>)>,
    splits: Vec<(String, Vec<String>)>,
}

fn default_source() -> DefaultSource {
    let v: Value = serde_json::from_str(include_str!("../assets/default_pack_source.json"))
        .expect("bundled pack source is valid JSON");
    let strs = |x: &Value| -> Vec<String> {
        x.as_array()
            .expect("array")
            .iter()
            .map(|s| s.as_str().expect("string").to_string())
            .collect()
    };
    let idx = |x: &Value| -> Vec<usize> {
        x.as_array()
            .expect("array")
            .iter()
            .map(|i| i.as_u64().expect("index") as usize)
            .collect()
    };
    DefaultSource {
        note: v["note"].as_str().unwrap_or_default().to_string(),
        descriptions: v["descriptions"]
            .as_array()
            .expect("descriptions")
            .iter()
            .map(|d| (d["raw"].as_str().unwrap().to_string(), d["opposite"].as_str().unwrap().to_string()))
            .collect(),
        relations: v["relations"]
            .as_array()
            .expect("relations")
            .iter()
            .map(|r| (r["name"].as_str().unwrap().to_string(), idx(&r["certain"]), idx(&r["contradiction"])))
            .collect(),
        splits: ["base", "novel", "semantic"]
            .iter()
            .map(|k| (k.to_string(), strs(&v["splits"][*k])))
            .collect(),
    }
}

/// The Visual Genome base / novel / semantic predicate lists.
pub fn vg_splits() -> Vec<(String, Vec<String>)> {
    default_source().splits
}
