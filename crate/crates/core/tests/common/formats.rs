//! Golden fixtures and the malformed-fixture corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use ssd_core::adapter::{DirectionalMarkers, RegionFeatures};
use ssd_core::container::{HEADER_LEN, PACK_MAGIC};
use ssd_core::dataio::{DatasetFixture, ImageGroup, PairSample, DATA_BLOB, DATA_MANIFEST};
use ssd_core::pack::{AssociationMatrix, DescriptionPack, DescriptionPair, PACK_BLOB, PACK_MANIFEST};
use ssd_core::tensor::Tensor;
use ssd_core::Error;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Two description pairs over two relations at width 4.
pub fn tiny_pack() -> DescriptionPack {
    let pairs = vec![
        DescriptionPair {
            raw_text: "the subject rests on top of the object".into(),
            opposite_text: "the subject is not on top of the object".into(),
            raw_embedding: vec![1.0, 0.0, 0.0, 0.0],
            opposite_embedding: vec![0.0, 1.0, 0.0, 0.0],
        },
        DescriptionPair {
            raw_text: "the object is above the subject".into(),
            opposite_text: "the object is not above the subject".into(),
            raw_embedding: vec![0.6, 0.8, 0.0, 0.0],
            opposite_embedding: vec![0.0, 0.0, 0.8, 0.6],
        },
    ];
    let assoc = AssociationMatrix::new(vec!["on".into(), "under".into()], 2, vec![1, -1, 0, 1]).unwrap();
    DescriptionPack::new(pairs, assoc, 4, json!({ "source": "golden" })).unwrap()
}

fn region(cls: [f32; 4], patch: [f32; 4]) -> RegionFeatures {
    RegionFeatures::new(cls.to_vec(), Tensor::new(vec![1, 4], patch.to_vec()).unwrap()).unwrap()
}

/// Three pairs in two images, one patch per region, width 4.
pub fn tiny_dataset() -> DatasetFixture {
    let samples = vec![
        PairSample {
            subject: region([0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]),
            object: region([0.5, -0.5, 0.5, -0.5], [0.0, 1.0, 0.0, 0.0]),
            gt_relation: 0,
            clip_relation_sims: vec![0.25, -0.125],
        },
        PairSample {
            subject: region([0.0, 0.0, 1.0, 0.0], [0.5, 0.25, 0.0, 0.0]),
            object: region([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.5, 0.25]),
            gt_relation: 1,
            clip_relation_sims: vec![0.0, 0.5],
        },
        PairSample {
            subject: region([1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]),
            object: region([0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0]),
            gt_relation: 0,
            clip_relation_sims: vec![0.75, 0.25],
        },
    ];
    DatasetFixture {
        embedding_dim: 4,
        patch_count: 1,
        relation_names: vec!["on".into(), "under".into()],
        relation_name_embeddings: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        markers: DirectionalMarkers::new(vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]).unwrap(),
        images: vec![
            ImageGroup {
                image_id: "img-a".into(),
                samples: vec![0, 1],
            },
            ImageGroup {
                image_id: "img-b".into(),
                samples: vec![2],
            },
        ],
        samples,
        split_tags: BTreeMap::from([
            ("base".to_string(), vec!["on".to_string()]),
            ("novel".to_string(), vec!["under".to_string()]),
        ]),
        provenance: json!({ "source": "golden" }),
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Save the tiny fixtures and compare every file byte for byte with the
/// checked-in copies. `SSD_BLESS=1` rewrites the copies instead.
pub fn check_golden() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pack_dir, data_dir) = (tmp.path().join("pack"), tmp.path().join("data"));
    tiny_pack().save(&pack_dir).map_err(|e| e.to_string())?;
    tiny_dataset().save(&data_dir).map_err(|e| e.to_string())?;
    let golden = golden_dir();
    let files = [
        ("pack", PACK_MANIFEST),
        ("pack", PACK_BLOB),
        ("data", DATA_MANIFEST),
        ("data", DATA_BLOB),
    ];
    if std::env::var_os("SSD_BLESS").is_some() {
        for (sub, f) in files {
            fs::create_dir_all(golden.join(sub)).unwrap();
            fs::copy(tmp.path().join(sub).join(f), golden.join(sub).join(f)).unwrap();
        }
    }
    let mut bytes = 0;
    for (sub, f) in files {
        let fresh = read(&tmp.path().join(sub).join(f));
        let pinned = read(&golden.join(sub).join(f));
        if fresh != pinned {
            let at = fresh.iter().zip(&pinned).position(|(a, b)| a != b).unwrap_or(fresh.len().min(pinned.len()));
            return Err(format!("{sub}/{f} differs from golden at byte {at}"));
        }
        bytes += pinned.len();
    }
    let pack_bin = read(&golden.join("pack").join(PACK_BLOB));
    let mut header = PACK_MAGIC.to_vec();
    header.extend_from_slice(&2u32.to_le_bytes());
    header.extend_from_slice(&4u32.to_le_bytes());
    if pack_bin[..HEADER_LEN] != header[..] || pack_bin.len() != HEADER_LEN + 2 * 2 * 4 * 4 {
        return Err("pack blob header or length is off".into());
    }
    let pack = DescriptionPack::load(golden.join("pack")).map_err(|e| e.to_string())?;
    let data = DatasetFixture::load(golden.join("data")).map_err(|e| e.to_string())?;
    if pack != tiny_pack() || data != tiny_dataset() {
        return Err("golden fixtures do not load back to their sources".into());
    }
    Ok(format!("{} files, {bytes} bytes identical", files.len()))
}

#[derive(Debug)]
pub enum Expect {
    /// A format error at exactly this byte offset of the named file.
    FormatAt(&'static str, u64),
    /// A format error anywhere in the named file.
    FormatIn(&'static str),
    /// A validation error whose message contains every fragment.
    Validation(&'static [&'static str]),
}

pub struct Case {
    pub name: &'static str,
    pub dataset: bool,
    pub mutate: fn(&Path) -> Expect,
}

fn edit_bytes(path: &Path, f: impl FnOnce(&mut Vec<u8>)) {
    let mut b = read(path);
    f(&mut b);
    fs::write(path, b).unwrap();
}

fn edit_json(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_slice(&read(path)).unwrap();
    f(&mut v);
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn set_f32(path: &Path, index: usize, value: f32) -> u64 {
    let off = HEADER_LEN + 4 * index;
    edit_bytes(path, |b| b[off..off + 4].copy_from_slice(&value.to_le_bytes()));
    off as u64
}

pub fn corpus() -> Vec<Case> {
    vec![
        Case {
            name: "pack blob truncated mid-value",
            dataset: false,
            mutate: |d| {
                let p = d.join(PACK_BLOB);
                let mut len = 0;
                edit_bytes(&p, |b| {
                    b.truncate(b.len() - 3);
                    len = b.len();
                });
                Expect::FormatAt(PACK_BLOB, len as u64)
            },
        },
        Case {
            name: "pack blob header cut short",
            dataset: false,
            mutate: |d| {
                edit_bytes(&d.join(PACK_BLOB), |b| b.truncate(10));
                Expect::FormatAt(PACK_BLOB, 10)
            },
        },
        Case {
            name: "pack blob wrong magic",
            dataset: false,
            mutate: |d| {
                edit_bytes(&d.join(PACK_BLOB), |b| b[..8].copy_from_slice(b"SSDDATA1"));
                Expect::FormatAt(PACK_BLOB, 0)
            },
        },
        Case {
            name: "pack blob trailing bytes",
            dataset: false,
            mutate: |d| {
                let mut len = 0;
                edit_bytes(&d.join(PACK_BLOB), |b| {
                    len = b.len();
                    b.extend_from_slice(&[0, 0, 0, 0]);
                });
                Expect::FormatAt(PACK_BLOB, len as u64)
            },
        },
        Case {
            name: "pack blob NaN embedding",
            dataset: false,
            mutate: |d| Expect::FormatAt(PACK_BLOB, set_f32(&d.join(PACK_BLOB), 5, f32::NAN)),
        },
        Case {
            name: "pack blob infinite embedding",
            dataset: false,
            mutate: |d| Expect::FormatAt(PACK_BLOB, set_f32(&d.join(PACK_BLOB), 12, f32::INFINITY)),
        },
        Case {
            name: "pack header count disagrees with manifest",
            dataset: false,
            mutate: |d| {
                edit_bytes(&d.join(PACK_BLOB), |b| b[8..12].copy_from_slice(&3u32.to_le_bytes()));
                Expect::FormatAt(PACK_BLOB, 8)
            },
        },
        Case {
            name: "pack non-unit embedding",
            dataset: false,
            mutate: |d| {
                set_f32(&d.join(PACK_BLOB), 4, 0.5);
                Expect::Validation(&["pair 1", "raw", "norm"])
            },
        },
        Case {
            name: "pack association outside domain",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| v["associations"][1][0] = json!(2));
                Expect::Validation(&["row 1", "column 0", "under"])
            },
        },
        Case {
            name: "pack association row all zero",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| v["associations"][1] = json!([0, 0]));
                Expect::Validation(&["row 1", "under", "all zero"])
            },
        },
        Case {
            name: "pack association row too short",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| v["associations"][0] = json!([1]));
                Expect::Validation(&["row 0", "on"])
            },
        },
        Case {
            name: "pack duplicate relation",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| v["relations"][1] = json!("on"));
                Expect::Validation(&["`on`", "twice"])
            },
        },
        Case {
            name: "pack raw equals opposite",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| {
                    v["descriptions"][1]["opposite"] = v["descriptions"][1]["raw"].clone()
                });
                Expect::Validation(&["pair 1", "identical"])
            },
        },
        Case {
            name: "pack manifest unknown field",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| v["extra"] = json!(1));
                Expect::FormatIn(PACK_MANIFEST)
            },
        },
        Case {
            name: "pack manifest not JSON",
            dataset: false,
            mutate: |d| {
                edit_bytes(&d.join(PACK_MANIFEST), |b| b.truncate(b.len() / 2));
                Expect::FormatIn(PACK_MANIFEST)
            },
        },
        Case {
            name: "pack provenance not an object",
            dataset: false,
            mutate: |d| {
                edit_json(&d.join(PACK_MANIFEST), |v| v["provenance"] = json!("n/a"));
                Expect::Validation(&["provenance"])
            },
        },
        Case {
            name: "data blob truncated",
            dataset: true,
            mutate: |d| {
                let mut len = 0;
                edit_bytes(&d.join(DATA_BLOB), |b| {
                    b.truncate(b.len() - 8);
                    len = b.len();
                });
                Expect::FormatAt(DATA_BLOB, len as u64)
            },
        },
        Case {
            name: "data blob wrong magic",
            dataset: true,
            mutate: |d| {
                edit_bytes(&d.join(DATA_BLOB), |b| b[..8].copy_from_slice(b"SSDPACK1"));
                Expect::FormatAt(DATA_BLOB, 0)
            },
        },
        Case {
            name: "data header sample count disagrees",
            dataset: true,
            mutate: |d| {
                edit_bytes(&d.join(DATA_BLOB), |b| b[8..12].copy_from_slice(&7u32.to_le_bytes()));
                Expect::FormatAt(DATA_BLOB, 8)
            },
        },
        Case {
            name: "data NaN patch value",
            dataset: true,
            // name embeddings 8, markers 8, then sample 0: cls 4, patch 4.
            mutate: |d| Expect::FormatAt(DATA_BLOB, set_f32(&d.join(DATA_BLOB), 8 + 8 + 4 + 2, f32::NAN)),
        },
        Case {
            name: "data non-unit marker",
            dataset: true,
            mutate: |d| {
                set_f32(&d.join(DATA_BLOB), 8 + 2, 2.0);
                Expect::Validation(&["subject marker", "norm"])
            },
        },
        Case {
            name: "data non-unit relation name embedding",
            dataset: true,
            mutate: |d| {
                set_f32(&d.join(DATA_BLOB), 5, 0.5);
                Expect::Validation(&["`under`", "norm"])
            },
        },
        Case {
            name: "data unknown gt relation",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["samples"][1]["gt_relation"] = json!("beside"));
                Expect::Validation(&["sample 1", "beside"])
            },
        },
        Case {
            name: "data sample in two images",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["images"][1]["samples"] = json!([2, 0]));
                Expect::Validation(&["sample 0", "img-a", "img-b"])
            },
        },
        Case {
            name: "data sample in no image",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["images"][0]["samples"] = json!([0]));
                Expect::Validation(&["sample 1", "no image"])
            },
        },
        Case {
            name: "data image references missing sample",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["images"][1]["samples"] = json!([2, 9]));
                Expect::Validation(&["img-b", "sample 9"])
            },
        },
        Case {
            name: "data empty image",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| {
                    v["images"][1]["samples"] = json!([]);
                    v["images"][0]["samples"] = json!([0, 1, 2]);
                });
                Expect::Validation(&["img-b", "no samples"])
            },
        },
        Case {
            name: "data splits overlap",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["split_tags"]["novel"] = json!(["under", "on"]));
                Expect::Validation(&["overlap", "on"])
            },
        },
        Case {
            name: "data split names unknown relation",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["split_tags"]["novel"] = json!(["beside"]));
                Expect::Validation(&["novel", "beside"])
            },
        },
        Case {
            name: "data unsupported version",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["version"] = json!(99));
                Expect::Validation(&["version 99"])
            },
        },
        Case {
            name: "data manifest missing field",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| {
                    v.as_object_mut().unwrap().remove("patch_count");
                });
                Expect::FormatIn(DATA_MANIFEST)
            },
        },
        Case {
            name: "data duplicate image id",
            dataset: true,
            mutate: |d| {
                edit_json(&d.join(DATA_MANIFEST), |v| v["images"][1]["image_id"] = json!("img-a"));
                Expect::Validation(&["img-a", "repeats"])
            },
        },
    ]
}

fn check_case(case: &Case) -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sub = if case.dataset { "data" } else { "pack" };
    let dir = tmp.path().join(sub);
    fs::create_dir_all(&dir).unwrap();
    for entry in fs::read_dir(golden_dir().join(sub)).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.join(entry.file_name())).unwrap();
    }
    let expect = (case.mutate)(&dir);
    let err = if case.dataset {
        DatasetFixture::load(&dir).err()
    } else {
        DescriptionPack::load(&dir).err()
    };
    let Some(err) = err else {
        return Err(format!("{}: accepted", case.name));
    };
    let ok = match (&expect, &err) {
        (Expect::FormatAt(file, want), Error::Format { file: f, offset, .. }) => {
            f.ends_with(file) && offset == want
        }
        (Expect::FormatIn(file), Error::Format { file: f, .. }) => f.ends_with(file),
        (Expect::Validation(frags), e) if e.is_validation() && !matches!(e, Error::Format { .. }) => {
            let msg = e.to_string();
            frags.iter().all(|f| msg.contains(f))
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{}: expected {expect:?}, got {err}", case.name))
    }
}

/// Run every corpus case; returns the count on success.
pub fn check_malformed_corpus() -> Result<String, String> {
    let cases = corpus();
    let failures: Vec<String> = cases.iter().filter_map(|c| check_case(c).err()).collect();
    if failures.is_empty() {
        Ok(format!("{} malformed fixtures rejected with located errors", cases.len()))
    } else {
        Err(failures.join("; "))
    }
}
