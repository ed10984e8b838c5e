use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use ssd_core::adapter::mva_forward;
use ssd_core::checkpoint::Checkpoint;
use ssd_core::dataio::{generate_synthetic, DatasetFixture, SynthConfig, BASE_SPLIT, NOVEL_SPLIT};
use ssd_core::metrics::{evaluate, EvalConfig};
use ssd_core::pack::DescriptionPack;
use ssd_core::scoring::{self_normalized_scores, SimilarityConfig, DEFAULT_TEMPERATURE};
use ssd_core::trainer::{train, TrainConfig};

use crate::{Cli, Command, EvalArgs, Failure, PackArg, ScoreArgs, SynthArgs, TrainArgs, ValidateArgs};

pub const LOG_FILE: &str = "train_log.ndjson";

struct Ctx {
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Resolve an input path and require it to exist.
    fn input(&self, p: &Path, what: &str) -> Result<PathBuf, Failure> {
        let full = self.path(p);
        if full.exists() {
            Ok(full)
        } else {
            Err(Failure::usage(format!("{what} path {} does not exist", full.display())))
        }
    }

    fn pack(&self, arg: &PackArg, dim: usize) -> Result<DescriptionPack, Failure> {
        match &arg.pack {
            Some(p) => Ok(DescriptionPack::load(self.input(p, "pack")?)?),
            None => Ok(DescriptionPack::default_reconstruction(dim, 0)?),
        }
    }

    fn data(&self, p: &Path) -> Result<DatasetFixture, Failure> {
        Ok(DatasetFixture::load(self.input(p, "data")?)?)
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx { data_dir: cli.data_dir };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Validate(a) => validate(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Score(a) => score(&ctx, a),
    }
}

/// Write one line to stdout. A closed pipe is not an error.
fn print_line(v: &Value) {
    let _ = writeln!(std::io::stdout().lock(), "{v}");
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        seed: a.seed,
        embedding_dim: a.dim,
        patch_count: a.patches,
        relations: a.relations,
        images: a.images,
        pairs_per_image: a.pairs_per_image,
        cluster_spread: a.spread,
        novel_fraction: a.novel_fraction,
    };
    let pack = ctx.pack(&a.pack, a.dim)?;
    let fixture = generate_synthetic(&cfg, &pack)?;
    let out = ctx.path(&a.out);
    fixture.save(&out)?;
    print_line(&json!({
        "command": "synth",
        "out": out,
        "seed": a.seed,
        "samples": fixture.samples.len(),
        "images": fixture.images.len(),
        "base": fixture.split(BASE_SPLIT)?,
        "novel": fixture.split(NOVEL_SPLIT)?,
    }));
    Ok(())
}

fn validate(ctx: &Ctx, a: ValidateArgs) -> Result<(), Failure> {
    if a.pack.is_empty() && a.data.is_empty() && a.checkpoint.is_empty() {
        return Err(Failure::usage("nothing to validate: pass --pack, --data or --checkpoint"));
    }
    let mut packs = Vec::new();
    let mut failed = 0usize;
    let mut total = 0usize;
    let mut check = |kind: &str, p: &Path, result: Result<Value, ssd_core::Error>| {
        total += 1;
        let line = match result {
            Ok(detail) => json!({ "kind": kind, "path": p, "status": "ok", "detail": detail }),
            Err(e) => {
                failed += 1;
                json!({ "kind": kind, "path": p, "status": "error", "error": e.kind(), "message": e.to_string() })
            }
        };
        print_line(&line);
    };
    for p in &a.pack {
        let p = ctx.input(p, "pack")?;
        match DescriptionPack::load(&p) {
            Ok(pk) => {
                let detail = json!({ "descriptions": pk.description_count(), "relations": pk.relation_count(), "dim": pk.embedding_dim() });
                check("pack", &p, Ok(detail));
                packs.push(pk);
            }
            Err(e) => check("pack", &p, Err(e)),
        }
    }
    for p in &a.data {
        let p = ctx.input(p, "data")?;
        let r = DatasetFixture::load(&p).and_then(|d| {
            // Against every pack given alongside: widths agree and relations resolve.
            for pk in &packs {
                if pk.embedding_dim() != d.embedding_dim {
                    return Err(ssd_core::Error::Validation(format!(
                        "data width {} does not match pack width {}",
                        d.embedding_dim,
                        pk.embedding_dim()
                    )));
                }
                pk.restrict_to_relations(&d.relation_names)?;
            }
            Ok(json!({ "samples": d.samples.len(), "images": d.images.len(), "relations": d.relation_names }))
        });
        check("data", &p, r);
    }
    for p in &a.checkpoint {
        let p = ctx.input(p, "checkpoint")?;
        let r = Checkpoint::load(&p).map(|c| {
            json!({ "id": c.id(), "seed": c.seed, "epochs_completed": c.epochs_completed, "parameters": c.params.parameter_count() })
        });
        check("checkpoint", &p, r);
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            kind: "validation".into(),
            message: format!("{failed} of {total} inputs failed validation"),
        });
    }
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<(), Failure> {
    let data = ctx.data(&a.data)?;
    let pack = ctx.pack(&a.pack, data.embedding_dim)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        alpha: a.alpha.unwrap_or(defaults.alpha),
        beta: a.beta.unwrap_or(defaults.beta),
        lambda_margin: a.lambda_margin.unwrap_or(defaults.lambda_margin),
        lr: a.lr.unwrap_or(defaults.lr),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: a.seed,
        temperature: a.temperature.unwrap_or(defaults.temperature),
        max_per_relation: a.max_per_relation,
        adapter_dims: None,
    };
    let relations = data.split(&a.split)?.to_vec();
    let train_set = data.filter_to_relations(&relations)?;
    let out = ctx.path(&a.out);
    let outcome = train(&train_set, &pack, &cfg, &relations, |c| {
        if a.save_every_epoch {
            c.save(out.join(format!("epoch-{:03}", c.epochs_completed)))?;
        }
        Ok(())
    })?;
    outcome.checkpoint.save(&out)?;
    let log_path = out.join(LOG_FILE);
    let mut log = Vec::new();
    for r in &outcome.log {
        serde_json::to_writer(&mut log, r).expect("log record serializes");
        log.push(b'\n');
    }
    fs::write(&log_path, log).map_err(|e| Failure {
        code: 1,
        kind: "io".into(),
        message: format!("i/o error on {}: {e}", log_path.display()),
    })?;
    print_line(&json!({
        "command": "train",
        "out": out,
        "checkpoint_id": outcome.checkpoint.id(),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "samples": train_set.samples.len(),
        "epoch_losses": outcome.epoch_losses,
    }));
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<(), Failure> {
    let data = ctx.data(&a.data)?;
    let pack = ctx.pack(&a.pack, data.embedding_dim)?;
    let checkpoint = match &a.checkpoint {
        Some(p) if !a.baseline => Some(Checkpoint::load(ctx.input(p, "checkpoint")?)?),
        _ => None,
    };
    let cfg = EvalConfig {
        temperature: a
            .temperature
            .or(checkpoint.as_ref().map(|c| c.temperature))
            .unwrap_or(DEFAULT_TEMPERATURE),
        graph_constraint: !a.no_graph_constraint,
        baseline: a.baseline,
        pair_level: a.pair_level,
        split_name: a.split.clone(),
    };
    let relations = data.split(&a.split)?.to_vec();
    let report = evaluate(checkpoint.as_ref(), &data, &pack, &relations, &a.ks, &cfg)?;
    let json = report.to_json();
    match &a.out {
        Some(p) => {
            let p = ctx.path(p);
            fs::write(&p, &json).map_err(|e| Failure {
                code: 1,
                kind: "io".into(),
                message: format!("i/o error on {}: {e}", p.display()),
            })?;
            if a.table {
                let _ = write!(std::io::stdout().lock(), "{}", report.render_table());
            }
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(json.as_bytes());
            if a.table {
                eprint!("{}", report.render_table());
            }
        }
    }
    Ok(())
}

fn score(ctx: &Ctx, a: ScoreArgs) -> Result<(), Failure> {
    let data = ctx.data(&a.data)?;
    let pack = ctx.pack(&a.pack, data.embedding_dim)?;
    let checkpoint = Checkpoint::load(ctx.input(&a.checkpoint, "checkpoint")?)?;
    let sample = data.samples.get(a.sample).ok_or_else(|| {
        Failure::usage(format!("sample {} out of range (fixture has {})", a.sample, data.samples.len()))
    })?;
    let relations = match &a.split {
        Some(s) => data.split(s)?.to_vec(),
        None => data.relation_names.clone(),
    };
    let restricted = pack.restrict_to_relations(&relations)?;
    let temperature = a.temperature.unwrap_or(checkpoint.temperature);
    let sim = SimilarityConfig::new(temperature)?;
    let v = mva_forward(&sample.subject, &sample.object, &data.markers, &checkpoint.params)?;
    let scores = self_normalized_scores(&v, &restricted, &sim)?;

    let descriptions: Vec<Value> = restricted
        .pairs()
        .iter()
        .zip(&scores.per_description_delta)
        .enumerate()
        .map(|(n, (p, d))| json!({ "index": n, "raw": p.raw_text, "opposite": p.opposite_text, "delta": d }))
        .collect();
    let per_relation: Vec<Value> = relations
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let c_row = restricted.associations().row(r);
            let products: Vec<f64> = c_row
                .iter()
                .zip(&scores.per_description_delta)
                .map(|(&c, d)| c as f64 * d)
                .collect();
            json!({ "relation": name, "c_row": c_row, "products": products, "score": scores.per_relation[r] })
        })
        .collect();
    let ranking: Vec<&String> = scores.ranking.iter().map(|&r| &relations[r]).collect();
    print_line(&json!({
        "command": "score",
        "sample": a.sample,
        "gt_relation": data.relation_names[sample.gt_relation],
        "checkpoint_id": checkpoint.id(),
        "seed": checkpoint.seed,
        "temperature": temperature,
        "descriptions": descriptions,
        "relations": per_relation,
        "ranking": ranking,
    }));
    Ok(())
}
