//! The `e4srec` command line: every pipeline stage as a subcommand over one
//! working directory.
//!
//! Stages read the artifacts of earlier stages from the working directory and
//! refuse to run, naming the stage to run first, when one is missing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use e4srec_core::backbone::{pretrain_backbone, Backbone, BackboneConfig, CorpusConfig, InstructionCorpus, PretrainConfig, Vocab};
use e4srec_core::datasets::{
    build_sequences, k_core_filter, leave_one_out, load_interactions, synth_generate, write_interactions, InteractionRecord,
    SplitDataset, SynthConfig,
};
use e4srec_core::e4srec::{train, E4SRec, Mode, TrainConfig, TrainLog};
use e4srec_core::evalkit::{group_by_sparsity, rank_full, rank_sampled, EvalTarget, MetricsReport, Protocol, Scorer, SparsityBounds};
use e4srec_core::seqrec::{
    extract_item_embeddings, train_bpr, train_sasrec, BprConfig, BprModel, ItemEmbeddingTable, Popularity, Provenance, SasRec,
    SasRecConfig,
};
use e4srec_core::servekit::{export_bundle, Checkpoint, Registry};

#[derive(Debug, Parser)]
#[command(name = "e4srec", version, about = "Sequential recommendation with item IDs injected into a frozen language model")]
pub struct Cli {
    /// Directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "e4srec-work")]
    pub workdir: PathBuf,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic corpus and prepare it like `ingest`.
    Synth(SynthArgs),
    /// Read a `user<TAB>item<TAB>timestamp` file, k-core filter and split it.
    Ingest(IngestArgs),
    /// Train SASRec on the training split.
    PretrainSasrec(ModelArgs),
    /// Train BPR matrix factorization on the training split.
    PretrainBpr(ModelArgs),
    /// Write the item embedding table of a pretrained model.
    ExtractEmbeddings(ExtractArgs),
    /// Pretrain the small language model on the instruction corpus and freeze it.
    PretrainBackbone(BackboneArgs),
    /// Train the recommender (projections and LoRA) over the frozen backbone.
    Train(TrainArgs),
    /// Grid search over learning rate and epochs, keeping the best by validation HR@10.
    Sweep(SweepArgs),
    /// Rank held-out items and report HR, nDCG and MRR.
    Evaluate(EvaluateArgs),
    /// Write the pluggable bundle of a trained recommender.
    ExportBundle(ExportArgs),
    /// Serve recommendations over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Generator settings as JSON or TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub prep: PrepArgs,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// Interaction file (headerless TSV).
    #[arg(long)]
    pub input: PathBuf,
    /// Drop interactions older than this epoch second.
    #[arg(long)]
    pub min_timestamp: Option<u64>,
    #[command(flatten)]
    pub prep: PrepArgs,
}

#[derive(Debug, clap::Args)]
pub struct PrepArgs {
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
    /// History window used by the sequence models.
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    /// Model settings as JSON or TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Sasrec,
    Bpr,
}

impl Source {
    fn provenance(self) -> Provenance {
        match self {
            Source::Sasrec => Provenance::Sasrec,
            Source::Bpr => Provenance::Bpr,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct ExtractArgs {
    #[arg(long, value_enum, default_value = "sasrec")]
    pub from: Source,
}

#[derive(Debug, clap::Args)]
pub struct BackboneArgs {
    /// `{ "model": BackboneConfig, "pretrain": PretrainConfig, "corpus": CorpusConfig }` as JSON or TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub examples: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct TrainSetup {
    /// Named hyperparameter preset.
    #[arg(long, default_value = "synthetic")]
    pub preset: String,
    /// Training settings as JSON or TOML, applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which pretrained item embeddings to inject.
    #[arg(long, value_enum, default_value = "sasrec")]
    pub embeddings: Source,
    /// Skip the backbone: mean of projected item embeddings times the item projection.
    #[arg(long)]
    pub no_llm: bool,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint name inside the working directory (default depends on the ablation flags).
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub setup: TrainSetup,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub setup: TrainSetup,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    /// Comma-separated epoch counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub epochs: Vec<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Full,
    Sampled99,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    E4srec,
    Sasrec,
    Bpr,
    Pop,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Valid,
    Test,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "e4srec")]
    pub model: ModelKind,
    /// Recommender checkpoint name inside the working directory.
    #[arg(long, default_value = "e4srec.ckpt")]
    pub checkpoint: String,
    #[arg(long, value_enum, default_value = "test")]
    pub target: TargetArg,
    /// Remove already-seen items from the full-catalog candidates.
    #[arg(long)]
    pub mask_history: bool,
    /// Seed of the negative draw under `sampled99`.
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    #[arg(long, default_value = "e4srec.ckpt")]
    pub checkpoint: String,
    /// Bundle path (default `bundle.e4sb` in the working directory).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Extra bundles as `DATASET_ID=PATH`; repeatable.
    #[arg(long = "bundle")]
    pub bundles: Vec<String>,
    /// Dataset id for the working directory's own bundle.
    #[arg(long, default_value = "default")]
    pub dataset_id: String,
}

/// Prepared dataset as stored in `dataset.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetFile {
    pub source: String,
    pub k_core: usize,
    pub max_len: usize,
    pub min_timestamp: Option<u64>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub item_names: Vec<String>,
    pub user_names: Vec<String>,
    pub split: SplitDataset,
}

struct Workdir {
    root: PathBuf,
}

impl Workdir {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an artifact another stage must have produced.
    fn require(&self, name: &str, stage: &str, who: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("`{who}` needs {}; run `{stage}` first", p.display());
        }
        Ok(p)
    }

    fn dataset(&self, who: &str) -> Result<DatasetFile> {
        let p = self.require("dataset.json", "synth` or `ingest", who)?;
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    fn backbone(&self, who: &str) -> Result<Arc<Backbone>> {
        let p = self.require("backbone.ckpt", "pretrain-backbone", who)?;
        Ok(Arc::new(Backbone::from_checkpoint(&Checkpoint::load(&p, "backbone")?)?))
    }

    fn embeddings(&self, source: Source, who: &str) -> Result<ItemEmbeddingTable> {
        let name = embeddings_name(source);
        let stage = match source {
            Source::Sasrec => "extract-embeddings",
            Source::Bpr => "extract-embeddings --from bpr",
        };
        let p = self.require(&name, stage, who)?;
        Ok(ItemEmbeddingTable::from_checkpoint(Checkpoint::load(&p, "item-embeddings")?)?)
    }

    fn recommender(&self, name: &str, who: &str) -> Result<E4SRec> {
        let p = self.require(name, "train", who)?;
        let backbone = self.backbone(who)?;
        Ok(E4SRec::from_checkpoint(Checkpoint::load(&p, "e4srec")?, backbone)?)
    }

    fn report<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let dir = self.path("reports");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(name);
        fs::write(&p, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn embeddings_name(source: Source) -> String {
    format!("embeddings-{}.ckpt", source.provenance())
}

/// Reads JSON or TOML (by extension) into a JSON value.
fn read_config_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let value = if is_toml {
        serde_json::to_value(toml::from_str::<toml::Value>(&text).with_context(|| format!("parsing {}", path.display()))?)?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(value)
}

/// `base` with the keys of the config file laid over it.
fn overlay<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let mut merged = serde_json::to_value(&base)?;
    merge(&mut merged, read_config_value(path)?);
    serde_json::from_value(merged).with_context(|| format!("invalid settings in {}", path.display()))
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let wd = Workdir { root: cli.workdir.clone() };
    match cli.command {
        Command::Synth(a) => synth(&wd, a),
        Command::Ingest(a) => ingest(&wd, a),
        Command::PretrainSasrec(a) => pretrain_sasrec(&wd, a),
        Command::PretrainBpr(a) => pretrain_bpr(&wd, a),
        Command::ExtractEmbeddings(a) => extract(&wd, a),
        Command::PretrainBackbone(a) => backbone(&wd, a),
        Command::Train(a) => train_cmd(&wd, a),
        Command::Sweep(a) => sweep(&wd, a),
        Command::Evaluate(a) => evaluate(&wd, a),
        Command::ExportBundle(a) => export(&wd, a),
        Command::Serve(a) => serve(&wd, a),
    }
}

fn prepare(wd: &Workdir, records: Vec<InteractionRecord>, source: String, prep: &PrepArgs, min_ts: Option<u64>) -> Result<()> {
    fs::create_dir_all(&wd.root).with_context(|| format!("creating {}", wd.root.display()))?;
    let filtered = k_core_filter(&records, prep.k_core)?;
    let seqs = build_sequences(&filtered)?;
    let split = leave_one_out(&seqs);
    let file = DatasetFile {
        source,
        k_core: prep.k_core,
        max_len: prep.max_len,
        min_timestamp: min_ts,
        n_users: seqs.n_users(),
        n_items: seqs.n_items(),
        n_interactions: seqs.n_interactions(),
        item_names: seqs.item_names.clone(),
        user_names: seqs.user_names.clone(),
        split,
    };
    fs::write(wd.path("dataset.json"), serde_json::to_string(&file)?)?;
    println!(
        "dataset: {} users, {} items, {} interactions after {}-core ({} records in)",
        file.n_users,
        file.n_items,
        file.n_interactions,
        prep.k_core,
        records.len()
    );
    Ok(())
}

fn synth(wd: &Workdir, a: SynthArgs) -> Result<()> {
    let mut cfg = overlay(SynthConfig::default(), a.config.as_deref())?;
    if let Some(v) = a.users {
        cfg.n_users = v;
    }
    if let Some(v) = a.items {
        cfg.n_items = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let records = synth_generate(&cfg)?;
    fs::create_dir_all(&wd.root).with_context(|| format!("creating {}", wd.root.display()))?;
    let tsv = wd.path("interactions.tsv");
    let mut w = std::io::BufWriter::new(fs::File::create(&tsv).with_context(|| format!("creating {}", tsv.display()))?);
    write_interactions(&records, &mut w)?;
    std::io::Write::flush(&mut w)?;
    wd.report("synth.json", &cfg)?;
    prepare(wd, records, "synthetic".into(), &a.prep, None)
}

fn ingest(wd: &Workdir, a: IngestArgs) -> Result<()> {
    let report = load_interactions(&a.input, a.min_timestamp)?;
    if report.malformed > 0 {
        log::warn!("skipped {} malformed lines in {}", report.malformed, a.input.display());
    }
    if report.before_min_timestamp > 0 {
        log::info!("dropped {} interactions before the minimum timestamp", report.before_min_timestamp);
    }
    prepare(wd, report.records, a.input.display().to_string(), &a.prep, a.min_timestamp)
}

fn pretrain_sasrec(wd: &Workdir, a: ModelArgs) -> Result<()> {
    let data = wd.dataset("pretrain-sasrec")?;
    let mut cfg = overlay(SasRecConfig { max_len: data.max_len, ..Default::default() }, a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let t = Instant::now();
    let (model, log) = train_sasrec(&data.split, cfg.clone())?;
    model.to_checkpoint().save(wd.path("sasrec.ckpt"))?;
    let best = log.val_hr10.get(log.best_epoch).copied().unwrap_or(0.0);
    wd.report("pretrain-sasrec.json", &serde_json::json!({ "config": cfg, "log": log, "seconds": t.elapsed().as_secs_f64() }))?;
    println!("sasrec: best val HR@10 {best:.4} (epoch {}) in {:.1?}", log.best_epoch + 1, t.elapsed());
    Ok(())
}

fn pretrain_bpr(wd: &Workdir, a: ModelArgs) -> Result<()> {
    let data = wd.dataset("pretrain-bpr")?;
    let mut cfg = overlay(BprConfig::default(), a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let t = Instant::now();
    let model = train_bpr(&data.split, cfg.clone())?;
    model.to_checkpoint().save(wd.path("bpr.ckpt"))?;
    let ranks: Vec<usize> = rank_full(&model, &data.split, EvalTarget::Valid, false)?.into_iter().map(|r| r.rank).collect();
    let hr = e4srec_core::evalkit::hr_at_k(&ranks, 10)?;
    wd.report("pretrain-bpr.json", &serde_json::json!({ "config": cfg, "val_hr10": hr, "seconds": t.elapsed().as_secs_f64() }))?;
    println!("bpr: val HR@10 {hr:.4} in {:.1?}", t.elapsed());
    Ok(())
}

fn extract(wd: &Workdir, a: ExtractArgs) -> Result<()> {
    let who = "extract-embeddings";
    let table = match a.from {
        Source::Sasrec => {
            let p = wd.require("sasrec.ckpt", "pretrain-sasrec", who)?;
            extract_item_embeddings(&SasRec::from_checkpoint(&Checkpoint::load(&p, "sasrec")?)?)
        }
        Source::Bpr => {
            let p = wd.require("bpr.ckpt", "pretrain-bpr", who)?;
            extract_item_embeddings(&BprModel::from_checkpoint(&Checkpoint::load(&p, "bpr")?)?)
        }
    };
    let name = embeddings_name(a.from);
    table.to_checkpoint().save(wd.path(&name))?;
    println!("embeddings: {} items x {} from {} -> {name}", table.n_items(), table.dim(), table.provenance);
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct BackboneSettings {
    model: BackboneConfig,
    pretrain: PretrainConfig,
    corpus: CorpusConfig,
}

fn backbone(wd: &Workdir, a: BackboneArgs) -> Result<()> {
    let mut s = overlay(BackboneSettings::default(), a.config.as_deref())?;
    if let Some(v) = a.epochs {
        s.pretrain.epochs = v;
    }
    if let Some(v) = a.examples {
        s.corpus.n_examples = v;
    }
    fs::create_dir_all(&wd.root).with_context(|| format!("creating {}", wd.root.display()))?;
    let t = Instant::now();
    let texts = InstructionCorpus::generate(&s.corpus).texts();
    let vocab = Vocab::build(texts.iter().map(|x| x.as_str()), s.model.max_vocab);
    let (model, log) = pretrain_backbone(&texts, vocab, s.model.clone(), &s.pretrain)?;
    model.to_checkpoint().save(wd.path("backbone.ckpt"))?;
    wd.report(
        "pretrain-backbone.json",
        &serde_json::json!({
            "settings": s,
            "log": log,
            "parameters": model.num_parameters(),
            "fingerprint": format!("{:016x}", model.bit_hash()),
            "seconds": t.elapsed().as_secs_f64(),
        }),
    )?;
    println!(
        "backbone: {} parameters, held-out perplexity {:.2} -> {:.2} in {:.1?} (frozen)",
        model.num_parameters(),
        log.initial_heldout_ppl,
        log.final_heldout_ppl,
        t.elapsed()
    );
    Ok(())
}

fn train_config(setup: &TrainSetup, data: &DatasetFile) -> Result<TrainConfig> {
    let base = TrainConfig::preset(&setup.preset).ok_or_else(|| {
        anyhow!("unknown preset {:?}; choose one of {}", setup.preset, e4srec_core::e4srec::PRESETS.join(", "))
    })?;
    let mut cfg = overlay(TrainConfig { max_len: data.max_len, ..base }, setup.config.as_deref())?;
    if let Some(v) = setup.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = setup.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn default_output(setup: &TrainSetup) -> String {
    if let Some(o) = &setup.output {
        return o.clone();
    }
    let mut name = String::from("e4srec");
    if setup.embeddings == Source::Bpr {
        name.push_str("-bpr");
    }
    if setup.no_llm {
        name.push_str("-nollm");
    }
    name + ".ckpt"
}

#[derive(Debug, Serialize)]
struct TrainReport {
    checkpoint: String,
    embeddings: Provenance,
    mode: Mode,
    config: TrainConfig,
    log: TrainLog,
    val_hr10: f64,
    trainable_parameters: usize,
    seconds: f64,
}

fn fit(wd: &Workdir, setup: &TrainSetup, cfg: &TrainConfig, who: &str) -> Result<(E4SRec, TrainReport)> {
    let data = wd.dataset(who)?;
    let emb = wd.embeddings(setup.embeddings, who)?;
    let bb = wd.backbone(who)?;
    if emb.n_items() != data.n_items {
        bail!("embeddings cover {} items but the dataset has {}; rerun `extract-embeddings`", emb.n_items(), data.n_items);
    }
    let mode = if setup.no_llm { Mode::NoLlm } else { Mode::Llm };
    let fingerprint = bb.bit_hash();
    let t = Instant::now();
    let mut model = E4SRec::new(bb, emb, cfg.lora(), mode, cfg.max_len, cfg.seed)?;
    let log = train(&mut model, &data.split, cfg)?;
    if model.backbone.bit_hash() != fingerprint {
        bail!("backbone weights changed during training");
    }
    let report = TrainReport {
        checkpoint: default_output(setup),
        embeddings: model.provenance,
        mode,
        config: cfg.clone(),
        val_hr10: log.val_hr10.last().copied().unwrap_or(0.0),
        log,
        trainable_parameters: model.w_in().numel() + model.w_out().numel() + model.adapter.num_parameters(),
        seconds: t.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn train_cmd(wd: &Workdir, a: TrainArgs) -> Result<()> {
    let who = "train";
    let data = wd.dataset(who)?;
    let mut cfg = train_config(&a.setup, &data)?;
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    let (model, report) = fit(wd, &a.setup, &cfg, who)?;
    model.to_checkpoint().save(wd.path(&report.checkpoint))?;
    let stem = report.checkpoint.trim_end_matches(".ckpt").to_string();
    wd.report(&format!("train-{stem}.json"), &report)?;
    println!(
        "train: {} ({:?}, {} embeddings) val HR@10 {:.4} after {} steps in {:.1}s",
        report.checkpoint, report.mode, report.embeddings, report.val_hr10, report.log.steps, report.seconds
    );
    Ok(())
}

fn sweep(wd: &Workdir, a: SweepArgs) -> Result<()> {
    let who = "sweep";
    let data = wd.dataset(who)?;
    let base = train_config(&a.setup, &data)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, E4SRec, TrainReport)> = None;
    for &lr in &a.lrs {
        for &epochs in &a.epochs {
            let cfg = TrainConfig { learning_rate: lr, epochs, ..base.clone() };
            let (model, report) = fit(wd, &a.setup, &cfg, who)?;
            println!("sweep: lr {lr:e} epochs {epochs}: val HR@10 {:.4}", report.val_hr10);
            rows.push(serde_json::json!({ "lr": lr, "epochs": epochs, "val_hr10": report.val_hr10, "seconds": report.seconds }));
            if best.as_ref().is_none_or(|b| report.val_hr10 > b.0) {
                best = Some((report.val_hr10, model, report));
            }
        }
    }
    let (hr, model, report) = best.ok_or_else(|| anyhow!("empty grid"))?;
    model.to_checkpoint().save(wd.path(&report.checkpoint))?;
    wd.report("sweep.json", &serde_json::json!({ "grid": rows, "best": report }))?;
    println!(
        "sweep: best lr {:e} epochs {} (val HR@10 {hr:.4}) -> {}",
        report.config.learning_rate, report.config.epochs, report.checkpoint
    );
    Ok(())
}

fn evaluate(wd: &Workdir, a: EvaluateArgs) -> Result<()> {
    let who = "evaluate";
    let data = wd.dataset(who)?;
    let scorer: Box<dyn Scorer> = match a.model {
        ModelKind::E4srec => Box::new(wd.recommender(&a.checkpoint, who)?),
        ModelKind::Sasrec => {
            let p = wd.require("sasrec.ckpt", "pretrain-sasrec", who)?;
            Box::new(SasRec::from_checkpoint(&Checkpoint::load(&p, "sasrec")?)?)
        }
        ModelKind::Bpr => {
            let p = wd.require("bpr.ckpt", "pretrain-bpr", who)?;
            Box::new(BprModel::from_checkpoint(&Checkpoint::load(&p, "bpr")?)?)
        }
        ModelKind::Pop => Box::new(Popularity::from_split(&data.split)),
    };
    let label = match a.model {
        ModelKind::E4srec => a.checkpoint.trim_end_matches(".ckpt").to_string(),
        other => format!("{other:?}").to_lowercase(),
    };
    let target = match a.target {
        TargetArg::Valid => EvalTarget::Valid,
        TargetArg::Test => EvalTarget::Test,
    };
    let (protocol, rankings) = match a.protocol {
        ProtocolArg::Full => (Protocol::Full, rank_full(scorer.as_ref(), &data.split, target, a.mask_history)?),
        ProtocolArg::Sampled99 => {
            if target != EvalTarget::Test {
                bail!("the sampled protocol ranks test items only");
            }
            (Protocol::Sampled { n_neg: 99 }, rank_sampled(scorer.as_ref(), &data.split, 99, a.seed, true)?)
        }
    };
    let report = MetricsReport::from_rankings(protocol, &rankings)?
        .with_model(label.clone())
        .with_groups(&rankings, &group_by_sparsity(&data.split, SparsityBounds::default()))?;
    let target_name = if target == EvalTarget::Test { "test" } else { "valid" };
    wd.report(&format!("eval-{label}-{protocol}-{target_name}.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn export(wd: &Workdir, a: ExportArgs) -> Result<()> {
    let model = wd.recommender(&a.checkpoint, "export-bundle")?;
    let out = a.output.unwrap_or_else(|| wd.path("bundle.e4sb"));
    let report = export_bundle(&model, &out)?;
    wd.report("export-bundle.json", &report)?;
    println!(
        "bundle: {} ({} bytes), {} parameters = {:.2}% of the {} backbone parameters",
        report.path,
        report.bytes,
        report.parameters,
        100.0 * report.ratio,
        report.backbone_parameters
    );
    Ok(())
}

fn serve(wd: &Workdir, a: ServeArgs) -> Result<()> {
    let who = "serve";
    let backbone = wd.backbone(who)?;
    let registry = Arc::new(Registry::new(backbone));
    let mut bundles: Vec<(String, PathBuf)> = Vec::new();
    for spec in &a.bundles {
        let (id, path) = spec.split_once('=').ok_or_else(|| anyhow!("--bundle expects DATASET_ID=PATH, got {spec:?}"))?;
        bundles.push((id.to_string(), PathBuf::from(path)));
    }
    if bundles.is_empty() {
        bundles.push((a.dataset_id.clone(), wd.require("bundle.e4sb", "export-bundle", who)?));
    }
    for (id, path) in &bundles {
        let version = registry.load(id, path).with_context(|| format!("loading {}", path.display()))?;
        log::info!("dataset {id}: {} (version {version})", path.display());
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = e4srec_server::bind(&a.addr).await?;
        println!("listening on {}", listener.local_addr()?);
        use std::io::Write;
        std::io::stdout().flush()?;
        e4srec_server::serve(listener, registry, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
