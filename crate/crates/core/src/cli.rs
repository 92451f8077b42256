//! The `lift` command-line tool.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use base64::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{
    build_cache, stored_form, try_build_cache, BuildOptions, DType, EmbeddingCache, EmbeddingRecord,
};
use crate::checkpoint;
use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{DatasetManifest, SynthSpec};
use crate::error::{LiftError, Result};
use crate::eval::{
    classify, manifest_pool, pairwise_similarity_probe, retrieval_ranks, AnchorSet, Direction,
    ProbeResult, DEFAULT_PROMPT_TEMPLATE,
};
use crate::flops::{
    comparison_table, mean_reduction, render_table, standard_presets, LONG_CTX, SHORT_CTX,
    TABLE_CSV_HEADER,
};
use crate::train::{self, LossKind, RunOptions, TrainConfig};
use crate::util::write_atomic;
use crate::vit::ViTConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(
    name = "lift",
    version,
    about = "Train an image encoder against frozen caption embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack caption embeddings (JSONL or TSV) into a cache file.
    BuildCache(BuildCacheArgs),
    /// Write a synthetic corpus: caption cache, anchors, manifest and experiment file.
    SynthData(SynthArgs),
    /// Train the image encoder.
    Train(TrainArgs),
    /// Zero-shot classification and retrieval for a checkpoint.
    Eval(EvalArgs),
    /// Mean pairwise cosine similarity of cached embeddings.
    Probe(ProbeArgs),
    /// Analytic training FLOPs of joint versus image-only training.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// One `{"id": u64, "vector": [f32, ...]}` object per line.
    Jsonl,
    /// `id<TAB>base64 of little-endian f32 values` per line.
    Tsv,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildCacheArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Cache file to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Embedding width; taken from the first record when omitted.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value = "float32")]
    pub dtype: DType,
    #[arg(long)]
    pub normalize: bool,
    /// Re-read the input and compare every stored vector.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.8)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.05)]
    pub pixel_noise: f64,
    #[arg(long, default_value = "float32")]
    pub dtype: DType,
    /// Training steps written into the experiment file.
    #[arg(long, default_value_t = 300)]
    pub steps: u64,
    #[arg(long, default_value = "contrastive")]
    pub loss: LossKind,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Resume from this training-state checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment file supplying data paths not given as flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for picking one caption per image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also write per-query ranks to `ranks.csv`.
    #[arg(long)]
    pub ranks: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FlopsArgs {
    /// Write `flops.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCache(a) => cmd_build_cache(&a),
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Flops(a) => cmd_flops(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LiftError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_resolved<T: Serialize>(dir: &Path, args: &T) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(RESOLVED_CONFIG), args)
}

// ---- build-cache ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: u64,
    vector: Vec<f32>,
}

fn parse_record(line: &str, lineno: usize, format: InputFormat) -> Result<EmbeddingRecord> {
    let bad = |reason: String| LiftError::Parse {
        line: lineno,
        reason,
    };
    match format {
        InputFormat::Jsonl => {
            let r: JsonRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            Ok(EmbeddingRecord::new(r.id, r.vector))
        }
        InputFormat::Tsv => {
            let (id, payload) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected id<TAB>base64".into()))?;
            let id = id
                .trim()
                .parse::<u64>()
                .map_err(|e| bad(format!("bad id: {e}")))?;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(payload.trim())
                .map_err(|e| bad(format!("bad base64: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(bad(format!(
                    "payload of {} bytes is not a whole number of f32",
                    bytes.len()
                )));
            }
            let vector = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(EmbeddingRecord::new(id, vector))
        }
    }
}

/// Streams records from a text file, one per non-blank line.
struct RecordReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    lineno: usize,
    format: InputFormat,
}

impl RecordReader {
    fn open(path: &Path, format: InputFormat) -> Result<Self> {
        let f = File::open(path).map_err(|e| LiftError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(f).lines(),
            lineno: 0,
            format,
        })
    }
}

impl Iterator for RecordReader {
    type Item = Result<EmbeddingRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.lineno += 1;
            match line {
                Err(e) => return Some(Err(LiftError::io(&self.path, e))),
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some(parse_record(&l, self.lineno, self.format)),
            }
        }
    }
}

fn infer_format(path: &Path) -> Result<InputFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json" | "ndjson") => Ok(InputFormat::Jsonl),
        Some("tsv" | "txt") => Ok(InputFormat::Tsv),
        _ => Err(LiftError::Config(format!(
            "cannot infer input format of {}; pass --format",
            path.display()
        ))),
    }
}

fn verify_cache(
    cache: &EmbeddingCache,
    input: &Path,
    format: InputFormat,
    opts: &BuildOptions,
) -> Result<usize> {
    let corrupt = |reason: String| LiftError::CorruptCache {
        path: cache.path().to_path_buf(),
        reason,
    };
    let mut count = 0;
    for record in RecordReader::open(input, format)? {
        let record = record?;
        let want = stored_form(&record.vector, opts)?;
        let got = cache.lookup(record.id)?;
        if got
            .iter()
            .map(|x| x.to_bits())
            .ne(want.iter().map(|x| x.to_bits()))
        {
            return Err(corrupt(format!(
                "stored vector for id {} differs from input",
                record.id
            )));
        }
        count += 1;
    }
    if count != cache.len() {
        return Err(corrupt(format!(
            "cache holds {} records, input has {count}",
            cache.len()
        )));
    }
    cache.validate()?;
    Ok(count)
}

pub fn cmd_build_cache(a: &BuildCacheArgs) -> Result<()> {
    let format = match a.format {
        Some(f) => f,
        None => infer_format(&a.input)?,
    };
    let mut records = RecordReader::open(&a.input, format)?.peekable();
    let dim = match (a.dim, records.peek()) {
        (Some(d), _) => d,
        (None, Some(Ok(r))) => r.vector.len(),
        (None, Some(Err(_))) => return Err(records.next().unwrap().unwrap_err()),
        (None, None) => return Err(LiftError::Config("empty input; pass --dim".into())),
    };
    let opts = BuildOptions::new(dim).dtype(a.dtype).normalize(a.normalize);
    let cache = try_build_cache(&a.out, records, opts)?;
    println!(
        "wrote {} records (dim {}, {}) to {}",
        cache.len(),
        dim,
        a.dtype,
        a.out.display()
    );
    if a.verify {
        match verify_cache(&cache, &a.input, format, &opts) {
            Ok(n) => println!("verified {n} records"),
            Err(e) => {
                drop(cache);
                let _ = fs::remove_file(&a.out);
                return Err(e);
            }
        }
    }
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".json");
    write_json(Path::new(&sidecar), a)
}

// ---- synth-data ----

/// Small encoder suited to the synthetic corpus.
pub fn toy_model(image_size: usize, channels: usize, embed_dim: usize) -> ViTConfig {
    ViTConfig {
        image_size,
        patch_size: 4,
        channels,
        width: 64,
        depth: 2,
        heads: 4,
        head_dim: 16,
        ff_width: 256,
        embed_dim,
        head_hidden: None,
    }
}

pub fn cmd_synth_data(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        classes: a.classes,
        samples: a.samples,
        dim: a.dim,
        image_size: a.image_size,
        spread: a.spread,
        pixel_noise: a.pixel_noise,
        ..SynthSpec::toy(a.seed)
    };
    spec.validate()?;
    write_resolved(&a.out, a)?;
    let opts = BuildOptions::new(spec.dim).dtype(a.dtype).normalize(true);
    build_cache(a.out.join("captions.lftc"), spec.caption_records(), opts)?;
    build_cache(a.out.join("anchors.lftc"), spec.prototype_records(), opts)?;
    spec.manifest(a.seed).save(a.out.join("manifest.json"))?;

    let steps = a.steps;
    let experiment = ExperimentConfig {
        model: toy_model(spec.image_size, spec.channels, spec.dim),
        train: TrainConfig {
            total_steps: steps,
            warmup_steps: (steps / 10).min(steps.saturating_sub(1)),
            batch_size: spec.samples.min(64),
            loss: a.loss,
            seed: a.seed,
            ..TrainConfig::default()
        },
        data: DataConfig {
            cache: "captions.lftc".into(),
            manifest: "manifest.json".into(),
            anchors: Some("anchors.lftc".into()),
        },
    };
    write_atomic(
        &a.out.join("experiment.toml"),
        experiment.to_toml().as_bytes(),
    )?;
    println!(
        "wrote {} samples over {} classes to {}",
        spec.samples,
        spec.classes,
        a.out.display()
    );
    Ok(())
}

// ---- train ----

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(loss) = a.loss {
        cfg.train.loss = loss;
    }
    if let Some(steps) = a.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(c) = &a.cache {
        cfg.data.cache = c.clone();
    }
    if let Some(m) = &a.manifest {
        cfg.data.manifest = m.clone();
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    write_atomic(
        &a.out.join("resolved_config.toml"),
        cfg.to_toml().as_bytes(),
    )?;

    let cache = EmbeddingCache::open(&cfg.data.cache)?;
    let manifest = DatasetManifest::load(&cfg.data.manifest)?;
    let resume = match &a.checkpoint {
        Some(p) => Some(checkpoint::load_state(p)?.0),
        None => None,
    };
    let opts = RunOptions {
        checkpoint_dir: Some(a.out.join("checkpoints")),
        metrics_path: Some(a.out.join("metrics.csv")),
    };
    let out = train::run(&manifest, &cache, &cfg.model, &cfg.train, &opts, resume)?;
    let final_path = a.out.join("final.lftk");
    checkpoint::save_state(&final_path, &out.state, Some(&cfg.train))?;
    match out.metrics.last() {
        Some(m) => println!(
            "step {} loss {:.6} tau {:.5}; wrote {}",
            out.state.step,
            m.loss,
            out.state.temperature.tau(),
            final_path.display()
        ),
        None => println!("no steps run; wrote {}", final_path.display()),
    }
    Ok(())
}

// ---- eval ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub pool_size: usize,
    pub selection_seed: u64,
    pub i2t_top1: f64,
    pub t2i_top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot_top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

/// One manifest row per distinct image, picking among its captions with `seed`.
pub fn one_caption_per_image(manifest: &DatasetManifest, seed: u64) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_source: HashMap<&str, usize> = HashMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let g = *by_source.entry(e.source.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .iter()
        .map(|g| *g.choose(&mut rng).unwrap())
        .collect()
}

fn zero_shot(
    anchors_path: &Path,
    manifest: &DatasetManifest,
    image_embeds: &Array2<f64>,
    indices: &[usize],
) -> Result<(f64, usize)> {
    let k = manifest.labels.len();
    let anchors_cache = EmbeddingCache::open(anchors_path)?;
    let ids: Vec<u64> = (0..k as u64).collect();
    let anchors = AnchorSet::new(
        manifest.labels.clone(),
        anchors_cache.batch_gather(&ids)?.mapv(f64::from),
        DEFAULT_PROMPT_TEMPLATE,
    )?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, &i) in indices.iter().enumerate() {
        let Some(label) = manifest.entries[i].label else {
            continue;
        };
        total += 1;
        if classify(&anchors, image_embeds.row(row))?.label == label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(LiftError::InsufficientData(
            "no labelled images to classify".into(),
        ));
    }
    Ok((correct as f64 / total as f64, k))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = a
        .config
        .as_ref()
        .map(ExperimentConfig::load)
        .transpose()?
        .map(|c| c.data);
    let pick = |flag: &Option<PathBuf>, from: Option<PathBuf>, name: &str| {
        flag.clone()
            .or(from)
            .ok_or_else(|| LiftError::Config(format!("no {name} given; pass --{name} or --config")))
    };
    let cache_path = pick(&a.cache, data.as_ref().map(|d| d.cache.clone()), "cache")?;
    let manifest_path = pick(
        &a.manifest,
        data.as_ref().map(|d| d.manifest.clone()),
        "manifest",
    )?;
    let anchors_path = a.anchors.clone().or(data.and_then(|d| d.anchors));
    if let Some(out) = &a.out {
        write_resolved(out, a)?;
    }

    let params = checkpoint::load_encoder(&a.checkpoint)?;
    let cache = EmbeddingCache::open(&cache_path)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mut indices = one_caption_per_image(&manifest, a.seed);
    if let Some(limit) = a.limit {
        indices.truncate(limit);
    }
    let pool = manifest_pool(&params, &manifest, &cache, &indices)?;
    let i2t = retrieval_ranks(&pool, Direction::ImageToText)?;
    let t2i = retrieval_ranks(&pool, Direction::TextToImage)?;
    let top1 = |r: &[usize]| r.iter().filter(|&&x| x == 0).count() as f64 / r.len() as f64;

    let (zero_shot_top1, classes) = match &anchors_path {
        Some(p) if !manifest.labels.is_empty() => {
            let (acc, k) = zero_shot(p, &manifest, &pool.image_embeds, &indices)?;
            (Some(acc), Some(k))
        }
        _ => (None, None),
    };
    let report = EvalReport {
        checkpoint: a.checkpoint.clone(),
        pool_size: pool.len(),
        selection_seed: a.seed,
        i2t_top1: top1(&i2t),
        t2i_top1: top1(&t2i),
        zero_shot_top1,
        classes,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if let Some(out) = &a.out {
        write_json(&out.join("eval.json"), &report)?;
        if a.ranks {
            let mut csv = String::from("direction,caption_id,rank\n");
            for (dir, ranks) in [("i2t", &i2t), ("t2i", &t2i)] {
                for (id, r) in pool.ids.iter().zip(ranks.iter()) {
                    csv.push_str(&format!("{dir},{id},{r}\n"));
                }
            }
            write_atomic(&out.join("ranks.csv"), csv.as_bytes())?;
        }
    }
    Ok(())
}

// ---- probe ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cache: PathBuf,
    pub sampled: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub result: ProbeResult,
}

pub fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    if let Some(out) = &a.out {
        write_resolved(out, a)?;
    }
    let cache = EmbeddingCache::open(&a.cache)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut ids = cache.ids().choose_multiple(&mut rng, a.limit);
    ids.sort_unstable();
    let embeds = cache.batch_gather(&ids)?.mapv(f64::from);
    let result = pairwise_similarity_probe(&embeds)?;
    println!(
        "mean pairwise cosine {:.6} over {} pairs of {} embeddings",
        result.mean,
        result.pairs,
        ids.len()
    );
    let width = 2.0 / result.histogram.len() as f64;
    for (i, count) in result.histogram.iter().enumerate() {
        let lo = -1.0 + i as f64 * width;
        println!("  [{:+.1}, {:+.1}) {count}", lo, lo + width);
    }
    if let Some(out) = &a.out {
        let report = ProbeReport {
            cache: a.cache.clone(),
            sampled: ids.len(),
            seed: a.seed,
            result,
        };
        write_json(&out.join("probe.json"), &report)?;
    }
    Ok(())
}

// ---- flops ----

pub fn cmd_flops(a: &FlopsArgs) -> Result<()> {
    let rows = comparison_table(&standard_presets(), &[SHORT_CTX, LONG_CTX])?;
    print!("{}", render_table(&rows));
    for n in [SHORT_CTX, LONG_CTX] {
        if let Some(r) = mean_reduction(&rows, n) {
            println!("mean reduction at n_ctx {n}: {:.1}%", r * 100.0);
        }
    }
    if let Some(out) = &a.out {
        write_resolved(out, a)?;
        let mut csv = format!("{TABLE_CSV_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.to_csv());
            csv.push('\n');
        }
        write_atomic(&out.join("flops.csv"), csv.as_bytes())?;
    }
    Ok(())
}
