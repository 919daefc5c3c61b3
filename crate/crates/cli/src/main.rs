use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dclip::data::encode::{encode_class_prompts, encode_samples};
use dclip::data::{gen_synthetic, Dataset, EmbeddingCache, SyntheticSpec};
use dclip::eval::{build_report, t2i_r1, ZeroShotInputs};
use dclip::gradcheck::suite::{run_suite, SuiteOptions, TOLERANCE};
use dclip::training::{
    distill_student_with, epoch_sweep, load_student, train_teacher_with, write_sweep_csv, Checkpoint, Frozen,
    TrainConfig, Variant,
};
use dclip::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "dclip", version, about = "Region-aware teacher/student distillation on synthetic image-text data")]
struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, env = "DCLIP_SEED", default_value_t = 7)]
    seed: u64,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Fine-tune the teacher's fusion layers.
    TrainTeacher(TrainTeacher),
    /// Distill a student image encoder from a teacher checkpoint.
    Distill(Distill),
    /// Retrieval and zero-shot metrics for a pair of embedding caches.
    Eval(Eval),
    /// Retention and retrieval over teacher epochs, as CSV.
    Sweep(Sweep),
    /// Check analytic gradients against finite differences.
    Gradcheck(Gradcheck),
    /// Describe a checkpoint, cache or dataset directory, or print the presets.
    Info(Info),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train_size: usize,
    #[arg(long, default_value_t = 128)]
    heldout_size: usize,
    #[arg(long, default_value_t = 16)]
    num_concepts: usize,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    #[arg(long, default_value_t = 6)]
    parts_per_image: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
}

/// Preset overrides. Unset flags take the `--variant` column:
/// B = 5 teacher epochs, 1 cluster, 512 dims, absolute positions, no anchor;
/// L = 1 teacher epoch, 3 clusters, 768 dims, rotary positions, anchor on.
/// Both use 2 student epochs, lr 1e-5 / 1e-6 and batch 32.
#[derive(Args, Clone)]
struct Preset {
    /// b or l.
    #[arg(long, default_value = "b")]
    variant: Variant,
    /// [preset: B 5, L 1]
    #[arg(long)]
    teacher_epochs: Option<usize>,
    /// [preset: 2]
    #[arg(long)]
    student_epochs: Option<usize>,
    /// [preset: 1e-5]
    #[arg(long)]
    teacher_lr: Option<f64>,
    /// [preset: 1e-6]
    #[arg(long)]
    student_lr: Option<f64>,
    /// [preset: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [preset: B 1, L 3]
    #[arg(long)]
    clusters: Option<usize>,
    /// Enable the anchor term [preset: B off, L on].
    #[arg(long, conflicts_with = "no_anchor")]
    anchor: bool,
    #[arg(long)]
    no_anchor: bool,
    /// [preset: 1.0]
    #[arg(long)]
    anchor_weight: Option<f64>,
    /// Drop the text distillation term.
    #[arg(long)]
    no_cos_t: bool,
    /// Drop the image distillation term.
    #[arg(long)]
    no_cos_i: bool,
    /// Clip the global gradient norm [preset: off].
    #[arg(long)]
    clip_grad_norm: Option<f64>,
}

impl Preset {
    fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let mut c = TrainConfig::preset(self.variant, seed);
        c.teacher_epochs = self.teacher_epochs.unwrap_or(c.teacher_epochs);
        c.student_epochs = self.student_epochs.unwrap_or(c.student_epochs);
        c.teacher_lr = self.teacher_lr.unwrap_or(c.teacher_lr);
        c.student_lr = self.student_lr.unwrap_or(c.student_lr);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.clusters = self.clusters.unwrap_or(c.clusters);
        c.anchor_weight = self.anchor_weight.unwrap_or(c.anchor_weight);
        if self.anchor {
            c.anchor_enabled = true;
        }
        if self.no_anchor {
            c.anchor_enabled = false;
        }
        c.use_cos_t = !self.no_cos_t;
        c.use_cos_i = !self.no_cos_i;
        c.clip_grad_norm = self.clip_grad_norm;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainTeacher {
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    preset: Preset,
}

#[derive(Args)]
struct Distill {
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    preset: Preset,
}

#[derive(Args)]
struct Eval {
    /// Image embedding cache.
    #[arg(long)]
    images: PathBuf,
    /// Text embedding cache, id-aligned with the images.
    #[arg(long)]
    texts: PathBuf,
    /// Dataset directory; adds zero-shot accuracy from its class labels.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Text encoder for the class prompts when `--data` is given.
    #[arg(long, default_value = "b")]
    variant: Variant,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of rows, epochs 0 to N-1.
    #[arg(long, default_value_t = 5)]
    max_epochs: usize,
    #[command(flatten)]
    preset: Preset,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
}

#[derive(Args)]
struct Info {
    /// Checkpoint (.dckp), cache (.dcec) or dataset directory.
    path: Option<PathBuf>,
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: &GenData, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        train_size: a.train_size,
        heldout_size: a.heldout_size,
        num_concepts: a.num_concepts,
        num_classes: a.num_classes,
        parts_per_image: a.parts_per_image,
        noise_sigma: a.noise_sigma,
        ..SyntheticSpec::with_seed(seed)
    };
    let ds = gen_synthetic(&spec, &a.out)?;
    write_json(&a.out.join("gen_data_config.json"), &json!({ "command": "gen-data", "spec": spec }))?;
    println!(
        "wrote {} train and {} heldout samples, {} region sets to {}",
        ds.train.len(),
        ds.heldout.len(),
        ds.regions.len(),
        a.out.display()
    );
    Ok(())
}

fn train_teacher(a: &TrainTeacher, seed: u64) -> Result<()> {
    let cfg = a.preset.resolve(seed)?;
    let ds = Dataset::load(&a.data)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("teacher_config.json"),
        &json!({ "command": "train-teacher", "data": a.data, "config": cfg }),
    )?;
    let ckpt = a.out.join("teacher.dckp");
    let run = train_teacher_with(&ds, &cfg, Some(&ckpt))?;
    run.log.write(a.out.join("teacher_log.csv"))?;
    let first = run.log.first_val().expect("initial validation").val_loss;
    let last = run.log.last_val().expect("initial validation").val_loss;
    println!(
        "teacher: {} epochs, {} steps, validation InfoNCE {first:.4} -> {last:.4}, tau_loss {:.4}",
        cfg.teacher_epochs,
        run.log.steps.len(),
        run.tau_loss
    );
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn distill(a: &Distill, seed: u64) -> Result<()> {
    let cfg = a.preset.resolve(seed)?;
    let ds = Dataset::load(&a.data)?;
    let teacher = Checkpoint::load(&a.teacher)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("student_config.json"),
        &json!({ "command": "distill", "data": a.data, "teacher": a.teacher, "config": cfg }),
    )?;
    let ckpt = a.out.join("student.dckp");
    let run = distill_student_with(&ds, &teacher, &cfg, Some(&ckpt))?;
    run.log.write(a.out.join("student_log.csv"))?;

    let frozen = Frozen::new(cfg.encoder_config())?;
    let base = encode_samples(&ds.heldout, &frozen.text, &frozen.image)?;
    let student = encode_samples(&ds.heldout, &frozen.text, &load_student(&run.checkpoint)?)?;
    base.texts.write(a.out.join("heldout_texts.dcec"))?;
    base.images.write(a.out.join("heldout_base_images.dcec"))?;
    student.images.write(a.out.join("heldout_student_images.dcec"))?;

    let r1 = |images: &EmbeddingCache| t2i_r1(&base.texts.matrix()?, &images.matrix()?, base.texts.ids());
    let (v0, v1) = (run.log.first_val().expect("epochs"), run.log.last_val().expect("epochs"));
    println!(
        "student: {} epochs, validation loss {:.4} -> {:.4}, cos_I {:.5} -> {:.5}",
        cfg.student_epochs,
        v0.val_loss,
        v1.val_loss,
        v0.val_cos_i.unwrap_or(f64::NAN),
        v1.val_cos_i.unwrap_or(f64::NAN)
    );
    if !ds.heldout.is_empty() {
        println!(
            "heldout text->image R@1: base {:.4}, student {:.4}",
            r1(&base.images)?,
            r1(&student.images)?
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval(a: &Eval, seed: u64) -> Result<()> {
    let images = EmbeddingCache::read(&a.images)?;
    let texts = EmbeddingCache::read(&a.texts)?;
    let mut resolved = json!({ "command": "eval", "images": a.images, "texts": a.texts });
    let mut report = match &a.data {
        None => build_report(&images, &texts, None)?,
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            let by_id: std::collections::BTreeMap<&str, usize> =
                ds.train.iter().chain(&ds.heldout).map(|s| (s.id.as_str(), s.class)).collect();
            let labels = images
                .ids()
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| Error::Validation {
                        id: id.clone(),
                        field: "id".into(),
                        message: format!("has no label in {}", dir.display()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut enc = TrainConfig::preset(a.variant, seed).encoder_config();
            enc.embed_dim = images.dim();
            let text = Frozen::new(enc)?.text;
            let prompts = encode_class_prompts(&text, ds.num_classes())?;
            resolved["data"] = json!(dir);
            resolved["variant"] = json!(a.variant);
            resolved["seed"] = json!(seed);
            build_report(
                &images,
                &texts,
                Some(ZeroShotInputs {
                    labels: &labels,
                    prompts: &prompts,
                }),
            )?
        }
    };
    report.config = Some(resolved.clone());
    create_dir(&a.out)?;
    write_json(&a.out.join("eval_config.json"), &resolved)?;
    report.write_json(a.out.join("report.json"))?;
    let d = &report.direction;
    println!(
        "{} queries; text->image R@1 {:.4} R@5 {:.4} R@10 {:.4} MAP {:.4}; image->text R@1 {:.4} R@5 {:.4} R@10 {:.4} MAP {:.4}",
        report.n_queries, d.t2i.r1, d.t2i.r5, d.t2i.r10, d.t2i.map, d.i2t.r1, d.i2t.r5, d.i2t.r10, d.i2t.map
    );
    if let Some(z) = &report.zero_shot {
        println!("zero-shot top-1 {:.4} top-5 {:.4}", z.top1, z.top5);
    }
    Ok(())
}

fn sweep(a: &Sweep, seed: u64) -> Result<()> {
    let cfg = a.preset.resolve(seed)?;
    let ds = Dataset::load(&a.data)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("sweep_config.json"),
        &json!({ "command": "sweep", "data": a.data, "max_epochs": a.max_epochs, "config": cfg }),
    )?;
    let rows = epoch_sweep(&ds, &cfg, a.max_epochs)?;
    let path = a.out.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "epoch {}: retention {:.6}, heldout T->I R@1 {:.4}, teacher val loss {:.4}",
            r.epoch, r.retention, r.t2i_r1, r.teacher_val_loss
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Exit status 3 when any check exceeds the tolerance.
fn gradcheck(a: &Gradcheck, seed: u64) -> Result<bool> {
    let opts = SuiteOptions {
        seeds: a.seeds,
        eps: a.eps,
        base_seed: seed,
    };
    let results = run_suite(&opts)?;
    for r in &results {
        println!(
            "{:<4} {:<28} max rel err {:.3e} over {} seeds, {} coordinates",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.seeds,
            r.coords
        );
    }
    let ok = results.iter().all(|r| r.passed());
    println!(
        "{} of {} checks within {TOLERANCE:e}",
        results.iter().filter(|r| r.passed()).count(),
        results.len()
    );
    Ok(ok)
}

fn info(a: &Info, seed: u64) -> Result<()> {
    let Some(path) = &a.path else {
        let presets = json!({
            "b": TrainConfig::preset(Variant::B, seed),
            "l": TrainConfig::preset(Variant::L, seed),
        });
        println!("{}", serde_json::to_string_pretty(&presets).expect("json"));
        return Ok(());
    };
    if path.is_dir() {
        let ds = Dataset::load(path)?;
        println!(
            "dataset: {} train, {} heldout, {} region sets, {} classes",
            ds.train.len(),
            ds.heldout.len(),
            ds.regions.len(),
            ds.num_classes()
        );
        return Ok(());
    }
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    if bytes.starts_with(b"DCKP") {
        let c = Checkpoint::from_bytes(&bytes, path)?;
        let values: usize = c.tensors.values().map(|t| t.len()).sum();
        println!(
            "checkpoint: {:?} variant {} epoch {} step {}, {} tensors, {values} values",
            c.meta.kind,
            c.meta.variant,
            c.meta.epoch,
            c.meta.step,
            c.tensors.len()
        );
        println!("{}", serde_json::to_string_pretty(&c.meta.config).expect("json"));
    } else {
        let c = EmbeddingCache::from_bytes(&bytes, path)?;
        println!("embedding cache: {} rows of dimension {}", c.len(), c.dim());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::DegenerateVector { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is set once");
    }
    let seed = cli.seed;
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::TrainTeacher(a) => train_teacher(a, seed),
        Command::Distill(a) => distill(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Sweep(a) => sweep(a, seed),
        Command::Gradcheck(a) => match gradcheck(a, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
        Command::Info(a) => info(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
