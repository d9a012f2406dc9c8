use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use normsoft_core::eval::{binarize, evaluate, EmbeddingSet, EvalOptions, Evaluation, NmiNormalization, SOP_KS};
use normsoft_core::io::{self, Checkpoint};
use normsoft_core::losses::{LossConfig, ProxyMatrix};
use normsoft_core::sampling::{derive_seed, generate_synthetic, BatchSpec, Dataset, SeededRng, SyntheticParams};
use normsoft_core::trainer::{fit, BatchPolicy, EmbeddingModel, FitOutput, TrainConfig};
use rayon::prelude::*;

use crate::gradcheck::{run_suite, Variant};
use crate::settings::Settings;
use crate::{CliError, EmbedArgs, EvalArgs, GenArgs, GradcheckArgs, SweepArgs, TrainArgs};

/// Flags accepted by every command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

impl Common {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("seed", str(self.seed)),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ]
    }
}

fn str<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn set_if(b: bool, value: &str) -> Option<String> {
    b.then(|| value.to_string())
}

/// Model init draws from its own stream so batch order does not depend on
/// model size.
const INIT_STREAM: u64 = 1;

pub const GEN_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "."),
    ("classes", "20"),
    ("per_class", "100"),
    ("dim", "64"),
    ("center_scale", "5"),
    ("noise_sigma", "0.5"),
    ("output", "data.csv"),
];

pub const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "."),
    ("data", ""),
    ("embed_dim", "32"),
    ("hidden", "0"),
    ("layer_norm", "true"),
    ("layer_norm_eps", "0.00001"),
    ("loss", "norm-softmax"),
    ("temperature", "0.05"),
    ("scale", "30"),
    ("margin", "0.35"),
    ("epochs", "30"),
    ("batching", "balanced"),
    ("batch_size", "75"),
    ("samples_per_class", "25"),
    ("lr", "0.01"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0001"),
    ("lr_steps", "15"),
    ("lr_gamma", "0.1"),
    ("subsample", "1"),
    ("warmstart_epochs", "1"),
];

const SWEEP_EXTRA: &[(&str, &str)] = &[
    ("axis", ""),
    ("values", ""),
    ("test_per_class", "20"),
    ("eval_data", ""),
    ("ks", "1,2,4,8"),
];

pub const EMBED_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "."),
    ("checkpoint", ""),
    ("data", ""),
    ("codes", "false"),
];

pub const EVAL_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "."),
    ("embeddings", ""),
    ("labels", ""),
    ("ks", "1,2,4,8"),
    ("binary", "false"),
    ("nmi", "arithmetic"),
    ("clusters", "0"),
    ("kmeans_iters", "100"),
];

pub const GRADCHECK_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "."),
    ("loss", "all"),
    ("instances", "100"),
    ("h", "0.00001"),
];

pub fn gen(common: &Common, a: GenArgs) -> Result<(), CliError> {
    let mut flags = common.flags();
    flags.extend([
        ("classes", str(a.classes)),
        ("per_class", str(a.per_class)),
        ("dim", str(a.dim)),
        ("center_scale", str(a.center_scale)),
        ("noise_sigma", str(a.noise_sigma)),
        ("output", path(&a.output)),
    ]);
    let s = Settings::resolve("gen", GEN_DEFAULTS, common.config.as_deref(), flags)?;
    let params = SyntheticParams {
        class_count: s.get("classes")?,
        per_class: s.get("per_class")?,
        feature_dim: s.get("dim")?,
        center_scale: s.get("center_scale")?,
        noise_sigma: s.get("noise_sigma")?,
    };
    let ds = generate_synthetic(&params, &mut SeededRng::new(s.get("seed")?))?;
    let out = s.out_dir()?;
    let file = out.join(s.path("output")?);
    io::save_dataset_csv(&ds, &file)?;
    s.write(&out)?;
    println!(
        "wrote {}: N={} F={} classes={}",
        file.display(),
        ds.len(),
        ds.feature_dim(),
        ds.class_count()
    );
    Ok(())
}

fn train_flags(a: &TrainArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("data", path(&a.data)),
        ("embed_dim", str(a.embed_dim)),
        ("hidden", str(a.hidden)),
        ("layer_norm", set_if(a.no_layer_norm, "false")),
        ("layer_norm_eps", str(a.layer_norm_eps)),
        ("loss", a.loss.clone()),
        ("temperature", str(a.temperature)),
        ("scale", str(a.scale)),
        ("margin", str(a.margin)),
        ("epochs", str(a.epochs)),
        ("batching", set_if(a.sequential, "sequential")),
        ("batch_size", str(a.batch_size)),
        ("samples_per_class", str(a.samples_per_class)),
        ("lr", str(a.lr)),
        ("momentum", str(a.momentum)),
        ("weight_decay", str(a.weight_decay)),
        ("lr_steps", a.lr_steps.clone()),
        ("lr_gamma", str(a.lr_gamma)),
        ("subsample", str(a.subsample)),
        ("warmstart_epochs", str(a.warmstart_epochs)),
    ]
}

/// Model shape and optimization settings of a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub config: TrainConfig,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layer_norm: bool,
    pub layer_norm_eps: f64,
}

pub fn train_setup(s: &Settings) -> Result<TrainSetup, CliError> {
    let batch_size: usize = s.get("batch_size")?;
    let batching = match s.raw("batching") {
        "balanced" => BatchPolicy::Balanced(BatchSpec::from_batch_size(batch_size, s.get("samples_per_class")?)?),
        "sequential" => BatchPolicy::Sequential { batch_size },
        other => {
            return Err(CliError::input(format!(
                "batching must be balanced or sequential, got '{other}'"
            )))
        }
    };
    let loss = LossConfig {
        kind: s.get("loss")?,
        temperature: s.get("temperature")?,
        scale: s.get("scale")?,
        margin: s.get("margin")?,
    };
    let config = TrainConfig {
        epochs: s.get("epochs")?,
        batching,
        lr: s.get("lr")?,
        momentum: s.get("momentum")?,
        weight_decay: s.get("weight_decay")?,
        lr_steps: s.list("lr_steps")?,
        lr_gamma: s.get("lr_gamma")?,
        loss,
        subsample_ratio: s.get("subsample")?,
        warmstart_epochs: s.get("warmstart_epochs")?,
        seed: s.get("seed")?,
    };
    config.validate()?;
    Ok(TrainSetup {
        config,
        embed_dim: s.get("embed_dim")?,
        hidden: s.get("hidden")?,
        layer_norm: s.flag("layer_norm")?,
        layer_norm_eps: s.get("layer_norm_eps")?,
    })
}

/// Initializes a model and proxies for `dataset` and trains them.
pub fn train_model(dataset: &Dataset, setup: &TrainSetup) -> Result<FitOutput, CliError> {
    let mut rng = SeededRng::derived(setup.config.seed, INIT_STREAM);
    let f = dataset.feature_dim();
    let mut model = if setup.hidden > 0 {
        EmbeddingModel::with_hidden(f, setup.hidden, setup.embed_dim, setup.layer_norm, &mut rng)?
    } else {
        EmbeddingModel::linear(f, setup.embed_dim, setup.layer_norm, &mut rng)?
    };
    model.layer_norm_epsilon = setup.layer_norm_eps;
    let proxies = ProxyMatrix::random(dataset.class_count(), setup.embed_dim, &mut rng);
    Ok(fit(dataset, model, proxies, &setup.config)?)
}

pub fn train(common: &Common, a: TrainArgs) -> Result<(), CliError> {
    let mut flags = common.flags();
    flags.extend(train_flags(&a));
    let s = Settings::resolve("train", TRAIN_DEFAULTS, common.config.as_deref(), flags)?;
    let setup = train_setup(&s)?;
    let ds = load(&s.path("data")?, io::load_dataset_csv)?;
    let out = s.out_dir()?;
    s.write(&out)?;

    let fitted = train_model(&ds, &setup)?;
    let mut history = String::from("epoch,loss,lr\n");
    for e in &fitted.history.epochs {
        writeln!(history, "{},{},{}", e.epoch, e.loss, e.lr).unwrap();
        println!(
            "epoch {:>3}  loss {:.6}  lr {:.2e}  {:.2}s",
            e.epoch, e.loss, e.lr, e.wall_time_secs
        );
    }
    std::fs::write(out.join("history.csv"), history).map_err(io_err)?;
    let ckpt = out.join("model.pxe");
    io::save_checkpoint(
        &Checkpoint {
            model: fitted.model,
            proxies: fitted.proxies,
        },
        &ckpt,
    )?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

/// Runs a loader, naming the file in any error.
fn load<T>(path: &Path, f: impl FnOnce(&Path) -> normsoft_core::Result<T>) -> Result<T, CliError> {
    f(path).map_err(|e| match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::input(e.to_string())
}

pub fn embed(common: &Common, a: EmbedArgs) -> Result<(), CliError> {
    let mut flags = common.flags();
    flags.extend([
        ("checkpoint", path(&a.checkpoint)),
        ("data", path(&a.data)),
        ("codes", set_if(a.codes, "true")),
    ]);
    let s = Settings::resolve("embed", EMBED_DEFAULTS, common.config.as_deref(), flags)?;
    let ckpt = load(&s.path("checkpoint")?, io::load_checkpoint)?;
    let ds = load(&s.path("data")?, io::load_dataset_csv)?;
    let emb = ckpt.model.embed(ds.features())?;
    let out = s.out_dir()?;
    s.write(&out)?;
    io::save_embeddings(&emb, &out.join("embeddings.emb"))?;
    io::save_labels(ds.labels(), &out.join("labels.txt"))?;
    if s.flag("codes")? {
        io::save_codes(&binarize(&emb), &out.join("codes.bin"))?;
    }
    println!("embedded {} rows to D={} in {}", emb.rows(), emb.cols(), out.display());
    Ok(())
}

/// CSV (`mode,R@k...,NMI`) and aligned plain-text renderings of a report.
pub fn format_report(ev: &Evaluation, ks: &[usize]) -> (String, String) {
    let mut csv = String::from("mode");
    let mut text = format!("{:<8}", "mode");
    for k in ks {
        write!(csv, ",R@{k}").unwrap();
        write!(text, "{:>9}", format!("R@{k}")).unwrap();
    }
    csv.push_str(",NMI\n");
    text.push_str(&format!("{:>9}\n", "NMI"));
    for r in std::iter::once(&ev.float).chain(ev.binary.as_ref()) {
        write!(csv, "{}", r.mode).unwrap();
        write!(text, "{:<8}", r.mode.to_string()).unwrap();
        for k in ks {
            let v = r.recall_at[k];
            write!(csv, ",{v}").unwrap();
            write!(text, "{v:>9.4}").unwrap();
        }
        writeln!(csv, ",{}", r.nmi).unwrap();
        writeln!(text, "{:>9.4}", r.nmi).unwrap();
    }
    (csv, text)
}

fn parse_ks(s: &Settings) -> Result<Vec<usize>, CliError> {
    let ks: Vec<usize> = s.list("ks")?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::input("ks must be a non-empty list of positive integers"));
    }
    Ok(ks)
}

fn eval_options(s: &Settings, with_binary: bool) -> Result<EvalOptions, CliError> {
    let ks = parse_ks(s)?;
    let nmi_normalization = match s.raw("nmi") {
        "arithmetic" => NmiNormalization::Arithmetic,
        "geometric" => NmiNormalization::Geometric,
        other => {
            return Err(CliError::input(format!(
                "nmi must be arithmetic or geometric, got '{other}'"
            )))
        }
    };
    let clusters: usize = s.get("clusters")?;
    Ok(EvalOptions {
        ks,
        with_binary,
        nmi_clusters: (clusters > 0).then_some(clusters),
        nmi_normalization,
        kmeans_iters: s.get("kmeans_iters")?,
    })
}

pub fn eval(common: &Common, a: EvalArgs) -> Result<(), CliError> {
    let ks = if a.sop {
        Some(SOP_KS.map(|k| k.to_string()).join(","))
    } else {
        a.ks
    };
    let mut flags = common.flags();
    flags.extend([
        ("embeddings", path(&a.embeddings)),
        ("labels", path(&a.labels)),
        ("ks", ks),
        ("binary", set_if(a.binary, "true")),
        ("nmi", set_if(a.nmi_geometric, "geometric")),
        ("clusters", str(a.clusters)),
        ("kmeans_iters", str(a.kmeans_iters)),
    ]);
    let s = Settings::resolve("eval", EVAL_DEFAULTS, common.config.as_deref(), flags)?;
    let opts = eval_options(&s, s.flag("binary")?)?;
    let emb = load(&s.path("embeddings")?, io::load_embeddings)?;
    let labels = load(&s.path("labels")?, io::load_labels)?;
    let set = EmbeddingSet::new(emb, labels)?;
    let ev = evaluate(&set, &opts, &mut SeededRng::new(s.get("seed")?))?;
    let (csv, text) = format_report(&ev, &opts.ks);
    let out = s.out_dir()?;
    s.write(&out)?;
    std::fs::write(out.join("report.csv"), csv).map_err(io_err)?;
    print!("{text}");
    Ok(())
}

fn axis_key(axis: &str) -> Result<&'static str, CliError> {
    match axis {
        "dim" => Ok("embed_dim"),
        "subsample" => Ok("subsample"),
        "samples-per-class" | "samples_per_class" => Ok("samples_per_class"),
        other => Err(CliError::input(format!(
            "axis must be dim, subsample or samples-per-class, got '{other}'"
        ))),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct SweepRow {
    value: String,
    result: Result<(Evaluation, f64), String>,
}

fn sweep_point(s: &Settings, train: &Dataset, test: &Dataset, opts: &EvalOptions) -> Result<Evaluation, CliError> {
    let setup = train_setup(s)?;
    let fitted = train_model(train, &setup)?;
    let emb = fitted.model.embed(test.features())?;
    let set = EmbeddingSet::new(emb, test.labels().to_vec())?;
    Ok(evaluate(&set, opts, &mut SeededRng::new(setup.config.seed))?)
}

pub fn sweep(common: &Common, a: SweepArgs) -> Result<(), CliError> {
    let defaults: Vec<(&str, &str)> = TRAIN_DEFAULTS.iter().chain(SWEEP_EXTRA).copied().collect();
    let mut flags = common.flags();
    flags.extend(train_flags(&a.train));
    flags.extend([
        ("axis", a.axis.clone()),
        ("values", a.values.clone()),
        ("test_per_class", str(a.test_per_class)),
        ("eval_data", path(&a.eval_data)),
        ("ks", a.ks.clone()),
    ]);
    let s = Settings::resolve("sweep", &defaults, common.config.as_deref(), flags)?;
    let key = axis_key(s.raw("axis"))?;
    let values: Vec<String> = s.list("values")?;
    if values.is_empty() {
        return Err(CliError::input("sweep needs --values"));
    }
    let opts = EvalOptions {
        ks: parse_ks(&s)?,
        with_binary: true,
        ..EvalOptions::default()
    };
    let ds = load(&s.path("data")?, io::load_dataset_csv)?;
    let (train, test) = match s.raw("eval_data") {
        "" => ds.split_per_class(s.get("test_per_class")?)?,
        p => (ds, load(Path::new(p), io::load_dataset_csv)?),
    };
    let base_seed: u64 = s.get("seed")?;
    let out = s.out_dir()?;
    s.write(&out)?;

    let rows: Vec<SweepRow> = values
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut point = s.clone();
            point.set(key, v.as_str());
            point.set("seed", derive_seed(base_seed, i as u64).to_string());
            if key == "samples_per_class" {
                point.set("batching", "balanced");
            }
            let started = Instant::now();
            let result = sweep_point(&point, &train, &test, &opts)
                .map(|ev| (ev, started.elapsed().as_secs_f64()))
                .map_err(|e| e.to_string());
            SweepRow {
                value: v.clone(),
                result,
            }
        })
        .collect();

    let mut csv = s.raw("axis").to_string();
    for k in &opts.ks {
        write!(csv, ",R@{k}").unwrap();
    }
    csv.push_str(",NMI,binary_R@1,wall_time_secs,error\n");
    for row in &rows {
        csv.push_str(&csv_field(&row.value));
        match &row.result {
            Ok((ev, secs)) => {
                for k in &opts.ks {
                    write!(csv, ",{}", ev.float.recall_at[k]).unwrap();
                }
                let b1 = ev.binary.as_ref().and_then(|b| b.recall(1));
                let b1 = b1.map_or(String::new(), |v| v.to_string());
                writeln!(csv, ",{},{b1},{secs:.3},", ev.float.nmi).unwrap();
            }
            Err(e) => {
                csv.push_str(&",".repeat(opts.ks.len() + 3));
                writeln!(csv, ",{}", csv_field(e)).unwrap();
            }
        }
    }
    std::fs::write(out.join("sweep.csv"), &csv).map_err(io_err)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(common: &Common, a: GradcheckArgs) -> Result<(), CliError> {
    let mut flags = common.flags();
    flags.extend([
        ("loss", a.loss.clone()),
        ("instances", str(a.instances)),
        ("h", str(a.h)),
    ]);
    let s = Settings::resolve("gradcheck", GRADCHECK_DEFAULTS, common.config.as_deref(), flags)?;
    let variants = Variant::matching(s.raw("loss"))
        .ok_or_else(|| CliError::input(format!("unknown loss filter '{}'", s.raw("loss"))))?;
    let options = normsoft_core::trainer::GradCheckOptions {
        h: s.get("h")?,
        negate_analytic: a.inject_sign_flip,
        ..Default::default()
    };
    let instances: usize = s.get("instances")?;
    let seed: u64 = s.get("seed")?;
    let out = s.out_dir()?;
    s.write(&out)?;

    let mut failed = 0;
    let mut worst = 0.0f64;
    for v in variants {
        for ln in [true, false] {
            let r = run_suite(v, ln, instances, seed, &options)?;
            println!("{r}");
            worst = worst.max(r.max_rel_error);
            if !r.passed() {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "gradcheck FAIL: {failed} suite(s) above tolerance, worst max_rel_err={worst:.3e}"
        )));
    }
    println!("gradcheck PASS: worst max_rel_err={worst:.3e}");
    Ok(())
}
