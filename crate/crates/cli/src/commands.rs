use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;
use serde_json::{json, Value};
use stylerecal::analysis::{correlation_matrix, layer_summary_csv, prune_curve, prune_curve_csv, sum_squared_corr, top_k_overlap};
use stylerecal::complexity::analyze;
use stylerecal::container::Container;
use stylerecal::data::{load_cifar10, synth_style, AugmentPolicy, Dataset, Split, SynthStyleSpec};
use stylerecal::models::{ArchitectureConfig, ResNet, StemKind};
use stylerecal::params::Mode;
use stylerecal::recalib::RecalibVariant;
use stylerecal::tensor::DType;
use stylerecal::train::{checkpoint_dtype, evaluate, metrics_csv, Checkpoint, TrainConfig, Trainer};
use stylerecal::{gradcheck, Element};

use crate::{AnalyzeArgs, ArchArgs, Augment, Cli, Command, ComplexityArgs, DataArgs, EvalArgs, GradcheckArgs, Precision, PruneArgs, SynthArgs, TrainArgs};

/// Usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<stylerecal::Error> for Failure {
    fn from(e: stylerecal::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Resolved configuration written next to a command's outputs.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    version: &'static str,
    argv: Vec<String>,
    seed: Option<u64>,
    threads: u32,
    config: Value,
    outputs: Vec<String>,
}

struct Run<'a> {
    cli: &'a Cli,
    out: Option<PathBuf>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(cli: &'a Cli, out: Option<&Path>) -> Outcome<Self> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        }
        Ok(Self {
            cli,
            out: out.map(Path::to_path_buf),
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Outcome<()> {
        if let Some(dir) = &self.out {
            fs::write(dir.join(name), bytes)?;
            self.outputs.push(name.to_string());
        }
        Ok(())
    }

    fn path(&mut self, name: &str) -> Option<PathBuf> {
        let p = self.out.as_ref()?.join(name);
        self.outputs.push(name.to_string());
        Some(p)
    }

    fn finish(mut self, command: &'static str, seed: Option<u64>, config: Value) -> Outcome<()> {
        if self.out.is_none() {
            return Ok(());
        }
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().skip(1).collect(),
            seed,
            threads: self.cli.threads,
            config,
            outputs: std::mem::take(&mut self.outputs),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        self.write("manifest.json", text)
    }
}

pub fn dispatch(cli: &Cli) -> Outcome<ExitCode> {
    if cli.threads > 1 {
        log::info!("--threads {} requested; computation runs on one thread", cli.threads);
    }
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Prune(a) => prune(cli, a),
        Command::Analyze(a) => analyze_cmd(cli, a),
        Command::Complexity(a) => complexity(cli, a),
        Command::Gradcheck(a) => grad_check(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

fn read_text(path: &Path, what: &str) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn resolve_arch(args: &ArchArgs, num_classes: Option<usize>) -> Outcome<ArchitectureConfig> {
    let classes = num_classes.unwrap_or(10);
    let mut cfg = match args.arch.as_str() {
        "resnet20" => ArchitectureConfig::resnet20(classes),
        "resnet32" => ArchitectureConfig::resnet32(classes),
        "resnet56" => ArchitectureConfig::resnet56(classes),
        "resnet50" => ArchitectureConfig::resnet50(num_classes.unwrap_or(1000)),
        "cifar-bottleneck" => ArchitectureConfig::cifar_bottleneck(classes),
        path => {
            let text = read_text(Path::new(path), "architecture")?;
            let mut cfg = ArchitectureConfig::from_json(&text).map_err(|e| usage(format!("architecture {path}: {e}")))?;
            if let Some(k) = num_classes {
                cfg.num_classes = k;
            }
            cfg
        }
    };
    if let Some(r) = &args.recalib {
        cfg.recalib = match r.as_str() {
            "none" => None,
            spec => Some(spec.parse::<RecalibVariant>().map_err(|e| usage(format!("--recalib: {e}")))?),
        };
    }
    cfg.validate().map_err(|e| usage(format!("architecture: {e}")))?;
    Ok(cfg)
}

fn load_split(args: &DataArgs, split: Split) -> Outcome<Dataset> {
    let path = args
        .data
        .as_ref()
        .ok_or_else(|| usage("no dataset: pass --data or set STYLE_RECAL_DATA"))?;
    if !path.exists() {
        return Err(usage(format!("dataset path {} does not exist", path.display())));
    }
    let name = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let ds = if path.is_file() {
        Dataset::load(path)?
    } else if path.join(name).is_file() {
        Dataset::load(path.join(name))?
    } else {
        load_cifar10(path, split)?
    };
    Ok(match args.limit {
        Some(n) => ds.take(n)?,
        None => ds,
    })
}

fn load_checkpoint_container(path: &Path) -> Outcome<Container> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Container::read(path)?.expect_kind("checkpoint")?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome<ExitCode> {
    let data = load_split(&a.data, Split::Train)?;
    match (&a.resume, a.precision) {
        (Some(p), _) => match checkpoint_dtype(&load_checkpoint_container(p)?)? {
            DType::F64 => train_typed::<f64>(cli, a, &data),
            _ => train_typed::<f32>(cli, a, &data),
        },
        (None, Precision::F32) => train_typed::<f32>(cli, a, &data),
        (None, Precision::F64) => train_typed::<f64>(cli, a, &data),
    }
}

fn train_config(a: &TrainArgs, base: TrainConfig, data_len: usize) -> Outcome<TrainConfig> {
    let mut cfg = base;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        let initial = cfg.schedule.initial();
        cfg.schedule = if initial > 0.0 {
            cfg.schedule.scaled(lr / initial)
        } else {
            stylerecal::train::Schedule::constant(lr)
        };
    }
    if let Some(aug) = a.augment {
        cfg.augment = match aug {
            Augment::None => AugmentPolicy::None,
            Augment::PadCropFlip => AugmentPolicy::PadCropFlip { pad: 4 },
        };
    }
    if let Some(l) = a.log_every {
        cfg.log_every = l;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(e) = a.epochs {
        cfg.steps = e * data_len.div_ceil(cfg.batch_size.max(1)) as u64;
    }
    cfg.validate().map_err(|e| usage(format!("training configuration: {e}")))?;
    Ok(cfg)
}

fn train_typed<T: Element>(cli: &Cli, a: &TrainArgs, data: &Dataset) -> Outcome<ExitCode> {
    let mut run = Run::new(cli, Some(&a.out))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::<T>::from_container(&load_checkpoint_container(p)?)?;
            let cfg = train_config(a, ckpt.train.clone(), data.len())?;
            Trainer::from_checkpoint(&ckpt, cfg)?
        }
        None => {
            let base = match &a.config {
                Some(p) => TrainConfig::from_json(&read_text(p, "training configuration")?)
                    .map_err(|e| usage(format!("training configuration {}: {e}", p.display())))?,
                None => TrainConfig::default(),
            };
            let cfg = train_config(a, base, data.len())?;
            let arch = resolve_arch(&a.arch, Some(data.num_classes))?;
            let model = ResNet::<T>::build(&arch, cfg.seed)?;
            Trainer::new(model, cfg)?
        }
    };
    log::info!(
        "training {} steps from step {} on {} examples",
        trainer.config.steps,
        trainer.step,
        data.len()
    );
    let mut logged = trainer.history.len();
    let mut halted = None;
    while trainer.step < trainer.config.steps {
        match trainer.train_step(data) {
            Ok(_) => {}
            Err(stylerecal::Error::NonFinite(what)) => {
                log::error!("halting: non-finite {what}");
                halted = Some(what);
                break;
            }
            Err(e) => return Err(e.into()),
        }
        for row in &trainer.history[logged..] {
            log::info!("step {} lr {} loss {:.4} top1 {:.4}", row.step, row.lr, row.loss, row.top1);
        }
        logged = trainer.history.len();
    }
    let ckpt = trainer.checkpoint()?;
    if let Some(p) = run.path("checkpoint.bin") {
        ckpt.save(p)?;
    }
    run.write("metrics.csv", metrics_csv(&trainer.history))?;
    let mut config = json!({
        "arch": ckpt.arch,
        "train": ckpt.train,
        "config_hash": ckpt.config_hash,
        "precision": format!("{:?}", T::DTYPE).to_lowercase(),
        "examples": data.len(),
        "steps_done": trainer.step,
    });
    if let Some(h) = &halted {
        config["halted"] = json!(h);
    }
    run.finish("train", Some(trainer.config.seed), config)?;
    Ok(if halted.is_some() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn with_checkpoint<R>(
    path: &Path,
    f32_fn: impl FnOnce(ResNet<f32>) -> Outcome<R>,
    f64_fn: impl FnOnce(ResNet<f64>) -> Outcome<R>,
) -> Outcome<R> {
    let c = load_checkpoint_container(path)?;
    match checkpoint_dtype(&c)? {
        DType::F64 => f64_fn(Checkpoint::<f64>::from_container(&c)?.model()?),
        _ => f32_fn(Checkpoint::<f32>::from_container(&c)?.model()?),
    }
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome<ExitCode> {
    let data = load_split(&a.data, Split::Test)?;
    fn go<T: Element>(mut m: ResNet<T>, data: &Dataset, a: &EvalArgs) -> Outcome<stylerecal::train::EvalResult> {
        let mode = if a.folded {
            m.fold_bn()?;
            Mode::Folded
        } else {
            Mode::Eval
        };
        Ok(evaluate(&m, data, mode, a.batch)?)
    }
    let r = with_checkpoint(&a.ckpt, |m| go(m, &data, a), |m| go(m, &data, a))?;
    let report = json!({"examples": data.len(), "loss": r.loss, "top1": r.top1, "folded": a.folded});
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    let mut run = Run::new(cli, a.out.as_deref())?;
    run.write("eval.json", &text)?;
    run.finish("eval", None, json!({"ckpt": a.ckpt, "data": a.data.data, "limit": a.data.limit, "batch": a.batch}))?;
    Ok(ExitCode::SUCCESS)
}

fn prune(cli: &Cli, a: &PruneArgs) -> Outcome<ExitCode> {
    if let Some(r) = a.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(usage(format!("--ratios: {r} outside [0, 1]")));
    }
    let data = load_split(&a.data, Split::Test)?;
    fn go<T: Element>(m: ResNet<T>, data: &Dataset, a: &PruneArgs) -> Outcome<Vec<(f64, f64)>> {
        if a.stage == 0 || a.stage > m.config.stages.len() {
            return Err(usage(format!("--stage {} outside 1..={}", a.stage, m.config.stages.len())));
        }
        Ok(prune_curve(&m, data, a.stage, &a.ratios, a.batch)?)
    }
    let rows = with_checkpoint(&a.ckpt, |m| go(m, &data, a), |m| go(m, &data, a))?;
    let csv = prune_curve_csv(&rows);
    print!("{csv}");
    let mut run = Run::new(cli, a.out.as_deref())?;
    run.write("prune.csv", &csv)?;
    run.finish(
        "prune",
        None,
        json!({"ckpt": a.ckpt, "data": a.data.data, "limit": a.data.limit, "stage": a.stage, "ratios": a.ratios}),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn analyze_cmd(cli: &Cli, a: &AnalyzeArgs) -> Outcome<ExitCode> {
    let data = load_split(&a.data, Split::Test)?;
    fn go<T: Element>(m: ResNet<T>, data: &Dataset, batch: usize) -> Outcome<stylerecal::analysis::AnalysisRecord> {
        if !m.has_recalib() {
            return Err(usage("checkpoint has no recalibration layers to analyze"));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut record: Option<stylerecal::analysis::AnalysisRecord> = None;
        for chunk in idx.chunks(batch.max(1)) {
            let (x, _) = data.batch::<T>(chunk)?;
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let (_, r) = m.forward_with_capture(&x, Mode::Eval, &ids)?;
            match &mut record {
                Some(acc) => acc.append(r)?,
                None => record = Some(r),
            }
        }
        record.ok_or_else(|| usage("empty dataset"))
    }
    let record = with_checkpoint(&a.ckpt, |m| go(m, &data, a.batch), |m| go(m, &data, a.batch))?;
    let mut run = Run::new(cli, Some(&a.out))?;
    if let Some(p) = run.path("gates.bin") {
        record.save(p)?;
    }
    let mut layers = Vec::new();
    for &key in record.layers.keys() {
        let m = correlation_matrix(&record, key)?;
        run.write(&format!("corr_{key}.csv"), m.to_csv())?;
        let sq: f64 = m.values.iter().map(|v| v * v).sum();
        let overlap = top_k_overlap(&record, key, a.top_k.min(record.len()))?;
        layers.push(json!({"layer": key.to_string(), "sum_squared_corr": sq, "top_k_overlap": overlap}));
    }
    run.write("layers.csv", layer_summary_csv(&record)?)?;
    let total = sum_squared_corr(&record)?;
    let report = json!({"images": record.len(), "sum_squared_corr": total, "top_k": a.top_k, "layers": layers});
    let text = serde_json::to_string_pretty(&report)? + "\n";
    run.write("analysis.json", &text)?;
    println!("sum_squared_corr {total}");
    run.finish(
        "analyze",
        None,
        json!({"ckpt": a.ckpt, "data": a.data.data, "limit": a.data.limit, "top_k": a.top_k}),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn complexity(cli: &Cli, a: &ComplexityArgs) -> Outcome<ExitCode> {
    let cfg = resolve_arch(&a.arch, None)?;
    let input = match &a.input {
        Some(v) => [v[0], v[1], v[2]],
        None if cfg.stem.kind == StemKind::Imagenet => [cfg.in_channels, 224, 224],
        None => [cfg.in_channels, 32, 32],
    };
    let report = analyze(&cfg, input, a.running_stats).map_err(|e| usage(format!("complexity: {e}")))?;
    let json = report.to_json()? + "\n";
    if a.table {
        print!("{}", report.to_table());
    } else {
        print!("{json}");
    }
    let mut run = Run::new(cli, a.out.as_deref())?;
    run.write("complexity.json", &json)?;
    run.finish("complexity", None, json!({"arch": cfg, "input": input, "running_stats": a.running_stats}))?;
    Ok(ExitCode::SUCCESS)
}

fn grad_check(cli: &Cli, a: &GradcheckArgs) -> Outcome<ExitCode> {
    let entries = gradcheck::suite(a.seed)?;
    let mut lines = String::from("check,max_rel_error,checked\n");
    let mut worst = 0.0f64;
    for e in &entries {
        println!("{:<32} {:>10.3e}  ({} elements)", e.name, e.report.max_rel_error, e.report.checked);
        lines.push_str(&format!("{},{},{}\n", e.name, e.report.max_rel_error, e.report.checked));
        worst = worst.max(e.report.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    let mut run = Run::new(cli, a.out.as_deref())?;
    run.write("gradcheck.csv", &lines)?;
    run.finish("gradcheck", Some(a.seed), json!({"tol": a.tol, "eps": gradcheck::SUITE_EPS}))?;
    Ok(if worst < a.tol { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn synth(cli: &Cli, a: &SynthArgs) -> Outcome<ExitCode> {
    let train_spec = SynthStyleSpec::grid(a.classes, a.per_class, a.size, a.seed);
    train_spec.validate().map_err(|e| usage(format!("synth: {e}")))?;
    let mut test_spec = SynthStyleSpec::grid(a.classes, a.test_per_class, a.size, a.seed);
    test_spec = test_spec.with_split(Split::Test, a.seed ^ 0x7E57);
    let mut run = Run::new(cli, Some(&a.out))?;
    for (name, spec) in [("train.bin", &train_spec), ("test.bin", &test_spec)] {
        let ds = synth_style(spec)?;
        if let Some(p) = run.path(name) {
            ds.save(p)?;
        }
        println!("{name}: {} images of {:?}", ds.len(), ds.image_shape());
    }
    run.finish("synth", Some(a.seed), json!({"train": train_spec, "test": test_spec}))?;
    Ok(ExitCode::SUCCESS)
}
