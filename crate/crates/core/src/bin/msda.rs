use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use msda_core::adapt::{FlaMode, OutputSpace, ScheduleConfig, TrainConfig, TrainOutcome};
use msda_core::alignment::euclidean_align;
use msda_core::divergence::{ccs_divergence, cs_divergence, DivergenceValue};
use msda_core::io;
use msda_core::kernels::{Combine, KernelConfig};
use msda_core::model::{evaluate, Metrics};
use msda_core::pipeline::{loso, prepare, run_target, summarize, train_on, PipelineConfig, TargetRun};
use msda_core::selection::{mds_coordinates, select_from_matrix, divergence_matrix, SelectionResult, SubjectEmbedding};
use msda_core::synth::{generate, ClusterSpec, StubEmbedder, SynthConfig, DEFAULT_EMBED_DIM};

#[derive(Parser)]
#[command(name = "msda", version, about = "CS-divergence multi-source domain adaptation toolkit")]
struct Cli {
    /// key=value config file; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject dataset directory with stub embeddings
    Synth(SynthArgs),
    /// Compute stub embeddings for a dataset directory
    Embed(EmbedArgs),
    /// Divergence matrix, percentile source selection and MDS coordinates
    Select(SelectArgs),
    /// Train on selected sources for one target or leave-one-subject-out
    Train(TrainArgs),
    /// Evaluate a checkpoint on a subject
    Eval(EvalArgs),
    /// CS (or conditional CS) divergence between two sample files
    Divergence(DivergenceArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    trials_per_class: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Subject clusters, e.g. `0,1,2@0;3,4,5@1.0` (0-based indices, optional shift)
    #[arg(long)]
    clusters: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Zero-pad a trailing partial embedding patch instead of dropping it
    #[arg(long)]
    zero_pad: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    zero_pad: bool,
}

#[derive(Args)]
struct KernelArgs {
    /// `multi[:scales]`, `median` or `fixed:<sigma>`
    #[arg(long)]
    kernel: Option<String>,
    /// Multi-kernel combination: average, sum or max
    #[arg(long)]
    combine: Option<String>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Embeddings CSV (defaults to the dataset's embeddings.csv)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    /// Percentile threshold in (0, 100]
    #[arg(long)]
    q: Option<f64>,
    #[command(flatten)]
    kernel: KernelArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    /// Run every subject as target
    #[arg(long)]
    loso: bool,
    /// Selection record written by `select`
    #[arg(long)]
    selection: Option<PathBuf>,
    /// Train on every non-target subject, skipping selection
    #[arg(long)]
    all_sources: bool,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Hidden widths, comma separated
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    pool: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Kernel for the output side of the conditional divergence
    #[arg(long)]
    output_kernel: Option<String>,
    /// logits or softmax
    #[arg(long)]
    output_space: Option<String>,
    /// marginal or conditional
    #[arg(long)]
    fla_mode: Option<String>,
    /// Skip Euclidean Alignment
    #[arg(long)]
    no_ea: bool,
    /// Constant learning rate instead of cosine annealing
    #[arg(long)]
    no_cosine: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    no_ea: bool,
}

#[derive(Args)]
struct DivergenceArgs {
    file_a: PathBuf,
    file_b: PathBuf,
    /// Conditional CS divergence; needs --outputs-a and --outputs-b
    #[arg(long)]
    conditional: bool,
    #[arg(long)]
    outputs_a: Option<PathBuf>,
    #[arg(long)]
    outputs_b: Option<PathBuf>,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long)]
    output_kernel: Option<String>,
}

/// Flag > config file > default resolution, remembering every resolved value.
struct Settings {
    file: BTreeMap<String, String>,
    source: Option<PathBuf>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => io::read_key_values(p)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            source: path.map(Path::to_path_buf),
            used: BTreeSet::new(),
            resolved: BTreeMap::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key '{key}': cannot parse '{v}': {e}")),
        }
    }

    fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file);
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| anyhow!("missing required setting '{key}' (flag --{} or config key)", key.replace('_', "-")))
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.file_value::<bool>(key)?.unwrap_or(false);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn kernel(&mut self, key: &str, args_kernel: Option<String>, combine_key: &str, combine: Option<String>) -> Result<KernelConfig> {
        let mut k: KernelConfig = self.value(key, args_kernel, "multi".to_string())?.parse()?;
        let c: Combine = self.value(combine_key, combine, "average".to_string())?.parse()?;
        k.combine = c;
        self.resolved.insert(key.to_string(), k.to_string());
        Ok(k)
    }

    /// Rejects config keys no setting asked for.
    fn check_unused(&self) -> Result<()> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            let path = self.source.as_deref().map_or(String::new(), |p| p.display().to_string());
            bail!("unknown config keys in {path}: {unknown:?}");
        }
        Ok(())
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        io::write_key_values(&dir.join("config.txt"), &self.resolved)?;
        Ok(())
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = s.value("seed", cli.seed, 0u64)?;
    let out = s.optional("out", cli.out.map(|p| p.display().to_string()))?.map(PathBuf::from);
    match cli.command {
        Command::Synth(a) => cmd_synth(&mut s, a, seed, out),
        Command::Embed(a) => cmd_embed(&mut s, a, seed, out),
        Command::Select(a) => cmd_select(&mut s, a, out),
        Command::Train(a) => cmd_train(&mut s, a, seed, out),
        Command::Eval(a) => cmd_eval(&mut s, a, out),
        Command::Divergence(a) => cmd_divergence(&mut s, a, out),
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| anyhow!("no output directory: pass --out or set out= in the config"))
}

fn parse_clusters(text: &str) -> Result<Vec<ClusterSpec>> {
    text.split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            let (members, shift) = match c.split_once('@') {
                Some((m, s)) => (m, Some(s.trim().parse::<f64>().with_context(|| format!("cluster shift '{s}'"))?)),
                None => (c, None),
            };
            let members = members
                .split(',')
                .map(|m| m.trim().parse::<usize>().with_context(|| format!("cluster member '{m}'")))
                .collect::<Result<Vec<_>>>()?;
            Ok(ClusterSpec { members, shift })
        })
        .collect()
}

fn cmd_synth(s: &mut Settings, a: SynthArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let d = SynthConfig::default();
    let clusters = s.optional("clusters", a.clusters)?;
    let cfg = SynthConfig {
        n_subjects: s.value("subjects", a.subjects, d.n_subjects)?,
        trials_per_class: s.value("trials_per_class", a.trials_per_class, d.trials_per_class)?,
        channels: s.value("channels", a.channels, d.channels)?,
        samples: s.value("samples", a.samples, d.samples)?,
        n_classes: s.value("classes", a.classes, d.n_classes)?,
        class_separation: s.value("separation", a.separation, d.class_separation)?,
        subject_shift: s.value("shift", a.shift, d.subject_shift)?,
        clusters: clusters.as_deref().map(parse_clusters).transpose()?,
        cluster_jitter: s.value("jitter", a.jitter, d.cluster_jitter)?,
        noise_std: s.value("noise", a.noise, d.noise_std)?,
        sample_rate: s.value("sample_rate", a.sample_rate, d.sample_rate)?,
        seed,
    };
    let embed_dim = s.value("embed_dim", a.embed_dim, DEFAULT_EMBED_DIM)?;
    let zero_pad = s.switch("zero_pad", a.zero_pad)?;
    s.check_unused()?;
    cfg.validate()?;
    let out = require_out(out)?;

    let datasets = generate(&cfg)?;
    let mut embedder = StubEmbedder::new(cfg.channels, embed_dim, seed)?;
    embedder.zero_pad = zero_pad;
    let embeddings = datasets.iter().map(|d| embedder.embed(d)).collect::<msda_core::Result<Vec<_>>>()?;
    io::write_dataset_dir(&out, &datasets, cfg.sample_rate, Some(&embeddings))?;
    s.echo(&out)?;

    println!("{:<8} {:>7} {:>10} {:>12}", "subject", "trials", "per-class", "rms");
    for ds in &datasets {
        let counts: Vec<String> = (0..ds.n_classes)
            .map(|k| ds.trials.iter().filter(|t| t.label == Some(k)).count().to_string())
            .collect();
        let (sum, n) = ds.trials.iter().fold((0.0, 0usize), |(acc, n), t| {
            (acc + t.signal.data().iter().map(|v| v * v).sum::<f64>(), n + t.signal.data().len())
        });
        println!("{:<8} {:>7} {:>10} {:>12.4}", ds.subject_id, ds.len(), counts.join("/"), (sum / n as f64).sqrt());
    }
    println!("wrote {} subjects to {}", datasets.len(), out.display());
    Ok(())
}

fn cmd_embed(s: &mut Settings, a: EmbedArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let data = PathBuf::from(s.required("data", a.data.map(|p| p.display().to_string()))?);
    let dim = s.value("embed_dim", a.embed_dim, DEFAULT_EMBED_DIM)?;
    let zero_pad = s.switch("zero_pad", a.zero_pad)?;
    s.check_unused()?;
    let (manifest, datasets) = io::read_dataset_dir(&data)?;
    let mut embedder = StubEmbedder::new(manifest.channels, dim, seed)?;
    embedder.zero_pad = zero_pad;
    let embeddings = datasets.iter().map(|d| embedder.embed(d)).collect::<msda_core::Result<Vec<_>>>()?;
    let out = out.unwrap_or(data);
    io::write_embeddings_csv(&out.join(io::EMBEDDINGS_FILE), &embeddings)?;
    s.echo(&out)?;
    println!("embedded {} subjects (d_e = {dim}) into {}", embeddings.len(), out.display());
    Ok(())
}

fn load_embeddings(path: &Path, subjects: &[String]) -> Result<Vec<SubjectEmbedding>> {
    let emb = io::read_embeddings_csv(path)?;
    for id in subjects {
        if !emb.iter().any(|e| &e.subject_id == id) {
            bail!("subject {id} has no embedding rows in {}", path.display());
        }
    }
    // keep manifest order
    Ok(subjects
        .iter()
        .map(|id| emb.iter().find(|e| &e.subject_id == id).cloned().expect("checked"))
        .collect())
}

fn cmd_select(s: &mut Settings, a: SelectArgs, out: Option<PathBuf>) -> Result<()> {
    let data = PathBuf::from(s.required("data", a.data.map(|p| p.display().to_string()))?);
    let emb_path = s
        .optional("embeddings", a.embeddings.map(|p| p.display().to_string()))?
        .map_or_else(|| data.join(io::EMBEDDINGS_FILE), PathBuf::from);
    let target: String = s.required("target", a.target)?;
    let q = s.value("q", a.q, 50.0)?;
    let kcfg = s.kernel("kernel", a.kernel.kernel, "combine", a.kernel.combine)?;
    s.check_unused()?;
    let out = require_out(out)?;

    let manifest = io::Manifest::read(&data.join(io::MANIFEST_FILE))?;
    let embeddings = load_embeddings(&emb_path, &manifest.subjects)?;
    let matrix = divergence_matrix(&embeddings, &kcfg)?;
    let mds = mds_coordinates(&matrix, 2)?;
    let ids = manifest.subjects.clone();
    let selection = select_from_matrix(ids.clone(), matrix.clone(), &target, q)?;

    io::write_divergence_matrix(&out.join("divergence_matrix.csv"), &ids, &matrix)?;
    io::write_mds_csv(&out.join("mds.csv"), &ids, &mds)?;
    write_json(&out.join("selection.json"), &selection)?;
    s.echo(&out)?;
    println!(
        "target {target}: delta = {} (q = {q}), selected {} of {}: {}{}",
        io::fmt_f64(selection.delta),
        selection.selected.len(),
        selection.sources.len(),
        selection.selected.join(", "),
        if selection.fallback_used { " (nearest-source fallback)" } else { "" }
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    io::write_text(path, &(text + "\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct WeightSummary {
    source: String,
    first: f64,
    last: f64,
    mean: f64,
}

#[derive(Serialize)]
struct Report<'a> {
    target: &'a str,
    seed: u64,
    sources: &'a [String],
    selection: Option<&'a SelectionResult>,
    metrics: Option<&'a Metrics>,
    final_losses: Option<&'a msda_core::adapt::LossBreakdown>,
    weights: Vec<WeightSummary>,
    mean_epoch_ms: f64,
    config: &'a BTreeMap<String, String>,
}

fn weight_summary(outcome: &TrainOutcome) -> Vec<WeightSummary> {
    let n = outcome.log.len().max(1) as f64;
    outcome
        .source_ids
        .iter()
        .enumerate()
        .map(|(i, id)| WeightSummary {
            source: id.clone(),
            first: outcome.log.first().map_or(f64::NAN, |e| e.weights[i]),
            last: outcome.log.last().map_or(f64::NAN, |e| e.weights[i]),
            mean: outcome.log.iter().map(|e| e.weights[i]).sum::<f64>() / n,
        })
        .collect()
}

fn write_run(dir: &Path, run: &TargetRun, seed: u64, config: &BTreeMap<String, String>) -> Result<()> {
    let o = &run.outcome;
    io::write_train_log(&dir.join("train_log.csv"), &o.log)?;
    io::write_timing(&dir.join("timing.csv"), &o.log)?;
    io::save_checkpoint(&dir.join("model.ckpt"), &o.backbone)?;
    let report = Report {
        target: &run.target,
        seed,
        sources: &o.source_ids,
        selection: run.selection.as_ref(),
        metrics: o.target_metrics.as_ref(),
        final_losses: o.log.last().map(|e| &e.losses),
        weights: weight_summary(o),
        mean_epoch_ms: o.mean_epoch_ms(),
        config,
    };
    write_json(&dir.join("report.json"), &report)
}

fn print_metrics(target: &str, m: Option<&Metrics>) {
    match m {
        Some(m) => println!("{target}: accuracy {:.4}, kappa {:.4}", m.accuracy, m.kappa),
        None => println!("{target}: trained (no evaluation labels)"),
    }
}

fn cmd_train(s: &mut Settings, a: TrainArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let data = PathBuf::from(s.required("data", a.data.map(|p| p.display().to_string()))?);
    let loso_mode = s.switch("loso", a.loso)?;
    let target: Option<String> = s.optional("target", a.target)?;
    let selection_path = s.optional("selection", a.selection.map(|p| p.display().to_string()))?;
    let all_sources = s.switch("all_sources", a.all_sources)?;
    let emb_path = s
        .optional("embeddings", a.embeddings.map(|p| p.display().to_string()))?
        .map_or_else(|| data.join(io::EMBEDDINGS_FILE), PathBuf::from);
    let q = s.value("q", a.q, 50.0)?;
    let ds = ScheduleConfig::default();
    let dt = TrainConfig::default();
    let schedule = ScheduleConfig {
        alpha: s.value("alpha", a.alpha, ds.alpha)?,
        beta: s.value("beta", a.beta, ds.beta)?,
        offset: s.value("tau0", a.tau0, ds.offset)?,
        epochs: s.value("epochs", a.epochs, ds.epochs)?,
    };
    let hidden_default = dt.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let hidden = s
        .value("hidden", a.hidden, hidden_default)?
        .split(',')
        .filter(|w| !w.trim().is_empty())
        .map(|w| w.trim().parse::<usize>().with_context(|| format!("hidden width '{w}'")))
        .collect::<Result<Vec<_>>>()?;
    let kernel_feat = s.kernel("kernel", a.kernel.kernel, "combine", a.kernel.combine)?;
    let mut kernel_out: KernelConfig = s.value("output_kernel", a.output_kernel, "multi".to_string())?.parse()?;
    kernel_out.combine = kernel_feat.combine;
    let train = TrainConfig {
        schedule,
        lr: s.value("lr", a.lr, dt.lr)?,
        batch_size: s.value("batch", a.batch, dt.batch_size)?,
        feature_dim: s.value("feature_dim", a.feature_dim, dt.feature_dim)?,
        hidden,
        pool: s.value("pool", a.pool, dt.pool)?,
        kernel_feat: kernel_feat.clone(),
        kernel_out,
        losses: msda_core::adapt::LossOptions {
            output_space: s.value("output_space", a.output_space.map(|v| v.parse()).transpose()?, OutputSpace::Logits)?,
            fla_mode: s.value("fla_mode", a.fla_mode.map(|v| v.parse()).transpose()?, FlaMode::Marginal)?,
        },
        cosine: !s.switch("no_cosine", a.no_cosine)?,
        seed,
    };
    let ea = !s.switch("no_ea", a.no_ea)?;
    s.check_unused()?;
    train.validate()?;
    let out = require_out(out)?;

    let (manifest, datasets) = io::read_dataset_dir(&data)?;
    let pipeline = PipelineConfig {
        q,
        all_sources,
        euclidean_alignment: ea,
        selection_kernel: kernel_feat,
        train,
    };
    let embeddings = if all_sources {
        None
    } else if loso_mode || selection_path.is_none() {
        if !loso_mode {
            bail!("no selection record: run `select` and pass --selection, or use --all-sources");
        }
        Some(load_embeddings(&emb_path, &manifest.subjects)?)
    } else {
        None
    };

    if loso_mode {
        if target.is_some() {
            bail!("--target and --loso are mutually exclusive");
        }
        let runs = loso(&datasets, embeddings.as_deref(), &pipeline)?;
        s.echo(&out)?;
        let mut table = String::from("target,accuracy,kappa,n_sources\n");
        for run in &runs {
            let dir = out.join(&run.target);
            write_run(&dir, run, seed, &s.resolved)?;
            let m = run.outcome.target_metrics.as_ref();
            table.push_str(&format!(
                "{},{},{},{}\n",
                run.target,
                m.map_or(String::new(), |m| io::fmt_f64(m.accuracy)),
                m.map_or(String::new(), |m| io::fmt_f64(m.kappa)),
                run.outcome.source_ids.len()
            ));
            print_metrics(&run.target, m);
        }
        io::write_text(&out.join("results.csv"), &table)?;
        if let Ok(summary) = summarize(&runs) {
            write_json(&out.join("summary.json"), &summary)?;
            println!(
                "mean accuracy {:.2} ± {:.2}, kappa {:.3} ± {:.3}",
                100.0 * summary.accuracy.mean,
                100.0 * summary.accuracy.std,
                summary.kappa.mean,
                summary.kappa.std
            );
        }
        return Ok(());
    }

    let target = target.ok_or_else(|| anyhow!("pass --target or --loso"))?;
    let run = if all_sources {
        let prepared = prepare(&datasets, ea)?;
        run_target(&prepared, None, &target, &pipeline)?
    } else {
        let path = PathBuf::from(selection_path.expect("checked above"));
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let selection: SelectionResult =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if selection.target != target {
            bail!("selection record {} is for target {}, not {target}", path.display(), selection.target);
        }
        let prepared = prepare(&datasets, ea)?;
        let outcome = train_on(&prepared, &selection.selected, &target, &pipeline.train)?;
        TargetRun {
            target: target.clone(),
            selection: Some(selection),
            outcome,
        }
    };
    s.echo(&out)?;
    write_run(&out, &run, seed, &s.resolved)?;
    print_metrics(&target, run.outcome.target_metrics.as_ref());
    Ok(())
}

fn cmd_eval(s: &mut Settings, a: EvalArgs, out: Option<PathBuf>) -> Result<()> {
    let data = PathBuf::from(s.required("data", a.data.map(|p| p.display().to_string()))?);
    let target: String = s.required("target", a.target)?;
    let ckpt = s
        .optional("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?
        .map(PathBuf::from)
        .or_else(|| out.as_ref().map(|o| o.join("model.ckpt")))
        .ok_or_else(|| anyhow!("pass --checkpoint or --out containing model.ckpt"))?;
    let ea = !s.switch("no_ea", a.no_ea)?;
    s.check_unused()?;
    let manifest = io::Manifest::read(&data.join(io::MANIFEST_FILE))?;
    if !manifest.subjects.contains(&target) {
        bail!("unknown subject {target}");
    }
    let ds = io::read_subject_csv(
        &io::subject_path(&data, &target),
        &target,
        manifest.channels,
        manifest.samples,
        manifest.n_classes,
    )?;
    let ds = if ea { euclidean_align(&ds)? } else { ds };
    let backbone = io::load_checkpoint(&ckpt)?;
    let metrics = evaluate(&ds, &backbone)?;
    print_metrics(&target, Some(&metrics));
    if let Some(out) = out {
        write_json(&out.join("eval.json"), &metrics)?;
        s.echo(&out)?;
    }
    Ok(())
}

fn print_divergence(v: &DivergenceValue) {
    let sigmas = |s: &[f64]| s.iter().map(|v| io::fmt_f64(*v)).collect::<Vec<_>>().join(",");
    println!("value: {}", io::fmt_f64(v.value));
    println!("raw: {}", io::fmt_f64(v.raw));
    println!("bandwidths: {}", sigmas(&v.bandwidths));
    if !v.output_bandwidths.is_empty() {
        println!("output_bandwidths: {}", sigmas(&v.output_bandwidths));
    }
    let (lo, hi) = (v.n_source.min(v.n_target), v.n_source.max(v.n_target));
    println!("samples: {lo} {hi}");
    if v.negative {
        println!("warning: negative raw estimate clamped to zero");
    }
}

fn cmd_divergence(s: &mut Settings, a: DivergenceArgs, out: Option<PathBuf>) -> Result<()> {
    let kcfg = s.kernel("kernel", a.kernel.kernel, "combine", a.kernel.combine)?;
    let conditional = s.switch("conditional", a.conditional)?;
    let mut kout: KernelConfig = s.value("output_kernel", a.output_kernel, "multi".to_string())?.parse()?;
    kout.combine = kcfg.combine;
    s.check_unused()?;
    let za = io::read_samples_csv(&a.file_a)?;
    let zb = io::read_samples_csv(&a.file_b)?;
    let value = if conditional {
        let (ya, yb) = match (&a.outputs_a, &a.outputs_b) {
            (Some(ya), Some(yb)) => (io::read_samples_csv(ya)?, io::read_samples_csv(yb)?),
            _ => bail!("--conditional needs --outputs-a and --outputs-b"),
        };
        ccs_divergence(&za, &ya, &zb, &yb, &kcfg, &kout)?
    } else {
        cs_divergence(&za, &zb, &kcfg)?
    };
    print_divergence(&value);
    if let Some(out) = out {
        write_json(&out.join("divergence.json"), &value)?;
        s.echo(&out)?;
    }
    Ok(())
}
