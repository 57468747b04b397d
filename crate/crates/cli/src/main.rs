use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dr2n_core::relational::{to_dot, top_k};
use dr2n_core::synthworld::{read_jsonl, write_jsonl};
use dr2n_core::traineval::ablation::eval_set;
use dr2n_core::traineval::trainer::train_seed;
use dr2n_core::traineval::{evaluate, report_from_predictions, run_ablation, DataSource, Trainer};
use dr2n_core::{
    AttentionRecord, Checkpoint, Episode, Error, Model, Prediction, Result, RunConfig, Variant, World, WorldMode,
};

#[derive(Parser)]
#[command(
    name = "dr2n",
    version,
    about = "Relational recurrent action forecasting on a synthetic multi-agent world"
)]
struct Cli {
    /// Worker threads for ablation runs.
    #[arg(long, global = true, env = "DR2N_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Clip,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete TOML config.
    Config {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
    /// Write a JSONL dataset of synthetic episodes.
    Generate {
        /// TOML run config (built-in defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint.json and loss.csv under --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSONL dataset; episodes are generated on the fly when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Stop after this many steps (default: the full schedule).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.csv and report.json under --out.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL dataset; the held-out set of the config's world when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Forecast steps to report mAP for (default: 0..=T, multi-actor worlds).
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<usize>>,
        /// Observed percentages for accuracy@K (default from config, clip worlds).
        #[arg(long = "k-percent", value_delimiter = ',')]
        k_percent: Option<Vec<f64>>,
        /// Also write predictions.jsonl.
        #[arg(long)]
        save_predictions: bool,
        /// Score saved predictions instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every variant over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export the top-k attention edges of one node as JSON and DOT.
    Attn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Episode index in the dataset or held-out set.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        node: usize,
        #[arg(long = "top-k", default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Label { .. } | Error::NoAttention(_) => 2,
        Error::Io { .. } | Error::Json(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn warn_hash(what: &str, found: Option<&str>, expected: &str) {
    if let Some(found) = found {
        if found != expected {
            eprintln!("warning: {what} was produced with config hash {found}, current config hash is {expected}");
        }
    }
}

fn load_episodes(data: Option<&Path>, cfg: &RunConfig, hash: &str) -> Result<Vec<Episode>> {
    match data {
        Some(p) => {
            let eps = read_jsonl(p, Some(cfg.world.num_classes))?;
            if let Some(first) = eps.first() {
                warn_hash("dataset", first.config_hash.as_deref(), hash);
            }
            Ok(eps)
        }
        None => Ok(eval_set(&World::new(cfg.world.clone())?, cfg.eval.episodes)),
    }
}

fn cmd_generate(config: Option<&Path>, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let hash = cfg.hash();
    let world = World::new(cfg.world.clone())?;
    let episodes: Vec<Episode> = (0..count as u64)
        .map(|i| {
            let mut ep = world.generate(train_seed(cfg.seed, i));
            ep.config_hash = Some(hash.clone());
            ep
        })
        .collect();
    write_jsonl(out, &episodes)?;
    println!("wrote {count} episodes to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    variant: Option<Variant>,
    steps: Option<usize>,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // The stopping step is not part of the run identity.
    let hash = cfg.hash();
    if steps.is_some() {
        cfg.train.steps = steps;
    }
    let source = match data {
        Some(p) => DataSource::Episodes(load_episodes(Some(p), &cfg, &hash)?),
        None => DataSource::World(World::new(cfg.world.clone())?),
    };
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            warn_hash("checkpoint", ck.config_hash.as_deref(), &hash);
            Trainer::resume(&ck, cfg.schedule.clone(), cfg.train.clone(), source)?
        }
        None => Trainer::new(
            Model::new(cfg.model.clone(), cfg.seed)?,
            cfg.schedule.clone(),
            cfg.train.clone(),
            cfg.seed,
            source,
        )?,
    };
    ensure_dir(out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;

    let log_path = out.join("loss.csv");
    let append = resume.is_some() && log_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(&log_path, std::io::Error::other(e));
    if !append {
        let mut header = vec!["step".to_string(), "lr".into(), "loss".into(), "loc".into()];
        header.extend((0..=cfg.model.horizon).map(|t| format!("cls_t{t}")));
        log.write_record(&header).map_err(csv_err)?;
    }
    let mut failed = None;
    let result = trainer.run(|l| {
        if failed.is_some() {
            return;
        }
        let mut row = vec![
            l.step.to_string(),
            l.lr.to_string(),
            l.loss.to_string(),
            l.loc.to_string(),
        ];
        row.extend(l.cls.iter().map(|c| c.to_string()));
        if let Err(e) = log.write_record(&row) {
            failed = Some(e);
        }
    });
    if let Some(e) = failed {
        return Err(csv_err(e));
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    let ck_path = out.join("checkpoint.json");
    trainer.checkpoint(Some(hash)).save(&ck_path)?;
    println!(
        "trained {} for {} steps; checkpoint at {}",
        cfg.model.variant,
        trainer.step,
        ck_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<&Path>,
    checkpoint: &Path,
    data: Option<&Path>,
    out: &Path,
    ts: Option<Vec<usize>>,
    ks: Option<Vec<f64>>,
    save_predictions: bool,
    predictions: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    cfg.model.variant = ck.model.variant;
    cfg.seed = ck.seed;
    let hash = cfg.hash();
    warn_hash("checkpoint", ck.config_hash.as_deref(), &hash);
    let model = Model::from_checkpoint(&ck)?;
    let episodes = load_episodes(data, &cfg, &hash)?;
    let clip = cfg.world.mode == WorldMode::SingleActorClip;
    let ts = ts.unwrap_or_else(|| {
        if clip {
            Vec::new()
        } else {
            (0..=model.config.horizon).collect()
        }
    });
    let ks = ks.unwrap_or_else(|| if clip { cfg.eval.k_percents.clone() } else { Vec::new() });
    if let Some(&t) = ts.iter().find(|&&t| t > model.config.horizon) {
        return Err(Error::Config(format!(
            "t = {t} beyond the model horizon {}",
            model.config.horizon
        )));
    }
    let seed = seed.unwrap_or(ck.seed);
    ensure_dir(out)?;

    let report = match predictions {
        Some(p) => {
            let preds = read_predictions(p)?;
            let mut r = report_from_predictions(
                model.config.variant,
                model.config.num_classes,
                &preds,
                &episodes,
                &ts,
                seed,
                Some(hash.clone()),
            )?;
            for &k in &ks {
                r.accuracy_at_k
                    .push((k, dr2n_core::traineval::accuracy_at_k(&model, &episodes, k)?));
            }
            r
        }
        None => evaluate(&model, &episodes, &ts, &ks, seed, Some(hash.clone()))?,
    };
    if save_predictions {
        let preds = episodes
            .iter()
            .map(|e| model.predict_episode(e))
            .collect::<Result<Vec<_>>>()?;
        let mut text = String::new();
        for p in &preds {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        write(&out.join("predictions.jsonl"), text)?;
    }
    write(&out.join("report.csv"), report.to_csv())?;
    write(&out.join("report.json"), report.to_json()?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn cmd_ablate(
    config: Option<&Path>,
    out: &Path,
    seeds: Option<Vec<u64>>,
    variants: Option<Vec<Variant>>,
    steps: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        cfg.ablation.seeds = s;
    }
    if let Some(v) = variants {
        cfg.ablation.variants = v;
    }
    if steps.is_some() {
        cfg.train.steps = steps;
    }
    let hash = cfg.hash();
    let table = run_ablation(&cfg.ablation(), Some(hash))?;
    ensure_dir(out)?;
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    for r in table.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: {} seed {} failed: {}",
            r.variant,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    if cfg.world.mode == WorldMode::SingleActorClip {
        write(&out.join("accuracy.csv"), table.accuracy_csv())?;
        print!("{}", table.accuracy_csv());
        return Ok(());
    }
    write(&out.join("grid.csv"), table.grid_csv())?;
    let has = |v: Variant| table.variants.contains(&v);
    for &v in &table.variants {
        write(&out.join(format!("horizon_drop_{v}.csv")), table.horizon_drop_csv(v))?;
    }
    if has(Variant::Dr2n) && has(Variant::Gru) {
        write(
            &out.join("delta_dr2n_gru.csv"),
            table.variant_delta_csv(Variant::Dr2n, Variant::Gru),
        )?;
    }
    print!("{}", table.grid_csv());
    Ok(())
}

fn cmd_attn(
    config: Option<&Path>,
    checkpoint: &Path,
    data: Option<&Path>,
    episode: usize,
    node: usize,
    k: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let episodes = match data {
        Some(_) => load_episodes(data, &cfg, &cfg.hash())?,
        None => eval_set(&World::new(cfg.world.clone())?, episode + 1),
    };
    let ep = episodes
        .get(episode)
        .ok_or_else(|| Error::Config(format!("episode {episode} out of range ({} available)", episodes.len())))?;
    if node >= ep.num_nodes() {
        return Err(Error::Config(format!(
            "node {node} out of range ({} nodes)",
            ep.num_nodes()
        )));
    }
    let alphas = model.attention(&ep.features())?;
    let records: Vec<AttentionRecord> = alphas
        .iter()
        .enumerate()
        .flat_map(|(s, alpha)| {
            top_k(alpha, node, k)
                .into_iter()
                .map(move |(j, weight)| AttentionRecord {
                    step: s + 1,
                    i: node,
                    j,
                    weight,
                })
        })
        .collect();
    ensure_dir(out)?;
    write(&out.join("attention.json"), serde_json::to_string_pretty(&records)?)?;
    write(&out.join("attention.dot"), to_dot(&records))?;
    println!("{}", serde_json::to_string(&records)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Clip => RunConfig::clip(),
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Generate {
            config,
            out,
            count,
            seed,
        } => cmd_generate(config.as_deref(), &out, count, seed),
        Command::Train {
            config,
            data,
            out,
            variant,
            steps,
            seed,
            resume,
        } => cmd_train(
            config.as_deref(),
            data.as_deref(),
            &out,
            variant,
            steps,
            seed,
            resume.as_deref(),
        ),
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            t,
            k_percent,
            save_predictions,
            predictions,
            seed,
        } => cmd_eval(
            config.as_deref(),
            &checkpoint,
            data.as_deref(),
            &out,
            t,
            k_percent,
            save_predictions,
            predictions.as_deref(),
            seed,
        ),
        Command::Ablate {
            config,
            out,
            seeds,
            variants,
            steps,
        } => cmd_ablate(config.as_deref(), &out, seeds, variants, steps),
        Command::Attn {
            config,
            checkpoint,
            data,
            episode,
            node,
            top_k,
            out,
        } => cmd_attn(
            config.as_deref(),
            &checkpoint,
            data.as_deref(),
            episode,
            node,
            top_k,
            &out,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
