use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scolio::config::{load_network, sidecar_path, RunConfig};
use scolio::data::{self, load_corpus, load_png, resize_region, BBox, Scheme, SynthConfig, MANIFEST_NAME};
use scolio::explain::{self, DEFAULT_ALPHA, DEFAULT_LAYER};
use scolio::kv::KvFile;
use scolio::metrics::{ConfusionMatrix, MetricsReport};
use scolio::model::Network;
use scolio::orh::LossWeights;
use scolio::train::{self, CrossValidation, Evaluation};

#[derive(Parser)]
#[command(name = "scolio", version, about = "Scoliosis severity grading on synthetic back images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus.
    Synth(SynthArgs),
    /// Train a network on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint or cross-validate its config.
    Eval(EvalArgs),
    /// Write a Grad-CAM overlay for one image.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Samples per level.
    #[arg(long, conflicts_with = "counts")]
    per_level: Option<usize>,
    /// Comma-separated samples per level, e.g. 453,571,504,370.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image size as WxH.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long, default_value = "general", value_parser = parse_scheme)]
    scheme: Scheme,
    /// Generator settings as key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory holding manifest.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// General:fine loss weight ratio, e.g. 2:1.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// baseline, baseline+sfmm, baseline+orh or full.
    #[arg(long)]
    variant: Option<String>,
    /// Leave the held-out fold out of training.
    #[arg(long)]
    holdout: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Retrain the checkpoint's config on k-1 folds and test on the k-th.
    #[arg(long, conflicts_with = "holdout", value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    /// Test on the fold the training run held out.
    #[arg(long)]
    holdout: bool,
    /// Directory for the report files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// general.sfmm, fine.sfmm or backbone.
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Region the network sees, as x,y,w,h. Defaults to the whole image.
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BBox>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    let h = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    Ok((w, h))
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: scolio::Error| e.to_string())
}

fn parse_lambda(s: &str) -> Result<String, String> {
    LossWeights::parse_ratio(s).map_err(|e| e.to_string())?;
    Ok(s.to_string())
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v = s
        .split(',')
        .map(|c| c.trim().parse::<usize>().map_err(|_| format!("bad bbox field `{c}`")))
        .collect::<Result<Vec<_>, _>>()?;
    match v[..] {
        [x, y, w, h] => Ok(BBox { x, y, w, h }),
        _ => Err("expected x,y,w,h".into()),
    }
}

fn read_kv(path: Option<&Path>) -> Result<KvFile> {
    Ok(match path {
        Some(p) => KvFile::read(p)?,
        None => KvFile::default(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn corpus(dir: &Path) -> Result<Vec<data::Sample>> {
    let manifest = dir.join(MANIFEST_NAME);
    if !manifest.is_file() {
        bail!("no manifest at {}", manifest.display());
    }
    Ok(load_corpus(&manifest)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut kv = read_kv(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        kv.set("seed", seed);
    }
    if let Some((w, h)) = a.size {
        kv.set("width", w);
        kv.set("height", h);
    }
    let cfg = SynthConfig::from_kv(&kv)?;
    let counts = match (a.counts, a.per_level) {
        (Some(c), _) => c,
        (None, Some(n)) => vec![n; a.scheme.levels()],
        (None, None) => vec![300; a.scheme.levels()],
    };
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let resolved = cfg.to_kv().render();
    write(&a.out.join("synth.txt"), &resolved)?;
    print!("{resolved}");
    data::generate_corpus(&cfg, &counts, a.scheme, &a.out)?;
    for (l, c) in counts.iter().enumerate() {
        println!("level {}: {c}", l + 1);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut kv = read_kv(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        kv.set("seed", seed);
    }
    if let Some(l) = &a.lambda {
        kv.set("lambda", l);
    }
    if let Some(e) = a.epochs {
        kv.set("epochs", e);
    }
    if let Some(v) = &a.variant {
        kv.set("variant", v);
    }
    if a.holdout {
        kv.set("holdout", true);
    }
    let cfg = RunConfig::from_kv(&kv)?;
    let resolved = cfg.to_kv().render();
    print!("{resolved}");

    let samples = corpus(&a.data)?;
    let samples = if cfg.holdout {
        let (tr, _) = train::holdout_split(&samples, cfg.holdout_folds, cfg.train.seed)?;
        train::select(&samples, &tr)
    } else {
        samples
    };
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let ckpt = a.out.join("model.ckpt");
    write(&sidecar_path(&ckpt), &resolved)?;

    let mut net = Network::new(cfg.model.clone(), cfg.train.seed)?;
    let logs = train::fit(&mut net, &samples, &cfg.train, |log, _| {
        eprintln!(
            "epoch {:>3}  general {:.4}  fine {:.4}  total {:.4}  lr {:.3e}",
            log.epoch, log.losses.general, log.losses.fine, log.losses.total, log.lr
        );
    })?;
    write(&a.out.join("loss.csv"), &train::loss_csv(&logs))?;
    train::save_checkpoint(net.store(), &ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn write_report(out: &Path, prefix: &str, task: &str, r: &MetricsReport) -> Result<()> {
    write(&out.join(format!("{prefix}{task}_confusion.csv")), &r.confusion.to_csv())?;
    write(&out.join(format!("{prefix}{task}_roc.csv")), &r.roc_csv())
}

fn summed(cms: &[&ConfusionMatrix]) -> Result<ConfusionMatrix> {
    let levels = cms[0].levels();
    let mut counts = vec![0u64; levels * levels];
    for cm in cms {
        for t in 1..=levels {
            for p in 1..=levels {
                counts[(t - 1) * levels + p - 1] += cm.get(t, p);
            }
        }
    }
    Ok(ConfusionMatrix::from_counts(levels, counts)?)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (cfg, mut net) = load_network(&a.ckpt)?;
    let samples = corpus(&a.data)?;
    let rows = data::read_manifest(&a.data.join(MANIFEST_NAME))?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;

    if let Some(k) = a.folds {
        let cv = train::cross_validate(&samples, k as usize, &cfg.model, &cfg.train)?;
        for (i, f) in cv.folds.iter().enumerate() {
            write_report(&a.out, &format!("fold{}_", i + 1), "general", &f.general)?;
            write_report(&a.out, &format!("fold{}_", i + 1), "fine", &f.fine)?;
        }
        let g = summed(&cv.folds.iter().map(|f| &f.general.confusion).collect::<Vec<_>>())?;
        let f = summed(&cv.folds.iter().map(|f| &f.fine.confusion).collect::<Vec<_>>())?;
        write(&a.out.join("general_confusion.csv"), &g.to_csv())?;
        write(&a.out.join("fine_confusion.csv"), &f.to_csv())?;
        let report = json!({ "mode": format!("{k}-fold"), "samples": samples.len(), "cross_validation": cv });
        write(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        print_summary(&cv);
        return Ok(());
    }

    let idx: Vec<usize> = if a.holdout {
        if !cfg.holdout {
            eprintln!("warning: the checkpoint was trained without a held-out fold");
        }
        train::holdout_split(&samples, cfg.holdout_folds, cfg.train.seed)?.1
    } else {
        (0..samples.len()).collect()
    };
    let test = train::select(&samples, &idx);
    let preds = train::predict_samples(&mut net, &test)?;
    let ev: Evaluation = train::evaluation_from(&test, &preds, &cfg.model)?;
    let mut csv = String::from("path,general_true,general_pred,fine_true,fine_pred\n");
    for ((&i, s), p) in idx.iter().zip(&test).zip(&preds) {
        csv += &format!(
            "{},{},{},{},{}\n",
            rows[i].path, s.general_level, p.general.rank, s.fine_level, p.fine.rank
        );
    }
    write(&a.out.join("predictions.csv"), &csv)?;
    write_report(&a.out, "", "general", &ev.general)?;
    write_report(&a.out, "", "fine", &ev.fine)?;
    let mode = if a.holdout { "holdout" } else { "all" };
    let report = json!({ "mode": mode, "samples": test.len(), "general": ev.general, "fine": ev.fine });
    write(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    println!(
        "general acc {:.4} mae {:.4} kappa {:.4} | fine acc {:.4} mae {:.4} kappa {:.4}",
        ev.general.acc, ev.general.mae, ev.general.kappa, ev.fine.acc, ev.fine.mae, ev.fine.kappa
    );
    Ok(())
}

fn print_summary(cv: &CrossValidation) {
    for (i, f) in cv.folds.iter().enumerate() {
        println!(
            "fold {}: general acc {:.4} mae {:.4} | fine acc {:.4} mae {:.4}",
            i + 1,
            f.general.acc,
            f.general.mae,
            f.fine.acc,
            f.fine.mae
        );
    }
    println!(
        "mean: general acc {:.4} mae {:.4} kappa {:.4} | fine acc {:.4} mae {:.4} kappa {:.4}",
        cv.general.acc, cv.general.mae, cv.general.kappa, cv.fine.acc, cv.fine.mae, cv.fine.kappa
    );
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let (cfg, mut net) = load_network(&a.ckpt)?;
    let image = load_png(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let bbox = a.bbox.unwrap_or(BBox::full(w, h));
    let size = cfg.model.input_size;
    let input = resize_region(&image, bbox, size, size)?;
    let (heat, pred) = explain::gradcam(&mut net, &input, &a.layer)?;
    explain::overlay(&heat, &image, bbox, a.alpha, &a.out)?;
    println!("general level: {}", pred.general.rank);
    println!("fine level: {}", pred.fine.rank);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Explain(a) => explain_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
