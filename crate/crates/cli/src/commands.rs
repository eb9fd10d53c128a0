use std::fs;
use std::path::Path;

use evtrack::config::{RunConfig, Scale};
use evtrack::eval::{bench_latency, curves_csv, mean_iou, results_to_string, summarize, track_sequence, TrackRun};
use evtrack::event_io::{load_dataset, load_sequence, write_sequence};
use evtrack::model::{Tracker, TrackerKind};
use evtrack::nn::Checkpoint;
use evtrack::pipeline::{prepare_all, Prepared};
use evtrack::selfcheck::tracker_gradcheck;
use evtrack::synthgen::generate_dataset;
use evtrack::trainer::{train_stage2, write_curve, EpochLog, Stage, Trainer};

use crate::args::Args;
use crate::CliError;

type Res<T = ()> = Result<T, CliError>;

fn flags_of(command: &str) -> &'static [&'static str] {
    match command {
        "gen-data" => &["config", "seed", "out"],
        "train" => &["config", "seed", "data", "out", "stage", "resume"],
        "finetune" => &["config", "seed", "data", "out", "slow", "fast", "resume"],
        "track" | "eval" => &["config", "seed", "data", "checkpoint", "out", "mode", "k"],
        "bench" => &["config", "seed", "data", "checkpoint", "mode", "k", "warmup", "sequence", "out"],
        "gradcheck" => &["config", "seed", "entries"],
        "params" => &["config", "seed", "scale"],
        _ => &[],
    }
}

pub fn run(argv: &[String]) -> Res {
    let args = Args::parse(argv, flags_of)?;
    if args.switch("help") {
        println!("{}", crate::USAGE);
        return Ok(());
    }
    match args.command.as_str() {
        "gen-data" => gen_data(&args),
        "train" => train(&args),
        "finetune" => finetune(&args),
        "track" => track(&args, false),
        "eval" => track(&args, true),
        "bench" => bench(&args),
        "gradcheck" => gradcheck(&args),
        "params" => params(&args),
        other => Err(CliError::usage(format!("unknown command `{other}`"))),
    }
}

fn load_config(args: &Args) -> Res<RunConfig> {
    let seed = args.parsed::<u64>("seed")?.unwrap_or(0);
    let text = match args.get("config") {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read config {p}: {e}")))?,
        None => String::new(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(scale) = args.get("scale") {
        overrides.push(("model.scale".into(), scale.into()));
    }
    Ok(RunConfig::parse(&text, &overrides, seed)?)
}

/// Creates `dir`, refusing to touch an existing non-empty one unless
/// `--overwrite` was given, in which case it is emptied first.
fn prepare_out(args: &Args, dir: &Path) -> Res {
    let busy = dir.exists() && (dir.is_file() || fs::read_dir(dir)?.next().is_some());
    if busy {
        if !args.switch("overwrite") {
            return Err(CliError::usage(format!(
                "{} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        if dir.is_file() {
            fs::remove_file(dir)?;
        } else {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Res {
    fs::write(dir.join("config.cfg"), cfg.to_ini())?;
    Ok(())
}

fn load_data(args: &Args, cfg: &RunConfig) -> Res<Vec<Prepared>> {
    let dir = args.path("data")?;
    let records = if dir.join("meta.cfg").is_file() {
        vec![load_sequence(&dir)?]
    } else {
        load_dataset(&dir)?
    };
    Ok(prepare_all(records, &cfg.model)?)
}

fn gen_data(args: &Args) -> Res {
    let cfg = load_config(args)?;
    let out = args.path("out")?;
    let seqs = generate_dataset(&cfg.data.spec, cfg.data.sequences, cfg.seed)?;
    prepare_out(args, &out)?;
    for s in &seqs {
        write_sequence(&out.join(&s.name), s)?;
    }
    save_config(&cfg, &out)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn mean_training_iou(model: &Tracker<f32>, data: &[Prepared]) -> evtrack::Result<f64> {
    let mut sum = 0.0;
    for seq in data {
        let run = track_sequence(model, seq, 1)?;
        sum += mean_iou(&run, &seq.record.ground_truth, true)?;
    }
    Ok(sum / data.len() as f64)
}

fn report_epoch(e: &EpochLog) {
    eprintln!(
        "epoch {:>3}  step {:>6}  loss {:.4} (focal {:.4} l1 {:.4} giou {:.4} kd {:.4}){}{}",
        e.epoch,
        e.steps,
        e.loss.total,
        e.loss.focal,
        e.loss.l1,
        e.loss.giou,
        e.loss.kd,
        e.kd_probe.map(|v| format!("  kd probe {v:.4}")).unwrap_or_default(),
        e.mean_iou.map(|v| format!("  mean IoU {v:.3}")).unwrap_or_default(),
    );
}

fn run_trainer(mut trainer: Trainer, data: &[Prepared], out: &Path, target_iou: f64) -> Res<(Trainer, Vec<EpochLog>)> {
    let state = out.join("train_state.ckpt");
    let mut log = Vec::new();
    trainer.train(data, |t, e| {
        let stop = if target_iou > 0.0 && t.model.kind == TrackerKind::Slow {
            let m = mean_training_iou(&t.model, data)?;
            e.mean_iou = Some(m);
            m >= target_iou
        } else {
            false
        };
        report_epoch(e);
        t.to_checkpoint().save(&state)?;
        log.push(e.clone());
        write_curve(&out.join("loss_curve.csv"), &log)?;
        Ok(stop)
    })?;
    Ok((trainer, log))
}

fn train(args: &Args) -> Res {
    let cfg = load_config(args)?;
    let stage: Stage = args.get("stage").unwrap_or("slow").parse()?;
    if stage == Stage::Finetune {
        return Err(CliError::usage("use the `finetune` command for stage 2"));
    }
    let resume = args.get("resume").map(|p| Checkpoint::load(Path::new(p))).transpose()?;
    let data = load_data(args, &cfg)?;
    let out = args.path("out")?;
    prepare_out(args, &out)?;
    save_config(&cfg, &out)?;
    let model = Tracker::<f32>::new(stage.trained_kind(), &cfg.model, cfg.seed)?;
    let mut trainer = Trainer::new(cfg.train_config(stage), model, None)?;
    if let Some(ck) = &resume {
        trainer.resume(ck)?;
        eprintln!("resumed at epoch {} step {}", trainer.epoch, trainer.steps());
    }
    let (trainer, _) = run_trainer(trainer, &data, &out, cfg.target_iou)?;
    trainer.model.save(&out.join("model.ckpt"))?;
    println!("{} tracker saved to {}", stage, out.join("model.ckpt").display());
    Ok(())
}

fn load_tracker(cfg: &RunConfig, path: &Path) -> Res<Tracker<f32>> {
    let ck = Checkpoint::load(path)?;
    let kind: TrackerKind = ck
        .meta
        .get("kind")
        .ok_or_else(|| evtrack::Error::Checkpoint(format!("{} has no tracker kind", path.display())))?
        .parse()
        .map_err(|_| evtrack::Error::Checkpoint(format!("{} has an unknown tracker kind", path.display())))?;
    let mut model = Tracker::<f32>::new(kind, &cfg.model, 0)?;
    model.load_params(&ck)?;
    Ok(model)
}

fn finetune(args: &Args) -> Res {
    let cfg = load_config(args)?;
    let slow = load_tracker(&cfg, &args.path("slow")?)?;
    let fast = load_tracker(&cfg, &args.path("fast")?)?;
    if slow.kind != TrackerKind::Slow || fast.kind != TrackerKind::Fast {
        return Err(CliError::usage("--slow must hold a slow tracker and --fast a fast one"));
    }
    let resume = args.get("resume").map(|p| Checkpoint::load(Path::new(p))).transpose()?;
    let data = load_data(args, &cfg)?;
    let out = args.path("out")?;
    prepare_out(args, &out)?;
    save_config(&cfg, &out)?;
    let tc = cfg.train_config(Stage::Finetune);
    let (teacher, student, log) = if let Some(ck) = resume {
        let mut t = Trainer::new(tc, fast, Some(slow))?;
        t.resume(&ck)?;
        t.set_probe(&data)?;
        let (t, log) = run_trainer(t, &data, &out, 0.0)?;
        let digest = t.teacher().map(|x| x.digest().to_string()).unwrap_or_default();
        (digest, t.model, log)
    } else {
        let slow_digest = slow.ps.digest();
        let (slow, student, log) = train_stage2(&tc, slow, fast, &data, |t, e| {
            report_epoch(e);
            t.to_checkpoint().save(&out.join("train_state.ckpt"))?;
            Ok(false)
        })?;
        if slow.ps.digest() != slow_digest {
            return Err(CliError::numeric("teacher parameters changed during fine-tuning"));
        }
        (slow_digest, student, log)
    };
    write_curve(&out.join("loss_curve.csv"), &log)?;
    student.save(&out.join("model.ckpt"))?;
    println!("teacher digest {teacher} unchanged; fast tracker saved to {}", out.join("model.ckpt").display());
    Ok(())
}

fn pick_k(args: &Args, cfg: &RunConfig, model: &Tracker<f32>) -> Res<usize> {
    if let Some(mode) = args.get("mode") {
        let want: TrackerKind = mode.parse()?;
        if want != model.kind {
            return Err(CliError::usage(format!("--mode {want} but the checkpoint holds a {} tracker", model.kind)));
        }
    }
    let k = args.parsed::<usize>("k")?;
    match (model.kind, k) {
        (TrackerKind::Slow, None | Some(1)) => Ok(1),
        (TrackerKind::Slow, Some(k)) => Err(CliError::usage(format!("the slow tracker emits one output per window, not {k}"))),
        (TrackerKind::Fast, Some(0)) => Err(CliError::usage("--k must be at least 1")),
        (TrackerKind::Fast, k) => Ok(k.unwrap_or(cfg.track.k)),
    }
}

fn track(args: &Args, score: bool) -> Res {
    let cfg = load_config(args)?;
    let model = load_tracker(&cfg, &args.path("checkpoint")?)?;
    let k = pick_k(args, &cfg, &model)?;
    let data = load_data(args, &cfg)?;
    let out = args.path("out")?;
    prepare_out(args, &out)?;
    save_config(&cfg, &out)?;
    let mut runs: Vec<TrackRun> = Vec::with_capacity(data.len());
    for seq in &data {
        let run = track_sequence(&model, seq, k)?;
        fs::write(out.join(format!("{}.txt", seq.record.name)), results_to_string(&run))?;
        runs.push(run);
    }
    if !score {
        println!("tracked {} sequences into {}", runs.len(), out.display());
        return Ok(());
    }
    let summary = summarize(&model.kind.to_string(), &runs, &data)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out.join("curves.csv"), curves_csv(&runs, &data)?)?;
    println!(
        "{} tracker, k={}: SR {:.2}  PR {:.2}  NPR {:.2}  FPS {:.1}",
        summary.tracker, summary.k, summary.mean.sr, summary.mean.pr, summary.mean.npr, summary.fps
    );
    Ok(())
}

fn bench(args: &Args) -> Res {
    let cfg = load_config(args)?;
    let model = load_tracker(&cfg, &args.path("checkpoint")?)?;
    let k = pick_k(args, &cfg, &model)?;
    let warmup = args.parsed::<usize>("warmup")?.unwrap_or(cfg.track.warmup);
    let data = load_data(args, &cfg)?;
    let seq = match args.get("sequence") {
        Some(name) => data
            .iter()
            .find(|s| s.record.name == name)
            .ok_or_else(|| CliError::usage(format!("no sequence named `{name}`")))?,
        None => &data[0],
    };
    let (report, _) = bench_latency(&model, seq, k, warmup)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = args.get("out") {
        let path = Path::new(path);
        if path.exists() && !args.switch("overwrite") {
            return Err(CliError::usage(format!(
                "{} already exists; pass --overwrite to replace it",
                path.display()
            )));
        }
        fs::write(path, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn gradcheck(args: &Args) -> Res {
    let seed = args.parsed::<u64>("seed")?.unwrap_or(0);
    let entries = args.parsed::<usize>("entries")?.unwrap_or(16);
    let mut ok = true;
    for kind in [TrackerKind::Slow, TrackerKind::Fast] {
        let rep = tracker_gradcheck(kind, seed, entries)?;
        println!("{kind} tracker\n{rep}\n");
        ok &= rep.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::numeric("gradient check failed"))
    }
}

fn params(args: &Args) -> Res {
    let cfg = load_config(args)?;
    let scale = args.get("scale").map(str::parse::<Scale>).transpose()?.unwrap_or(cfg.scale);
    for kind in [TrackerKind::Slow, TrackerKind::Fast] {
        let model = Tracker::<f32>::new(kind, &cfg.model, cfg.seed)?;
        println!("{kind} tracker ({scale})");
        for (name, n) in model.param_breakdown() {
            println!("  {name:<14} {n:>12}  ({:.2}M)", n as f64 / 1e6);
        }
    }
    Ok(())
}
