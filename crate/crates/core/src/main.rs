use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prompt_track::config::Config;
use prompt_track::data::{synth_dataset, VideoSequence};
use prompt_track::eval::{run_ablation, EvalReport, VideoMetrics};
use prompt_track::gradsuite::run_suite;
use prompt_track::io::{
    list_subdirs, load_video, read_boxes, save_video, write_boxes, GROUNDTRUTH,
};
use prompt_track::tracker::track_video;
use prompt_track::train::{format_trace, train_loop};
use prompt_track::{BBox, Error, Model, Result};

#[derive(Parser)]
#[command(
    name = "prompt-track",
    version,
    about = "Transformer tracker with explicit visual prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config's `data` section.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on video directories under this path instead of
        /// generating the `data` section.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Loss trace file (`step,loss` lines); defaults to `<out>.loss.txt`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Track one video directory from its first ground-truth box.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; defaults to the one saved with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initial box `x,y,w,h`; defaults to the first ground-truth line.
        #[arg(long)]
        init: Option<String>,
    },
    /// Score result files against ground truth.
    Eval {
        /// Directory of `<video>.txt` result files.
        #[arg(long)]
        results: PathBuf,
        /// Directory of `<video>/groundtruth.txt` or `<video>.txt` files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate the baseline and prompt arms.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the 64-bit gradient-check suite.
    Gradcheck,
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(dir: &Path) -> Result<Vec<VideoSequence>> {
    let mut out = Vec::new();
    for d in list_subdirs(dir)? {
        let v = load_video(&d)?;
        let Some(boxes) = v.groundtruth else {
            return Err(Error::Format {
                path: d.join(GROUNDTRUTH),
                detail: "missing ground truth".into(),
            });
        };
        if boxes.len() != v.frames.len() {
            return Err(Error::Format {
                path: d.join(GROUNDTRUTH),
                detail: format!("{} boxes for {} frames", boxes.len(), v.frames.len()),
            });
        }
        out.push(VideoSequence {
            name: v.name,
            frames: v.frames,
            boxes,
            spec: Default::default(),
            seed: 0,
        });
    }
    Ok(out)
}

fn parse_box(s: &str) -> Result<BBox> {
    let boxes = prompt_track::io::parse_boxes(s, Path::new("--init"))?;
    match boxes.as_slice() {
        [b] => Ok(*b),
        _ => Err(Error::InvalidArgument(format!(
            "expected one box, got {s:?}"
        ))),
    }
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let videos = synth_dataset(&cfg.data)?;
    for v in &videos {
        save_video(out.join(&v.name), v)?;
    }
    println!("wrote {} videos to {}", videos.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path, data: Option<&Path>, trace: Option<&Path>) -> Result<()> {
    let cfg = Config::load(config)?;
    let dataset = match data {
        Some(dir) => load_dataset(dir)?,
        None => synth_dataset(&cfg.data)?,
    };
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    eprintln!(
        "training {} parameters on {} videos for {} steps",
        model.params.num_scalars(),
        dataset.len(),
        cfg.train.steps
    );
    let every = cfg.train.checkpoint_every;
    let trace_entries = train_loop(
        &mut model,
        &dataset,
        &cfg.train,
        &cfg.sampling(),
        &cfg.loss,
        |step, s, m| {
            if step % 50 == 0 || step + 1 == cfg.train.steps {
                eprintln!(
                    "step {step:>5} loss {:.4} (cls {:.4} l1 {:.4} giou {:.4}) |g| {:.3}",
                    s.loss, s.cls, s.l1, s.giou, s.grad_norm
                );
            }
            if every > 0 && (step + 1) % every == 0 {
                m.params
                    .save(with_suffix(out, &format!(".step{}", step + 1)))?;
            }
            Ok(())
        },
    )?;
    model.params.save(out)?;
    std::fs::write(sidecar(out), cfg.to_json())?;
    let trace_path = trace
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(out, ".loss.txt"));
    std::fs::write(&trace_path, format_trace(&trace_entries))?;
    println!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

fn track(
    ckpt: &Path,
    video: &Path,
    out: &Path,
    config: Option<&Path>,
    init: Option<&str>,
) -> Result<()> {
    let cfg_path = config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sidecar(ckpt));
    let cfg = Config::load(&cfg_path)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), 0)?;
    model.params.load(ckpt)?;
    let v = load_video(video)?;
    let init = match (init, &v.groundtruth) {
        (Some(s), _) => parse_box(s)?,
        (None, Some(gt)) if !gt.is_empty() => gt[0],
        _ => {
            return Err(Error::InvalidArgument(
                "no initial box: pass --init or provide groundtruth.txt".into(),
            ))
        }
    };
    let boxes = track_video(&model, cfg.tracker, &v.frames, init)?;
    write_boxes(out, &boxes)?;
    println!(
        "tracked {} frames of {} into {}",
        boxes.len(),
        v.name,
        out.display()
    );
    Ok(())
}

fn eval(results: &Path, gt: &Path, report: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(results)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut videos = Vec::with_capacity(files.len());
    for f in files {
        let name = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let nested = gt.join(&name).join(GROUNDTRUTH);
        let gt_path = if nested.exists() {
            nested
        } else {
            gt.join(format!("{name}.txt"))
        };
        if !gt_path.exists() {
            return Err(Error::InvalidArgument(format!(
                "no ground truth for {name} under {}",
                gt.display()
            )));
        }
        videos.push(VideoMetrics::compute(
            name,
            &read_boxes(&f)?,
            &read_boxes(&gt_path)?,
        )?);
    }
    let rep = EvalReport::new(videos)?;
    std::fs::write(report, rep.to_json())?;
    print!("{}", rep.table());
    Ok(())
}

fn ablate(config: &Path, report: Option<&Path>) -> Result<()> {
    let cfg = Config::load(config)?;
    let rep = run_ablation(&cfg, |line| eprintln!("{line}"))?;
    if let Some(path) = report {
        std::fs::write(path, rep.to_json())?;
    }
    print!("{}", rep.table());
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let results = run_suite()?;
    let mut ok = true;
    let mut names: Vec<&str> = Vec::new();
    for r in &results {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    for name in names {
        let group: Vec<_> = results.iter().filter(|r| r.name == name).collect();
        let worst = group.iter().map(|r| r.rel_err).fold(0.0, f64::max);
        let pass = group.iter().all(|r| r.passed());
        ok &= pass;
        println!(
            "{} {name:<36} worst rel err {worst:.2e} (< {:.0e}, {} seeds)",
            if pass { "ok  " } else { "FAIL" },
            group[0].tolerance,
            group.len()
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { config, out } => synth(&config, &out)?,
        Command::Train {
            config,
            out,
            data,
            trace,
        } => train(&config, &out, data.as_deref(), trace.as_deref())?,
        Command::Track {
            ckpt,
            video,
            out,
            config,
            init,
        } => track(&ckpt, &video, &out, config.as_deref(), init.as_deref())?,
        Command::Eval {
            results,
            gt,
            report,
        } => eval(&results, &gt, &report)?,
        Command::Ablate { config, report } => ablate(&config, report.as_deref())?,
        Command::Gradcheck => return gradcheck(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
