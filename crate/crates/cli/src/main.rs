use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dlgmoe::data::{generate, Dataset, FeatReader, SynthSpec};
use dlgmoe::harness::{evaluate, report, route_viz, train, TrainConfig};
use dlgmoe::model::{checkpoint, DlgMoeConfig, DlgMoeModel};
use dlgmoe::streaming::{stream_step, ChunkState, StreamRecord};

#[derive(Parser)]
#[command(name = "dlgmoe", version, about = "Language-group mixture-of-experts toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch; writes train_log.jsonl and final.json into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus; prints a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Send every frame to this language group (name or index).
        #[arg(long)]
        lang: Option<String>,
    },
    /// Chunked inference over a feature file ("-" reads stdin).
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        chunk_frames: usize,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        lang: Option<String>,
    },
    /// Render routing of one utterance as a PPM strip plus ASCII.
    RouteViz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Parameter and FLOP table; the last output line is JSON.
    Report {
        /// Model config JSON; omitted fields take the toy defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full-size architecture instead of --config.
        #[arg(long, conflicts_with = "config")]
        paper_scale: bool,
        #[arg(long, default_value_t = 2000)]
        frames: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<DlgMoeModel> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn language(model: &DlgMoeModel, lang: Option<&str>) -> Result<Option<usize>> {
    match lang {
        None => Ok(None),
        Some(name) => match model.config.language_index(name) {
            Some(l) => Ok(Some(l)),
            None => bail!("unknown language {name:?}; known: {:?}", model.config.language_names),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.cmd {
        Cmd::GenData { spec, out: dir } => {
            let spec: SynthSpec = read_json(&spec)?;
            let ds = generate(&spec)?;
            ds.save(&dir)?;
            writeln!(out, "{}", serde_json::json!({"utterances": ds.len(), "out": dir}))?;
        }
        Cmd::Train { config, data, out: dir } => {
            let cfg: TrainConfig = read_json(&config)?;
            let ds = Dataset::load(&data)?;
            fs::create_dir_all(&dir)?;
            let mut model = DlgMoeModel::new(cfg.model.clone())?;
            let mut log = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
            let records = train(&mut model, &ds, &cfg, &mut log, Some(&dir))?;
            log.flush()?;
            if let Some(last) = records.last() {
                writeln!(out, "{}", serde_json::to_string(last)?)?;
            }
        }
        Cmd::Eval { ckpt, data, k, lang } => {
            let model = load_model(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let lang = language(&model, lang.as_deref())?;
            let r = evaluate(&model, &ds, k, lang, Default::default())?;
            writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
        }
        Cmd::Stream {
            ckpt,
            chunk_frames,
            input,
            k,
            lang,
        } => {
            if chunk_frames == 0 {
                bail!("--chunk-frames must be at least 1");
            }
            let model = load_model(&ckpt)?;
            let lang = language(&model, lang.as_deref())?;
            let src: Box<dyn Read> = if input.as_os_str() == "-" {
                Box::new(io::stdin().lock())
            } else {
                Box::new(io::BufReader::new(
                    fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?,
                ))
            };
            let mut reader = FeatReader::new(src)?;
            let mut state = ChunkState::new(&model, k)?;
            for chunk_idx in 0.. {
                let chunk = reader.read_frames(chunk_frames)?;
                if chunk.rows() == 0 {
                    break;
                }
                let step = stream_step(&model, &mut state, &chunk, lang)?;
                let rec = StreamRecord {
                    chunk_idx,
                    partial_hyp: step.partial_hyp,
                    lang_ids: step.lang_ids.into_iter().next().unwrap_or_default(),
                };
                writeln!(out, "{}", serde_json::to_string(&rec)?)?;
                out.flush()?;
            }
        }
        Cmd::RouteViz {
            ckpt,
            data,
            utt,
            out: path,
            k,
        } => {
            let model = load_model(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let u = ds
                .find(&utt)
                .with_context(|| format!("utterance {utt} not in {}", data.display()))?;
            let v = route_viz(&model, u, &path, k)?;
            write!(out, "{}", v.ascii)?;
        }
        Cmd::Report {
            config,
            paper_scale,
            frames,
        } => {
            let cfg = match (config, paper_scale) {
                (_, true) => DlgMoeConfig::paper_scale(),
                (Some(p), false) => read_json(&p)?,
                (None, false) => DlgMoeConfig::default(),
            };
            let r = report(&cfg, frames)?;
            write!(out, "{}", r.table())?;
            writeln!(out, "{}", serde_json::to_string(&r)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        let closed_pipe = e
            .chain()
            .filter_map(|c| c.downcast_ref::<io::Error>())
            .any(|io| io.kind() == io::ErrorKind::BrokenPipe);
        if closed_pipe {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
