//! `iflame` command-line interface.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iflame::bench::run_decode_bench;
use iflame::checkpoint;
use iflame::config::RunConfig;
use iflame::hourglass::{ModelConfig, ModelWeights, Variant};
use iflame::inference::{cache_bytes, complete, generate, CacheReport, GenerateOptions, Generation, SamplerConfig};
use iflame::mesh_codec::{
    detokenize, encode_mesh, load_obj, save_obj, QuantizerConfig, TokenSequence, TOKENS_PER_FACE,
};
use iflame::training::{evaluate, Dataset, EvalReport, StepLog, Trainer};

#[derive(Parser)]
#[command(name = "iflame", version, about = "Autoregressive mesh generation with an interleaved-attention hourglass")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode an OBJ mesh as a token file.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 128)]
        bins: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a token file into an OBJ mesh.
    Detokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the meshes listed in a manifest.
    Train {
        /// Text file with one OBJ path per line.
        #[arg(long)]
        data: PathBuf,
        /// TOML file with `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Final teacher-forced evaluation CSV.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a mesh from a checkpoint.
    Generate {
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Continue the first faces of a mesh.
    Complete {
        /// OBJ mesh or token file whose leading faces form the prefix.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 50)]
        prefix_faces: usize,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Time greedy decoding with random weights.
    Bench {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        seq_len: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append the CSV row to this file (header written when new).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Report predicted cache memory for a variant.
    InspectCache {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        seq_len: usize,
        #[arg(long, default_value_t = 4)]
        bytes_per_element: usize,
        /// Append the CSV row to this file (header written when new).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 800)]
    max_faces: usize,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Never sample tokens that break the sequence grammar.
    #[arg(long)]
    strict_grammar: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw token sequence.
    #[arg(long)]
    tokens_out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// TOML file whose `[model]` table is the base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

impl ModelArgs {
    fn base(&self) -> iflame::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?.model,
            None => ModelConfig::shapenet(),
        };
        if let Some(d) = self.d_model {
            cfg.d_model = d;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: iflame::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> iflame::Result<()> {
    match command {
        Command::Tokenize { input, bins, out } => {
            let q = QuantizerConfig::new(bins)?;
            let (canon, seq) = encode_mesh(&load_obj(&input)?, &q)?;
            seq.save(&out)?;
            println!(
                "faces = {}\nvertices = {}\ntokens = {}\ndropped_faces = {}",
                canon.mesh.face_count(),
                canon.mesh.vertices.len(),
                seq.len(),
                canon.dropped_faces
            );
        }
        Command::Detokenize { input, out } => {
            let seq = TokenSequence::load(&input)?;
            let q = QuantizerConfig::new(seq.bins)?;
            let d = detokenize(&seq, &q)?;
            save_obj(&d.mesh.to_mesh(&q), &out)?;
            println!(
                "faces = {}\nvertices = {}\ndiscarded_tokens = {}\ndegenerate_faces = {}",
                d.mesh.faces.len(),
                d.mesh.vertices.len(),
                d.discarded_tokens,
                d.degenerate_faces
            );
        }
        Command::Train {
            data,
            config,
            out,
            log,
            eval,
            seed,
        } => train(&data, config.as_deref(), &out, log.as_deref(), eval.as_deref(), seed)?,
        Command::Generate { decode } => {
            let weights = load_weights(&decode.checkpoint)?;
            let g = generate(&weights, &decode.options())?;
            emit(&g, &decode)?;
        }
        Command::Complete {
            input,
            prefix_faces,
            decode,
        } => {
            let weights = load_weights(&decode.checkpoint)?;
            let prefix = prefix_of(&input, prefix_faces, weights.config.bins)?;
            let g = complete(&prefix, &weights, &decode.options())?;
            emit(&g, &decode)?;
        }
        Command::Bench {
            variant,
            seq_len,
            batch,
            runs,
            seed,
            out,
            model,
        } => {
            let r = run_decode_bench(variant, &model.base()?, seq_len, batch, runs, seed);
            println!("{}\n{}", iflame::bench::BenchReport::CSV_HEADER, r.csv_row());
            if let Some(path) = out {
                append_csv(&path, iflame::bench::BenchReport::CSV_HEADER, &r.csv_row())?;
            }
            if r.status != "ok" {
                return Err(iflame::Error::Config(r.status));
            }
        }
        Command::InspectCache {
            variant,
            seq_len,
            bytes_per_element,
            csv,
            model,
        } => {
            let cfg = variant.config(&model.base()?, None);
            let r = cache_bytes(&cfg, variant.label(), seq_len, bytes_per_element);
            print!("{}", r.to_text());
            if let Some(path) = csv {
                append_csv(&path, CacheReport::CSV_HEADER, &r.csv_row())?;
            }
        }
    }
    Ok(())
}

impl DecodeArgs {
    fn options(&self) -> GenerateOptions {
        GenerateOptions {
            sampler: SamplerConfig {
                top_p: self.top_p,
                top_k: self.top_k,
                temperature: self.temperature,
                seed: self.seed,
            },
            max_faces: self.max_faces,
            strict_grammar: self.strict_grammar,
            greedy: false,
        }
    }
}

fn load_weights(path: &Path) -> iflame::Result<ModelWeights<f32>> {
    Ok(checkpoint::load::<f32>(path)?.0)
}

fn emit(g: &Generation, args: &DecodeArgs) -> iflame::Result<()> {
    if let Some(path) = &args.tokens_out {
        g.sequence.save(path)?;
    }
    let q = QuantizerConfig::new(g.sequence.bins)?;
    let d = detokenize(&g.sequence, &q)?;
    save_obj(&d.mesh.to_mesh(&q), &args.out)?;
    println!(
        "tokens = {}\nfaces = {}\nvertices = {}\nstop = {:?}",
        g.sequence.len(),
        d.mesh.faces.len(),
        d.mesh.vertices.len(),
        g.stop
    );
    Ok(())
}

/// `[S]` plus the first `faces` faces of a mesh or token file.
fn prefix_of(path: &Path, faces: usize, bins: u32) -> iflame::Result<TokenSequence> {
    let is_obj = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"));
    let seq = if is_obj {
        encode_mesh(&load_obj(path)?, &QuantizerConfig::new(bins)?)?.1
    } else {
        TokenSequence::load(path)?
    };
    let available = seq.tokens.iter().skip(1).take_while(|&&t| t < seq.bins).count() / TOKENS_PER_FACE;
    if faces > available {
        return Err(iflame::Error::Grammar(format!(
            "input has {available} faces, fewer than --prefix-faces {faces}"
        )));
    }
    Ok(TokenSequence::new(seq.bins, seq.tokens[..1 + TOKENS_PER_FACE * faces].to_vec()))
}

fn append_csv(path: &Path, header: &str, row: &str) -> iflame::Result<()> {
    let fresh = !path.exists();
    let io = |e| iflame::Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = File::options().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{header}").map_err(io)?;
    }
    writeln!(f, "{row}").map_err(io)
}

fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    eval: Option<&Path>,
    seed: Option<u64>,
) -> iflame::Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let q = QuantizerConfig::new(cfg.model.bins)?;
    let dataset = Dataset::load_manifest(data, q, cfg.train.max_faces)?;
    let needed = dataset.sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    if needed > cfg.model.max_context {
        return Err(iflame::Error::Config(format!(
            "longest sequence has {needed} tokens, more than max_context {}",
            cfg.model.max_context
        )));
    }
    let weights = ModelWeights::<f32>::random(&cfg.model, cfg.train.seed)?;
    println!(
        "meshes = {}\nparameters = {}\nsteps = {}",
        dataset.len(),
        weights.param_count(),
        cfg.train.epochs * dataset.len().div_ceil(cfg.train.batch_size)
    );
    let mut trainer = Trainer::new(weights, cfg.train.clone(), dataset.len())?;

    let mut writer = match log {
        Some(p) => {
            let f = File::create(p).map_err(|e| iflame::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            let mut w = BufWriter::new(f);
            let _ = writeln!(w, "{}", StepLog::CSV_HEADER);
            Some(w)
        }
        None => None,
    };
    trainer.fit(&dataset, &mut |entry| {
        if let Some(w) = writer.as_mut() {
            let _ = writeln!(w, "{}", entry.csv_row());
        }
    })?;
    if let Some(mut w) = writer {
        let _ = w.flush();
    }

    let report = evaluate(&trainer.weights, &dataset.sequences)?;
    println!("{}\n{}", EvalReport::CSV_HEADER, report.csv_row("train"));
    if let Some(p) = eval {
        std::fs::write(p, format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row("train"))).map_err(|e| {
            iflame::Error::Io {
                path: p.to_path_buf(),
                source: e,
            }
        })?;
    }
    checkpoint::save(out, &trainer.weights, trainer.step() as u64)?;
    println!("checkpoint = {}", out.display());
    Ok(())
}
