//! `seal` command-line front end.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::{read_flat, Flat};
use seal_core::Result;

#[derive(Debug, Args)]
struct Common {
    /// Flat JSON object of settings; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    GenSynth {
        #[arg(long)]
        out: Option<String>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Harmonize, normalize, select the gene panel, smooth and split.
    Preprocess {
        #[arg(long)]
        raw: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Stage I: train the omics VAE.
    TrainOmics {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Stage II: attach adapters and align images with expression.
    TrainAlign {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Dump image or omics embeddings as an embedding blob.
    Embed {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// image, frozen_image or omics
        #[arg(long)]
        modality: Option<String>,
        /// all, train, val, test or heldout
        #[arg(long)]
        split: Option<String>,
    },
    /// k-fold linear probe from embeddings to expression.
    Probe {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        embeddings: Option<String>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Predict expression for query images from their nearest references.
    RetrieveI2g {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Similarity map of a sample's patches to a gene-set query.
    RetrieveG2i {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        ckpt: Option<String>,
        /// Output path prefix; .tsv and .png are written.
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        sample: Option<String>,
        /// Comma-separated active genes.
        #[arg(long, value_delimiter = ',')]
        genes: Vec<String>,
    },
    /// Summarize a checkpoint and verify its digests.
    InspectCkpt {
        #[arg(long)]
        ckpt: Option<String>,
        /// One line per stored array.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Debug, Parser)]
#[command(name = "seal", version, about = "Align a pathology vision encoder with spatial transcriptomics")]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn put(flat: &mut Flat, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        flat.insert(key.into(), Value::String(v.clone()));
    }
}

fn dispatch(common: &Common, command: &Command) -> Result<String> {
    let mut flat = match &common.config {
        Some(p) => read_flat(p)?,
        None => Flat::new(),
    };
    let has_seed = !matches!(command, Command::Embed { .. } | Command::RetrieveI2g { .. } | Command::RetrieveG2i { .. } | Command::InspectCkpt { .. });
    if let Some(seed) = common.seed {
        if has_seed {
            flat.insert("seed".into(), Value::from(seed));
        } else {
            log::info!("--seed has no effect on this subcommand");
        }
    }
    match command {
        Command::GenSynth { out, force } => {
            put(&mut flat, "out_dir", out);
            commands::gen_synth(&flat, *force)
        }
        Command::Preprocess { raw, out } => {
            put(&mut flat, "raw_dir", raw);
            put(&mut flat, "out_dir", out);
            commands::run_preprocess(&flat)
        }
        Command::TrainOmics { data, out } => {
            put(&mut flat, "data_dir", data);
            put(&mut flat, "out_dir", out);
            commands::train_omics(&flat)
        }
        Command::TrainAlign { data, ckpt, out } => {
            put(&mut flat, "data_dir", data);
            put(&mut flat, "checkpoint", ckpt);
            put(&mut flat, "out_dir", out);
            commands::train_align(&flat)
        }
        Command::Embed { data, ckpt, out, modality, split } => {
            put(&mut flat, "data_dir", data);
            put(&mut flat, "checkpoint", ckpt);
            put(&mut flat, "out", out);
            put(&mut flat, "modality", modality);
            put(&mut flat, "split", split);
            commands::embed(&flat)
        }
        Command::Probe { data, embeddings, out, split } => {
            put(&mut flat, "data_dir", data);
            put(&mut flat, "embeddings", embeddings);
            put(&mut flat, "out", out);
            put(&mut flat, "split", split);
            commands::probe(&flat)
        }
        Command::RetrieveI2g { data, ckpt, out } => {
            put(&mut flat, "data_dir", data);
            put(&mut flat, "checkpoint", ckpt);
            put(&mut flat, "out", out);
            commands::retrieve_i2g(&flat)
        }
        Command::RetrieveG2i { data, ckpt, out, sample, genes } => {
            put(&mut flat, "data_dir", data);
            put(&mut flat, "checkpoint", ckpt);
            put(&mut flat, "out", out);
            put(&mut flat, "sample", sample);
            if !genes.is_empty() {
                flat.insert("genes".into(), Value::from(genes.clone()));
            }
            commands::retrieve_g2i(&flat)
        }
        Command::InspectCkpt { ckpt, list } => {
            put(&mut flat, "checkpoint", ckpt);
            if *list {
                flat.insert("list_arrays".into(), Value::Bool(true));
            }
            commands::inspect_ckpt(&flat)
        }
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 success, 1 usage or configuration, 2 data, 3 numerical.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let top = match Top::try_parse_from(argv) {
        Ok(t) => t,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match top.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Some(n) = top.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match dispatch(&top.common, &top.command) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
