//! `mgt` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{balance_warning, generate_dataset, Dataset, SceneSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::{compose_block_mask, graph_to_mask, CrossPolicy, Modality, ModalSpan, SelfLoops};
use crate::tensor::read_mgtn;
use crate::text::{semantic_graph, table_graph, text_graph, Lexicon, Table};
use crate::train::{
    ablation_markdown, dump_attention, evaluate_checkpoint, check_vocab, prepare, run_ablation, train, write_dump, MaskMode,
    TrainConfig,
};
use crate::vision::{build_dense_region_graph, patchify, Connectivity};

#[derive(Parser, Debug)]
#[command(name = "mgt", version, about = "Graph-guided multimodal transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a text, semantic, table or dense region graph.
    BuildGraph(BuildGraphArgs),
    /// Fuse a vision and a text graph into one QAMK mask.
    ComposeMask(ComposeMaskArgs),
    /// Generate a synthetic question answering dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write one head's attention weights for one sample.
    DumpAttention(DumpArgs),
    /// Train with graph, open and random masks from one seed.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphKind {
    Text,
    Semantic,
    Table,
    Vision,
}

#[derive(Args, Debug)]
pub struct BuildGraphArgs {
    #[arg(long, value_enum)]
    pub kind: GraphKind,
    /// Text file, table JSON, or MGTN image [H, W, C] for `vision`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Patch count for `vision` when no image is given; `grid4` then needs a
    /// square count.
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub connectivity: ConnectivityArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    Full,
    Grid4,
}

impl From<ConnectivityArg> for Connectivity {
    fn from(c: ConnectivityArg) -> Self {
        match c {
            ConnectivityArg::Full => Connectivity::Full,
            ConnectivityArg::Grid4 => Connectivity::Grid4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskModeArg {
    Graph,
    Open,
    Random,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> Self {
        match m {
            MaskModeArg::Graph => MaskMode::Graph,
            MaskModeArg::Open => MaskMode::Open,
            MaskModeArg::Random => MaskMode::Random,
        }
    }
}

#[derive(Args, Debug)]
pub struct ComposeMaskArgs {
    /// Dense region graph JSON.
    #[arg(long)]
    pub vision: PathBuf,
    /// Text graph JSON.
    #[arg(long)]
    pub text: PathBuf,
    /// Leave out the leading classification position.
    #[arg(long)]
    pub no_cls: bool,
    /// Keep self-loops only where the graph has them.
    #[arg(long)]
    pub graph_self_loops: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub rows: usize,
    #[arg(long, default_value_t = 3)]
    pub cols: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags overriding fields of a JSON config.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON file mirroring the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskModeArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Drop both the mask and the learned bias.
    #[arg(long)]
    pub vanilla: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mask_mode {
            cfg.mask_mode = v.into();
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.train_size {
            cfg.train_size = v;
        }
        if let Some(v) = self.eval_size {
            cfg.eval_size = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        cfg.vanilla |= self.vanilla;
        if let Ok(s) = std::env::var("MGT_SEED") {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("MGT_SEED={s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training set; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out set; generated from the config when absent.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log; defaults to `<out>/metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "graph")]
    pub mask_mode: MaskModeArg,
    #[arg(long)]
    pub vanilla: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, value_enum, default_value = "graph")]
    pub mask_mode: MaskModeArg,
    #[arg(long)]
    pub vanilla: bool,
    /// Output stem; writes `<out>.mgtn` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for `ablation.md` and `ablation.json`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn lexicon(path: &Option<PathBuf>) -> Result<Lexicon> {
    match path {
        Some(p) => Lexicon::read(p),
        None => Ok(Lexicon::default()),
    }
}

fn need<'a>(input: &'a Option<PathBuf>, kind: &str) -> Result<&'a Path> {
    input
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--kind {kind} needs --input")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn datasets(cfg: &TrainConfig, data: &Option<PathBuf>, eval_data: &Option<PathBuf>) -> Result<(Dataset, Dataset)> {
    let tr = match data {
        Some(p) => Dataset::read(p)?,
        None => generate_dataset(cfg.train_size, cfg.seed, cfg.scene)?,
    };
    let ev = match eval_data {
        Some(p) => Dataset::read(p)?,
        None => generate_dataset(cfg.eval_size.max(1), cfg.eval_seed(), tr.scene)?,
    };
    Ok((tr, ev))
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildGraph(a) => build_graph(a),
        Command::ComposeMask(a) => {
            let vision = Graph::read_json(&a.vision)?;
            let text = Graph::read_json(&a.text)?;
            let loops = if a.graph_self_loops { SelfLoops::FromGraph } else { SelfLoops::Open };
            let cls = usize::from(!a.no_cls);
            let mut spans = Vec::new();
            if cls == 1 {
                spans.push(ModalSpan::new(Modality::Special, 0, 1));
            }
            spans.push(ModalSpan::new(Modality::Vision, cls, vision.num_nodes()));
            spans.push(ModalSpan::new(Modality::Text, cls + vision.num_nodes(), text.num_nodes()));
            let per: BTreeMap<_, _> = [
                (Modality::Vision, graph_to_mask(&vision, loops)),
                (Modality::Text, graph_to_mask(&text, loops)),
            ]
            .into();
            let mask = compose_block_mask(&spans, &per, CrossPolicy::AllOpen)?;
            mask.write(&a.out)?;
            println!("L={} blocked={}", mask.size(), mask.blocked_count());
            Ok(())
        }
        Command::GenData(a) => {
            let scene = SceneSpec {
                rows: a.rows,
                cols: a.cols,
                patch_size: a.patch_size,
            };
            let ds = generate_dataset(a.n, a.seed, scene)?;
            if let Some(w) = balance_warning(a.n, ds.answers.len()) {
                eprintln!("warning: {w}");
            }
            ds.write(&a.out)?;
            println!("{} samples, class counts {:?}", ds.samples.len(), ds.class_counts());
            Ok(())
        }
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            let (tr, ev) = datasets(&cfg, &a.data, &a.eval_data)?;
            let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
            std::fs::create_dir_all(&a.out)?;
            let metrics = a.metrics.clone().unwrap_or_else(|| a.out.join("metrics.jsonl"));
            let mut log = File::create(&metrics)?;
            let out = train(&cfg, &tr, Some(&ev), resume, &mut log)?;
            log.flush()?;
            save_checkpoint(&a.out, &out.checkpoint)?;
            write_json(&a.out.join("config.json"), &cfg)?;
            println!(
                "train_acc={:.4} eval_acc={:.4}",
                out.train_accuracy,
                out.eval.map_or(0.0, |e| e.accuracy)
            );
            Ok(())
        }
        Command::Eval(a) => {
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let ds = Dataset::read(&a.data)?;
            let report = evaluate_checkpoint(&ckpt, &ds, a.mask_mode.into(), a.vanilla, a.seed)?;
            println!("accuracy={:.4}", report.accuracy);
            for c in &report.per_class {
                println!("  {}: {}/{} ({:.4})", c.answer, c.correct, c.total, c.accuracy);
            }
            if let Some(p) = a.out {
                write_json(&p, &report)?;
            }
            Ok(())
        }
        Command::DumpAttention(a) => {
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let mut ds = Dataset::read(&a.data)?;
            check_vocab(&ckpt, &ds)?;
            if a.index >= ds.samples.len() {
                return Err(Error::Index {
                    what: "sample",
                    index: a.index,
                    len: ds.samples.len(),
                });
            }
            ds.samples = vec![ds.samples.swap_remove(a.index)];
            let prepared = prepare(&ckpt.model, &ds, a.mask_mode.into(), a.vanilla, 0)?;
            let dump = dump_attention(&ckpt.model, &prepared[0], a.layer, a.head)?;
            write_dump(&a.out, &dump)?;
            println!("L={}", dump.weights.rows());
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            let (tr, ev) = datasets(&cfg, &None, &None)?;
            let rows = run_ablation(&cfg, &tr, &ev)?;
            std::fs::create_dir_all(&a.out)?;
            let md = ablation_markdown(&rows);
            std::fs::write(a.out.join("ablation.md"), &md)?;
            write_json(&a.out.join("ablation.json"), &rows)?;
            print!("{md}");
            Ok(())
        }
    }
}

fn build_graph(a: BuildGraphArgs) -> Result<()> {
    let graph = match a.kind {
        GraphKind::Text | GraphKind::Semantic => {
            let text = std::fs::read_to_string(need(&a.input, "text")?)?;
            let lex = lexicon(&a.lexicon)?;
            let (_, g) = if a.kind == GraphKind::Text {
                text_graph(&text, &lex)?
            } else {
                semantic_graph(&text, &lex)?
            };
            g
        }
        GraphKind::Table => {
            let table: Table = serde_json::from_str(&std::fs::read_to_string(need(&a.input, "table")?)?)?;
            table_graph(&table, &lexicon(&a.lexicon)?)?.1
        }
        GraphKind::Vision => {
            let (n, grid) = match (&a.input, a.patches) {
                (Some(p), _) => {
                    let g = patchify(&read_mgtn(p)?, a.patch_size)?;
                    (g.len(), Some((g.rows, g.cols)))
                }
                (None, Some(n)) => {
                    let side = n.isqrt();
                    (n, (side * side == n).then_some((side, side)))
                }
                (None, None) => return Err(Error::Config("--kind vision needs --input or --patches".into())),
            };
            build_dense_region_graph(n, a.connectivity.into(), grid)?
        }
    };
    graph.write_json(&a.out)?;
    println!("nodes={} edges={}", graph.num_nodes(), graph.edges().len());
    Ok(())
}
