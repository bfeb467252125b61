use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hetgpt_core::checkpoint::Checkpoint;
use hetgpt_core::encoder::{pretrain as pretrain_encoder, FrozenEncoder};
use hetgpt_core::hetgraph::{read_graph, write_graph, HetGraph};
use hetgpt_core::synth::{self, Split, SplitSpec};
use hetgpt_core::tuner::{
    self, evaluate_model, finetune, finetune_trainable_params, summary_row, Metrics, PromptModel, RunRecord,
    TuneContext, RESULTS_HEADER,
};
use hetgpt_core::Error;

use crate::config::{Overrides, RunConfig};
use crate::CliError;

pub const GRAPH_FILE: &str = "graph.txt";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const RESULTS_FILE: &str = "results.tsv";
pub const TIMINGS_FILE: &str = "timings.tsv";
const TIMINGS_HEADER: &str = "command\tmethod\tseed\tseconds";
const PROMPT_KIND: &str = "hetgpt-prompt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Partition {
    Labeled,
    Val,
    Test,
}

impl Partition {
    fn nodes(self, split: &Split) -> &[usize] {
        match self {
            Partition::Labeled => &split.labeled,
            Partition::Val => &split.val,
            Partition::Test => &split.test,
        }
    }
}

pub fn setup(config: &Option<PathBuf>, flags: Overrides, out_dir: &Path) -> Result<RunConfig, CliError> {
    if !out_dir.is_dir() {
        return Err(CliError::Config(format!(
            "output directory {} does not exist",
            out_dir.display()
        )));
    }
    RunConfig::resolve(config.as_deref(), &flags)
}

fn load_graph(path: &Path) -> Result<HetGraph, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "graph file {} does not exist",
            path.display()
        )));
    }
    Ok(read_graph(path)?)
}

fn dataset_name(graph: &HetGraph) -> String {
    graph
        .metadata()
        .iter()
        .find(|(k, _)| k == "name")
        .map_or_else(|| "graph".to_string(), |(_, v)| v.clone())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Appends `rows` under `header`, writing the header into a new or empty
/// file and refusing a file that starts with a different one.
fn append_rows(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let existing = std::fs::read_to_string(path).unwrap_or_default();
    if let Some(first) = existing.lines().next() {
        if first != header {
            return Err(CliError::Config(format!("{} has an unexpected header", path.display())));
        }
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    if existing.is_empty() {
        text.push_str(header);
        text.push('\n');
    }
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

fn timing_row(command: &str, method: &str, seed: u64, start: Instant) -> String {
    format!("{command}\t{method}\t{seed}\t{:.3}", start.elapsed().as_secs_f64())
}

pub fn synth(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let graph = synth::generate(&cfg.synth)?;
    let path = out_dir.join(GRAPH_FILE);
    write_file(&path, &write_graph(&graph))?;
    for t in graph.node_types() {
        say!("{}\t{}", t.name, t.count);
    }
    say!("wrote {}", path.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, graph: &Path, out_dir: &Path) -> Result<(), CliError> {
    let graph = load_graph(graph)?;
    let (enc, report) = pretrain_encoder(&graph, &cfg.pretrain)?;
    let path = out_dir.join(ENCODER_FILE);
    enc.save(&path)?;
    let mut curve = String::from("epoch\tloss\n");
    for (e, l) in report.losses.iter().enumerate() {
        writeln!(curve, "{e}\t{l:e}").unwrap();
    }
    write_file(&out_dir.join("pretrain_loss.tsv"), &curve)?;
    let (first, last) = (
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN),
    );
    say!("initial_loss\t{first:.6}");
    say!("final_loss\t{last:.6}");
    say!("params_hash\t{}", enc.params_hash());
    say!("wrote {}", path.display());
    Ok(())
}

fn load_encoder(path: &Path, graph: &HetGraph) -> Result<FrozenEncoder, CliError> {
    if !path.is_file() {
        return Err(CliError::Core(Error::Checkpoint(format!(
            "{} does not exist",
            path.display()
        ))));
    }
    Ok(FrozenEncoder::load(path, graph)?)
}

fn prompt_file(seed: u64) -> String {
    format!("prompt-seed{seed}.ckpt")
}

#[allow(clippy::too_many_arguments)]
fn record(
    cfg: &RunConfig,
    dataset: &str,
    method: &str,
    seed: u64,
    epochs: usize,
    m: &Metrics,
    trainable: usize,
    frozen: usize,
) -> RunRecord {
    RunRecord {
        dataset: dataset.to_string(),
        method: method.to_string(),
        seed,
        shots: cfg.shots,
        k: cfg.tune.k,
        lambda: cfg.tune.lambda,
        tau: cfg.tune.tau,
        lr: cfg.tune.lr,
        epochs,
        macro_f1: m.macro_f1,
        micro_f1: m.micro_f1,
        trainable_params: trainable,
        frozen_params: frozen,
    }
}

pub fn tune(cfg: &RunConfig, graph: &Path, checkpoint: &Path, out_dir: &Path) -> Result<(), CliError> {
    let graph = load_graph(graph)?;
    let enc = load_encoder(checkpoint, &graph)?;
    let ctx = TuneContext::new(&graph, &enc)?;
    let dataset = dataset_name(&graph);
    let results = out_dir.join(RESULTS_FILE);
    let mut records = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let seed = cfg.repeat_seed(r);
        let start = Instant::now();
        let spec = cfg.split_spec(seed);
        let split = synth::split(&graph, &spec)?;
        let out = tuner::tune(&graph, &enc, &split, &cfg.tune_config(seed))?;
        let test = evaluate_model(&out.model, &ctx, &split.test)?;
        let mut ck = out.model.to_checkpoint(&ctx);
        record_split(&mut ck, &spec);
        ck.save(&out_dir.join(prompt_file(seed)))?;
        let rec = record(
            cfg,
            &dataset,
            "prompt",
            seed,
            out.epochs_run,
            &test,
            out.model.num_trainable(),
            enc.encoder().num_params(),
        );
        append_rows(&results, RESULTS_HEADER, &[rec.to_row()])?;
        append_rows(
            &out_dir.join(TIMINGS_FILE),
            TIMINGS_HEADER,
            &[timing_row("tune", "prompt", seed, start)],
        )?;
        say!(
            "seed {seed}: macro_f1 {:.4} micro_f1 {:.4} best_epoch {} epochs {}",
            test.macro_f1,
            test.micro_f1,
            out.best_epoch,
            out.epochs_run
        );
        records.push(rec);
    }
    let summary = summary_row(&records);
    append_rows(&results, RESULTS_HEADER, std::slice::from_ref(&summary))?;
    say!("{summary}");
    Ok(())
}

fn record_split(ck: &mut Checkpoint, spec: &SplitSpec) {
    ck.set("split_shots", vec![spec.shots.to_string()]);
    ck.set("split_seed", vec![spec.seed.to_string()]);
    ck.set("split_val", vec![spec.val_size.to_string()]);
    ck.set("split_test", vec![spec.test_size.to_string()]);
}

fn recorded_split(ck: &Checkpoint) -> Result<SplitSpec, CliError> {
    Ok(SplitSpec {
        shots: ck.parse_value("split_shots")?,
        seed: ck.parse_value("split_seed")?,
        val_size: ck.parse_value("split_val")?,
        test_size: ck.parse_value("split_test")?,
    })
}

pub struct EvalArgs<'a> {
    pub graph: &'a Path,
    pub checkpoint: &'a Path,
    pub prompt: &'a Path,
    pub partition: Partition,
    pub dump: Option<&'a Path>,
    /// Flag values that replace the split recorded in the prompt.
    pub split: Overrides,
}

pub fn eval(args: &EvalArgs, out_dir: &Path) -> Result<(), CliError> {
    let graph = load_graph(args.graph)?;
    let enc = load_encoder(args.checkpoint, &graph)?;
    let ctx = TuneContext::new(&graph, &enc)?;
    if !args.prompt.is_file() {
        return Err(CliError::Core(Error::Checkpoint(format!(
            "{} does not exist",
            args.prompt.display()
        ))));
    }
    let ck = Checkpoint::load(args.prompt, PROMPT_KIND)?;
    let model = PromptModel::from_checkpoint(&ck, &ctx)?;
    let mut spec = recorded_split(&ck)?;
    if let Some(shots) = args.split.shots {
        spec.shots = shots;
    }
    if let Some(seed) = args.split.seed {
        spec.seed = seed;
    }
    let split = synth::split(&graph, &spec)?;
    let nodes = args.partition.nodes(&split);
    let m = evaluate_model(&model, &ctx, nodes)?;
    let mut report = format!("macro_f1\t{:.6}\nmicro_f1\t{:.6}\n", m.macro_f1, m.micro_f1);
    for (c, s) in m.per_class.iter().enumerate() {
        writeln!(report, "class_{c}\tf1\t{:.6}\tsupport\t{}", s.f1, s.support).unwrap();
    }
    if !crate::quiet() {
        print!("{report}");
    }
    write_file(&out_dir.join("metrics.tsv"), &report)?;
    if let Some(path) = args.dump {
        write_file(path, &embedding_dump(&model, &ctx, &graph, &split)?)?;
        say!("wrote {}", path.display());
    }
    Ok(())
}

fn embedding_dump(model: &PromptModel, ctx: &TuneContext, graph: &HetGraph, split: &Split) -> Result<String, CliError> {
    let z = model.node_tokens(ctx)?;
    let all: Vec<usize> = (0..graph.num_targets()).collect();
    let pred = model.predict(ctx, &all)?;
    let mut out = String::from("node\tlabel\tpredicted\tpartition");
    for j in 0..z.cols() {
        write!(out, "\tz{j}").unwrap();
    }
    out.push('\n');
    for v in all {
        let part = if split.labeled.binary_search(&v).is_ok() {
            "labeled"
        } else if split.val.binary_search(&v).is_ok() {
            "val"
        } else if split.test.binary_search(&v).is_ok() {
            "test"
        } else {
            "none"
        };
        let label = graph.labels()[v].map_or_else(|| "-".to_string(), |c| c.to_string());
        write!(out, "{v}\t{label}\t{}\t{part}", pred[v]).unwrap();
        for x in z.row(v) {
            write!(out, "\t{x:e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

pub fn compare(cfg: &RunConfig, graph: &Path, checkpoint: &Path, out_dir: &Path) -> Result<(), CliError> {
    let graph = load_graph(graph)?;
    let enc = load_encoder(checkpoint, &graph)?;
    let ctx = TuneContext::new(&graph, &enc)?;
    let c = graph.num_classes();
    let mut report =
        String::from("seed\tsplit_hash\tmethod\tbest_epoch\tepochs\tmacro_f1\tmicro_f1\ttrainable_params\n");
    let mut curves = String::from("method\tseed\tepoch\tloss\tval_macro_f1\n");
    let mut best_epochs = [Vec::new(), Vec::new()];
    let mut macro_f1 = [Vec::new(), Vec::new()];
    let ft_params = finetune_trainable_params(&enc, c);
    let mut prompt_params = 0;
    for r in 0..cfg.repeats {
        let seed = cfg.repeat_seed(r);
        let spec = cfg.split_spec(seed);
        let prompt_split = synth::split(&graph, &spec)?;
        let ft_split = synth::split(&graph, &spec)?;
        let hash = prompt_split.hash();
        if hash != ft_split.hash() {
            return Err(CliError::Core(Error::Contract(format!(
                "seed {seed}: arms received different splits"
            ))));
        }
        let tcfg = cfg.tune_config(seed);
        let p = tuner::tune(&graph, &enc, &prompt_split, &tcfg)?;
        let p_test = evaluate_model(&p.model, &ctx, &prompt_split.test)?;
        prompt_params = p.model.num_trainable();
        let f = finetune(&graph, &enc, &ft_split, &tcfg)?;
        let arms = [
            (
                "prompt",
                p.best_epoch,
                p.epochs_run,
                &p_test,
                prompt_params,
                &p.losses,
                &p.val_macro_f1,
            ),
            (
                "finetune",
                f.best_epoch,
                f.epochs_run,
                &f.test,
                f.trainable_params,
                &f.losses,
                &f.val_macro_f1,
            ),
        ];
        for (i, (name, best, run, m, params, losses, vals)) in arms.into_iter().enumerate() {
            writeln!(
                report,
                "{seed}\t{hash}\t{name}\t{best}\t{run}\t{:.6}\t{:.6}\t{params}",
                m.macro_f1, m.micro_f1
            )
            .unwrap();
            for (e, (l, v)) in losses.iter().zip(vals.iter()).enumerate() {
                writeln!(curves, "{name}\t{seed}\t{e}\t{l:e}\t{v:.6}").unwrap();
            }
            best_epochs[i].push(best);
            macro_f1[i].push(m.macro_f1);
        }
        say!(
            "seed {seed}: prompt macro_f1 {:.4} best_epoch {} | finetune macro_f1 {:.4} best_epoch {}",
            p_test.macro_f1,
            p.best_epoch,
            f.test.macro_f1,
            f.best_epoch
        );
    }
    write_file(&out_dir.join("compare.tsv"), &report)?;
    write_file(&out_dir.join("curves.tsv"), &curves)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    say!(
        "prompt\tmean_macro_f1 {:.4}\tmedian_best_epoch {}\ttrainable {prompt_params}",
        mean(&macro_f1[0]),
        median(&mut best_epochs[0])
    );
    say!(
        "finetune\tmean_macro_f1 {:.4}\tmedian_best_epoch {}\ttrainable {ft_params}",
        mean(&macro_f1[1]),
        median(&mut best_epochs[1])
    );
    say!("param_ratio\t{:.4}", prompt_params as f64 / ft_params as f64);
    Ok(())
}
