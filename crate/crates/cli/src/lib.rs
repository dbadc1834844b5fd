//! `targetflow` subcommands. [`run`] is the whole program; `main` only
//! forwards its exit code.

mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use targetflow::chemmetrics::{evaluate, ValenceTable};
use targetflow::config::{section_of, RunConfig};
use targetflow::flowcore::{perturb_params, Parameterized};
use targetflow::molio::{load_pairs, parse_smiles, MolGraph, PairDataset, PairRecord, Split};
use targetflow::sampler::{generate, GenerationRequest};
use targetflow::synthetic::{make_synthetic, to_tsv};
use targetflow::trainer::{
    audit_gradients, draw_noise, load_checkpoint, save_checkpoint, train, Checkpoint, Example,
};
use targetflow::{Error, Result};

pub use output::{emit_density_data, graph_smiles, sha256_file, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "targetflow",
    version,
    about = "Target-conditioned molecular graph generation",
    after_help = "Any config key can also be given as a flag, e.g. `--epochs 20 --threads 1`."
)]
struct Cli {
    /// INI-style config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a pair dataset and print a summary.
    Ingest {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model; writes model.ckpt, loss.csv and manifest.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// train, valid, test or all.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample molecules for targets from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose distinct targets are generated for.
        #[arg(long, conflicts_with = "sequence")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        split: String,
        /// A single target sequence instead of a dataset.
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long, default_value = "target")]
        target_id: String,
        #[arg(long)]
        out: PathBuf,
        /// Write target_id, sample_index and SMILES columns.
        #[arg(long)]
        tsv: bool,
    },
    /// Score generated molecules against a training set.
    Eval {
        /// SMILES per line, or TSV whose last column is SMILES.
        #[arg(long)]
        generated: PathBuf,
        /// Training molecules, same formats.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central differences on one batch.
    Audit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Std of the random offsets added to all parameters first, so that
        /// zero-initialized layers are exercised too.
        #[arg(long, default_value_t = 0.1)]
        perturb: f64,
        /// JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the deterministic synthetic dataset (seed from the config).
    MakeSynthetic {
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure of one subcommand, already mapped to an exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            msg: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Exit code for a library error: numerical failures are 3, bad
/// configuration is 1, everything else is a data error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::NonFinite(_)
        | Error::Singular { .. }
        | Error::ZeroScale { .. }
        | Error::NotNormalized { .. } => EXIT_NUMERIC,
        Error::Config(_) | Error::Range { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Moves `--key value` and `--key=value` pairs naming config keys out of
/// `args`. Dashes in flag names are read as underscores.
fn split_overrides(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(flag) = a.strip_prefix("--") {
            let (name, inline) = match flag.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (flag, None),
            };
            let key = name.replace('-', "_");
            if section_of(&key).is_some() {
                match inline {
                    Some(v) => overrides.push((key, v)),
                    None if i + 1 < args.len() => {
                        overrides.push((key, args[i + 1].clone()));
                        i += 1;
                    }
                    // a dangling flag is left for clap to reject
                    None => rest.push(a.clone()),
                }
                i += 1;
                continue;
            }
        }
        rest.push(a.clone());
        i += 1;
    }
    (rest, overrides)
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[(String, String)]) -> Result<()> {
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()
}

fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

fn set_threads(cfg: &RunConfig) {
    if cfg.threads > 0 {
        // fails only if a pool already exists, e.g. when run() is called twice
        if rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .is_err()
        {
            log::debug!("global thread pool already configured");
        }
    }
}

fn parse_split(s: &str) -> CmdResult<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e: Error| Failure {
        code: EXIT_USAGE,
        msg: e.to_string(),
    })
}

fn select(ds: &PairDataset, split: Option<Split>) -> Vec<&PairRecord> {
    match split {
        Some(s) => ds.split(s),
        None => ds.records.iter().collect(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SMILES column of a molecule file: the whole line, or the last tab field.
/// Blank lines and `#` comments are skipped.
fn read_smiles_column(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.rsplit('\t').next().unwrap_or(l).trim().to_string())
        .collect())
}

/// Runs the program on `argv` (including the program name) and returns the
/// exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let args: Vec<String> = argv.into_iter().map(Into::into).collect();
    let (rest, overrides) = split_overrides(&args);
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, &overrides) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> CmdResult {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest { data } => ingest(resolve(config, overrides)?, &data),
        Command::Train { data, split, out } => cmd_train(
            resolve(config, overrides)?,
            &data,
            parse_split(&split)?,
            &out,
        ),
        Command::Generate {
            checkpoint,
            data,
            split,
            sequence,
            target_id,
            out,
            tsv,
        } => {
            let targets = match (data, sequence) {
                (Some(d), None) => TargetSource::Data(d, parse_split(&split)?),
                (None, Some(s)) => TargetSource::Sequence(target_id, s),
                _ => {
                    return Err(Failure {
                        code: EXIT_USAGE,
                        msg: "generate needs exactly one of --data or --sequence".into(),
                    })
                }
            };
            cmd_generate(config, overrides, &checkpoint, targets, &out, tsv)
        }
        Command::Eval {
            generated,
            train,
            out,
        } => cmd_eval(resolve(config, overrides)?, &generated, &train, &out),
        Command::Audit {
            data,
            tolerance,
            perturb,
            out,
        } => cmd_audit(
            resolve(config, overrides)?,
            &data,
            tolerance,
            perturb,
            out.as_deref(),
        ),
        Command::MakeSynthetic { pairs, out } => {
            cmd_synthetic(resolve(config, overrides)?, pairs, &out)
        }
    }
}

fn ingest(cfg: RunConfig, data: &Path) -> CmdResult {
    let ds = load_pairs(data, &cfg.graph_config())?;
    let all: Vec<&PairRecord> = ds.records.iter().collect();
    println!("records\t{}", ds.len());
    println!("targets\t{}", ds.targets(&all).len());
    for s in [Split::Train, Split::Valid, Split::Test] {
        let recs = ds.split(s);
        println!(
            "{}\t{} records, {} targets",
            s.name(),
            recs.len(),
            ds.targets(&recs).len()
        );
    }
    if !ds.is_empty() {
        let atoms: Vec<usize> = ds.records.iter().map(|r| r.graph.n_heavy()).collect();
        let mean = atoms.iter().sum::<usize>() as f64 / atoms.len() as f64;
        println!(
            "heavy atoms\tmin {} / mean {:.2} / max {}",
            atoms.iter().min().unwrap(),
            mean,
            atoms.iter().max().unwrap()
        );
    }
    Ok(())
}

fn cmd_train(cfg: RunConfig, data: &Path, split: Option<Split>, out: &Path) -> CmdResult {
    log::info!("resolved config:\n{}", cfg.to_text());
    set_threads(&cfg);
    let ds = load_pairs(data, &cfg.graph_config())?;
    let recs = select(&ds, split);
    if recs.is_empty() {
        return Err(Error::Empty.into());
    }
    let examples: Vec<Example> = recs
        .iter()
        .map(|r| Example {
            sequence: &r.sequence,
            graph: &r.graph,
        })
        .collect();
    create_dir(out)?;
    let mut ck = Checkpoint::new(cfg.clone())?;
    let tc = cfg.train_config();
    let mut csv = String::from("epoch,align,unif,total\n");
    let history = train(&mut ck.model, &mut ck.adam, &examples, &tc, |epoch, r| {
        log::info!(
            "epoch {:>4}  align {:.6}  unif {:.6}  total {:.6}",
            epoch + 1,
            r.align,
            r.unif,
            r.total
        );
    })?;
    for (i, r) in history.iter().enumerate() {
        csv.push_str(&format!(
            "{},{:.12},{:.12},{:.12}\n",
            i + 1,
            r.align,
            r.unif,
            r.total
        ));
    }
    ck.epoch = history.len() as u64;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ck, &ckpt)?;
    let loss = out.join("loss.csv");
    write_file(&loss, &csv)?;
    let mut m = Manifest::new("train", &cfg);
    m.input("data", data);
    m.checkpoint(&ckpt)?;
    m.output(&ckpt);
    m.output(&loss);
    m.write(&out.join("manifest.json"))?;
    Ok(())
}

enum TargetSource {
    Data(PathBuf, Option<Split>),
    Sequence(String, String),
}

fn cmd_generate(
    config: Option<&Path>,
    overrides: &[(String, String)],
    checkpoint: &Path,
    targets: TargetSource,
    out: &Path,
    tsv: bool,
) -> CmdResult {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => ck.config.clone(),
    };
    apply_overrides(&mut cfg, overrides)?;
    ck.check_compatible(&cfg.model_config())?;
    log::info!("resolved config:\n{}", cfg.to_text());
    set_threads(&cfg);
    let gc = cfg.graph_config();
    let pairs: Vec<(String, String)> = match &targets {
        TargetSource::Data(path, split) => {
            let ds = load_pairs(path, &gc)?;
            let recs = select(&ds, *split);
            ds.targets(&recs)
                .into_iter()
                .map(|(id, s)| (id.to_string(), s.to_string()))
                .collect()
        }
        TargetSource::Sequence(id, s) => vec![(id.clone(), s.clone())],
    };
    if pairs.is_empty() {
        return Err(Error::Empty.into());
    }
    let lambda = cfg.gen_lambda.unwrap_or(ck.config.lambda);
    let mut text = String::new();
    let (mut raw_ok, mut total) = (0usize, 0usize);
    for (t, (id, seq)) in pairs.iter().enumerate() {
        let req = GenerationRequest {
            sequence: seq.clone(),
            samples: cfg.samples,
            lambda,
            seed: cfg.seed.wrapping_add(t as u64),
            correction: cfg.correction,
        };
        let generation = generate(&req, &ck.model)?;
        for (i, m) in generation.molecules.iter().enumerate() {
            let smiles = graph_smiles(&m.graph, &gc)?;
            if tsv {
                text.push_str(&format!("{id}\t{i}\t{smiles}\n"));
            } else {
                text.push_str(&smiles);
                text.push('\n');
            }
            raw_ok += m.raw_valid as usize;
            total += 1;
        }
    }
    log::info!(
        "validity before correction: {:.2}% of {total}",
        100.0 * raw_ok as f64 / total as f64
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &text)?;
    let mut m = Manifest::new("generate", &cfg);
    if let TargetSource::Data(path, _) = &targets {
        m.input("data", path);
    }
    m.input("checkpoint", checkpoint);
    m.checkpoint(checkpoint)?;
    m.output(out);
    m.write(&output::sidecar(out))?;
    Ok(())
}

fn parse_column(path: &Path, cfg: &RunConfig, lenient: bool) -> Result<Vec<MolGraph>> {
    let gc = cfg.graph_config();
    read_smiles_column(path)?
        .iter()
        .enumerate()
        .map(|(i, s)| match parse_smiles(s, &gc) {
            Ok(g) => Ok(g),
            // an unparsable generated string counts as an invalid molecule
            Err(e) if lenient => {
                log::debug!("{}:{}: {e}", path.display(), i + 1);
                Ok(MolGraph::empty(gc.shape()))
            }
            Err(e) => Err(Error::AtLine {
                line: i + 1,
                source: Box::new(e),
            }),
        })
        .collect()
}

fn cmd_eval(cfg: RunConfig, generated: &Path, train_path: &Path, out: &Path) -> CmdResult {
    log::info!("resolved config:\n{}", cfg.to_text());
    let gen = parse_column(generated, &cfg, true)?;
    let train_set = parse_column(train_path, &cfg, false)?;
    let table = ValenceTable::from_vocab(&cfg.vocab);
    let report = evaluate(&gen, &train_set, &table, cfg.fingerprint())?;
    create_dir(out)?;
    let (json, csv, density) = (
        out.join("metrics.json"),
        out.join("metrics.csv"),
        out.join("density.csv"),
    );
    write_file(&json, &report.to_json())?;
    write_file(&csv, &report.to_csv())?;
    emit_density_data(&report, &density)?;
    println!(
        "validity {:.2}  uniqueness {:.2}  novelty {:.2}  nn_tanimoto {:.2}  ({} molecules)",
        report.validity, report.uniqueness, report.novelty, report.nn_tanimoto, report.generated
    );
    let mut m = Manifest::new("eval", &cfg);
    m.input("generated", generated);
    m.input("train", train_path);
    for p in [&json, &csv, &density] {
        m.output(p);
    }
    m.write(&out.join("manifest.json"))?;
    Ok(())
}

fn cmd_audit(
    cfg: RunConfig,
    data: &Path,
    tolerance: f64,
    perturb: f64,
    out: Option<&Path>,
) -> CmdResult {
    log::info!("resolved config:\n{}", cfg.to_text());
    set_threads(&cfg);
    let ds = load_pairs(data, &cfg.graph_config())?;
    let batch: Vec<Example> = ds
        .records
        .iter()
        .take(cfg.batch_size)
        .map(|r| Example {
            sequence: &r.sequence,
            graph: &r.graph,
        })
        .collect();
    let mut ck = Checkpoint::new(cfg.clone())?;
    let n_params = ck.model.num_params();
    if n_params > 5000 {
        log::warn!(
            "auditing {n_params} parameters; this evaluates the batch loss twice per parameter"
        );
    }
    let tc = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = draw_noise(&ck.model, &batch, &tc, &mut rng)?;
    ck.model.initialize(&noise.graphs)?;
    if perturb > 0.0 {
        perturb_params(&mut ck.model, perturb, &mut rng);
    }
    let report = audit_gradients(&ck.model, &batch, &noise, &tc, tolerance)?;
    for s in &report.sections {
        println!(
            "{:<8} checked {:>6}  max rel err {:.3e}  failures {}",
            s.name,
            s.checked,
            s.max_rel_err,
            s.failures.len()
        );
    }
    for f in report.failures() {
        println!(
            "FAIL {}  analytic {:.6e}  numeric {:.6e}  rel {:.3e}",
            f.path, f.analytic, f.numeric, f.rel_err
        );
    }
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(path, &json)?;
        let mut m = Manifest::new("audit", &cfg);
        m.input("data", data);
        m.output(path);
        m.write(&output::sidecar(path))?;
    }
    if report.passed() {
        println!(
            "audit passed ({} of {} parameters checked)",
            report.checked, report.total_params
        );
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            msg: format!("gradient audit failed at tolerance {tolerance:e}"),
        })
    }
}

fn cmd_synthetic(cfg: RunConfig, pairs: usize, out: &Path) -> CmdResult {
    let records = make_synthetic(pairs, cfg.seed, &cfg.graph_config())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &to_tsv(&records))?;
    let mut m = Manifest::new("make-synthetic", &cfg);
    m.output(out);
    m.write(&output::sidecar(out))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_subcommand_flags() {
        let (rest, ov) = split_overrides(&strings(&[
            "targetflow",
            "make-synthetic",
            "--pairs",
            "64",
            "--seed",
            "7",
            "--batch-size=4",
            "--out",
            "x.tsv",
        ]));
        assert_eq!(
            rest,
            strings(&[
                "targetflow",
                "make-synthetic",
                "--pairs",
                "64",
                "--out",
                "x.tsv"
            ])
        );
        assert_eq!(
            ov,
            vec![
                ("seed".to_string(), "7".to_string()),
                ("batch_size".to_string(), "4".to_string())
            ]
        );
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::EmptyTrain), EXIT_DATA);
        let nested = Error::AtLine {
            line: 3,
            source: Box::new(Error::Vocab {
                symbol: "Xe".into(),
            }),
        };
        assert_eq!(exit_code(&nested), EXIT_DATA);
    }
}
