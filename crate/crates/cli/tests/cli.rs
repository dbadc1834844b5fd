use std::fs;
use std::path::Path;

use targetflow::chemmetrics::{MetricsReport, MoleculeRow};
use targetflow_cli::{
    emit_density_data, run, sha256_file, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE,
};

fn tf(args: &[&str]) -> i32 {
    run(std::iter::once("targetflow").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
[molio]
vocab = C,N,O
max_atoms = 5

[flow]
coupling_blocks = 2
bond_hidden = 4
atom_hidden = 3

[encoder]
kmer = 1
encoder_hidden = 3
";

fn row(index: usize, sim: Option<f64>) -> MoleculeRow {
    MoleculeRow {
        index,
        valid: sim.is_some(),
        unique: sim.is_some(),
        novel: sim.map(|_| true),
        nn_tanimoto: sim,
    }
}

fn report(rows: Vec<MoleculeRow>) -> MetricsReport {
    MetricsReport {
        generated: rows.len(),
        valid: rows.iter().filter(|r| r.valid).count(),
        validity: 0.0,
        uniqueness: 0.0,
        novelty: 0.0,
        nn_tanimoto: 0.0,
        rows,
    }
}

#[test]
fn synthetic_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    assert_eq!(
        tf(&[
            "make-synthetic",
            "--pairs",
            "64",
            "--seed",
            "7",
            "--out",
            p(&a)
        ]),
        EXIT_OK
    );
    assert_eq!(
        tf(&[
            "make-synthetic",
            "--pairs",
            "64",
            "--seed",
            "7",
            "--out",
            p(&b)
        ]),
        EXIT_OK
    );
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 64);
    assert!(dir.path().join("a.tsv.manifest.json").exists());
}

#[test]
fn eval_of_training_set_has_zero_novelty() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tsv");
    assert_eq!(
        tf(&["make-synthetic", "--pairs", "12", "--out", p(&data)]),
        EXIT_OK
    );
    let out = dir.path().join("ev");
    assert_eq!(
        tf(&[
            "eval",
            "--generated",
            p(&data),
            "--train",
            p(&data),
            "--out",
            p(&out)
        ]),
        EXIT_OK
    );
    let r: MetricsReport =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((r.novelty, r.validity), (0.0, 100.0));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn density_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("density.csv");
    emit_density_data(&report(vec![]), &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "metric_name,value\n");

    let sims = [0.25, 1.0 / 3.0, 0.123456789012345];
    emit_density_data(
        &report(
            sims.iter()
                .enumerate()
                .map(|(i, &s)| row(i, Some(s)))
                .collect(),
        ),
        &path,
    )
    .unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.len(), 3);
    for (line, s) in lines.iter().zip(sims) {
        let (name, value) = line.split_once(',').unwrap();
        assert_eq!(name, "nn_tanimoto");
        assert!((value.parse::<f64>().unwrap() - 100.0 * s).abs() < 1e-12);
    }
}

#[test]
fn usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tf(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(tf(&["train", "--out", "x"]), EXIT_USAGE);
    assert_eq!(
        tf(&["ingest", "--data", "x", "--no-such-key", "1"]),
        EXIT_USAGE
    );
    assert_eq!(
        tf(&["ingest", "--data", "x", "--epochs", "many"]),
        EXIT_USAGE
    );
    let missing = dir.path().join("missing.tsv");
    assert_eq!(tf(&["ingest", "--data", p(&missing)]), EXIT_DATA);
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "T1\tMKV\tC(C\n").unwrap();
    assert_eq!(tf(&["ingest", "--data", p(&bad)]), EXIT_DATA);
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[train]\nvocab = C\n").unwrap();
    assert_eq!(
        tf(&["--config", p(&cfg), "ingest", "--data", p(&bad)]),
        EXIT_USAGE
    );
}

#[test]
fn audit_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("d.tsv");
    assert_eq!(
        tf(&[
            "--config",
            p(&cfg),
            "make-synthetic",
            "--pairs",
            "8",
            "--out",
            p(&data)
        ]),
        EXIT_OK
    );
    let out = dir.path().join("audit.json");
    let args = [
        "--config",
        p(&cfg),
        "audit",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--batch-size",
        "8",
    ];
    assert_eq!(tf(&args), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["checked"].as_u64().unwrap() > 100);
    // a tolerance no central difference can meet
    assert_eq!(
        tf(&[
            "--config",
            p(&cfg),
            "audit",
            "--data",
            p(&data),
            "--tolerance",
            "0"
        ]),
        EXIT_NUMERIC
    );
}

#[test]
fn train_generate_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("d.tsv");
    let c = p(&cfg);
    assert_eq!(
        tf(&[
            "--config",
            c,
            "make-synthetic",
            "--pairs",
            "16",
            "--out",
            p(&data)
        ]),
        EXIT_OK
    );

    let run_dir = dir.path().join("run");
    let train = [
        "--config",
        c,
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--epochs",
        "3",
        "--threads",
        "1",
    ];
    assert_eq!(tf(&train), EXIT_OK);
    let ckpt = run_dir.join("model.ckpt");
    let loss = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,align,unif,total"));
    assert_eq!(loss.lines().count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoint_sha256"], sha256_file(&ckpt).unwrap());
    assert_eq!(manifest["seed"], 0);

    // identical manifest, identical outputs
    let again = dir.path().join("again");
    let train2 = [
        "--config",
        c,
        "train",
        "--data",
        p(&data),
        "--out",
        p(&again),
        "--epochs",
        "3",
        "--threads",
        "1",
    ];
    assert_eq!(tf(&train2), EXIT_OK);
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );

    let gen = dir.path().join("gen.tsv");
    let args = [
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&gen),
        "--tsv",
        "--samples",
        "5",
    ];
    assert_eq!(tf(&args), EXIT_OK);
    let text = fs::read_to_string(&gen).unwrap();
    assert_eq!(text.lines().count(), 4 * 5);
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!((first[0], first[1]), ("T000", "0"));
    assert!(dir.path().join("gen.tsv.manifest.json").exists());

    let ev = dir.path().join("ev");
    assert_eq!(
        tf(&[
            "--config",
            c,
            "eval",
            "--generated",
            p(&gen),
            "--train",
            p(&data),
            "--out",
            p(&ev)
        ]),
        EXIT_OK
    );
    let r: MetricsReport =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((r.generated, r.validity), (20, 100.0));

    // a different architecture cannot use this checkpoint
    let smi = dir.path().join("one.smi");
    let mismatch = [
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--sequence",
        "MKVL",
        "--out",
        p(&smi),
        "--max-atoms",
        "6",
    ];
    assert_eq!(tf(&mismatch), EXIT_DATA);
    let single = [
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--sequence",
        "MKVL",
        "--out",
        p(&smi),
    ];
    assert_eq!(tf(&single), EXIT_OK);
    assert_eq!(fs::read_to_string(&smi).unwrap().lines().count(), 10);
}
