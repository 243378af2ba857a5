use std::path::Path;
use std::process::{Command, Output};

use idea::data::synth::{generate, SynthSpec};
use idea::data::DatasetBundle;
use idea::manifest::{RunManifest, RUN_MANIFEST_FILE};

fn idea(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idea"))
        .args(args)
        .current_dir(cwd)
        .env_remove("IDEA_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_dataset(dir: &Path) {
    let g = generate(&SynthSpec::toy(60, 3), 3).unwrap();
    DatasetBundle::from_graph(g, "toy", 3).unwrap().save(dir).unwrap();
}

fn small_config(dir: &Path, epochs: usize) -> String {
    let p = dir.join("small.cfg");
    std::fs::write(
        &p,
        format!("epochs = {epochs}\nhidden = 8\nlatent = 4\ndomain_hidden = 4\nnum_domains = 3\n"),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> RunManifest {
    idea::data::read_json(&dir.join(RUN_MANIFEST_FILE)).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn prepare_data_is_reproducible_and_reports_missing_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    toy_dataset(&t.join("raw"));
    assert_eq!(code(&idea(&["prepare-data", "raw", "a", "--seed", "4"], t)), 0);
    assert_eq!(code(&idea(&["prepare-data", "raw", "b", "--seed", "4"], t)), 0);
    for f in ["meta.json", "edges.tsv", "features.csv", "labels.tsv", "splits.json", "node_map.tsv"] {
        assert_eq!(read(t.join("a").join(f)), read(t.join("b").join(f)), "{f}");
    }
    let m = manifest(&t.join("a"));
    assert_eq!(m.command, "prepare-data");
    assert_eq!(m.seed, Some(4));
    assert!(m.outputs.iter().all(|p| t.join(p).exists()));

    std::fs::remove_file(t.join("raw/labels.tsv")).unwrap();
    let o = idea(&["prepare-data", "raw", "c"], t);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("labels.tsv"));
}

#[test]
fn train_outputs_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    toy_dataset(&t.join("data"));
    let cfg = small_config(t, 4);

    let o = idea(&["train", "data", "--config", &cfg, "--out", "init", "--epochs", "0"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.join("init/checkpoint/model.bin").exists());
    assert!(!t.join("init/metrics.csv").exists());
    let ck = idea::checkpoint::Checkpoint::load(&t.join("init/checkpoint")).unwrap();
    assert_eq!(ck.manifest.epoch, 0);

    for out in ["r1", "r2"] {
        let o = idea(&["train", "data", "--config", &cfg, "--out", out, "--seed", "2"], t);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv = String::from_utf8(read(t.join("r1/metrics.csv"))).unwrap();
    assert!(csv.starts_with("epoch,L_P,L_I,L_E,L_D,val_acc\n"));
    assert!(csv.lines().count() >= 2);
    for f in ["metrics.csv", "embeddings.csv", "checkpoint/model.bin", "checkpoint/manifest.json"] {
        assert_eq!(read(t.join("r1").join(f)), read(t.join("r2").join(f)), "{f}");
    }
    assert_eq!(manifest(&t.join("r1")).config_hash, manifest(&t.join("r2")).config_hash);

    let bad = t.join("bad.cfg");
    std::fs::write(&bad, "epochs = 3\nlearning_rat = 0.1\n").unwrap();
    let o = idea(&["train", "data", "--config", bad.to_str().unwrap(), "--out", "x"], t);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("learning_rat"));

    std::fs::write(t.join("seeds.txt"), "1\n2 # second\n1\n").unwrap();
    let o = idea(&["train", "data", "--config", &cfg, "--out", "sweep", "--seeds-file", "seeds.txt"], t);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("duplicate seed 1"));

    std::fs::write(t.join("seeds.txt"), "1\n2\n").unwrap();
    let o = idea(&["train", "data", "--config", &cfg, "--out", "sweep", "--seeds-file", "seeds.txt", "--epochs", "2"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.join("sweep/seed_1/checkpoint/model.bin").exists());
    assert!(t.join("sweep/seed_2/metrics.csv").exists());
    assert!(t.join("sweep").join(RUN_MANIFEST_FILE).exists());
    assert!(!t.join("sweep/seed_1").join(RUN_MANIFEST_FILE).exists());
}

#[test]
fn evaluate_exit_codes_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    toy_dataset(&t.join("data"));
    let cfg = small_config(t, 5);
    assert_eq!(code(&idea(&["train", "data", "--config", &cfg, "--out", "run"], t)), 0);

    let o = idea(&["evaluate", "data", "--checkpoint", "missing", "--out", "e"], t);
    assert_eq!(code(&o), 3);
    let o = idea(&["evaluate", "data", "--checkpoint", "run/checkpoint", "--scenarios", "clean,nettack", "--out", "e"], t);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("nettack"));

    let o = idea(&["evaluate", "data", "--checkpoint", "run/checkpoint", "--scenarios", "clean", "--out", "e"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).filter(|l| !l.starts_with("AVG")).collect();
    assert_eq!(rows.len(), 1, "{table}");
    assert!(rows[0].starts_with("clean"));
    let report: idea::eval::ScenarioReport = idea::data::read_json(&t.join("e/report.json")).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.is_consistent());
    let text = String::from_utf8(read(t.join("e/report.txt"))).unwrap();
    assert_eq!(text, table);

    let o = idea(&["evaluate", "data", "--model", "gcn", "--scenarios", "clean,edge_flip", "--seeds", "0,1", "--out", "g1"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = idea(&["evaluate", "data", "--model", "gcn", "--scenarios", "clean,edge_flip", "--seeds", "0,1", "--out", "g2"], t);
    assert_eq!(code(&o), 0);
    assert_eq!(read(t.join("g1/report.json")), read(t.join("g2/report.json")));
}

#[test]
fn attack_plot_and_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    toy_dataset(&t.join("data"));
    let o = idea(&["attack", "data", "--scenario", "edge_flip", "--out", "atk"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let targets = idea::data::read_node_list(&t.join("atk/targets.txt")).unwrap();
    assert!(!targets.is_empty());
    let g = idea::data::load_dataset(&t.join("atk")).unwrap();
    assert_eq!(g.num_nodes(), 60);
    let o = idea(&["attack", "data", "--scenario", "clean", "--out", "atk2"], t);
    assert_eq!(code(&o), 1);

    let cfg = small_config(t, 3);
    assert_eq!(code(&idea(&["train", "data", "--config", &cfg, "--out", "run"], t)), 0);
    let o = idea(&["plot", "run/embeddings.csv", "--out", "fig", "--size", "96"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.join("fig/embeddings.png").exists());
    assert_eq!(code(&idea(&["plot", "nope.csv", "--out", "fig2"], t)), 2);

    let root = t.join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_idea"))
        .args(["plot", "run/embeddings.csv", "--out", "rel"])
        .current_dir(t)
        .env("IDEA_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("rel/embeddings.png").exists());
    assert!(root.join("rel").join(RUN_MANIFEST_FILE).exists());
}

#[test]
fn synthetic_check_passes_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let o = idea(&["synthetic-check", "--out", "sc"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = idea::data::read_json(&t.join("sc/synthetic_check.json")).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["upper_bound_passed"], true);
    assert_eq!(v["invariant_defender_passed"], true);
    assert!(v["invariant_defender"]["invariant"]["risks"].as_array().unwrap().len() >= 2);
    assert_eq!(code(&idea(&["synthetic-check", "--out", "sc2"], t)), 0);
    assert_eq!(read(t.join("sc/synthetic_check.json")), read(t.join("sc2/synthetic_check.json")));
}

#[test]
fn usage_errors_are_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&idea(&["no-such-command"], tmp.path())), 2);
    assert_eq!(code(&idea(&["--version"], tmp.path())), 0);
}
