use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_llcprobe"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("llcprobe-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("c.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
geometry = "skylake-2"
replicas = 1
targets = 2
intervals = [2000, 20000]
accesses = 200
traces = 2
timeout_ms = 200
"#;

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn every_subcommand_writes_its_files() {
    let d = scratch("all");
    let cfg = write_config(&d, SMALL);
    let cases = [
        ("prune-bench", &["prune_bench.csv", "prune_bench_summary.json"][..]),
        ("bulk", &["bulk.json", "bulk_sets.csv"]),
        ("covert-sweep", &["covert_sweep.csv", "covert_runs.csv"]),
        ("psd-demo", &["psd_target.csv", "psd_nontarget.csv", "psd_demo.json"]),
        ("scan", &["scan.json"]),
        ("end-to-end", &["end_to_end.json"]),
    ];
    for (cmd, files) in cases {
        let out = d.join(cmd);
        let st = bin()
            .args([cmd, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--algorithm", "bins"])
            .output()
            .unwrap();
        assert!(st.status.success(), "{cmd}: {}", String::from_utf8_lossy(&st.stderr));
        let printed = String::from_utf8(st.stdout).unwrap();
        for f in files {
            assert!(out.join(f).is_file(), "{cmd} did not write {f}");
            assert!(printed.contains(f));
        }
    }
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn flags_override_the_config_file() {
    let d = scratch("override");
    let cfg = write_config(&d, &format!("{SMALL}\nseed = 5\nnoise_rate = 30\nalgorithm = \"gt\"\nout_dir = \"{}\"\n", d.join("from-file").display()));
    let st = bin()
        .args(["prune-bench", "--config"])
        .arg(&cfg)
        .args(["--seed", "9", "--noise-rate", "0", "--algorithm", "PsOp", "--out"])
        .arg(d.join("flags"))
        .output()
        .unwrap()
        .status;
    assert!(st.success());
    assert!(!d.join("from-file").exists());
    let csv = read(d.join("flags/prune_bench.csv"));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..5], ["PsOp", "0", "0", "0", "9"]);

    // without flags the file values apply
    let st = bin().args(["prune-bench", "--config"]).arg(&cfg).output().unwrap().status;
    assert!(st.success());
    let csv = read(d.join("from-file/prune_bench.csv"));
    assert!(csv.lines().nth(1).unwrap().starts_with("Gt,30,0,0,5,"));
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn scope_flag_reaches_the_scanner() {
    let d = scratch("scope");
    let cfg = write_config(&d, SMALL);
    let st = bin().args(["scan", "--scope", "single-set", "--config"]).arg(&cfg).arg("--out").arg(&d).output().unwrap().status;
    assert!(st.success());
    let v: serde_json::Value = serde_json::from_str(&read(d.join("scan.json"))).unwrap();
    assert_eq!(v["scope"], "single-set");
    assert_eq!(v["trials"][0]["sets_scanned"], 1);
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn same_seed_gives_identical_files() {
    let d = scratch("det");
    let cfg = write_config(&d, &format!("{SMALL}\nnoise_rate = 3\n"));
    for cmd in ["bulk", "covert-sweep", "end-to-end"] {
        let mut bodies = Vec::new();
        for k in 0..2 {
            let out = d.join(format!("{cmd}-{k}"));
            let st = bin().args([cmd, "--seed", "7", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap().status;
            assert!(st.success());
            let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            bodies.push(files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
        }
        assert_eq!(bodies[0], bodies[1], "{cmd}");
    }
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn bad_input_fails_cleanly() {
    let d = scratch("bad");
    let st = bin().args(["bulk", "--algorithm", "quick"]).output().unwrap();
    assert!(!st.status.success());
    let cfg = write_config(&d, "replicas = 0\n");
    let st = bin().args(["bulk", "--config"]).arg(&cfg).arg("--out").arg(d.join("o")).output().unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("replicas"));
    let st = bin().args(["bulk", "--config"]).arg(d.join("missing.toml")).output().unwrap();
    assert!(!st.status.success());
    let st = bin().arg("frobnicate").output().unwrap();
    assert!(!st.status.success());
    std::fs::remove_dir_all(&d).unwrap();
}
