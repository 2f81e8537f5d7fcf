use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use pemiu::data::{read_dataset, write_pairing, Pair, Pairing, Provenance};
use pemiu::metrics::{score_protocol, Comparator};
use pemiu::protection::{unprotect_dataset, PermutationLog};

fn pemiu<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_pemiu")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a dataset into `<dir>/<sub>/dataset.pseb`.
fn gen(dir: &Path, sub: &str, identities: usize, seed: u64) -> PathBuf {
    let out = dir.join(sub);
    let seed = seed.to_string();
    let n = identities.to_string();
    ok(&pemiu(["generate", "--identities", &n, "--seed", &seed, "-o", s(&out)]));
    out.join("dataset.pseb")
}

#[test]
fn generate_writes_dataset_and_manifest_echoing_flags() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data");
    ok(&pemiu([
        "generate", "--identities", "500", "--samples", "2", "--sigma", "0.1", "--offset", "0.5",
        "--seed", "7", "-o", s(&out),
    ]));
    let manifest = json(&out.join("dataset.manifest.json"));
    assert_eq!(manifest["seed"], 7);
    let p = &manifest["provenance"];
    assert_eq!(p["kind"], "synthetic");
    assert_eq!(p["n_identities"], 500);
    assert_eq!(p["samples_per_identity"], 2);
    assert_eq!(p["intra_sigma"], 0.1);
    assert_eq!(p["attribute_offset"], 0.5);
    let d = read_dataset(&out.join("dataset.pseb")).unwrap();
    assert_eq!(d.len(), 1000);
    let run = json(&out.join("run.json"));
    assert_eq!(run["seed"], 7);
    assert_eq!(run["toolkit_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(run["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn generate_without_seed_draws_prints_and_stores_one() {
    let dir = TempDir::new().unwrap();
    let out = pemiu(["generate", "--identities", "10", "-o", s(dir.path())]);
    ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let printed: u64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("seed: "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(json(&dir.path().join("dataset.manifest.json"))["seed"], printed);
    assert_eq!(json(&dir.path().join("run.json"))["seed"], printed);
}

#[test]
fn generate_rejects_single_identity() {
    let dir = TempDir::new().unwrap();
    let out = pemiu(["generate", "--identities", "1", "--seed", "1", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn protect_log_recovers_originals_bitwise() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 30, 7);
    let out = dir.path().join("p");
    ok(&pemiu([
        "protect", "-i", s(&data), "--k", "64", "--mode", "per-identity", "--seed", "3", "-o", s(&out),
    ]));
    let protected = read_dataset(&out.join("protected.pseb")).unwrap();
    let log: PermutationLog =
        serde_json::from_slice(&fs::read(out.join("protected.perm.json")).unwrap()).unwrap();
    assert_eq!(log.seed, 3);
    let back = unprotect_dataset(&protected, &log).unwrap();
    let original = read_dataset(&data).unwrap();
    for (a, b) in original.records().iter().zip(back.records()) {
        assert_eq!(a.id, b.id);
        assert!(a.embedding.bit_eq(&b.embedding));
    }
}

#[test]
fn protect_rejects_indivisible_block_size() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 5, 7);
    let out = pemiu(["protect", "-i", s(&data), "--k", "100", "--mode", "fixed", "--seed", "1", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixed_mode_shares_one_permutation_with_requested_displacement() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 20, 7);
    let out = dir.path().join("p");
    ok(&pemiu([
        "protect", "-i", s(&data), "--mode", "fixed", "--p", "4", "--k", "64", "--seed", "2", "-o", s(&out),
    ]));
    let log: PermutationLog =
        serde_json::from_slice(&fs::read(out.join("protected.perm.json")).unwrap()).unwrap();
    let first = &log.records[0].permutation;
    assert_eq!(first.displacement(), 4);
    assert!(log.records.iter().all(|r| &r.permutation == first));
}

#[test]
fn evaluate_reference_set() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 500, 7);
    let out = dir.path().join("e");
    ok(&pemiu(["evaluate", "-i", s(&data), "-o", s(&out)]));
    let report = json(&out.join("operating_points.json"));
    assert!(report["eer"]["eer"].as_f64().unwrap() < 0.01);
    assert_eq!(report["run"]["toolkit_version"], env!("CARGO_PKG_VERSION"));

    // Recheck achieved FMR against the raw non-mated scores.
    let d = read_dataset(&data).unwrap();
    let scores = score_protocol(&d, &Pairing::all_pairs(&d), Comparator::Cosine).unwrap();
    let points = report["operating_points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    for p in points {
        let t = p["threshold"].as_f64().unwrap();
        let target = p["target_fmr"].as_f64().unwrap();
        let accepted = scores.non_mated.iter().filter(|&&x| x >= t).count();
        assert!(accepted as f64 / scores.non_mated.len() as f64 <= target);
        assert_eq!(p["target_fmr_percent"].as_f64().unwrap(), target * 100.0);
    }
    let det = fs::read_to_string(out.join("det.csv")).unwrap();
    let mut lines = det.lines();
    assert!(lines.next().unwrap().starts_with("# pemiu"));
    assert_eq!(lines.next().unwrap(), "threshold,fmr,fnmr");
}

#[test]
fn evaluate_without_non_mated_pairs_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 5, 7);
    let d = read_dataset(&data).unwrap();
    let pairs: Vec<Pair> = (0..5)
        .map(|i| Pair {
            id_a: d.records()[2 * i].id.clone(),
            id_b: d.records()[2 * i + 1].id.clone(),
            mated: true,
        })
        .collect();
    let pairing_path = dir.path().join("pairs.csv");
    write_pairing(&Pairing::new(pairs), fs::File::create(&pairing_path).unwrap()).unwrap();
    let out = pemiu(["evaluate", "-i", s(&data), "--pairing", s(&pairing_path), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn rsr_sweep_defaults_have_standard_row_layout_and_pass_monotone_script() {
    let dir = TempDir::new().unwrap();
    ok(&pemiu(["rsr-sweep", "--seed", "7", "-o", s(dir.path())]));
    let rows = csv_rows(&dir.path().join("rsr.csv"));
    assert_eq!(rows.len(), 46);
    for target in ["0.001", "0.01"] {
        let per_k = |k: &str| rows.iter().filter(|r| r[0] == k && r[2] == target).count();
        assert_eq!((per_k("32"), per_k("64"), per_k("128")), (13, 7, 3));
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/check_monotone.py");
    if let Ok(out) = Command::new("python3").arg(script).arg(dir.path().join("rsr.csv")).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn rsr_sweep_identity_channel_p0_is_one() {
    let dir = TempDir::new().unwrap();
    ok(&pemiu([
        "rsr-sweep", "--seed", "7", "--identities", "50", "--channel", "identity", "--p", "0", "-o",
        s(dir.path()),
    ]));
    let rows = csv_rows(&dir.path().join("rsr.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[1] == "0" && r[4] == "1"));
}

#[test]
fn rsr_sweep_rejects_displacement_one() {
    let dir = TempDir::new().unwrap();
    let out = pemiu(["rsr-sweep", "--seed", "7", "--identities", "10", "--p", "1", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attack_seed_modes() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 100, 7);
    let p128 = dir.path().join("p128");
    let p16 = dir.path().join("p16");
    for (k, out) in [("128", &p128), ("16", &p16)] {
        ok(&pemiu(["protect", "-i", s(&data), "--k", k, "--mode", "per-identity", "--seed", "3", "-o", s(out)]));
    }
    let attack = |protected: &Path, extra: &[&str], sub: &str| {
        let out = dir.path().join(sub);
        let mut args = vec![
            "attack-seed", "--seed", "1", "--protected", s(protected), "--references", s(&data),
            "--record", "id00042_1", "-o", s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&pemiu(&args));
        json(&out.join("attack.json"))
    };

    let log = p16.join("protected.perm.json");
    let known = attack(&p16.join("protected.pseb"), &["--mode", "known-seed", "--log", s(&log)], "a1");
    assert_eq!(known["success"], true);
    assert_eq!(known["best_score"], 1.0);

    let brute = attack(
        &p128.join("protected.pseb"),
        &["--mode", "brute-force", "--k", "128", "--threshold", "0.999999999"],
        "a2",
    );
    assert_eq!(brute["success"], true);
    assert_eq!(brute["best_score"], 1.0);
    assert!(brute["candidates_tried"].as_u64().unwrap() <= 24);
    assert_eq!(brute["search_space_size"], "24");

    let hard = attack(
        &p16.join("protected.pseb"),
        &["--mode", "brute-force", "--k", "16", "--budget", "1000", "--threshold", "0.999999999"],
        "a3",
    );
    assert_eq!(hard["success"], false);
    assert_eq!(hard["candidates_tried"], 1000);
    assert_eq!(hard["search_space_size"], "263130836933693530167218012160000000");

    let missing = pemiu([
        "attack-seed", "--protected", s(&p16.join("protected.pseb")), "--references", s(&data),
        "--record", "id00042_1", "--reference", "nobody", "--mode", "known-seed", "--log", s(&log),
        "--seed", "1", "-o", s(dir.path()),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn probe_reports_per_eval_set() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 500, 7);
    let p16 = dir.path().join("p16");
    ok(&pemiu(["protect", "-i", s(&data), "--k", "16", "--mode", "per-identity", "--seed", "7", "-o", s(&p16)]));
    let out = dir.path().join("probe");
    ok(&pemiu([
        "probe", "--train", s(&data), "--eval", s(&data), "--eval", s(&p16.join("protected.pseb")),
        "--seed", "7", "-o", s(&out),
    ]));
    let unprotected = json(&out.join("probe_eval_0.json"));
    let protected = json(&out.join("probe_eval_1.json"));
    assert!(unprotected["mean"].as_f64().unwrap() > protected["mean"].as_f64().unwrap());

    for report in [&unprotected, &protected, &json(&out.join("probe_train.json"))] {
        let folds: Vec<f64> = report["folds"].as_array().unwrap().iter().map(|f| f.as_f64().unwrap()).collect();
        assert_eq!(folds.len(), 5);
        let mean = folds.iter().sum::<f64>() / 5.0;
        let var = folds.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((report["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((report["std"].as_f64().unwrap() - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn probe_without_attribute_column_exits_2() {
    let dir = TempDir::new().unwrap();
    let d = read_dataset(&gen(dir.path(), "d", 10, 7)).unwrap();
    let mut text = String::from("id,identity");
    for i in 0..d.dim() {
        text += &format!(",v{i}");
    }
    text.push('\n');
    for r in d.records() {
        text += &format!("{},{}", r.id, r.identity);
        for x in r.embedding.as_slice() {
            text += &format!(",{x}");
        }
        text.push('\n');
    }
    let path = dir.path().join("bare.csv");
    fs::write(&path, text).unwrap();
    let out = pemiu(["probe", "--train", s(&path), "--seed", "7", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 40, 7);
    let run = |sub: &str, threads: &str| {
        let out = dir.path().join(sub);
        ok(&pemiu(["--threads", threads, "evaluate", "-i", s(&data), "-o", s(&out)]));
        ok(&pemiu([
            "--threads", threads, "protect", "-i", s(&data), "--k", "32", "--mode", "per-identity", "--seed", "5",
            "-o", s(&out),
        ]));
        ["det.csv", "operating_points.json", "protected.pseb", "protected.perm.json", "run.json"]
            .map(|f| fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("r1", "1"), run("r2", "4"));
}

#[test]
fn missing_input_is_an_io_failure() {
    let dir = TempDir::new().unwrap();
    let out = pemiu(["evaluate", "-i", s(&dir.path().join("absent.pseb")), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn protected_manifest_records_provenance() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d", 5, 7);
    let out = dir.path().join("p");
    ok(&pemiu(["protect", "-i", s(&data), "--k", "128", "--mode", "fixed", "--seed", "9", "-o", s(&out)]));
    let d = read_dataset(&out.join("protected.pseb")).unwrap();
    assert!(matches!(
        &d.manifest().provenance,
        Provenance::Protected { block_size: 128, seed: 9, .. }
    ));
}
