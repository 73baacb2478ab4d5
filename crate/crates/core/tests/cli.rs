use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn vrap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrap")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

const SIZES: [&str; 10] =
    ["--train", "12", "--val", "4", "--attack", "3", "--test", "6", "--train-downstream", "12"];

#[test]
fn gen_data_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut args = vec!["gen-data", "--out", out, "--seed", "5"];
        args.extend(SIZES);
        ok(vrap(&args, tmp.path()));
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    // five manifests, one image per scene, one metadata sidecar
    assert_eq!(a.len(), 5 + (12 + 4 + 3 + 6 + 12) + 1);
    assert_eq!(a, b);
}

#[test]
fn pipeline_commands_chain_and_report_has_one_row_per_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec!["gen-data", "--out", "data", "--seed", "2"];
    args.extend(SIZES);
    ok(vrap(&args, d));
    std::fs::write(d.join("cfg.json"), r#"{"sgg_epochs": 1, "downstream_epochs": 1, "patch_side": 8, "inner_steps": 1, "attack_epochs": 1}"#)
        .unwrap();
    let cfg = ["--config", "cfg.json"];
    let run = |a: &[&str]| ok(vrap(&[a, &cfg[..]].concat(), d));
    run(&["train-sgg", "--data", "data", "--out", "m/sgg.vrw"]);
    run(&["train-downstream", "--data", "data", "--out", "m/ds.vrw"]);
    for mode in ["random", "dr", "vrap"] {
        let out = format!("p/{mode}.vrp");
        run(&["craft", "--mode", mode, "--model", "m/sgg.vrw", "--data", "data", "--out", &out]);
        assert!(d.join(format!("p/{mode}.csv")).exists());
        assert_eq!(std::fs::metadata(d.join(&out)).unwrap().len(), 16 + 12 * 64);
    }
    let mut reports = vec!["report", "--out", "cmp.csv", "--inputs"];
    let mut names = Vec::new();
    for cond in ["clean", "random", "dr", "vrap"] {
        let patch = format!("p/{cond}.vrp");
        let out = format!("r/{cond}.json");
        let mut a = vec!["eval-sgg", "--model", "m/sgg.vrw", "--data", "data", "--out", &out, "--threads", "1"];
        if cond != "clean" {
            a.extend(["--patch", &patch]);
        }
        run(&a);
        names.push(out);
    }
    reports.extend(names.iter().map(String::as_str));
    ok(vrap(&reports, d));
    let csv = std::fs::read_to_string(d.join("cmp.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 6);
    for metric in ["R@1", "mR@1", "R@5", "mR@5", "R@10", "mR@10"] {
        let conds: Vec<&str> = rows
            .iter()
            .filter(|r| r.split(',').nth(2) == Some(metric))
            .map(|r| r.split(',').next().unwrap())
            .collect();
        assert_eq!(conds, vec!["CLEAN", "RANDOM", "DR", "VRAP"], "{metric}");
    }
    // every artifact carries the config hash and master seed
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("p/vrap.vrp.meta.json")).unwrap()).unwrap();
    assert!(meta["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    assert_eq!(meta["master_seed"], 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r/vrap.json")).unwrap()).unwrap();
    assert_eq!(report["master_seed"], 1);
    assert!(report["patch_hash"].is_string());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(vrap(&["craft", "--mode", "bogus"], d).status.code(), Some(1));
    assert_eq!(vrap(&["no-such-command"], d).status.code(), Some(1));
    assert_eq!(vrap(&["--help"], d).status.code(), Some(0));
    let missing = vrap(&["eval-sgg", "--model", "nope.vrw", "--data", "nowhere", "--out", "r.json"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));
    std::fs::write(d.join("bad.json"), "{\"not_a_key\": 1}").unwrap();
    let bad = vrap(&["gen-data", "--out", "x", "--config", "bad.json"], d);
    assert_eq!(bad.status.code(), Some(1));
    let mut args = vec!["gen-data", "--out", "data", "--seed", "2"];
    args.extend(SIZES);
    ok(vrap(&args, d));
    std::fs::write(d.join("junk.vrp"), b"NOPE0000000000000000").unwrap();
    let junk = vrap(&["eval-sgg", "--model", "x.vrw", "--patch", "junk.vrp", "--data", "data", "--out", "r.json"], d);
    assert_eq!(junk.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&junk.stderr).contains("junk.vrp"));
}
