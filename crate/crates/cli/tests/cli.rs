use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tvmerge_core::{decode_f32, write_checkpoint, CheckpointHandle, DType, PendingTensor, ShardPolicy, TensorData};

fn tvmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvmerge")).args(args).output().expect("spawn tvmerge")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ckpt(dir: &Path, tensors: &[(&str, &[u64], Vec<f32>)]) -> PathBuf {
    let pending = tensors.iter().map(|(n, shape, v)| PendingTensor {
        name: n.to_string(),
        dtype: DType::F32,
        shape: shape.to_vec(),
        data: TensorData::F32(v.clone()),
    });
    write_checkpoint(pending.collect::<Vec<_>>(), dir, &ShardPolicy::default()).unwrap();
    dir.to_path_buf()
}

fn values(dir: &Path, name: &str) -> Vec<f32> {
    decode_f32(&CheckpointHandle::open(dir).unwrap().read_tensor(name).unwrap())
}

/// The 2x2 example: base, instruct, domain.
fn trio(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        ckpt(&root.join("gp"), &[("m", &[2, 2], vec![0.0, 1.0, 2.0, 3.0]), ("s", &[], vec![0.0])]),
        ckpt(&root.join("gi"), &[("m", &[2, 2], vec![0.0, 2.0, 3.0, 3.0]), ("s", &[], vec![2.0])]),
        ckpt(&root.join("dp"), &[("m", &[2, 2], vec![1.0, 1.0, 2.0, 4.0]), ("s", &[], vec![1.0])]),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn merge_writes_values_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let (gp, gi, dp) = trio(t.path());
    let out = t.path().join("di");
    let o = tvmerge(&["merge", "--base", s(&gp), "--instruct", s(&gi), "--domain", s(&dp), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(values(&out, "m"), [1.0, 2.0, 3.0, 4.0]);
    assert_eq!(values(&out, "s"), [3.0]);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(t.path().join("di.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "merge");
    for role in ["base", "instruct", "domain"] {
        assert_eq!(manifest["inputs"][role]["model.safetensors"].as_str().unwrap().len(), 64);
    }
    assert!(manifest["outputs"]["model.safetensors"].is_string());
    assert_eq!(manifest["config"]["lambda_instruct"], 1.0);
}

#[test]
fn merge_usage_and_alignment_errors() {
    let t = tempfile::tempdir().unwrap();
    let (gp, gi, dp) = trio(t.path());
    let out = t.path().join("o");
    let o = tvmerge(&["merge", "--base", s(&gp), "--instruct", s(&gi), "--out", s(&out)]);
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("--domain"));

    let wide = ckpt(&t.path().join("wide"), &[("m", &[4, 1], vec![0.0; 4]), ("s", &[], vec![0.0])]);
    let o = tvmerge(&["merge", "--base", s(&gp), "--instruct", s(&wide), "--domain", s(&dp), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("shape_mismatches"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = tvmerge(&["merge", "--base", s(&gp), "--instruct", s(&gi), "--domain", s(&t.path().join("nope")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);

    assert_eq!(code(&tvmerge(&["merge", "--frobnicate"])), 64);
    assert_eq!(code(&tvmerge(&["--help"])), 0);
    let o = tvmerge(&["--chunk-bytes", "0", "merge", "--base", s(&gp), "--instruct", s(&gi), "--domain", s(&dp), "--out", s(&out)]);
    assert_eq!(code(&o), 64);
}

#[test]
fn recipe_values_yield_to_flags() {
    let t = tempfile::tempdir().unwrap();
    trio(t.path());
    let recipe = t.path().join("recipe.toml");
    std::fs::write(
        &recipe,
        "base = \"gp\"\ninstruct = \"gi\"\ndomain = \"dp\"\nout = \"from_recipe\"\nlambda_instruct = 0.0\n",
    )
    .unwrap();
    let o = tvmerge(&["merge", "--recipe", s(&recipe)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(values(&t.path().join("from_recipe"), "m"), [1.0, 1.0, 2.0, 4.0]);

    let out = t.path().join("flagged");
    let o = tvmerge(&["merge", "--recipe", s(&recipe), "--lambda-instruct", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(values(&out, "m"), [1.0, 2.0, 3.0, 4.0]);

    std::fs::write(&recipe, "bogus_key = 1\n").unwrap();
    assert_eq!(code(&tvmerge(&["merge", "--recipe", s(&recipe)])), 64);
}

#[test]
fn output_bytes_ignore_threads_and_reruns() {
    let t = tempfile::tempdir().unwrap();
    let n = 5000;
    let wave = |k: f32| -> Vec<f32> { (0..n).map(|i| ((i as f32) * k).sin()).collect() };
    let gp = ckpt(&t.path().join("gp"), &[("a.0.w", &[n as u64], wave(0.1)), ("a.1.w", &[50, 100], wave(0.2))]);
    let gi = ckpt(&t.path().join("gi"), &[("a.0.w", &[n as u64], wave(0.3)), ("a.1.w", &[50, 100], wave(0.4))]);
    let dp = ckpt(&t.path().join("dp"), &[("a.0.w", &[n as u64], wave(0.5)), ("a.1.w", &[50, 100], wave(0.6))]);
    let run = |threads: &str, out: &Path| {
        let o = tvmerge(&[
            "--threads", threads, "--chunk-bytes", "1024", "--quiet", "merge", "--base", s(&gp), "--instruct", s(&gi),
            "--domain", s(&dp), "--out", s(out), "--max-shard-bytes", "20000", "--lambda-domain", "0.5",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).is_empty());
        read_dir_bytes(out)
    };
    let one = run("1", &t.path().join("o1"));
    assert!(one.iter().any(|(n, _)| n == "model.safetensors.index.json"));
    assert_eq!(one, run("4", &t.path().join("o4")));
    assert_eq!(one, run("4", &t.path().join("o1")));
}

#[test]
fn taskvec_and_diff() {
    let t = tempfile::tempdir().unwrap();
    let (gp, gi, _) = trio(t.path());
    let out = t.path().join("tv");
    let o = tvmerge(&["taskvec", "--target", s(&gi), "--base", s(&gp), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(values(&out, "m"), [0.0, 1.0, 1.0, 0.0]);
    assert!(t.path().join("tv.manifest.json").exists());

    let o = tvmerge(&["--json", "diff", "--a", s(&gp), "--b", s(&gi)]);
    assert_eq!(code(&o), 0);
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let m = doc["tensors"].as_array().unwrap().iter().find(|e| e["name"] == "m").unwrap();
    assert_eq!(m["differing"], 2);
    assert_eq!(m["max_abs_diff"], 1.0);

    let o = tvmerge(&["diff", "--a", s(&gp), "--b", s(&gp)]);
    assert!(stdout(&o).contains("0 of 2 tensors differ"), "{}", stdout(&o));
}

#[test]
fn cosine_reports() {
    let t = tempfile::tempdir().unwrap();
    let n = 1000;
    let base = ckpt(&t.path().join("base"), &[("l.0.w", &[n], vec![0.0; n as usize]), ("l.1.w", &[n], vec![0.5; n as usize])]);
    let even: Vec<f32> = (0..n).map(|k| if k % 2 == 0 { 1.0 + k as f32 } else { 0.0 }).collect();
    let odd: Vec<f32> = (0..n).map(|k| if k % 2 == 1 { 1.0 - k as f32 } else { 0.0 }).collect();
    let shift = |v: &[f32]| v.iter().map(|x| x + 0.5).collect::<Vec<_>>();
    let a = ckpt(&t.path().join("a"), &[("l.0.w", &[n], even.clone()), ("l.1.w", &[n], shift(&even))]);
    let b = ckpt(&t.path().join("b"), &[("l.0.w", &[n], odd.clone()), ("l.1.w", &[n], shift(&odd))]);

    let out = t.path().join("same.json");
    let o = tvmerge(&["cosine", "--base", s(&base), "--a", s(&a), "--b", s(&a), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["global"]["mean"], 1.0);
    assert_eq!(doc["groups"]["l.*.w"]["count"], 2);
    assert!(t.path().join("same.json.manifest.json").exists());

    let out = t.path().join("orth.json");
    let o = tvmerge(&["--json", "cosine", "--base", s(&base), "--a", s(&a), "--b", s(&b), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary["mean"].as_f64().unwrap().abs() < 1e-12);

    let svg = t.path().join("orth.svg");
    let o = tvmerge(&["cosine", "--base", s(&base), "--a", s(&a), "--b", s(&b), "--out", s(&svg), "--format", "svg"]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let o = tvmerge(&["cosine", "--base", s(&base), "--a", s(&a), "--b", s(&b), "--out", s(&svg), "--format", "png"]);
    assert_eq!(code(&o), 64);
}

#[test]
fn inspect_output() {
    let t = tempfile::tempdir().unwrap();
    let two = ckpt(&t.path().join("two"), &[("w", &[2, 3], vec![0.0; 6]), ("b", &[3], vec![0.0; 3])]);
    let o = tvmerge(&["inspect", s(&two)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("2 tensors, 9 parameters, 36 bytes"), "{}", stdout(&o));

    let o = tvmerge(&["--json", "inspect", s(&two)]);
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(doc.to_string().contains("\"w\""));

    let empty = ckpt(&t.path().join("empty"), &[]);
    let o = tvmerge(&["inspect", s(&empty)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("0 tensors"));

    let bad = t.path().join("bad.safetensors");
    let mut bytes = std::fs::read(two.join("model.safetensors")).unwrap();
    bytes[9] = b'!';
    std::fs::write(&bad, bytes).unwrap();
    let o = tvmerge(&["inspect", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn verify_reports_failing_check() {
    let t = tempfile::tempdir().unwrap();
    let tensors: Vec<PendingTensor> = (0..4)
        .map(|i| PendingTensor {
            name: format!("t{i}"),
            dtype: DType::F32,
            shape: vec![4],
            data: TensorData::F32(vec![i as f32; 4]),
        })
        .collect();
    let dir = t.path().join("sharded");
    write_checkpoint(tensors, &dir, &ShardPolicy::with_max_shard_bytes(32)).unwrap();
    let o = tvmerge(&["verify", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok: 2 shard(s), 4 tensors"));

    let index = dir.join("model.safetensors.index.json");
    let original = std::fs::read_to_string(&index).unwrap();
    std::fs::write(&index, original.replace("\"t3\"", "\"ghost\"")).unwrap();
    let o = tvmerge(&["verify", s(&dir)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`index-entry`"), "{}", stderr(&o));

    let single = ckpt(&t.path().join("single"), &[("a", &[2], vec![1.0, 2.0]), ("b", &[2], vec![3.0, 4.0])]);
    let file = single.join("model.safetensors");
    let bytes = std::fs::read(&file).unwrap();
    let text = String::from_utf8_lossy(&bytes).replacen("[8,16]", "[4,12]", 1);
    std::fs::write(&file, text.as_bytes()).unwrap();
    let o = tvmerge(&["verify", s(&single)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`range-overlap`"), "{}", stderr(&o));
}

fn preds(correct: usize, n: usize) -> String {
    (0..n)
        .map(|i| format!("{{\"id\": {i}, \"pred\": \"{}\", \"gold\": \"A\"}}\n", if i < correct { "A" } else { "B" }))
        .collect()
}

#[test]
fn score_tasks() {
    let t = tempfile::tempdir().unwrap();
    let rows = [("alpha", 18, 38), ("beta", 64, 398), ("gamma", 162, 478), ("delta", 26, 57)];
    let mut args = vec!["score".to_string()];
    for (name, c, n) in rows {
        let p = t.path().join(format!("{name}.jsonl"));
        std::fs::write(&p, preds(c, n)).unwrap();
        args.extend(["--preds".to_string(), p.to_string_lossy().into_owned()]);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = tvmerge(&refs);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let got: Vec<(String, String, String)> = doc["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| {
            (
                t["task_name"].as_str().unwrap().to_string(),
                format!("{:.4}", t["value"].as_f64().unwrap()),
                format!("{:.4}", t["stderr"].as_f64().unwrap()),
            )
        })
        .collect();
    let expect = |n: &str, a: &str, b: &str| (n.to_string(), a.to_string(), b.to_string());
    assert_eq!(
        got,
        [
            expect("alpha", "0.4737", "0.0821"),
            expect("beta", "0.1608", "0.0184"),
            expect("delta", "0.4561", "0.0666"),
            expect("gamma", "0.3389", "0.0217"),
        ]
    );

    let out = t.path().join("scores.json");
    let mut with_out = refs.clone();
    with_out.extend(["--out", s(&out)]);
    let o = tvmerge(&with_out);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("alpha"));
    assert!(t.path().join("scores.json.manifest.json").exists());

    let weights = t.path().join("w.json");
    std::fs::write(&weights, "{\"omega\": 1.0}").unwrap();
    let mut weighted = refs.clone();
    weighted.extend(["--weights", s(&weights)]);
    assert_eq!(code(&tvmerge(&weighted)), 64);

    let empty = t.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&tvmerge(&["score", "--preds", s(&empty)])), 1);

    let broken = t.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": 1, \"pred\": \"A\", \"gold\": \"A\"}\n{\"id\": 2, \"pred\": \n").unwrap();
    let o = tvmerge(&["score", "--preds", s(&broken)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn score_with_separate_gold_file() {
    let t = tempfile::tempdir().unwrap();
    let gold = t.path().join("gold.jsonl");
    std::fs::write(&gold, "{\"id\": 1, \"gold\": \"A\"}\n{\"id\": 2, \"gold\": \"B\"}\n").unwrap();
    let p = t.path().join("qa.jsonl");
    std::fs::write(&p, "{\"id\": 1, \"pred\": \"A\"}\n{\"id\": 2, \"pred\": \"A\"}\n").unwrap();
    let o = tvmerge(&["score", "--preds", s(&p), "--gold", s(&gold)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["overall"]["value"], 0.5);
}
