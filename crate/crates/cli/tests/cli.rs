use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn memeprompt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memeprompt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Directory printed on the `run:` line.
fn run_dir(out: &Output, cwd: &Path) -> PathBuf {
    let text = stdout(out);
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("run: "))
        .unwrap_or_else(|| panic!("no run line in {text:?}"));
    cwd.join(line)
}

const STUB_CONFIG: &str = r#"
seeds = [1, 2]

[dataset.synthetic]
train_per_class = 10
test_per_class = 5

[backend]
kind = "stub"
"#;

#[test]
fn help_and_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&memeprompt(&["--help"], tmp.path())), 0);
    assert_eq!(code(&memeprompt(&["train-eval", "--bogus"], tmp.path())), 1);
    assert_eq!(code(&memeprompt(&["ablate", "--axis", "colour"], tmp.path())), 1);
    assert_eq!(code(&memeprompt(&["train-eval"], tmp.path())), 1);
    assert_eq!(
        code(&memeprompt(&["train-eval", "--label-words", "good"], tmp.path())),
        1
    );
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "[dataset]\npath = \"nowhere.jsonl\"\n").unwrap();
    let out = memeprompt(&["--config", "c.toml", "train-eval"], tmp.path());
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn train_eval_applies_overrides_and_keeps_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), STUB_CONFIG).unwrap();
    let out = memeprompt(
        &[
            "--config", "c.toml", "--seed-list", "5,6,7", "--m", "3", "--variant", "plain",
            "--label-words", "normal,hate", "--template", "target", "--out", "out", "train-eval",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("seeds 3"));
    let dir = run_dir(&out, tmp.path());
    assert!(dir.starts_with(tmp.path().join("out")));
    let snapshot = fs::read_to_string(dir.join("config.toml")).unwrap();
    for needle in ["seeds = [5, 6, 7]", "m = 3", "label_words = \"normal,hate\"", "variant = \"plain\"", "{T}"] {
        assert!(snapshot.contains(needle), "{needle} missing from\n{snapshot}");
    }
    for seed in [5, 6, 7] {
        assert!(dir.join(format!("seed-{seed}/predictions.jsonl")).is_file());
    }
    assert_eq!(fs::read_to_string(tmp.path().join("c.toml")).unwrap(), STUB_CONFIG);
}

#[test]
fn unusable_label_word_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), STUB_CONFIG).unwrap();
    let out = memeprompt(
        &["--config", "c.toml", "--label-words", "well-meant,bad", "train-eval"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingest_then_train_then_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let mut raw = String::new();
    let mut captions = serde_json::Map::new();
    let mut entities = serde_json::Map::new();
    for i in 0..16 {
        let split = if i < 12 { "train" } else { "test" };
        let label = i % 2;
        let text = if label == 1 { format!("zork meme {i}") } else { format!("plain meme {i}") };
        let target = if label == 1 { "\"race\"" } else { "null" };
        raw += &format!(
            "{{\"id\":\"m{i}\",\"split\":\"{split}\",\"label\":{label},\"meme_text\":\"{text}\",\"image\":\"img{i}.png\",\"target\":{target}}}\n"
        );
        if i != 3 {
            captions.insert(format!("img{i}.png"), format!("a picture number {i}").into());
        }
        entities.insert(format!("img{i}.png"), serde_json::json!(["Meme"]));
    }
    fs::write(p.join("raw.jsonl"), &raw).unwrap();
    fs::write(p.join("captions.json"), serde_json::to_string(&captions).unwrap()).unwrap();
    fs::write(p.join("entities.json"), serde_json::to_string(&entities).unwrap()).unwrap();

    let out = memeprompt(
        &["--out", "ing", "ingest", "--input", "raw.jsonl", "--captions", "captions.json", "--entities", "entities.json"],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("15 of 16 written, 1 dropped"));
    let records = run_dir(&out, p).join("records.jsonl");
    assert_eq!(fs::read_to_string(p.join("raw.jsonl")).unwrap(), raw);

    let config = format!(
        "seeds = [3]\n[dataset]\npath = {:?}\n[training]\nepochs = 2\n",
        records.display().to_string()
    );
    fs::write(p.join("c.toml"), config).unwrap();
    let out = memeprompt(&["--config", "c.toml", "train-eval"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir(&out, p).join("seed-3/checkpoint");

    let mut lines = Vec::new();
    for _ in 0..2 {
        let out = memeprompt(
            &["predict", "--checkpoint", ckpt.to_str().unwrap(), "--input", records.to_str().unwrap()],
            p,
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        lines.push(fs::read_to_string(run_dir(&out, p).join("predictions.jsonl")).unwrap());
    }
    assert_eq!(lines[0], lines[1]);
    assert_eq!(lines[0].lines().count(), 15);

    let out = memeprompt(&["predict", "--checkpoint", "absent", "--input", records.to_str().unwrap()], p);
    assert_eq!(code(&out), 1);
}
