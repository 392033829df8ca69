//! End-to-end tests driving the `slu` binary: pipeline round trips, exit
//! codes, config precedence, and refusal paths.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn slu() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_slu"));
    for k in ["SLU_DATA_DIR", "SLU_PREPARED", "SLU_SEED", "SLU_STEPS", "SLU_CONFIG", "SLU_PARALLEL"]
    {
        c.env_remove(k);
    }
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn run_ok(c: &mut Command) -> String {
    let out = run(c);
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn assert_exit(c: &mut Command, code: i32) -> String {
    let out = run(c);
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).expect("utf8 stderr")
}

struct Fixture {
    root: PathBuf,
    prepare_both_stdout: String,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn prepared_both(&self) -> PathBuf {
        self.root.join("prepared-both")
    }
    fn prepared_m(&self) -> PathBuf {
        self.root.join("prepared-m")
    }
    /// A short training run over the small domain; checkpoints under
    /// `root/<tag>`, returned path is the `last` checkpoint.
    fn quick_ckpt(&self, tag: &str, extra: &[&str]) -> PathBuf {
        let out_dir = self.root.join(tag);
        let mut c = slu();
        c.args([
            "train",
            "--prepared",
            self.prepared_m().to_str().unwrap(),
            "--variant",
            "act_only",
            "--token-dim",
            "8",
            "--steps",
            "10",
            "--seed",
            "11",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        c.args(extra);
        run_ok(&mut c);
        out_dir.join("last")
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let root = std::env::temp_dir().join(format!("slu-cli-tests-{}", std::process::id()));
        if root.exists() {
            std::fs::remove_dir_all(&root).unwrap();
        }
        std::fs::create_dir_all(&root).unwrap();
        let data = root.join("data");
        run_ok(slu().args(["synth", "--out", data.to_str().unwrap(), "--seed", "13"]));
        let prepare_both_stdout = run_ok(slu().args([
            "prepare",
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            root.join("prepared-both").to_str().unwrap(),
        ]));
        run_ok(slu().args([
            "prepare",
            "--data-dir",
            data.to_str().unwrap(),
            "--domains",
            "sim-m",
            "--out",
            root.join("prepared-m").to_str().unwrap(),
        ]));
        Fixture { root, prepare_both_stdout }
    })
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prepare_prints_published_counts() {
    let f = fixture();
    assert!(
        f.prepare_both_stdout.contains("sim-r train: 1116 dialogues, 11234 turns"),
        "got:\n{}",
        f.prepare_both_stdout
    );
    assert!(f.prepare_both_stdout.contains("sim-m train: 384 dialogues, 3562 turns"));
    assert!(f.prepare_both_stdout.contains("# effective config"));
    assert!(f.prepare_both_stdout.contains("vocab digest: "));
}

#[test]
fn prepare_rerun_notes_cache_hit_with_identical_outputs() {
    let f = fixture();
    let before = std::fs::read_to_string(f.prepared_both().join("corpus.json")).unwrap();
    let stdout = run_ok(slu().args([
        "prepare",
        "--data-dir",
        f.data().to_str().unwrap(),
        "--out",
        f.prepared_both().to_str().unwrap(),
    ]));
    assert!(stdout.contains("cache hit"), "got:\n{stdout}");
    let after = std::fs::read_to_string(f.prepared_both().join("corpus.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn prepare_rejects_an_empty_domain_list() {
    let f = fixture();
    let stderr = assert_exit(
        slu().args([
            "prepare",
            "--data-dir",
            f.data().to_str().unwrap(),
            "--domains",
            "",
            "--out",
            f.root.join("unused").to_str().unwrap(),
        ]),
        2,
    );
    assert!(stderr.contains("at least one domain"), "got:\n{stderr}");
}

#[test]
fn prepare_fails_on_missing_data() {
    let f = fixture();
    let stderr = assert_exit(
        slu().args([
            "prepare",
            "--data-dir",
            f.root.join("no-such-dir").to_str().unwrap(),
            "--out",
            f.root.join("unused2").to_str().unwrap(),
        ]),
        1,
    );
    assert!(!stderr.is_empty());
}

#[test]
fn unknown_flags_are_rejected() {
    assert_exit(slu().args(["train", "--bogus-flag"]), 2);
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let f = fixture();
    let stderr = assert_exit(
        slu().args([
            "train",
            "--prepared",
            f.prepared_m().to_str().unwrap(),
            "--set",
            "nonsense=1",
        ]),
        2,
    );
    assert!(stderr.contains("nonsense"), "got:\n{stderr}");
    assert!(stderr.contains("valid keys"), "got:\n{stderr}");
}

#[test]
fn invalid_variant_position_combo_fails_before_training() {
    let f = fixture();
    let stderr = assert_exit(
        slu().args([
            "train",
            "--prepared",
            f.prepared_m().to_str().unwrap(),
            "--variant",
            "no_context",
            "--set",
            "act_position=a",
        ]),
        2,
    );
    assert!(!stderr.is_empty());
}

#[test]
fn zero_step_training_writes_a_checkpoint_and_evaluates_once() {
    let f = fixture();
    let out_dir = f.root.join("ckpt-zero");
    let stdout = run_ok(slu().args([
        "train",
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--variant",
        "no_context",
        "--token-dim",
        "8",
        "--steps",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(stdout.contains("# effective config"));
    assert!(stdout.contains("steps = 0"));
    assert!(stdout.contains("learning_rate = "));
    assert!(out_dir.join("last/meta.json").exists());
    assert!(out_dir.join("last/params.bin").exists());
    let report = read_json(&out_dir.join("report.json"));
    let history = report["history"].as_array().unwrap();
    assert_eq!(history.len(), 1);
    assert!(history[0]["train_loss"].is_null());
}

#[test]
fn flags_override_config_file_values() {
    let f = fixture();
    let cfg_path = f.root.join("train.cfg");
    std::fs::write(
        &cfg_path,
        "# screening defaults\nsteps = 5\nlearning_rate = 0.5\nseed = 3\n",
    )
    .unwrap();
    let out_dir = f.root.join("ckpt-cfgfile");
    let stdout = run_ok(slu().args([
        "train",
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--token-dim",
        "8",
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    // The flag beat the file; untouched file values survived.
    assert!(stdout.contains("steps = 0"), "got:\n{stdout}");
    assert!(stdout.contains("learning_rate = 0.5"), "got:\n{stdout}");
    assert!(stdout.contains("seed = 3"), "got:\n{stdout}");
}

#[test]
fn predict_then_eval_on_the_dump_reproduces_eval_exactly() {
    let f = fixture();
    let ckpt = f.quick_ckpt("ckpt-roundtrip", &[]);
    let eval_json = f.root.join("eval-direct.json");
    let stdout = run_ok(slu().args([
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--split",
        "dev",
        "--json",
        eval_json.to_str().unwrap(),
    ]));
    assert!(stdout.contains("overall"), "got:\n{stdout}");

    let dump = f.root.join("roundtrip.jsonl");
    run_ok(slu().args([
        "predict",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--split",
        "dev",
        "--out",
        dump.to_str().unwrap(),
    ]));
    let dump_json = f.root.join("eval-dump.json");
    run_ok(slu().args([
        "eval",
        "--dump",
        dump.to_str().unwrap(),
        "--json",
        dump_json.to_str().unwrap(),
    ]));
    assert_eq!(read_json(&eval_json), read_json(&dump_json));
}

#[test]
fn eval_on_gold_as_predictions_scores_one_everywhere() {
    let f = fixture();
    let ckpt = f.quick_ckpt("ckpt-gold", &[]);
    let dump = f.root.join("gold.jsonl");
    run_ok(slu().args([
        "predict",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--split",
        "dev",
        "--out",
        dump.to_str().unwrap(),
    ]));
    // Rewrite predictions to the gold frame.
    let text = std::fs::read_to_string(&dump).unwrap();
    let rewritten: String = text
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            v["predicted_intent"] = v["gold_intent"].clone();
            v["predicted_acts"] = v["gold_acts"].clone();
            v["predicted_tags"] = v["gold_tags"].clone();
            serde_json::to_string(&v).unwrap()
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    let gold_dump = f.root.join("gold-rewritten.jsonl");
    std::fs::write(&gold_dump, rewritten).unwrap();
    let json_path = f.root.join("gold-metrics.json");
    run_ok(slu().args([
        "eval",
        "--dump",
        gold_dump.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]));
    let metrics = read_json(&json_path);
    let overall = &metrics["overall"];
    for key in ["intent_accuracy", "act_f1", "slot_chunk_f1", "frame_accuracy"] {
        assert_eq!(overall[key].as_f64().unwrap(), 1.0, "{key} below 1.0: {overall}");
    }
}

#[test]
fn self_comparison_is_not_significant() {
    let f = fixture();
    let ckpt = f.quick_ckpt("ckpt-compare", &[]);
    let dump = f.root.join("self.jsonl");
    run_ok(slu().args([
        "predict",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--split",
        "dev",
        "--out",
        dump.to_str().unwrap(),
    ]));
    let verdict_path = f.root.join("self-compare.json");
    let stdout = run_ok(slu().args([
        "compare",
        "--preds-a",
        dump.to_str().unwrap(),
        "--preds-b",
        dump.to_str().unwrap(),
        "--json",
        verdict_path.to_str().unwrap(),
    ]));
    assert!(stdout.contains("significant at p < 0.05: no"), "got:\n{stdout}");
    let verdict = read_json(&verdict_path);
    assert_eq!(verdict["b"], 0);
    assert_eq!(verdict["c"], 0);
    assert_eq!(verdict["p_value"], 1.0);
    assert_eq!(verdict["significant"], false);
}

#[test]
fn eval_refuses_a_checkpoint_trained_on_a_different_vocabulary() {
    let f = fixture();
    let ckpt = f.quick_ckpt("ckpt-mismatch", &[]);
    let stderr = assert_exit(
        slu().args([
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--prepared",
            f.prepared_both().to_str().unwrap(),
            "--split",
            "dev",
        ]),
        1,
    );
    assert!(stderr.contains("vocabulary"), "got:\n{stderr}");
}

#[test]
fn training_resumes_from_a_checkpoint() {
    let f = fixture();
    let out_dir = f.root.join("ckpt-resume-cli");
    f.quick_ckpt("ckpt-resume-cli", &[]);
    let stdout = run_ok(slu().args([
        "train",
        "--prepared",
        f.prepared_m().to_str().unwrap(),
        "--steps",
        "12",
        "--seed",
        "11",
        "--resume",
        out_dir.join("last").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(stdout.contains("finished step 12"), "got:\n{stdout}");
    let meta = read_json(&out_dir.join("last/meta.json"));
    assert_eq!(meta["step"], 12);
}
