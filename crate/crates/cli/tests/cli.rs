use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use optplan_core::curvefit::corpus::{write_corpus, CorpusRecord};
use optplan_core::curvefit::{self, CurveFamily};
use optplan_core::planner::ledger::read_ledger;
use optplan_core::planner::LedgerEvent;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const BIN: &str = env!("CARGO_BIN_EXE_optplan");

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn optplan(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("OPTPLAN_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Compares against a checked-in file; `OPTPLAN_UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, actual: &str) {
    let path = data(name);
    if std::env::var_os("OPTPLAN_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{} differs from the generated output", path.display());
}

fn copy_fixture(name: &str, dir: &Path) -> PathBuf {
    let dest = dir.join(name);
    std::fs::copy(repo().join("fixtures").join(name), &dest).unwrap();
    dest
}

fn small_config(dir: &Path) -> PathBuf {
    copy_fixture("small.toml", dir)
}

#[test]
fn plan_is_byte_stable_and_resume_reuses_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = optplan(&["plan", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("best path ends at S4"), "{}", stdout(&out));
    let plan = std::fs::read_to_string(dir.path().join("small.plan.json")).unwrap();
    golden("small.plan.json", &plan);

    // a broken trainer proves resume never launches one
    let ledger_before = std::fs::read(dir.path().join("small.ledger.jsonl")).unwrap();
    let text = std::fs::read_to_string(&cfg).unwrap();
    let broken = text.replace(
        r#"command = ["@self", "simtrainer", "--scenario", "kinetics-like"]"#,
        r#"command = ["/nonexistent/trainer"]"#,
    );
    assert_ne!(text, broken);
    std::fs::write(&cfg, broken).unwrap();
    std::fs::remove_file(dir.path().join("small.plan.json")).unwrap();
    let out = optplan(&["plan", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(dir.path().join("small.plan.json")).unwrap(), plan);
    assert_eq!(std::fs::read(dir.path().join("small.ledger.jsonl")).unwrap(), ledger_before);
}

#[test]
fn worker_count_does_not_change_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = optplan(&["plan", "--config", cfg.to_str().unwrap(), "--workers", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    golden("small.plan.json", &std::fs::read_to_string(dir.path().join("small.plan.json")).unwrap());
}

#[test]
fn seed_flag_overrides_config_and_resume_checks_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap();
    let tiny = text
        .replace("clip_lens = [8, 16]", "clip_lens = [8]")
        .replace("learning_rates = [0.1, 0.01]", "learning_rates = [0.1]")
        .replace(r#"strategies = ["consecutive", "uniform"]"#, r#"strategies = ["consecutive"]"#);
    std::fs::write(&cfg, tiny).unwrap();
    let c = cfg.to_str().unwrap();
    let out = optplan(&["plan", "--config", c, "--seed", "99"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let entries = read_ledger(&dir.path().join("small.ledger.jsonl")).unwrap().entries;
    assert!(matches!(entries[0].event, LedgerEvent::RunStarted { seed: 99, .. }));
    let out = optplan(&["plan", "--config", c, "--resume"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
}

#[test]
fn non_monotone_clip_lengths_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[8, 16]", "[16, 8]");
    std::fs::write(&cfg, text).unwrap();
    let out = optplan(&["plan", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("clip"), "{}", stderr(&out));
    assert!(!dir.path().join("small.ledger.jsonl").exists());
}

#[test]
fn broken_trainers_fail_the_plan() {
    for (command, expect) in [
        (r#"["sh", "-c", "exit 0"]"#, "connection"),
        (r#"["cat"]"#, "malformed response"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let text = std::fs::read_to_string(&cfg).unwrap().replace(
            r#"["@self", "simtrainer", "--scenario", "kinetics-like"]"#,
            command,
        );
        std::fs::write(&cfg, text).unwrap();
        let out = optplan(&["plan", "--config", cfg.to_str().unwrap()]);
        assert!(!out.status.success(), "{command}");
        assert!(
            stderr(&out).to_lowercase().contains(expect),
            "{command}: {}",
            stderr(&out)
        );
        assert!(!dir.path().join("small.plan.json").exists());
    }
}

#[test]
fn plan_over_tcp() {
    let mut server = Command::new(BIN)
        .args(["simtrainer", "--scenario", "ssv-like", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        r#"command = ["@self", "simtrainer", "--scenario", "kinetics-like"]"#,
        &format!("tcp = \"{addr}\""),
    );
    std::fs::write(&cfg, text).unwrap();
    let out = optplan(&["plan", "--config", cfg.to_str().unwrap(), "--workers", "2"]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    // uniform sampling wins under this scenario
    assert!(stdout(&out).contains("(uniform)"), "{}", stdout(&out));
}

#[test]
fn graph_command_prints_the_document() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_fixture("kinetics.toml", dir.path());
    let out = optplan(&["graph", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let g = optplan_core::TransitionGraph::from_document(&stdout(&out)).unwrap();
    assert_eq!(g.states().len(), 19);
    assert_eq!(g.edges().len(), 38);
}

fn corpus(dir: &Path, family: CurveFamily, alpha: &[f64], sigma: f64, n: u64) -> PathBuf {
    let records: Vec<CorpusRecord> = (0..n)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points = (0..=60u32)
                .map(|t| {
                    let y = curvefit::evaluate(family, alpha, t as f64).unwrap();
                    let z = if sigma > 0.0 {
                        Normal::new(0.0, sigma).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    (t, (y + z).clamp(0.0, 1.0))
                })
                .collect();
            CorpusRecord {
                id: format!("{family}-{seed}"),
                points,
            }
        })
        .collect();
    let path = dir.join(format!("{family}-{sigma}.jsonl"));
    write_corpus(std::fs::File::create(&path).unwrap(), &records).unwrap();
    path
}

fn summary(out: &Path) -> Vec<serde_json::Value> {
    let text = std::fs::read_to_string(format!("{}.summary.json", out.display())).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn fit_noiseless_exponential_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = corpus(dir.path(), CurveFamily::Exponential, &[0.8, -0.3, -0.2, 0.004, -0.0001], 0.0, 10);
    let out_file = dir.path().join("fits.jsonl");
    let out = optplan(&[
        "fit",
        "--corpus",
        path.to_str().unwrap(),
        "--family",
        "exp",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("exponential"));
    let s = summary(&out_file);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0]["fitted"], 10);
    let rmse = s[0]["mean_rmse"].as_f64().unwrap();
    assert!(rmse <= 1e-6, "{rmse}");
    assert_eq!(std::fs::read_to_string(&out_file).unwrap().lines().count(), 10);
}

#[test]
fn fit_all_families_agree_in_scale() {
    let dir = tempfile::tempdir().unwrap();
    let sigma = 1e-3;
    let path = corpus(dir.path(), CurveFamily::Exponential, &[0.8, -0.3, -0.2, 0.004, -0.0001], sigma, 20);
    let out = optplan(&["fit", "--corpus", path.to_str().unwrap(), "--family", "all"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let default_out = PathBuf::from(format!("{}.fits.jsonl", path.display()));
    let s = summary(&default_out);
    let rmse: Vec<f64> = s.iter().map(|f| f["mean_rmse"].as_f64().unwrap()).collect();
    assert_eq!(rmse.len(), 4);
    let (lo, hi) = rmse.iter().fold((f64::INFINITY, 0f64), |(lo, hi), r| (lo.min(*r), hi.max(*r)));
    assert!(hi / lo < 10.0, "{rmse:?}");
    // only the generating family can reach the noise floor
    assert_eq!(s[2]["family"], "exponential");
    assert!((0.5 * sigma..=2.0 * sigma).contains(&rmse[2]), "{rmse:?}");
    for f in &s {
        assert!(f["mean_r_square"].as_f64().unwrap() > 0.99, "{f}");
    }
}

#[test]
fn fit_rejects_empty_and_unusable_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = optplan(&["fit", "--corpus", empty.to_str().unwrap(), "--family", "all"]);
    assert!(!out.status.success());

    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "not json\n{\"id\":\"x\",\"points\":[[0,2.0]]}\n").unwrap();
    let out = optplan(&["fit", "--corpus", junk.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("skipped"), "{}", stderr(&out));

    // too short for any family: parsed, but nothing can be fitted
    let short = dir.path().join("short.jsonl");
    std::fs::write(&short, "{\"id\":\"s\",\"points\":[[0,0.1],[1,0.2]]}\n").unwrap();
    let out = optplan(&["fit", "--corpus", short.to_str().unwrap(), "--family", "power"]);
    assert!(!out.status.success());
}

#[test]
fn fit_skips_bad_lines_but_fits_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let path = corpus(dir.path(), CurveFamily::Exponential, &[0.8, -0.3, -0.2, 0.004, -0.0001], 0.0, 3);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{broken\n");
    std::fs::write(&path, text).unwrap();
    let out = optplan(&["fit", "--corpus", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains(":4: skipped"), "{}", stderr(&out));
}

fn stopped_count(ledger: &Path) -> usize {
    read_ledger(ledger)
        .unwrap()
        .entries
        .iter()
        .filter(|e| matches!(e.event, LedgerEvent::TransitionStopped { .. }))
        .count()
}

fn red_edges(svg: &str) -> Vec<(String, String)> {
    svg.lines()
        .filter(|l| l.contains(r#"stroke="red""#))
        .map(|l| {
            let attr = |name: &str| {
                let start = l.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
                l[start..start + l[start..].find('"').unwrap()].to_string()
            };
            (attr("data-from"), attr("data-to"))
        })
        .collect()
}

#[test]
fn report_matches_golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = data("small.ledger.jsonl");
    let out = optplan(&["report", "--ledger", ledger.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    let svg = std::fs::read_to_string(dir.path().join("graph.svg")).unwrap();
    golden("small.graph.svg", &svg);
    let csv = std::fs::read_to_string(dir.path().join("transitions.csv")).unwrap();
    golden("small.transitions.csv", &csv);
    golden("small.path.csv", &std::fs::read_to_string(dir.path().join("path.csv")).unwrap());

    assert_eq!(csv.lines().count() - 1, stopped_count(&ledger));
    let plan: optplan_core::OptimizationPlan =
        serde_json::from_str(&std::fs::read_to_string(data("small.plan.json")).unwrap()).unwrap();
    let expected: Vec<(String, String)> = plan
        .path
        .windows(2)
        .map(|w| (w[0].to_string(), w[1].to_string()))
        .collect();
    assert_eq!(red_edges(&svg), expected);
    let fits = std::fs::read_dir(dir.path().join("fits")).unwrap().count();
    assert_eq!(fits, stopped_count(&ledger));
}

#[test]
fn report_on_a_torn_ledger_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(data("small.ledger.jsonl")).unwrap();
    let cut = full.find("\"event\":\"transition_stopped\"").unwrap() + 40;
    let torn = dir.path().join("torn.jsonl");
    std::fs::write(&torn, &full[..cut]).unwrap();
    let out_dir = dir.path().join("report");
    let out = optplan(&["report", "--ledger", torn.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("incomplete line"), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("transitions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let svg = std::fs::read_to_string(out_dir.join("graph.svg")).unwrap();
    assert!(red_edges(&svg).is_empty());
    assert!(svg.contains("edge"));
}

#[test]
fn report_on_an_empty_ledger_has_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(data("small.ledger.jsonl")).unwrap();
    for (name, content) in [("empty.jsonl", ""), ("started.jsonl", full.lines().next().unwrap())] {
        let ledger = dir.path().join(name);
        std::fs::write(&ledger, format!("{content}\n").trim_start()).unwrap();
        let out_dir = dir.path().join(name.replace(".jsonl", ""));
        let out = optplan(&["report", "--ledger", ledger.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        for table in ["transitions.csv", "epochs.csv", "path.csv", "failures.csv"] {
            let text = std::fs::read_to_string(out_dir.join(table)).unwrap();
            assert_eq!(text.lines().count(), 1, "{name} {table}");
        }
    }
    let out = optplan(&["report", "--ledger", "/nonexistent/ledger.jsonl", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn report_rejects_corruption_before_the_tail() {
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(data("small.ledger.jsonl")).unwrap();
    let mut lines: Vec<&str> = full.lines().collect();
    lines[3] = "{garbage";
    let ledger = dir.path().join("bad.jsonl");
    std::fs::write(&ledger, lines.join("\n") + "\n").unwrap();
    let out = optplan(&["report", "--ledger", ledger.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn conformance_of_the_simulator_subprocess() {
    let out = optplan(&["conformance", "--", BIN, "simtrainer", "--scenario", "skip-middle-clip"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS clean_exit"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");

    let out = optplan(&["conformance", "--timeout-secs", "2", "--", "cat"]);
    assert!(!out.status.success());
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));
}

#[test]
fn simtrainer_accepts_scenario_files() {
    let scenario = repo().join("crates/core/scenarios/ssv-like.toml");
    let out = optplan(&["conformance", "--", BIN, "simtrainer", "--scenario", scenario.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stdout(&out));
    let out = optplan(&["simtrainer", "--scenario", "no-such-scenario"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("kinetics-like"), "{}", stderr(&out));
}
