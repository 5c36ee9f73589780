use std::path::PathBuf;
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> String {
    root().join("scenarios").join(format!("{name}.json")).display().to_string()
}

fn edgespec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgespec")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn throughput(args: &[&str]) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&stdout(&edgespec(args))).unwrap();
    v["throughput_tps"].as_f64().unwrap()
}

#[test]
fn missing_scenario_exits_2_and_names_path() {
    let out = edgespec(&["simulate", "--scenario", "/no/such/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/scenario.json"));
}

#[test]
fn unknown_scenario_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(scenario("fullhit")).unwrap().replacen("{", "{\"colour\": 1,", 1);
    std::fs::write(&path, text).unwrap();
    let out = edgespec(&["simulate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_reports_expected_latency() {
    let out = stdout(&edgespec(&[
        "analyze",
        "--alpha",
        "0.8",
        "--gamma",
        "4",
        "--t-draft",
        "100",
        "--t-rtt",
        "60",
        "--t-verify",
        "30",
        "--json",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["async_latency_ms"].as_f64().unwrap() - 153.136).abs() < 1e-9);
    assert_eq!(v["at_limit"], false);
}

#[test]
fn analyze_flags_the_limit_at_full_acceptance() {
    let out = stdout(&edgespec(&["analyze", "--alpha", "1", "--t-draft", "100", "--t-rtt", "60", "--t-verify", "30"]));
    let row = out.lines().find(|l| l.starts_with("S ")).unwrap();
    assert!(row.contains("at limit"), "{row}");
}

#[test]
fn analyze_rejects_out_of_range_alpha() {
    let out = edgespec(&["analyze", "--alpha", "1.5", "--t-draft", "1", "--t-rtt", "1", "--t-verify", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1.5"));
}

#[test]
fn fullhit_throughput_and_sync_override() {
    let path = scenario("fullhit");
    let full = throughput(&["simulate", "--scenario", &path]);
    // gamma = 4 tokens per 4 x 25 ms of drafting.
    let want = 4.0 / 100.0 * 1000.0;
    assert!((full - want).abs() / want <= 0.02, "{full}");
    let sync = throughput(&["simulate", "--scenario", &path, "--mode", "sync"]);
    assert!(sync < full, "{sync} vs {full}");
}

#[test]
fn sweep_csv_matches_golden_file() {
    let out = stdout(&edgespec(&[
        "sweep",
        "--scenario",
        &scenario("alpha-grid"),
        "--dim",
        "gamma",
        "--values",
        "2,4",
        "--max-tokens",
        "400",
        "--seed",
        "9",
    ]));
    let golden = std::fs::read_to_string(root().join("crates/cli/tests/golden/alpha-grid-gamma.csv")).unwrap();
    assert_eq!(out, golden);
}

#[test]
fn topk_sweep_tv_non_increasing() {
    let out = stdout(&edgespec(&[
        "sweep",
        "--scenario",
        &scenario("lossless-check"),
        "--dim",
        "K",
        "--values",
        "1,2,4,V",
        "--max-tokens",
        "500",
    ]));
    let mut rd = csv::Reader::from_reader(out.as_bytes());
    let col = rd.headers().unwrap().iter().position(|h| h == "tv_distance").unwrap();
    let tv: Vec<f64> = rd.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(tv.len(), 4);
    assert!(tv.windows(2).all(|w| w[1] <= w[0]), "{tv:?}");
    assert!(tv[3] < 1e-6);
}

#[test]
fn rtt_sweep_is_flat_when_compute_bound() {
    let out = stdout(&edgespec(&[
        "sweep",
        "--scenario",
        &scenario("fullhit"),
        "--dim",
        "rtt",
        "--values",
        "0,20,40,60",
        "--format",
        "json",
    ]));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    let thr: Vec<f64> = rows.iter().map(|r| r["throughput_tps"].as_f64().unwrap()).collect();
    let mean = thr.iter().sum::<f64>() / thr.len() as f64;
    assert!(thr.iter().all(|t| (t - mean).abs() / mean <= 0.02), "{thr:?}");
}

#[test]
fn sweep_needs_two_values() {
    let out = edgespec(&["sweep", "--scenario", &scenario("fullhit"), "--dim", "gamma", "--values", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transcript_file_has_digest_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    let args = ["simulate", "--scenario", &scenario("lossless-check"), "--max-tokens", "300"];
    let mut with_transcript = args.to_vec();
    with_transcript.extend(["--transcript", path.to_str().unwrap()]);
    stdout(&edgespec(&with_transcript));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# digest ") && header.len() == "# digest ".len() + 64, "{header}");
    assert!(lines.count() >= 300);
}

#[test]
fn compare_emits_every_mode() {
    let out = stdout(&edgespec(&["compare", "--scenario", &scenario("fullhit"), "--max-tokens", "200"]));
    for mode in ["async", "no-fastverify", "no-splitrej", "sync"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("mode,{mode},"))), "{mode} missing");
    }
}

#[test]
fn serve_without_cloud_is_refused() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let out = edgespec(&["serve", "--role", "edge", "--addr", &addr, "--scenario", &scenario("fullhit")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refused"));
}

#[test]
fn serve_loopback_matches_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("jitter-stress");
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let cloud_out = dir.path().join("cloud.txt");
    let mut cloud = Command::new(env!("CARGO_BIN_EXE_edgespec"))
        .args(["serve", "--role", "cloud", "--addr", &addr, "--scenario", &path, "--max-tokens", "800"])
        .args(["--transcript", cloud_out.to_str().unwrap()])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let edge_out = dir.path().join("edge.txt");
    let edge = (0..50)
        .map(|_| {
            std::thread::sleep(std::time::Duration::from_millis(50));
            edgespec(&[
                "serve",
                "--role",
                "edge",
                "--addr",
                &addr,
                "--scenario",
                &path,
                "--max-tokens",
                "800",
                "--transcript",
                edge_out.to_str().unwrap(),
            ])
        })
        .find(|o| o.status.success())
        .expect("edge connects");
    assert!(cloud.wait().unwrap().success());
    drop(edge);
    let sim_out = dir.path().join("sim.txt");
    stdout(&edgespec(&[
        "simulate",
        "--scenario",
        &path,
        "--max-tokens",
        "800",
        "--transcript",
        sim_out.to_str().unwrap(),
    ]));
    let sim = std::fs::read_to_string(sim_out).unwrap();
    assert_eq!(std::fs::read_to_string(edge_out).unwrap(), sim);
    assert_eq!(std::fs::read_to_string(cloud_out).unwrap(), sim);
}

#[test]
fn serve_digest_mismatch_aborts() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let path = scenario("fullhit");
    let mut cloud = Command::new(env!("CARGO_BIN_EXE_edgespec"))
        .args(["serve", "--role", "cloud", "--addr", &addr, "--scenario", &path])
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let edge = (0..50)
        .map(|_| {
            std::thread::sleep(std::time::Duration::from_millis(50));
            edgespec(&["serve", "--role", "edge", "--addr", &addr, "--scenario", &path, "--seed", "99"])
        })
        .find(|o| !String::from_utf8_lossy(&o.stderr).contains("refused"))
        .expect("edge connects");
    assert!(String::from_utf8_lossy(&edge.stderr).contains("digest"));
    assert!(!cloud.wait().unwrap().success());
}
