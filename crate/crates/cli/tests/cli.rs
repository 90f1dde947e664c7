use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use coreg_core::inlet::InletClient;
use coreg_core::stream::{SampleValues, StreamInfo, StreamKind, TimedSamples};
use coreg_core::xdf::{decode_session, encode_session};

fn coreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coreg"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> String {
    let cfg = dir.join("small.json");
    std::fs::write(&cfg, r#"{"sim":{"duration_s":40,"n_sentences":12,"words_per_sentence":6},"analysis":{"stats":{"n_permutations":500}}}"#).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_session_truth_and_resolved_config() {
    let d = tempfile::tempdir().unwrap();
    let out = coreg(&["simulate", "--out", p(d.path()), "--seed", "3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["session.xdf", "truth.json", "config.resolved.json"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["sim"]["seed"], 3);
    assert_eq!(resolved["analysis"]["stats"]["seed"], 3);
}

#[test]
fn simulate_is_reproducible_byte_for_byte() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert!(
        coreg(&["simulate", "--config", &cfg, "--out", p(&a), "--seed", "11"])
            .status
            .success()
    );
    assert!(
        coreg(&["simulate", "--config", &cfg, "--out", p(&b), "--seed", "11"])
            .status
            .success()
    );
    for f in ["session.xdf", "truth.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn invalid_config_exits_1_naming_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sim":{"duration_s":-1}}"#).unwrap();
    let out = coreg(&[
        "simulate",
        "--config",
        p(&cfg),
        "--out",
        p(&d.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duration_s"));

    std::fs::write(&cfg, r#"{"analysis":{"eeg":{"artifact_treshold_uv":10}}}"#).unwrap();
    let out = coreg(&[
        "simulate",
        "--config",
        p(&cfg),
        "--out",
        p(&d.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("artifact_treshold_uv"));
}

#[test]
fn inspect_reports_streams_and_maps_errors() {
    let d = tempfile::tempdir().unwrap();
    assert!(coreg(&[
        "simulate",
        "--config",
        &small_config(d.path()),
        "--out",
        p(d.path())
    ])
    .status
    .success());
    let out = coreg(&["inspect", p(&d.path().join("session.xdf"))]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    let eeg = table.lines().find(|l| l.starts_with("eeg")).unwrap();
    assert!(
        eeg.contains("125.00") && eeg.split_whitespace().nth(3) == Some("16"),
        "{eeg}"
    );

    assert_eq!(
        coreg(&["inspect", p(&d.path().join("nope.xdf"))])
            .status
            .code(),
        Some(2)
    );
    let junk = d.path().join("junk.xdf");
    std::fs::write(&junk, b"NOPE and more").unwrap();
    let out = coreg(&["inspect", p(&junk)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn analyze_writes_outputs_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    assert!(coreg(&["simulate", "--config", &cfg, "--out", p(d.path())])
        .status
        .success());
    let xdf = d.path().join("session.xdf");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let out = coreg(&[
        "analyze",
        p(&xdf),
        "--config",
        &cfg,
        "--out",
        p(&a),
        "--k-sentences",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(coreg(&[
        "analyze",
        p(&xdf),
        "--config",
        &cfg,
        "--out",
        p(&b),
        "--k-sentences",
        "3"
    ])
    .status
    .success());
    for f in [
        "features.csv",
        "sentences.csv",
        "report.json",
        "report.md",
        "config.resolved.json",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let ja = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ja, std::fs::read(b.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(report["comparisons"].as_array().unwrap().len(), 3);
    assert_eq!(
        report["longest_fixated_sentences"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
    let csv = std::fs::read_to_string(a.join("features.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "word_id,sentence_id,condition,theta_parietal_uv2,n400_uv,total_fixation_ms,expectedness"
    );

    let md = coreg(&["report", p(&a)]);
    assert!(md.status.success());
    assert_eq!(md.stdout, std::fs::read(a.join("report.md")).unwrap());
}

#[test]
fn analyze_without_eeg_exits_4_naming_the_stream() {
    let d = tempfile::tempdir().unwrap();
    assert!(coreg(&[
        "simulate",
        "--config",
        &small_config(d.path()),
        "--out",
        p(d.path())
    ])
    .status
    .success());
    let xdf = d.path().join("session.xdf");
    let mut rec = decode_session(&std::fs::read(&xdf).unwrap()).unwrap();
    rec.streams.retain(|s| s.info.kind != StreamKind::Eeg);
    let cut = d.path().join("no_eeg.xdf");
    std::fs::write(&cut, encode_session(&rec).unwrap()).unwrap();
    let out = coreg(&["analyze", p(&cut), "--out", p(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("EEG"));
}

#[test]
fn analyze_falls_back_to_the_truth_sidecar() {
    let d = tempfile::tempdir().unwrap();
    assert!(coreg(&[
        "simulate",
        "--config",
        &small_config(d.path()),
        "--out",
        p(d.path())
    ])
    .status
    .success());
    let xdf = d.path().join("session.xdf");
    let mut rec = decode_session(&std::fs::read(&xdf).unwrap()).unwrap();
    rec.streams.retain(|s| s.info.kind != StreamKind::Rating);
    std::fs::write(&xdf, encode_session(&rec).unwrap()).unwrap();
    let out = coreg(&["analyze", p(&xdf), "--out", p(&d.path().join("o"))]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("o/report.json")).unwrap()).unwrap();
    assert!(report["ratings_source"].as_str().unwrap().contains("truth"));

    std::fs::remove_file(d.path().join("truth.json")).unwrap();
    assert_eq!(
        coreg(&["analyze", p(&xdf), "--out", p(&d.path().join("o2"))])
            .status
            .code(),
        Some(4)
    );
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn connect_retry(addr: &str) -> InletClient {
    let until = Instant::now() + Duration::from_secs(10);
    loop {
        match InletClient::connect(addr, || 0.0) {
            Ok(c) => return c,
            Err(e) if Instant::now() > until => panic!("{e}"),
            Err(_) => sleep(Duration::from_millis(50)),
        }
    }
}

#[test]
fn serve_records_until_interrupted() {
    let d = tempfile::tempdir().unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let mut child = Command::new(env!("CARGO_BIN_EXE_coreg"))
        .args(["serve", "--listen", &addr, "--out", p(d.path())])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut c = connect_retry(&addr);
    let info = StreamInfo::new("dev", StreamKind::Input, &["a", "b"], 0.0);
    c.hello(&info).unwrap();
    let s = TimedSamples {
        channel_count: 2,
        timestamps: vec![1.0, 2.0, 3.0],
        values: SampleValues::Numeric(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
    };
    c.send_samples("dev", &s).unwrap();
    c.bye("dev").unwrap();
    c.close().unwrap();

    // the port is taken now
    let busy = coreg(&[
        "serve",
        "--listen",
        &addr,
        "--out",
        p(&d.path().join("other")),
    ]);
    assert_eq!(busy.status.code(), Some(1));

    Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
    let rec = decode_session(&std::fs::read(d.path().join("session.xdf")).unwrap()).unwrap();
    assert_eq!(rec.stream("dev").unwrap().samples, s);
}
