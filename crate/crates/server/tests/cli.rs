use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

const CPR_QUESTION: &str =
    "Hi, I have a person that is not breathing. I have already requested PMC. What was the fourth step of the ISS CPR procedure?";

fn bundle(id: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/procedures").join(id).join("procedure.json")
}

fn core(data: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_core"));
    cmd.arg("--data-dir").arg(data).env("RUST_LOG", "warn").current_dir(data);
    for key in ["CORE_CONFIG", "CORE_BACKEND", "CORE_SERVER", "CORE_DATA_DIR", "CORE_TRANSCRIPT"] {
        cmd.env_remove(key);
    }
    cmd
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn ingest_query_and_graph_share_the_data_dir() {
    let data = tempfile::tempdir().unwrap();
    let out = ok(core(data.path()).arg("ingest").arg(bundle("iss-cpr")).arg(bundle("fire-response")).output().unwrap());
    let summaries: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(summaries.len(), 2);
    assert_eq!(summaries[0]["procedure_id"], "iss-cpr");
    assert!(data.path().join("graph.jsonl").is_file());
    assert!(data.path().join("index.json").is_file());

    let reply = ok(core(data.path()).args(["query", CPR_QUESTION]).output().unwrap());
    assert!(reply.contains("DEPLOY AED"), "{reply}");

    let outcome: Value =
        serde_json::from_str(&ok(core(data.path()).args(["query", "--json", CPR_QUESTION]).output().unwrap())).unwrap();
    assert_eq!(outcome["reply"]["step_number"], 4);
    assert_eq!(outcome["report"]["status"], "Pass");

    let nodes = ok(core(data.path())
        .args(["graph", "neighbors", "procedure:iss-cpr", "--kind", "HasMetadata"])
        .output()
        .unwrap());
    let node: Value = serde_json::from_str(nodes.lines().next().unwrap()).unwrap();
    assert_eq!(node["attributes"]["Last update"], "09 April 2015");
}

#[test]
fn usage_errors_exit_nonzero() {
    let data = tempfile::tempdir().unwrap();
    let out = core(data.path()).args(["query", "--session", "abc", "hello"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--server"));

    let out = core(data.path()).args(["ingest", "/no/such/procedure.json"]).output().unwrap();
    assert!(!out.status.success());

    let out = core(data.path()).args(["graph", "neighbors", "procedure:x", "--kind", "Nope"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_file_supplies_defaults() {
    let data = tempfile::tempdir().unwrap();
    let transcript = data.path().join("replies.json");
    std::fs::write(&transcript, r#"[{"match": "fourth step", "reply": "Scripted."}]"#).unwrap();
    std::fs::write(
        data.path().join("core.toml"),
        format!("backend = \"transcript\"\ntranscript = {:?}\n", transcript.display().to_string()),
    )
    .unwrap();
    ok(core(data.path()).arg("ingest").arg(bundle("iss-cpr")).output().unwrap());
    let reply = ok(core(data.path()).args(["query", CPR_QUESTION]).output().unwrap());
    assert_eq!(reply.trim(), "Scripted.");
    // A flag outranks the file.
    let reply = ok(core(data.path()).args(["--backend", "oracle", "query", CPR_QUESTION]).output().unwrap());
    assert!(reply.contains("DEPLOY AED"));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn remote_query_keeps_session_state() {
    let data = tempfile::tempdir().unwrap();
    ok(core(data.path()).arg("ingest").arg(bundle("iss-cpr")).output().unwrap());
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = Server(
        core(data.path())
            .args(["serve", "--port", &port.to_string()])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let base = format!("http://127.0.0.1:{port}");
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let out = core(data.path()).args(["query", "--json", "--server", &base, CPR_QUESTION]).output().unwrap();
    let session =
        String::from_utf8_lossy(&out.stderr).lines().find_map(|l| l.strip_prefix("session ").map(str::to_string));
    let outcome: Value = serde_json::from_str(&ok(out)).unwrap();
    assert_eq!(outcome["reply"]["step_number"], 4);
    let session = session.expect("session id on stderr");

    let out = ok(core(data.path())
        .args(["query", "--json", "--server", &base, "--session", &session, "What is the next step?"])
        .output()
        .unwrap());
    let outcome: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(outcome["reply"]["step_number"], 5);

    let out = core(data.path()).args(["query", "--server", &base, "--session", "missing", "hi"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_session"));
}
