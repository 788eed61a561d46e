use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn rdkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdkv"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .env("RDKV_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rdkv(args);
    assert!(
        out.status.success(),
        "rdkv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let d = dir.path();
        ok(&["gen", "--seed", "3", "--seq-len", "96", "--head-dim", "16", "--outliers", "2", "--out", &p(d, "a.rdkv")]);
        ok(&["gen", "--seed", "4", "--seq-len", "96", "--head-dim", "16", "--out", &p(d, "b.rdkv")]);
        ok(&["calibrate", &p(d, "a.rdkv"), &p(d, "b.rdkv"), "--granularity", "token", "-o", &p(d, "v.json")]);
        ok(&["calibrate", &p(d, "a.rdkv"), &p(d, "b.rdkv"), "--granularity", "channel", "-o", &p(d, "k.json")]);
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        p(self.dir.path(), name)
    }

    fn allocate(&self, budget: &str, tag: &str) -> (String, String) {
        let (alloc, packed) = (self.path(&format!("{tag}.json")), self.path(&format!("{tag}.rdkvp")));
        ok(&[
            "allocate", "--cache", &self.path("a.rdkv"), "--budget-tokens", budget,
            "--v-table", &self.path("v.json"), "--k-table", &self.path("k.json"),
            "-o", &alloc, "--packed", &packed,
        ]);
        (alloc, packed)
    }
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = p(dir.path(), "x.rdkv");
    let b = p(dir.path(), "y.rdkv");
    ok(&["gen", "--seed", "9", "--seq-len", "40", "--out", &a]);
    ok(&["gen", "--seed", "9", "--seq-len", "40", "--out", &b]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = p(dir.path(), "z.rdkv");
    ok(&["gen", "--seed", "10", "--seq-len", "40", "--out", &c]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn gen_rejects_invalid_dims() {
    let dir = TempDir::new().unwrap();
    let out = rdkv(&["gen", "--q-heads", "3", "--kv-heads", "2", "--out", &p(dir.path(), "x.rdkv")]);
    assert!(!out.status.success());
    let out = rdkv(&["gen", "--head-dim", "0", "--out", &p(dir.path(), "x.rdkv")]);
    assert!(!out.status.success());
}

#[test]
fn calibrate_without_input_fails() {
    let dir = TempDir::new().unwrap();
    let out = rdkv(&["calibrate", "--granularity", "token", "-o", &p(dir.path(), "t.json")]);
    assert!(!out.status.success());
}

#[test]
fn calibrated_table_is_ordered() {
    let f = Fixture::new();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("v.json")).unwrap()).unwrap();
    let eps: Vec<f64> = ["0", "2", "4", "8", "16"].iter().map(|b| json["eps"][b].as_f64().unwrap()).collect();
    assert_eq!(eps[0], 1.0);
    assert_eq!(eps[4], 0.0);
    assert!(eps.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn allocate_requires_tables() {
    let f = Fixture::new();
    let out = rdkv(&[
        "allocate", "--cache", &f.path("a.rdkv"), "--budget-tokens", "32",
        "--v-table", &f.path("missing.json"), "--k-table", &f.path("k.json"), "-o", &f.path("o.json"),
    ]);
    assert!(!out.status.success());
}

#[test]
fn allocation_spends_the_budget() {
    let f = Fixture::new();
    let (alloc, _) = f.allocate("64", "mixed");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(alloc).unwrap()).unwrap();
    let heads = json["heads"].as_array().unwrap();
    let achieved: f64 = heads.iter().map(|h| h["achieved_bits"].as_f64().unwrap()).sum();
    let budget: f64 = heads.iter().map(|h| h["budget"]["head_bits"].as_f64().unwrap()).sum();
    assert!((achieved - budget).abs() / budget < 1e-2, "{achieved} vs {budget}");
}

#[test]
fn verify_identity_mixed_and_tampered() {
    let f = Fixture::new();
    let (alloc, packed) = f.allocate("1000", "full");
    let stdout = ok(&[
        "verify", "--cache", &f.path("a.rdkv"), "--allocation", &alloc, "--packed", &packed,
        "--tolerance", "1e-6",
    ]);
    assert!(stdout.starts_with("PASS"));

    let (alloc, packed) = f.allocate("40", "mixed");
    let stdout = ok(&[
        "verify", "--cache", &f.path("a.rdkv"), "--allocation", &alloc, "--packed", &packed,
        "--appended", "4", "--queries", "5", "--seed", "11",
    ]);
    assert!(stdout.starts_with("PASS"));

    let mut bytes = std::fs::read(&packed).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x55;
    let tampered = f.path("tampered.rdkvp");
    std::fs::write(&tampered, bytes).unwrap();
    let out = rdkv(&["verify", "--cache", &f.path("a.rdkv"), "--allocation", &alloc, "--packed", &tampered]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL"));
}

fn parse_sweep(path: &str) -> Vec<(String, f64, f64, f64, bool)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].parse().unwrap(), c[2].parse().unwrap(), c[3].parse().unwrap(), c[4] == "true")
        })
        .collect()
}

#[test]
fn sweep_csv_invariants_hold() {
    let f = Fixture::new();
    let out = f.path("sweep.csv");
    ok(&[
        "sweep", &f.path("a.rdkv"), &f.path("b.rdkv"), "--table", &f.path("v.json"),
        "-o", &out, "--plot", &f.path("sweep.svg"),
    ]);
    let rows = parse_sweep(&out);
    assert_eq!(rows.len(), 2 * 5 + 3 * 5);
    for seq in ["0", "1"] {
        let group: Vec<_> = rows.iter().filter(|r| r.0 == seq).collect();
        assert_eq!(group.len(), 5);
        for w in group.windows(2) {
            assert!(w[0].1 < w[1].1 && w[1].2 <= w[0].2);
        }
        for r in &group {
            assert!(r.4 && r.3 <= r.2);
        }
        assert_eq!(group.last().unwrap().2, 0.0);
    }
    assert!(std::fs::read_to_string(f.path("sweep.svg")).unwrap().contains("<svg"));

    let again = f.path("sweep2.csv");
    ok(&["sweep", &f.path("a.rdkv"), &f.path("b.rdkv"), "--table", &f.path("v.json"), "-o", &again]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn sweep_rejects_out_of_range_grid() {
    let f = Fixture::new();
    let out = rdkv(&["sweep", &f.path("a.rdkv"), "--table", &f.path("v.json"), "--grid", "0", "-o", &f.path("s.csv")]);
    assert!(!out.status.success());
}

#[test]
fn dump_bits_row_counts() {
    let f = Fixture::new();
    let (alloc, _) = f.allocate("1000", "full");
    let tokens = f.path("tokens.csv");
    ok(&["dump-bits", "--allocation", &alloc, "--layer", "1", "--head", "0", "-o", &tokens]);
    let text = std::fs::read_to_string(&tokens).unwrap();
    assert_eq!(text.lines().count(), 1 + 96);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",16")));

    let channels = f.path("channels.csv");
    ok(&["dump-bits", "--allocation", &alloc, "--layer", "0", "--head", "1", "--units", "channel", "-o", &channels]);
    assert_eq!(std::fs::read_to_string(&channels).unwrap().lines().count(), 1 + 16);

    let out = rdkv(&["dump-bits", "--allocation", &alloc, "--layer", "5", "--head", "0", "-o", &tokens]);
    assert!(!out.status.success());
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_rdkv"))
        .args(["gen", "--out", "/dev/null"])
        .env("RDKV_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
