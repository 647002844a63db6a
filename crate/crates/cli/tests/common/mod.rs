#![allow(dead_code)]

use std::io::{BufRead, BufReader, Cursor};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anemia_core::augment::EvalTransform;
use anemia_core::data::CLASS_NAMES;
use anemia_core::model::{
    build_model, save_checkpoint, BackboneInit, CheckpointMeta, CheckpointPaths, HeadConfig, Variant,
};

pub const BIN: &str = env!("CARGO_BIN_EXE_anemia");

pub fn anemia(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("DATABASE_URL").env_remove("ANEMIA_DATA_ROOT").env_remove("PORT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("run anemia")
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Writes a randomly initialised checkpoint and returns its weights path.
pub fn write_model(dir: &Path, variant: Variant, eval: EvalTransform) -> PathBuf {
    tch::manual_seed(11);
    let head = HeadConfig::for_variant(variant);
    let bundle = build_model(variant, &head, &BackboneInit::Random).unwrap();
    let meta = CheckpointMeta {
        variant,
        head_config: head,
        val_acc: 0.5,
        epoch: 1,
        config_hash: "feedfacecafe0000".into(),
        eval_transform: eval,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let paths = CheckpointPaths::new(dir, "model");
    save_checkpoint(&bundle, &meta, &paths).unwrap();
    paths.weights
}

pub fn png(seed: u8, w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([seed.wrapping_mul(37).wrapping_add(x as u8), (y * 3) as u8, seed.wrapping_add((x ^ y) as u8)])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

/// A running `anemia serve` with its log captured.
pub struct Server {
    child: Child,
    pub port: u16,
    log: Arc<Mutex<String>>,
}

impl Server {
    pub fn spawn(checkpoint: &Path, envs: &[(&str, &str)]) -> Server {
        let port = free_port();
        let mut cmd = Command::new(BIN);
        cmd.args(["serve", "--host", "127.0.0.1", "--max-wait", "10", "--checkpoint"])
            .arg(checkpoint)
            .args(["--port", &port.to_string()])
            .env_remove("DATABASE_URL")
            .env("RUST_LOG", "info")
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        for (k, v) in envs {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().expect("spawn serve");
        let log = Arc::new(Mutex::new(String::new()));
        let sink = log.clone();
        let stderr = child.stderr.take().unwrap();
        std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                let mut s = sink.lock().unwrap();
                s.push_str(&line);
                s.push('\n');
            }
        });
        Server { child, port, log }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://127.0.0.1:{}{path}", self.port)
    }

    pub fn log(&self) -> String {
        self.log.lock().unwrap().clone()
    }

    /// Waits until `/healthz` reports a loaded model.
    pub fn wait_ready(&mut self, timeout: Duration) -> Result<serde_json::Value, String> {
        let client = reqwest::blocking::Client::new();
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Ok(Some(status)) = self.child.try_wait() {
                return Err(format!("serve exited with {status}:\n{}", self.log()));
            }
            if let Ok(res) = client.get(self.url("/healthz")).send() {
                if let Ok(h) = res.json::<serde_json::Value>() {
                    if h["model_loaded"] == true {
                        return Ok(h);
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(200));
        }
        Err(format!("serve not ready after {timeout:?}:\n{}", self.log()))
    }

    pub fn stop(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn predict(
    client: &reqwest::blocking::Client,
    server: &Server,
    image: Vec<u8>,
    mime: &str,
    name: &str,
    sex: &str,
) -> reqwest::Result<reqwest::blocking::Response> {
    let part = reqwest::blocking::multipart::Part::bytes(image).file_name("upload").mime_str(mime)?;
    let form = reqwest::blocking::multipart::Form::new()
        .text("patient_name", name.to_string())
        .text("sex", sex.to_string())
        .part("image", part);
    client.post(server.url("/api/predict")).multipart(form).send()
}

/// A throwaway PostgreSQL cluster built from locally installed server binaries.
pub struct Postgres {
    _dir: tempfile::TempDir,
    data: PathBuf,
    bin: PathBuf,
    pub port: u16,
    as_nobody: bool,
}

const PGSERVER_BIN: &str = "/usr/local/lib/python3.10/dist-packages/pgserver/pginstall/bin";

fn pg_bin_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("ANEMIA_PG_BIN") {
        return Some(PathBuf::from(dir));
    }
    if let Ok(out) = Command::new("pg_config").arg("--bindir").output() {
        let dir = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
        if dir.join("initdb").exists() {
            return Some(dir);
        }
    }
    let fallback = PathBuf::from(PGSERVER_BIN);
    fallback.join("initdb").exists().then_some(fallback)
}

fn is_root() -> bool {
    Command::new("id").arg("-u").output().map(|o| String::from_utf8_lossy(&o.stdout).trim() == "0").unwrap_or(false)
}

impl Postgres {
    /// `None` when no server binaries are installed.
    pub fn start() -> Option<Result<Postgres, String>> {
        let bin = pg_bin_dir()?;
        Some(Self::start_in(bin))
    }

    fn start_in(bin: PathBuf) -> Result<Postgres, String> {
        let dir = tempfile::Builder::new().prefix("anemia-pg").tempdir_in("/tmp").map_err(|e| e.to_string())?;
        let as_nobody = is_root();
        if as_nobody {
            let ok = Command::new("chown").args(["-R", "nobody"]).arg(dir.path()).status().is_ok_and(|s| s.success());
            if !ok {
                return Err("chown of the cluster directory failed".into());
            }
        }
        let pg = Postgres { data: dir.path().join("data"), _dir: dir, bin, port: free_port(), as_nobody };
        let init = pg.run("initdb", &["-D", &pg.data_str(), "-U", "postgres", "--auth=trust", "-E", "UTF8"])?;
        if !init.status.success() {
            return Err(format!("initdb failed: {}", String::from_utf8_lossy(&init.stderr)));
        }
        pg.up()?;
        Ok(pg)
    }

    fn data_str(&self) -> String {
        self.data.display().to_string()
    }

    fn run(&self, tool: &str, args: &[&str]) -> Result<Output, String> {
        let exe = self.bin.join(tool);
        let mut cmd = if self.as_nobody {
            let mut c = Command::new("setpriv");
            c.args(["--reuid=nobody", "--regid=nogroup", "--clear-groups"]).arg(exe);
            c
        } else {
            Command::new(exe)
        };
        cmd.args(args).stdin(Stdio::null()).output().map_err(|e| format!("{tool}: {e}"))
    }

    fn up(&self) -> Result<(), String> {
        let sock = self.data.parent().unwrap().display().to_string();
        let opts = format!("-p {} -k {sock} -c listen_addresses=127.0.0.1", self.port);
        let log = self.data.parent().unwrap().join("server.log").display().to_string();
        let out = self.run("pg_ctl", &["-D", &self.data_str(), "-l", &log, "-o", &opts, "-w", "start"])?;
        if !out.status.success() {
            return Err(format!("pg_ctl start failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(())
    }

    pub fn stop(&self) -> Result<(), String> {
        let out = self.run("pg_ctl", &["-D", &self.data_str(), "-m", "fast", "-w", "stop"])?;
        if !out.status.success() {
            return Err(format!("pg_ctl stop failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(())
    }

    pub fn restart(&self) -> Result<(), String> {
        self.stop()?;
        self.up()
    }

    pub fn url(&self) -> String {
        format!("postgres://postgres:pw@127.0.0.1:{}/postgres", self.port)
    }

    pub fn client(&self) -> postgres::Client {
        postgres::Client::connect(&self.url(), postgres::NoTls).expect("connect to test cluster")
    }
}

impl Drop for Postgres {
    fn drop(&mut self) {
        let _ = self.run("pg_ctl", &["-D", &self.data_str(), "-m", "immediate", "-w", "stop"]);
    }
}
