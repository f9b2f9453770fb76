use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{Context, Result};

/// Bad flags, config keys or values; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Effective options of one run: command-line flags over an optional
/// key=value file over defaults. Every resolved value is recorded for the
/// manifest.
pub struct Settings {
    file: BTreeMap<String, String>,
    pub resolved: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim().replace('_', "-");
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(usage(format!("config line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(map)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.remove(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}: {e}"))),
            None => Ok(None),
        }
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let file = self.from_file(key)?;
        let v = flag.or(file);
        if let Some(v) = &v {
            self.resolved.insert(key.into(), v.to_string());
        }
        Ok(v)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.into(), v.to_string());
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| usage(format!("missing required option --{key}")))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let s = self.required(key, flag.map(|p| p.display().to_string()))?;
        Ok(PathBuf::from(s))
    }

    pub fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        Ok(self.opt(key, flag.map(|p| p.display().to_string()))?.map(PathBuf::from))
    }

    /// A switch set by its flag or by `key=true` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let file: Option<bool> = self.from_file(key)?;
        let v = flag || file.unwrap_or(false);
        self.resolved.insert(key.into(), v.to_string());
        Ok(v)
    }

    /// Fails on config keys the command did not consume.
    pub fn finish(&self) -> Result<()> {
        match self.file.keys().next() {
            Some(k) => Err(usage(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

/// Paths written by the current run, removed again if the run fails.
#[derive(Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
    pub listed: Vec<(String, PathBuf)>,
}

impl Outputs {
    /// Registers an output file about to be written.
    pub fn file(&mut self, label: &str, path: &Path) -> PathBuf {
        self.created.push(path.to_path_buf());
        self.listed.push((label.into(), path.to_path_buf()));
        path.to_path_buf()
    }

    /// Creates an output directory; it is removed wholesale on failure only
    /// if this run created it.
    pub fn dir(&mut self, label: &str, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
            self.created_dirs.push(path.to_path_buf());
        }
        self.listed.push((label.into(), path.to_path_buf()));
        Ok(path.to_path_buf())
    }

    /// Registers a file inside a directory that may predate the run.
    pub fn inner(&mut self, path: &Path) -> PathBuf {
        self.created.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn remove_all(&self) {
        for p in self.created.iter().rev().filter(|p| p.is_file()) {
            let _ = fs::remove_file(p);
        }
        for p in self.created_dirs.iter().rev() {
            let _ = fs::remove_dir_all(p);
        }
    }
}

/// Key=value record of one run, written next to its outputs.
pub struct Manifest {
    pub command: &'static str,
    pub inputs: Vec<(String, PathBuf)>,
    pub started: Instant,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) {
        self.inputs.push((label.into(), path.to_path_buf()));
    }

    pub fn render(&self, settings: &Settings, outputs: &Outputs, threads: usize) -> String {
        let mut s = String::new();
        s.push_str(&format!("command={}\n", self.command));
        s.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        if let Some(seed) = settings.resolved.get("seed") {
            s.push_str(&format!("seed={seed}\n"));
        }
        s.push_str(&format!("threads={threads}\n"));
        for (k, p) in &self.inputs {
            s.push_str(&format!("input.{k}={}\n", p.display()));
        }
        for (k, p) in &outputs.listed {
            s.push_str(&format!("output.{k}={}\n", p.display()));
        }
        for (k, v) in &settings.resolved {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        s.push_str(&format!("wall_time_s={:.3}\n", self.started.elapsed().as_secs_f64()));
        s
    }
}
