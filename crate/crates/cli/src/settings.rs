//! Run settings: a flat `key = value` config file overlaid by flags.
//!
//! Config files hold one `key = value` pair per line. Blank lines and lines
//! starting with `#` are ignored, and `-` in keys is read as `_`. Every key
//! must be known; a typo is a config error rather than a silent default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use corlab::{Error, Result};

pub const KEYS: &[&str] = &[
    // paths and flags
    "seed", "model", "out", "corpus", "calibration", "rki", "cei", "plan", "threads",
    "lambda", "delta", "epsilon", "p_low", "p_high", "k_min", "k_max", "fuse",
    // corpus
    "n_head_facts", "n_tail_facts", "head_rep", "tail_rep", "n_relations", "n_filler",
    "calib_subjects", "calib_filler",
    // model
    "n_layers", "n_experts", "k_baseline", "d_model", "d_ff", "n_heads", "max_seq_len",
    // training
    "steps", "batch_size", "seq_len", "learning_rate", "aux_weight", "optimizer", "k_jitter",
    // sweeps
    "budgets", "lambdas",
    // cascade
    "depth", "gain", "kappa", "floor", "peak", "probes", "dim",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    pub config_path: Option<PathBuf>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = normalize(key);
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key `{key}`", i + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
            s.values = parse_config(&text)?;
            s.config_path = Some(path.to_path_buf());
        }
        Ok(s)
    }

    /// Flag values win over the config file.
    pub fn set(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.values.insert(normalize(key), v);
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("invalid list item `{x}` for `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Input(format!("missing required input `--{}`", key.replace('_', "-"))))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out").unwrap_or("."))
    }

    pub fn inputs(&self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter()
            .filter_map(|k| self.raw(k).map(|v| (k.to_string(), v.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_pairs() {
        let m = parse_config("# run\nseed = 3\n\nk-max=4\nlambda = 0.2 \n").unwrap();
        assert_eq!(m["seed"], "3");
        assert_eq!(m["k_max"], "4");
        assert_eq!(m["lambda"], "0.2");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(parse_config("lamda = 0.1"), Err(Error::Config(_))));
        assert!(matches!(parse_config("seed 3"), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config() {
        let mut s = Settings::default();
        s.values = parse_config("seed = 3").unwrap();
        s.set("seed", Some("5".into()));
        s.set("lambda", None);
        assert_eq!(s.get::<u64>("seed").unwrap(), Some(5));
        assert_eq!(s.get::<f64>("lambda").unwrap(), None);
        s.set("lambda", Some("x".into()));
        assert!(matches!(s.get::<f64>("lambda"), Err(Error::Config(_))));
    }

    #[test]
    fn lists_split_on_commas() {
        let mut s = Settings::default();
        s.set("budgets", Some("4, 8,12".into()));
        assert_eq!(s.list::<usize>("budgets").unwrap(), Some(vec![4, 8, 12]));
    }
}
