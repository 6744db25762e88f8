//! Layered run settings: built-in defaults, then an optional `key = value`
//! file, then command-line flags.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{parser::ValueSource, Arg, ArgMatches, Command};
use stochprune::config::KeyValues;

/// A recognised setting. An empty default means "unset".
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Adds one `--flag VALUE` per key.
pub fn add_flags(mut cmd: Command, keys: &[Key]) -> Command {
    for k in keys {
        let help = if k.default.is_empty() {
            k.help.to_string()
        } else {
            format!("{} [default: {}]", k.help, k.default)
        };
        cmd = cmd.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(help));
    }
    cmd
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: KeyValues,
}

impl Settings {
    pub fn resolve(keys: &[Key], config: Option<&Path>, matches: &ArgMatches) -> Result<Self> {
        let names: Vec<&str> = keys.iter().map(|k| k.name).collect();
        let mut values = KeyValues::default();
        for k in keys {
            if !k.default.is_empty() {
                values.insert(k.name, k.default);
            }
        }
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file = KeyValues::parse(&text, &names)?;
            for (k, v) in file.iter() {
                values.insert(k, v);
            }
        }
        for k in keys {
            if matches.value_source(k.name) == Some(ValueSource::CommandLine) {
                let v: &String = matches.get_one(k.name).expect("flag value");
                values.insert(k.name, v);
            }
        }
        Ok(Self { values })
    }

    pub fn from_text(keys: &[Key], text: &str) -> Result<Self> {
        let names: Vec<&str> = keys.iter().map(|k| k.name).collect();
        let mut values = KeyValues::default();
        for k in keys {
            if !k.default.is_empty() {
                values.insert(k.name, k.default);
            }
        }
        for (k, v) in KeyValues::parse(text, &names)?.iter() {
            values.insert(k, v);
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key, value);
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get_str(key) {
            None | Some("") => Ok(None),
            Some(_) => Ok(self.values.get(key)?),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or_else(|| anyhow!("missing setting `{key}`"))
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get_str(key).unwrap_or("")
    }

    /// A comma-separated list, or `log10:LO:HI:N` / `ln:LO:HI:N` for a
    /// geometric grid.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("`{key}`: bad item {s:?}: {e}")))
            .collect()
    }

    pub fn grid(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.str(key).trim();
        let parts: Vec<&str> = raw.split(':').collect();
        match parts.as_slice() {
            [base @ ("log10" | "ln"), lo, hi, n] => {
                let (lo, hi): (f64, f64) = (lo.parse()?, hi.parse()?);
                let n: usize = n.parse()?;
                if n == 0 {
                    bail!("`{key}`: grid needs at least one point");
                }
                let b: f64 = if *base == "ln" { std::f64::consts::E } else { 10.0 };
                Ok((0..n)
                    .map(|i| {
                        let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                        b.powf(lo + (hi - lo) * t)
                    })
                    .collect())
            }
            [_] => self.list(key),
            _ => bail!("`{key}`: expected a list or log10:LO:HI:N / ln:LO:HI:N, got {raw:?}"),
        }
    }

    /// The effective configuration, replayable with `--config`.
    pub fn to_text(&self) -> String {
        self.values.to_text()
    }
}
