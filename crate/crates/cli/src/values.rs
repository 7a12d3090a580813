//! Flag value types that print the same way they parse, so defaults shown
//! in `--help` and values recorded in manifests can be fed back verbatim.

use std::fmt;
use std::str::FromStr;

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn split<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("`{}`: {e}", p.trim()))).collect()
}

/// Three comma-separated values; a single value is repeated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple<T>(pub [T; 3]);

impl<T: fmt::Display> fmt::Display for Triple<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join(&self.0))
    }
}

impl<T: FromStr + Copy> FromStr for Triple<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match split::<T>(s)?.as_slice() {
            &[a] => Ok(Triple([a; 3])),
            &[a, b, c] => Ok(Triple([a, b, c])),
            other => Err(format!("expected 1 or 3 comma-separated values, got {}", other.len())),
        }
    }
}

/// `low,high`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair<T>(pub T, pub T);

impl<T: fmt::Display> fmt::Display for Pair<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.0, self.1)
    }
}

impl<T: FromStr + Copy> FromStr for Pair<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match split::<T>(s)?.as_slice() {
            &[a, b] => Ok(Pair(a, b)),
            other => Err(format!("expected 2 comma-separated values, got {}", other.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct List(pub Vec<f64>);

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join(&self.0))
    }
}

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v = split::<f64>(s)?;
        if v.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(v))
    }
}

/// `on` / `off` (also `true`/`false`, `yes`/`no`, `1`/`0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switch(pub bool);

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0 { "on" } else { "off" })
    }
}

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "on" | "true" | "yes" | "1" => Ok(Switch(true)),
            "off" | "false" | "no" | "0" => Ok(Switch(false)),
            other => Err(format!("expected on or off, got `{other}`")),
        }
    }
}
