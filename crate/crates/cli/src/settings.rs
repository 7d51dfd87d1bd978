use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

/// A problem with the invocation itself; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Option values resolved as flag, then config file, then default. Every
/// resolved value is remembered for the run manifest.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim().trim_start_matches("--");
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(UsageError(format!("config line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { file, resolved: BTreeMap::new() })
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse().map_err(|e| UsageError(format!("config key {key}: {e}")))?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.optional(key, flag)?.ok_or_else(|| UsageError(format!("missing required option --{key}")))
    }

    /// Reject config keys that no option consumed.
    pub fn finish(&self) -> Result<(), UsageError> {
        match self.file.keys().find(|k| !self.resolved.contains_key(*k)) {
            Some(k) => Err(UsageError(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// Comma-separated list value.
pub fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: Display,
{
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|e| UsageError(format!("--{key}: {s:?}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let mut s = Settings { file: parse_config("layers = 4\n# note\n--dmodel=32\n").unwrap(), ..Settings::default() };
        assert_eq!(s.value("layers", Some(2usize), 12).unwrap(), 2);
        assert_eq!(s.value("dmodel", None, 768usize).unwrap(), 32);
        assert_eq!(s.value("heads", None, 12usize).unwrap(), 12);
        assert_eq!(s.resolved()["heads"], "12");
        s.finish().unwrap();
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        assert!(parse_config("novalue\n").is_err());
        assert!(parse_config("a=1\na=2\n").is_err());
        let mut s = Settings { file: parse_config("layers=two\nextra=1").unwrap(), ..Settings::default() };
        assert!(s.value("layers", None, 1usize).is_err());
        assert!(s.finish().unwrap_err().0.contains("extra"));
        assert_eq!(parse_list::<f64>("lrs", "1e-5, 3e-5").unwrap(), vec![1e-5, 3e-5]);
        assert!(parse_list::<usize>("batch-sizes", "16,x").is_err());
    }
}
