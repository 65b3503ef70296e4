//! Plain-text `key = value` run configuration.
//!
//! Precedence is defaults, then the config file, then command-line overrides.
//! The fully resolved settings are written next to every command's outputs
//! and can be fed back through `--config` to repeat a run.

use std::path::{Path, PathBuf};

use tmcdiff::{Error, Result};

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u32, u64, usize, f64, String);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() || s == "none" { Ok(None) } else { T::parse_value(s).map(Some) }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), T::render)
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::parse_value).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

pub trait Settings: Default {
    const COMMAND: &'static str;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn out_dir(&self) -> &Path;
}

/// Declares a settings struct whose fields double as config keys.
macro_rules! settings {
    ($(#[$m:meta])* $name:ident, $cmd:literal { $($(#[$fm:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $($(#[$fm])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl $crate::config::Settings for $name {
            const COMMAND: &'static str = $cmd;

            fn set(&mut self, key: &str, value: &str) -> tmcdiff::Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as $crate::config::ConfigValue>::parse_value(value)
                            .map_err(|e| tmcdiff::Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => {
                        let known = [$(stringify!($field)),*].join(", ");
                        return Err(tmcdiff::Error::Config(format!("unknown key `{key}` for {} (known: {known})", $cmd)));
                    }
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), $crate::config::ConfigValue::render(&self.$field)),)*]
            }

            fn out_dir(&self) -> &std::path::Path {
                &self.out
            }
        }
    };
}
pub(crate) use settings;

pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", origin.display(), n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn resolve<S: Settings>(file: Option<&Path>, overrides: &[(String, String)]) -> Result<S> {
    let mut s = S::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        for (k, v) in parse_kv(&text, path)? {
            s.set(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        s.set(k, v)?;
    }
    Ok(s)
}

pub const ARCHIVE_NAME: &str = "resolved_config.txt";

pub fn archive<S: Settings>(settings: &S) -> Result<PathBuf> {
    let dir = settings.out_dir();
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut text = format!("# tmcdiff {}\n", S::COMMAND);
    for (k, v) in settings.entries() {
        text += &format!("{k} = {v}\n");
    }
    let path = dir.join(ARCHIVE_NAME);
    std::fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(path)
}
