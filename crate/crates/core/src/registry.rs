//! Name-keyed lookup of interchangeable strategies.

use crate::condition::{ConditionSpec, PiRawConfig};
use crate::error::{Error, Result};
use crate::sampler::{TmcInit, TmcInitCondition, TmcInitZeros};
use crate::trainer::{TmcStrategy, TeacherForced, TmcDisabled, UnrolledDepth1};

pub struct Registry<F> {
    kind: &'static str,
    entries: Vec<(&'static str, F)>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    pub fn register(mut self, name: &'static str, f: F) -> Self {
        assert!(self.entries.iter().all(|(n, _)| *n != name), "duplicate {} `{name}`", self.kind);
        self.entries.push((name, f));
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }
}

/// `(image channels, zoom)` to a condition-path description.
pub type ConditionFactory = fn(usize, usize) -> ConditionSpec;

pub fn condition_paths() -> Registry<ConditionFactory> {
    Registry::<ConditionFactory>::new("condition path")
        .register("srgb", |channels, _| ConditionSpec::Srgb { channels })
        .register("raw", |channels, zoom| ConditionSpec::Raw(PiRawConfig::toy(channels, zoom)))
}

pub type StrategyFactory = fn() -> Box<dyn TmcStrategy>;
pub type InitFactory = fn() -> Box<dyn TmcInit>;

pub fn tmc_strategies() -> Registry<StrategyFactory> {
    Registry::<StrategyFactory>::new("tmc mode")
        .register("teacher_forced", || Box::new(TeacherForced))
        .register("unrolled_depth1", || Box::new(UnrolledDepth1))
        .register("disabled", || Box::new(TmcDisabled))
}

pub fn tmc_inits() -> Registry<InitFactory> {
    Registry::<InitFactory>::new("tmc init")
        .register("condition", || Box::new(TmcInitCondition))
        .register("zeros", || Box::new(TmcInitZeros))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups_round_trip_names() {
        for name in tmc_strategies().names() {
            assert_eq!(tmc_strategies().get(name).unwrap()().name(), name);
        }
        for name in tmc_inits().names() {
            assert_eq!(tmc_inits().get(name).unwrap()().name(), name);
        }
        for name in condition_paths().names() {
            assert_eq!(condition_paths().get(name).unwrap()(1, 1).name(), name);
        }
    }

    #[test]
    fn unknown_name_lists_alternatives() {
        let err = tmc_strategies().get("recursive").err().unwrap();
        assert_eq!(err.code(), "E_UNKNOWN");
        assert!(err.to_string().contains("teacher_forced, unrolled_depth1, disabled"));
    }
}
