//! Flat `key = value` experiment configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::testspace::ChMode;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: String,
    /// Subdivisions per side of each structured mesh, strictly increasing.
    pub meshes: Vec<usize>,
    pub widths: Vec<usize>,
    pub train: TrainConfig,
    pub assembly_precision: usize,
    pub verification_precision: usize,
    pub ch_mode: ChMode,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Coarsest meshes excluded from slope fits.
    pub tail_drop: usize,
    /// Mesh used by the training-trace experiment.
    pub trace_mesh: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "poisson_tanh".into(),
            meshes: vec![4, 8, 16, 32],
            widths: vec![2, 50, 50, 50, 1],
            train: TrainConfig::default(),
            assembly_precision: 3,
            verification_precision: 7,
            ch_mode: ChMode::Measured,
            seed: 42,
            out_dir: PathBuf::from("out"),
            tail_drop: 1,
            trace_mesh: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults, unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "problem" => self.problem = value.to_string(),
            "meshes" => self.meshes = parse_list(key, value)?,
            "widths" => self.widths = parse_list(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "decay_factor" => t.decay_factor = parse(key, value)?,
            "decay_every" => t.decay_every = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "stop_tolerance" => t.stop_tolerance = parse(key, value)?,
            "execution" => {
                t.execution = match value {
                    "sequential" => Execution::Sequential,
                    "parallel" => Execution::Parallel,
                    _ => return Err(Error::Parse(format!("unknown execution '{value}'"))),
                }
            }
            "assembly_precision" => self.assembly_precision = parse(key, value)?,
            "verification_precision" => self.verification_precision = parse(key, value)?,
            "ch_mode" => self.ch_mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "tail_drop" => self.tail_drop = parse(key, value)?,
            "trace_mesh" => self.trace_mesh = parse(key, value)?,
            _ => return Err(Error::Parse(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parse(m));
        if self.meshes.is_empty() || self.meshes.contains(&0) {
            return bad("meshes must be a nonempty list of positive integers".into());
        }
        if self.meshes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("meshes must be strictly increasing, got {:?}", self.meshes));
        }
        if self.widths.len() < 2 || self.widths[0] != 2 || *self.widths.last().unwrap() != 1 || self.widths.contains(&0) {
            return bad(format!("widths must run from 2 to 1, got {:?}", self.widths));
        }
        if self.assembly_precision != 3 {
            return bad(format!("assembly precision must be 3, got {}", self.assembly_precision));
        }
        if self.verification_precision != 7 {
            return bad(format!("verification precision must be 7, got {}", self.verification_precision));
        }
        if self.trace_mesh == 0 {
            return bad("trace_mesh must be positive".into());
        }
        crate::problems::by_name(&self.problem).map_err(|e| Error::Parse(e.to_string()))?;
        self.training().validate().map_err(|e| Error::Parse(e.to_string()))
    }

    /// Training configuration with the experiment-level overrides applied.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            precision: self.assembly_precision,
            ch_mode: self.ch_mode,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# study\nproblem = polynomial_diffusion\nmeshes = 2, 4 8\nepochs = 30 # short\nch_mode = asymptotic\nseed=7\n",
        )
        .unwrap();
        assert_eq!(cfg.problem, "polynomial_diffusion");
        assert_eq!(cfg.meshes, vec![2, 4, 8]);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.ch_mode, ChMode::Asymptotic);
        assert_eq!(cfg.training().seed, 7);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "meshes = 8, 4",
            "colour = red",
            "epochs = many",
            "assembly_precision = 5",
            "problem = heat",
            "widths = 3, 1",
            "no equals sign",
            "learning_rate = -1",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Parse(_))), "{text}");
        }
    }
}
