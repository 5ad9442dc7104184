//! Run configuration in the same line-oriented `key value...` text style as
//! the sequence manifest.
//!
//! ```text
//! codemap-config 1
//! decoder analytic            # or: decoder weights <path>
//! code_size 32
//! window_size 4
//! proximity_a 2.0
//! factors photometric reprojection geometric prior
//! weight.photometric 1.0      # also reprojection, geometric, prior
//! huber.photometric 0.1       # also reprojection, geometric; `off` disables
//! solver.max_iterations 20
//! solver.initial_damping 1e-4
//! solver.relative_tolerance 1e-6
//! solver.step_tolerance 1e-8
//! sample_stride 4
//! pyramid 16 8 4              # or: pyramid off
//! fusion.voxel_size 0.02
//! fusion.truncation 0.08
//! fusion.max_weight 100
//! emg 4.31 0.44 0.20
//! emg.mean location           # or: distribution
//! seed 0
//! ```
//!
//! Every key is optional; missing keys keep their defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::depth_codec::{AnalyticParams, Decoder, DEFAULT_CODE_SIZE};
use crate::fusion::TsdfParams;
use crate::geometry::ProximityParams;
use crate::noise_sim::{EmgParams, MeanConvention};
use crate::optimizer::{FactorFlags, OptimizerConfig};
use crate::pipeline::WINDOW_SIZE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("decoder weights: {0}")]
    Weights(#[from] crate::io::FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderChoice {
    Analytic,
    Weights(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub decoder: DecoderChoice,
    pub code_size: usize,
    pub window_size: usize,
    pub proximity: ProximityParams,
    pub optimizer: OptimizerConfig,
    pub fusion: TsdfParams,
    pub emg: EmgParams,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderChoice::Analytic,
            code_size: DEFAULT_CODE_SIZE,
            window_size: WINDOW_SIZE,
            proximity: ProximityParams::default(),
            optimizer: OptimizerConfig::default(),
            fusion: TsdfParams::default(),
            emg: EmgParams::default(),
            seed: 0,
        }
    }
}

fn num<T: FromStr>(tok: &str, line: usize) -> Result<T, ConfigError> {
    tok.parse().map_err(|_| ConfigError::Parse { line, msg: format!("bad number `{tok}`") })
}

fn optional_delta(tok: &str, line: usize) -> Result<Option<f64>, ConfigError> {
    if tok == "off" {
        Ok(None)
    } else {
        num(tok, line).map(Some)
    }
}

impl RunConfig {
    /// Parses config text; relative weight paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        let mut header_seen = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let toks: Vec<&str> = l.split_whitespace().collect();
            let err = |msg: String| ConfigError::Parse { line, msg };
            if !header_seen && toks[0] == "codemap-config" {
                if toks.get(1) != Some(&"1") {
                    return Err(err(format!("unsupported config version `{}`", toks.get(1).unwrap_or(&""))));
                }
                header_seen = true;
                continue;
            }
            let one = || -> Result<&str, ConfigError> {
                match toks.as_slice() {
                    [_, v] => Ok(v),
                    _ => Err(err(format!("`{}` takes exactly one value", toks[0]))),
                }
            };
            match toks[0] {
                "decoder" => {
                    c.decoder = match toks.as_slice() {
                        [_, "analytic"] => DecoderChoice::Analytic,
                        [_, "weights", p] => DecoderChoice::Weights(base.join(p)),
                        _ => return Err(err("decoder: `analytic` or `weights <path>`".into())),
                    }
                }
                "code_size" => c.code_size = num(one()?, line)?,
                "window_size" => c.window_size = num(one()?, line)?,
                "proximity_a" => {
                    c.proximity = ProximityParams::new(num(one()?, line)?).map_err(|e| err(e.to_string()))?
                }
                "factors" => {
                    let mut f = FactorFlags { photometric: false, reprojection: false, geometric: false, prior: false };
                    for t in &toks[1..] {
                        match *t {
                            "photometric" => f.photometric = true,
                            "reprojection" => f.reprojection = true,
                            "geometric" => f.geometric = true,
                            "prior" => f.prior = true,
                            "none" => {}
                            other => return Err(err(format!("unknown factor `{other}`"))),
                        }
                    }
                    c.optimizer.flags = f;
                }
                "weight.photometric" => c.optimizer.weights.photometric = num(one()?, line)?,
                "weight.reprojection" => c.optimizer.weights.reprojection = num(one()?, line)?,
                "weight.geometric" => c.optimizer.weights.geometric = num(one()?, line)?,
                "weight.prior" => c.optimizer.weights.prior = num(one()?, line)?,
                "huber.photometric" => c.optimizer.huber.photometric = optional_delta(one()?, line)?,
                "huber.reprojection" => c.optimizer.huber.reprojection = optional_delta(one()?, line)?,
                "huber.geometric" => c.optimizer.huber.geometric = optional_delta(one()?, line)?,
                "solver.max_iterations" => c.optimizer.solver.max_iterations = num(one()?, line)?,
                "solver.initial_damping" => c.optimizer.solver.initial_damping = num(one()?, line)?,
                "solver.relative_tolerance" => c.optimizer.solver.relative_tolerance = num(one()?, line)?,
                "solver.step_tolerance" => c.optimizer.solver.step_tolerance = num(one()?, line)?,
                "sample_stride" => c.optimizer.sample_stride = num(one()?, line)?,
                "pyramid" => {
                    c.optimizer.pyramid = match toks.as_slice() {
                        [_, "off"] => Vec::new(),
                        [_, rest @ ..] if !rest.is_empty() => {
                            rest.iter().map(|t| num(t, line)).collect::<Result<_, _>>()?
                        }
                        _ => return Err(err("pyramid: list of strides or `off`".into())),
                    }
                }
                "fusion.voxel_size" => c.fusion.voxel_size = num(one()?, line)?,
                "fusion.truncation" => c.fusion.truncation = num(one()?, line)?,
                "fusion.max_weight" => c.fusion.max_weight = num(one()?, line)?,
                "emg" => match toks.as_slice() {
                    [_, k, loc, scale] => {
                        c.emg.k = num(k, line)?;
                        c.emg.loc = num(loc, line)?;
                        c.emg.scale = num(scale, line)?;
                    }
                    _ => return Err(err("emg: K LOC SCALE".into())),
                },
                "emg.mean" => {
                    c.emg.convention = match one()? {
                        "location" => MeanConvention::Location,
                        "distribution" => MeanConvention::DistributionMean,
                        other => return Err(err(format!("emg.mean: `location` or `distribution`, got `{other}`"))),
                    }
                }
                "seed" => c.seed = num(one()?, line)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.code_size == 0 {
            return bad("code_size must be positive".into());
        }
        if self.window_size < 2 {
            return bad(format!("window_size must be at least 2, got {}", self.window_size));
        }
        let w = &self.optimizer.weights;
        if [w.photometric, w.reprojection, w.geometric].iter().any(|v| !(*v >= 0.0)) || !(w.prior > 0.0) {
            return bad("factor weights must be non-negative and the prior weight positive".into());
        }
        let h = &self.optimizer.huber;
        if [h.photometric, h.reprojection, h.geometric].iter().flatten().any(|d| !(*d > 0.0)) {
            return bad("Huber deltas must be positive".into());
        }
        let s = &self.optimizer.solver;
        if !(s.initial_damping > 0.0 && s.relative_tolerance >= 0.0 && s.step_tolerance >= 0.0) {
            return bad("solver damping must be positive and tolerances non-negative".into());
        }
        if self.optimizer.sample_stride == 0 || self.optimizer.pyramid.contains(&0) {
            return bad("sample strides must be positive".into());
        }
        if !(self.fusion.voxel_size > 0.0 && self.fusion.truncation > 0.0 && self.fusion.max_weight > 0.0) {
            return bad("fusion parameters must be positive".into());
        }
        self.emg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let DecoderChoice::Weights(p) = &self.decoder {
            if !p.is_file() {
                return bad(format!("decoder weights file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Builds the configured decoder; learned weights must agree with the
    /// configured code size.
    pub fn decoder(&self) -> Result<Decoder, ConfigError> {
        match &self.decoder {
            DecoderChoice::Analytic => Ok(Decoder::Analytic {
                code_size: self.code_size,
                params: AnalyticParams { proximity: self.proximity, ..AnalyticParams::default() },
            }),
            DecoderChoice::Weights(p) => {
                let net = crate::io::read_weights(p)?;
                if net.header().code_size != self.code_size {
                    return Err(ConfigError::Invalid(format!(
                        "weights have code size {}, config says {}",
                        net.header().code_size,
                        self.code_size
                    )));
                }
                Ok(Decoder::Learned(std::sync::Arc::new(net)))
            }
        }
    }
}
