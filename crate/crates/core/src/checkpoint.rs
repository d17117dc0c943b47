//! Trained model artifact: configuration, statistics and parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Normalization};
use crate::denoiser::{Denoiser, DenoiserConfig, ParameterSet};
use crate::environment::RewardKind;
use crate::error::{Error, Result};
use crate::format;
use crate::schedule::{NoiseSchedule, ScheduleConfig};

pub const MAGIC: &[u8; 8] = b"DDPCKPT1";
pub const VERSION: u32 = 1;

/// Offset `e` of the return compression `g(r) = -ln(e - r)`.
pub const DEFAULT_RETURN_OFFSET: f64 = 1e-4;

/// Maps raw returns into `[0, 1]` for conditioning: min-max scaling of the
/// log-compressed return `g(r) = -ln(offset - r)`. Dataset returns are
/// heavy-tailed towards large negative values, and plain min-max scaling
/// would squeeze targets such as -0.1, -0.01 and -0.001 into the same
/// last percent of the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReturnScaling {
    pub min: f64,
    pub max: f64,
    pub offset: f64,
}

impl ReturnScaling {
    pub fn new(min: f64, max: f64) -> Self {
        Self {
            min,
            max,
            offset: DEFAULT_RETURN_OFFSET,
        }
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let (min, max) = data.return_range();
        Self::new(min, max)
    }

    /// Returns are non-positive; larger values compress like zero.
    fn compress(&self, r: f64) -> f64 {
        -(self.offset + (-r).max(0.0)).ln()
    }

    fn span(&self) -> (f64, f64) {
        let lo = self.compress(self.min);
        let span = self.compress(self.max) - lo;
        (lo, if span > 0.0 { span } else { 1.0 })
    }

    pub fn scale(&self, r: f64) -> f64 {
        let (lo, span) = self.span();
        (self.compress(r) - lo) / span
    }

    pub fn unscale(&self, s: f64) -> f64 {
        let (lo, span) = self.span();
        self.offset - (-(s * span + lo)).exp()
    }
}

/// Adam moment estimates saved alongside the parameters for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub normalization: Normalization,
    pub return_scaling: ReturnScaling,
    pub reward_kind: RewardKind,
    pub param_count: usize,
    /// Optimizer steps completed when this checkpoint was written.
    pub step: usize,
    pub has_ema: bool,
    pub has_optimizer: bool,
}

/// Everything needed to sample from a trained denoiser. Stored values are
/// f32-representable, so saving and loading is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    header: CheckpointHeader,
    params: ParameterSet,
    ema: Option<ParameterSet>,
    optimizer: Option<OptimizerState>,
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        denoiser: DenoiserConfig,
        schedule: ScheduleConfig,
        normalization: Normalization,
        return_scaling: ReturnScaling,
        reward_kind: RewardKind,
        params: &ParameterSet,
        step: usize,
    ) -> Result<Self> {
        let expected = Denoiser::new(denoiser.clone())?.num_params();
        if params.len() != expected {
            return Err(Error::shape(format!("{expected} parameters"), params.len()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self {
            header: CheckpointHeader {
                version: VERSION,
                denoiser,
                schedule,
                normalization,
                return_scaling,
                reward_kind,
                param_count: expected,
                step,
                has_ema: false,
                has_optimizer: false,
            },
            params: ParameterSet::from_vec(quantize(params.as_slice())),
            ema: None,
            optimizer: None,
        })
    }

    pub fn with_ema(mut self, ema: &ParameterSet) -> Self {
        self.header.has_ema = true;
        self.ema = Some(ParameterSet::from_vec(quantize(ema.as_slice())));
        self
    }

    pub fn with_optimizer(mut self, state: &OptimizerState) -> Self {
        self.header.has_optimizer = true;
        self.optimizer = Some(OptimizerState {
            m: quantize(&state.m),
            v: quantize(&state.v),
        });
        self
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn ema(&self) -> Option<&ParameterSet> {
        self.ema.as_ref()
    }

    /// EMA weights when present, otherwise the raw parameters.
    pub fn sampling_params(&self) -> &ParameterSet {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn optimizer(&self) -> Option<&OptimizerState> {
        self.optimizer.as_ref()
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(self.header.denoiser.clone())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.header.schedule.build()
    }

    /// Rejects checkpoints trained for a different network.
    pub fn ensure_matches(&self, expected: &DenoiserConfig) -> Result<()> {
        if &self.header.denoiser != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {:?}, requested {:?}",
                self.header.denoiser, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header).map_err(|e| Error::Header(e.to_string()))?;
        let mut payload: Vec<f32> = self.params.as_slice().iter().map(|v| *v as f32).collect();
        if let Some(e) = &self.ema {
            payload.extend(e.as_slice().iter().map(|v| *v as f32));
        }
        if let Some(o) = &self.optimizer {
            payload.extend(o.m.iter().chain(&o.v).map(|v| *v as f32));
        }
        Ok(format::encode(MAGIC, &header, payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = format::decode(bytes, MAGIC)?;
        let header: CheckpointHeader = serde_json::from_str(header).map_err(|e| Error::Header(e.to_string()))?;
        if header.version != VERSION {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        let n = header.param_count;
        let expected = Denoiser::new(header.denoiser.clone())?.num_params();
        if n != expected {
            return Err(Error::ConfigMismatch(format!(
                "header lists {n} parameters but its configuration has {expected}"
            )));
        }
        let blocks = 1 + usize::from(header.has_ema) + 2 * usize::from(header.has_optimizer);
        let values: Vec<f64> = format::read_f32s(payload, n * blocks)?
            .into_iter()
            .map(f64::from)
            .collect();
        let mut chunks = values.chunks(n.max(1)).map(<[f64]>::to_vec);
        let mut next = || chunks.next().unwrap_or_default();
        let params = ParameterSet::from_vec(next());
        let ema = header.has_ema.then(|| ParameterSet::from_vec(next()));
        let optimizer = header.has_optimizer.then(|| OptimizerState { m: next(), v: next() });
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self {
            header,
            params,
            ema,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&format::read_file(path.as_ref())?)
    }

    /// Loads and checks the network configuration in one go.
    pub fn load_for(path: impl AsRef<Path>, expected: &DenoiserConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.ensure_matches(expected)?;
        Ok(ck)
    }
}
