//! Noise-prediction network with step and return-condition embeddings.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::embed::{EmbedCache, Embedder};
use crate::nn::mlp::{MlpTape, ResidualMlp};
use crate::nn::unet::{TemporalUnet, UnetTape};
use crate::nn::{Act, ParamBuilder};
use crate::schedule::NoiseSchedule;

pub use crate::nn::embed::Injection;

pub const DEFAULT_DROP_PROBABILITY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    TemporalConvUnet,
    ResidualMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub dims: usize,
    /// Waypoints per path. The U-Net accepts any horizon divisible by its
    /// downsampling factor; the MLP only this one.
    pub horizon: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub step_embedding: usize,
    pub condition_embedding: usize,
    pub architecture: Architecture,
    pub injection: Injection,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dims: 3,
            horizon: 32,
            widths: vec![32, 64],
            kernel: 5,
            step_embedding: 32,
            condition_embedding: 32,
            architecture: Architecture::TemporalConvUnet,
            injection: Injection::Sum,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims != 3 && self.dims != 6 {
            return Err(Error::config(format!("dims must be 3 or 6, got {}", self.dims)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("hidden widths must be a nonempty list of positive sizes"));
        }
        if self.step_embedding < 4 || self.step_embedding % 2 != 0 {
            return Err(Error::config("step embedding size must be even and at least 4"));
        }
        if self.condition_embedding < 4 {
            return Err(Error::config("condition embedding size must be at least 4"));
        }
        if self.injection == Injection::Sum && self.step_embedding != self.condition_embedding {
            return Err(Error::config(
                "summed embeddings need equal step and condition embedding sizes",
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel size must be odd"));
        }
        if self.horizon < 2 {
            return Err(Error::config("horizon must be at least 2"));
        }
        if self.architecture == Architecture::TemporalConvUnet {
            let f = 1usize << (self.widths.len() - 1);
            if self.horizon % f != 0 {
                return Err(Error::config(format!(
                    "horizon {} is not divisible by the U-Net downsampling factor {f}",
                    self.horizon
                )));
            }
        }
        Ok(())
    }
}

/// Return condition, already scaled to `[0, 1]`, or the null token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionInput {
    pub return_value: f64,
    pub is_null: bool,
}

impl ConditionInput {
    pub fn null() -> Self {
        Self {
            return_value: 0.0,
            is_null: true,
        }
    }

    pub fn value(return_value: f64) -> Self {
        Self {
            return_value,
            is_null: false,
        }
    }

    fn as_option(self) -> Option<f64> {
        (!self.is_null).then_some(self.return_value)
    }
}

/// Every trainable parameter, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet(Vec<f64>);

impl ParameterSet {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug)]
enum Network {
    Unet(TemporalUnet),
    Mlp(ResidualMlp),
}

enum Tape {
    Unet(UnetTape, Act),
    Mlp(MlpTape),
}

pub struct Denoiser {
    config: DenoiserConfig,
    builder: ParamBuilder,
    embed: Embedder,
    net: Network,
    conditional_evals: AtomicU64,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("num_params", &self.builder.len())
            .finish()
    }
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self::new(self.config.clone()).expect("config was already validated")
    }
}

/// Noise, steps and null flags for one training batch, drawn up front so
/// the loss is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub steps: Vec<usize>,
    pub noise: Vec<Matrix>,
    pub null: Vec<bool>,
}

impl TrainingDraw {
    /// Per example: `k ~ U{1..K}`, `eps ~ N(0, I)`, then the drop coin.
    pub fn sample(
        batch: usize,
        rows: usize,
        cols: usize,
        steps: usize,
        drop_probability: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut draw = TrainingDraw {
            steps: Vec::with_capacity(batch),
            noise: Vec::with_capacity(batch),
            null: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            draw.steps.push(rng.random_range(1..=steps));
            let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
            draw.noise.push(Matrix::from_vec(rows, cols, data).expect("sized above"));
            draw.null.push(rng.random::<f64>() < drop_probability);
        }
        draw
    }
}

/// Mean squared error over every element of a batch.
pub fn noise_mse(pred: &[Matrix], target: &[Matrix]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
            sum += (a - b).powi(2);
        }
        n += p.as_slice().len();
    }
    sum / n.max(1) as f64
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::default();
        let embed = Embedder::new(&mut pb, config.step_embedding, config.condition_embedding, config.injection);
        let e = embed.out_dim();
        let net = match config.architecture {
            Architecture::TemporalConvUnet => {
                Network::Unet(TemporalUnet::new(&mut pb, config.dims, &config.widths, config.kernel, e))
            }
            Architecture::ResidualMlp => Network::Mlp(ResidualMlp::new(
                &mut pb,
                config.horizon * config.dims,
                &config.widths,
                e,
            )),
        };
        Ok(Self {
            config,
            builder: pb,
            embed,
            net,
            conditional_evals: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.builder.len()
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParameterSet {
        ParameterSet(self.builder.init(rng))
    }

    /// How many examples have been pushed through the condition encoder.
    pub fn conditional_evaluations(&self) -> u64 {
        self.conditional_evals.load(Ordering::Relaxed)
    }

    pub fn reset_conditional_evaluations(&self) {
        self.conditional_evals.store(0, Ordering::Relaxed);
    }

    /// Whether trajectories with `n` waypoints can be denoised.
    pub fn supports_horizon(&self, n: usize) -> bool {
        match &self.net {
            Network::Unet(u) => u.supports_horizon(n),
            Network::Mlp(m) => n * self.config.dims == m.input_len(),
        }
    }

    fn check_inputs(&self, params: &ParameterSet, xs: &[Matrix], steps: &[usize], conds: &[ConditionInput]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!("{} parameters", self.num_params()), params.len()));
        }
        if xs.is_empty() {
            return Err(Error::Empty("denoiser batch"));
        }
        if steps.len() != xs.len() || conds.len() != xs.len() {
            return Err(Error::shape(
                format!("{} steps and conditions", xs.len()),
                format!("{} and {}", steps.len(), conds.len()),
            ));
        }
        let n = xs[0].rows();
        if !self.supports_horizon(n) {
            return Err(Error::config(format!("the denoiser cannot process horizon {n}")));
        }
        for x in xs {
            if x.shape() != (n, self.config.dims) {
                return Err(Error::shape(
                    format!("{n}x{}", self.config.dims),
                    format!("{}x{}", x.rows(), x.cols()),
                ));
            }
            if !x.is_finite() {
                return Err(Error::NonFinite("denoiser input".into()));
            }
        }
        if steps.contains(&0) {
            return Err(Error::config("diffusion step must be at least 1"));
        }
        if let Some(c) = conds.iter().find(|c| !c.is_null && !c.return_value.is_finite()) {
            return Err(Error::NonFinite(format!("condition {}", c.return_value)));
        }
        Ok(())
    }

    fn forward(
        &self,
        p: &[f64],
        xs: &[Matrix],
        steps: &[usize],
        conds: &[ConditionInput],
    ) -> (Vec<Matrix>, Vec<f64>, EmbedCache, Tape) {
        let opts: Vec<Option<f64>> = conds.iter().map(|c| c.as_option()).collect();
        let active = opts.iter().filter(|c| c.is_some()).count() as u64;
        self.conditional_evals.fetch_add(active, Ordering::Relaxed);
        let (memb, ecache) = self.embed.forward(p, steps, &opts);
        let (b, n, d) = (xs.len(), xs[0].rows(), self.config.dims);
        match &self.net {
            Network::Unet(u) => {
                let mut x = Act::zeros(d, b, n);
                for (bi, m) in xs.iter().enumerate() {
                    for t in 0..n {
                        for c in 0..d {
                            x.data[(c * b + bi) * n + t] = m.get(t, c);
                        }
                    }
                }
                let (y, tape) = u.forward(p, &x, &memb);
                let out = (0..b)
                    .map(|bi| Matrix::from_fn(n, d, |t, c| y.data[(c * b + bi) * n + t]))
                    .collect();
                (out, memb, ecache, Tape::Unet(tape, y))
            }
            Network::Mlp(m) => {
                let mut x = Vec::with_capacity(b * n * d);
                for xm in xs {
                    x.extend_from_slice(xm.as_slice());
                }
                let (y, tape) = m.forward(p, &x, b, &memb);
                let out = y
                    .chunks(n * d)
                    .map(|c| Matrix::from_vec(n, d, c.to_vec()).expect("sized by the network"))
                    .collect();
                (out, memb, ecache, Tape::Mlp(tape))
            }
        }
    }

    fn backward(&self, p: &[f64], memb: &[f64], ecache: &EmbedCache, tape: &Tape, dys: &[Matrix]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        let mut dmemb = vec![0.0; memb.len()];
        let (b, n, d) = (dys.len(), dys[0].rows(), self.config.dims);
        match (&self.net, tape) {
            (Network::Unet(u), Tape::Unet(tape, y)) => {
                let mut dy = y.like();
                for (bi, m) in dys.iter().enumerate() {
                    for t in 0..n {
                        for c in 0..d {
                            dy.data[(c * b + bi) * n + t] = m.get(t, c);
                        }
                    }
                }
                u.backward(p, tape, memb, &dy, &mut g, &mut dmemb);
            }
            (Network::Mlp(m), Tape::Mlp(tape)) => {
                let mut dy = Vec::with_capacity(b * n * d);
                for dm in dys {
                    dy.extend_from_slice(dm.as_slice());
                }
                m.backward(p, tape, b, memb, &dy, &mut g, &mut dmemb);
            }
            _ => unreachable!("tape always matches the network"),
        }
        self.embed.backward(p, ecache, &dmemb, &mut g);
        g
    }

    /// `eps_theta(x, k, c)` for one trajectory.
    pub fn predict_noise(&self, params: &ParameterSet, x: &Matrix, k: usize, cond: ConditionInput) -> Result<Matrix> {
        let mut out = self.predict_noise_batch(params, std::slice::from_ref(x), &[k], &[cond])?;
        Ok(out.pop().expect("one output per input"))
    }

    /// Batched prediction; each output depends only on its own input row.
    pub fn predict_noise_batch(
        &self,
        params: &ParameterSet,
        xs: &[Matrix],
        steps: &[usize],
        conds: &[ConditionInput],
    ) -> Result<Vec<Matrix>> {
        self.check_inputs(params, xs, steps, conds)?;
        Ok(self.forward(params.as_slice(), xs, steps, conds).0)
    }

    /// Denoising loss and its gradient for pre-drawn noise.
    /// `batch` pairs each clean normalized path with its scaled return.
    pub fn loss_for_draw(
        &self,
        params: &ParameterSet,
        batch: &[(&Matrix, f64)],
        sched: &NoiseSchedule,
        draw: &TrainingDraw,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut xs = Vec::with_capacity(batch.len());
        for (i, (x0, _)) in batch.iter().enumerate() {
            xs.push(sched.forward_sample(x0, draw.steps[i], &draw.noise[i])?);
        }
        let conds: Vec<ConditionInput> = batch
            .iter()
            .zip(&draw.null)
            .map(|((_, r), null)| {
                if *null {
                    ConditionInput::null()
                } else {
                    ConditionInput::value(*r)
                }
            })
            .collect();
        self.check_inputs(params, &xs, &draw.steps, &conds)?;
        let p = params.as_slice();
        let (pred, memb, ecache, tape) = self.forward(p, &xs, &draw.steps, &conds);
        let loss = noise_mse(&pred, &draw.noise);
        let count = (pred.len() * pred[0].as_slice().len()) as f64;
        let dys: Vec<Matrix> = pred
            .iter()
            .zip(&draw.noise)
            .map(|(a, b)| a.axpby(2.0 / count, b, -2.0 / count))
            .collect::<Result<_>>()?;
        let grad = self.backward(p, &memb, &ecache, &tape, &dys);
        Ok((loss, grad))
    }

    pub fn loss_and_gradient(
        &self,
        params: &ParameterSet,
        batch: &[(&Matrix, f64)],
        sched: &NoiseSchedule,
        drop_probability: f64,
        rng: &mut impl Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let Some((x0, _)) = batch.first() else {
            return Err(Error::Empty("training batch"));
        };
        let draw = TrainingDraw::sample(batch.len(), x0.rows(), x0.cols(), sched.steps(), drop_probability, rng);
        self.loss_for_draw(params, batch, sched, &draw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(arch: Architecture) -> DenoiserConfig {
        DenoiserConfig {
            dims: 3,
            horizon: 4,
            widths: vec![8],
            kernel: 3,
            step_embedding: 8,
            condition_embedding: 8,
            architecture: arch,
            injection: Injection::Sum,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn config_guards() {
        DenoiserConfig::default().validate().unwrap();
        let mut c = DenoiserConfig::default();
        c.widths.clear();
        assert!(c.validate().is_err());
        let c = DenoiserConfig {
            step_embedding: 2,
            condition_embedding: 2,
            ..DenoiserConfig::default()
        };
        assert!(c.validate().is_err());
        let c = DenoiserConfig {
            horizon: 33,
            ..DenoiserConfig::default()
        };
        assert!(c.validate().is_err());
        let c = DenoiserConfig {
            condition_embedding: 16,
            ..DenoiserConfig::default()
        };
        assert!(c.validate().is_err());
        let c = DenoiserConfig {
            condition_embedding: 16,
            injection: Injection::Concat,
            ..DenoiserConfig::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn shapes_errors_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = net.init_params(&mut rng);
        let x = randn(&mut rng, 32, 3);
        let a = net.predict_noise(&p, &x, 7, ConditionInput::value(0.4)).unwrap();
        let b = net.predict_noise(&p, &x, 7, ConditionInput::value(0.4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (32, 3));
        let long = randn(&mut rng, 64, 3);
        assert_eq!(net.predict_noise(&p, &long, 3, ConditionInput::null()).unwrap().shape(), (64, 3));
        let mut bad = x.clone();
        bad.set(3, 1, f64::NAN);
        assert!(net.predict_noise(&p, &bad, 7, ConditionInput::null()).is_err());
        assert!(net.predict_noise(&p, &x, 0, ConditionInput::null()).is_err());
        assert!(net.predict_noise(&p, &randn(&mut rng, 31, 3), 1, ConditionInput::null()).is_err());
    }

    #[test]
    fn batch_matches_single_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for arch in [Architecture::TemporalConvUnet, Architecture::ResidualMlp] {
            let net = Denoiser::new(DenoiserConfig {
                horizon: 16,
                architecture: arch,
                ..DenoiserConfig::default()
            })
            .unwrap();
            let p = net.init_params(&mut rng);
            let xs: Vec<Matrix> = (0..3).map(|_| randn(&mut rng, 16, 3)).collect();
            let steps = [1, 50, 200];
            let conds = [ConditionInput::value(0.1), ConditionInput::null(), ConditionInput::value(0.9)];
            let batch = net.predict_noise_batch(&p, &xs, &steps, &conds).unwrap();
            for i in 0..3 {
                let single = net.predict_noise(&p, &xs[i], steps[i], conds[i]).unwrap();
                for (a, b) in single.as_slice().iter().zip(batch[i].as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_output_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = net.init_params(&mut rng);
        let x = randn(&mut rng, 32, 3);
        for k in [1, 100, 200] {
            let rms = net.predict_noise(&p, &x, k, ConditionInput::value(0.5)).unwrap().rms();
            assert!((0.01..=10.0).contains(&rms), "k={k} rms={rms}");
        }
    }

    #[test]
    fn null_token_ignores_return_value_and_skips_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = net.init_params(&mut rng);
        let x = randn(&mut rng, 32, 3);
        let a = net
            .predict_noise(&p, &x, 10, ConditionInput { return_value: 0.0, is_null: true })
            .unwrap();
        let b = net
            .predict_noise(&p, &x, 10, ConditionInput { return_value: 123.0, is_null: true })
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(net.conditional_evaluations(), 0);
        let c = net.predict_noise(&p, &x, 10, ConditionInput::value(0.0)).unwrap();
        assert_eq!(net.conditional_evaluations(), 1);
        assert_ne!(a, c);
    }

    #[test]
    fn temporal_structure_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = net.init_params(&mut rng);
        let x = randn(&mut rng, 32, 3);
        let mut perm: Vec<usize> = (0..32).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled = Matrix::from_fn(32, 3, |r, c| x.get(perm[r], c));
        let y = net.predict_noise(&p, &x, 20, ConditionInput::null()).unwrap();
        let ys = net.predict_noise(&p, &shuffled, 20, ConditionInput::null()).unwrap();
        let unshuffled = Matrix::from_fn(32, 3, |r, c| {
            let inv = perm.iter().position(|&q| q == r).unwrap();
            ys.get(inv, c)
        });
        let diff = y.axpby(1.0, &unshuffled, -1.0).unwrap().max_abs();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps: Vec<Matrix> = (0..4).map(|_| randn(&mut rng, 8, 3)).collect();
        assert_eq!(noise_mse(&eps, &eps), 0.0);
        let zeros: Vec<Matrix> = (0..4).map(|_| Matrix::zeros(8, 3)).collect();
        assert!(noise_mse(&zeros, &eps) > 0.5);
    }

    fn check_fd(cfg: DenoiserConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = ScheduleConfig::default().build().unwrap();
        let net = Denoiser::new(cfg.clone()).unwrap();
        let mut p = net.init_params(&mut rng);
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.05..0.05);
        }
        let x0: Vec<Matrix> = (0..3).map(|_| randn(&mut rng, cfg.horizon, cfg.dims)).collect();
        let batch: Vec<(&Matrix, f64)> = x0.iter().zip([0.2, 0.7, 0.5]).collect();
        let mut draw = TrainingDraw::sample(3, cfg.horizon, cfg.dims, 200, 0.0, &mut rng);
        draw.null[2] = true;
        let (_, grad) = net.loss_for_draw(&p, &batch, &sched, &draw).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let i = rng.random_range(0..p.len());
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.as_mut_slice()[i] += h;
            pm.as_mut_slice()[i] -= h;
            let lp = net.loss_for_draw(&pp, &batch, &sched, &draw).unwrap().0;
            let lm = net.loss_for_draw(&pm, &batch, &sched, &draw).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_fd(tiny(Architecture::TemporalConvUnet), 7);
        check_fd(tiny(Architecture::ResidualMlp), 8);
        check_fd(
            DenoiserConfig {
                horizon: 8,
                widths: vec![8, 16],
                injection: Injection::Concat,
                condition_embedding: 4,
                ..tiny(Architecture::TemporalConvUnet)
            },
            9,
        );
    }

    #[test]
    fn initial_loss_is_order_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sched = ScheduleConfig::default().build().unwrap();
        let net = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = net.init_params(&mut rng);
        let x0: Vec<Matrix> = (0..32).map(|_| randn(&mut rng, 32, 3)).collect();
        let batch: Vec<(&Matrix, f64)> = x0.iter().map(|m| (m, 0.5)).collect();
        let (loss, grad) = net.loss_and_gradient(&p, &batch, &sched, 0.25, &mut rng).unwrap();
        assert!((0.2..5.0).contains(&loss), "{loss}");
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}
