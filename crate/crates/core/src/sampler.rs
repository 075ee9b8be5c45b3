//! Deterministic DDIM (eta = 0) sampling loop with block-level hooks.
//!
//! Two indices appear here. The diffusion timestep `t` indexes the noise
//! schedule, `T - 1` being the noisiest. The sampling step counts loop
//! iterations in execution order, so step 0 runs at `t = T - 1`. Caching,
//! priorities and hooks all use the sampling step.

use crate::error::{Error, Result};
use crate::model::{BlockExecutor, BlockOutput, Conditioning, ToyDit};
use crate::numerics::{seeded_normal, Rng, Tensor};

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4` to `2e-2` over `steps` timesteps.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("sampler.T", "must be at least 1"));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![BETA_START]
        } else {
            (0..steps)
                .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_alphas(betas.iter().map(|b| 1.0 - b).collect())
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::config(
                "sampler.alphas",
                "each alpha must lie in (0, 1)",
            ));
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Diffusion timestep visited at sampling step `step`.
    pub fn timestep_at(&self, step: usize) -> usize {
        self.steps() - 1 - step
    }
}

/// One deterministic DDIM update from timestep `t` to `t - 1`.
///
/// At `t = 0` the predicted clean sample is returned.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if t >= sched.steps() {
        return Err(Error::Step {
            t,
            steps: sched.steps(),
        });
    }
    let ab = sched.alpha_bars[t];
    let x0 = x_t
        .sub(&eps.scalar_affine((1.0 - ab).sqrt(), 0.0)?)?
        .scalar_affine(1.0 / ab.sqrt(), 0.0)?;
    if t == 0 {
        return Ok(x0);
    }
    let prev = sched.alpha_bars[t - 1];
    x0.scalar_affine(prev.sqrt(), 0.0)?
        .add(&eps.scalar_affine((1.0 - prev).sqrt(), 0.0)?)
}

/// A block event as seen by observers.
#[derive(Debug)]
pub struct BlockEvent<'a> {
    pub step: usize,
    pub layer: usize,
    pub f_attn: &'a Tensor,
    pub f_mlp: &'a Tensor,
}

type Observer<'h> = Box<dyn FnMut(&BlockEvent<'_>) + 'h>;

/// Ordered observers of executed (not reused) blocks.
#[derive(Default)]
pub struct HookBus<'h> {
    observers: Vec<Observer<'h>>,
}

impl<'h> HookBus<'h> {
    pub fn new() -> Self {
        HookBus {
            observers: Vec::new(),
        }
    }

    pub fn subscribe(&mut self, observer: impl FnMut(&BlockEvent<'_>) + 'h) {
        self.observers.push(Box::new(observer));
    }

    pub fn len(&self) -> usize {
        self.observers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observers.is_empty()
    }

    fn notify(&mut self, step: usize, layer: usize, block: &BlockOutput) {
        if !block.computed {
            return;
        }
        let event = BlockEvent {
            step,
            layer,
            f_attn: &block.f_attn,
            f_mlp: &block.f_mlp,
        };
        for o in &mut self.observers {
            o(&event);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub class_id: usize,
    pub seed: u64,
    pub initial_noise: Tensor,
    /// `T + 1` states starting with the initial noise, when retained.
    pub trajectory: Option<Vec<Tensor>>,
    pub final_sample: Tensor,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOptions {
    pub keep_trajectory: bool,
}

/// Initial noise for `seed`, shaped for `model`.
pub fn initial_noise(model: &ToyDit, seed: u64) -> Tensor {
    let cfg = model.config();
    seeded_normal(&mut Rng::new(seed).split(0x1A7E), &[cfg.tokens, cfg.width])
}

/// Runs `T` iterations of predict-then-step.
pub fn run_sampling(
    model: &ToyDit,
    sched: &NoiseSchedule,
    class_id: usize,
    seed: u64,
    executor: &mut dyn BlockExecutor,
    hooks: &mut HookBus<'_>,
    options: SampleOptions,
) -> Result<SampleRun> {
    if sched.steps() > model.config().max_timesteps {
        return Err(Error::config(
            "sampler.T",
            format!(
                "{} exceeds model.max_timesteps {}",
                sched.steps(),
                model.config().max_timesteps
            ),
        ));
    }
    let x_start = initial_noise(model, seed);
    let mut trajectory = options.keep_trajectory.then(|| vec![x_start.clone()]);
    let mut x = x_start.clone();
    for step in 0..sched.steps() {
        let t = sched.timestep_at(step);
        let cond = Conditioning { t, class_id };
        let eps = model.predict_noise(&x, cond, step, executor, &mut |l, block| {
            hooks.notify(step, l, block)
        })?;
        x = ddim_step(&x, &eps, t, sched)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
    }
    Ok(SampleRun {
        class_id,
        seed,
        initial_noise: x_start,
        trajectory,
        final_sample: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PlainExecutor};

    #[test]
    fn schedule_examples() {
        let one = NoiseSchedule::linear(1).unwrap();
        assert_eq!(one.alpha_bars(), &[one.alphas()[0]]);
        assert!(NoiseSchedule::linear(0).is_err());
        let s = NoiseSchedule::linear(20).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let product: f64 = s.alphas().iter().product();
        assert!((s.alpha_bars()[19] - product).abs() < 1e-15);
        assert!((s.alphas()[0] - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((s.alphas()[19] - (1.0 - 2e-2)).abs() < 1e-15);
    }

    #[test]
    fn ddim_zero_noise_closed_form() {
        let s = NoiseSchedule::linear(10).unwrap();
        let x = seeded_normal(&mut Rng::new(1), &[2, 2]);
        let z = Tensor::zeros(&[2, 2]);
        let got = ddim_step(&x, &z, 5, &s).unwrap();
        let k = (s.alpha_bars()[4] / s.alpha_bars()[5]).sqrt();
        for (g, v) in got.data().iter().zip(x.data()) {
            assert!((g - k * v).abs() < 1e-14);
        }
    }

    #[test]
    fn ddim_reconstructs_clean_sample() {
        let s = NoiseSchedule::linear(10).unwrap();
        let c = seeded_normal(&mut Rng::new(2), &[2, 3]);
        let e = seeded_normal(&mut Rng::new(3), &[2, 3]);
        let ab = s.alpha_bars()[0];
        let xt = c
            .scalar_affine(ab.sqrt(), 0.0)
            .unwrap()
            .add(&e.scalar_affine((1.0 - ab).sqrt(), 0.0).unwrap())
            .unwrap();
        let x0 = ddim_step(&xt, &e, 0, &s).unwrap();
        for (a, b) in x0.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_matches_formula_oracle() {
        let s = NoiseSchedule::linear(20).unwrap();
        let x = seeded_normal(&mut Rng::new(4), &[2, 2]);
        let e = seeded_normal(&mut Rng::new(5), &[2, 2]);
        let t = 13;
        let got = ddim_step(&x, &e, t, &s).unwrap();
        let (a, p) = (s.alpha_bars()[t], s.alpha_bars()[t - 1]);
        for i in 0..4 {
            let (xi, ei) = (x.data()[i], e.data()[i]);
            let oracle = p.sqrt() * (xi - (1.0 - a).sqrt() * ei) / a.sqrt() + (1.0 - p).sqrt() * ei;
            assert!((got.data()[i] - oracle).abs() < 1e-12);
        }
        assert!(matches!(
            ddim_step(&x, &e, 20, &s),
            Err(Error::Step { t: 20, steps: 20 })
        ));
    }

    fn toy() -> ToyDit {
        ToyDit::new(ModelConfig {
            depth: 3,
            width: 8,
            heads: 2,
            tokens: 4,
            num_classes: 3,
            seed: 11,
            max_timesteps: 50,
            modulation_scale: 1.0,
            embedding_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_hooks_see_every_block() {
        let m = toy();
        let s = NoiseSchedule::linear(6).unwrap();
        let mut events = Vec::new();
        let mut bus = HookBus::new();
        bus.subscribe(|e: &BlockEvent<'_>| events.push((e.step, e.layer)));
        let opts = SampleOptions {
            keep_trajectory: true,
        };
        let a = run_sampling(&m, &s, 1, 9, &mut PlainExecutor, &mut bus, opts).unwrap();
        drop(bus);
        let b = run_sampling(&m, &s, 1, 9, &mut PlainExecutor, &mut HookBus::new(), opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.as_ref().unwrap().len(), 7);
        let expected: Vec<_> = (0..6).flat_map(|t| (0..3).map(move |l| (t, l))).collect();
        assert_eq!(events, expected);
    }

    #[test]
    fn identity_model_matches_closed_form_cascade() {
        let cfg = ModelConfig {
            depth: 2,
            width: 4,
            heads: 1,
            tokens: 2,
            num_classes: 2,
            seed: 1,
            max_timesteps: 8,
            ..ModelConfig::default()
        };
        let m = ToyDit::new(cfg).unwrap();
        let s = NoiseSchedule::linear(8).unwrap();
        let run = run_sampling(
            &m,
            &s,
            1,
            3,
            &mut PlainExecutor,
            &mut HookBus::new(),
            SampleOptions::default(),
        )
        .unwrap();

        // Per element: eps = x + c_t, then the scalar DDIM update.
        let mut x: Vec<f64> = initial_noise(&m, 3).into_data();
        for t in (0..8).rev() {
            let c = m
                .conditioning_vector(Conditioning { t, class_id: 1 })
                .unwrap();
            let ab = s.alpha_bars()[t];
            for (i, xi) in x.iter_mut().enumerate() {
                let eps = *xi + c.data()[i % 4];
                let x0 = (*xi - (1.0 - ab).sqrt() * eps) / ab.sqrt();
                *xi = if t == 0 {
                    x0
                } else {
                    let p = s.alpha_bars()[t - 1];
                    p.sqrt() * x0 + (1.0 - p).sqrt() * eps
                };
            }
        }
        for (a, b) in run.final_sample.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
