use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{PlainExecutor, ToyDit};
use crate::numerics::Tensor;
use crate::sampler::{run_sampling, BlockEvent, HookBus, NoiseSchedule, SampleOptions};

/// Where a knowledge table came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub fingerprint: String,
    pub runs: usize,
    pub classes: Vec<usize>,
    pub tokens: usize,
    pub width: usize,
}

/// Raw sub-layer outputs of one uncached run, indexed `[t * L + l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecording {
    pub steps: usize,
    pub layers: usize,
    pub attn: Vec<Tensor>,
    pub mlp: Vec<Tensor>,
}

impl RunRecording {
    /// Records every block of one uncached sampling run.
    pub fn capture(
        model: &ToyDit,
        sched: &NoiseSchedule,
        class_id: usize,
        seed: u64,
    ) -> Result<Self> {
        let (steps, layers) = (sched.steps(), model.depth());
        let mut attn = vec![None; steps * layers];
        let mut mlp = vec![None; steps * layers];
        {
            let mut bus = HookBus::new();
            bus.subscribe(|e: &BlockEvent<'_>| {
                attn[e.step * layers + e.layer] = Some(e.f_attn.clone());
                mlp[e.step * layers + e.layer] = Some(e.f_mlp.clone());
            });
            run_sampling(
                model,
                sched,
                class_id,
                seed,
                &mut PlainExecutor,
                &mut bus,
                SampleOptions::default(),
            )?;
        }
        let complete = |v: Vec<Option<Tensor>>| -> Result<Vec<Tensor>> {
            v.into_iter()
                .enumerate()
                .map(|(i, t)| {
                    t.ok_or_else(|| Error::Comparison(format!("no hook event for cell {}", i)))
                })
                .collect()
        };
        Ok(RunRecording {
            steps,
            layers,
            attn: complete(attn)?,
            mlp: complete(mlp)?,
        })
    }
}

/// Per-(step, layer) averages of raw attention and MLP outputs over `Q`
/// uncached runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorKnowledge {
    steps: usize,
    layers: usize,
    attn: Vec<Tensor>,
    mlp: Vec<Tensor>,
    provenance: Provenance,
}

impl PriorKnowledge {
    pub fn from_grids(
        steps: usize,
        layers: usize,
        attn: Vec<Tensor>,
        mlp: Vec<Tensor>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = steps * layers;
        if n == 0 || attn.len() != n || mlp.len() != n {
            return Err(Error::config(
                "prior",
                format!("grid must hold {steps}x{layers} cells"),
            ));
        }
        let shape = [provenance.tokens, provenance.width];
        if attn.iter().chain(&mlp).any(|t| t.shape() != shape) {
            return Err(Error::config(
                "prior",
                format!("every tensor must be {shape:?}"),
            ));
        }
        Ok(PriorKnowledge {
            steps,
            layers,
            attn,
            mlp,
            provenance,
        })
    }

    /// Elementwise mean of the given recordings, reduced in slice order.
    pub fn from_runs(runs: &[RunRecording], provenance: Provenance) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::config("extraction.Q", "at least one run is required"))?;
        let (steps, layers) = (first.steps, first.layers);
        if runs.iter().any(|r| (r.steps, r.layers) != (steps, layers)) {
            return Err(Error::Comparison("recordings have different grids".into()));
        }
        let q = runs.len() as f64;
        let mean = |pick: fn(&RunRecording) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
            (0..steps * layers)
                .map(|i| {
                    let mut acc = pick(&runs[0])[i].clone();
                    for r in &runs[1..] {
                        acc = acc.add(&pick(r)[i])?;
                    }
                    let shape = acc.shape().to_vec();
                    Tensor::new(shape, acc.into_data().into_iter().map(|v| v / q).collect())
                })
                .collect()
        };
        let attn = mean(|r| &r.attn)?;
        let mlp = mean(|r| &r.mlp)?;
        Self::from_grids(
            steps,
            layers,
            attn,
            mlp,
            Provenance {
                runs: runs.len(),
                ..provenance
            },
        )
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn attn(&self, t: usize, l: usize) -> &Tensor {
        &self.attn[t * self.layers + l]
    }

    pub fn mlp(&self, t: usize, l: usize) -> &Tensor {
        &self.mlp[t * self.layers + l]
    }

    /// Fails unless this table was extracted from `model` over `steps` steps.
    pub fn check_model(&self, model: &ToyDit, steps: usize) -> Result<()> {
        if self.provenance.fingerprint != model.fingerprint() {
            return Err(Error::Fingerprint {
                expected: model.fingerprint(),
                found: self.provenance.fingerprint.clone(),
            });
        }
        if self.steps != steps || self.layers != model.depth() {
            return Err(Error::config(
                "sampler.T",
                format!(
                    "prior knowledge is {}x{}, run needs {}x{}",
                    self.steps,
                    self.layers,
                    steps,
                    model.depth()
                ),
            ));
        }
        Ok(())
    }
}

/// Seed of extraction run `q`.
pub fn extraction_seed(base: u64, q: usize) -> u64 {
    base.wrapping_add(q as u64)
}

/// Averages `q` uncached runs. Run `i` uses class `classes[i % len]` and seed
/// `seed + i`. Runs execute in parallel; the mean is reduced in run order.
pub fn extract(
    model: &ToyDit,
    sched: &NoiseSchedule,
    classes: &[usize],
    q: usize,
    seed: u64,
) -> Result<PriorKnowledge> {
    if q == 0 {
        return Err(Error::config("extraction.Q", "must be at least 1"));
    }
    if classes.is_empty() {
        return Err(Error::config("extraction.classes", "must not be empty"));
    }
    let runs = (0..q)
        .into_par_iter()
        .map(|i| {
            RunRecording::capture(
                model,
                sched,
                classes[i % classes.len()],
                extraction_seed(seed, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config();
    PriorKnowledge::from_runs(
        &runs,
        Provenance {
            fingerprint: model.fingerprint(),
            runs: q,
            classes: classes.to_vec(),
            tokens: cfg.tokens,
            width: cfg.width,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            fingerprint: "f".into(),
            runs: 0,
            classes: vec![0],
            tokens: 1,
            width: 2,
        }
    }

    fn rec(a: [f64; 2], m: [f64; 2]) -> RunRecording {
        RunRecording {
            steps: 1,
            layers: 1,
            attn: vec![Tensor::new(vec![1, 2], a.to_vec()).unwrap()],
            mlp: vec![Tensor::new(vec![1, 2], m.to_vec()).unwrap()],
        }
    }

    #[test]
    fn two_point_mean() {
        let pk = PriorKnowledge::from_runs(
            &[rec([1.0, 3.0], [0.0, 0.0]), rec([3.0, 5.0], [1.0, -1.0])],
            prov(),
        )
        .unwrap();
        assert_eq!(pk.attn(0, 0).data(), &[2.0, 4.0]);
        assert_eq!(pk.mlp(0, 0).data(), &[0.5, -0.5]);
        assert_eq!(pk.provenance().runs, 2);
    }

    #[test]
    fn single_run_is_exact() {
        let r = rec([0.1, 0.7], [1.0 / 3.0, -2.5]);
        let pk = PriorKnowledge::from_runs(std::slice::from_ref(&r), prov()).unwrap();
        assert_eq!(pk.attn(0, 0), &r.attn[0]);
        assert_eq!(pk.mlp(0, 0), &r.mlp[0]);
    }

    #[test]
    fn rejects_bad_extraction_config() {
        let m = ToyDit::new(crate::model::ModelConfig::default()).unwrap();
        let s = NoiseSchedule::linear(2).unwrap();
        assert!(matches!(
            extract(&m, &s, &[0], 0, 1),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            extract(&m, &s, &[], 1, 1),
            Err(Error::Config { .. })
        ));
        assert!(PriorKnowledge::from_runs(&[], prov()).is_err());
    }
}
