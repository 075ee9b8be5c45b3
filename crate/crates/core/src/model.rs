//! A small diffusion-transformer noise predictor.
//!
//! Each block is an attention sub-layer followed by an MLP sub-layer. The raw
//! sub-layer outputs `f_attn = f_Attn(x)` and `f_mlp = f_MLP(F_attn)` pass
//! through adaptive layer normalization before joining the residual stream:
//!
//! ```text
//! F_attn = x      + gate_a * LN(f_attn) + shift_a
//! out    = F_attn + gate_m * LN(f_mlp)  + shift_m
//! ```
//!
//! The (gate, shift) pairs come from a linear head on the conditioning vector
//! `temb[t] + cemb[class]`. With `modulation_scale = 0` those heads are zero,
//! every block is the identity, and the model output is `x + temb + cemb`.
//! The final projection head is the identity.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{seeded_normal, Rng, Tensor};

fn default_max_timesteps() -> usize {
    1000
}

fn default_embedding_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub tokens: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Rows in the timestep embedding table.
    #[serde(default = "default_max_timesteps")]
    pub max_timesteps: usize,
    /// Standard deviation multiplier for the ALN modulation heads; zero gives
    /// the identity-at-init model.
    #[serde(default)]
    pub modulation_scale: f64,
    /// Multiplier on the timestep and class embeddings.
    #[serde(default = "default_embedding_scale")]
    pub embedding_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            width: 32,
            heads: 4,
            tokens: 8,
            num_classes: 16,
            seed: 0,
            max_timesteps: default_max_timesteps(),
            modulation_scale: 0.0,
            embedding_scale: default_embedding_scale(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.depth", self.depth),
            ("model.width", self.width),
            ("model.heads", self.heads),
            ("model.tokens", self.tokens),
            ("model.num_classes", self.num_classes),
            ("model.max_timesteps", self.max_timesteps),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::config("model.width", "must be even"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("must divide width {}", self.width),
            ));
        }
        if !(self.modulation_scale.is_finite() && self.modulation_scale >= 0.0) {
            return Err(Error::config(
                "model.modulation_scale",
                "must be finite and non-negative",
            ));
        }
        if !self.embedding_scale.is_finite() {
            return Err(Error::config("model.embedding_scale", "must be finite"));
        }
        Ok(())
    }

    /// Short hash identifying the weights this config produces.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes");
        let digest = Sha256::digest(&canonical);
        format!("{}-seed{}", &hex::encode(digest)[..16], self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conditioning {
    pub t: usize,
    pub class_id: usize,
}

/// Weights of one block. Matrices multiply row vectors from the right.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    /// `d x 2d`: columns `[0, d)` produce the gate, `[d, 2d)` the shift.
    pub mod_attn: Tensor,
    pub mod_mlp: Tensor,
}

/// Modulation vectors for one block at one conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub gate_attn: Tensor,
    pub shift_attn: Tensor,
    pub gate_mlp: Tensor,
    pub shift_mlp: Tensor,
}

/// Result of running (or emulating) one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub out: Tensor,
    /// Raw attention output actually fed to ALN.
    pub f_attn: Tensor,
    /// Raw MLP output actually fed to ALN.
    pub f_mlp: Tensor,
    /// `true` when the sub-layers were evaluated, `false` on cache reuse.
    pub computed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDit {
    config: ModelConfig,
    layers: Vec<LayerWeights>,
    timestep_embedding: Tensor,
    class_embedding: Tensor,
}

/// Strategy that runs block `layer` at sampling iteration `step`.
pub trait BlockExecutor {
    fn execute(
        &mut self,
        model: &ToyDit,
        step: usize,
        layer: usize,
        x: &Tensor,
        cond: Conditioning,
    ) -> Result<BlockOutput>;
}

impl<F> BlockExecutor for F
where
    F: FnMut(&ToyDit, usize, usize, &Tensor, Conditioning) -> Result<BlockOutput>,
{
    fn execute(
        &mut self,
        model: &ToyDit,
        step: usize,
        layer: usize,
        x: &Tensor,
        cond: Conditioning,
    ) -> Result<BlockOutput> {
        self(model, step, layer, x, cond)
    }
}

/// Always evaluates the block.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainExecutor;

impl BlockExecutor for PlainExecutor {
    fn execute(
        &mut self,
        model: &ToyDit,
        _step: usize,
        layer: usize,
        x: &Tensor,
        cond: Conditioning,
    ) -> Result<BlockOutput> {
        model.block_forward(layer, x, cond)
    }
}

/// `gate * layer_norm(y) + shift`, per row.
pub fn aln(y: &Tensor, gate: &Tensor, shift: &Tensor) -> Result<Tensor> {
    y.layer_norm()?.mul_row(gate)?.add_row(shift)
}

fn sinusoidal_table(rows: usize, width: usize, scale: f64) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(rows * width);
    for t in 0..rows {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let angle = t as f64 * freq;
            data.push(scale * angle.sin());
            data.push(scale * angle.cos());
        }
    }
    Tensor::new(vec![rows, width], data).expect("finite sinusoids")
}

impl ToyDit {
    /// Deterministic initialization from the config alone.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let root = Rng::new(config.seed);
        let scaled = |rng: &mut Rng, shape: &[usize], scale: f64| -> Result<Tensor> {
            seeded_normal(rng, shape).scalar_affine(scale, 0.0)
        };
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let mut rng = root.split(1 + l as u64);
            let wq = scaled(&mut rng, &[d, d], inv(d))?;
            let wk = scaled(&mut rng, &[d, d], inv(d))?;
            let wv = scaled(&mut rng, &[d, d], inv(d))?;
            let wo = scaled(&mut rng, &[d, d], inv(d))?;
            let w_up = scaled(&mut rng, &[d, 4 * d], inv(d))?;
            let w_down = scaled(&mut rng, &[4 * d, d], inv(4 * d))?;
            let mod_scale = config.modulation_scale * inv(d);
            let (mod_attn, mod_mlp) = if config.modulation_scale == 0.0 {
                (Tensor::zeros(&[d, 2 * d]), Tensor::zeros(&[d, 2 * d]))
            } else {
                (
                    scaled(&mut rng, &[d, 2 * d], mod_scale)?,
                    scaled(&mut rng, &[d, 2 * d], mod_scale)?,
                )
            };
            layers.push(LayerWeights {
                wq,
                wk,
                wv,
                wo,
                w_up,
                w_down,
                mod_attn,
                mod_mlp,
            });
        }
        let timestep_embedding = sinusoidal_table(config.max_timesteps, d, config.embedding_scale);
        let mut crng = root.split(0);
        let class_embedding = scaled(&mut crng, &[config.num_classes, d], config.embedding_scale)?;
        Ok(ToyDit {
            config,
            layers,
            timestep_embedding,
            class_embedding,
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<LayerWeights>,
        timestep_embedding: Tensor,
        class_embedding: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        if layers.len() != config.depth {
            return Err(Error::config(
                "model.depth",
                format!("{} layers supplied", layers.len()),
            ));
        }
        let check = |name: &str, t: &Tensor, shape: [usize; 2]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::config(
                    name,
                    format!("shape {:?}, expected {:?}", t.shape(), shape),
                ));
            }
            Ok(())
        };
        for w in &layers {
            check("wq", &w.wq, [d, d])?;
            check("wk", &w.wk, [d, d])?;
            check("wv", &w.wv, [d, d])?;
            check("wo", &w.wo, [d, d])?;
            check("w_up", &w.w_up, [d, 4 * d])?;
            check("w_down", &w.w_down, [4 * d, d])?;
            check("mod_attn", &w.mod_attn, [d, 2 * d])?;
            check("mod_mlp", &w.mod_mlp, [d, 2 * d])?;
        }
        check(
            "timestep_embedding",
            &timestep_embedding,
            [config.max_timesteps, d],
        )?;
        check("class_embedding", &class_embedding, [config.num_classes, d])?;
        Ok(ToyDit {
            config,
            layers,
            timestep_embedding,
            class_embedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn layer(&self, l: usize) -> Result<&LayerWeights> {
        self.layers.get(l).ok_or(Error::Layer {
            index: l,
            depth: self.config.depth,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn check_cond(&self, cond: Conditioning) -> Result<()> {
        if cond.t >= self.config.max_timesteps {
            return Err(Error::Step {
                t: cond.t,
                steps: self.config.max_timesteps,
            });
        }
        if cond.class_id >= self.config.num_classes {
            return Err(Error::config(
                "class_id",
                format!(
                    "{} >= num_classes {}",
                    cond.class_id, self.config.num_classes
                ),
            ));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = [self.config.tokens, self.config.width];
        if x.shape() != expected {
            return Err(Error::Dimension {
                op: "block input",
                detail: format!("shape {:?}, expected {:?}", x.shape(), expected),
            });
        }
        Ok(())
    }

    /// `temb[t] + cemb[class]` as a `1 x d` row.
    pub fn conditioning_vector(&self, cond: Conditioning) -> Result<Tensor> {
        self.check_cond(cond)?;
        let d = self.config.width;
        let te = &self.timestep_embedding.data()[cond.t * d..(cond.t + 1) * d];
        let ce = &self.class_embedding.data()[cond.class_id * d..(cond.class_id + 1) * d];
        Tensor::new(vec![1, d], te.iter().zip(ce).map(|(a, b)| a + b).collect())
    }

    pub fn modulation(&self, l: usize, cond: Conditioning) -> Result<Modulation> {
        let w = self.layer(l)?;
        let c = self.conditioning_vector(cond)?;
        let d = self.config.width;
        let a = c.matmul(&w.mod_attn)?;
        let m = c.matmul(&w.mod_mlp)?;
        let row = |t: &Tensor, start: usize| -> Result<Tensor> {
            Tensor::new(vec![d], t.data()[start..start + d].to_vec())
        };
        Ok(Modulation {
            gate_attn: row(&a, 0)?,
            shift_attn: row(&a, d)?,
            gate_mlp: row(&m, 0)?,
            shift_mlp: row(&m, d)?,
        })
    }

    /// Multi-head self-attention over the token axis of `LN(x)`.
    pub fn attention(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let w = self.layer(l)?;
        let xn = x.layer_norm()?;
        let q = xn.matmul(&w.wq)?;
        let k = xn.matmul(&w.wk)?;
        let v = xn.matmul(&w.wv)?;
        let dh = self.config.width / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = q.columns(h * dh, dh)?;
            let kh = k.columns(h * dh, dh)?;
            let vh = v.columns(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scalar_affine(scale, 0.0)?;
            heads.push(scores.softmax_rows()?.matmul(&vh)?);
        }
        Tensor::concat_columns(&heads)?.matmul(&w.wo)
    }

    /// `gelu(LN(x) W_up) W_down`.
    pub fn mlp(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let w = self.layer(l)?;
        x.layer_norm()?.matmul(&w.w_up)?.gelu()?.matmul(&w.w_down)
    }

    /// Residual + ALN composition of a block from given raw sub-layer outputs.
    ///
    /// Used on reuse, where `f_mlp` is not recomputed from the new residual.
    pub fn compose_block(
        &self,
        l: usize,
        x: &Tensor,
        cond: Conditioning,
        f_attn: &Tensor,
        f_mlp: &Tensor,
    ) -> Result<Tensor> {
        self.check_input(x)?;
        let m = self.modulation(l, cond)?;
        let f = x.add(&aln(f_attn, &m.gate_attn, &m.shift_attn)?)?;
        f.add(&aln(f_mlp, &m.gate_mlp, &m.shift_mlp)?)
    }

    /// Full evaluation of block `l`, returning its raw sub-layer outputs.
    pub fn block_forward(&self, l: usize, x: &Tensor, cond: Conditioning) -> Result<BlockOutput> {
        self.check_input(x)?;
        let m = self.modulation(l, cond)?;
        let f_attn = self.attention(l, x)?;
        let residual = x.add(&aln(&f_attn, &m.gate_attn, &m.shift_attn)?)?;
        let f_mlp = self.mlp(l, &residual)?;
        let out = residual.add(&aln(&f_mlp, &m.gate_mlp, &m.shift_mlp)?)?;
        Ok(BlockOutput {
            out,
            f_attn,
            f_mlp,
            computed: true,
        })
    }

    /// Adds the conditioning vector to every token, then runs all blocks
    /// through `executor`. `on_block` sees every block result in layer order.
    pub fn predict_noise(
        &self,
        x: &Tensor,
        cond: Conditioning,
        step: usize,
        executor: &mut dyn BlockExecutor,
        on_block: &mut dyn FnMut(usize, &BlockOutput),
    ) -> Result<Tensor> {
        self.check_input(x)?;
        let c = self.conditioning_vector(cond)?;
        let c = Tensor::new(vec![self.config.width], c.into_data())?;
        let mut h = x.add_row(&c)?;
        for l in 0..self.config.depth {
            let block = executor.execute(self, step, l, &h, cond)?;
            on_block(l, &block);
            h = block.out;
        }
        Ok(h)
    }
}
