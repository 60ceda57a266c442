//! A small, deterministic diffusion transformer.
//!
//! The network is a stack of `num_blocks` residual units applied to a token
//! sequence of shape `[seq_len, hidden_dim]`:
//!
//! ```text
//! h   = x + mod_n(emb(t, c))
//! u   = h + Mix_n · LN(h)
//! out = u + MLP_n(LN(u))
//! ```
//!
//! `Mix_n` is a learned `[seq_len, seq_len]` token-mixing matrix standing in
//! for attention. The forward pass can capture any block's output and resume
//! from any block index, which is what block-level caching needs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, gaussian_like, Tensor};

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub cond_dim: usize,
    /// Channels per token of the raw latent.
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    pub init_seed: u64,
}

fn default_latent_channels() -> usize {
    4
}

impl ModelConfig {
    pub fn toy_default() -> Self {
        Self {
            num_blocks: 12,
            hidden_dim: 64,
            seq_len: 64,
            cond_dim: 32,
            latent_channels: 4,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_blocks must be at least 2, got {}",
                self.num_blocks
            )));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("seq_len", self.seq_len),
            ("cond_dim", self.cond_dim),
            ("latent_channels", self.latent_channels),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.seq_len, self.latent_channels]
    }

    pub fn activation_shape(&self) -> [usize; 2] {
        [self.seq_len, self.hidden_dim]
    }
}

/// A prompt embedding, or the null embedding used for the unconditional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    embedding: Tensor,
    is_null: bool,
}

impl Conditioning {
    /// Seeded random embedding standing in for an encoded prompt.
    pub fn prompt(cond_dim: usize, prompt_id: u64) -> Self {
        let embedding = gaussian_like(&[cond_dim], 0.0, 1.0, derive_seed(prompt_id, 0xC0_4D))
            .expect("unit sigma is valid");
        Self {
            embedding,
            is_null: false,
        }
    }

    pub fn null(cond_dim: usize) -> Self {
        Self {
            embedding: Tensor::zeros(&[cond_dim]),
            is_null: true,
        }
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    mod_w: Tensor,
    mod_b: Tensor,
    mix: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiT {
    config: ModelConfig,
    in_w: Tensor,
    in_b: Tensor,
    pos: Tensor,
    time_w: Tensor,
    time_b: Tensor,
    cond_w: Tensor,
    blocks: Vec<Block>,
    out_w: Tensor,
    out_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    /// Post-block activations for the requested indices.
    pub captured: BTreeMap<usize, Tensor>,
}

pub fn build_model(config: ModelConfig) -> Result<ToyDiT> {
    ToyDiT::new(config)
}

impl ToyDiT {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            num_blocks: l,
            hidden_dim: h,
            seq_len: s,
            cond_dim: c,
            latent_channels: ch,
            init_seed,
        } = config;
        let mut tag = 0u64;
        let mut init = |shape: &[usize], std: f64| {
            tag += 1;
            gaussian_like(shape, 0.0, std, derive_seed(init_seed, tag)).expect("valid std")
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let in_w = init(&[ch, h], fan(ch));
        let in_b = init(&[h], 0.1);
        let pos = init(&[s, h], 0.5);
        let time_w = init(&[h, h], fan(h));
        let time_b = init(&[h], 0.1);
        let cond_w = init(&[c, h], fan(c));
        let blocks = (0..l)
            .map(|_| Block {
                mod_w: init(&[h, h], 0.25 * fan(h)),
                mod_b: init(&[h], 0.02),
                mix: init(&[s, s], 0.3 * fan(s)),
                fc1_w: init(&[h, MLP_RATIO * h], fan(h)),
                fc1_b: init(&[MLP_RATIO * h], 0.02),
                fc2_w: init(&[MLP_RATIO * h, h], 0.3 * fan(MLP_RATIO * h)),
                fc2_b: init(&[h], 0.02),
            })
            .collect();
        let out_w = init(&[h, ch], fan(h));
        let out_b = init(&[ch], 0.02);
        Ok(Self {
            config,
            in_w,
            in_b,
            pos,
            time_w,
            time_b,
            cond_w,
            blocks,
            out_w,
            out_b,
        })
    }

    /// Every weight zero except the output bias, so the prediction is the
    /// constant `value` regardless of input, timestep or conditioning.
    pub fn constant(config: ModelConfig, value: f64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.map_params(|name, t| {
            let v = if name == "out.bias" { value } else { 0.0 };
            *t = t.map(|_| v);
        });
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    /// Parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("in.weight".into(), &self.in_w),
            ("in.bias".into(), &self.in_b),
            ("pos".into(), &self.pos),
            ("time.weight".into(), &self.time_w),
            ("time.bias".into(), &self.time_b),
            ("cond.weight".into(), &self.cond_w),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.mod.weight"), &b.mod_w));
            out.push((format!("blocks.{i}.mod.bias"), &b.mod_b));
            out.push((format!("blocks.{i}.mix"), &b.mix));
            out.push((format!("blocks.{i}.fc1.weight"), &b.fc1_w));
            out.push((format!("blocks.{i}.fc1.bias"), &b.fc1_b));
            out.push((format!("blocks.{i}.fc2.weight"), &b.fc2_w));
            out.push((format!("blocks.{i}.fc2.bias"), &b.fc2_b));
        }
        out.push(("out.weight".into(), &self.out_w));
        out.push(("out.bias".into(), &self.out_b));
        out
    }

    /// Rewrites parameters in place. Shapes must be preserved.
    pub fn map_params(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("in.weight", &mut self.in_w);
        f("in.bias", &mut self.in_b);
        f("pos", &mut self.pos);
        f("time.weight", &mut self.time_w);
        f("time.bias", &mut self.time_b);
        f("cond.weight", &mut self.cond_w);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.mod.weight"), &mut b.mod_w);
            f(&format!("blocks.{i}.mod.bias"), &mut b.mod_b);
            f(&format!("blocks.{i}.mix"), &mut b.mix);
            f(&format!("blocks.{i}.fc1.weight"), &mut b.fc1_w);
            f(&format!("blocks.{i}.fc1.bias"), &mut b.fc1_b);
            f(&format!("blocks.{i}.fc2.weight"), &mut b.fc2_w);
            f(&format!("blocks.{i}.fc2.bias"), &mut b.fc2_b);
        }
        f("out.weight", &mut self.out_w);
        f("out.bias", &mut self.out_b);
    }

    pub fn param_checksum(&self) -> u64 {
        self.params()
            .iter()
            .fold(0u64, |acc, (_, t)| derive_seed(acc, t.checksum()))
    }

    /// Shared timestep/condition embedding, `[hidden_dim]`.
    fn embedding(&self, t: usize, cond: &Conditioning) -> Result<Vec<f64>> {
        let h = self.config.hidden_dim;
        if cond.embedding.shape() != [self.config.cond_dim] {
            return Err(Error::ShapeMismatch {
                left: cond.embedding.shape().to_vec(),
                right: vec![self.config.cond_dim],
            });
        }
        let feats = timestep_features(t, h);
        let mut e = matvec(&feats, self.time_w.data(), h);
        let ce = matvec(cond.embedding.data(), self.cond_w.data(), h);
        for ((v, &b), &c) in e.iter_mut().zip(self.time_b.data()).zip(&ce) {
            *v = silu(*v + b + c);
        }
        Ok(e)
    }

    /// Embeds a raw latent `[seq_len, latent_channels]` into the token space.
    pub fn embed_input(&self, x: &Tensor) -> Result<Tensor> {
        let [s, ch] = self.config.latent_shape();
        if x.shape() != [s, ch] {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![s, ch],
            });
        }
        let h = self.config.hidden_dim;
        let mut out = matmul(x.data(), s, ch, self.in_w.data(), h);
        for (row, prow) in out.chunks_exact_mut(h).zip(self.pos.data().chunks_exact(h)) {
            for ((v, &b), &p) in row.iter_mut().zip(self.in_b.data()).zip(prow) {
                *v += b + p;
            }
        }
        Tensor::new(vec![s, h], out)
    }

    fn run_block(&self, n: usize, x: &[f64], emb: &[f64]) -> Vec<f64> {
        let h = self.config.hidden_dim;
        let s = self.config.seq_len;
        let b = &self.blocks[n];

        let mut m = matvec(emb, b.mod_w.data(), h);
        for (v, &bias) in m.iter_mut().zip(b.mod_b.data()) {
            *v += bias;
        }
        let mut hid = x.to_vec();
        for row in hid.chunks_exact_mut(h) {
            for (v, &mv) in row.iter_mut().zip(&m) {
                *v += mv;
            }
        }

        let mixed = matmul(b.mix.data(), s, s, &layer_norm(&hid, h), h);
        for (v, &d) in hid.iter_mut().zip(&mixed) {
            *v += d;
        }

        let inner = MLP_RATIO * h;
        let mut a = matmul(&layer_norm(&hid, h), s, h, b.fc1_w.data(), inner);
        for row in a.chunks_exact_mut(inner) {
            for (v, &bias) in row.iter_mut().zip(b.fc1_b.data()) {
                *v = gelu(*v + bias);
            }
        }
        let y = matmul(&a, s, inner, b.fc2_w.data(), h);
        for (i, (v, &d)) in hid.iter_mut().zip(&y).enumerate() {
            *v += d + b.fc2_b.data()[i % h];
        }
        hid
    }

    fn project_out(&self, x: &[f64]) -> Result<Tensor> {
        let [s, ch] = self.config.latent_shape();
        let h = self.config.hidden_dim;
        let mut out = matmul(&layer_norm(x, h), s, h, self.out_w.data(), ch);
        for row in out.chunks_exact_mut(ch) {
            for (v, &b) in row.iter_mut().zip(self.out_b.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![s, ch], out)
    }

    /// Runs blocks `start_block..L` and the output projection.
    ///
    /// With `start_block == 0`, `x` is a raw latent and is embedded first.
    /// Otherwise `x` is the activation produced by block `start_block - 1`.
    /// `capture` may only name blocks that actually execute.
    pub fn forward(
        &self,
        x: &Tensor,
        t: usize,
        cond: &Conditioning,
        start_block: usize,
        capture: &[usize],
    ) -> Result<ForwardOutput> {
        let l = self.config.num_blocks;
        if start_block > l {
            return Err(Error::InvalidArgument(format!(
                "start_block {start_block} exceeds block count {l}"
            )));
        }
        if let Some(&bad) = capture.iter().find(|&&i| i < start_block || i >= l) {
            return Err(Error::InvalidArgument(format!(
                "cannot capture block {bad} when executing blocks {start_block}..{l}"
            )));
        }
        let mut act = if start_block == 0 {
            self.embed_input(x)?
        } else {
            let shape = self.config.activation_shape();
            if x.shape() != shape {
                return Err(Error::ShapeMismatch {
                    left: x.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            x.clone()
        };
        let emb = self.embedding(t, cond)?;
        let mut captured = BTreeMap::new();
        for n in start_block..l {
            let next = self.run_block(n, act.data(), &emb);
            act = Tensor::new(self.config.activation_shape().to_vec(), next)?;
            if capture.contains(&n) {
                captured.insert(n, act.clone());
            }
        }
        let eps = self.project_out(act.data())?;
        Ok(ForwardOutput { eps, captured })
    }

    /// Writes one `.mxt` file per parameter plus `manifest.json`.
    pub fn save_params(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, t) in self.params() {
            let file = format!("{name}.mxt");
            t.save(dir.join(&file))?;
            entries.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            entries,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load_params(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut loaded = BTreeMap::new();
        for e in &manifest.entries {
            let t = Tensor::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("parameter {} has wrong shape", e.name)));
            }
            loaded.insert(e.name.clone(), t);
        }
        let mut model = Self::new(manifest.config)?;
        let mut missing = None;
        model.map_params(|name, t| match loaded.remove(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(Error::Missing(format!("parameter {name}")));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Sinusoidal features of the timestep: half sines, half cosines.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Row-major `[m, k] x [k, n]`.
fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn matvec(v: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    matmul(v, 1, v.len(), w, n)
}

fn layer_norm(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}
