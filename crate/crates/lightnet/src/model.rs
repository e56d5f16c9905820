//! End-to-end models: input embedding, Toeplitz positional encoding, a stack
//! of LightNet layers, and a task head (per-position logits for language
//! modelling, mean-pooled logits for classification).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lna::{glu_hidden_width, lightnet_layer, LayerParams, LayerVars};
use crate::posenc::{GridShape, LrpeConfig, TpeParams};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Everything needed to build a model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token vocabulary (lookup embedding) or input channel count
    /// (continuous projection), depending on `continuous`.
    pub vocab: usize,
    pub continuous: bool,
    /// Head output width: vocabulary for LM, class count for classification.
    pub out_dim: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// TPE modes per dimension (the SSM hidden width e).
    pub tpe_modes: usize,
    /// Grid extents the flattened sequence represents; `[seq_len]` for text.
    pub grid: Vec<usize>,
    pub causal: bool,
    pub lrpe: bool,
    pub tpe: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.out_dim == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument {
                op: "ModelConfig",
                msg: "all extents must be positive".into(),
            });
        }
        if self.d % self.heads != 0 {
            return Err(Error::InvalidArgument {
                op: "ModelConfig",
                msg: format!("d = {} must be divisible by heads = {}", self.d, self.heads),
            });
        }
        if self.grid.is_empty() || self.grid.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument {
                op: "ModelConfig",
                msg: format!("grid {:?} must be non-empty and positive", self.grid),
            });
        }
        if self.lrpe {
            let hw = self.d / self.heads;
            if hw % self.grid.len() != 0 {
                return Err(Error::InvalidArgument {
                    op: "ModelConfig",
                    msg: format!(
                        "head width {hw} must be divisible by the {} grid dimensions for lrpe",
                        self.grid.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Low-rank gate rank: d/4, at least 1.
    pub fn gate_rank(&self) -> usize {
        (self.d / 4).max(1)
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.grid.iter().product()
    }

    /// Closed-form parameter count (also documented in the README):
    ///   embed: vocab*d (+ d bias when continuous)
    ///   tpe:   2*k*d*e
    ///   layer: 3d^2 + 2dr + d + 2df + fd + 2d
    ///   head:  d*out + out
    pub fn param_count(&self) -> usize {
        let (d, r) = (self.d, self.gate_rank());
        let f = glu_hidden_width(d, self.heads);
        let mut total = self.vocab * d + if self.continuous { d } else { 0 };
        if self.tpe {
            total += 2 * self.grid.len() * d * self.tpe_modes;
        }
        total += self.layers * (3 * d * d + 2 * d * r + d + 2 * d * f + f * d + 2 * d);
        total += d * self.out_dim + self.out_dim;
        total
    }

    /// Compare field by field, reporting the first difference.
    pub fn check_matches(&self, other: &ModelConfig) -> Result<()> {
        macro_rules! field {
            ($name:ident) => {
                if self.$name != other.$name {
                    return Err(Error::ConfigMismatch {
                        field: stringify!($name),
                        expected: format!("{:?}", self.$name),
                        actual: format!("{:?}", other.$name),
                    });
                }
            };
        }
        field!(vocab);
        field!(continuous);
        field!(out_dim);
        field!(d);
        field!(layers);
        field!(heads);
        field!(tpe_modes);
        field!(grid);
        field!(causal);
        field!(lrpe);
        field!(tpe);
        field!(seed);
        Ok(())
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Tensor<f64>,
    pub embed_bias: Option<Tensor<f64>>,
    pub tpe: Option<TpeParams<f64>>,
    pub layers: Vec<LayerParams<f64>>,
    pub head_w: Tensor<f64>,
    pub head_b: Tensor<f64>,
    pub grid: GridShape,
    pub lrpe: Option<LrpeConfig>,
}

#[derive(Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub embed_bias: Option<Var>,
    pub tpe: Option<(Var, Var)>, // (raw, gamma)
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl Model {
    /// Deterministic initialization from the config seed. Residual-branch
    /// output projections start at zero, so every layer is the identity map.
    pub fn build(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let d = cfg.d;
        let sd = 1.0 / (d as f64).sqrt();
        let embed = rng.normal(&[cfg.vocab, d], 0.0, sd);
        let embed_bias = cfg.continuous.then(|| Tensor::zeros(&[d]));
        let grid = GridShape::new(&cfg.grid)?;
        let tpe = cfg
            .tpe
            .then(|| TpeParams::init(grid.k(), d, cfg.tpe_modes, &mut rng));
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams::init_identity(d, cfg.heads, cfg.gate_rank(), &mut rng)?);
        }
        let head_w = rng.normal(&[d, cfg.out_dim], 0.0, sd);
        let head_b = Tensor::zeros(&[cfg.out_dim]);
        let lrpe = if cfg.lrpe {
            Some(LrpeConfig::new(cfg.head_width(), grid.k())?)
        } else {
            None
        };
        Ok(Model { cfg, embed, embed_bias, tpe, layers, head_w, head_b, grid, lrpe })
    }

    /// Canonical parameter order shared by the optimizer and checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed.weight".to_string()];
        if self.embed_bias.is_some() {
            names.push("embed.bias".into());
        }
        if self.tpe.is_some() {
            names.push("tpe.raw".into());
            names.push("tpe.gamma".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for field in ["lna.w_q", "lna.w_k", "lna.w_v", "lna.w_u1", "lna.w_u2", "lna.norm_scale"] {
                names.push(format!("layers.{i}.{field}"));
            }
            if layer.lna.w_decay.is_some() {
                names.push(format!("layers.{i}.lna.w_decay"));
            }
            for field in ["glu.w_a", "glu.w_b", "glu.w_out", "prenorm_attn", "prenorm_glu"] {
                names.push(format!("layers.{i}.{field}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<f64>> {
        let mut t: Vec<&Tensor<f64>> = vec![&self.embed];
        if let Some(b) = &self.embed_bias {
            t.push(b);
        }
        if let Some(tpe) = &self.tpe {
            t.push(tpe.raw());
            t.push(tpe.gamma());
        }
        for layer in &self.layers {
            t.push(&layer.lna.w_q);
            t.push(&layer.lna.w_k);
            t.push(&layer.lna.w_v);
            t.push(&layer.lna.w_u1);
            t.push(&layer.lna.w_u2);
            t.push(&layer.lna.norm_scale);
            if let Some(w) = &layer.lna.w_decay {
                t.push(w);
            }
            t.push(&layer.w_glu_a);
            t.push(&layer.w_glu_b);
            t.push(&layer.w_glu_out);
            t.push(&layer.prenorm_attn);
            t.push(&layer.prenorm_glu);
        }
        t.push(&self.head_w);
        t.push(&self.head_b);
        t
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut t: Vec<&mut Tensor<f64>> = vec![&mut self.embed];
        if let Some(b) = &mut self.embed_bias {
            t.push(b);
        }
        if let Some(tpe) = &mut self.tpe {
            let (raw, gamma) = tpe.parts_mut();
            t.push(raw);
            t.push(gamma);
        }
        for layer in &mut self.layers {
            t.push(&mut layer.lna.w_q);
            t.push(&mut layer.lna.w_k);
            t.push(&mut layer.lna.w_v);
            t.push(&mut layer.lna.w_u1);
            t.push(&mut layer.lna.w_u2);
            t.push(&mut layer.lna.norm_scale);
            if let Some(w) = &mut layer.lna.w_decay {
                t.push(w);
            }
            t.push(&mut layer.w_glu_a);
            t.push(&mut layer.w_glu_b);
            t.push(&mut layer.w_glu_out);
            t.push(&mut layer.prenorm_attn);
            t.push(&mut layer.prenorm_glu);
        }
        t.push(&mut self.head_w);
        t.push(&mut self.head_b);
        t
    }

    /// Insert all parameters as tape inputs, in canonical order. `vars_out`
    /// receives the flat var list aligned with [`param_names`](Self::param_names).
    pub fn insert(&self, tape: &mut Tape<f64>, vars_out: &mut Vec<Var>) -> ModelVars {
        for t in self.param_tensors() {
            vars_out.push(tape.input(t.clone()));
        }
        self.assemble(vars_out)
    }

    /// Insert parameters but substitute `var` for the parameter at `index`
    /// in canonical order (used by the gradient checker).
    pub fn insert_overriding(
        &self,
        tape: &mut Tape<f64>,
        index: usize,
        var: Var,
    ) -> ModelVars {
        let mut vars = Vec::new();
        for (i, t) in self.param_tensors().into_iter().enumerate() {
            if i == index {
                vars.push(var);
            } else {
                vars.push(tape.constant(t.clone()));
            }
        }
        self.assemble(&vars)
    }

    fn assemble(&self, vars: &[Var]) -> ModelVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var list length matches param order");
        let embed = next();
        let embed_bias = self.embed_bias.is_some().then(&mut next);
        let tpe = self.tpe.is_some().then(|| (next(), next()));
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lna = crate::lna::LnaVars {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_u1: next(),
                w_u2: next(),
                norm_scale: next(),
                w_decay: layer.lna.w_decay.is_some().then(&mut next),
                heads: layer.lna.heads,
            };
            layers.push(LayerVars {
                lna,
                w_glu_a: next(),
                w_glu_b: next(),
                w_glu_out: next(),
                prenorm_attn: next(),
                prenorm_glu: next(),
            });
        }
        ModelVars { embed, embed_bias, tpe, layers, head_w: next(), head_b: next() }
    }

    /// Positional encoding + layer stack over an embedded sequence.
    pub fn trunk(&self, tape: &mut Tape<f64>, vars: &ModelVars, mut h: Var) -> Result<Var> {
        if let Some((raw, gamma)) = vars.tpe {
            h = tape.tpe_apply(h, raw, gamma, &self.grid)?;
        }
        let lrpe_ctx = self.lrpe.as_ref().map(|cfg| (cfg, &self.grid));
        for layer in &vars.layers {
            h = lightnet_layer(tape, layer, h, self.cfg.causal, lrpe_ctx)?;
        }
        Ok(h)
    }

    /// Token path: embedding lookup, trunk, per-position logits `n x out_dim`.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<f64>,
        vars: &ModelVars,
        tokens: &[usize],
    ) -> Result<Var> {
        if tokens.len() != self.cfg.seq_len() {
            return Err(Error::InvalidArgument {
                op: "forward_tokens",
                msg: format!("expected {} tokens, got {}", self.cfg.seq_len(), tokens.len()),
            });
        }
        let h = tape.gather_rows(vars.embed, tokens)?;
        let h = self.trunk(tape, vars, h)?;
        let logits = tape.matmul(h, vars.head_w)?;
        tape.add(logits, vars.head_b)
    }

    /// Continuous path: linear input projection, trunk, mean-pooled logits
    /// of shape `1 x out_dim`.
    pub fn forward_pooled(
        &self,
        tape: &mut Tape<f64>,
        vars: &ModelVars,
        x: &Tensor<f64>,
    ) -> Result<Var> {
        if x.rank() != 2 || x.shape()[0] != self.cfg.seq_len() || x.shape()[1] != self.cfg.vocab {
            return Err(Error::InvalidArgument {
                op: "forward_pooled",
                msg: format!(
                    "expected [{}, {}] input, got {:?}",
                    self.cfg.seq_len(),
                    self.cfg.vocab,
                    x.shape()
                ),
            });
        }
        let xv = tape.constant(x.clone());
        let mut h = tape.matmul(xv, vars.embed)?;
        if let Some(b) = vars.embed_bias {
            h = tape.add(h, b)?;
        }
        let h = self.trunk(tape, vars, h)?;
        let pooled = tape.mean_rows(h)?;
        let logits = tape.matmul(pooled, vars.head_w)?;
        tape.add(logits, vars.head_b)
    }
}
