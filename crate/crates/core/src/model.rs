//! Conditional noise predictor `eps(z_t, c, t)`: an MLP over
//! `[z_t, time features, concept embedding, context embedding]`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::condition::{Concept, Condition};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{time_embedding, Linear, LowRank, Mlp, ParamTensor};
use crate::rng::normal;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub concept_dim: usize,
    pub context_dim: usize,
    pub n_classes: usize,
    pub n_contexts: usize,
    /// Total diffusion steps; time features are functions of `t / total_steps`.
    pub total_steps: usize,
}

impl ModelConfig {
    pub fn new(data_dim: usize, n_classes: usize, n_contexts: usize, total_steps: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![128, 128],
            time_dim: 32,
            concept_dim: 16,
            context_dim: 16,
            n_classes,
            n_contexts,
            total_steps,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.concept_dim + self.context_dim
    }
}

/// Which parameters an optimiser step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Base weights plus concept and context tables.
    Full,
    /// Low-rank adapters plus the subject embedding; everything else frozen.
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    mlp: Mlp,
    /// Rows: NULL, then CLASS 0..K.
    concept_table: ParamTensor,
    /// Rows: PLAIN, then CTX 0..n.
    context_table: ParamTensor,
    subject: Option<ParamTensor>,
    trained: bool,
    time_table: Vec<Vec<f64>>,
    pending: Option<Vec<Condition>>,
}

fn embedding<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> ParamTensor {
    let mut p = ParamTensor::zeros(&[rows, dim]);
    for v in p.values_mut() {
        *v = normal(rng);
    }
    p
}

fn time_table(config: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    (0..=config.total_steps)
        .map(|t| time_embedding(t, config.total_steps, config.time_dim))
        .collect()
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.data_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let time_table = time_table(&config)?;
        let mlp = Mlp::new(config.input_dim(), &config.hidden, config.data_dim, rng);
        let concept_table = embedding(config.n_classes + 1, config.concept_dim, rng);
        let context_table = embedding(config.n_contexts + 1, config.context_dim, rng);
        Ok(Self {
            config,
            mlp,
            concept_table,
            context_table,
            subject: None,
            trained: false,
            time_table,
            pending: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn has_subject(&self) -> bool {
        self.subject.is_some()
    }

    pub fn has_adapters(&self) -> bool {
        self.mlp.layers().iter().any(|l| l.lora.is_some())
    }

    /// Register the subject token with an embedding copied from `CLASS(k)`.
    pub fn add_subject_from_class(&mut self, k: usize) -> Result<()> {
        if k >= self.config.n_classes {
            return Err(Error::Range(format!("class {k} not in model")));
        }
        let dim = self.config.concept_dim;
        let row = self.concept_table.values()[(k + 1) * dim..(k + 2) * dim].to_vec();
        self.subject = Some(ParamTensor::from_values(&[1, dim], row)?);
        Ok(())
    }

    pub fn subject_embedding(&self) -> Option<&[f64]> {
        self.subject.as_ref().map(|p| p.values())
    }

    pub fn concept_embedding(&self, concept: Concept) -> Result<&[f64]> {
        let dim = self.config.concept_dim;
        match concept {
            Concept::Null => Ok(&self.concept_table.values()[..dim]),
            Concept::Class(k) if k < self.config.n_classes => {
                Ok(&self.concept_table.values()[(k + 1) * dim..(k + 2) * dim])
            }
            Concept::Class(k) => Err(Error::Range(format!("class {k} not in model"))),
            Concept::Subject => self
                .subject
                .as_ref()
                .map(|p| p.values())
                .ok_or_else(|| Error::State("SUBJECT used before a subject was registered".into())),
        }
    }

    fn context_row(&self, cond: Condition) -> Result<usize> {
        let i = cond.context.index();
        if i > self.config.n_contexts {
            return Err(Error::Range(format!("context {} not in model", cond.context)));
        }
        Ok(i)
    }

    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, rank: usize, scale: f64, rng: &mut R) {
        self.mlp.attach_low_rank(rank, scale, rng);
    }

    /// Assemble the network input for a batch of examples.
    pub fn build_input(&self, z: ArrayView2<f64>, ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        let c = &self.config;
        let n = z.nrows();
        if z.ncols() != c.data_dim || ts.len() != n || conds.len() != n {
            return Err(Error::Dimension(format!(
                "batch of {n} latents (dim {}) with {} timesteps and {} conditions",
                z.ncols(),
                ts.len(),
                conds.len()
            )));
        }
        let mut x = Array2::zeros((n, c.input_dim()));
        let (o_t, o_c, o_x) = (
            c.data_dim,
            c.data_dim + c.time_dim,
            c.data_dim + c.time_dim + c.concept_dim,
        );
        for i in 0..n {
            let t = ts[i];
            if t > c.total_steps {
                return Err(Error::Range(format!("timestep {t} beyond {}", c.total_steps)));
            }
            let mut row = x.row_mut(i);
            row.slice_mut(s![..o_t]).assign(&z.row(i));
            row.slice_mut(s![o_t..o_c])
                .assign(&ndarray::ArrayView1::from(&self.time_table[t]));
            row.slice_mut(s![o_c..o_x])
                .assign(&ndarray::ArrayView1::from(self.concept_embedding(conds[i].concept)?));
            let j = self.context_row(conds[i])?;
            let dim = c.context_dim;
            row.slice_mut(s![o_x..]).assign(&ndarray::ArrayView1::from(
                &self.context_table.values()[j * dim..(j + 1) * dim],
            ));
        }
        Ok(x)
    }

    /// Per-example timesteps and conditions, no gradient bookkeeping.
    pub fn predict(&self, z: ArrayView2<f64>, ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        let x = self.build_input(z, ts, conds)?;
        Ok(self.mlp.forward(x.view()))
    }

    pub fn predict_train(&mut self, z: ArrayView2<f64>, ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        let x = self.build_input(z, ts, conds)?;
        self.pending = Some(conds.to_vec());
        Ok(self.mlp.forward_train(x.view()))
    }

    /// Backpropagate `grad_out` (d loss / d prediction) into every parameter,
    /// including the embedding rows used by the recorded batch.
    pub fn backward(&mut self, grad_out: ArrayView2<f64>) -> Result<()> {
        let conds = self
            .pending
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let dx = self.mlp.backward(grad_out)?;
        let c = &self.config;
        let o_c = c.data_dim + c.time_dim;
        let o_x = o_c + c.concept_dim;
        let (cd, xd) = (c.concept_dim, c.context_dim);
        for (i, cond) in conds.iter().enumerate() {
            let row = dx.row(i);
            let g_concept = row.slice(s![o_c..o_x]);
            match cond.concept {
                Concept::Subject => {
                    let sub = self.subject.as_mut().expect("checked in build_input");
                    sub.grad_mut().iter_mut().zip(g_concept).for_each(|(g, d)| *g += d);
                }
                Concept::Null | Concept::Class(_) => {
                    let r = match cond.concept {
                        Concept::Class(k) => k + 1,
                        _ => 0,
                    };
                    let grad = &mut self.concept_table.grad_mut()[r * cd..(r + 1) * cd];
                    grad.iter_mut().zip(g_concept).for_each(|(g, d)| *g += d);
                }
            }
            let j = cond.context.index();
            let grad = &mut self.context_table.grad_mut()[j * xd..(j + 1) * xd];
            grad.iter_mut().zip(row.slice(s![o_x..])).for_each(|(g, d)| *g += d);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.mlp.zero_grad();
        self.concept_table.zero_grad();
        self.context_table.zero_grad();
        if let Some(s) = self.subject.as_mut() {
            s.zero_grad();
        }
    }

    /// Parameters in the fixed order the optimiser relies on.
    pub fn trainable_mut(&mut self, scope: TrainScope) -> Vec<&mut ParamTensor> {
        match scope {
            TrainScope::Full => {
                let mut v = self.mlp.base_params_mut();
                v.push(&mut self.concept_table);
                v.push(&mut self.context_table);
                v
            }
            TrainScope::Adapter => {
                let mut v = self.mlp.low_rank_params_mut();
                if let Some(s) = self.subject.as_mut() {
                    v.push(s);
                }
                v
            }
        }
    }

    pub fn all_params(&self) -> Vec<&ParamTensor> {
        let mut v = self.mlp.params();
        v.push(&self.concept_table);
        v.push(&self.context_table);
        if let Some(s) = &self.subject {
            v.push(s);
        }
        v
    }

    /// Same order as [`Self::all_params`].
    pub fn all_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.mlp.params_mut();
        v.push(&mut self.concept_table);
        v.push(&mut self.context_table);
        if let Some(s) = self.subject.as_mut() {
            v.push(s);
        }
        v
    }

    pub fn checksum(&self) -> u64 {
        self.all_params()
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.checksum())
    }

    pub fn is_finite(&self) -> bool {
        self.all_params()
            .iter()
            .all(|p| p.values().iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{CKPT_HEADER}");
        let _ = writeln!(s, "data_dim {}", c.data_dim);
        let hidden: Vec<String> = c.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "hidden {}", hidden.join(" "));
        let _ = writeln!(s, "time_dim {}", c.time_dim);
        let _ = writeln!(s, "concept_dim {}", c.concept_dim);
        let _ = writeln!(s, "context_dim {}", c.context_dim);
        let _ = writeln!(s, "n_classes {}", c.n_classes);
        let _ = writeln!(s, "n_contexts {}", c.n_contexts);
        let _ = writeln!(s, "total_steps {}", c.total_steps);
        let _ = writeln!(s, "trained {}", self.trained as u8);
        let mut put = |name: String, p: &ParamTensor| {
            let shape: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "param {name} {}", shape.join("x"));
            let vals: Vec<String> = p.values().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        };
        for (i, l) in self.mlp.layers().iter().enumerate() {
            put(format!("layer{i}.weight"), &l.weight);
            put(format!("layer{i}.bias"), &l.bias);
            if let Some(lr) = &l.lora {
                put(
                    format!("layer{i}.lora_down@{lr_scale:?}", lr_scale = lr.scale),
                    &lr.down,
                );
                put(format!("layer{i}.lora_up"), &lr.up);
            }
        }
        put("concepts".into(), &self.concept_table);
        put("contexts".into(), &self.context_table);
        if let Some(sub) = &self.subject {
            put("subject".into(), sub);
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let err = |m: String| Error::parse("<checkpoint>", m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CKPT_HEADER) {
            return Err(err("missing checkpoint header".into()));
        }
        let mut header = std::collections::HashMap::new();
        let mut params: Vec<(String, ParamTensor)> = Vec::new();
        let mut trained = false;
        while let Some(line) = lines.next() {
            let mut toks = line.split_whitespace();
            let Some(key) = toks.next() else { continue };
            if key == "param" {
                let name = toks.next().ok_or_else(|| err("param name".into()))?.to_string();
                let shape: Vec<usize> = toks
                    .next()
                    .ok_or_else(|| err("param shape".into()))?
                    .split('x')
                    .map(|d| d.parse().map_err(|_| err(format!("bad shape in {name}"))))
                    .collect::<Result<_>>()?;
                let vals: Vec<f64> = lines
                    .next()
                    .ok_or_else(|| err(format!("values for {name}")))?
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| err(format!("bad value in {name}"))))
                    .collect::<Result<_>>()?;
                params.push((name, ParamTensor::from_values(&shape, vals)?));
            } else if key == "trained" {
                trained = toks.next() == Some("1");
            } else {
                let vals: Vec<usize> = toks
                    .map(|v| v.parse().map_err(|_| err(format!("bad value for {key}"))))
                    .collect::<Result<_>>()?;
                header.insert(key.to_string(), vals);
            }
        }
        let one = |k: &str| -> Result<usize> {
            header
                .get(k)
                .and_then(|v| v.first().copied())
                .ok_or_else(|| err(format!("missing {k}")))
        };
        let config = ModelConfig {
            data_dim: one("data_dim")?,
            hidden: header
                .get("hidden")
                .cloned()
                .ok_or_else(|| err("missing hidden".into()))?,
            time_dim: one("time_dim")?,
            concept_dim: one("concept_dim")?,
            context_dim: one("context_dim")?,
            n_classes: one("n_classes")?,
            n_contexts: one("n_contexts")?,
            total_steps: one("total_steps")?,
        };
        let mut it = params.into_iter().peekable();
        let mut layers = Vec::new();
        for i in 0..config.hidden.len() + 1 {
            let mut take = |want: &str| -> Result<(String, ParamTensor)> {
                match it.next() {
                    Some((n, p)) if n.starts_with(want) => Ok((n, p)),
                    other => Err(err(format!("expected {want}, got {:?}", other.map(|o| o.0)))),
                }
            };
            let (_, w) = take(&format!("layer{i}.weight"))?;
            let (_, b) = take(&format!("layer{i}.bias"))?;
            let lora = if it
                .peek()
                .is_some_and(|(n, _)| n.starts_with(&format!("layer{i}.lora_down")))
            {
                let (name, down) = it.next().unwrap();
                let scale: f64 = name
                    .split('@')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("adapter scale".into()))?;
                let (_, up) = match it.next() {
                    Some((n, p)) if n == format!("layer{i}.lora_up") => (n, p),
                    _ => return Err(err("adapter up factor".into())),
                };
                Some(LowRank { down, up, scale })
            } else {
                None
            };
            layers.push(Linear::from_params(w, b, lora)?);
        }
        let mlp = Mlp::from_layers(layers)?;
        if mlp.input_dim() != config.input_dim() || mlp.output_dim() != config.data_dim {
            return Err(err("network shape does not match header".into()));
        }
        let concept_table = match it.next() {
            Some((n, p)) if n == "concepts" && p.shape() == [config.n_classes + 1, config.concept_dim] => p,
            _ => return Err(err("concept table".into())),
        };
        let context_table = match it.next() {
            Some((n, p)) if n == "contexts" && p.shape() == [config.n_contexts + 1, config.context_dim] => p,
            _ => return Err(err("context table".into())),
        };
        let subject = match it.next() {
            Some((n, p)) if n == "subject" && p.shape() == [1, config.concept_dim] => Some(p),
            None => None,
            Some((n, _)) => return Err(err(format!("unexpected param {n}"))),
        };
        Ok(Self {
            time_table: time_table(&config)?,
            config,
            mlp,
            concept_table,
            context_table,
            subject,
            trained,
            pending: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(path.display().to_string(), msg),
            other => other,
        })
    }
}

const CKPT_HEADER: &str = "anchorlab-checkpoint v1";

impl NoisePredictor for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_eps(&self, z: ArrayView2<f64>, t: usize, cond: Condition) -> Result<Array2<f64>> {
        let n = z.nrows();
        self.predict(z, &vec![t; n], &vec![cond; n])
    }

    fn is_trained(&self) -> bool {
        self.trained
    }
}
