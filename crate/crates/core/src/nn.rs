//! Imitation-learned online policy.
//!
//! A small multilayer perceptron regresses offline-optimal `(P, rho)` from
//! the state `(B, r, h, w)`. Raw outputs are repaired at inference: power is
//! clipped to `[0, B_i]`, bits to `[0, min(g(h_i P_i), r_i)]`, and the bit
//! vector is then scaled uniformly into the rate region.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Action, SystemParams, SystemState};
use crate::rate_region::{max_feasible_scaling, RateRegionInstance};

const MODEL_MAGIC: &str = "ehmac-mlp";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// `(B_1..B_M, r_1..r_M, h_1..h_M, w_1..w_M)`
    pub input: Vec<f64>,
    /// `(P_1..P_M, rho_1..rho_M)`
    pub target: Vec<f64>,
    pub path_seed: u64,
    /// 1-based slot index.
    pub slot: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingDataset {
    pub num_users: usize,
    pub records: Vec<DatasetRecord>,
}

impl TrainingDataset {
    pub fn header(num_users: usize) -> Vec<String> {
        let mut cols = Vec::with_capacity(6 * num_users + 2);
        for name in ["B", "r", "h", "w", "P", "rho"] {
            cols.extend((1..=num_users).map(|i| format!("{name}_{i}")));
        }
        cols.push("path_seed".into());
        cols.push("slot".into());
        cols
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.num_users))?;
        for r in &self.records {
            let mut row: Vec<String> = r
                .input
                .iter()
                .chain(&r.target)
                .map(|v| format!("{v:?}"))
                .collect();
            row.push(r.path_seed.to_string());
            row.push(r.slot.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() < 8 || (header.len() - 2) % 6 != 0 {
            return Err(Error::Format(format!(
                "dataset header has {} columns",
                header.len()
            )));
        }
        let m = (header.len() - 2) / 6;
        let expected = Self::header(m);
        if header.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::Format("unexpected dataset header".into()));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let num = |k: usize| -> Result<f64> {
                row[k]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number in column {}", expected[k])))
            };
            let values = (0..6 * m).map(num).collect::<Result<Vec<f64>>>()?;
            let path_seed = row[6 * m]
                .parse()
                .map_err(|_| Error::Format("bad path_seed".into()))?;
            let slot = row[6 * m + 1]
                .parse()
                .map_err(|_| Error::Format("bad slot".into()))?;
            records.push(DatasetRecord {
                input: values[..4 * m].to_vec(),
                target: values[4 * m..].to_vec(),
                path_seed,
                slot,
            });
        }
        Ok(Self {
            num_users: m,
            records,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Dense layer, weights row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *slot = self.bias[o] + row.iter().zip(x).map(|(w, a)| w * a).sum::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
}

impl MlpModel {
    /// Randomly initialized network (He-uniform hidden layers, Glorot output).
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = if l == last {
                    (6.0 / (n_in + n_out) as f64).sqrt()
                } else {
                    (6.0 / n_in as f64).sqrt()
                };
                Layer {
                    inputs: n_in,
                    outputs: n_out,
                    weights: (0..n_in * n_out)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect(),
                    bias: vec![0.0; n_out],
                }
            })
            .collect();
        Self {
            layers,
            input_mean: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn normalize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(self.input_mean.iter().zip(&self.input_scale))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = Vec::new();
        self.normalize(x, &mut a);
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(&a, &mut z);
            if l + 1 < n {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Parameters flattened layer by layer as `(weights, bias)`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
    }

    /// Mean squared error over the batch and its gradient (flattened like
    /// [`MlpModel::params_flat`]).
    pub fn loss_and_gradient(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_params()];
        let mut ws = Workspace::new(self);
        let loss = self.accumulate_batch(inputs, targets, &mut grad, &mut ws);
        (loss, grad)
    }

    pub fn mse(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> f64 {
        if inputs.is_empty() {
            return 0.0;
        }
        let n_out = self.output_dim() as f64;
        let total: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(x, t)| {
                self.forward(x)
                    .iter()
                    .zip(t.iter())
                    .map(|(y, t)| (y - t) * (y - t))
                    .sum::<f64>()
            })
            .sum();
        total / (inputs.len() as f64 * n_out)
    }

    fn accumulate_batch(
        &self,
        inputs: &[&[f64]],
        targets: &[&[f64]],
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        let n_layers = self.layers.len();
        let n_out = self.output_dim();
        let scale = 2.0 / (inputs.len() * n_out) as f64;
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            let mut norm = std::mem::take(&mut ws.acts[0]);
            self.normalize(x, &mut norm);
            ws.acts[0] = norm;
            for l in 0..n_layers {
                let (head, tail) = ws.acts.split_at_mut(l + 1);
                let out = &mut tail[0];
                self.layers[l].forward(&head[l], out);
                if l + 1 < n_layers {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            let y = &ws.acts[n_layers];
            let delta = &mut ws.deltas[n_layers];
            for o in 0..n_out {
                let e = y[o] - t[o];
                loss += e * e;
                delta[o] = scale * e;
            }
            let mut offset = grad.len();
            for l in (0..n_layers).rev() {
                let layer = &self.layers[l];
                offset -= layer.weights.len() + layer.bias.len();
                let (gw, gb) = grad[offset..offset + layer.weights.len() + layer.bias.len()]
                    .split_at_mut(layer.weights.len());
                let (dlo, dhi) = ws.deltas.split_at_mut(l + 1);
                let delta = &dhi[0];
                let a_in = &ws.acts[l];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
                if l > 0 {
                    let back = &mut dlo[l];
                    back.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..layer.outputs {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += d * w;
                        }
                    }
                    // ReLU derivative on the hidden activation
                    for (b, a) in back.iter_mut().zip(a_in) {
                        if *a <= 0.0 {
                            *b = 0.0;
                        }
                    }
                }
            }
        }
        loss / (inputs.len() * n_out) as f64
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}")?;
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        writeln!(out, "sizes {}", sizes.join(" "))?;
        writeln!(out, "mean {}", join_f64(&self.input_mean))?;
        writeln!(out, "scale {}", join_f64(&self.input_scale))?;
        for (l, layer) in self.layers.iter().enumerate() {
            writeln!(out, "layer {l}")?;
            for row in layer.weights.chunks(layer.inputs) {
                writeln!(out, "w {}", join_f64(row))?;
            }
            writeln!(out, "b {}", join_f64(&layer.bias))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("model file ends before {what}")))??;
            let fields: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if fields.first().map(String::as_str) != Some(what) {
                return Err(Error::Format(format!("expected `{what}`, found `{line}`")));
            }
            Ok(fields[1..].to_vec())
        };
        let head = next(MODEL_MAGIC)?;
        if head != [MODEL_VERSION.to_string()] {
            return Err(Error::Format(format!("unsupported model version {head:?}")));
        }
        let sizes = next("sizes")?
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad size `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Format(format!("bad layer sizes {sizes:?}")));
        }
        let input_mean = parse_f64s(&next("mean")?, sizes[0])?;
        let input_scale = parse_f64s(&next("scale")?, sizes[0])?;
        if input_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format("normalization scale must be positive".into()));
        }
        let mut layers = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let tag = next("layer")?;
            if tag != [l.to_string()] {
                return Err(Error::Format(format!("expected layer {l}, found {tag:?}")));
            }
            let (n_in, n_out) = (w[0], w[1]);
            let mut weights = Vec::with_capacity(n_in * n_out);
            for _ in 0..n_out {
                weights.extend(parse_f64s(&next("w")?, n_in)?);
            }
            let bias = parse_f64s(&next("b")?, n_out)?;
            layers.push(Layer {
                inputs: n_in,
                outputs: n_out,
                weights,
                bias,
            });
        }
        let model = Self {
            layers,
            input_mean,
            input_scale,
        };
        if model.params_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite model parameter".into()));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_f64s(fields: &[String], n: usize) -> Result<Vec<f64>> {
    if fields.len() != n {
        return Err(Error::Format(format!(
            "expected {n} values, found {}",
            fields.len()
        )));
    }
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number `{s}`")))
        })
        .collect()
}

struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(model: &MlpModel) -> Self {
        let sizes = model.sizes();
        Self {
            acts: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            deltas: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 200,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub train_records: usize,
    pub validation_records: usize,
}

/// Splits record indices into (train, validation) by path seed so that no
/// path contributes to both sides. With a single path the validation set is
/// the training set.
pub fn split_by_path(ds: &TrainingDataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut seeds: Vec<u64> = ds.records.iter().map(|r| r.path_seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() < 2 {
        let all: Vec<usize> = (0..ds.records.len()).collect();
        return (all.clone(), all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    seeds.shuffle(&mut rng);
    let n_val = ((seeds.len() as f64 * fraction).round() as usize).clamp(1, seeds.len() - 1);
    let val: std::collections::HashSet<u64> = seeds[..n_val].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (k, r) in ds.records.iter().enumerate() {
        if val.contains(&r.path_seed) {
            valid.push(k);
        } else {
            train.push(k);
        }
    }
    (train, valid)
}

const SPLIT_SALT: u64 = 0x5EED_5A17;

/// Minibatch SGD with momentum on the mean squared error; returns the
/// parameters with the best validation loss.
pub fn train(ds: &TrainingDataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    if ds.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_in = ds.records[0].input.len();
    let n_out = ds.records[0].target.len();
    if let Some(bad) = ds
        .records
        .iter()
        .find(|r| r.input.len() != n_in || r.target.len() != n_out)
    {
        return Err(Error::Dimension {
            expected: n_in,
            got: bad.input.len(),
        });
    }
    let (train_idx, val_idx) = split_by_path(ds, cfg.validation_fraction, cfg.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = vec![n_in];
    sizes.extend(&cfg.hidden);
    sizes.push(n_out);
    let mut model = MlpModel::new(&sizes, &mut rng);

    // input normalization from the training split
    let n_train = train_idx.len() as f64;
    for j in 0..n_in {
        let mean = train_idx
            .iter()
            .map(|&k| ds.records[k].input[j])
            .sum::<f64>()
            / n_train;
        let var = train_idx
            .iter()
            .map(|&k| (ds.records[k].input[j] - mean).powi(2))
            .sum::<f64>()
            / n_train;
        model.input_mean[j] = mean;
        model.input_scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }

    let val_x: Vec<&[f64]> = val_idx
        .iter()
        .map(|&k| ds.records[k].input.as_slice())
        .collect();
    let val_t: Vec<&[f64]> = val_idx
        .iter()
        .map(|&k| ds.records[k].target.as_slice())
        .collect();

    let mut report = TrainReport {
        best_validation: f64::INFINITY,
        train_records: train_idx.len(),
        validation_records: val_idx.len(),
        ..Default::default()
    };
    let mut params = model.params_flat();
    let mut velocity = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let mut best = model.clone();
    let mut ws = Workspace::new(&model);
    let mut order = train_idx.clone();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let xs: Vec<&[f64]> = chunk
                .iter()
                .map(|&k| ds.records[k].input.as_slice())
                .collect();
            let ts: Vec<&[f64]> = chunk
                .iter()
                .map(|&k| ds.records[k].target.as_slice())
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.accumulate_batch(&xs, &ts, &mut grad, &mut ws);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!(
                        "batch loss {loss} (lr {}, batch {batch})",
                        cfg.learning_rate
                    ),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
            model.set_params_flat(&params);
        }
        let train_loss = epoch_loss / n_train;
        let val_loss = model.mse(&val_x, &val_t);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        report.train_loss.push(train_loss);
        report.validation_loss.push(val_loss);
        if val_loss < report.best_validation {
            report.best_validation = val_loss;
            report.best_epoch = epoch;
            best = model.clone();
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((best, report))
}

/// Maps a raw `(P, rho)` proposal into the feasible set at `state`.
pub fn repair_action(
    state: &SystemState,
    raw_power: &[f64],
    raw_rho: &[f64],
    params: &SystemParams,
) -> Action {
    let m = state.num_users();
    let power: Vec<f64> = (0..m)
        .map(|i| raw_power[i].max(0.0).min(state.battery[i]))
        .collect();
    let mut rho: Vec<f64> = (0..m)
        .map(|i| {
            let cap = params
                .rate_fn
                .value(state.channel[i] * power[i])
                .min(state.remaining[i]);
            raw_rho[i].max(0.0).min(cap)
        })
        .collect();
    let inst = RateRegionInstance::new(&state.channel, &power, params.rate_fn);
    let alpha = max_feasible_scaling(&inst, &rho).expect("dimensions match");
    if alpha < 1.0 {
        rho.iter_mut().for_each(|r| *r *= alpha);
    }
    Action { power, rho }
}

pub fn nn_act(state: &SystemState, model: &MlpModel, params: &SystemParams) -> Action {
    let m = state.num_users();
    let raw = model.forward(&state.features());
    repair_action(state, &raw[..m], &raw[m..2 * m], params)
}
