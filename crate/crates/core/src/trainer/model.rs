use std::path::Path;

use crate::data::{read_tensor, write_tensor, StoredTensor, TensorData, TREE_FILE};
use crate::data::{read_text, write_text};
use crate::error::{HcwError, Result};
use crate::hcw::{
    hcw_forward_tape, reduce_activation, whiten_eval, Mode, RotationMatrix, StatsGradient,
    WhiteningState,
};
use crate::linalg::Matrix;
use crate::net::{backbone_forward, head_forward, Architecture, NamedTensor, NetworkParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tree::ConceptTree;

use super::config::TrainConfig;

pub const CONFIG_FILE: &str = "config.txt";
const MU_FILE: &str = "hcw.mu.hcwt";
const COV_FILE: &str = "hcw.cov.hcwt";
const W_FILE: &str = "hcw.w.hcwt";
const Q_FILE: &str = "hcw.q.hcwt";
const EVAL_CHUNK: usize = 32;

/// Backbone, whitening layer, rotation and head, plus the concept tree whose
/// concepts own the first latent axes.
#[derive(Debug, Clone, PartialEq)]
pub struct HcwModel {
    pub arch: Architecture,
    pub params: NetworkParams,
    pub whitening: WhiteningState,
    pub q: RotationMatrix,
    pub tree: ConceptTree,
    pub pool_window: usize,
}

/// Eval-mode outputs for a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Tensor,
    /// Reduced concept activations, `[n, d]`.
    pub reduced: Tensor,
}

impl HcwModel {
    pub fn init(
        arch: Architecture,
        tree: ConceptTree,
        ema_decay: f64,
        eps: f64,
        pool_window: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        arch.validate()?;
        tree.bind(arch.latent_dim())?;
        if tree.leaves().len() != arch.num_classes {
            return Err(HcwError::validation(format!(
                "tree has {} leaves but the head has {} outputs",
                tree.leaves().len(),
                arch.num_classes
            )));
        }
        if pool_window > arch.feature_size() {
            return Err(HcwError::validation(format!(
                "pool window {pool_window} exceeds the {0}x{0} feature map",
                arch.feature_size()
            )));
        }
        let d = arch.latent_dim();
        Ok(Self {
            params: NetworkParams::init(&arch, rng),
            whitening: WhiteningState::new(d, ema_decay, eps)?,
            q: RotationMatrix::identity(d),
            arch,
            tree,
            pool_window,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    /// Raw backbone features `[n, d, s, s]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (tape, out) = backbone_forward(&self.arch, &self.params, images)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode forward pass in fixed-size chunks.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let (n, _, _, _) = images.dims4()?;
        let d = self.latent_dim();
        let k = self.arch.num_classes;
        let mut logits = Vec::with_capacity(n * k);
        let mut reduced = Vec::with_capacity(n * d);
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let batch = images.gather(chunk);
            let (mut tape, z) = backbone_forward(&self.arch, &self.params, &batch)?;
            let (zhat, _) = hcw_forward_tape(
                &mut tape,
                z,
                &self.whitening,
                &self.q,
                Mode::Eval,
                StatsGradient::Stop,
            )?;
            let out = head_forward(&self.params, &mut tape, zhat)?;
            logits.extend_from_slice(tape.value(out).data());
            reduced
                .extend_from_slice(reduce_activation(tape.value(zhat), self.pool_window)?.data());
        }
        Ok(Inference {
            logits: Tensor::from_vec(&[n, k], logits)?,
            reduced: Tensor::from_vec(&[n, d], reduced)?,
        })
    }

    /// Spatial means of `W (z − μ)` under the running statistics, one row per image.
    pub fn whitened_means(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, _, _, _) = images.dims4()?;
        let all: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(n);
        for chunk in all.chunks(EVAL_CHUNK) {
            let z = self.features(&images.gather(chunk))?;
            let white = whiten_eval(&z, &self.whitening)?;
            let means = crate::hcw::spatial_mean(&white)?;
            let d = self.latent_dim();
            out.extend(means.data().chunks(d).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Writes parameters, whitening state, rotation, tree and `config`.
    pub fn save(&self, dir: &Path, config: &TrainConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HcwError::io(dir, e))?;
        for entry in &self.params.entries {
            write_f64(
                &dir.join(format!("{}.hcwt", entry.name)),
                entry.value.shape(),
                entry.value.data(),
            )?;
        }
        let d = self.latent_dim();
        write_f64(&dir.join(MU_FILE), &[d], &self.whitening.mu)?;
        write_f64(&dir.join(COV_FILE), &[d, d], self.whitening.cov.data())?;
        write_f64(&dir.join(W_FILE), &[d, d], self.whitening.w.data())?;
        write_f64(&dir.join(Q_FILE), &[d, d], self.q.matrix().data())?;
        write_text(&dir.join(TREE_FILE), &self.tree.to_text())?;
        let mut text = config.to_text();
        text.push_str(&format!(
            "in_channels = {}\nimage_size = {}\nnum_classes = {}\n",
            self.arch.in_channels, self.arch.image_size, self.arch.num_classes
        ));
        write_text(&dir.join(CONFIG_FILE), &text)
    }

    /// Reads a checkpoint written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<(Self, TrainConfig)> {
        let config_path = dir.join(CONFIG_FILE);
        let text = read_text(&config_path)?;
        let mut train_lines = String::new();
        let mut arch_values = [None; 3];
        for line in text.lines() {
            let key = line.split_once('=').map(|(k, _)| k.trim());
            let slot = match key {
                Some("in_channels") => Some(0),
                Some("image_size") => Some(1),
                Some("num_classes") => Some(2),
                _ => None,
            };
            match slot {
                Some(s) => {
                    let v = line.split_once('=').expect("checked").1.trim();
                    let parsed: usize = v.parse().map_err(|_| {
                        HcwError::format(&config_path, format!("bad architecture value {v:?}"))
                    })?;
                    arch_values[s] = Some(parsed);
                }
                None => {
                    train_lines.push_str(line);
                    train_lines.push('\n');
                }
            }
        }
        let config = TrainConfig::parse(&train_lines)?;
        let [Some(in_channels), Some(image_size), Some(num_classes)] = arch_values else {
            return Err(HcwError::format(&config_path, "missing architecture keys"));
        };
        let arch = Architecture::new(in_channels, image_size, config.latent_dim, num_classes);
        arch.validate()?;
        let tree = ConceptTree::parse(&read_text(&dir.join(TREE_FILE))?)?;

        let mut rng = SeededRng::new(0);
        let template = NetworkParams::init(&arch, &mut rng);
        let mut entries = Vec::with_capacity(template.len());
        for t in &template.entries {
            let path = dir.join(format!("{}.hcwt", t.name));
            let value = read_f64(&path, t.value.shape())?;
            entries.push(NamedTensor {
                name: t.name.clone(),
                value,
            });
        }
        let params = NetworkParams { entries };
        params.check(&arch)?;
        let d = arch.latent_dim();
        let mu = read_f64(&dir.join(MU_FILE), &[d])?.into_data();
        let cov = Matrix::new(d, d, read_f64(&dir.join(COV_FILE), &[d, d])?.into_data())?;
        let w = Matrix::new(d, d, read_f64(&dir.join(W_FILE), &[d, d])?.into_data())?;
        let q = RotationMatrix::new(Matrix::new(
            d,
            d,
            read_f64(&dir.join(Q_FILE), &[d, d])?.into_data(),
        )?)?;
        let mut whitening = WhiteningState::new(d, config.ema_decay, config.eps)?;
        whitening.mu = mu;
        whitening.cov = cov;
        whitening.w = w;
        tree.bind(d)?;
        let model = Self {
            arch,
            params,
            whitening,
            q,
            tree,
            pool_window: config.pool_window,
        };
        Ok((model, config))
    }
}

fn write_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let t = StoredTensor::new(dims.to_vec(), TensorData::F64(data.to_vec()))?;
    write_tensor(path, &t)
}

fn read_f64(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let stored = read_tensor(path)?;
    if stored.dims != shape {
        return Err(HcwError::format(
            path,
            format!("dims {:?} do not match the expected {shape:?}", stored.dims),
        ));
    }
    let (_, data) = stored.into_f64()?;
    Tensor::from_vec(shape, data)
}
