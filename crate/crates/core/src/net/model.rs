use crate::error::{HcwError, Result};
use crate::net::kernels::KERNEL;
use crate::net::tape::{NodeId, TapeCache};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Number of 2×2-pooled convolution blocks in the backbone.
pub const BLOCKS: usize = 3;
const BLOCK_POOL: usize = 2;

/// Static shape of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each convolution block; the last one is the latent dimension.
    pub widths: [usize; BLOCKS],
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(
        in_channels: usize,
        image_size: usize,
        latent_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            in_channels,
            image_size,
            widths: [16, 32, latent_dim],
            num_classes,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.widths[BLOCKS - 1]
    }

    /// Side length of the backbone's output feature maps. The last block's
    /// pooling happens after whitening, in the head.
    pub fn feature_size(&self) -> usize {
        self.image_size / BLOCK_POOL.pow(BLOCKS as u32 - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.widths.contains(&0) {
            return Err(HcwError::validation(format!(
                "degenerate architecture {self:?}"
            )));
        }
        if self.image_size == 0
            || !self
                .image_size
                .is_multiple_of(BLOCK_POOL.pow(BLOCKS as u32))
        {
            return Err(HcwError::validation(format!(
                "image size {} must be a positive multiple of {}",
                self.image_size,
                BLOCK_POOL.pow(BLOCKS as u32)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Trainable tensors: backbone convolutions (`conv*`) then the linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub entries: Vec<NamedTensor>,
}

fn head_weight() -> usize {
    2 * BLOCKS
}

impl NetworkParams {
    /// Kaiming-uniform kernels (fan-in), zero biases.
    pub fn init(arch: &Architecture, rng: &mut SeededRng) -> Self {
        let mut entries = Vec::with_capacity(2 * BLOCKS + 2);
        let mut cin = arch.in_channels;
        for (b, &cout) in arch.widths.iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..cout * fan_in)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            entries.push(NamedTensor {
                name: format!("conv{}.weight", b + 1),
                value: Tensor::from_vec(&[cout, cin, KERNEL, KERNEL], w).expect("sized"),
            });
            entries.push(NamedTensor {
                name: format!("conv{}.bias", b + 1),
                value: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let d = arch.latent_dim();
        let bound = (3.0 / d as f64).sqrt();
        let w: Vec<f64> = (0..arch.num_classes * d)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        entries.push(NamedTensor {
            name: "head.weight".into(),
            value: Tensor::from_vec(&[arch.num_classes, d], w).expect("sized"),
        });
        entries.push(NamedTensor {
            name: "head.bias".into(),
            value: Tensor::zeros(&[arch.num_classes]),
        });
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| e.value.shape().to_vec())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Checks names and shapes against an architecture (used after loading).
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let mut rng = SeededRng::new(0);
        let reference = Self::init(arch, &mut rng);
        if reference.entries.len() != self.entries.len() {
            return Err(HcwError::validation(format!(
                "expected {} parameter tensors, found {}",
                reference.entries.len(),
                self.entries.len()
            )));
        }
        for (want, got) in reference.entries.iter().zip(&self.entries) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(HcwError::validation(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Runs the convolutional backbone, recording onto a fresh tape. The first
/// blocks are conv → ReLU → pool; the last block stops after its convolution
/// so the whitening layer sits where a normalization layer would.
pub fn backbone_forward(
    arch: &Architecture,
    params: &NetworkParams,
    images: &Tensor,
) -> Result<(TapeCache, NodeId)> {
    let (_, c, h, w) = images.dims4()?;
    if c != arch.in_channels || h != arch.image_size || w != arch.image_size {
        return Err(HcwError::validation(format!(
            "images are {c}x{h}x{w}, network expects {}x{}x{}",
            arch.in_channels, arch.image_size, arch.image_size
        )));
    }
    if params.len() != 2 * BLOCKS + 2 {
        return Err(HcwError::validation(
            "parameter list does not match the network",
        ));
    }
    let mut tape = TapeCache::new(params.shapes());
    let mut x = tape.input(images.clone());
    for b in 0..BLOCKS {
        let (wi, bi) = (2 * b, 2 * b + 1);
        x = tape.conv3x3(
            x,
            wi,
            &params.entries[wi].value,
            bi,
            &params.entries[bi].value,
        )?;
        if b + 1 < BLOCKS {
            x = tape.relu(x);
            x = tape.max_pool(x, BLOCK_POOL)?;
        }
    }
    Ok((tape, x))
}

/// Rest of the last block (ReLU, pool) then global average pool and the
/// linear classifier, applied to whitened features.
pub fn head_forward(
    params: &NetworkParams,
    cache: &mut TapeCache,
    whitened: NodeId,
) -> Result<NodeId> {
    let wi = head_weight();
    let d = params.entries[wi].value.shape()[1];
    let (_, c, _, _) = cache.value(whitened).dims4()?;
    if c != d {
        return Err(HcwError::validation(format!(
            "head expects {d} channels, got {c}"
        )));
    }
    let act = cache.relu(whitened);
    let pooled = cache.max_pool(act, BLOCK_POOL)?;
    let pooled = cache.spatial_mean(pooled)?;
    cache.linear(
        pooled,
        wi,
        &params.entries[wi].value,
        wi + 1,
        &params.entries[wi + 1].value,
    )
}
