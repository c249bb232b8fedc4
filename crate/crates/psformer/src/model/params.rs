use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, SharingMode};
use crate::element::Element;

/// The seven placements a shared block can occupy inside one encoder: the
/// Q/K/V projections of both attention stages and the final multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Q1,
    K1,
    V1,
    Q2,
    K2,
    V2,
    Final,
}

impl Slot {
    pub const ALL: [Slot; 7] = [
        Slot::Q1,
        Slot::K1,
        Slot::V1,
        Slot::Q2,
        Slot::K2,
        Slot::V2,
        Slot::Final,
    ];

    pub fn index(self) -> usize {
        match self {
            Slot::Q1 => 0,
            Slot::K1 => 1,
            Slot::V1 => 2,
            Slot::Q2 => 3,
            Slot::K2 => 4,
            Slot::V2 => 5,
            Slot::Final => 6,
        }
    }
}

pub const SLOTS_PER_ENCODER: usize = 7;

/// Number of distinct blocks a sharing mode allocates.
pub fn block_count(mode: SharingMode, n_encoders: usize) -> usize {
    match mode {
        SharingMode::InEncoder => n_encoders,
        SharingMode::CrossEncoders => SLOTS_PER_ENCODER,
        SharingMode::All => 1,
        SharingMode::None => SLOTS_PER_ENCODER * n_encoders,
    }
}

/// Map a placement to its block index.
pub fn placement(mode: SharingMode, encoder: usize, slot: Slot) -> usize {
    match mode {
        SharingMode::InEncoder => encoder,
        SharingMode::CrossEncoders => slot.index(),
        SharingMode::All => 0,
        SharingMode::None => encoder * SLOTS_PER_ENCODER + slot.index(),
    }
}

/// Three dense layers on the segment axis: weights are `N x N`, biases length N.
#[derive(Debug, Clone, PartialEq)]
pub struct PsBlock<E: Element> {
    pub w1: Vec<E>,
    pub b1: Vec<E>,
    pub w2: Vec<E>,
    pub b2: Vec<E>,
    pub w3: Vec<E>,
    pub b3: Vec<E>,
}

impl<E: Element> PsBlock<E> {
    pub fn zeros(n: usize) -> Self {
        PsBlock {
            w1: vec![E::zero(); n * n],
            b1: vec![E::zero(); n],
            w2: vec![E::zero(); n * n],
            b2: vec![E::zero(); n],
            w3: vec![E::zero(); n * n],
            b3: vec![E::zero(); n],
        }
    }

    pub fn param_count(n: usize) -> usize {
        3 * (n * n + n)
    }

    /// Identity configuration: the GeLU branch is zeroed and W3 passes the
    /// residual through, so the block maps x to x.
    pub fn identity(n: usize) -> Self {
        let mut block = Self::zeros(n);
        for i in 0..n {
            block.w3[i * n + i] = E::one();
        }
        block
    }
}

/// Full trainable state: shared blocks plus the forecast head.
#[derive(Debug, Clone, PartialEq)]
pub struct PsformerParams<E: Element> {
    pub config: ModelConfig,
    pub blocks: Vec<PsBlock<E>>,
    /// `L x F` linear head applied per channel.
    pub head_w: Vec<E>,
    pub head_b: Vec<E>,
    pub seed: u64,
}

/// Parameter totals, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub encoder: usize,
    pub head: usize,
    pub per_block: usize,
    pub distinct_blocks: usize,
}

impl<E: Element> PsformerParams<E> {
    /// Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let n = config.segments;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block_bound = 1.0 / (n as f64).sqrt();
        let block_dist = Uniform::new_inclusive(-block_bound, block_bound);
        let n_blocks = block_count(config.sharing, config.n_encoders);

        let sample = |dist: &Uniform<f64>, len: usize, rng: &mut ChaCha8Rng| -> Vec<E> {
            (0..len).map(|_| E::from_f64(dist.sample(rng))).collect()
        };

        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(PsBlock {
                w1: sample(&block_dist, n * n, &mut rng),
                b1: vec![E::zero(); n],
                w2: sample(&block_dist, n * n, &mut rng),
                b2: vec![E::zero(); n],
                w3: sample(&block_dist, n * n, &mut rng),
                b3: vec![E::zero(); n],
            });
        }

        let head_bound = 1.0 / (config.lookback as f64).sqrt();
        let head_dist = Uniform::new_inclusive(-head_bound, head_bound);
        let head_w = sample(&head_dist, config.lookback * config.horizon, &mut rng);
        let head_b = vec![E::zero(); config.horizon];

        Ok(PsformerParams {
            config,
            blocks,
            head_w,
            head_b,
            seed,
        })
    }

    /// Block index serving `slot` of `encoder` under the configured sharing mode.
    pub fn block_for(&self, encoder: usize, slot: Slot) -> usize {
        placement(self.config.sharing, encoder, slot)
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let per_block = PsBlock::<E>::param_count(self.config.segments);
        let encoder = self.blocks.len() * per_block;
        let head = self.head_w.len() + self.head_b.len();
        ParamCounts {
            total: encoder + head,
            encoder,
            head,
            per_block,
            distinct_blocks: self.blocks.len(),
        }
    }

    /// Flat list of the parameter tensors, in a fixed order shared with
    /// [`Self::tensors_mut`] and [`Self::tensor_names`].
    pub fn tensors(&self) -> Vec<&Vec<E>> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 2);
        for b in &self.blocks {
            out.extend([&b.w1, &b.b1, &b.w2, &b.b2, &b.w3, &b.b3]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<E>> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 2);
        for b in &mut self.blocks {
            out.extend([
                &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2, &mut b.w3, &mut b.b3,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 2);
        for i in 0..self.blocks.len() {
            for part in ["w1", "b1", "w2", "b2", "w3", "b3"] {
                out.push(format!("block{i}.{part}"));
            }
        }
        out.push("head.w".into());
        out.push("head.b".into());
        out
    }
}

impl<E: Element> crate::optim::ParamVector<E> for PsformerParams<E> {
    fn num_tensors(&self) -> usize {
        self.blocks.len() * 6 + 2
    }

    fn tensor(&self, i: usize) -> &[E] {
        self.tensors()[i]
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [E] {
        let idx = i;
        let per = 6;
        if idx < self.blocks.len() * per {
            let b = &mut self.blocks[idx / per];
            match idx % per {
                0 => &mut b.w1,
                1 => &mut b.b1,
                2 => &mut b.w2,
                3 => &mut b.b2,
                4 => &mut b.w3,
                _ => &mut b.b3,
            }
        } else if idx == self.blocks.len() * per {
            &mut self.head_w
        } else {
            &mut self.head_b
        }
    }
}
