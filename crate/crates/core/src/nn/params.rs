use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// A named dense parameter block, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Block {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Block {
            name: name.to_string(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Block::zeros(&self.name, self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Layer sizes of the gain network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub m: usize,
    pub n: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub d_g: usize,
}

impl Dims {
    /// Two `n`-sized input features, `d_h = 10(m+n)`, `d_g = 4(m²+n²)` clamped
    /// to `[32, 256]`.
    pub fn for_model(m: usize, n: usize) -> Self {
        Dims {
            m,
            n,
            d_in: 2 * n,
            d_h: 10 * (m + n),
            d_g: (4 * (m * m + n * n)).clamp(32, 256),
        }
    }
}

/// Indices of the parameter blocks inside [`GainNetworkParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    FcInW,
    FcInB,
    GruWz,
    GruBz,
    GruWr,
    GruBr,
    GruWh,
    GruBh,
    FcOutW,
    FcOutB,
}

impl Param {
    pub const ALL: [Param; 10] = [
        Param::FcInW,
        Param::FcInB,
        Param::GruWz,
        Param::GruBz,
        Param::GruWr,
        Param::GruBr,
        Param::GruWh,
        Param::GruBh,
        Param::FcOutW,
        Param::FcOutB,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::FcInW => "fc_in.w",
            Param::FcInB => "fc_in.b",
            Param::GruWz => "gru.w_z",
            Param::GruBz => "gru.b_z",
            Param::GruWr => "gru.w_r",
            Param::GruBr => "gru.b_r",
            Param::GruWh => "gru.w_h",
            Param::GruBh => "gru.b_h",
            Param::FcOutW => "fc_out.w",
            Param::FcOutB => "fc_out.b",
        }
    }

    fn shape(self, d: &Dims) -> (usize, usize) {
        let gru_in = d.d_g + d.d_h;
        match self {
            Param::FcInW => (d.d_h, d.d_in),
            Param::FcInB => (d.d_h, 1),
            Param::GruWz | Param::GruWr | Param::GruWh => (d.d_g, gru_in),
            Param::GruBz | Param::GruBr | Param::GruBh => (d.d_g, 1),
            Param::FcOutW => (d.m * d.n, d.d_g),
            Param::FcOutB => (d.m * d.n, 1),
        }
    }
}

/// All trainable parameters: input FC, GRU core, output FC.
#[derive(Clone, Debug, PartialEq)]
pub struct GainNetworkParams {
    pub dims: Dims,
    blocks: Vec<Block>,
}

impl GainNetworkParams {
    pub fn zeros(dims: Dims) -> Self {
        let blocks = Param::ALL
            .iter()
            .map(|p| {
                let (r, c) = p.shape(&dims);
                Block::zeros(p.name(), r, c)
            })
            .collect();
        GainNetworkParams { dims, blocks }
    }

    /// FC weights uniform in `±sqrt(6/(fan_in+fan_out))`, GRU weights uniform
    /// in `±sqrt(1/d_g)`, biases zero.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut params = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru_bound = (1.0 / dims.d_g as f64).sqrt();
        for p in Param::ALL {
            let block = &mut params.blocks[p.index()];
            let bound = match p {
                Param::FcInW | Param::FcOutW => (6.0 / (block.rows + block.cols) as f64).sqrt(),
                Param::GruWz | Param::GruWr | Param::GruWh => gru_bound,
                _ => continue,
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            block.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        params
    }

    pub fn from_blocks(dims: Dims, blocks: Vec<Block>) -> Result<Self> {
        let expected = Self::zeros(dims);
        if blocks.len() != expected.blocks.len() {
            return Err(Error::Inconsistent(format!(
                "expected {} parameter blocks, found {}",
                expected.blocks.len(),
                blocks.len()
            )));
        }
        for (want, got) in expected.blocks.iter().zip(&blocks) {
            if want.name != got.name || want.rows != got.rows || want.cols != got.cols || got.data.len() != want.data.len() {
                return Err(Error::Inconsistent(format!(
                    "block {} should be {}x{}, found {} {}x{}",
                    want.name, want.rows, want.cols, got.name, got.rows, got.cols
                )));
            }
        }
        Ok(GainNetworkParams { dims, blocks })
    }

    /// Multiplies the `fc_out` weights by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        self.blocks[Param::FcOutW.index()].data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn block(&self, p: Param) -> &Block {
        &self.blocks[p.index()]
    }

    pub fn block_mut(&mut self, p: Param) -> &mut Block {
        &mut self.blocks[p.index()]
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    /// `‖Θ‖²` over every block.
    pub fn sq_norm(&self) -> f64 {
        self.blocks.iter().flat_map(|b| &b.data).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flat_map(|b| &b.data).all(|v| v.is_finite())
    }
}
