use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{BoundParams, Index, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::Result;

/// Architecture sizes of the dynamics network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcptConfig {
    /// Feature embedding width `e`.
    pub embed_dim: usize,
    /// Point-transformer blocks per dynamics evaluation (`S`).
    pub blocks: usize,
    /// Message-passing rounds per block (`R`).
    pub rounds: usize,
    /// Width of the interior coordinate embeddings.
    pub coord_width: usize,
}

impl Default for GcptConfig {
    fn default() -> Self {
        Self { embed_dim: 128, blocks: 3, rounds: 2, coord_width: 32 }
    }
}

impl GcptConfig {
    /// `(c_in, c_out)` of every block: 3 -> w -> ... -> w -> 3.
    pub fn ladder(&self) -> Vec<(usize, usize)> {
        (0..self.blocks)
            .map(|s| {
                let c_in = if s == 0 { 3 } else { self.coord_width };
                let c_out = if s + 1 == self.blocks { 3 } else { self.coord_width };
                (c_in, c_out)
            })
            .collect()
    }
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    inputs: usize,
    outputs: usize,
}

impl Linear {
    /// Weights uniform in `±sqrt(1/fan_in)`, zero bias. `zero` makes the
    /// weights zero as well.
    pub fn init(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (1.0 / inputs as f64).sqrt();
        let w = if zero {
            Tensor::zeros(inputs, outputs)
        } else {
            Tensor::from_fn(inputs, outputs, |_, _| rng.random_range(-bound..bound))
        };
        let weight = store.register(format!("{name}.weight"), w)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(1, outputs))?;
        Ok(Self { weight, bias, inputs, outputs })
    }

    pub fn input_width(&self) -> usize {
        self.inputs
    }

    pub fn output_width(&self) -> usize {
        self.outputs
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let y = tape.matmul(x, bound.var(self.weight))?;
        let broadcast: Index = vec![0; rows].into();
        let b = tape.gather(bound.var(self.bias), &broadcast)?;
        tape.add(y, b)
    }
}

/// Two linear layers with a swish between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::init(store, &format!("{name}.0"), inputs, hidden, false, rng)?,
            second: Linear::init(store, &format!("{name}.1"), hidden, outputs, zero_last, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let h = self.first.apply(tape, bound, x)?;
        let h = tape.swish(h)?;
        self.second.apply(tape, bound, h)
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub node: Linear,
    pub edge: Linear,
}

impl EmbeddingParams {
    pub fn init(
        store: &mut ParameterStore,
        node_width: usize,
        edge_width: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            node: Linear::init(store, "embed.node", node_width, embed_dim, false, rng)?,
            edge: Linear::init(store, "embed.edge", edge_width, embed_dim, false, rng)?,
        })
    }
}

/// Parameters of one GCPT round. Every map takes `t` as an extra input.
#[derive(Clone, Debug)]
pub struct GcptLayerParams {
    pub phi: Linear,
    pub psi: Linear,
    pub alpha: Linear,
    pub delta: Mlp,
    pub gamma: Mlp,
    pub theta: Mlp,
}

impl GcptLayerParams {
    pub fn init(
        store: &mut ParameterStore,
        name: &str,
        embed_dim: usize,
        coord_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let e = embed_dim;
        Ok(Self {
            phi: Linear::init(store, &format!("{name}.phi"), e + 1, e, false, rng)?,
            psi: Linear::init(store, &format!("{name}.psi"), e + 1, e, false, rng)?,
            alpha: Linear::init(store, &format!("{name}.alpha"), e + 1, e, false, rng)?,
            delta: Mlp::init(store, &format!("{name}.delta"), coord_dim + 1, e, e, false, rng)?,
            gamma: Mlp::init(store, &format!("{name}.gamma"), 2 * e + 1, e, e, true, rng)?,
            theta: Mlp::init(store, &format!("{name}.theta"), 2 * e + 1, e, e, true, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub layers: Vec<GcptLayerParams>,
    pub omega: Mlp,
    pub coord_in: usize,
    pub coord_out: usize,
}

/// The `S` blocks of one continuous-flow block's dynamics.
#[derive(Clone, Debug)]
pub struct DynamicsParams {
    pub blocks: Vec<BlockParams>,
}

impl DynamicsParams {
    pub fn init(store: &mut ParameterStore, prefix: &str, config: &GcptConfig, rng: &mut impl Rng) -> Result<Self> {
        let e = config.embed_dim;
        let ladder = config.ladder();
        let last = ladder.len() - 1;
        let mut blocks = Vec::with_capacity(ladder.len());
        for (s, &(c_in, c_out)) in ladder.iter().enumerate() {
            let layers = (0..config.rounds)
                .map(|r| GcptLayerParams::init(store, &format!("{prefix}.block{s}.layer{r}"), e, c_in, rng))
                .collect::<Result<Vec<_>>>()?;
            let omega =
                Mlp::init(store, &format!("{prefix}.block{s}.omega"), c_in + 2 * e + 1, e, c_out, s == last, rng)?;
            blocks.push(BlockParams { layers, omega, coord_in: c_in, coord_out: c_out });
        }
        Ok(Self { blocks })
    }

    /// Every parameter id owned by these dynamics.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| [l.weight, l.bias];
        let mlp = |m: &Mlp| [lin(&m.first), lin(&m.second)].concat();
        let mut ids = Vec::new();
        for b in &self.blocks {
            for l in &b.layers {
                ids.extend(lin(&l.phi));
                ids.extend(lin(&l.psi));
                ids.extend(lin(&l.alpha));
                ids.extend(mlp(&l.delta));
                ids.extend(mlp(&l.gamma));
                ids.extend(mlp(&l.theta));
            }
            ids.extend(mlp(&b.omega));
        }
        ids
    }
}
