use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nnet::{Bound, Conv2d, ParamSet, Tape, Tensor, Var};

use super::{DiscriminatorConfig, ModelError, Result};

const LEAKY_SLOPE: f64 = 0.2;

/// Conditional patch discriminator on medium-grid candidates.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.base_channels == 0 || config.depth == 0 {
            return Err(ModelError::InvalidConfig("base channels and depth must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let b = config.base_channels;
        let blocks = (0..config.depth)
            .map(|i| {
                let cin = if i == 0 { 2 } else { b << (i - 1) };
                Conv2d::new(&mut ps, &format!("d.block{i}"), cin, b << i, 4, 2, 1, &mut rng)
            })
            .collect();
        let head = Conv2d::new(&mut ps, "d.head", b << (config.depth - 1), 1, 3, 1, 1, &mut rng);
        Ok(Self {
            config,
            params: ps,
            blocks,
            head,
        })
    }

    /// Patch logits `(N,1,h/2^depth,w/2^depth)` for a candidate and its
    /// condition, both `(N,1,h,w)`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, candidate: Var, condition: Var) -> Result<Var> {
        let a = tape.value(candidate).dims4()?;
        let b = tape.value(condition).dims4()?;
        if a != b || a[1] != 1 {
            return Err(ModelError::InvalidConfig(format!(
                "discriminator expects two (N,1,h,w) inputs, got {a:?} and {b:?}"
            )));
        }
        self.config.validate(a[2].min(a[3]))?;
        let mut x = tape.concat(&[candidate, condition])?;
        for block in &self.blocks {
            let h = block.forward(tape, p, x)?;
            x = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(self.head.forward(tape, p, x)?)
    }

    /// Patch realism probabilities in (0, 1).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, candidate: Var, condition: Var) -> Result<Var> {
        let z = self.logits(tape, p, candidate, condition)?;
        Ok(tape.sigmoid(z))
    }

    pub fn infer(&self, candidate: &Tensor, condition: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let a = tape.constant(candidate.clone());
        let b = tape.constant(condition.clone());
        let y = self.forward(&mut tape, &p, a, b)?;
        Ok(tape.value(y).clone())
    }
}
