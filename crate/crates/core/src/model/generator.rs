use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nnet::{Bound, Conv2d, ConvTranspose2d, ParamSet, ResidualBlock, Tape, TemporalAttention, Tensor, Var};

use super::{GeneratorConfig, ModelError, Result};

const ADAIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
}

impl Encoder {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let b = cfg.base_channels;
        let stem = Conv2d::new(ps, &format!("{name}.stem"), cin, b, 3, 1, 1, rng);
        let downs = (0..cfg.depth)
            .map(|i| Conv2d::new(ps, &format!("{name}.down{i}"), b << i, b << (i + 1), 4, 2, 1, rng))
            .collect();
        Self { stem, downs }
    }

    /// Feature maps at every scale, finest first.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let h = self.stem.forward(tape, p, x)?;
        let mut feats = vec![tape.relu(h)];
        for d in &self.downs {
            let h = d.forward(tape, p, *feats.last().expect("stem"))?;
            feats.push(tape.relu(h));
        }
        Ok(feats)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    up: ConvTranspose2d,
    merge: Conv2d,
}

/// Content/condition encoders, AdaIN and attention fusion at the deepest
/// scale, residual body and a decoder fed by skips from both encoders, with
/// a tanh head.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    content: Encoder,
    condition: Encoder,
    attention: Option<TemporalAttention>,
    body: Vec<ResidualBlock>,
    ups: Vec<UpBlock>,
    head: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.base_channels == 0 || config.depth == 0 {
            return Err(ModelError::InvalidConfig("base channels and depth must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let b = config.base_channels;
        let deep = b << config.depth;
        let content = Encoder::new(&mut ps, "g.content", super::CONTENT_CHANNELS.len(), &config, &mut rng);
        let condition = Encoder::new(&mut ps, "g.condition", 1, &config, &mut rng);
        let attention = config
            .attention
            .then(|| TemporalAttention::new(&mut ps, "g.attention", deep, &mut rng));
        let body = (0..config.residual_blocks)
            .map(|i| ResidualBlock::new(&mut ps, &format!("g.res{i}"), deep, &mut rng))
            .collect();
        let ups = (0..config.depth)
            .rev()
            .map(|i| {
                let (cin, cout) = (b << (i + 1), b << i);
                UpBlock {
                    up: ConvTranspose2d::new(&mut ps, &format!("g.up{i}"), cin, cout, 4, 2, 1, &mut rng),
                    merge: Conv2d::new(&mut ps, &format!("g.merge{i}"), 3 * cout, cout, 3, 1, 1, &mut rng),
                }
            })
            .collect();
        let head = Conv2d::new(&mut ps, "g.head", b, 1, 3, 1, 1, &mut rng);
        Ok(Self {
            config,
            params: ps,
            content,
            condition,
            attention,
            body,
            ups,
            head,
        })
    }

    /// `content (N,9,H,W)`, `condition (N,1,H,W)` to `(N,1,H,W)` in (-1, 1).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, content: Var, condition: Var) -> Result<Var> {
        let [n, c, h, w] = tape.value(content).dims4()?;
        let [cn, cc, ch, cw] = tape.value(condition).dims4()?;
        if c != super::CONTENT_CHANNELS.len() || cc != 1 || (cn, ch, cw) != (n, h, w) {
            return Err(ModelError::InvalidConfig(format!(
                "generator expects (N,9,H,W) + (N,1,H,W), got {:?} + {:?}",
                tape.value(content).shape(),
                tape.value(condition).shape()
            )));
        }
        self.config.validate(h.min(w))?;
        if h % (1 << self.config.depth) != 0 || w % (1 << self.config.depth) != 0 {
            return Err(ModelError::InvalidConfig(format!("{h}x{w} not divisible by 2^depth")));
        }
        let skips = self.content.forward(tape, p, content)?;
        let cond = self.condition.forward(tape, p, condition)?;
        let deepest = *skips.last().expect("depth >= 1");
        let cond_deep = *cond.last().expect("depth >= 1");
        let mut x = tape.adain(deepest, cond_deep, ADAIN_EPS)?;
        if let Some(att) = &self.attention {
            // reference-date features vs the same features re-styled to the
            // target date
            x = att.forward(tape, p, &[deepest, x])?;
        }
        for block in &self.body {
            x = block.forward(tape, p, x)?;
        }
        let levels = skips.iter().rev().skip(1).zip(cond.iter().rev().skip(1));
        for (up, (skip, cskip)) in self.ups.iter().zip(levels) {
            let u = up.up.forward(tape, p, x)?;
            let u = tape.relu(u);
            let cat = tape.concat(&[u, *skip, *cskip])?;
            let m = up.merge.forward(tape, p, cat)?;
            x = tape.relu(m);
        }
        let out = self.head.forward(tape, p, x)?;
        Ok(tape.tanh(out))
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, content: &Tensor, condition: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let c = tape.constant(content.clone());
        let k = tape.constant(condition.clone());
        let y = self.forward(&mut tape, &p, c, k)?;
        Ok(tape.value(y).clone())
    }
}
