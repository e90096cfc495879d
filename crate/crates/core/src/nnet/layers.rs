use rand::Rng;

use super::{NnError, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a [`ParamSet`], in registration order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, one per parameter in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Puts every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces all tensors, checking names and shapes agree.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(NnError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(NnError::InvalidConfig(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            kaiming_uniform(&[cin, cout, k, k], cout * k * k, rng),
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.w"), kaiming_uniform(&[dout, din], din, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// `x + conv(relu(conv(x)))`, 3x3 convolutions, no normalisation.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c1 = Conv2d::new(ps, &format!("{name}.c1"), channels, channels, 3, 1, 1, rng);
        let c2 = Conv2d::new(ps, &format!("{name}.c2"), channels, channels, 3, 1, 1, rng);
        Self { c1, c2, channels }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, _, _] = tape.value(x).dims4()?;
        if c != self.channels {
            return Err(NnError::ChannelMismatch {
                expected: self.channels,
                got: c,
            });
        }
        let h = self.c1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Channelwise soft weighting across branches: each branch is pooled to a
/// descriptor, scored by a shared two-layer MLP, and the scores are
/// softmax-normalised across branches per channel.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl TemporalAttention {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / 4).max(1);
        let fc1 = Linear::new(ps, &format!("{name}.fc1"), channels, hidden, rng);
        let fc2 = Linear::new(ps, &format!("{name}.fc2"), hidden, channels, rng);
        Self { fc1, fc2, channels }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, branches: &[Var]) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, branches)?.0)
    }

    /// Also returns the `(B, N, C)` weight tensor.
    pub fn forward_with_weights(&self, tape: &mut Tape, p: &Bound, branches: &[Var]) -> Result<(Var, Var)> {
        if branches.len() < 2 {
            return Err(NnError::Shape("attention needs at least two branches".into()));
        }
        let shape = tape.value(branches[0]).shape().to_vec();
        for &b in branches {
            if tape.value(b).shape() != shape.as_slice() {
                return Err(NnError::Shape(format!(
                    "attention branches differ: {:?} vs {shape:?}",
                    tape.value(b).shape()
                )));
            }
        }
        let [_, c, _, _] = tape.value(branches[0]).dims4()?;
        if c != self.channels {
            return Err(NnError::ChannelMismatch {
                expected: self.channels,
                got: c,
            });
        }
        let mut scores = Vec::with_capacity(branches.len());
        for &b in branches {
            let d = tape.global_avg_pool(b)?;
            let h = self.fc1.forward(tape, p, d)?;
            let h = tape.relu(h);
            scores.push(self.fc2.forward(tape, p, h)?);
        }
        let weights = tape.softmax_stack(&scores)?;
        let mut out = None;
        for (i, &b) in branches.iter().enumerate() {
            let w = tape.select(weights, i)?;
            let term = tape.channel_scale(b, w)?;
            out = Some(match out {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok((out.expect("at least two branches"), weights))
    }
}
