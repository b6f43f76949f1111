//! Transformer building blocks shared by the image encoder, text encoder,
//! fusion encoder and token aggregation module.
//!
//! Parameter structs own plain [`Tensor`]s. Before a forward pass each struct
//! is bound onto a tape with [`Binder`], which yields a mirror struct of
//! [`Var`]s and (for trainable binds) appends every tensor to a registry in a
//! canonical order. The optimizer walks the same order via `visit_mut`, so a
//! registry index always addresses the matching parameter.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

/// Gaussian init used throughout; matches the usual transformer scale.
pub const INIT_STD: f64 = 0.02;

/// Seeded standard-normal sampler (Box-Muller over the ChaCha stream).
pub fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| normal(rng, std)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Collects `(name, var)` pairs for every trainable tensor bound to a tape.
#[derive(Default)]
pub struct Registry {
    entries: Vec<(String, Var)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Binds parameters onto a tape either as gradient-tracked leaves or as
/// constants (for frozen snapshots).
pub struct Binder<'a> {
    pub tape: &'a Tape,
    trainable: bool,
    registry: Option<&'a mut Registry>,
}

impl<'a> Binder<'a> {
    pub fn trainable(tape: &'a Tape, registry: &'a mut Registry) -> Self {
        Binder {
            tape,
            trainable: true,
            registry: Some(registry),
        }
    }

    pub fn frozen(tape: &'a Tape) -> Self {
        Binder {
            tape,
            trainable: false,
            registry: None,
        }
    }

    pub fn bind(&mut self, name: &str, t: &Tensor) -> Var {
        if self.trainable {
            let v = self.tape.leaf(t.clone());
            if let Some(reg) = self.registry.as_deref_mut() {
                reg.entries.push((name.to_string(), v));
            }
            v
        } else {
            self.tape.constant(t.clone())
        }
    }
}

/// Walks every tensor of a parameter struct in the same canonical order the
/// binder uses.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Combined checksum over every tensor, for frozen-state assertions.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit("", &mut |_, t| {
            h ^= t.checksum();
            h = h.wrapping_mul(0x100000001b3);
        });
        h
    }
}

macro_rules! join {
    ($prefix:expr, $name:expr) => {
        &format!("{}.{}", $prefix, $name)
    };
}

// ---- linear ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl LinearParams {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: normal_tensor(rng, vec![fan_in, fan_out], INIT_STD),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        LinearParams {
            weight: Tensor::new(vec![dim, dim], w).unwrap(),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zero_out(&mut self) {
        self.weight = Tensor::zeros(self.weight.shape().to_vec());
        self.bias = Tensor::zeros(self.bias.shape().to_vec());
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LinearVars {
        LinearVars {
            weight: b.bind(join!(name, "weight"), &self.weight),
            bias: b.bind(join!(name, "bias"), &self.bias),
        }
    }
}

impl Params for LinearParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(join!(prefix, "weight"), &self.weight);
        f(join!(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(join!(prefix, "weight"), &mut self.weight);
        f(join!(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn fwd(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

// ---- layer norm ----------------------------------------------------------

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LayerNormVars {
        LayerNormVars {
            gamma: b.bind(join!(name, "gamma"), &self.gamma),
            beta: b.bind(join!(name, "beta"), &self.beta),
        }
    }
}

impl Params for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(join!(prefix, "gamma"), &self.gamma);
        f(join!(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(join!(prefix, "gamma"), &mut self.gamma);
        f(join!(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormVars {
    pub fn fwd(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

// ---- multi-head attention --------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
    pub heads: usize,
}

impl AttnParams {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        AttnParams {
            q: LinearParams::init(rng, dim, dim),
            k: LinearParams::init(rng, dim, dim),
            v: LinearParams::init(rng, dim, dim),
            out: LinearParams::init(rng, dim, dim),
            heads,
        }
    }

}

impl Params for AttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(join!(prefix, "q"), f);
        self.k.visit(join!(prefix, "k"), f);
        self.v.visit(join!(prefix, "v"), f);
        self.out.visit(join!(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(join!(prefix, "q"), f);
        self.k.visit_mut(join!(prefix, "k"), f);
        self.v.visit_mut(join!(prefix, "v"), f);
        self.out.visit_mut(join!(prefix, "out"), f);
    }
}

/// Full multi-head attention: per-role projections, scaled dot-product over
/// heads, output projection. `1/sqrt(dim/heads)` scaling, no dropout.
pub fn mha(tape: &Tape, p: &MhaVars, query: Var, key: Var, value: Var) -> Result<Var> {
    mha_inner(tape, p, query, key, value).map(|(o, _)| o)
}

/// As [`mha`], also returning the `[heads, q, k]` attention weights.
pub fn mha_with_weights(
    tape: &Tape,
    p: &MhaVars,
    query: Var,
    key: Var,
    value: Var,
) -> Result<(Var, Tensor)> {
    mha_inner(tape, p, query, key, value)
}

fn mha_inner(
    tape: &Tape,
    p: &MhaVars,
    query: Var,
    key: Var,
    value: Var,
) -> Result<(Var, Tensor)> {
    let dim = tape.shape(query)[1];
    let scale = 1.0 / ((dim / p.heads) as f64).sqrt();
    let q = p.q.fwd(tape, query)?;
    let k = p.k.fwd(tape, key)?;
    let v = p.v.fwd(tape, value)?;
    let (ctx, weights) = tape.attention_with_weights(q, k, v, p.heads, scale)?;
    let out = p.out.fwd(tape, ctx)?;
    Ok((out, weights))
}

/// Bound variable view of [`AttnParams`].
#[derive(Clone, Copy)]
pub struct MhaVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub out: LinearVars,
    pub heads: usize,
}

impl AttnParams {
    pub fn bind_mha(&self, b: &mut Binder, name: &str) -> MhaVars {
        MhaVars {
            q: self.q.bind(b, join!(name, "q")),
            k: self.k.bind(b, join!(name, "k")),
            v: self.v.bind(b, join!(name, "v")),
            out: self.out.bind(b, join!(name, "out")),
            heads: self.heads,
        }
    }
}

// ---- feed-forward ------------------------------------------------------

/// Hidden width multiplier of every feed-forward network.
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl FfnParams {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        FfnParams {
            fc1: LinearParams::init(rng, dim, FFN_EXPANSION * dim),
            fc2: LinearParams::init(rng, FFN_EXPANSION * dim, dim),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> FfnVars {
        FfnVars {
            fc1: self.fc1.bind(b, join!(name, "fc1")),
            fc2: self.fc2.bind(b, join!(name, "fc2")),
        }
    }
}

impl Params for FfnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(join!(prefix, "fc1"), f);
        self.fc2.visit(join!(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(join!(prefix, "fc1"), f);
        self.fc2.visit_mut(join!(prefix, "fc2"), f);
    }
}

#[derive(Clone, Copy)]
pub struct FfnVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl FfnVars {
    pub fn fwd(&self, tape: &Tape, x: Var) -> Result<Var> {
        let h = self.fc1.fwd(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.fwd(tape, h)
    }
}

// ---- pre-norm encoder block ----------------------------------------------

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        BlockParams {
            ln1: LayerNormParams::init(dim),
            attn: AttnParams::init(rng, dim, heads),
            ln2: LayerNormParams::init(dim),
            ffn: FfnParams::init(rng, dim),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> BlockVars {
        BlockVars {
            ln1: self.ln1.bind(b, join!(name, "ln1")),
            attn: self.attn.bind_mha(b, join!(name, "attn")),
            ln2: self.ln2.bind(b, join!(name, "ln2")),
            ffn: self.ffn.bind(b, join!(name, "ffn")),
        }
    }
}

impl Params for BlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(join!(prefix, "ln1"), f);
        self.attn.visit(join!(prefix, "attn"), f);
        self.ln2.visit(join!(prefix, "ln2"), f);
        self.ffn.visit(join!(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(join!(prefix, "ln1"), f);
        self.attn.visit_mut(join!(prefix, "attn"), f);
        self.ln2.visit_mut(join!(prefix, "ln2"), f);
        self.ffn.visit_mut(join!(prefix, "ffn"), f);
    }
}

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub attn: MhaVars,
    pub ln2: LayerNormVars,
    pub ffn: FfnVars,
}

impl BlockVars {
    /// Pre-norm self-attention block: `x += MHA(LN(x)); x += FFN(LN(x))`.
    pub fn fwd(&self, tape: &Tape, x: Var) -> Result<Var> {
        self.fwd_capture(tape, x).map(|(v, _)| v)
    }

    pub fn fwd_capture(&self, tape: &Tape, x: Var) -> Result<(Var, Tensor)> {
        let normed = self.ln1.fwd(tape, x)?;
        let (att, weights) = mha_with_weights(tape, &self.attn, normed, normed, normed)?;
        let x = tape.add(x, att)?;
        let normed = self.ln2.fwd(tape, x)?;
        let ff = self.ffn.fwd(tape, normed)?;
        Ok((tape.add(x, ff)?, weights))
    }
}

// ---- cross-attention block -------------------------------------------------

/// Cross-attention + self-attention + feed-forward, pre-norm residual form.
/// The fusion encoder stacks these; the spatial encoder uses a single one.
#[derive(Clone, Debug)]
pub struct CrossBlockParams {
    pub ln_cross: LayerNormParams,
    pub cross: AttnParams,
    pub ln_self: LayerNormParams,
    pub self_attn: AttnParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

impl CrossBlockParams {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        CrossBlockParams {
            ln_cross: LayerNormParams::init(dim),
            cross: AttnParams::init(rng, dim, heads),
            ln_self: LayerNormParams::init(dim),
            self_attn: AttnParams::init(rng, dim, heads),
            ln_ffn: LayerNormParams::init(dim),
            ffn: FfnParams::init(rng, dim),
        }
    }

    /// Zeroes every residual-branch output so the block passes queries
    /// through unchanged.
    pub fn zero_output_projections(&mut self) {
        self.cross.out.zero_out();
        self.self_attn.out.zero_out();
        self.ffn.fc2.zero_out();
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> CrossBlockVars {
        CrossBlockVars {
            ln_cross: self.ln_cross.bind(b, join!(name, "ln_cross")),
            cross: self.cross.bind_mha(b, join!(name, "cross")),
            ln_self: self.ln_self.bind(b, join!(name, "ln_self")),
            self_attn: self.self_attn.bind_mha(b, join!(name, "self_attn")),
            ln_ffn: self.ln_ffn.bind(b, join!(name, "ln_ffn")),
            ffn: self.ffn.bind(b, join!(name, "ffn")),
        }
    }
}

impl Params for CrossBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln_cross.visit(join!(prefix, "ln_cross"), f);
        self.cross.visit(join!(prefix, "cross"), f);
        self.ln_self.visit(join!(prefix, "ln_self"), f);
        self.self_attn.visit(join!(prefix, "self_attn"), f);
        self.ln_ffn.visit(join!(prefix, "ln_ffn"), f);
        self.ffn.visit(join!(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln_cross.visit_mut(join!(prefix, "ln_cross"), f);
        self.cross.visit_mut(join!(prefix, "cross"), f);
        self.ln_self.visit_mut(join!(prefix, "ln_self"), f);
        self.self_attn.visit_mut(join!(prefix, "self_attn"), f);
        self.ln_ffn.visit_mut(join!(prefix, "ln_ffn"), f);
        self.ffn.visit_mut(join!(prefix, "ffn"), f);
    }
}

#[derive(Clone, Copy)]
pub struct CrossBlockVars {
    pub ln_cross: LayerNormVars,
    pub cross: MhaVars,
    pub ln_self: LayerNormVars,
    pub self_attn: MhaVars,
    pub ln_ffn: LayerNormVars,
    pub ffn: FfnVars,
}

impl CrossBlockVars {
    pub fn cross_step(&self, tape: &Tape, q: Var, kv: Var) -> Result<Var> {
        self.cross_step_capture(tape, q, kv).map(|(v, _)| v)
    }

    pub fn cross_step_capture(&self, tape: &Tape, q: Var, kv: Var) -> Result<(Var, Tensor)> {
        let normed = self.ln_cross.fwd(tape, q)?;
        let (att, weights) = mha_with_weights(tape, &self.cross, normed, kv, kv)?;
        Ok((tape.add(q, att)?, weights))
    }

    pub fn self_step(&self, tape: &Tape, q: Var) -> Result<Var> {
        let normed = self.ln_self.fwd(tape, q)?;
        let att = mha(tape, &self.self_attn, normed, normed, normed)?;
        tape.add(q, att)
    }

    pub fn ffn_step(&self, tape: &Tape, q: Var) -> Result<Var> {
        let normed = self.ln_ffn.fwd(tape, q)?;
        let ff = self.ffn.fwd(tape, normed)?;
        tape.add(q, ff)
    }

    /// cross -> self -> feed-forward, each residual.
    pub fn fwd(&self, tape: &Tape, q: Var, kv: Var) -> Result<Var> {
        let q = self.cross_step(tape, q, kv)?;
        let q = self.self_step(tape, q)?;
        self.ffn_step(tape, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;

    #[test]
    fn registry_orders_match_visit_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = BlockParams::init(&mut rng, 8, 2);

        let tape = Tape::new(Precision::F64);
        let mut reg = Registry::new();
        let mut binder = Binder::trainable(&tape, &mut reg);
        block.bind(&mut binder, "block");

        let mut names = Vec::new();
        block.visit_mut("block", &mut |n, _| names.push(n.to_string()));
        let reg_names: Vec<String> = reg.entries().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, reg_names);
    }

    #[test]
    fn zeroed_out_projection_makes_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = BlockParams::init(&mut rng, 8, 2);
        block.attn.out.zero_out();
        block.ffn.fc2.zero_out();

        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = block.bind(&mut binder, "b");
        let x = tape.constant(normal_tensor(&mut rng, vec![3, 8], 1.0));
        let y = vars.fwd(&tape, x).unwrap();
        assert!(tape.value(y).bitwise_eq(&tape.value(x)));
    }

    #[test]
    fn mha_zero_value_projection_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut attn = AttnParams::init(&mut rng, 8, 2);
        attn.v.zero_out();
        attn.out.bias = Tensor::zeros(vec![8]);

        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = attn.bind_mha(&mut binder, "a");
        let x = tape.constant(normal_tensor(&mut rng, vec![4, 8], 1.0));
        let y = mha(&tape, &vars, x, x, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
