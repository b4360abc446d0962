//! Masked-input vision transformer.
//!
//! Each 8x8 RGB tile becomes one token. Tokens of tiles the DA stage did not
//! acquire are replaced by a learnt mask token `Λ`:
//! `out_i = s_i * t(z)_i + (1 - s_i) * Λ`. The encoder maps the (imputed)
//! tokens to one positive cost prediction per tile.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Side length of one square tile in pixels.
pub const PATCH: usize = 8;
/// Flattened size of one RGB tile.
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
/// Lower bound added after the softplus so predictions stay valid Dijkstra costs.
pub const OUTPUT_FLOOR: f32 = 0.05;
const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub k: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Number of outputs of the linear layer mixing across tokens.
    pub mix_width: usize,
    /// Whether the class token is kept when tokens are mixed and flattened.
    pub flatten_class_token: bool,
}

impl ModelConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            d_model: 32,
            blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            mix_width: 16,
            flatten_class_token: true,
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.k * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.mix_width == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn mixed_tokens(&self) -> usize {
        self.num_tiles() + usize::from(self.flatten_class_token)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f32),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let t = cfg.num_tiles();
    let hidden = cfg.mlp_ratio * d;
    let mut l: Vec<(String, Vec<usize>, Init)> = vec![
        ("tok.w".into(), vec![PATCH_DIM, d], Init::FanIn(PATCH_DIM)),
        ("tok.b".into(), vec![d], Init::Zeros),
        ("cls".into(), vec![d], Init::Normal(0.02)),
        ("mask".into(), vec![d], Init::Normal(0.02)),
        ("pos".into(), vec![t + 1, d], Init::Normal(0.02)),
    ];
    for b in 0..cfg.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        l.extend([
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("attn.wqkv"), vec![d, 3 * d], Init::FanIn(d)),
            (p("attn.bqkv"), vec![3 * d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::FanIn(d)),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, hidden], Init::FanIn(d)),
            (p("mlp.b1"), vec![hidden], Init::Zeros),
            (p("mlp.w2"), vec![hidden, d], Init::FanIn(hidden)),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    let mixed = cfg.mixed_tokens();
    l.extend([
        ("ln_f.g".into(), vec![d], Init::Ones),
        ("ln_f.b".into(), vec![d], Init::Zeros),
        ("mix.w".into(), vec![mixed, cfg.mix_width], Init::FanIn(mixed)),
        ("mix.b".into(), vec![cfg.mix_width], Init::Zeros),
        ("head.w".into(), vec![cfg.mix_width * d, t], Init::FanIn(cfg.mix_width * d)),
        ("head.b".into(), vec![t], Init::Zeros),
    ]);
    l
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded initialisation; tensors are drawn in layout order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0f32, std).map_err(|e| invalid(format!("{e}")))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::FanIn(fan) => {
                    let bound = 1.0 / libm::sqrtf(fan as f32);
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, e.g. a checkpoint. Every
    /// expected name must appear exactly once with the expected shape.
    pub fn from_named(config: ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in layout(&config) {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| invalid(format!("missing parameter {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load parameter",
                    shapes: vec![t.shape().to_vec(), shape],
                    detail: name,
                });
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some((extra, _)) = named.first() {
            return Err(invalid(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameters registered on a tape, in the same order as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl BoundParams {
    /// Leaves are trainable params when `trainable` is set, constants otherwise.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
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
        Self {
            names: params.names.clone(),
            vars,
        }
    }

    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} is part of the layout"));
        self.vars[i]
    }
}

/// Whether the tokens entering [`mask_impute`] come from fully observed
/// images. Gradients with respect to the mask need the unmasked tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Full,
    PreMasked,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let n = tape.mul(n, g)?;
    tape.add(n, b)
}

/// Splits `[B, 8k, 8k, 3]` images into `[B, k*k, 192]` tile vectors in
/// row-major tile order.
pub fn patches(tape: &mut Tape, images: Var, k: usize) -> Result<Var> {
    let s = tape.value(images).shape().to_vec();
    if s.len() != 4 || s[1] != k * PATCH || s[2] != k * PATCH || s[3] != 3 {
        return Err(Error::Shape {
            op: "tokenize",
            shapes: vec![s],
            detail: format!("expected [batch, {0}, {0}, 3]", k * PATCH),
        });
    }
    let b = s[0];
    let x = tape.reshape(images, &[b, k, PATCH, k, PATCH, 3])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b, k * k, PATCH_DIM])
}

/// Linear projection of every tile to a `d_model` token: `[B, k*k, d_model]`.
pub fn tokenize(tape: &mut Tape, cfg: &ModelConfig, p: &BoundParams, images: Var) -> Result<Var> {
    let x = patches(tape, images, cfg.k)?;
    linear(tape, x, p.get("tok.w"), p.get("tok.b"))
}

fn check_mask_shapes(tokens: &Tensor, s: &Tensor, lambda: &Tensor) -> Result<()> {
    let ts = tokens.shape();
    let ok = ts.len() == 3
        && lambda.shape() == [ts[2]]
        && (s.shape() == [ts[1]] || s.shape() == [ts[0], ts[1]]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op: "mask_impute",
            shapes: vec![ts.to_vec(), s.shape().to_vec(), lambda.shape().to_vec()],
            detail: "expected tokens [B,T,d], s [T] or [B,T], mask token [d]".into(),
        })
    }
}

/// Mask value for batch item `b`, tile `i`.
fn mask_at(s: &Tensor, b: usize, i: usize, t: usize) -> f32 {
    if s.rank() == 1 {
        s.data()[i]
    } else {
        s.data()[b * t + i]
    }
}

/// `out[b,i] = s_i * tokens[b,i] + (1 - s_i) * Λ`; `s` is either shared
/// (`[T]`) or per item (`[B, T]`).
pub fn mask_impute(tokens: &Tensor, s: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    check_mask_shapes(tokens, s, lambda)?;
    let (bn, t, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let mut out = Vec::with_capacity(tokens.numel());
    for b in 0..bn {
        for i in 0..t {
            let si = mask_at(s, b, i, t);
            let row = &tokens.data()[(b * t + i) * d..(b * t + i + 1) * d];
            out.extend(row.iter().zip(lambda.data()).map(|(&x, &l)| si * x + (1.0 - si) * l));
        }
    }
    Tensor::new(tokens.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskImputeGrads {
    /// Same shape as the mask.
    pub s: Tensor,
    pub lambda: Tensor,
    pub tokens: Tensor,
}

/// Reverse pass of [`mask_impute`]. The mask gradient is the counterfactual
/// `<g_i, t(z)_i - Λ>`, summed over the batch when the mask is shared, and is
/// defined whatever the realised mask values are.
pub fn mask_impute_backward(grad: &Tensor, tokens: &Tensor, s: &Tensor, lambda: &Tensor) -> Result<MaskImputeGrads> {
    check_mask_shapes(tokens, s, lambda)?;
    if grad.shape() != tokens.shape() {
        return Err(Error::Shape {
            op: "mask_impute backward",
            shapes: vec![grad.shape().to_vec(), tokens.shape().to_vec()],
            detail: "gradient must match tokens".into(),
        });
    }
    let (bn, t, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let mut gs = vec![0.0f64; s.numel()];
    let mut gl = vec![0.0f64; d];
    let mut gt = Vec::with_capacity(tokens.numel());
    for b in 0..bn {
        for i in 0..t {
            let si = mask_at(s, b, i, t);
            let off = (b * t + i) * d;
            let g = &grad.data()[off..off + d];
            let x = &tokens.data()[off..off + d];
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += g[j] as f64 * (x[j] - lambda.data()[j]) as f64;
                gl[j] += (1.0 - si) as f64 * g[j] as f64;
                gt.push(si * g[j]);
            }
            let slot = if s.rank() == 1 { i } else { b * t + i };
            gs[slot] += acc;
        }
    }
    Ok(MaskImputeGrads {
        s: Tensor::new(s.shape().to_vec(), gs.into_iter().map(|v| v as f32).collect())?,
        lambda: Tensor::from_vec(gl.into_iter().map(|v| v as f32).collect()),
        tokens: Tensor::new(tokens.shape().to_vec(), gt)?,
    })
}

/// Records [`mask_impute`] on the tape with the counterfactual mask gradient.
pub fn mask_impute_node(tape: &mut Tape, tokens: Var, s: Var, lambda: Var, obs: Observation) -> Result<Var> {
    if obs == Observation::PreMasked && tape.requires_grad(s) {
        return Err(Error::MissingFullObservation);
    }
    let (tv, sv, lv) = (tape.value(tokens).clone(), tape.value(s).clone(), tape.value(lambda).clone());
    let out = mask_impute(&tv, &sv, &lv)?;
    Ok(tape.custom(&[tokens, s, lambda], out, move |g, _needs| {
        let grads = mask_impute_backward(g, &tv, &sv, &lv)?;
        Ok(vec![Some(grads.tokens), Some(grads.s), Some(grads.lambda)])
    }))
}

fn attention(tape: &mut Tape, cfg: &ModelConfig, p: &BoundParams, block: usize, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let h = cfg.heads;
    let dh = d / h;
    let qkv = linear(
        tape,
        x,
        p.get(&format!("block{block}.attn.wqkv")),
        p.get(&format!("block{block}.attn.bqkv")),
    )?;
    let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let v = tape.slice(qkv, 0, i, 1)?;
        *part = tape.reshape(v, &[b * h, t, dh])?;
    }
    let [q, k, v] = parts;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrtf(dh as f32));
    let att = tape.softmax(scores)?;
    let y = tape.bmm(att, v, false)?;
    let y = tape.reshape(y, &[b, h, t, dh])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    let y = tape.reshape(y, &[b, t, d])?;
    linear(
        tape,
        y,
        p.get(&format!("block{block}.attn.wo")),
        p.get(&format!("block{block}.attn.bo")),
    )
}

fn block(tape: &mut Tape, cfg: &ModelConfig, p: &BoundParams, i: usize, x: Var) -> Result<Var> {
    let n = |s: &str| format!("block{i}.{s}");
    let y = layer_norm(tape, x, p.get(&n("ln1.g")), p.get(&n("ln1.b")))?;
    let y = attention(tape, cfg, p, i, y)?;
    let x = tape.add(x, y)?;
    let y = layer_norm(tape, x, p.get(&n("ln2.g")), p.get(&n("ln2.b")))?;
    let y = linear(tape, y, p.get(&n("mlp.w1")), p.get(&n("mlp.b1")))?;
    let y = tape.gelu(y);
    let y = linear(tape, y, p.get(&n("mlp.w2")), p.get(&n("mlp.b2")))?;
    tape.add(x, y)
}

/// Encoder from imputed tokens `[B, k*k, d_model]` to positive costs `[B, k*k]`.
pub fn encode(tape: &mut Tape, cfg: &ModelConfig, p: &BoundParams, tokens: Var) -> Result<Var> {
    let s = tape.value(tokens).shape().to_vec();
    let t = cfg.num_tiles();
    if s.len() != 3 || s[1] != t || s[2] != cfg.d_model {
        return Err(Error::Shape {
            op: "encode",
            shapes: vec![s],
            detail: format!("expected [batch, {t}, {}]", cfg.d_model),
        });
    }
    let b = s[0];
    let zeros = tape.constant(Tensor::zeros(&[b, 1, cfg.d_model]));
    let cls = tape.add(zeros, p.get("cls"))?;
    let x = tape.concat(&[cls, tokens], 1)?;
    let mut x = tape.add(x, p.get("pos"))?;
    for i in 0..cfg.blocks {
        x = block(tape, cfg, p, i, x)?;
        tape.check_finite(x, &format!("encoder block {i}"))?;
    }
    let x = layer_norm(tape, x, p.get("ln_f.g"), p.get("ln_f.b"))?;
    let x = if cfg.flatten_class_token {
        x
    } else {
        tape.slice(x, 1, 1, t)?
    };
    let x = tape.permute(x, &[0, 2, 1])?;
    let x = linear(tape, x, p.get("mix.w"), p.get("mix.b"))?;
    let x = tape.relu(x);
    let x = tape.reshape(x, &[b, cfg.d_model * cfg.mix_width])?;
    let x = linear(tape, x, p.get("head.w"), p.get("head.b"))?;
    let x = tape.softplus(x);
    let out = tape.add_scalar(x, OUTPUT_FLOOR);
    tape.check_finite(out, "prediction head")?;
    Ok(out)
}

/// Full prediction `m(z, s; W)`: tokenize, impute unobserved tiles, encode.
pub fn predict(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    images: Var,
    s: Var,
    obs: Observation,
) -> Result<Var> {
    let tokens = tokenize(tape, cfg, p, images)?;
    let imputed = mask_impute_node(tape, tokens, s, p.get("mask"), obs)?;
    encode(tape, cfg, p, imputed)
}

/// Stacks `[8k, 8k, 3]` images into one `[B, 8k, 8k, 3]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::Shape {
                    op: "stack_images",
                    shapes: vec![s.clone(), img.shape().to_vec()],
                    detail: "images differ in shape".into(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| invalid("stack_images: no images"))?);
    Tensor::new(full, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn small(k: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            ..ModelConfig::new(k)
        }
    }

    #[test]
    fn zero_image_tokens_equal_bias() {
        let cfg = small(2);
        let mut params = ModelParams::init(cfg.clone(), 0).unwrap();
        params.get_mut("tok.w").unwrap().data_mut().fill(0.0);
        let bias: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        params.get_mut("tok.b").unwrap().data_mut().copy_from_slice(&bias);
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false);
        let img = tape.constant(Tensor::zeros(&[1, 16, 16, 3]));
        let tok = tokenize(&mut tape, &cfg, &p, img).unwrap();
        assert_eq!(tape.value(tok).shape(), [1, 4, 8]);
        for row in tape.value(tok).data().chunks(8) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn k12_gives_144_tokens_and_bad_dims_fail() {
        let cfg = ModelConfig::new(12);
        let params = ModelParams::init(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false);
        let img = tape.constant(Tensor::zeros(&[1, 96, 96, 3]));
        let tok = tokenize(&mut tape, &cfg, &p, img).unwrap();
        assert_eq!(tape.value(tok).shape(), [1, 144, 32]);
        let bad = tape.constant(Tensor::zeros(&[1, 95, 96, 3]));
        assert!(tokenize(&mut tape, &cfg, &p, bad).is_err());
    }

    #[test]
    fn swapping_two_tiles_swaps_their_tokens() {
        let cfg = small(3);
        let params = ModelParams::init(cfg.clone(), 1).unwrap();
        let img = random(&[1, 24, 24, 3], 2);
        let mut swapped = img.clone();
        // tiles 1 = (0,1) and 5 = (1,2)
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = (y * 24 + 8 + x) * 3 + c;
                    let b = ((8 + y) * 24 + 16 + x) * 3 + c;
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false);
        let i0 = tape.constant(img);
        let i1 = tape.constant(swapped);
        let t0 = tokenize(&mut tape, &cfg, &p, i0).unwrap();
        let t1 = tokenize(&mut tape, &cfg, &p, i1).unwrap();
        let (a, b) = (tape.value(t0).data(), tape.value(t1).data());
        let row = |d: &[f32], i: usize| d[i * 8..(i + 1) * 8].to_vec();
        for i in 0..9 {
            let j = match i {
                1 => 5,
                5 => 1,
                _ => i,
            };
            assert_eq!(row(a, i), row(b, j));
        }
    }

    #[test]
    fn mask_impute_closed_form() {
        let tokens = random(&[2, 5, 4], 3);
        let lambda = random(&[4], 4);
        let ones = Tensor::full(&[5], 1.0);
        assert_eq!(mask_impute(&tokens, &ones, &lambda).unwrap(), tokens);
        let zeros = Tensor::zeros(&[5]);
        for row in mask_impute(&tokens, &zeros, &lambda).unwrap().data().chunks(4) {
            assert_eq!(row, lambda.data());
        }
        let s = Tensor::new(vec![2, 5], vec![1., 0., 1., 1., 0., 0., 0., 1., 0., 1.]).unwrap();
        let out = mask_impute(&tokens, &s, &lambda).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                let si = s.data()[b * 5 + i];
                for j in 0..4 {
                    let x = tokens.data()[(b * 5 + i) * 4 + j];
                    let expect = si * x + (1.0 - si) * lambda.data()[j];
                    assert_eq!(out.data()[(b * 5 + i) * 4 + j], expect);
                }
            }
        }
        assert!(mask_impute(&tokens, &Tensor::zeros(&[4]), &lambda).is_err());
    }

    #[test]
    fn counterfactual_gradient_cases() {
        let tokens = random(&[1, 3, 4], 5);
        let lambda = random(&[4], 6);
        let s = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
        let zero = Tensor::zeros(&[1, 3, 4]);
        let g = mask_impute_backward(&zero, &tokens, &s, &lambda).unwrap();
        assert!(g.s.data().iter().chain(g.lambda.data()).chain(g.tokens.data()).all(|v| *v == 0.0));

        // a token equal to the mask token has no counterfactual effect
        let mut tok = tokens.clone();
        tok.data_mut()[4..8].copy_from_slice(lambda.data());
        let grad = random(&[1, 3, 4], 7);
        let g = mask_impute_backward(&grad, &tok, &s, &lambda).unwrap();
        assert_eq!(g.s.data()[1], 0.0);

        // the formula ignores the realised mask
        for fill in [0.0, 1.0] {
            let s = Tensor::full(&[3], fill);
            let g = mask_impute_backward(&grad, &tokens, &s, &lambda).unwrap();
            for i in 0..3 {
                let expect: f64 = (0..4)
                    .map(|j| grad.data()[i * 4 + j] as f64 * (tokens.data()[i * 4 + j] - lambda.data()[j]) as f64)
                    .sum();
                assert!((g.s.data()[i] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn premasked_input_refuses_mask_gradient() {
        let mut tape = Tape::new();
        let tokens = tape.constant(random(&[1, 4, 2], 1));
        let lambda = tape.param(Tensor::zeros(&[2]));
        let s = tape.param(Tensor::full(&[4], 1.0));
        assert!(matches!(
            mask_impute_node(&mut tape, tokens, s, lambda, Observation::PreMasked),
            Err(Error::MissingFullObservation)
        ));
        let s = tape.constant(Tensor::full(&[4], 1.0));
        assert!(mask_impute_node(&mut tape, tokens, s, lambda, Observation::PreMasked).is_ok());
    }

    fn run(params: &ModelParams, img: &Tensor, s: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, params, false);
        let i = tape.constant(img.clone());
        let s = tape.constant(s.clone());
        let out = predict(&mut tape, &p, params.config(), i, s, Observation::Full)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn predictions_are_positive_with_expected_shape() {
        let cfg = ModelConfig::new(4);
        let params = ModelParams::init(cfg, 3).unwrap();
        let img = random(&[2, 32, 32, 3], 9).map(|v| v.abs());
        let out = run(&params, &img, &Tensor::full(&[16], 1.0)).unwrap();
        assert_eq!(out.shape(), [2, 16]);
        assert!(out.data().iter().all(|&v| v > OUTPUT_FLOOR * 0.999));
    }

    #[test]
    fn tile_permutation_changes_prediction() {
        let params = ModelParams::init(small(2), 3).unwrap();
        let img = random(&[1, 16, 16, 3], 10);
        let mut swapped = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    swapped.data_mut().swap((y * 16 + x) * 3 + c, (y * 16 + 8 + x) * 3 + c);
                }
            }
        }
        let s = Tensor::full(&[4], 1.0);
        let a = run(&params, &img, &s).unwrap();
        let b = run(&params, &swapped, &s).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn nan_activation_reports_block() {
        let mut params = ModelParams::init(small(2), 0).unwrap();
        params.get_mut("block0.mlp.b2").unwrap().data_mut()[0] = f32::NAN;
        let err = run(&params, &random(&[1, 16, 16, 3], 1), &Tensor::full(&[4], 1.0)).unwrap_err();
        assert!(format!("{err}").contains("block 0"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_by_name() {
        let cfg = small(2);
        let params = ModelParams::init(cfg.clone(), 5).unwrap();
        let mut named: Vec<(String, Tensor)> =
            params.names().iter().cloned().zip(params.tensors().iter().cloned()).collect();
        named.reverse();
        assert_eq!(ModelParams::from_named(cfg.clone(), named.clone()).unwrap(), params);
        named.pop();
        assert!(ModelParams::from_named(cfg, named).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small(3);
        assert_eq!(ModelParams::init(cfg.clone(), 1).unwrap(), ModelParams::init(cfg.clone(), 1).unwrap());
        assert_ne!(ModelParams::init(cfg.clone(), 1).unwrap(), ModelParams::init(cfg, 2).unwrap());
    }
}
