//! Trainable heads mapping raw features into the joint space: a text head
//! with attention pooling and two video heads (frames, clips). Clip
//! attention adds `log(size)` to every key so merged tokens weigh in
//! proportion to the frames they absorbed.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container::{read_sections, write_sections, Dtype, Section};
use crate::error::{Error, Result};
use crate::merging::SizedTokenSeq;
use crate::numeric::{Graph, Tensor, Var};
use crate::rng::{self, LabRng};

const LN_EPS: f64 = 1e-5;
const META_SECTION: &str = "meta.encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 1,
            heads: 1,
            mlp_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            problems.push("d_model, heads and mlp_hidden must be positive".to_string());
        }
        if self.heads > 0 && !self.d_model.is_multiple_of(self.heads) {
            problems.push(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

/// Input dimensions and the longest sequences the position tables cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputDims {
    pub d_q: usize,
    pub d_v: usize,
    pub max_words: usize,
    pub max_frames: usize,
    pub max_clips: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Text,
    Frame,
    Clip,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Text, Branch::Frame, Branch::Clip];

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Text => "text",
            Branch::Frame => "frame",
            Branch::Clip => "clip",
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub dims: InputDims,
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

fn gaussian_tensor(rng: &mut LabRng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_parts(vec![rows, cols], rng::gaussian_vec(rng, rows * cols, std))
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, dims: InputDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_hidden;
        let mut rng = rng::derived(seed, 0xE1C0);
        let mut entries = Vec::new();
        let mut push = |name: String, t: Tensor| entries.push((name, t));

        for branch in Branch::ALL {
            let p = branch.prefix();
            let (d_in, max_len) = match branch {
                Branch::Text => (dims.d_q, dims.max_words),
                Branch::Frame => (dims.d_v, dims.max_frames),
                Branch::Clip => (dims.d_v, dims.max_clips),
            };
            push(
                format!("{p}.proj.w"),
                gaussian_tensor(&mut rng, d_in, d, 1.0 / (d_in as f64).sqrt()),
            );
            push(format!("{p}.proj.b"), Tensor::zeros(vec![1, d]));
            push(format!("{p}.pos"), gaussian_tensor(&mut rng, max_len, d, 0.02));
            for l in 0..config.layers {
                let b = format!("{p}.block{l}");
                let attn_std = 1.0 / (d as f64).sqrt();
                push(format!("{b}.ln1.g"), Tensor::from_parts(vec![1, d], vec![1.0; d]));
                push(format!("{b}.ln1.b"), Tensor::zeros(vec![1, d]));
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("{b}.attn.{w}"), gaussian_tensor(&mut rng, d, d, attn_std));
                }
                push(format!("{b}.ln2.g"), Tensor::from_parts(vec![1, d], vec![1.0; d]));
                push(format!("{b}.ln2.b"), Tensor::zeros(vec![1, d]));
                push(
                    format!("{b}.mlp.w1"),
                    gaussian_tensor(&mut rng, d, h, 1.0 / (d as f64).sqrt()),
                );
                push(format!("{b}.mlp.b1"), Tensor::zeros(vec![1, h]));
                push(
                    format!("{b}.mlp.w2"),
                    gaussian_tensor(&mut rng, h, d, 0.5 / (h as f64).sqrt()),
                );
                push(format!("{b}.mlp.b2"), Tensor::zeros(vec![1, d]));
            }
            push(format!("{p}.ln_f.g"), Tensor::from_parts(vec![1, d], vec![1.0; d]));
            push(format!("{p}.ln_f.b"), Tensor::zeros(vec![1, d]));
        }
        push("text.pool_query".into(), gaussian_tensor(&mut rng, 1, d, 0.02));
        Ok(Self::from_entries(config.clone(), dims, entries))
    }

    fn from_entries(config: EncoderConfig, dims: InputDims, entries: Vec<(String, Tensor)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self {
            config,
            dims,
            entries,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Position in the fixed parameter order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Replaces every tensor, keeping names and order. Shapes must match.
    pub fn set_all(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for ((name, old), new) in self.entries.iter_mut().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::DimMismatch(format!(
                    "parameter {name}: {:?} vs {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
            if !new.is_finite() {
                return Err(Error::NonFinite("parameter update"));
            }
            *old = new;
        }
        Ok(())
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind<'p>(&'p self, g: &mut Graph, trainable: bool) -> Bound<'p> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }

    pub fn to_sections(&self) -> Vec<Section> {
        let c = &self.config;
        let d = &self.dims;
        let meta = [
            c.d_model,
            c.layers,
            c.heads,
            c.mlp_hidden,
            d.d_q,
            d.d_v,
            d.max_words,
            d.max_frames,
            d.max_clips,
        ];
        let mut out = vec![Section {
            name: META_SECTION.into(),
            dtype: Dtype::F64,
            tensor: Tensor::from_parts(vec![1, meta.len()], meta.iter().map(|&v| v as f64).collect()),
        }];
        out.extend(self.entries.iter().map(|(n, t)| Section {
            name: n.clone(),
            dtype: Dtype::F64,
            tensor: t.clone(),
        }));
        out
    }

    pub fn from_sections(sections: &[Section]) -> Result<Self> {
        let meta = sections
            .iter()
            .find(|s| s.name == META_SECTION)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks a {META_SECTION} section")))?;
        let m: Vec<usize> = meta.tensor.data().iter().map(|&v| v as usize).collect();
        if m.len() != 9 {
            return Err(Error::Validation(format!(
                "{META_SECTION} has {} entries (expected 9)",
                m.len()
            )));
        }
        let config = EncoderConfig {
            d_model: m[0],
            layers: m[1],
            heads: m[2],
            mlp_hidden: m[3],
        };
        let dims = InputDims {
            d_q: m[4],
            d_v: m[5],
            max_words: m[6],
            max_frames: m[7],
            max_clips: m[8],
        };
        // A fresh init fixes the expected names and shapes.
        let template = Self::init(&config, dims, 0)?;
        let by_name: HashMap<&str, &Section> = sections.iter().map(|s| (s.name.as_str(), s)).collect();
        let mut missing = Vec::new();
        let mut entries = Vec::with_capacity(template.len());
        for (name, t) in &template.entries {
            match by_name.get(name.as_str()) {
                Some(s) if s.tensor.shape() == t.shape() => entries.push((name.clone(), s.tensor.clone())),
                Some(s) => {
                    return Err(Error::DimMismatch(format!(
                        "parameter {name}: checkpoint {:?} vs expected {:?}",
                        s.tensor.shape(),
                        t.shape()
                    )))
                }
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "checkpoint lacks parameters: {}",
                missing.join(", ")
            )));
        }
        if sections.len() != entries.len() + 1 {
            return Err(Error::Validation("checkpoint holds unexpected sections".into()));
        }
        Ok(Self::from_entries(config, dims, entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_sections(path, &self.to_sections())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(&read_sections(path)?)
    }
}

/// Parameters placed on a graph.
pub struct Bound<'p> {
    params: &'p EncoderParams,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    /// Pairs `params` with vars already on a graph, in parameter order.
    pub fn from_vars(params: &'p EncoderParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vars for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Self { params, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }
}

/// Encoded sequences stacked row-wise; sequence `i` occupies rows
/// `offsets[i]..offsets[i] + lengths[i]`.
#[derive(Clone, Debug)]
pub struct Stacked {
    pub var: Var,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Stacked {
    pub fn new(lengths: Vec<usize>, var: Var) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += l;
        }
        Self { var, offsets, lengths }
    }

    pub fn total_rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Row range of sequence `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.lengths[i]
    }
}

fn stack(inputs: &[&Tensor], d_in: usize, what: &str) -> Result<Tensor> {
    let rows: usize = inputs.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * d_in);
    for t in inputs {
        if t.cols() != d_in {
            return Err(Error::DimMismatch(format!(
                "{what} features have dimension {} but the encoder expects {d_in}",
                t.cols()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(rows, d_in, data)
}

/// Projection, position embeddings, pre-norm blocks and a final layer norm
/// over a batch of sequences. `key_bias[i]` (one entry per row of sequence
/// `i`) is added to attention logits for keys.
fn encode_branch(
    g: &mut Graph,
    p: &Bound,
    branch: Branch,
    inputs: &[&Tensor],
    key_bias: Option<&[Vec<f64>]>,
) -> Result<Stacked> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {} sequences to encode",
            branch.prefix()
        )));
    }
    let pre = branch.prefix();
    let dims = p.params.dims;
    let (d_in, max_len) = match branch {
        Branch::Text => (dims.d_q, dims.max_words),
        Branch::Frame => (dims.d_v, dims.max_frames),
        Branch::Clip => (dims.d_v, dims.max_clips),
    };
    let lengths: Vec<usize> = inputs.iter().map(|t| t.rows()).collect();
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > max_len) {
        return Err(Error::InvalidArgument(format!(
            "{pre} sequence length {bad} outside 1..={max_len}"
        )));
    }
    let cfg = p.config().clone();
    let d = cfg.d_model;

    let x = g.constant(stack(inputs, d_in, pre)?);
    let w = p.var(&format!("{pre}.proj.w"))?;
    let b = p.var(&format!("{pre}.proj.b"))?;
    let xw = g.matmul(x, w)?;
    let mut h = g.add_row(xw, b)?;

    let pos_idx: Vec<usize> = lengths.iter().flat_map(|&l| 0..l * d).collect();
    let pos_table = p.var(&format!("{pre}.pos"))?;
    let pos_flat = g.gather(pos_table, pos_idx)?;
    let rows = lengths.iter().sum();
    let pos = g.reshape(pos_flat, vec![rows, d])?;
    h = g.add(h, pos)?;

    let stacked = Stacked::new(lengths, h);
    for l in 0..cfg.layers {
        let blk = format!("{pre}.block{l}");
        let v = |s: &str| p.var(&format!("{blk}.{s}"));
        let n1 = g.layer_norm_rows(h, v("ln1.g")?, v("ln1.b")?, LN_EPS)?;
        let q = g.matmul(n1, v("attn.wq")?)?;
        let k = g.matmul(n1, v("attn.wk")?)?;
        let val = g.matmul(n1, v("attn.wv")?)?;
        let mut outs = Vec::with_capacity(stacked.lengths.len());
        for i in 0..stacked.lengths.len() {
            let (off, len) = (stacked.offsets[i], stacked.lengths[i]);
            let bias = key_bias.map(|kb| kb[i].as_slice());
            outs.push(attend(g, q, k, val, off, len, cfg.heads, bias)?);
        }
        let attn = g.concat_rows(&outs)?;
        let proj = g.matmul(attn, v("attn.wo")?)?;
        h = g.add(h, proj)?;

        let n2 = g.layer_norm_rows(h, v("ln2.g")?, v("ln2.b")?, LN_EPS)?;
        let m1 = g.matmul(n2, v("mlp.w1")?)?;
        let m1 = g.add_row(m1, v("mlp.b1")?)?;
        let m1 = g.gelu(m1)?;
        let m2 = g.matmul(m1, v("mlp.w2")?)?;
        let m2 = g.add_row(m2, v("mlp.b2")?)?;
        h = g.add(h, m2)?;
    }
    let out = g.layer_norm_rows(
        h,
        p.var(&format!("{pre}.ln_f.g"))?,
        p.var(&format!("{pre}.ln_f.b"))?,
        LN_EPS,
    )?;
    Ok(Stacked { var: out, ..stacked })
}

#[allow(clippy::too_many_arguments)]
fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    off: usize,
    len: usize,
    heads: usize,
    bias: Option<&[f64]>,
) -> Result<Var> {
    let qs = g.slice_rows(q, off, len)?;
    let ks = g.slice_rows(k, off, len)?;
    let vs = g.slice_rows(v, off, len)?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let mut per_head = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qs, ks, vs)
        } else {
            (
                g.slice_cols(qs, hd * dh, dh)?,
                g.slice_cols(ks, hd * dh, dh)?,
                g.slice_cols(vs, hd * dh, dh)?,
            )
        };
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax_rows(logits, bias)?;
        per_head.push(g.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(per_head[0])
    } else {
        g.concat_cols(&per_head)
    }
}

/// `softmax(seq · query / √d) · seq` for a `[L × d]` sequence and a
/// `[1 × d]` query; returns `[1 × d]`.
pub fn attention_pool(g: &mut Graph, seq: Var, query: Var) -> Result<Var> {
    let d = g.shape(seq)[1];
    let scores = g.matmul_t(query, seq)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(scores, None)?;
    g.matmul(weights, seq)
}

/// Text output: token sequence `T̂` (stacked) and pooled `T̄` `[B_q × d]`.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub tokens: Stacked,
    pub pooled: Var,
}

pub fn encode_text(g: &mut Graph, p: &Bound, words: &[&Tensor]) -> Result<TextEncoding> {
    if let Some(w) = words.iter().find(|w| w.rows() < 2) {
        return Err(Error::InvalidArgument(format!(
            "queries need at least 2 word rows, got {}",
            w.rows()
        )));
    }
    let tokens = encode_branch(g, p, Branch::Text, words, None)?;
    let query = p.var("text.pool_query")?;
    let mut pooled = Vec::with_capacity(words.len());
    for i in 0..words.len() {
        let seq = g.slice_rows(tokens.var, tokens.offsets[i], tokens.lengths[i])?;
        pooled.push(attention_pool(g, seq, query)?);
    }
    let pooled = g.concat_rows(&pooled)?;
    Ok(TextEncoding { tokens, pooled })
}

pub fn encode_frames(g: &mut Graph, p: &Bound, frames: &[&Tensor]) -> Result<Stacked> {
    encode_branch(g, p, Branch::Frame, frames, None)
}

pub fn encode_clips(g: &mut Graph, p: &Bound, clips: &[&SizedTokenSeq]) -> Result<Stacked> {
    let mut biases = Vec::with_capacity(clips.len());
    for c in clips {
        if c.sizes.len() != c.tokens.rows() {
            return Err(Error::InvalidArgument("clip sizes and tokens differ in length".into()));
        }
        if c.sizes.contains(&0) {
            return Err(Error::InvalidArgument("clip of size 0".into()));
        }
        biases.push(c.sizes.iter().map(|&s| (s as f64).ln()).collect::<Vec<f64>>());
    }
    let tokens: Vec<&Tensor> = clips.iter().map(|c| &c.tokens).collect();
    encode_branch(g, p, Branch::Clip, &tokens, Some(&biases))
}

/// Encoder outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    /// `T̂`, one `[L_q × d]` matrix per query.
    pub t_seq: Vec<Tensor>,
    /// `T̄`, `[B_q × d]`.
    pub t_pooled: Tensor,
    /// `V̄_f`, one `[L_f × d]` matrix per video.
    pub v_frame: Vec<Tensor>,
    /// `V̄_c`, one `[L_c × d]` matrix per video.
    pub v_clip: Vec<Tensor>,
    pub clip_sizes: Vec<Vec<usize>>,
}

fn unstack(g: &Graph, s: &Stacked) -> Vec<Tensor> {
    let t = g.value(s.var);
    (0..s.lengths.len())
        .map(|i| t.select_rows(&s.range(i).collect::<Vec<_>>()))
        .collect()
}

/// Runs every encoder without recording gradients.
pub fn encode_batch(
    params: &EncoderParams,
    words: &[&Tensor],
    frames: &[&Tensor],
    clips: &[&SizedTokenSeq],
) -> Result<EncodedBatch> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let (t_seq, t_pooled) = if words.is_empty() {
        (Vec::new(), Tensor::zeros(vec![0, params.config.d_model]))
    } else {
        let text = encode_text(&mut g, &p, words)?;
        (unstack(&g, &text.tokens), g.value(text.pooled).clone())
    };
    let (v_frame, v_clip) = if frames.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let f = encode_frames(&mut g, &p, frames)?;
        let c = encode_clips(&mut g, &p, clips)?;
        (unstack(&g, &f), unstack(&g, &c))
    };
    Ok(EncodedBatch {
        t_seq,
        t_pooled,
        v_frame,
        v_clip,
        clip_sizes: clips.iter().map(|c| c.sizes.clone()).collect(),
    })
}
