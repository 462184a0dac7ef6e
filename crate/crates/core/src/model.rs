//! The asymmetric encoder/decoder.
//!
//! The encoder embeds the kept frames (linear projection plus a learned
//! positional row looked up at each frame's original index), runs pre-norm
//! transformer blocks, and maps every latent through `tanh` of a linear
//! hash layer. In training mode the hash tokens and the pooled video code
//! are binarized with a straight-through sign. The decoder places the
//! projected hash tokens at their frame positions, fills every other
//! position with one learned mask token, and reconstructs all `M` frames.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{sign, Graph, ParamGrads, Var};
use crate::dataset::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMHM";
pub const CHECKPOINT_VERSION: u32 = 1;
const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub enc_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub dec_width: usize,
    pub code_length: usize,
    pub feature_dim: usize,
    pub max_frames: usize,
    /// Per-head width of attention. When unset each head gets
    /// `width / heads`; when set, attention runs at `heads * head_dim` and
    /// projects back to the block width.
    pub head_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_depth: 12,
            enc_heads: 6,
            enc_width: 256,
            dec_depth: 2,
            dec_heads: 3,
            dec_width: 192,
            code_length: 64,
            feature_dim: 4096,
            max_frames: 25,
            head_dim: Some(64),
        }
    }
}

impl ModelConfig {
    /// Named architecture presets. `small` is the default full-size model;
    /// `desk` is the reduced size used for CPU experiments.
    pub fn preset(name: &str, code_length: usize, feature_dim: usize, max_frames: usize) -> Result<Self> {
        let (enc_depth, enc_heads, enc_width, dec_depth, dec_heads, dec_width, head_dim) = match name {
            "small" => (12, 6, 256, 2, 3, 192, Some(64)),
            "mini" => (6, 4, 128, 2, 3, 192, None),
            "base" => (12, 12, 768, 2, 3, 192, None),
            "large" => (24, 16, 1024, 2, 3, 192, None),
            "desk" => (2, 4, 64, 1, 2, 32, None),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?} (small | mini | base | large | desk)"
                )))
            }
        };
        let cfg = ModelConfig {
            enc_depth,
            enc_heads,
            enc_width,
            dec_depth,
            dec_heads,
            dec_width,
            code_length,
            feature_dim,
            max_frames,
            head_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_depth", self.enc_depth),
            ("enc_heads", self.enc_heads),
            ("enc_width", self.enc_width),
            ("dec_heads", self.dec_heads),
            ("dec_width", self.dec_width),
            ("code_length", self.code_length),
            ("feature_dim", self.feature_dim),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.head_dim == Some(0) {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        if self.head_dim.is_none() && !self.enc_width.is_multiple_of(self.enc_heads) {
            return Err(Error::Config(format!(
                "enc_width {} not divisible by enc_heads {}",
                self.enc_width, self.enc_heads
            )));
        }
        if self.head_dim.is_none() && !self.dec_width.is_multiple_of(self.dec_heads) {
            return Err(Error::Config(format!(
                "dec_width {} not divisible by dec_heads {}",
                self.dec_width, self.dec_heads
            )));
        }
        Ok(())
    }

    pub fn enc_attn_width(&self) -> usize {
        self.head_dim.map_or(self.enc_width, |h| h * self.enc_heads)
    }

    pub fn dec_attn_width(&self) -> usize {
        self.head_dim.map_or(self.dec_width, |h| h * self.dec_heads)
    }
}

/// Whether the hash layer binarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Straight-through sign on tokens and pooled code.
    Train,
    /// Relaxed `tanh` outputs and a mean-pooled code, no sign.
    SmoothTest,
}

/// A code over `{-1, +1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HashCode {
    bits: Vec<i8>,
}

impl HashCode {
    /// Signs of `values`, with `sign(0) = +1`.
    pub fn from_signs(values: &[f64]) -> Self {
        HashCode {
            bits: values.iter().map(|&v| sign(v) as i8).collect(),
        }
    }

    /// Fails unless every entry is `-1` or `+1`.
    pub fn from_bits(bits: Vec<i8>) -> Result<Self> {
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::arg("hash code entries must be -1 or +1"));
        }
        Ok(HashCode { bits })
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Column-wise mean of the hash tokens followed by `sign`.
pub fn pool_code(hash_tokens: &Mat) -> Result<HashCode> {
    if hash_tokens.rows() == 0 {
        return Err(Error::arg("pool_code needs at least one token"));
    }
    let mut mean = vec![0.0; hash_tokens.cols()];
    for r in 0..hash_tokens.rows() {
        for (m, v) in mean.iter_mut().zip(hash_tokens.row(r)) {
            *m += v;
        }
    }
    let n = hash_tokens.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(HashCode::from_signs(&mean))
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub latents: Mat,
    /// `tanh` outputs before binarization.
    pub pre_tokens: Mat,
    /// Binarized in [`EncodeMode::Train`], equal to `pre_tokens` otherwise.
    pub hash_tokens: Mat,
    /// Pooled code: signed in train mode, the raw token mean otherwise.
    pub video_code: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct BlockParams {
    ln1_g: usize,
    ln1_b: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    o_w: usize,
    o_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_embed_w: usize,
    enc_embed_b: usize,
    enc_pos: usize,
    enc_blocks: Vec<BlockParams>,
    enc_norm_g: usize,
    enc_norm_b: usize,
    hash_w: usize,
    hash_b: usize,
    dec_in_w: usize,
    dec_in_b: usize,
    mask_token: usize,
    dec_pos: usize,
    dec_blocks: Vec<BlockParams>,
    dec_norm: Option<(usize, usize)>,
    dec_out_w: usize,
    dec_out_b: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    values: Vec<Mat>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let m = match init {
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Ones => Mat::filled(rows, cols, 1.0),
            Init::Normal => {
                let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
                let data = (0..rows * cols)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v;
                        }
                    })
                    .collect();
                Mat::from_vec(rows, cols, data)
            }
        };
        self.names.push(name);
        self.values.push(m);
        self.values.len() - 1
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.w"), input, output, Init::Normal),
            self.add(format!("{prefix}.b"), 1, output, Init::Zeros),
        )
    }

    fn norm(&mut self, prefix: &str, width: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.g"), 1, width, Init::Ones),
            self.add(format!("{prefix}.b"), 1, width, Init::Zeros),
        )
    }

    fn block(&mut self, prefix: &str, width: usize, inner: usize) -> BlockParams {
        let (ln1_g, ln1_b) = self.norm(&format!("{prefix}.ln1"), width);
        let (q_w, q_b) = self.linear(&format!("{prefix}.attn.q"), width, inner);
        let (k_w, k_b) = self.linear(&format!("{prefix}.attn.k"), width, inner);
        let (v_w, v_b) = self.linear(&format!("{prefix}.attn.v"), width, inner);
        let (o_w, o_b) = self.linear(&format!("{prefix}.attn.o"), inner, width);
        let (ln2_g, ln2_b) = self.norm(&format!("{prefix}.ln2"), width);
        let (fc1_w, fc1_b) = self.linear(&format!("{prefix}.mlp.fc1"), width, MLP_RATIO * width);
        let (fc2_w, fc2_b) = self.linear(&format!("{prefix}.mlp.fc2"), MLP_RATIO * width, width);
        BlockParams {
            ln1_g,
            ln1_b,
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (Layout, Vec<String>, Vec<Mat>) {
    let mut b = Builder {
        names: Vec::new(),
        values: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let (ew, dw) = (cfg.enc_width, cfg.dec_width);
    let (enc_embed_w, enc_embed_b) = b.linear("enc.embed", cfg.feature_dim, ew);
    let enc_pos = b.add("enc.pos".into(), cfg.max_frames, ew, Init::Normal);
    let enc_blocks = (0..cfg.enc_depth).map(|i| b.block(&format!("enc.blocks.{i}"), ew, cfg.enc_attn_width())).collect();
    let (enc_norm_g, enc_norm_b) = b.norm("enc.norm", ew);
    let (hash_w, hash_b) = b.linear("enc.hash", ew, cfg.code_length);
    let (dec_in_w, dec_in_b) = b.linear("dec.embed", cfg.code_length, dw);
    let mask_token = b.add("dec.mask_token".into(), 1, dw, Init::Normal);
    let dec_pos = b.add("dec.pos".into(), cfg.max_frames, dw, Init::Normal);
    let dec_blocks = (0..cfg.dec_depth).map(|i| b.block(&format!("dec.blocks.{i}"), dw, cfg.dec_attn_width())).collect();
    // With no decoder blocks the decoder stays a per-position affine map.
    let dec_norm = (cfg.dec_depth > 0).then(|| b.norm("dec.norm", dw));
    let (dec_out_w, dec_out_b) = b.linear("dec.out", dw, cfg.feature_dim);
    let layout = Layout {
        enc_embed_w,
        enc_embed_b,
        enc_pos,
        enc_blocks,
        enc_norm_g,
        enc_norm_b,
        hash_w,
        hash_b,
        dec_in_w,
        dec_in_b,
        mask_token,
        dec_pos,
        dec_blocks,
        dec_norm,
        dec_out_w,
        dec_out_b,
    };
    (layout, b.names, b.values)
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Mat>,
}

/// Graph variables of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub latents: Var,
    pub pre_tokens: Var,
    pub tokens: Var,
    pub codes: Var,
}

/// A forward pass under construction: the tape plus lazily created
/// parameter leaves.
pub struct Forward<'m> {
    model: &'m Model,
    pub graph: Graph,
    leaves: Vec<Option<Var>>,
}

impl<'m> Forward<'m> {
    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.leaves[idx] {
            return v;
        }
        let v = self.graph.param(idx, &self.model.params[idx]);
        self.leaves[idx] = Some(v);
        v
    }

    pub fn backward(&self, loss: Var) -> ParamGrads {
        self.graph.backward(loss, self.model.params.len())
    }

    fn block(&mut self, x: Var, bp: &BlockParams, seq_len: usize, heads: usize) -> Var {
        let (g1, b1) = (self.p(bp.ln1_g), self.p(bp.ln1_b));
        let h = self.graph.layer_norm(x, g1, b1);
        let (qw, qb) = (self.p(bp.q_w), self.p(bp.q_b));
        let (kw, kb) = (self.p(bp.k_w), self.p(bp.k_b));
        let (vw, vb) = (self.p(bp.v_w), self.p(bp.v_b));
        let q = self.graph.linear(h, qw, qb);
        let k = self.graph.linear(h, kw, kb);
        let v = self.graph.linear(h, vw, vb);
        let a = self.graph.attention(q, k, v, seq_len, heads);
        let (ow, ob) = (self.p(bp.o_w), self.p(bp.o_b));
        let a = self.graph.linear(a, ow, ob);
        let x = self.graph.add(x, a);
        let (g2, b2) = (self.p(bp.ln2_g), self.p(bp.ln2_b));
        let h = self.graph.layer_norm(x, g2, b2);
        let (w1, c1) = (self.p(bp.fc1_w), self.p(bp.fc1_b));
        let (w2, c2) = (self.p(bp.fc2_w), self.p(bp.fc2_b));
        let h = self.graph.linear(h, w1, c1);
        let h = self.graph.gelu(h);
        let h = self.graph.linear(h, w2, c2);
        self.graph.add(x, h)
    }

    /// Input projection plus positional rows at the original frame indices.
    pub fn embed(&mut self, frames: Var, positions: Vec<usize>) -> Var {
        let l = &self.model.layout;
        let (w, b, pos) = (l.enc_embed_w, l.enc_embed_b, l.enc_pos);
        let (w, b, pos) = (self.p(w), self.p(b), self.p(pos));
        let x = self.graph.linear(frames, w, b);
        let pe = self.graph.gather_rows(pos, positions);
        self.graph.add(x, pe)
    }

    /// Encodes `batch` sequences of `seq_len` stacked rows each.
    pub fn encode(&mut self, frames: Var, positions: Vec<usize>, seq_len: usize, mode: EncodeMode) -> EncoderVars {
        let cfg = &self.model.cfg;
        let heads = cfg.enc_heads;
        let mut x = self.embed(frames, positions);
        let blocks = self.model.layout.enc_blocks.clone();
        for bp in &blocks {
            x = self.block(x, bp, seq_len, heads);
        }
        let l = &self.model.layout;
        let (ng, nb, hw, hb) = (l.enc_norm_g, l.enc_norm_b, l.hash_w, l.hash_b);
        let (ng, nb) = (self.p(ng), self.p(nb));
        let latents = self.graph.layer_norm(x, ng, nb);
        let (hw, hb) = (self.p(hw), self.p(hb));
        let logits = self.graph.linear(latents, hw, hb);
        let pre_tokens = self.graph.tanh(logits);
        let tokens = match mode {
            EncodeMode::Train => self.graph.sign_ste(pre_tokens),
            EncodeMode::SmoothTest => pre_tokens,
        };
        let pooled = self.graph.segment_mean(tokens, seq_len);
        let codes = match mode {
            EncodeMode::Train => self.graph.sign_ste(pooled),
            EncodeMode::SmoothTest => pooled,
        };
        EncoderVars {
            latents,
            pre_tokens,
            tokens,
            codes,
        }
    }

    /// Reconstructs all `num_frames` positions of each sequence from its
    /// hash tokens (stacked, `kept[s].len()` rows per sequence).
    pub fn decode(&mut self, tokens: Var, kept: &[&[usize]], num_frames: usize) -> Var {
        let l = &self.model.layout;
        let (iw, ib, mt, pos) = (l.dec_in_w, l.dec_in_b, l.mask_token, l.dec_pos);
        let (iw, ib) = (self.p(iw), self.p(ib));
        let projected = self.graph.linear(tokens, iw, ib);
        let mut layout = vec![None; kept.len() * num_frames];
        let mut offset = 0;
        for (s, idx) in kept.iter().enumerate() {
            for (j, &t) in idx.iter().enumerate() {
                layout[s * num_frames + t] = Some(offset + j);
            }
            offset += idx.len();
        }
        let mt = self.p(mt);
        let x = self.graph.assemble(projected, mt, layout);
        let pos = self.p(pos);
        let positions = (0..kept.len()).flat_map(|_| 0..num_frames).collect();
        let pe = self.graph.gather_rows(pos, positions);
        let mut x = self.graph.add(x, pe);
        let blocks = self.model.layout.dec_blocks.clone();
        let heads = self.model.cfg.dec_heads;
        for bp in &blocks {
            x = self.block(x, bp, num_frames, heads);
        }
        let l = &self.model.layout;
        let (dn, ow, ob) = (l.dec_norm, l.dec_out_w, l.dec_out_b);
        if let Some((g, b)) = dn {
            let (g, b) = (self.p(g), self.p(b));
            x = self.graph.layer_norm(x, g, b);
        }
        let (ow, ob) = (self.p(ow), self.p(ob));
        self.graph.linear(x, ow, ob)
    }
}

impl Model {
    /// Freshly initialized weights: truncated normal (stddev 0.02) for
    /// projections, embeddings and the mask token; zero biases; unit norms.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, names, params) = build(&cfg, seed);
        Ok(Model {
            cfg,
            layout,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Mat> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Mat::all_finite)
    }

    pub fn forward(&self) -> Forward<'_> {
        Forward {
            model: self,
            graph: Graph::new(),
            leaves: vec![None; self.params.len()],
        }
    }

    fn check_frames(&self, frames: &Mat, positions: &[usize]) -> Result<()> {
        if frames.cols() != self.cfg.feature_dim {
            return Err(Error::arg(format!(
                "frames have dim {}, model expects {}",
                frames.cols(),
                self.cfg.feature_dim
            )));
        }
        if frames.rows() != positions.len() {
            return Err(Error::arg("one position per frame row required"));
        }
        if frames.rows() == 0 {
            return Err(Error::arg("frame subset must be non-empty"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.max_frames) {
            return Err(Error::arg(format!(
                "frame position {p} out of range for max_frames {}",
                self.cfg.max_frames
            )));
        }
        Ok(())
    }

    pub fn embed_frames(&self, frames: &Mat, positions: &[usize]) -> Result<Mat> {
        self.check_frames(frames, positions)?;
        let mut fw = self.forward();
        let x = fw.graph.input(frames.clone());
        let out = fw.embed(x, positions.to_vec());
        Ok(fw.graph.value(out).clone())
    }

    /// Encodes one video's frame subset.
    pub fn encode(&self, frames: &Mat, positions: &[usize], mode: EncodeMode) -> Result<EncoderOutput> {
        self.check_frames(frames, positions)?;
        let mut fw = self.forward();
        let x = fw.graph.input(frames.clone());
        let vars = fw.encode(x, positions.to_vec(), frames.rows(), mode);
        let g = &fw.graph;
        Ok(EncoderOutput {
            latents: g.value(vars.latents).clone(),
            pre_tokens: g.value(vars.pre_tokens).clone(),
            hash_tokens: g.value(vars.tokens).clone(),
            video_code: g.value(vars.codes).as_slice().to_vec(),
        })
    }

    /// Reconstructs all `num_frames` frames from hash tokens at `kept`.
    pub fn decode(&self, hash_tokens: &Mat, kept: &[usize], num_frames: usize) -> Result<Mat> {
        if hash_tokens.rows() != kept.len() {
            return Err(Error::arg(format!(
                "{} hash tokens for {} kept indices",
                hash_tokens.rows(),
                kept.len()
            )));
        }
        if hash_tokens.cols() != self.cfg.code_length {
            return Err(Error::arg("hash token width differs from code length"));
        }
        if num_frames == 0 || num_frames > self.cfg.max_frames {
            return Err(Error::arg(format!(
                "num_frames {num_frames} outside 1..={}",
                self.cfg.max_frames
            )));
        }
        let mut seen = vec![false; num_frames];
        for &k in kept {
            if k >= num_frames || std::mem::replace(&mut seen[k], true) {
                return Err(Error::arg(format!("kept index {k} invalid or repeated")));
            }
        }
        let mut fw = self.forward();
        let t = fw.graph.input(hash_tokens.clone());
        let out = fw.decode(t, &[kept], num_frames);
        Ok(fw.graph.value(out).clone())
    }

    /// Mask-free code of a full video.
    pub fn inference_code(&self, frames: &Mat) -> Result<HashCode> {
        Ok(self.inference_codes(&[frames])?.remove(0))
    }

    /// Codes for several videos with the same frame count, in one pass.
    pub fn inference_codes(&self, videos: &[&Mat]) -> Result<Vec<HashCode>> {
        let Some(first) = videos.first() else {
            return Ok(Vec::new());
        };
        let m = first.rows();
        let positions: Vec<usize> = (0..m).collect();
        for v in videos {
            if v.rows() != m {
                return Err(Error::arg("inference batch mixes frame counts"));
            }
            self.check_frames(v, &positions)?;
        }
        let stacked = Mat::vstack(videos);
        let all_positions = videos.iter().flat_map(|_| 0..m).collect();
        let mut fw = self.forward();
        let x = fw.graph.input(stacked);
        let vars = fw.encode(x, all_positions, m, EncodeMode::Train);
        let codes = fw.graph.value(vars.codes);
        Ok((0..codes.rows()).map(|r| HashCode::from_signs(codes.row(r))).collect())
    }

    /// Serializes config and parameters (as f32) to the checkpoint format:
    /// `"CMHM" | version u32 | json_len u32 | config JSON | count u32 |
    /// per tensor: name_len u32, name, rows u32, cols u32, f32 data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.cfg).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in self.names.iter().zip(&self.params) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a CMHM checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let json_len = r.u32("config")? as usize;
        let json = r.take(json_len, "config")?;
        let cfg: ModelConfig =
            serde_json::from_slice(json).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate().map_err(|e| Error::format("config", e.to_string()))?;
        // Bound the architecture before allocating anything from it.
        let expected = expected_shapes(&cfg)?;
        let count = r.u32("tensor_count")? as usize;
        if count != expected.len() {
            return Err(Error::format(
                "tensor_count",
                format!("expected {} tensors, found {count}", expected.len()),
            ));
        }
        let (layout, names, mut params) = build(&cfg, 0);
        for i in 0..count {
            let name_len = r.u32("tensor_name")? as usize;
            let name = r.take(name_len, "tensor_name")?;
            let name = std::str::from_utf8(name).map_err(|_| Error::format("tensor_name", "not UTF-8"))?;
            if name != names[i] {
                return Err(Error::format(
                    "tensor_name",
                    format!("tensor {i}: expected {:?}, found {name:?}", names[i]),
                ));
            }
            let rows = r.u32("tensor_shape")? as usize;
            let cols = r.u32("tensor_shape")? as usize;
            if (rows, cols) != params[i].shape() {
                return Err(Error::format(
                    "tensor_shape",
                    format!("{name}: expected {:?}, found ({rows}, {cols})", params[i].shape()),
                ));
            }
            let slot = params[i].as_mut_slice();
            for v in slot.iter_mut() {
                let x = r.f32("tensor_data")?;
                if !x.is_finite() {
                    return Err(Error::format("tensor_data", format!("non-finite value in {name}")));
                }
                *v = x as f64;
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format("trailer", format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(Model {
            cfg,
            layout,
            names,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rounds every parameter to f32, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Adds uniform noise in `[-std, std)` to every parameter. Gradient
    /// checks use it to leave the near-linear initial regime.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            for v in p.as_mut_slice() {
                *v += rng.random_range(-std..std);
            }
        }
    }
}

/// Parameter shapes implied by `cfg`, computed without allocating them.
fn expected_shapes(cfg: &ModelConfig) -> Result<Vec<(usize, usize)>> {
    const LIMIT: usize = 1 << 28;
    let block = |w: usize, a: usize| -> Vec<(usize, usize)> {
        let h = MLP_RATIO * w;
        vec![
            (1, w),
            (1, w),
            (w, a),
            (1, a),
            (w, a),
            (1, a),
            (w, a),
            (1, a),
            (a, w),
            (1, w),
            (1, w),
            (1, w),
            (w, h),
            (1, h),
            (h, w),
            (1, w),
        ]
    };
    if cfg.enc_depth > 4096 || cfg.dec_depth > 4096 {
        return Err(Error::format("config", "depth too large"));
    }
    let (ew, dw, k, d, m) = (cfg.enc_width, cfg.dec_width, cfg.code_length, cfg.feature_dim, cfg.max_frames);
    let (ea, da) = (cfg.enc_attn_width(), cfg.dec_attn_width());
    for v in [ew, dw, k, d, m, ea, da] {
        if v > LIMIT {
            return Err(Error::format("config", "dimension too large"));
        }
    }
    let mut shapes = vec![(d, ew), (1, ew), (m, ew)];
    for _ in 0..cfg.enc_depth {
        shapes.extend(block(ew, ea));
    }
    shapes.extend([(1, ew), (1, ew), (ew, k), (1, k), (k, dw), (1, dw), (1, dw), (m, dw)]);
    for _ in 0..cfg.dec_depth {
        shapes.extend(block(dw, da));
    }
    if cfg.dec_depth > 0 {
        shapes.extend([(1, dw), (1, dw)]);
    }
    shapes.extend([(dw, d), (1, d)]);
    let total = shapes.iter().try_fold(0usize, |acc, (r, c)| {
        r.checked_mul(*c).and_then(|n| acc.checked_add(n))
    });
    match total {
        Some(t) if t <= LIMIT => Ok(shapes),
        _ => Err(Error::format("config", "parameter count too large")),
    }
}
