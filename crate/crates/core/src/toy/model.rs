//! Pre-norm causal transformer over the fused video/text sequence.
//!
//! Everything is `f64` with hand-written backpropagation. Parameters live in
//! one flat vector described by [`Slot`]s so the optimizer, checkpoints and
//! gradient checks see a single buffer.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::AddAssign;

use crate::backend::{AttentionCapture, BackendError, ParamGroup};
use crate::fusion::{assemble_sequence, patchify, EmbedderSet, FrameClip, FusionConfig, Patches};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Longest fused sequence (video plus text) the model accepts.
    pub context_len: usize,
    pub max_video_tokens: usize,
    pub fusion: FusionConfig,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            vocab_size: 211,
            context_len: 256,
            max_video_tokens: 64,
            fusion: FusionConfig {
                target_fps: 1.0,
                max_hw: (64, 64),
                patch_size: 16,
                temporal_span: 1,
            },
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::InvalidInput(m));
        if self.d == 0 || self.layers == 0 || self.heads == 0 {
            return bad("d, layers and heads must be >= 1".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.context_len < self.max_video_tokens + 2 {
            return bad(format!(
                "context_len {} cannot hold {} video tokens plus text",
                self.context_len, self.max_video_tokens
            ));
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be >= 4".into());
        }
        if self.fusion.patch_size == 0 || self.fusion.temporal_span == 0 {
            return bad("patch size and temporal span must be >= 1".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        let p = self.fusion.patch_size as usize;
        p * p * 3 * self.fusion.temporal_span as usize
    }

    pub fn key_values(&self) -> BTreeMap<String, String> {
        let mut kv = self.fusion.key_values();
        for (k, v) in [
            ("toy.d", self.d),
            ("toy.layers", self.layers),
            ("toy.heads", self.heads),
            ("toy.vocab_size", self.vocab_size),
            ("toy.context_len", self.context_len),
            ("toy.max_video_tokens", self.max_video_tokens),
        ] {
            kv.insert(k.to_string(), v.to_string());
        }
        kv
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    /// Whether weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    patch_proj: usize,
    patch_bias: usize,
    tok: usize,
    pos_video: usize,
    pos_text: usize,
    modality: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

struct Builder {
    slots: Vec<Slot>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, group: ParamGroup, decay: bool) -> usize {
        self.slots.push(Slot {
            name,
            offset: self.total,
            rows,
            cols,
            group,
            decay,
        });
        self.total += rows * cols;
        self.slots.len() - 1
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardPass {
    n_video: usize,
    features: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hidden: Array2<f64>,
}

struct KvCache {
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    slots: Vec<Slot>,
    ids: Ids,
    params: Vec<f64>,
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn ln_forward(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    db += &dy.sum_axis(Axis(0));
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = dy * &g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dr = dxhat.row(i);
        let xr = cache.xhat.row(i);
        let m1 = dr.sum() / d;
        let m2 = dr.dot(&xr) / d;
        let r = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (dr[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one logit row evaluated at `target`.
pub fn log_prob(logits: ArrayView1<f64>, target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig, seed: u64) -> Result<Self, BackendError> {
        cfg.validate()?;
        let (d, ff, v) = (cfg.d, 4 * cfg.d, cfg.vocab_size);
        let lm = ParamGroup::LanguageAndMerger;
        let mut b = Builder {
            slots: Vec::new(),
            total: 0,
        };
        let patch_proj = b.add("patch_proj".into(), cfg.patch_dim(), d, ParamGroup::VisionTower, true);
        let patch_bias = b.add("patch_bias".into(), 1, d, ParamGroup::VisionTower, false);
        let tok = b.add("token_table".into(), v, d, lm, true);
        let pos_video = b.add("pos_video".into(), cfg.max_video_tokens, d, lm, true);
        let pos_text = b.add("pos_text".into(), cfg.context_len, d, lm, true);
        let modality = b.add("modality".into(), 2, d, lm, true);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut a = |n: &str, r, c, decay| b.add(format!("layer{l}.{n}"), r, c, lm, decay);
            layers.push(LayerIds {
                ln1_g: a("ln1_g", 1, d, false),
                ln1_b: a("ln1_b", 1, d, false),
                wq: a("wq", d, d, true),
                bq: a("bq", 1, d, false),
                wk: a("wk", d, d, true),
                bk: a("bk", 1, d, false),
                wv: a("wv", d, d, true),
                bv: a("bv", 1, d, false),
                wo: a("wo", d, d, true),
                bo: a("bo", 1, d, false),
                ln2_g: a("ln2_g", 1, d, false),
                ln2_b: a("ln2_b", 1, d, false),
                w1: a("w1", d, ff, true),
                b1: a("b1", 1, ff, false),
                w2: a("w2", ff, d, true),
                b2: a("b2", 1, d, false),
            });
        }
        let lnf_g = b.add("lnf_g".into(), 1, d, lm, false);
        let lnf_b = b.add("lnf_b".into(), 1, d, lm, false);
        let head_w = b.add("head_w".into(), d, v, lm, true);
        let head_b = b.add("head_b".into(), 1, v, lm, false);
        let ids = Ids {
            patch_proj,
            patch_bias,
            tok,
            pos_video,
            pos_text,
            modality,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        };

        let mut params = vec![0.0; b.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        for slot in &b.slots {
            let name = slot.name.rsplit('.').next().unwrap_or(&slot.name);
            let std = match name {
                _ if name.ends_with("_g") => {
                    params[slot.range()].fill(1.0);
                    continue;
                }
                _ if !slot.decay => continue,
                "patch_proj" => 1.0 / (slot.rows as f64).sqrt(),
                "wo" | "w2" => resid_std,
                _ => 0.02,
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for p in &mut params[slot.range()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            cfg,
            slots: b.slots,
            ids,
            params,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the output head so every next-token distribution is uniform.
    pub fn zero_head(&mut self) {
        for id in [self.ids.head_w, self.ids.head_b] {
            let r = self.slots[id].range();
            self.params[r].fill(0.0);
        }
    }

    fn m(&self, id: usize) -> ArrayView2<'_, f64> {
        let s = &self.slots[id];
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()]).expect("slot shape")
    }

    fn v(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.slots[id].range()])
    }

    fn gm<'g>(&self, grad: &'g mut [f64], id: usize) -> ArrayViewMut2<'g, f64> {
        let s = &self.slots[id];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut grad[s.range()]).expect("slot shape")
    }

    fn gv<'g>(&self, grad: &'g mut [f64], id: usize) -> ArrayViewMut1<'g, f64> {
        ArrayViewMut1::from(&mut grad[self.slots[id].range()])
    }

    pub fn patches(&self, clip: &FrameClip) -> Result<Patches, BackendError> {
        let f = &self.cfg.fusion;
        let patches = patchify(clip, f.patch_size, f.temporal_span).map_err(|e| BackendError::InvalidInput(e.to_string()))?;
        if patches.grid.token_count() > self.cfg.max_video_tokens {
            return Err(BackendError::ContextOverflow {
                required: patches.grid.token_count(),
                available: self.cfg.max_video_tokens,
            });
        }
        Ok(patches)
    }

    /// Fused length check shared by training and inference.
    pub fn check_length(&self, n_video: usize, n_text: usize) -> Result<(), BackendError> {
        let required = n_video + n_text;
        if required > self.cfg.context_len {
            return Err(BackendError::ContextOverflow {
                required,
                available: self.cfg.context_len,
            });
        }
        Ok(())
    }

    fn embed(&self, patches: &Patches, ids: &[u32]) -> Result<Array2<f64>, BackendError> {
        let emb = EmbedderSet {
            patch_proj: self.m(self.ids.patch_proj),
            patch_bias: self.v(self.ids.patch_bias),
            token_table: self.m(self.ids.tok),
            pos_video: self.m(self.ids.pos_video),
            pos_text: self.m(self.ids.pos_text),
            modality: self.m(self.ids.modality),
        };
        assemble_sequence(patches, ids, &emb)
            .map(|seq| seq.embeddings)
            .map_err(|e| BackendError::InvalidInput(e.to_string()))
    }

    fn layer_forward(&self, li: &LayerIds, x: &Array2<f64>) -> (Array2<f64>, LayerCache) {
        let n = x.nrows();
        let d = self.cfg.d;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (h1, ln1) = ln_forward(x, self.v(li.ln1_g), self.v(li.ln1_b));
        let q = h1.dot(&self.m(li.wq)) + self.v(li.bq);
        let k = h1.dot(&self.m(li.wk)) + self.v(li.bk);
        let v = h1.dot(&self.m(li.wv)) + self.v(li.bv);
        let mut o = Array2::zeros((n, d));
        let mut att = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for i in 0..n {
                let mut row = a.row_mut(i);
                let row = row.as_slice_mut().expect("contiguous row");
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            att.push(a);
        }
        let x1 = x + &(o.dot(&self.m(li.wo)) + self.v(li.bo));
        let (h2, ln2) = ln_forward(&x1, self.v(li.ln2_g), self.v(li.ln2_b));
        let u = h2.dot(&self.m(li.w1)) + self.v(li.b1);
        let g = u.mapv(gelu);
        let out = &x1 + &(g.dot(&self.m(li.w2)) + self.v(li.b2));
        let cache = LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            att,
            o,
            ln2,
            h2,
            u,
            g,
        };
        (out, cache)
    }

    fn layer_backward(&self, li: &LayerIds, cache: &LayerCache, dout: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let d = self.cfg.d;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // MLP branch.
        self.gm(grad, li.w2).add_assign(&cache.g.t().dot(&dout));
        self.gv(grad, li.b2).add_assign(&dout.sum_axis(Axis(0)));
        let dg = dout.dot(&self.m(li.w2).t());
        let du = dg * &cache.u.mapv(gelu_grad);
        self.gm(grad, li.w1).add_assign(&cache.h2.t().dot(&du));
        self.gv(grad, li.b1).add_assign(&du.sum_axis(Axis(0)));
        let dh2 = du.dot(&self.m(li.w1).t());
        let (g2, b2) = (li.ln2_g, li.ln2_b);
        let dx1 = {
            let (dg2, db2) = split_two(self, grad, g2, b2);
            dout + ln_backward(&dh2, &cache.ln2, self.v(g2), dg2, db2)
        };
        // Attention branch.
        self.gm(grad, li.wo).add_assign(&cache.o.t().dot(&dx1));
        self.gv(grad, li.bo).add_assign(&dx1.sum_axis(Axis(0)));
        let d_o = dx1.dot(&self.m(li.wo).t());
        let n = d_o.nrows();
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.att[h];
            let doh = d_o.slice(cols);
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let mut ds = doh.dot(&cache.v.slice(cols).t());
            for i in 0..n {
                let ar = a.row(i);
                let mut dr = ds.row_mut(i);
                let dot = ar.dot(&dr);
                dr.zip_mut_with(&ar, |g, &p| *g = p * (*g - dot));
            }
            dq.slice_mut(cols).assign(&(ds.dot(&cache.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&cache.q.slice(cols)) * scale));
        }
        let mut dh1 = Array2::zeros((n, d));
        for (w, b, dm) in [(li.wq, li.bq, &dq), (li.wk, li.bk, &dk), (li.wv, li.bv, &dv)] {
            self.gm(grad, w).add_assign(&cache.h1.t().dot(dm));
            self.gv(grad, b).add_assign(&dm.sum_axis(Axis(0)));
            dh1 += &dm.dot(&self.m(w).t());
        }
        let (g1, b1) = (li.ln1_g, li.ln1_b);
        let (dg1, db1) = split_two(self, grad, g1, b1);
        dx1 + ln_backward(&dh1, &cache.ln1, self.v(g1), dg1, db1)
    }

    fn forward(&self, patches: &Patches, ids: &[u32]) -> Result<ForwardPass, BackendError> {
        let n_video = patches.grid.token_count();
        self.check_length(n_video, ids.len())?;
        let mut x = self.embed(patches, ids)?;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for li in &self.ids.layers {
            let (next, cache) = self.layer_forward(li, &x);
            layers.push(cache);
            x = next;
        }
        let (hidden, lnf) = ln_forward(&x, self.v(self.ids.lnf_g), self.v(self.ids.lnf_b));
        Ok(ForwardPass {
            n_video,
            features: patches.features(),
            layers,
            lnf,
            hidden,
        })
    }

    fn head(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        hidden.dot(&self.m(self.ids.head_w)) + self.v(self.ids.head_b)
    }

    /// Logits for every position of the fused sequence.
    pub fn logits(&self, clip: &FrameClip, ids: &[u32]) -> Result<Array2<f64>, BackendError> {
        let patches = self.patches(clip)?;
        let fp = self.forward(&patches, ids)?;
        Ok(self.head(fp.hidden.view()))
    }

    /// Sum of next-token NLL over `targets` (pairs of fused row and the token
    /// that row must predict). When `grad` is given, `scale` times the
    /// gradient of that sum is accumulated into it.
    pub fn nll(
        &self,
        clip: &FrameClip,
        ids: &[u32],
        targets: &[(usize, u32)],
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64, BackendError> {
        let patches = self.patches(clip)?;
        let fp = self.forward(&patches, ids)?;
        let n = fp.hidden.nrows();
        let vocab = self.cfg.vocab_size;
        let mut rows = Array2::zeros((targets.len(), self.cfg.d));
        for (k, &(r, t)) in targets.iter().enumerate() {
            if r >= n || t as usize >= vocab {
                return Err(BackendError::InvalidInput(format!("target ({r}, {t}) outside sequence or vocabulary")));
            }
            rows.row_mut(k).assign(&fp.hidden.row(r));
        }
        let logits = self.head(rows.view());
        let mut total = 0.0;
        let mut dlogits = Array2::zeros(logits.dim());
        for (k, &(_, t)) in targets.iter().enumerate() {
            let row = logits.row(k);
            total -= log_prob(row, t as usize);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            p[t as usize] -= 1.0;
            dlogits.row_mut(k).assign(&(Array1::from(p) * scale));
        }
        let Some(grad) = grad else {
            return Ok(total);
        };

        self.gm(grad, self.ids.head_w).add_assign(&rows.t().dot(&dlogits));
        self.gv(grad, self.ids.head_b).add_assign(&dlogits.sum_axis(Axis(0)));
        let drows = dlogits.dot(&self.m(self.ids.head_w).t());
        let mut dhidden = Array2::zeros((n, self.cfg.d));
        for (k, &(r, _)) in targets.iter().enumerate() {
            let mut row = dhidden.row_mut(r);
            row += &drows.row(k);
        }
        let (gf, bf) = (self.ids.lnf_g, self.ids.lnf_b);
        let mut dx = {
            let (dgf, dbf) = split_two(self, grad, gf, bf);
            ln_backward(&dhidden, &fp.lnf, self.v(gf), dgf, dbf)
        };
        for (li, cache) in self.ids.layers.iter().zip(&fp.layers).rev() {
            dx = self.layer_backward(li, cache, dx, grad);
        }

        let nv = fp.n_video;
        let dvid = dx.slice(s![..nv, ..]);
        self.gm(grad, self.ids.patch_proj).add_assign(&fp.features.t().dot(&dvid));
        let vid_sum = dvid.sum_axis(Axis(0));
        self.gv(grad, self.ids.patch_bias).add_assign(&vid_sum);
        self.gm(grad, self.ids.pos_video).slice_mut(s![..nv, ..]).add_assign(&dvid);
        let dtxt = dx.slice(s![nv.., ..]);
        {
            let mut dm = self.gm(grad, self.ids.modality);
            let mut r0 = dm.row_mut(0);
            r0 += &vid_sum;
            let mut r1 = dm.row_mut(1);
            r1 += &dtxt.sum_axis(Axis(0));
        }
        self.gm(grad, self.ids.pos_text).slice_mut(s![..ids.len(), ..]).add_assign(&dtxt);
        let mut dtok = self.gm(grad, self.ids.tok);
        for (j, &id) in ids.iter().enumerate() {
            let mut row = dtok.row_mut(id as usize);
            row += &dtxt.row(j);
        }
        Ok(total)
    }

    /// Attention from the final position to every video token, renormalized
    /// over the video keys.
    pub fn attention(&self, clip: &FrameClip, ids: &[u32]) -> Result<AttentionCapture, BackendError> {
        if ids.is_empty() {
            return Err(BackendError::InvalidInput("attention capture needs a query token".into()));
        }
        let patches = self.patches(clip)?;
        let fp = self.forward(&patches, ids)?;
        let nv = fp.n_video;
        let q = nv + ids.len() - 1;
        let mut weights = Vec::with_capacity(self.cfg.layers * self.cfg.heads * nv);
        for cache in &fp.layers {
            for a in &cache.att {
                let row = a.slice(s![q, ..nv]);
                let mass = row.sum();
                weights.extend(row.iter().map(|w| w / mass));
            }
        }
        Ok(AttentionCapture {
            layers: self.cfg.layers,
            heads: self.cfg.heads,
            n_video: nv,
            query_position: q,
            weights,
        })
    }

    /// Runs the prefix and returns the last position's logits plus the cache.
    fn prefill(&self, clip: &FrameClip, ids: &[u32]) -> Result<(Array1<f64>, KvCache, usize), BackendError> {
        let patches = self.patches(clip)?;
        let fp = self.forward(&patches, ids)?;
        let last = fp.hidden.nrows() - 1;
        let logits = self.head(fp.hidden.slice(s![last..=last, ..])).row(0).to_owned();
        let mut cache = KvCache {
            k: Vec::new(),
            v: Vec::new(),
        };
        for lc in fp.layers {
            cache.k.push(lc.k);
            cache.v.push(lc.v);
        }
        Ok((logits, cache, fp.n_video))
    }

    /// Feeds one text token at text position `pos` through the cached stack.
    fn step(&self, cache: &mut KvCache, id: u32, pos: usize) -> Array1<f64> {
        let d = self.cfg.d;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Array2::zeros((1, d));
        {
            let mut row = x.row_mut(0);
            row.assign(&self.m(self.ids.tok).row(id as usize));
            row += &self.m(self.ids.pos_text).row(pos);
            row += &self.m(self.ids.modality).row(1);
        }
        for (l, li) in self.ids.layers.iter().enumerate() {
            let (h1, _) = ln_forward(&x, self.v(li.ln1_g), self.v(li.ln1_b));
            let q = h1.dot(&self.m(li.wq)) + self.v(li.bq);
            let k = h1.dot(&self.m(li.wk)) + self.v(li.bk);
            let v = h1.dot(&self.m(li.wv)) + self.v(li.bv);
            cache.k[l].push_row(k.row(0)).expect("cache width");
            cache.v[l].push_row(v.row(0)).expect("cache width");
            let mut o = Array2::zeros((1, d));
            for h in 0..self.cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut a = cache.k[l].slice(cols).dot(&q.slice(cols).row(0)) * scale;
                softmax_in_place(a.as_slice_mut().expect("contiguous"));
                o.slice_mut(cols).row_mut(0).assign(&a.dot(&cache.v[l].slice(cols)));
            }
            x = &x + &(o.dot(&self.m(li.wo)) + self.v(li.bo));
            let (h2, _) = ln_forward(&x, self.v(li.ln2_g), self.v(li.ln2_b));
            let g = (h2.dot(&self.m(li.w1)) + self.v(li.b1)).mapv(gelu);
            x = &x + &(g.dot(&self.m(li.w2)) + self.v(li.b2));
        }
        let (hidden, _) = ln_forward(&x, self.v(self.ids.lnf_g), self.v(self.ids.lnf_b));
        self.head(hidden.view()).row(0).to_owned()
    }

    /// Autoregressive decoding after `prefix`. `choose` maps a logit row to
    /// the next token; decoding stops at `eos`, after `max_new` tokens, or
    /// when the context is full.
    pub fn decode(
        &self,
        clip: &FrameClip,
        prefix: &[u32],
        max_new: usize,
        eos: u32,
        mut choose: impl FnMut(&Array1<f64>) -> u32,
    ) -> Result<Vec<u32>, BackendError> {
        let (mut logits, mut cache, nv) = self.prefill(clip, prefix)?;
        let mut out = Vec::new();
        let mut pos = prefix.len();
        while out.len() < max_new {
            let next = choose(&logits);
            if next == eos {
                break;
            }
            out.push(next);
            if nv + pos + 1 > self.cfg.context_len {
                log::debug!("generation stopped at the context limit {}", self.cfg.context_len);
                break;
            }
            logits = self.step(&mut cache, next, pos);
            pos += 1;
        }
        Ok(out)
    }
}

/// Two disjoint mutable gradient views (LayerNorm gain and bias).
fn split_two<'g>(model: &ToyModel, grad: &'g mut [f64], a: usize, b: usize) -> (ArrayViewMut1<'g, f64>, ArrayViewMut1<'g, f64>) {
    let (ra, rb) = (model.slots[a].range(), model.slots[b].range());
    assert!(ra.end <= rb.start, "slots are laid out in order");
    let (lo, hi) = grad.split_at_mut(rb.start);
    (ArrayViewMut1::from(&mut lo[ra]), ArrayViewMut1::from(&mut hi[..rb.len()]))
}
