//! Parameter layout and the encoder-decoder forward pass, written once
//! over the [`Ctx`] abstraction so the same code runs under plain
//! values, dual numbers, and the gradient tape.
//!
//! The encoder turns the scalar interval time into a one-token context;
//! the decoder reads the outcome string shifted right behind a start
//! token, attends causally to itself and to the time context, and emits
//! four conditional probabilities per slot through a final softmax.

use rand::Rng;

use crate::autodiff::Ctx;

/// Token id that precedes the first outcome in the decoder input.
pub(crate) const START_TOKEN: usize = 4;

const LN_EPS: f64 = 1e-5;

/// Contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Seg {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnSeg {
    pub gain: Seg,
    pub bias: Seg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnSeg {
    pub wq: Seg,
    pub bq: Seg,
    pub wk: Seg,
    pub bk: Seg,
    pub wv: Seg,
    pub bv: Seg,
    pub wo: Seg,
    pub bo: Seg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfSeg {
    pub w1: Seg,
    pub b1: Seg,
    pub w2: Seg,
    pub b2: Seg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncBlockSeg {
    pub ln1: LnSeg,
    pub attn: AttnSeg,
    pub ln2: LnSeg,
    pub ff: FfSeg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecBlockSeg {
    pub ln1: LnSeg,
    pub self_attn: AttnSeg,
    pub ln2: LnSeg,
    pub cross_attn: AttnSeg,
    pub ln3: LnSeg,
    pub ff: FfSeg,
}

/// Offsets of every weight family inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub n: usize,
    pub d_h: usize,
    pub heads: usize,
    pub ff: usize,
    pub token_embed: Seg,
    pub pos_embed: Seg,
    pub time_w: Seg,
    pub time_b: Seg,
    pub enc: Vec<EncBlockSeg>,
    pub dec: Vec<DecBlockSeg>,
    pub final_ln: LnSeg,
    pub head_w: Seg,
    pub head_b: Seg,
    pub total: usize,
}

struct Alloc {
    next: usize,
}

impl Alloc {
    fn seg(&mut self, len: usize) -> Seg {
        let start = self.next;
        self.next += len;
        Seg { start, len }
    }

    fn ln(&mut self, d: usize) -> LnSeg {
        LnSeg { gain: self.seg(d), bias: self.seg(d) }
    }

    fn attn(&mut self, d: usize) -> AttnSeg {
        AttnSeg {
            wq: self.seg(d * d),
            bq: self.seg(d),
            wk: self.seg(d * d),
            bk: self.seg(d),
            wv: self.seg(d * d),
            bv: self.seg(d),
            wo: self.seg(d * d),
            bo: self.seg(d),
        }
    }

    fn ff(&mut self, d: usize, ff: usize) -> FfSeg {
        FfSeg { w1: self.seg(d * ff), b1: self.seg(ff), w2: self.seg(ff * d), b2: self.seg(d) }
    }
}

impl ParamLayout {
    pub fn new(n: usize, d_h: usize, heads: usize, ff: usize, enc_blocks: usize, dec_blocks: usize) -> Self {
        let mut a = Alloc { next: 0 };
        let token_embed = a.seg(5 * d_h);
        let pos_embed = a.seg(n * d_h);
        let time_w = a.seg(d_h);
        let time_b = a.seg(d_h);
        let enc = (0..enc_blocks)
            .map(|_| EncBlockSeg { ln1: a.ln(d_h), attn: a.attn(d_h), ln2: a.ln(d_h), ff: a.ff(d_h, ff) })
            .collect();
        let dec = (0..dec_blocks)
            .map(|_| DecBlockSeg {
                ln1: a.ln(d_h),
                self_attn: a.attn(d_h),
                ln2: a.ln(d_h),
                cross_attn: a.attn(d_h),
                ln3: a.ln(d_h),
                ff: a.ff(d_h, ff),
            })
            .collect();
        let final_ln = a.ln(d_h);
        let head_w = a.seg(d_h * 4);
        let head_b = a.seg(4);
        ParamLayout {
            n,
            d_h,
            heads,
            ff,
            token_embed,
            pos_embed,
            time_w,
            time_b,
            enc,
            dec,
            final_ln,
            head_w,
            head_b,
            total: a.next,
        }
    }
}

struct Init<'a, R: Rng> {
    theta: Vec<f64>,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn uniform(&mut self, seg: Seg, scale: f64) {
        for k in 0..seg.len {
            self.theta[seg.start + k] = (2.0 * self.rng.gen::<f64>() - 1.0) * scale;
        }
    }

    fn ln(&mut self, ln: LnSeg) {
        for k in 0..ln.gain.len {
            self.theta[ln.gain.start + k] = 1.0;
        }
    }

    fn attn(&mut self, attn: AttnSeg, scale: f64) {
        for w in [attn.wq, attn.wk, attn.wv, attn.wo] {
            self.uniform(w, scale);
        }
    }

    fn ff(&mut self, ff: FfSeg, in_scale: f64, hidden_scale: f64) {
        self.uniform(ff.w1, in_scale);
        self.uniform(ff.w2, hidden_scale);
    }
}

/// Deterministic parameter initialization: uniform in +-sqrt(1/fan_in)
/// for projections and embeddings, unit gains and zero biases for the
/// layer norms.
pub(crate) fn init_theta<R: Rng>(layout: &ParamLayout, rng: &mut R) -> Vec<f64> {
    let mut init = Init { theta: vec![0.0; layout.total], rng };
    let emb_scale = (1.0 / layout.d_h as f64).sqrt();
    let ff_scale = (1.0 / layout.ff as f64).sqrt();
    init.uniform(layout.token_embed, emb_scale);
    init.uniform(layout.pos_embed, emb_scale);
    init.uniform(layout.time_w, 0.5);
    init.uniform(layout.time_b, 0.5);
    for blk in &layout.enc {
        init.ln(blk.ln1);
        init.attn(blk.attn, emb_scale);
        init.ln(blk.ln2);
        init.ff(blk.ff, emb_scale, ff_scale);
    }
    for blk in &layout.dec {
        init.ln(blk.ln1);
        init.attn(blk.self_attn, emb_scale);
        init.ln(blk.ln2);
        init.attn(blk.cross_attn, emb_scale);
        init.ln(blk.ln3);
        init.ff(blk.ff, emb_scale, ff_scale);
    }
    init.ln(layout.final_ln);
    init.uniform(layout.head_w, emb_scale);
    init.theta
}

fn affine<C: Ctx>(
    ctx: &mut C,
    x: &[C::V],
    rows: usize,
    theta: &[C::V],
    w: Seg,
    b: Seg,
    dout: usize,
) -> Vec<C::V> {
    let din = x.len() / rows;
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = theta[b.start + o];
            for i in 0..din {
                let prod = ctx.mul(x[r * din + i], theta[w.start + i * dout + o]);
                acc = ctx.add(acc, prod);
            }
            out.push(acc);
        }
    }
    out
}

fn layer_norm<C: Ctx>(
    ctx: &mut C,
    x: &[C::V],
    rows: usize,
    d: usize,
    theta: &[C::V],
    ln: LnSeg,
) -> Vec<C::V> {
    let inv_d = ctx.lit(1.0 / d as f64);
    let eps = ctx.lit(LN_EPS);
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut sum = row[0];
        for &v in &row[1..] {
            sum = ctx.add(sum, v);
        }
        let mean = ctx.mul(sum, inv_d);
        let diffs: Vec<C::V> = row.iter().map(|&v| ctx.sub(v, mean)).collect();
        let mut var = ctx.lit(0.0);
        for &dv in &diffs {
            let sq = ctx.mul(dv, dv);
            var = ctx.add(var, sq);
        }
        var = ctx.mul(var, inv_d);
        let shifted = ctx.add(var, eps);
        let denom = ctx.sqrt(shifted);
        for (i, &dv) in diffs.iter().enumerate() {
            let scaled = ctx.div(dv, denom);
            let gained = ctx.mul(scaled, theta[ln.gain.start + i]);
            out.push(ctx.add(gained, theta[ln.bias.start + i]));
        }
    }
    out
}

/// Softmax with the maximum subtracted as a constant; the shift leaves
/// both the value and every derivative unchanged.
fn softmax<C: Ctx>(ctx: &mut C, logits: &[C::V]) -> Vec<C::V> {
    let max = logits
        .iter()
        .map(|&l| ctx.val(l))
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = ctx.lit(max);
    let exps: Vec<C::V> = logits
        .iter()
        .map(|&l| {
            let c = ctx.sub(l, shift);
            ctx.exp(c)
        })
        .collect();
    let mut sum = exps[0];
    for &e in &exps[1..] {
        sum = ctx.add(sum, e);
    }
    exps.iter().map(|&e| ctx.div(e, sum)).collect()
}

/// Multi-head attention of `q_rows` query states over `kv_rows`
/// key/value states; with `causal` query i sees keys 0..=i.
#[allow(clippy::too_many_arguments)]
fn attention<C: Ctx>(
    ctx: &mut C,
    x_q: &[C::V],
    q_rows: usize,
    x_kv: &[C::V],
    kv_rows: usize,
    theta: &[C::V],
    seg: AttnSeg,
    d_h: usize,
    heads: usize,
    causal: bool,
) -> Vec<C::V> {
    let dk = d_h / heads;
    let q = affine(ctx, x_q, q_rows, theta, seg.wq, seg.bq, d_h);
    let k = affine(ctx, x_kv, kv_rows, theta, seg.wk, seg.bk, d_h);
    let v = affine(ctx, x_kv, kv_rows, theta, seg.wv, seg.bv, d_h);
    let scale = ctx.lit(1.0 / (dk as f64).sqrt());

    let zero = ctx.lit(0.0);
    let mut mixed = vec![zero; q_rows * d_h];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..q_rows {
            let visible = if causal { (i + 1).min(kv_rows) } else { kv_rows };
            let mut scores = Vec::with_capacity(visible);
            for j in 0..visible {
                let mut dot = ctx.lit(0.0);
                for c in 0..dk {
                    let prod = ctx.mul(q[i * d_h + off + c], k[j * d_h + off + c]);
                    dot = ctx.add(dot, prod);
                }
                scores.push(ctx.mul(dot, scale));
            }
            let weights = softmax(ctx, &scores);
            for c in 0..dk {
                let mut acc = ctx.lit(0.0);
                for (j, &wj) in weights.iter().enumerate() {
                    let prod = ctx.mul(wj, v[j * d_h + off + c]);
                    acc = ctx.add(acc, prod);
                }
                mixed[i * d_h + off + c] = acc;
            }
        }
    }
    affine(ctx, &mixed, q_rows, theta, seg.wo, seg.bo, d_h)
}

fn feed_forward<C: Ctx>(
    ctx: &mut C,
    x: &[C::V],
    rows: usize,
    theta: &[C::V],
    seg: FfSeg,
    d_h: usize,
    ff: usize,
) -> Vec<C::V> {
    let hidden = affine(ctx, x, rows, theta, seg.w1, seg.b1, ff);
    let activated: Vec<C::V> = hidden.iter().map(|&h| ctx.tanh(h)).collect();
    affine(ctx, &activated, rows, theta, seg.w2, seg.b2, d_h)
}

fn residual_add<C: Ctx>(ctx: &mut C, x: &mut [C::V], delta: &[C::V]) {
    for (xi, &di) in x.iter_mut().zip(delta) {
        *xi = ctx.add(*xi, di);
    }
}

/// Encodes the normalized interval time into the one-token context the
/// decoder cross-attends to.
pub(crate) fn encode<C: Ctx>(
    ctx: &mut C,
    layout: &ParamLayout,
    theta: &[C::V],
    s: C::V,
) -> Vec<C::V> {
    let d = layout.d_h;
    let mut x: Vec<C::V> = (0..d)
        .map(|i| {
            let scaled = ctx.mul(theta[layout.time_w.start + i], s);
            let shifted = ctx.add(scaled, theta[layout.time_b.start + i]);
            ctx.tanh(shifted)
        })
        .collect();
    for blk in &layout.enc {
        let normed = layer_norm(ctx, &x, 1, d, theta, blk.ln1);
        let attended = attention(ctx, &normed, 1, &normed, 1, theta, blk.attn, d, layout.heads, false);
        residual_add(ctx, &mut x, &attended);
        let normed = layer_norm(ctx, &x, 1, d, theta, blk.ln2);
        let ffed = feed_forward(ctx, &normed, 1, theta, blk.ff, d, layout.ff);
        residual_add(ctx, &mut x, &ffed);
    }
    x
}

/// Conditional distributions of all slots given the shifted outcome
/// string and the encoded time context.  Causal masking makes slot k
/// depend only on tokens before k.
pub(crate) fn decode_conditionals<C: Ctx>(
    ctx: &mut C,
    layout: &ParamLayout,
    theta: &[C::V],
    context: &[C::V],
    tokens: &[u8],
) -> Vec<[C::V; 4]> {
    let n = layout.n;
    let d = layout.d_h;
    debug_assert_eq!(tokens.len(), n);

    let mut x = Vec::with_capacity(n * d);
    for slot in 0..n {
        let token = if slot == 0 { START_TOKEN } else { tokens[slot - 1] as usize };
        for i in 0..d {
            let emb = theta[layout.token_embed.start + token * d + i];
            let pos = theta[layout.pos_embed.start + slot * d + i];
            x.push(ctx.add(emb, pos));
        }
    }

    for blk in &layout.dec {
        let normed = layer_norm(ctx, &x, n, d, theta, blk.ln1);
        let attended =
            attention(ctx, &normed, n, &normed, n, theta, blk.self_attn, d, layout.heads, true);
        residual_add(ctx, &mut x, &attended);
        let normed = layer_norm(ctx, &x, n, d, theta, blk.ln2);
        let crossed =
            attention(ctx, &normed, n, context, 1, theta, blk.cross_attn, d, layout.heads, false);
        residual_add(ctx, &mut x, &crossed);
        let normed = layer_norm(ctx, &x, n, d, theta, blk.ln3);
        let ffed = feed_forward(ctx, &normed, n, theta, blk.ff, d, layout.ff);
        residual_add(ctx, &mut x, &ffed);
    }

    let normed = layer_norm(ctx, &x, n, d, theta, layout.final_ln);
    let logits = affine(ctx, &normed, n, theta, layout.head_w, layout.head_b, 4);
    (0..n)
        .map(|slot| {
            let row = softmax(ctx, &logits[slot * 4..(slot + 1) * 4]);
            [row[0], row[1], row[2], row[3]]
        })
        .collect()
}

/// Joint probability of one outcome string under an already encoded
/// time context: the product of its slot conditionals.
pub(crate) fn joint_probability<C: Ctx>(
    ctx: &mut C,
    layout: &ParamLayout,
    theta: &[C::V],
    context: &[C::V],
    tokens: &[u8],
) -> C::V {
    let conds = decode_conditionals(ctx, layout, theta, context, tokens);
    let mut p = conds[0][tokens[0] as usize];
    for (slot, cond) in conds.iter().enumerate().skip(1) {
        p = ctx.mul(p, cond[tokens[slot] as usize]);
    }
    p
}
