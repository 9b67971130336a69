// SPDX-License-Identifier: Apache-2.0

//! Network components. Each `declare_*` registers the tensors that the
//! matching forward function reads, under the same name prefix.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autograd::Var;
use crate::dsp::StftPlan;
use crate::tensor::Tensor;

use super::config::{Bottleneck, ModelConfig};
use super::params::{BnUpdate, Init, ParameterSet, Registry};

/// Forward-pass context: parameter binding, normalization mode and the
/// synthesis plan shared by every inverse STFT in the network.
pub struct Ctx<'a> {
    params: &'a ParameterSet,
    cfg: &'a ModelConfig,
    plan: Arc<StftPlan>,
    len: usize,
    train: bool,
    track: bool,
    vars: RefCell<BTreeMap<String, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> Ctx<'a> {
    /// `train` selects batch statistics for batch normalization; `track`
    /// makes parameters differentiable leaves.
    pub fn new(
        params: &'a ParameterSet,
        cfg: &'a ModelConfig,
        plan: Arc<StftPlan>,
        len: usize,
        train: bool,
        track: bool,
    ) -> Self {
        Self {
            params,
            cfg,
            plan,
            len,
            train,
            track,
            vars: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        self.cfg
    }

    /// Output length of every waveform the network synthesizes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn plan(&self) -> &Arc<StftPlan> {
        &self.plan
    }

    fn has(&self, name: &str) -> bool {
        self.params.get(name).is_some()
    }

    /// The graph variable bound to a named parameter.
    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            return v.clone();
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not declared"))
            .clone();
        let v = if self.track {
            Var::param(t)
        } else {
            Var::constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Every parameter variable touched so far, by name.
    pub fn param_vars(&self) -> BTreeMap<String, Var> {
        self.vars.borrow().clone()
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    fn conv(
        &self,
        name: &str,
        x: &Var,
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
        groups: usize,
    ) -> Var {
        let w = self.p(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = if self.has(&bname) {
            Some(self.p(&bname))
        } else {
            None
        };
        x.conv2d(&w, b.as_ref(), stride, padding, dilation, groups)
    }

    fn conv1x1(&self, name: &str, x: &Var) -> Var {
        self.conv(name, x, (1, 1), (0, 0), (1, 1), 1)
    }

    fn conv3x3(&self, name: &str, x: &Var) -> Var {
        self.conv(name, x, (1, 1), (1, 1), (1, 1), 1)
    }

    fn bn(&self, name: &str, x: &Var) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        if self.train {
            let (y, mean, var) = x.batch_norm(&gamma, &beta);
            let s = x.shape();
            self.bn_updates.borrow_mut().push(BnUpdate {
                name: name.to_string(),
                mean,
                var,
                count: s[0] * s[2] * s[3],
            });
            y
        } else {
            let rm = self
                .params
                .buffer(&format!("{name}.running_mean"))
                .expect("running mean");
            let rv = self
                .params
                .buffer(&format!("{name}.running_var"))
                .expect("running var");
            x.batch_norm_frozen(&gamma, &beta, rm.data(), rv.data())
        }
    }

    fn linear(&self, name: &str, x: &Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let y = x.bmm(&w, false, true);
        let bias = format!("{name}.b");
        if self.params.get(&bias).is_none() {
            return y;
        }
        let b = self.p(&bias);
        let n = b.shape()[0];
        y.add(&b.reshape(&[1, n]))
    }
}

fn d_conv(
    reg: &mut Registry,
    name: &str,
    cout: usize,
    cin_g: usize,
    k: (usize, usize),
    bias: bool,
) {
    reg.param(
        format!("{name}.w"),
        &[cout, cin_g, k.0, k.1],
        Init::FanIn(cin_g * k.0 * k.1),
    );
    if bias {
        reg.param(format!("{name}.b"), &[cout], Init::Zeros);
    }
}

fn d_bn(reg: &mut Registry, name: &str, c: usize) {
    reg.param(format!("{name}.gamma"), &[c], Init::Ones);
    reg.param(format!("{name}.beta"), &[c], Init::Zeros);
    reg.buffer(format!("{name}.running_mean"), &[c], Init::Zeros);
    reg.buffer(format!("{name}.running_var"), &[c], Init::Ones);
}

fn d_linear(reg: &mut Registry, name: &str, cout: usize, cin: usize, bias: bool) {
    reg.param(format!("{name}.w"), &[cout, cin], Init::FanIn(cin));
    if bias {
        reg.param(format!("{name}.b"), &[cout], Init::Zeros);
    }
}

// ---- channel attention ----

fn d_channel_attention(reg: &mut Registry, name: &str) {
    d_conv(reg, &format!("{name}.c1"), 1, 1, (1, 3), true);
    d_conv(reg, &format!("{name}.c2"), 1, 1, (1, 3), true);
}

/// Per-channel gate in (0, 1), shaped `[B, C, 1, 1]`.
pub fn channel_gate(ctx: &Ctx, name: &str, x: &Var) -> Var {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let pooled = x.mean_axes(&[2, 3]).reshape(&[b, 1, 1, c]);
    let h = ctx
        .conv(&format!("{name}.c1"), &pooled, (1, 1), (0, 1), (1, 1), 1)
        .elu();
    let g = ctx
        .conv(&format!("{name}.c2"), &h, (1, 1), (0, 1), (1, 1), 1)
        .sigmoid();
    g.reshape(&[b, c, 1, 1])
}

pub fn channel_attention(ctx: &Ctx, name: &str, x: &Var) -> Var {
    x.mul(&channel_gate(ctx, name, x))
}

// ---- MB-conv ----

fn d_mb_conv(
    reg: &mut Registry,
    name: &str,
    cfg: &ModelConfig,
    cin: usize,
    cout: usize,
    bias: bool,
) {
    let k = (cfg.mb_kernel[0], cfg.mb_kernel[1]);
    for (i, _) in cfg.branch_dilations().iter().enumerate() {
        d_conv(reg, &format!("{name}.{i}.conv"), cout, cin, k, bias);
        d_channel_attention(reg, &format!("{name}.{i}.ca"));
    }
}

/// One dilated branch followed by its channel attention.
pub fn mb_branch(
    ctx: &Ctx,
    name: &str,
    i: usize,
    d: usize,
    x: &Var,
    stride: (usize, usize),
) -> Var {
    let [kh, kw] = ctx.cfg.mb_kernel;
    let pad = (d * (kh - 1) / 2, d * (kw - 1) / 2);
    let y = ctx.conv(&format!("{name}.{i}.conv"), x, stride, pad, (d, d), 1);
    channel_attention(ctx, &format!("{name}.{i}.ca"), &y)
}

/// Sum of the attended dilated branches.
pub fn mb_conv(ctx: &Ctx, name: &str, x: &Var, stride: (usize, usize)) -> Var {
    let dils = ctx.cfg.branch_dilations();
    let mut acc = mb_branch(ctx, name, 0, dils[0], x, stride);
    for (i, d) in dils.iter().enumerate().skip(1) {
        acc = acc.add(&mb_branch(ctx, name, i, *d, x, stride));
    }
    acc
}

// ---- render block ----

fn d_render_block(reg: &mut Registry, name: &str, cfg: &ModelConfig, c: usize) {
    d_mb_conv(reg, &format!("{name}.mb"), cfg, c, c, true);
    for j in 0..2 {
        d_conv(reg, &format!("{name}.conv{j}"), c, c, (3, 3), false);
        d_bn(reg, &format!("{name}.bn{j}"), c);
    }
}

pub fn render_block(ctx: &Ctx, name: &str, x: &Var) -> Var {
    let mut h = mb_conv(ctx, &format!("{name}.mb"), x, (1, 1));
    for j in 0..2 {
        h = ctx.conv3x3(&format!("{name}.conv{j}"), &h);
        h = ctx.bn(&format!("{name}.bn{j}"), &h).elu();
    }
    x.add(&h)
}

// ---- pre-encoder ----

fn d_pre_encoder(reg: &mut Registry, c: usize) {
    d_conv(reg, "pre.0.conv", c, 2, (3, 3), false);
    d_bn(reg, "pre.0.bn", c);
    d_conv(reg, "pre.1.conv", c, c, (3, 3), false);
    d_bn(reg, "pre.1.bn", c);
}

/// Two (3x3 conv, batch norm, ELU) blocks from the RI planes to `C_c` channels.
pub fn pre_encode(ctx: &Ctx, y_ri: &Var) -> Var {
    let h = ctx.bn("pre.0.bn", &ctx.conv3x3("pre.0.conv", y_ri)).elu();
    ctx.bn("pre.1.bn", &ctx.conv3x3("pre.1.conv", &h)).elu()
}

// ---- SSM block ----

fn d_ssm_block(reg: &mut Registry, name: &str, cfg: &ModelConfig) {
    let c = cfg.base_channels;
    d_conv(reg, &format!("{name}.in"), c, c, (1, 1), true);
    for j in 0..cfg.n_render_blocks {
        d_render_block(reg, &format!("{name}.render.{j}"), cfg, c);
    }
    d_conv(reg, &format!("{name}.out"), 2, c, (1, 1), true);
    d_conv(reg, &format!("{name}.feat.conv0"), c, 2, (3, 3), true);
    d_conv(reg, &format!("{name}.feat.conv1"), c, c, (3, 3), true);
    reg.param(format!("{name}.feat.ln.gamma"), &[c], Init::Ones);
    reg.param(format!("{name}.feat.ln.beta"), &[c], Init::Zeros);
}

pub struct SsmOutput {
    /// Rendering gate `[B, 2, T, F]`.
    pub g: Var,
    pub y_pre_spec: Var,
    /// `[B, len]`.
    pub y_pre_wave: Var,
    pub f_next: Var,
}

pub fn ssm_block(ctx: &Ctx, name: &str, f: &Var, y_ri: &Var) -> SsmOutput {
    let mut h = ctx.conv1x1(&format!("{name}.in"), f);
    for j in 0..ctx.cfg.n_render_blocks {
        h = render_block(ctx, &format!("{name}.render.{j}"), &h);
    }
    let g = ctx.conv1x1(&format!("{name}.out"), &h).sigmoid();
    let y_pre_spec = g.mul(y_ri);
    let y_pre_wave = y_pre_spec.istft(&ctx.plan, ctx.len);
    let u = ctx.conv3x3(&format!("{name}.feat.conv0"), &y_pre_spec);
    let u = ctx.conv3x3(&format!("{name}.feat.conv1"), &u);
    let f_next = u
        .channel_layer_norm(
            &ctx.p(&format!("{name}.feat.ln.gamma")),
            &ctx.p(&format!("{name}.feat.ln.beta")),
        )
        .elu();
    SsmOutput {
        g,
        y_pre_spec,
        y_pre_wave,
        f_next,
    }
}

// ---- cross-attention ----

fn d_cross_attention(reg: &mut Registry, name: &str, c: usize) {
    for part in ["a", "b", "m"] {
        d_conv(reg, &format!("{name}.{part}"), c, c, (1, 1), true);
    }
}

/// Mask in (0, 1) computed from both streams.
pub fn cross_mask(ctx: &Ctx, name: &str, f_self: &Var, f_other: &Var) -> Var {
    let a = ctx.conv1x1(&format!("{name}.a"), f_self).tanh();
    let b = ctx.conv1x1(&format!("{name}.b"), f_other).tanh();
    ctx.conv1x1(&format!("{name}.m"), &a.mul(&b)).sigmoid()
}

pub fn cross_attention(ctx: &Ctx, name: &str, f_self: &Var, f_other: &Var) -> Var {
    f_self
        .mul(&cross_mask(ctx, name, f_self, f_other))
        .add(f_self)
}

// ---- IFM ----

fn d_ifm(reg: &mut Registry, name: &str, n_inputs: usize, c: usize) {
    let cin = (n_inputs + 1) * c;
    d_conv(reg, &format!("{name}.dw"), cin, 1, (3, 3), false);
    d_conv(reg, &format!("{name}.pw"), c, cin, (1, 1), true);
    d_channel_attention(reg, &format!("{name}.ca"));
}

/// Concatenation, depthwise-separable 3x3 convolution and channel attention.
pub fn ifm(ctx: &Ctx, name: &str, inputs: &[Var], y_c: &Var) -> Var {
    let mut all = inputs.to_vec();
    all.push(y_c.clone());
    let x = Var::concat(&all, 1);
    let cin = x.shape()[1];
    let h = ctx.conv(&format!("{name}.dw"), &x, (1, 1), (1, 1), (1, 1), cin);
    let h = ctx.conv1x1(&format!("{name}.pw"), &h);
    channel_attention(ctx, &format!("{name}.ca"), &h)
}

// ---- recurrent feed-forward ----

fn d_gru(reg: &mut Registry, name: &str, cin: usize, h: usize) {
    reg.param(format!("{name}.w_ih"), &[3 * h, cin], Init::FanIn(cin));
    reg.param(format!("{name}.w_hh"), &[3 * h, h], Init::FanIn(h));
    reg.param(format!("{name}.b_ih"), &[3 * h], Init::Zeros);
    reg.param(format!("{name}.b_hh"), &[3 * h], Init::Zeros);
}

/// Gated recurrent layer over `[S, T, cin]`, returning `[S, T, h]`.
pub fn gru(ctx: &Ctx, name: &str, x: &Var, reverse: bool) -> Var {
    let (s, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let w_ih = ctx.p(&format!("{name}.w_ih"));
    let w_hh = ctx.p(&format!("{name}.w_hh"));
    let h3 = w_ih.shape()[0];
    let hd = h3 / 3;
    let b_ih = ctx.p(&format!("{name}.b_ih")).reshape(&[1, h3]);
    let b_hh = ctx.p(&format!("{name}.b_hh")).reshape(&[1, h3]);
    let gi = x
        .reshape(&[s * t, cin])
        .bmm(&w_ih, false, true)
        .add(&b_ih)
        .reshape(&[s, t, h3]);
    let mut h = Var::constant(Tensor::zeros(&[s, hd]));
    let mut outs: Vec<Option<Var>> = vec![None; t];
    let steps: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in steps {
        let gx = gi.slice(1, step, 1).reshape(&[s, h3]);
        let gh = h.bmm(&w_hh, false, true).add(&b_hh);
        let r = gx.slice(1, 0, hd).add(&gh.slice(1, 0, hd)).sigmoid();
        let z = gx.slice(1, hd, hd).add(&gh.slice(1, hd, hd)).sigmoid();
        let n = gx
            .slice(1, 2 * hd, hd)
            .add(&r.mul(&gh.slice(1, 2 * hd, hd)))
            .tanh();
        h = n.add(&z.mul(&h.sub(&n)));
        outs[step] = Some(h.reshape(&[s, 1, hd]));
    }
    let outs: Vec<Var> = outs
        .into_iter()
        .map(|o| o.expect("every step visited"))
        .collect();
    Var::concat(&outs, 1)
}

fn d_gru_ffn(reg: &mut Registry, name: &str, c: usize, h: usize) {
    d_gru(reg, &format!("{name}.fwd"), c, h);
    d_gru(reg, &format!("{name}.bwd"), c, h);
    d_linear(reg, &format!("{name}.proj"), c, 2 * h, true);
}

/// Bidirectional recurrence over time for every (batch, frequency) row,
/// projected back to `C` channels.
pub fn gru_ffn(ctx: &Ctx, name: &str, x: &Var) -> Var {
    let s = x.shape();
    let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
    let seq = x.permute(&[0, 3, 2, 1]).reshape(&[b * f, t, c]);
    let fwd = gru(ctx, &format!("{name}.fwd"), &seq, false);
    let bwd = gru(ctx, &format!("{name}.bwd"), &seq, true);
    let both = Var::concat(&[fwd, bwd], 2);
    let h2 = both.shape()[2];
    ctx.linear(&format!("{name}.proj"), &both.reshape(&[b * f * t, h2]))
        .reshape(&[b, f, t, c])
        .permute(&[0, 3, 2, 1])
}

// ---- Self-CTFA ----

fn d_self_ctfa(reg: &mut Registry, name: &str, c: usize, d: usize) {
    for axis in ["c", "t", "f"] {
        d_linear(reg, &format!("{name}.{axis}.q"), d, 1, true);
        d_linear(reg, &format!("{name}.{axis}.k"), d, 1, false);
    }
    d_conv(reg, &format!("{name}.v"), c, c, (1, 1), true);
    d_gru_ffn(reg, &format!("{name}.ffn"), c, d);
}

/// Attention map `[B, L, L]` from a pooled sequence `[B, L]`.
fn axis_attention(ctx: &Ctx, name: &str, pooled: &Var) -> Var {
    let (b, l) = (pooled.shape()[0], pooled.shape()[1]);
    let flat = pooled.reshape(&[b * l, 1]);
    let q = ctx.linear(&format!("{name}.q"), &flat);
    let d = q.shape()[1];
    let q = q.reshape(&[b, l, d]);
    let k = ctx.linear(&format!("{name}.k"), &flat).reshape(&[b, l, d]);
    q.bmm(&k, false, true)
        .scale(1.0 / (d as f64).sqrt())
        .softmax()
}

/// Channel, time and frequency attention maps of `x`.
pub fn ctfa_maps(ctx: &Ctx, name: &str, x: &Var) -> [Var; 3] {
    let s = x.shape();
    let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
    let pc = x.mean_axes(&[2, 3]).reshape(&[b, c]);
    let pt = x.mean_axes(&[1, 3]).reshape(&[b, t]);
    let pf = x.mean_axes(&[1, 2]).reshape(&[b, f]);
    [
        axis_attention(ctx, &format!("{name}.c"), &pc),
        axis_attention(ctx, &format!("{name}.t"), &pt),
        axis_attention(ctx, &format!("{name}.f"), &pf),
    ]
}

pub fn self_ctfa(ctx: &Ctx, name: &str, x: &Var) -> Var {
    let s = x.shape();
    let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
    let [mc, mt, mf] = ctfa_maps(ctx, name, x);
    let v = ctx.conv1x1(&format!("{name}.v"), x);
    let ac = mc
        .bmm(&v.reshape(&[b, c, t * f]), false, false)
        .reshape(&[b, c, t, f]);
    let at = mt
        .bmm(
            &v.permute(&[0, 2, 1, 3]).reshape(&[b, t, c * f]),
            false,
            false,
        )
        .reshape(&[b, t, c, f])
        .permute(&[0, 2, 1, 3]);
    let af = mf
        .bmm(
            &v.permute(&[0, 3, 1, 2]).reshape(&[b, f, c * t]),
            false,
            false,
        )
        .reshape(&[b, f, c, t])
        .permute(&[0, 2, 3, 1]);
    let attended = ac.add(&at).add(&af);
    x.add(&gru_ffn(ctx, &format!("{name}.ffn"), &attended))
}

// ---- plain self-attention ----

fn d_plain_attention(reg: &mut Registry, name: &str, c: usize, d: usize) {
    d_conv(reg, &format!("{name}.q"), d, c, (1, 1), true);
    d_conv(reg, &format!("{name}.k"), d, c, (1, 1), false);
    d_conv(reg, &format!("{name}.v"), c, c, (1, 1), true);
    d_gru_ffn(reg, &format!("{name}.ffn"), c, d);
}

/// Single-head scaled dot-product attention over all time-frequency positions.
pub fn plain_self_attention(ctx: &Ctx, name: &str, x: &Var) -> Var {
    let s = x.shape();
    let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
    let p = t * f;
    let q = ctx.conv1x1(&format!("{name}.q"), x);
    let d = q.shape()[1];
    let q = q.reshape(&[b, d, p]);
    let k = ctx.conv1x1(&format!("{name}.k"), x).reshape(&[b, d, p]);
    let v = ctx.conv1x1(&format!("{name}.v"), x).reshape(&[b, c, p]);
    let m = q
        .bmm(&k, true, false)
        .scale(1.0 / (d as f64).sqrt())
        .softmax();
    let attended = v.bmm(&m, false, true).reshape(&[b, c, t, f]);
    x.add(&gru_ffn(ctx, &format!("{name}.ffn"), &attended))
}

// ---- BSD stage ----

fn d_bsd(reg: &mut Registry, cfg: &ModelConfig) {
    let [c1, c2, c3] = cfg.bsd_encoder_channels;
    let mut cin = 2 * cfg.base_channels;
    for (j, c) in [c1, c2, c3].iter().enumerate() {
        d_mb_conv(reg, &format!("bsd.enc.{j}.mb"), cfg, cin, *c, false);
        d_bn(reg, &format!("bsd.enc.{j}.bn"), *c);
        cin = *c;
    }
    for j in 0..cfg.n_ctfa {
        match cfg.bottleneck {
            Bottleneck::Ctfa => d_self_ctfa(reg, &format!("bsd.ctfa.{j}"), c3, cfg.ctfa_hidden),
            Bottleneck::PlainSelfAttention => {
                d_plain_attention(reg, &format!("bsd.sa.{j}"), c3, cfg.ctfa_hidden)
            }
        }
    }
    for (j, (cin, cout)) in [(2 * c3, c2), (2 * c2, c1), (2 * c1, c1)]
        .iter()
        .enumerate()
    {
        reg.param(
            format!("bsd.dec.{j}.convt.w"),
            &[*cin, *cout, 3, 3],
            Init::FanIn(cin * 9),
        );
        d_bn(reg, &format!("bsd.dec.{j}.bn"), *cout);
    }
    d_conv(reg, "bsd.out", 2, c1, (1, 1), true);
}

pub struct BsdOutput {
    pub mask: Var,
    /// `[B, len]`.
    pub s_pre: Var,
}

pub fn bsd_forward(ctx: &Ctx, ifm_l: &Var, ifm_r: &Var, y_ri: &Var) -> BsdOutput {
    let mut x = Var::concat(&[ifm_l.clone(), ifm_r.clone()], 1);
    let mut skips = Vec::with_capacity(3);
    for j in 0..3 {
        let h = mb_conv(ctx, &format!("bsd.enc.{j}.mb"), &x, (1, 2));
        x = ctx.bn(&format!("bsd.enc.{j}.bn"), &h).elu();
        skips.push(x.clone());
    }
    for j in 0..ctx.cfg.n_ctfa {
        x = match ctx.cfg.bottleneck {
            Bottleneck::Ctfa => self_ctfa(ctx, &format!("bsd.ctfa.{j}"), &x),
            Bottleneck::PlainSelfAttention => plain_self_attention(ctx, &format!("bsd.sa.{j}"), &x),
        };
    }
    let f_full = y_ri.shape()[3];
    let targets = [skips[1].shape()[3], skips[0].shape()[3], f_full];
    for (j, target) in targets.iter().enumerate() {
        let skip = &skips[2 - j];
        let cat = Var::concat(&[x, skip.clone()], 1);
        let f_in = cat.shape()[3];
        let natural = 2 * f_in - 1;
        let out_pad = target.saturating_sub(natural).min(1);
        let w = ctx.p(&format!("bsd.dec.{j}.convt.w"));
        let mut h = cat.conv_transpose2d(&w, None, (1, 2), (1, 1), (0, out_pad));
        if h.shape()[3] > *target {
            h = h.slice(3, 0, *target);
        }
        x = ctx.bn(&format!("bsd.dec.{j}.bn"), &h).elu();
    }
    let mask = ctx.conv1x1("bsd.out", &x).sigmoid();
    let s_pre = mask.mul(y_ri).istft(&ctx.plan, ctx.len);
    BsdOutput { mask, s_pre }
}

// ---- full model ----

/// Whether block `i` carries cross-attention parameters.
fn has_cross_attention(cfg: &ModelConfig, i: usize) -> bool {
    cfg.use_cross_attention && (cfg.use_ifm || i + 1 == cfg.n_ssm_pairs)
}

pub(crate) fn declare_model(reg: &mut Registry, cfg: &ModelConfig) {
    let c = cfg.base_channels;
    d_pre_encoder(reg, c);
    for side in ["l", "r"] {
        for i in 0..cfg.n_ssm_pairs {
            d_ssm_block(reg, &format!("ssm.{side}.{i}"), cfg);
            if has_cross_attention(cfg, i) {
                d_cross_attention(reg, &format!("xattn.{side}.{i}"), c);
            }
        }
        if cfg.use_ifm {
            d_ifm(reg, &format!("ifm.{side}"), cfg.n_ssm_pairs, c);
        }
    }
    d_bsd(reg, cfg);
}

/// Names of the convolutions whose sigmoid outputs are masks.
pub(crate) fn mask_output_convs(cfg: &ModelConfig) -> Vec<String> {
    let mut v: Vec<String> = ["l", "r"]
        .iter()
        .flat_map(|side| (0..cfg.n_ssm_pairs).map(move |i| format!("ssm.{side}.{i}.out")))
        .collect();
    v.push("bsd.out".into());
    v
}

pub struct ModelOutput {
    pub s_pre: Var,
    pub mask: Var,
    pub y_pre_l: Vec<Var>,
    pub y_pre_r: Vec<Var>,
    pub gates_l: Vec<Var>,
    pub gates_r: Vec<Var>,
}

/// Full network on `[B, 2, T, F]` RI planes.
pub fn forward(ctx: &Ctx, y_ri: &Var) -> ModelOutput {
    let cfg = ctx.cfg;
    let y_c = pre_encode(ctx, y_ri);
    let (mut f_l, mut f_r) = (y_c.clone(), y_c.clone());
    let n = cfg.n_ssm_pairs;
    let mut out = ModelOutput {
        s_pre: y_c.clone(),
        mask: y_c.clone(),
        y_pre_l: Vec::with_capacity(n),
        y_pre_r: Vec::with_capacity(n),
        gates_l: Vec::with_capacity(n),
        gates_r: Vec::with_capacity(n),
    };
    let mut feats_l = Vec::with_capacity(n);
    let mut feats_r = Vec::with_capacity(n);
    for i in 0..n {
        let sl = ssm_block(ctx, &format!("ssm.l.{i}"), &f_l, y_ri);
        let sr = ssm_block(ctx, &format!("ssm.r.{i}"), &f_r, y_ri);
        f_l = sl.f_next;
        f_r = sr.f_next;
        out.y_pre_l.push(sl.y_pre_wave);
        out.y_pre_r.push(sr.y_pre_wave);
        out.gates_l.push(sl.g);
        out.gates_r.push(sr.g);
        if !cfg.use_ifm && i + 1 < n {
            continue;
        }
        if has_cross_attention(cfg, i) {
            feats_l.push(cross_attention(ctx, &format!("xattn.l.{i}"), &f_l, &f_r));
            feats_r.push(cross_attention(ctx, &format!("xattn.r.{i}"), &f_r, &f_l));
        } else {
            feats_l.push(f_l.clone());
            feats_r.push(f_r.clone());
        }
    }
    let (agg_l, agg_r) = if cfg.use_ifm {
        (
            ifm(ctx, "ifm.l", &feats_l, &y_c),
            ifm(ctx, "ifm.r", &feats_r, &y_c),
        )
    } else {
        (
            feats_l.pop().expect("one pair"),
            feats_r.pop().expect("one pair"),
        )
    };
    let bsd = bsd_forward(ctx, &agg_l, &agg_r, y_ri);
    out.s_pre = bsd.s_pre;
    out.mask = bsd.mask;
    out
}
