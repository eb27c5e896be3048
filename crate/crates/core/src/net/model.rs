//! FDMDS stem, cross-modal attention encoder, decoder and prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::NetConfig;
use crate::autodiff::{attention, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Modality;

#[derive(Debug, Clone)]
pub struct ConvP {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Convolution, instance norm, leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlockP {
    pub conv: ConvP,
    pub norm: NormP,
}

#[derive(Debug, Clone)]
pub struct LinearP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct FdmdsP {
    pub block1: ConvBlockP,
    pub block2: ConvBlockP,
    pub conv3: ConvP,
}

#[derive(Debug, Clone)]
pub struct QkvP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
}

#[derive(Debug, Clone)]
pub struct CrossBlockP {
    pub norm1: NormP,
    /// One shared triple, or one per modality.
    pub qkv: Vec<QkvP>,
    pub proj: LinearP,
    pub norm2: NormP,
    pub ffn1: LinearP,
    pub ffn2: LinearP,
}

#[derive(Debug, Clone)]
pub struct StageP {
    pub blocks: Vec<CrossBlockP>,
    pub fuse: ConvBlockP,
    /// Per-modality stride-2 downsampling into the next stage.
    pub down: Option<Vec<ConvP>>,
}

#[derive(Debug, Clone)]
pub struct NetParams {
    pub fdmds: Option<FdmdsP>,
    pub embed: Vec<ConvBlockP>,
    pub stages: Vec<StageP>,
    pub skip: ConvBlockP,
    /// `merge[l]` produces the decoded map at encoder scale `l`.
    pub merge: Vec<ConvBlockP>,
    pub up: Vec<ConvBlockP>,
    pub refine: ConvBlockP,
    pub head: ConvP,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Init<'_, T> {
    /// Values depend only on the seed and `key`, so per-modality copies
    /// sharing a key start identical.
    fn normal(&mut self, name: String, key: &str, shape: &[usize], std: f64) -> ParamId {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(key.as_bytes());
        let d = h.finalize();
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(
            d[..8].try_into().expect("32-byte digest"),
        ));
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
        self.store
            .add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::of(v)))
    }

    fn conv(
        &mut self,
        name: &str,
        key: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvP {
        let fan_in = cin * k * k * k;
        ConvP {
            w: self.normal(
                format!("{name}.w"),
                &format!("{key}.w"),
                &[cout, cin, k, k, k],
                (2.0 / fan_in as f64).sqrt(),
            ),
            b: Some(self.constant(format!("{name}.b"), &[cout], 0.0)),
            stride,
            pad,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            gamma: self.constant(format!("{name}.gamma"), &[c], 1.0),
            beta: self.constant(format!("{name}.beta"), &[c], 0.0),
        }
    }

    fn block(
        &mut self,
        name: &str,
        key: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvBlockP {
        ConvBlockP {
            conv: self.conv(
                &format!("{name}.conv"),
                &format!("{key}.conv"),
                cin,
                cout,
                k,
                stride,
                pad,
            ),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, bias: bool, gain: f64) -> LinearP {
        LinearP {
            w: self.normal(
                format!("{name}.w"),
                &format!("{name}.w"),
                &[cin, cout],
                (gain / cin as f64).sqrt(),
            ),
            b: bias.then(|| self.constant(format!("{name}.b"), &[cout], 0.0)),
        }
    }
}

/// Outputs of the encoder for one sample.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Fused map `[1, C_l, D_l, H_l, W_l]` at every encoder scale.
    pub fused: Vec<Var>,
    /// Full-resolution shallow features of the encoder input.
    pub skip: Var,
    /// Attention maps of every block, 16 per block in `(m, m')` order.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every decoder skip input with zeros (for sensitivity checks).
    pub zero_skips: bool,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// FDMDS output `[B, 4, D, H, W]` when the stem is enabled.
    pub restored: Option<Var>,
    pub logits: Var,
    /// Sigmoid probabilities `[B, 3, D, H, W]` in (ET, TC, WT) order.
    pub probs: Var,
}

/// The full segmentation network with its parameters.
#[derive(Debug, Clone)]
pub struct DabsegNet<T: Real> {
    pub config: NetConfig,
    pub store: ParamStore<T>,
    pub params: NetParams,
}

impl<T: Real> DabsegNet<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
        };
        let d = &config.dami;
        let fdmds = config.use_fdmds.then(|| {
            let c = config.fdmds.c_mid;
            let cin2 = if config.fdmds.literal_eq3 { 4 } else { c };
            FdmdsP {
                block1: init.block("fdmds.block1", "fdmds.block1", 4, c, 3, 1, 1),
                block2: init.block("fdmds.block2", "fdmds.block2", cin2, c, 3, 1, 1),
                conv3: init.conv("fdmds.conv3", "fdmds.conv3", c, 4, 3, 1, 1),
            }
        });
        let ps = d.patch_stride;
        let embed = Modality::ALL
            .iter()
            .map(|m| {
                init.block(
                    &format!("embed.{}", m.tag()),
                    "embed",
                    1,
                    d.embed_dim,
                    ps,
                    ps,
                    0,
                )
            })
            .collect();
        let mut stages = Vec::with_capacity(d.stages());
        for l in 0..d.stages() {
            let c = d.stage_channels[l];
            let a = d.attn_dims[l];
            let qkv_sets = if d.per_modality_qkv { 4 } else { 1 };
            let blocks = (0..d.encoder_depths[l])
                .map(|b| {
                    let n = format!("stage{l}.block{b}");
                    CrossBlockP {
                        norm1: init.norm(&format!("{n}.norm1"), c),
                        qkv: (0..qkv_sets)
                            .map(|s| {
                                let n = if d.per_modality_qkv {
                                    format!("{n}.{}", Modality::ALL[s].tag())
                                } else {
                                    n.clone()
                                };
                                QkvP {
                                    q: init.linear(&format!("{n}.q"), c, a, false, 1.0),
                                    k: init.linear(&format!("{n}.k"), c, a, false, 1.0),
                                    v: init.linear(&format!("{n}.v"), c, a, false, 1.0),
                                }
                            })
                            .collect(),
                        proj: init.linear(&format!("{n}.proj"), a, c, true, 1.0),
                        norm2: init.norm(&format!("{n}.norm2"), c),
                        ffn1: init.linear(&format!("{n}.ffn1"), c, c * d.ffn_ratio, true, 2.0),
                        ffn2: init.linear(&format!("{n}.ffn2"), c * d.ffn_ratio, c, true, 1.0),
                    }
                })
                .collect();
            let fuse = init.block(
                &format!("stage{l}.fuse"),
                &format!("stage{l}.fuse"),
                4 * c,
                c,
                1,
                1,
                0,
            );
            let down = (l + 1 < d.stages()).then(|| {
                Modality::ALL
                    .iter()
                    .map(|m| {
                        init.conv(
                            &format!("stage{l}.down.{}", m.tag()),
                            &format!("stage{l}.down"),
                            c,
                            d.stage_channels[l + 1],
                            2,
                            2,
                            0,
                        )
                    })
                    .collect()
            });
            stages.push(StageP { blocks, fuse, down });
        }
        let co = d.out_channels;
        let skip = init.block("skip", "skip", 4, co, 3, 1, 1);
        let merge = (0..d.stages() - 1)
            .map(|l| {
                let cin = d.stage_channels[l + 1] + d.stage_channels[l];
                init.block(
                    &format!("merge{l}"),
                    &format!("merge{l}"),
                    cin,
                    d.stage_channels[l],
                    3,
                    1,
                    1,
                )
            })
            .collect();
        let up = (0..d.extra_upsamples())
            .map(|i| {
                let cin = if i == 0 { d.stage_channels[0] } else { co };
                init.block(&format!("up{i}"), &format!("up{i}"), cin, co, 3, 1, 1)
            })
            .collect();
        let refine_in = if d.extra_upsamples() == 0 {
            d.stage_channels[0]
        } else {
            co
        } + co;
        let refine = init.block("refine", "refine", refine_in, co, 3, 1, 1);
        let head = init.conv("head", "head", co, 3, 1, 1, 0);
        let params = NetParams {
            fdmds,
            embed,
            stages,
            skip,
            merge,
            up,
            refine,
            head,
        };
        Ok(DabsegNet {
            config,
            store,
            params,
        })
    }

    /// Borrowed view over these parameters.
    pub fn view(&self) -> NetView<'_, T> {
        NetView {
            config: &self.config,
            params: &self.params,
            store: &self.store,
        }
    }

    /// View of this architecture over another store with the same layout
    /// (for finite-difference checks).
    pub fn view_with<'a>(&'a self, store: &'a ParamStore<T>) -> NetView<'a, T> {
        NetView {
            config: &self.config,
            params: &self.params,
            store,
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Forward> {
        self.view().forward(g, x)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.view().infer(x)
    }
}

/// Network architecture bound to a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct NetView<'a, T: Real> {
    pub config: &'a NetConfig,
    pub params: &'a NetParams,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> NetView<'_, T> {
    fn p(&self, g: &Graph<T>, id: ParamId) -> Var {
        g.param(self.store, id)
    }

    fn conv(&self, g: &Graph<T>, p: &ConvP, x: Var) -> Result<Var> {
        g.conv3d(
            x,
            self.p(g, p.w),
            p.b.map(|b| self.p(g, b)),
            p.stride,
            p.pad,
        )
    }

    fn block(&self, g: &Graph<T>, p: &ConvBlockP, x: Var) -> Result<Var> {
        let y = self.conv(g, &p.conv, x)?;
        let y = g.instance_norm(
            y,
            self.p(g, p.norm.gamma),
            self.p(g, p.norm.beta),
            self.config.norm_eps,
        )?;
        Ok(g.leaky_relu(y, self.config.slope))
    }

    fn linear(&self, g: &Graph<T>, p: &LinearP, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.p(g, p.w))?;
        match p.b {
            Some(b) => g.add(y, self.p(g, b)),
            None => Ok(y),
        }
    }

    fn layer_norm(&self, g: &Graph<T>, p: &NormP, x: Var) -> Result<Var> {
        g.layer_norm(
            x,
            self.p(g, p.gamma),
            self.p(g, p.beta),
            self.config.norm_eps,
        )
    }

    /// Residual deblurring stem: `[B, 4, D, H, W]` in and out.
    pub fn fdmds_forward(&self, g: &Graph<T>, v_blur: Var) -> Result<Var> {
        let p = self
            .params
            .fdmds
            .as_ref()
            .ok_or_else(|| Error::Config("network was built without the FDMDS stem".into()))?;
        let s = g.shape(v_blur);
        if s.len() != 5 || s[1] != 4 {
            return Err(Error::shape(format!(
                "FDMDS expects [B, 4, D, H, W], got {s:?}"
            )));
        }
        if s[2..].iter().any(|&n| n < 3) {
            return Err(Error::shape(format!(
                "FDMDS needs spatial dims >= 3, got {s:?}"
            )));
        }
        let h1 = self.block(g, &p.block1, v_blur)?;
        let h2_in = if self.config.fdmds.literal_eq3 {
            v_blur
        } else {
            h1
        };
        let h2 = self.block(g, &p.block2, h2_in)?;
        let r = self.conv(g, &p.conv3, h2)?;
        Ok(g.leaky_relu(g.add(r, v_blur)?, self.config.slope))
    }

    /// `[1, C, d, h, w]` map to `[N, C]` tokens.
    fn to_tokens(g: &Graph<T>, map: Var) -> Result<Var> {
        let s = g.shape(map);
        let n: usize = s[2..].iter().product();
        g.transpose(g.reshape(map, &[s[1], n])?)
    }

    fn to_map(g: &Graph<T>, tokens: Var, grid: [usize; 3]) -> Result<Var> {
        let c = g.shape(tokens)[1];
        g.reshape(g.transpose(tokens)?, &[1, c, grid[0], grid[1], grid[2]])
    }

    /// Per-modality patch embedding of a single sample `[1, 4, D, H, W]`;
    /// returns four `[N, C0]` token sets and the token grid.
    pub fn embed_modalities(&self, g: &Graph<T>, v: Var) -> Result<(Vec<Var>, [usize; 3])> {
        let s = g.shape(v);
        if s.len() != 5 || s[0] != 1 || s[1] != 4 {
            return Err(Error::shape(format!(
                "embedding expects [1, 4, D, H, W], got {s:?}"
            )));
        }
        let ps = self.config.dami.patch_stride;
        if s[2..].iter().any(|&n| n % ps != 0) {
            return Err(Error::shape(format!(
                "patch stride {ps} does not divide {:?}",
                &s[2..]
            )));
        }
        let grid = [s[2] / ps, s[3] / ps, s[4] / ps];
        let mut tokens = Vec::with_capacity(4);
        for (m, p) in self.params.embed.iter().enumerate() {
            let map = self.block(g, p, g.slice(v, 1, m, 1)?)?;
            tokens.push(Self::to_tokens(g, map)?);
        }
        Ok((tokens, grid))
    }

    /// One cross-modal attention block over the four token sets. Returns the
    /// updated tokens and the 16 attention maps in `(m, m')` order.
    pub fn cross_modal_block(
        &self,
        g: &Graph<T>,
        p: &CrossBlockP,
        xs: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if xs.len() != 4 {
            return Err(Error::Config(format!(
                "cross-modal block needs 4 modalities, got {}",
                xs.len()
            )));
        }
        let shape = g.shape(xs[0]);
        if xs.iter().any(|&x| g.shape(x) != shape) {
            return Err(Error::shape(
                "cross-modal block: modality token sets differ in shape",
            ));
        }
        let heads = self.config.dami.heads;
        let mut q = Vec::with_capacity(4);
        let mut k = Vec::with_capacity(4);
        let mut v = Vec::with_capacity(4);
        for (m, &x) in xs.iter().enumerate() {
            let n = self.layer_norm(g, &p.norm1, x)?;
            let t = &p.qkv[m.min(p.qkv.len() - 1)];
            q.push(self.linear(g, &t.q, n)?);
            k.push(self.linear(g, &t.k, n)?);
            v.push(self.linear(g, &t.v, n)?);
        }
        let a = g.shape(q[0])[1];
        let width = a / heads;
        let mut outputs = Vec::with_capacity(4);
        let mut maps = Vec::with_capacity(16 * heads);
        for m in 0..4 {
            let mut head_out = Vec::with_capacity(heads);
            for h in 0..heads {
                let cut = |x: Var| {
                    if heads == 1 {
                        Ok(x)
                    } else {
                        g.slice(x, 1, h * width, width)
                    }
                };
                let mut y: Option<Var> = None;
                for mp in 0..4 {
                    let att = attention(g, cut(q[m])?, cut(k[mp])?, cut(v[mp])?)?;
                    maps.push(att.weights);
                    y = Some(match y {
                        None => att.output,
                        Some(acc) => g.add(acc, att.output)?,
                    });
                }
                head_out.push(y.expect("four modalities"));
            }
            let y = if heads == 1 {
                head_out[0]
            } else {
                g.concat(&head_out, 1)?
            };
            let x1 = g.add(xs[m], self.linear(g, &p.proj, y)?)?;
            let n2 = self.layer_norm(g, &p.norm2, x1)?;
            let f = g.leaky_relu(self.linear(g, &p.ffn1, n2)?, self.config.slope);
            outputs.push(g.add(x1, self.linear(g, &p.ffn2, f)?)?);
        }
        Ok((outputs, maps))
    }

    /// Encoder for one sample `[1, 4, D, H, W]`.
    pub fn encode(&self, g: &Graph<T>, v: Var) -> Result<Encoded> {
        let s = g.shape(v);
        if s.len() != 5 {
            return Err(Error::shape(format!(
                "encoder expects [1, 4, D, H, W], got {s:?}"
            )));
        }
        self.config.check_patch([s[2], s[3], s[4]])?;
        let skip = self.block(g, &self.params.skip, v)?;
        let (mut tokens, mut grid) = self.embed_modalities(g, v)?;
        let mut fused = Vec::with_capacity(self.params.stages.len());
        let mut attention = Vec::new();
        for stage in &self.params.stages {
            for b in &stage.blocks {
                let (out, maps) = self.cross_modal_block(g, b, &tokens)?;
                tokens = out;
                attention.push(maps);
            }
            let maps = tokens
                .iter()
                .map(|&t| Self::to_map(g, t, grid))
                .collect::<Result<Vec<_>>>()?;
            fused.push(self.block(g, &stage.fuse, g.concat(&maps, 1)?)?);
            if let Some(down) = &stage.down {
                grid = grid.map(|n| n / 2);
                tokens = maps
                    .iter()
                    .zip(down)
                    .map(|(&m, p)| Self::to_tokens(g, self.conv(g, p, m)?))
                    .collect::<Result<Vec<_>>>()?;
            }
        }
        Ok(Encoded {
            fused,
            skip,
            attention,
        })
    }

    fn zeros_like(g: &Graph<T>, v: Var) -> Var {
        g.constant(Tensor::zeros(&g.shape(v)))
    }

    /// Top-down decoding back to voxel resolution: `[1, C_out, D, H, W]`.
    pub fn decode(&self, g: &Graph<T>, enc: &Encoded, opts: ForwardOptions) -> Result<Var> {
        let mode = self.config.dami.upsample;
        let skip_of = |v: Var| {
            if opts.zero_skips {
                Self::zeros_like(g, v)
            } else {
                v
            }
        };
        let last = enc.fused.len() - 1;
        let mut f = enc.fused[last];
        for l in (0..last).rev() {
            let up = g.upsample2x(f, mode)?;
            let skip = skip_of(enc.fused[l]);
            if g.shape(up)[2..] != g.shape(skip)[2..] {
                return Err(Error::shape(format!(
                    "decoder scale mismatch: {:?} vs {:?}",
                    g.shape(up),
                    g.shape(skip)
                )));
            }
            f = self.block(g, &self.params.merge[l], g.concat(&[up, skip], 1)?)?;
        }
        for p in &self.params.up {
            f = self.block(g, p, g.upsample2x(f, mode)?)?;
        }
        let skip = skip_of(enc.skip);
        if g.shape(f)[2..] != g.shape(skip)[2..] {
            return Err(Error::shape(format!(
                "decoder output {:?} vs input {:?}",
                g.shape(f),
                g.shape(skip)
            )));
        }
        self.block(g, &self.params.refine, g.concat(&[f, skip], 1)?)
    }

    /// 1x1x1 convolution to three logits and an elementwise sigmoid.
    pub fn predict(&self, g: &Graph<T>, f_out: Var) -> Result<(Var, Var)> {
        let logits = self.conv(g, &self.params.head, f_out)?;
        Ok((logits, g.sigmoid(logits)))
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Forward> {
        self.forward_with(g, x, ForwardOptions::default())
    }

    /// Full network on `[B, 4, D, H, W]`; the attention trunk runs per sample.
    pub fn forward_with(&self, g: &Graph<T>, x: Var, opts: ForwardOptions) -> Result<Forward> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != 4 {
            return Err(Error::shape(format!(
                "network input must be [B, 4, D, H, W], got {s:?}"
            )));
        }
        self.config.check_patch([s[2], s[3], s[4]])?;
        let restored = if self.config.use_fdmds {
            Some(self.fdmds_forward(g, x)?)
        } else {
            None
        };
        let v = restored.unwrap_or(x);
        let mut logits = Vec::with_capacity(s[0]);
        for b in 0..s[0] {
            let sample = if s[0] == 1 { v } else { g.slice(v, 0, b, 1)? };
            let enc = self.encode(g, sample)?;
            let f = self.decode(g, &enc, opts)?;
            logits.push(self.conv(g, &self.params.head, f)?);
        }
        let logits = if logits.len() == 1 {
            logits[0]
        } else {
            g.concat(&logits, 0)?
        };
        Ok(Forward {
            restored,
            logits,
            probs: g.sigmoid(logits),
        })
    }

    /// Probabilities `[B, 3, D, H, W]` for a plain input tensor.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&g, xv)?;
        Ok((*g.value(out.probs)).clone())
    }
}
