//! Network hyperparameters and the key-value architecture file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Upsample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdmdsConfig {
    /// Hidden width of the stem.
    pub c_mid: usize,
    /// Feed the degraded input (instead of the first block's output) into
    /// the second convolution block.
    pub literal_eq3: bool,
}

impl Default for FdmdsConfig {
    fn default() -> Self {
        FdmdsConfig {
            c_mid: 16,
            literal_eq3: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamiConfig {
    pub embed_dim: usize,
    pub patch_stride: usize,
    pub encoder_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    /// Attention width per stage.
    pub attn_dims: Vec<usize>,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Merge blocks + upsample blocks + final refinement.
    pub decoder_stages: usize,
    /// Channels of the full-resolution decoder output and shallow skip.
    pub out_channels: usize,
    /// Separate Q/K/V projections per modality instead of shared ones.
    pub per_modality_qkv: bool,
    pub upsample: Upsample,
}

impl DamiConfig {
    /// Three stages with channels `c0, 2c0, 4c0` and attention width equal
    /// to the stage width.
    pub fn with_embed_dim(c0: usize) -> Self {
        let stage_channels = vec![c0, 2 * c0, 4 * c0];
        DamiConfig {
            embed_dim: c0,
            patch_stride: 4,
            encoder_depths: vec![2, 2, 2],
            attn_dims: stage_channels.clone(),
            stage_channels,
            heads: 1,
            ffn_ratio: 4,
            decoder_stages: 5,
            out_channels: (c0 / 2).max(1),
            per_modality_qkv: false,
            upsample: Upsample::Nearest,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Number of x2 upsampling blocks after the last encoder-scale merge.
    pub fn extra_upsamples(&self) -> usize {
        self.patch_stride.trailing_zeros() as usize
    }

    /// Every spatial dimension of an input patch must be a multiple of this.
    pub fn divisor(&self) -> usize {
        self.patch_stride << self.stages().saturating_sub(1)
    }
}

impl Default for DamiConfig {
    fn default() -> Self {
        Self::with_embed_dim(32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub use_fdmds: bool,
    pub fdmds: FdmdsConfig,
    pub dami: DamiConfig,
    /// Negative slope of every leaky ReLU.
    pub slope: f64,
    pub norm_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            use_fdmds: true,
            fdmds: FdmdsConfig::default(),
            dami: DamiConfig::default(),
            slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl NetConfig {
    /// Embedding width 16, otherwise the defaults.
    pub fn desk() -> Self {
        NetConfig {
            dami: DamiConfig::with_embed_dim(16),
            ..Self::default()
        }
    }

    /// Smallest useful network: width 8, patch stride 2, one block per
    /// stage; accepts 8^3 inputs.
    pub fn tiny() -> Self {
        let mut dami = DamiConfig::with_embed_dim(8);
        dami.encoder_depths = vec![1, 1, 1];
        dami.patch_stride = 2;
        dami.decoder_stages = 4;
        NetConfig {
            fdmds: FdmdsConfig {
                c_mid: 4,
                literal_eq3: false,
            },
            dami,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dami;
        let bad = |m: String| Err(Error::Config(m));
        if d.stages() == 0 {
            return bad("at least one encoder stage is required".into());
        }
        if d.encoder_depths.len() != d.stages() || d.attn_dims.len() != d.stages() {
            return bad(format!(
                "encoder_depths ({}), stage_channels ({}) and attn_dims ({}) must have equal length",
                d.encoder_depths.len(),
                d.stages(),
                d.attn_dims.len()
            ));
        }
        if d.stage_channels[0] != d.embed_dim {
            return bad(format!(
                "first stage width {} must equal embed_dim {}",
                d.stage_channels[0], d.embed_dim
            ));
        }
        if !d.patch_stride.is_power_of_two() {
            return bad(format!(
                "patch_stride {} must be a power of two",
                d.patch_stride
            ));
        }
        if d.heads == 0 || d.attn_dims.iter().any(|&a| a == 0 || a % d.heads != 0) {
            return bad(format!(
                "attn_dims {:?} must be positive multiples of heads {}",
                d.attn_dims, d.heads
            ));
        }
        if d.stage_channels
            .iter()
            .chain([&d.ffn_ratio, &d.out_channels])
            .any(|&c| c == 0)
        {
            return bad("channel counts and ffn_ratio must be positive".into());
        }
        let expected = d.stages() - 1 + d.extra_upsamples() + 1;
        if d.decoder_stages != expected {
            return bad(format!(
                "decoder_stages {} inconsistent with {} stages and patch stride {} (expected {expected})",
                d.decoder_stages,
                d.stages(),
                d.patch_stride
            ));
        }
        if self.use_fdmds && self.fdmds.c_mid == 0 {
            return bad("c_mid must be positive".into());
        }
        if !(self.slope.is_finite() && self.norm_eps > 0.0) {
            return bad("slope must be finite and norm_eps positive".into());
        }
        Ok(())
    }

    /// Checks that a `[D, H, W]` patch fits the encoder.
    pub fn check_patch(&self, dims: [usize; 3]) -> Result<()> {
        let k = self.dami.divisor();
        if dims.iter().any(|&n| n == 0 || n % k != 0) {
            return Err(Error::shape(format!(
                "patch {dims:?} is not divisible by {k}"
            )));
        }
        if self.use_fdmds && dims.iter().any(|&n| n < 3) {
            return Err(Error::shape(format!(
                "FDMDS needs every dim >= 3, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d = &self.dami;
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "use_fdmds={}\nc_mid={}\nliteral_eq3={}\nembed_dim={}\npatch_stride={}\nencoder_depths={}\nstage_channels={}\nattn_dims={}\nheads={}\nffn_ratio={}\ndecoder_stages={}\nout_channels={}\nper_modality_qkv={}\nupsample={}\nslope={}\nnorm_eps={}\n",
            self.use_fdmds,
            self.fdmds.c_mid,
            self.fdmds.literal_eq3,
            d.embed_dim,
            d.patch_stride,
            list(&d.encoder_depths),
            list(&d.stage_channels),
            list(&d.attn_dims),
            d.heads,
            d.ffn_ratio,
            d.decoder_stages,
            d.out_channels,
            d.per_modality_qkv,
            match d.upsample {
                Upsample::Nearest => "nearest",
                Upsample::Trilinear => "trilinear",
            },
            self.slope,
            self.norm_eps,
        )
    }

    /// Parses `key=value` lines. Unset keys take defaults; when `embed_dim`
    /// is set, unset channel lists and `out_channels` are derived from it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("architecture line {line:?} is not key=value"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |kv: &mut BTreeMap<String, String>, k: &str| kv.remove(k);
        let num = |k: &str, v: String| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: bad integer {v:?}")))
        };
        let real = |k: &str, v: String| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: bad number {v:?}")))
        };
        let flag = |k: &str, v: String| -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: expected true/false, got {v:?}")))
        };
        let list = |k: &str, v: String| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{k}: bad list {v:?}")))
                })
                .collect()
        };

        let mut cfg = NetConfig::default();
        if let Some(v) = take(&mut kv, "embed_dim") {
            let c0 = num("embed_dim", v)?;
            cfg.dami = DamiConfig::with_embed_dim(c0);
        }
        if let Some(v) = take(&mut kv, "use_fdmds") {
            cfg.use_fdmds = flag("use_fdmds", v)?;
        }
        if let Some(v) = take(&mut kv, "c_mid") {
            cfg.fdmds.c_mid = num("c_mid", v)?;
        }
        if let Some(v) = take(&mut kv, "literal_eq3") {
            cfg.fdmds.literal_eq3 = flag("literal_eq3", v)?;
        }
        let d = &mut cfg.dami;
        if let Some(v) = take(&mut kv, "patch_stride") {
            d.patch_stride = num("patch_stride", v)?;
            d.decoder_stages = d.stages() + d.extra_upsamples();
        }
        if let Some(v) = take(&mut kv, "encoder_depths") {
            d.encoder_depths = list("encoder_depths", v)?;
        }
        if let Some(v) = take(&mut kv, "stage_channels") {
            d.stage_channels = list("stage_channels", v)?;
            d.attn_dims = d.stage_channels.clone();
            d.decoder_stages = d.stages() + d.extra_upsamples();
        }
        if let Some(v) = take(&mut kv, "attn_dims") {
            d.attn_dims = list("attn_dims", v)?;
        }
        if let Some(v) = take(&mut kv, "heads") {
            d.heads = num("heads", v)?;
        }
        if let Some(v) = take(&mut kv, "ffn_ratio") {
            d.ffn_ratio = num("ffn_ratio", v)?;
        }
        if let Some(v) = take(&mut kv, "decoder_stages") {
            d.decoder_stages = num("decoder_stages", v)?;
        }
        if let Some(v) = take(&mut kv, "out_channels") {
            d.out_channels = num("out_channels", v)?;
        }
        if let Some(v) = take(&mut kv, "per_modality_qkv") {
            d.per_modality_qkv = flag("per_modality_qkv", v)?;
        }
        if let Some(v) = take(&mut kv, "upsample") {
            d.upsample = match v.as_str() {
                "nearest" => Upsample::Nearest,
                "trilinear" => Upsample::Trilinear,
                other => return Err(Error::Config(format!("upsample: unknown mode {other:?}"))),
            };
        }
        if let Some(v) = take(&mut kv, "slope") {
            cfg.slope = real("slope", v)?;
        }
        if let Some(v) = take(&mut kv, "norm_eps") {
            cfg.norm_eps = real("norm_eps", v)?;
        }
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown architecture key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
