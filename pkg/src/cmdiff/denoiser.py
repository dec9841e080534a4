"""Noise-prediction U-Net with direction-label embedding and residual
cross-attention onto features from two modality-specific source encoders.

Tensors are N x C x H x W (torch layout). The conditioned input carries the
noisy target in channels 0..2, the source image in 3..5 and, when
cross-modality feature control is on, the edge map in channel 6.
"""

import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

MODALITY_IR = 0
MODALITY_VIS = 1


@dataclass
class DenoiserConfig:
    base_width: int = 32
    channel_mult: tuple = (1, 2, 2)
    attention_resolutions: tuple = (8, 16)
    attention_channels: int = 64
    embed_dim: int = 128
    image_size: int = 32
    num_res_blocks: int = 1
    output_channels: int = 3
    use_tdg: bool = True
    use_cfc: bool = True
    groups: int = 8

    @property
    def depth(self) -> int:
        return len(self.channel_mult)

    @property
    def input_channels(self) -> int:
        return 7 if self.use_cfc else 6

    @property
    def level_sizes(self):
        return [self.image_size // 2**k for k in range(self.depth)]

    def validate(self):
        if self.image_size % 2 ** (self.depth - 1):
            raise ConfigError(f"image_size {self.image_size} not divisible across {self.depth} stages")
        missing = set(self.attention_resolutions) - set(self.level_sizes)
        if self.use_cfc and missing:
            raise ConfigError(
                f"attention resolutions {sorted(missing)} not produced by levels {self.level_sizes}"
            )
        if self.output_channels != 3:
            raise ConfigError("output_channels must equal the 3 target channels")
        for c in self.channel_mult:
            if (self.base_width * c) % self.groups:
                raise ConfigError(f"width {self.base_width * c} not divisible into {self.groups} groups")

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_resolutions"] = list(self.attention_resolutions)
        d["input_channels"] = self.input_channels
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        d["channel_mult"] = tuple(d.get("channel_mult", cls.channel_mult))
        d["attention_resolutions"] = tuple(d.get("attention_resolutions", cls.attention_resolutions))
        return cls(**d)


DESK = DenoiserConfig()
SMOKE = DenoiserConfig(base_width=16, channel_mult=(1, 2), attention_resolutions=(8,), attention_channels=16,
                       embed_dim=32, image_size=16, groups=4)
# Full-scale profile: 256^2 inputs, width 128, 64-channel attention heads at 8/16/32.
FULL = DenoiserConfig(base_width=128, channel_mult=(1, 1, 2, 2, 4, 4), attention_resolutions=(8, 16, 32),
                       attention_channels=64, embed_dim=512, image_size=256, num_res_blocks=2, groups=32)
PROFILES = {"desk": DESK, "smoke": SMOKE, "full": FULL}


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def cross_attention(fg, q, k, v):
    """Residual attention update ``fg + softmax(q k^T / sqrt(d)) v``.

    fg: (N, L, C) query-side tokens; q: (N, L, d); k: (N, S, d); v: (N, S, C).
    Returns the updated tokens and the attention weights (N, L, S).
    """
    if k.shape[1] == 0 or q.shape[1] == 0:
        raise ValueError("cross-attention needs at least one query and one source token")
    w = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
    return fg + w @ v, w


class CrossAttention(nn.Module):
    """Queries from the noise-branch feature map, keys/values from the source
    encoder's feature map at the same resolution, via 1x1 convolutions."""

    def __init__(self, channels, source_channels, head_width, groups):
        super().__init__()
        self.heads = max(1, channels // head_width)
        self.head_width = head_width
        self.norm_g = nn.GroupNorm(groups, channels)
        self.norm_d = nn.GroupNorm(groups, source_channels)
        self.to_q = nn.Conv2d(channels, self.heads * head_width, 1)
        self.to_kv = nn.Conv2d(source_channels, self.heads * head_width + channels, 1)

    def forward(self, fg, fd):
        n, c, h, w = fg.shape
        q = self.to_q(self.norm_g(fg)).flatten(2)
        kv = self.to_kv(self.norm_d(fd)).flatten(2)
        k, v = kv[:, : self.heads * self.head_width], kv[:, self.heads * self.head_width :]
        # (N, heads, tokens, width)
        q = q.reshape(n, self.heads, self.head_width, -1).transpose(2, 3).flatten(0, 1)
        k = k.reshape(n, self.heads, self.head_width, -1).transpose(2, 3).flatten(0, 1)
        v = v.reshape(n, self.heads, c // self.heads, -1).transpose(2, 3).flatten(0, 1)
        tokens = fg.reshape(n, self.heads, c // self.heads, -1).transpose(2, 3).flatten(0, 1)
        out, _ = cross_attention(tokens, q, k, v)
        return out.reshape(n, self.heads, -1, c // self.heads).transpose(2, 3).reshape(n, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups if cin % groups == 0 else 1, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SourceEncoder(nn.Module):
    """Downsampling half of a U-Net; returns one feature map per level keyed by
    spatial size."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.conv_in = nn.Conv2d(3, cfg.base_width, 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = cfg.base_width
        for k, mult in enumerate(cfg.channel_mult):
            out = cfg.base_width * mult
            self.blocks.append(ResBlock(ch, out, 0, cfg.groups))
            ch = out
            if k < cfg.depth - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

    def forward(self, x):
        feats = {}
        h = self.conv_in(x)
        for k, block in enumerate(self.blocks):
            h = block(h)
            feats[h.shape[-1]] = h
            if k < len(self.downs):
                h = self.downs[k](h)
        return feats


class Denoiser(nn.Module):
    """epsilon(z, J, t): predicts the target-branch noise from the conditioned input."""

    def __init__(self, cfg: DenoiserConfig = DESK):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        emb = cfg.embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        if cfg.use_tdg:
            self.label_table = nn.Embedding(2, emb)
            self.label_proj = nn.Linear(emb, emb)
        if cfg.use_cfc:
            self.encoders = nn.ModuleList([SourceEncoder(cfg), SourceEncoder(cfg)])
        widths = [cfg.base_width * m for m in cfg.channel_mult]

        def attn(ch, size):
            if cfg.use_cfc and size in cfg.attention_resolutions:
                return CrossAttention(ch, ch, cfg.attention_channels, cfg.groups)
            return None

        self.conv_in = nn.Conv2d(cfg.input_channels, cfg.base_width, 3, padding=1)
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [cfg.base_width]
        ch = cfg.base_width
        for k, w in enumerate(widths):
            size = cfg.level_sizes[k]
            for _ in range(cfg.num_res_blocks):
                self.down.append(ResBlock(ch, w, emb, cfg.groups))
                self.down_attn.append(attn(w, size) or nn.Identity())
                ch = w
                skips.append(ch)
            if k < cfg.depth - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)
        self.mid = ResBlock(ch, ch, emb, cfg.groups)
        self.mid_attn = attn(ch, cfg.level_sizes[-1]) or nn.Identity()
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for k in reversed(range(cfg.depth)):
            w, size = widths[k], cfg.level_sizes[k]
            for _ in range(cfg.num_res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), w, emb, cfg.groups))
                self.up_attn.append(attn(w, size) or nn.Identity())
                ch = w
            if k > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.norm_out = nn.GroupNorm(cfg.groups, ch)
        self.conv_out = nn.Conv2d(ch, cfg.output_channels, 3, padding=1)

    # -- conditioning pathways ------------------------------------------------

    def direction_embedding(self, labels):
        if not self.cfg.use_tdg:
            return None
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        return self.label_table(labels)

    def encode_source(self, source, modality):
        """Feature pyramid {size: N x C x size x size} from the encoder matching
        ``modality`` (scalar or per-sample tensor; 0 = IR, 1 = VIS)."""
        if not self.cfg.use_cfc:
            raise ConfigError("source encoders are disabled in this configuration")
        modality = torch.as_tensor(modality, dtype=torch.long).reshape(-1)
        if modality.numel() == 1:
            return self.encoders[int(modality)](source)
        feats = None
        for m in (MODALITY_IR, MODALITY_VIS):
            idx = (modality == m).nonzero(as_tuple=True)[0]
            if idx.numel() == 0:
                continue
            part = self.encoders[m](source[idx])
            if feats is None:
                feats = {s: f.new_zeros((source.shape[0],) + f.shape[1:]) for s, f in part.items()}
            for s, f in part.items():
                feats[s] = feats[s].index_copy(0, idx, f)
        return feats

    def embed(self, t, labels=None):
        t = torch.as_tensor(t).reshape(-1)
        emb = self.time_mlp(timestep_embedding(t, self.cfg.embed_dim))
        if self.cfg.use_tdg:
            if labels is None:
                raise ValueError("direction labels are required when TDG is enabled")
            labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1).expand(emb.shape[0])
            emb = emb + self.label_proj(self.direction_embedding(labels))
        return emb

    # -- forward ----------------------------------------------------------------

    def forward(self, z, t, labels=None, source_modality=None, skip_cross_attention=False):
        cfg = self.cfg
        if z.shape[1] != cfg.input_channels:
            raise ValueError(f"expected {cfg.input_channels} input channels, got {z.shape[1]}")
        if z.shape[-1] != cfg.image_size or z.shape[-2] != cfg.image_size:
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} input, got {tuple(z.shape[-2:])}")
        n = z.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(n)
        emb = self.embed(t, labels)
        feats = None
        if cfg.use_cfc and not skip_cross_attention:
            if source_modality is None:
                raise ValueError("source_modality is required when CFC is enabled")
            feats = self.encode_source(z[:, 3:6], source_modality)

        def site(mod, h):
            if isinstance(mod, CrossAttention) and feats is not None:
                return mod(h, feats[h.shape[-1]])
            return h

        h = self.conv_in(z)
        hs = [h]
        i = 0
        for k in range(cfg.depth):
            for _ in range(cfg.num_res_blocks):
                h = site(self.down_attn[i], self.down[i](h, emb))
                hs.append(h)
                i += 1
            if k < cfg.depth - 1:
                h = self.downsample[k](h)
                hs.append(h)
        h = site(self.mid_attn, self.mid(h, emb))
        i = 0
        for j, k in enumerate(reversed(range(cfg.depth))):
            for _ in range(cfg.num_res_blocks + 1):
                h = self.up[i](torch.cat([h, hs.pop()], dim=1), emb)
                h = site(self.up_attn[i], h)
                i += 1
            if k > 0:
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def build_denoiser(cfg: DenoiserConfig = DESK, seed: int = 0, **overrides):
    if overrides:
        cfg = replace(cfg, **overrides)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Denoiser(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def count_parameters(model) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = [
    "DenoiserConfig",
    "Denoiser",
    "CrossAttention",
    "SourceEncoder",
    "cross_attention",
    "build_denoiser",
    "timestep_embedding",
    "PROFILES",
    "DESK",
    "SMOKE",
    "FULL",
]
