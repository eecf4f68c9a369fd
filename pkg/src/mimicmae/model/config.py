"""Model architecture configuration and its parameter-count formula."""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


MASKING_MODES = ("random", "blockwise", "focused")


@dataclass(frozen=True)
class ConvStage:
    """One masked convolution stage: ``blocks`` 3x3 convs at its grid, then a
    ``factor``-strided downsample toward the token grid."""
    blocks: int
    channels: int
    factor: int


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 128
    encoder_depth: int = 6
    encoder_heads: int = 4
    decoder_depth: int = 8        # matches the reference training setup
    decoder_dim: int = 64
    decoder_heads: int = 4
    conv_stages: tuple = ()       # tuple of ConvStage, finest grid first
    fusion_layers: tuple = ()     # 1-based encoder layers summed into E_v
    teacher_dim: int = 64
    visible_ratio: float = 0.25   # matches the reference training setup
    masking_mode: str = "random"
    per_patch_norm: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image {self.image_size} not divisible by patch "
                              f"{self.patch_size}")
        if self.embed_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ConfigError("embed dims must be divisible by head counts")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ConfigError("embed dims must be divisible by 4 for 2-d "
                              "sinusoidal position embeddings")
        if self.masking_mode not in MASKING_MODES:
            raise ConfigError(f"masking_mode must be one of {MASKING_MODES}")
        stages = tuple(s if isinstance(s, ConvStage) else ConvStage(*s)
                       for s in self.conv_stages)
        object.__setattr__(self, "conv_stages", stages)
        for s in stages:
            if s.blocks < 1 or s.channels < 1 or s.factor < 1:
                raise ConfigError(f"invalid conv stage {s}")
        if stages:
            if self.stem_patch * self.grid_h * self.stage_factor_product != self.image_size:
                raise ConfigError("conv stage factors do not divide the image "
                                  "into whole stem patches")
        fusion = tuple(sorted(set(self.fusion_layers))) if self.fusion_layers \
            else self.default_fusion_layers()
        object.__setattr__(self, "fusion_layers", fusion)
        if any(l < 1 or l > self.encoder_depth for l in fusion):
            raise ConfigError(f"fusion layers {fusion} outside "
                              f"1..{self.encoder_depth}")
        if self.encoder_depth not in fusion:
            raise ConfigError("fusion layers must include the last encoder layer")
        if not 0.0 < self.visible_ratio < 1.0:
            raise ConfigError(f"visible_ratio {self.visible_ratio} not in (0, 1)")

    def default_fusion_layers(self) -> tuple:
        # "multiple intermediate layers" is unspecified; mid + last is the default
        mid = max(1, self.encoder_depth // 2)
        return tuple(sorted({mid, self.encoder_depth}))

    # -- derived geometry ---------------------------------------------------

    @property
    def grid_h(self) -> int:
        return self.image_size // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def stage_factors(self) -> tuple:
        return tuple(s.factor for s in self.conv_stages)

    @property
    def stage_factor_product(self) -> int:
        out = 1
        for f in self.stage_factors:
            out *= f
        return out

    @property
    def stem_patch(self) -> int:
        """Pixel size of the stem conv patches (image / finest stage grid)."""
        return self.image_size // (self.grid_h * self.stage_factor_product)

    def stage_grid(self, index: int) -> tuple[int, int]:
        """Grid of conv stage ``index`` (0 = finest)."""
        cum = 1
        for s in self.conv_stages[index:]:
            cum *= s.factor
        return (self.grid_h * cum, self.grid_w * cum)


def _block_params(dim: int, mlp_ratio: int) -> int:
    attn = dim * 3 * dim + 3 * dim + dim * dim + dim       # qkv + proj
    mlp = dim * mlp_ratio * dim + mlp_ratio * dim + mlp_ratio * dim * dim + dim
    norms = 4 * dim                                        # ln1 + ln2
    return attn + mlp + norms


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars for a config.

    Tokenizer: either a single patch-embed affine map, or a stem conv plus
    per-stage 3x3 convs, per-stage downsample convs, and a channel-to-width
    projection. Encoder/decoder: standard pre-norm transformer blocks plus a
    final norm each. Heads: mimic head, pixel prediction head, and the
    decoder-side feature head used by the joint-at-decoder ablation. Plus the
    decoder embed map and the shared mask token. Position embeddings are
    fixed, not learned.
    """
    c, d = cfg.embed_dim, cfg.decoder_dim
    total = 0
    if cfg.conv_stages:
        ch_in = 3
        stem_dim = cfg.stem_patch * cfg.stem_patch * ch_in
        total += stem_dim * cfg.conv_stages[0].channels + cfg.conv_stages[0].channels
        for i, s in enumerate(cfg.conv_stages):
            total += s.blocks * (9 * s.channels * s.channels + s.channels)
            ch_next = (cfg.conv_stages[i + 1].channels
                       if i + 1 < len(cfg.conv_stages) else s.channels)
            total += s.factor * s.factor * s.channels * ch_next + ch_next
        total += cfg.conv_stages[-1].channels * c + c
    else:
        total += cfg.patch_dim * c + c
    total += cfg.encoder_depth * _block_params(c, cfg.mlp_ratio) + 2 * c
    total += c * cfg.teacher_dim + cfg.teacher_dim            # mimic head
    total += c * d + d                                        # decoder embed
    total += d                                                # mask token
    total += cfg.decoder_depth * _block_params(d, cfg.mlp_ratio) + 2 * d
    total += d * cfg.patch_dim + cfg.patch_dim                # pixel head
    total += d * cfg.teacher_dim + cfg.teacher_dim            # decoder feature head
    return total
