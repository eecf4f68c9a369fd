"""The student network.

Pipeline: (masked conv stages ->) tokenize visible patches -> transformer
encoder with multi-layer fusion -> E_v. A linear mimic head maps E_v to the
teacher's feature width; a light transformer decoder rebuilds the full token
sequence from projected E_v plus a shared mask token and predicts pixels for
the masked tokens only.

With conv stages, the full image is processed and features at masked
positions are zeroed after the stem and after every convolution, so a visible
token's value never depends on masked-region pixels (the zeroing is exact,
which the no-leakage tests exploit at tolerance zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..masking import MaskPlan, MaskPlanError, patchify
from ..tensor import Tensor, ops
from . import layers
from .config import ModelConfig
from .pos_embed import sincos_2d


@dataclass
class EncoderOutput:
    """Fused visible-token representations.

    ``e_v`` is the elementwise sum of ``per_layer`` over the configured
    fusion layers; ``per_layer`` maps layer index to that layer's output seen
    through the encoder's final norm.
    """
    e_v: Tensor
    per_layer: dict
    last_attention: Optional[np.ndarray] = None


@dataclass
class DecoderOutput:
    """Predicted pixels for masked tokens, rows in plan.masked order."""
    d_m: Tensor
    feature_m: Optional[Tensor] = None  # decoder-side feature regression head


def init_params(cfg: ModelConfig, seed, dtype=np.float32) -> dict:
    """Fresh parameter dict; names are stable and checkpoint-addressable."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    if cfg.conv_stages:
        sp = cfg.stem_patch
        layers.add_affine(params, rng, "stem", sp * sp * 3,
                          cfg.conv_stages[0].channels, dtype)
        for i, st in enumerate(cfg.conv_stages):
            for b in range(st.blocks):
                layers.add_affine(params, rng, f"conv{i}/block{b}",
                                  9 * st.channels, st.channels, dtype)
            ch_next = (cfg.conv_stages[i + 1].channels
                       if i + 1 < len(cfg.conv_stages) else st.channels)
            layers.add_affine(params, rng, f"conv{i}/down",
                              st.factor * st.factor * st.channels, ch_next, dtype)
        layers.add_affine(params, rng, "token_proj",
                          cfg.conv_stages[-1].channels, cfg.embed_dim, dtype)
    else:
        layers.add_affine(params, rng, "patch_embed", cfg.patch_dim,
                          cfg.embed_dim, dtype)
    for l in range(1, cfg.encoder_depth + 1):
        layers.add_block(params, rng, f"enc{l}", cfg.embed_dim, cfg.mlp_ratio, dtype)
    layers.add_layernorm(params, "enc_norm", cfg.embed_dim, dtype)
    layers.add_affine(params, rng, "mimic_head", cfg.embed_dim, cfg.teacher_dim, dtype)

    layers.add_affine(params, rng, "dec_embed", cfg.embed_dim, cfg.decoder_dim, dtype)
    layers.param(params, "mask_token",
                 layers.trunc_normal(rng, (cfg.decoder_dim,), dtype=dtype))
    for l in range(1, cfg.decoder_depth + 1):
        layers.add_block(params, rng, f"dec{l}", cfg.decoder_dim, cfg.mlp_ratio, dtype)
    layers.add_layernorm(params, "dec_norm", cfg.decoder_dim, dtype)
    layers.add_affine(params, rng, "dec_pred", cfg.decoder_dim, cfg.patch_dim, dtype)
    layers.add_affine(params, rng, "dec_feat", cfg.decoder_dim, cfg.teacher_dim, dtype)
    return params


def _dtype_of(params: dict):
    return next(iter(params.values())).data.dtype


def _validate_plan(cfg: ModelConfig, plan: MaskPlan) -> None:
    if plan.n != cfg.num_tokens:
        raise MaskPlanError(f"plan has {plan.n} tokens, config grid has "
                            f"{cfg.num_tokens}")
    if plan.grid is not None and plan.grid != (cfg.grid_h, cfg.grid_w):
        raise MaskPlanError(f"plan grid {plan.grid} != config grid "
                            f"{(cfg.grid_h, cfg.grid_w)}")
    if cfg.conv_stages:
        if len(plan.stage_masks) != len(cfg.conv_stages):
            raise MaskPlanError(
                f"plan carries {len(plan.stage_masks)} stage masks, config has "
                f"{len(cfg.conv_stages)} conv stages")
        for i in range(len(cfg.conv_stages)):
            want = cfg.stage_grid(i)
            got = plan.stage_masks[i].shape
            if got != want:
                raise MaskPlanError(f"stage {i} mask grid {got} != {want}")


def _mask_zero(x: Tensor, stage_mask: np.ndarray, dtype) -> Tensor:
    """Zero features at masked grid positions (channel-last feature map)."""
    gh, gw, ch = x.shape
    keep = np.broadcast_to(stage_mask[:, :, None], (gh, gw, ch))
    return ops.mul(x, Tensor(np.ascontiguousarray(keep).astype(dtype)))


def _conv_tokens(image: np.ndarray, plan: Optional[MaskPlan], cfg: ModelConfig,
                 params: dict) -> Tensor:
    """Masked conv stages over the full image; returns (n, C) token features."""
    dtype = _dtype_of(params)
    sp = cfg.stem_patch
    x = Tensor(patchify(image, sp).astype(dtype))       # (g0h*g0w, sp*sp*3)
    g0 = cfg.stage_grid(0)
    x = layers.affine(x, params, "stem")
    x = ops.reshape(x, (g0[0], g0[1], cfg.conv_stages[0].channels))
    if plan is not None:
        x = _mask_zero(x, plan.stage_masks[0], dtype)
    for i, st in enumerate(cfg.conv_stages):
        for b in range(st.blocks):
            x = ops.gelu(ops.conv2d(x, params[f"conv{i}/block{b}/w"],
                                    params[f"conv{i}/block{b}/b"], 3, 3,
                                    stride=1, pad=1))
            if plan is not None:
                x = _mask_zero(x, plan.stage_masks[i], dtype)
        x = ops.conv2d(x, params[f"conv{i}/down/w"], params[f"conv{i}/down/b"],
                       st.factor, st.factor, stride=st.factor)
        if plan is not None:
            next_mask = (plan.stage_masks[i + 1] if i + 1 < len(cfg.conv_stages)
                         else plan.token_mask((cfg.grid_h, cfg.grid_w)))
            x = _mask_zero(x, next_mask, dtype)
    n = cfg.num_tokens
    x = ops.reshape(x, (n, x.shape[2]))
    return layers.affine(x, params, "token_proj")


def encode(image: np.ndarray, plan: Optional[MaskPlan], cfg: ModelConfig,
           params: dict, want_attention: bool = False) -> EncoderOutput:
    """Run the encoder over the visible tokens of one image.

    ``plan=None`` means full visibility (probe/visualization time): every
    token is processed and no masking is applied anywhere.
    """
    dtype = _dtype_of(params)
    if plan is not None:
        _validate_plan(cfg, plan)
        idx = plan.visible
    else:
        idx = np.arange(cfg.num_tokens)

    if cfg.conv_stages:
        tokens = _conv_tokens(image, plan, cfg, params)
        x = ops.gather_rows(tokens, idx)
    else:
        rows = patchify(image, cfg.patch_size).astype(dtype)
        x = layers.affine(Tensor(rows[idx]), params, "patch_embed")

    pos = sincos_2d(cfg.embed_dim, cfg.grid_h, cfg.grid_w).astype(dtype)
    x = ops.add(x, Tensor(pos[idx]))

    per_layer: dict[int, Tensor] = {}
    last_attention = None
    fused = None
    for l in range(1, cfg.encoder_depth + 1):
        want = want_attention and l == cfg.encoder_depth
        x, probs = layers.block(x, params, f"enc{l}", cfg.encoder_heads, want)
        if want:
            last_attention = probs
        if l in cfg.fusion_layers:
            seen = layers.layernorm(x, params, "enc_norm")
            per_layer[l] = seen
            fused = seen if fused is None else ops.add(fused, seen)
    return EncoderOutput(e_v=fused, per_layer=per_layer,
                         last_attention=last_attention)


def mimic_head(e_v: Tensor, params: dict) -> Tensor:
    """Single affine map from encoder width to teacher feature width."""
    return layers.affine(e_v, params, "mimic_head")


def decode(encoded: EncoderOutput, plan: MaskPlan, cfg: ModelConfig,
           params: dict, want_feature_head: bool = False) -> DecoderOutput:
    """Reconstruct masked-token pixels from the fused visible representations.

    The full-length sequence is projected E_v at visible positions and the
    shared mask token at masked positions, plus decoder position embeddings.
    Only masked rows are returned; visible-position predictions exist inside
    the decoder but are discarded before any loss can see them.
    """
    dtype = _dtype_of(params)
    n = plan.n
    vis = layers.affine(encoded.e_v, params, "dec_embed")
    filled = ops.add(ops.scatter_rows(vis, plan.visible, n),
                     ops.scatter_rows(ops.tile_rows(params["mask_token"], plan.l_m),
                                      plan.masked, n))
    pos = sincos_2d(cfg.decoder_dim, cfg.grid_h, cfg.grid_w).astype(dtype)
    x = ops.add(filled, Tensor(pos))
    for l in range(1, cfg.decoder_depth + 1):
        x, _ = layers.block(x, params, f"dec{l}", cfg.decoder_heads)
    x = layers.layernorm(x, params, "dec_norm")
    x_m = ops.gather_rows(x, plan.masked)
    d_m = layers.affine(x_m, params, "dec_pred")
    feature_m = layers.affine(x_m, params, "dec_feat") if want_feature_head else None
    return DecoderOutput(d_m=d_m, feature_m=feature_m)
