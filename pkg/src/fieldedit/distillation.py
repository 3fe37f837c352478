"""Distilling 2D relevance into 3D mask supervision.

Attention-based encoders yield relevance by gradient-weighted attention
rollout: starting from the identity over tokens, each layer contributes the
head-mean of its clamped gradient-attention product,

    R <- R + mean_heads( clamp_+( dA * A ) ) @ R,

after which the CLS row over patch tokens, reshaped to the patch grid,
upsampled bilinearly, and min-max normalized, is the 2D relevance map.
Attention-free encoders supply their own non-negative saliency instead and
share the resize/normalize tail.

Degenerate cases are defined, not accidental: an all-equal raw map normalizes
to all ones; an (effectively) all-zero map -- e.g. from a zero gradient --
stays all zeros and emits a warning.

The pseudo-label for the 3D mask is the pixelwise max of the source and
target relevance maps when deformation is enabled (content may move between
the two fields), else the source map alone; it is a detached target for a
mean-squared error on the rendered mask.
"""

from __future__ import annotations

import warnings

import numpy as np

from .autodiff import Tensor
from .rendering import bilinear_resize_array

__all__ = [
    "aggregate_relevance",
    "normalize_relevance",
    "relevance_map",
    "pseudo_label",
    "mask_loss",
]

_DEGENERATE_EPS = 1e-12


def aggregate_relevance(records: list[tuple[np.ndarray, np.ndarray]],
                        grid_hw: tuple[int, int]) -> np.ndarray:
    """Gradient-weighted attention rollout to a patch-grid relevance map.

    ``records`` holds per-layer ``(attention, gradient)`` pairs shaped
    (heads, T, T) with T = 1 + gh * gw (CLS first). Returns the raw
    non-negative (gh, gw) map before any resizing or normalization.
    """
    if not records:
        raise ValueError("need at least one recorded layer")
    gh, gw = grid_hw
    T = records[0][0].shape[-1]
    if T != 1 + gh * gw:
        raise ValueError(f"token count {T} does not match grid {grid_hw}")
    R = np.eye(T)
    for attn, grad in records:
        if attn.shape != grad.shape or attn.shape[-2:] != (T, T):
            raise ValueError("attention/gradient shape mismatch")
        cam = np.maximum(grad * attn, 0.0).mean(axis=0)
        R = R + cam @ R
    row = R[0, 1:]
    return row.reshape(gh, gw)


def normalize_relevance(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize a non-negative map with pinned degenerate cases."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("relevance values must be non-negative")
    lo = float(raw.min())
    hi = float(raw.max())
    if hi <= _DEGENERATE_EPS:
        warnings.warn("relevance map is identically zero (no usable gradient); "
                      "emitting an all-zero mask", RuntimeWarning, stacklevel=2)
        return np.zeros_like(raw)
    if hi - lo <= _DEGENERATE_EPS:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def relevance_map(encoder, img: np.ndarray, prompt: str,
                  out_hw: tuple[int, int]) -> np.ndarray:
    """2D relevance of ``prompt`` over ``img`` in [0, 1] at ``out_hw``.

    Dispatches on the encoder's mechanism: recorded attention maps when
    available, otherwise the encoder's own saliency. The raw map is bilinearly
    resized to ``out_hw`` first and normalized second, so the output peaks at
    exactly 1 unless it is degenerate.
    """
    if hasattr(encoder, "attention_records"):
        records, grid = encoder.attention_records(img, prompt)
        raw = aggregate_relevance(records, grid)
    elif hasattr(encoder, "saliency"):
        raw = encoder.saliency(img, prompt)
    else:
        raise TypeError(f"encoder {type(encoder).__name__} exposes no relevance "
                        "mechanism (attention_records or saliency)")
    resized = bilinear_resize_array(np.asarray(raw, dtype=np.float64),
                                    out_hw[0], out_hw[1])
    # bilinear interpolation preserves non-negativity up to roundoff
    return normalize_relevance(np.maximum(resized, 0.0))


def pseudo_label(encoder, img_source: np.ndarray, img_target: np.ndarray,
                 t_mask: str, out_hw: tuple[int, int],
                 deformation_enabled: bool) -> np.ndarray:
    """Mask supervision from rendered views; detached by construction.

    With deformation enabled the label is the pixelwise max of the source and
    target relevance (edited content may occupy either footprint); without
    deformation only the source view defines the region.
    """
    m_src = relevance_map(encoder, img_source, t_mask, out_hw)
    if not deformation_enabled:
        return m_src
    m_tgt = relevance_map(encoder, img_target, t_mask, out_hw)
    return np.maximum(m_src, m_tgt)


def mask_loss(rendered_mask: Tensor, label: np.ndarray) -> Tensor:
    """Mean squared error between the rendered mask and a detached label."""
    lab = np.asarray(label, dtype=rendered_mask.dtype)
    if tuple(rendered_mask.shape) != lab.shape:
        raise ValueError(f"mask shape {tuple(rendered_mask.shape)} vs label {lab.shape}")
    diff = rendered_mask - Tensor(lab)
    return (diff * diff).mean()
