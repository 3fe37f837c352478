"""Local editing of tri-plane fields: latent residuals, deformation, masking.

An edit is three small trainable networks around a frozen generator stack:

* the residual mapper turns the source latent ``w_s`` into an out-of-range
  target latent ``w_t = w_s + delta_w`` via one MLP per latent group;
* the deformation network warps source-field sample positions,
  ``x' = x + gamma * MLP(x, w_s, w_t)``, and starts as the identity;
* the attention field network scores each 3D point with a soft membership
  ``m`` in [0, 1] from both fields' features, both positions, and both
  latents.

The edited field blends features position-wise,
``F_hat = (1 - m) F_s(x') + m F_t(x)``, and decodes the blend. Edits chain:
the source features of edit k+1 can come from edit k's blended field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, affine_tanh, concat
from .nn import MLP, Module
from .field import (FeatureDecoder, FieldBundle, LatentCode, TriPlaneSet,
                    sample_features)

__all__ = [
    "ResidualMapper",
    "DeformationNet",
    "AttentionFieldNet",
    "map_latent",
    "fuse_features",
    "EditModules",
    "base_feature_field",
    "edited_feature_field",
    "field_fn_with_mask",
    "EditStack",
]


class ResidualMapper(Module):
    """Per-group residual MLPs; zero-initialized heads so the initial map
    is the identity and the residual norm starts at exactly zero."""

    def __init__(self, rng: np.random.Generator, n_groups: int = 4,
                 group_dim: int = 16, hidden: int = 64, dtype=np.float32):
        super().__init__()
        self.n_groups = n_groups
        self.group_dim = group_dim
        self.heads = [
            self.add_module(f"g{i}", MLP([group_dim, hidden, hidden, group_dim],
                                         rng, zero_init_last=True, dtype=dtype))
            for i in range(n_groups)
        ]

    def __call__(self, w: LatentCode) -> tuple[Tensor, LatentCode]:
        """Return (delta_w flat (n_groups * group_dim,), target latent)."""
        if w.n_groups != self.n_groups or w.group_dim != self.group_dim:
            raise ValueError("latent code shape does not match mapper")
        deltas = []
        target_groups = []
        for head, g in zip(self.heads, w.groups):
            d = head(g.reshape(1, -1)).reshape(-1)
            deltas.append(d)
            target_groups.append(g + d)
        return concat(deltas, axis=0), LatentCode(tuple(target_groups), space="w_star")


def map_latent(mapper: ResidualMapper, w_s: LatentCode) -> tuple[Tensor, LatentCode]:
    if w_s.space != "w":
        raise ValueError("residual mapper expects an in-range source latent")
    return mapper(w_s)


def _broadcast_rows(vec: Tensor, n: int) -> Tensor:
    """Tile a (d,) Tensor into (n, d) differentiably."""
    ones = Tensor(np.ones((n, 1), dtype=vec.dtype))
    return vec.reshape(1, -1) * ones


def _mlp_with_shared_tail(mlp: MLP, x_cols: Tensor, shared: Tensor) -> Tensor:
    """Evaluate ``mlp(concat([x_cols, shared-per-row], axis=1))`` cheaply.

    ``shared`` (d_s,) would occupy identical trailing columns in every row, so
    its contribution to the first affine layer is a single row vector added by
    broadcasting; the per-point matmul shrinks to the leading columns. Exactly
    the same parameters and (up to float addition order) the same values.
    """
    fc0 = mlp.layers[0]
    d_x = x_cols.shape[1]
    row = shared.reshape(1, -1) @ fc0.W[d_x:] + fc0.b
    h = (x_cols @ fc0.W[:d_x] + row).tanh()
    for layer in mlp.layers[1:-1]:
        h = affine_tanh(h, layer.W, layer.b)
    return mlp.layers[-1](h)


class DeformationNet(Module):
    """Residual point warp conditioned on both latents.

    The final layer is zero-initialized, so the warp starts as the identity;
    ``gamma`` bounds the scale of the learned displacement.
    """

    def __init__(self, rng: np.random.Generator, latent_dim: int = 64,
                 hidden: int = 64, gamma: float = 0.1, dtype=np.float32):
        super().__init__()
        self.gamma = float(gamma)
        self.latent_dim = latent_dim
        self.mlp = self.add_module(
            "mlp", MLP([3 + 2 * latent_dim, hidden, hidden, hidden, 3], rng,
                       zero_init_last=True, dtype=dtype))

    def __call__(self, x: Tensor, ws_flat: Tensor, wt_flat: Tensor) -> Tensor:
        shared = concat([ws_flat, wt_flat], axis=0)
        return x + _mlp_with_shared_tail(self.mlp, x, shared) * self.gamma


class AttentionFieldNet(Module):
    """Soft 3D membership field for the edit region.

    Consumes source features at warped positions, target features at original
    positions, both positions, and both flattened latents; emits a sigmoid
    score per point. The final bias starts strongly negative so the initial
    mask is near zero everywhere (the edit begins inert).
    """

    def __init__(self, rng: np.random.Generator, feature_dim: int = 8,
                 latent_dim: int = 64, hidden: int = 64,
                 initial_bias: float = -4.0, dtype=np.float32):
        super().__init__()
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        in_dim = 2 * feature_dim + 6 + 2 * latent_dim
        self.mlp = self.add_module(
            "mlp", MLP([in_dim, hidden, hidden, hidden, 1], rng,
                       last_bias=initial_bias, dtype=dtype))

    def __call__(self, f_s: Tensor, x_warp: Tensor, f_t: Tensor, x: Tensor,
                 ws_flat: Tensor, wt_flat: Tensor) -> Tensor:
        cols = concat([f_s, x_warp, f_t, x], axis=1)
        shared = concat([ws_flat, wt_flat], axis=0)
        return _mlp_with_shared_tail(self.mlp, cols, shared).sigmoid().reshape(-1)


def fuse_features(f_s: Tensor, f_t: Tensor, m: Tensor) -> Tensor:
    """Position-wise convex blend ``(1 - m) f_s + m f_t``; ``m`` in [0, 1]."""
    if np.any(m.data < 0.0) or np.any(m.data > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    mcol = m.reshape(-1, 1)
    return f_s * (1.0 - mcol) + f_t * mcol


@dataclass
class EditModules:
    """Trainable networks of one edit plus the latents they produced."""

    mapper: ResidualMapper
    afn: AttentionFieldNet
    dn: DeformationNet
    deformation_enabled: bool = True

    def modules(self) -> dict[str, Module]:
        return {"lrm": self.mapper, "afn": self.afn, "dn": self.dn}

    def set_trainable(self, flag: bool) -> "EditModules":
        for m in self.modules().values():
            m.set_trainable(flag)
        return self


def base_feature_field(planes: TriPlaneSet):
    """Feature field backed directly by a tri-plane set."""

    def feature_fn(x: Tensor) -> tuple[Tensor, Tensor | None]:
        return sample_features(planes, x), None

    return feature_fn


def edited_feature_field(source_field, planes_t: TriPlaneSet, edit: EditModules,
                         ws_flat: Tensor, wt_flat: Tensor, force_mask=None):
    """Compose a source feature field with one edit.

    ``source_field`` maps positions to (features, mask-or-None); the composed
    field warps positions for the source branch (if deformation is enabled),
    samples the target planes at original positions, scores membership, and
    blends. Returns the blend and the edit's own mask. ``force_mask`` replaces
    the attention output with a constant (used by ablations).
    """

    def feature_fn(x: Tensor) -> tuple[Tensor, Tensor]:
        if edit.deformation_enabled:
            x_warp = edit.dn(x, ws_flat, wt_flat)
        else:
            x_warp = x
        f_s, _ = source_field(x_warp)
        f_t = sample_features(planes_t, x)
        if force_mask is None:
            m = edit.afn(f_s, x_warp, f_t, x, ws_flat, wt_flat)
        else:
            m = Tensor(np.full((x.shape[0],), force_mask,
                               dtype=planes_t.planes[0].dtype))
        return fuse_features(f_s, f_t, m), m

    return feature_fn


def field_fn_with_mask(feature_fn, decoder: FeatureDecoder):
    """Adapt a feature field to the renderer interface, exposing its mask."""

    def field_fn(x: Tensor):
        features, m = feature_fn(x)
        values, sigma = decoder(features)
        extras = {} if m is None else {"mask": m}
        return values, sigma, extras

    return field_fn


@dataclass
class EditStack:
    """A frozen bundle plus zero or more chained edits.

    Edit k+1 takes edit k's blended features as its source field. The stack's
    rendered mask is the outermost edit's membership field.
    """

    bundle: FieldBundle
    edits: list[EditModules]

    def feature_field(self, upto: int | None = None):
        """Compose the chain; ``upto`` limits to the first ``upto`` edits."""
        planes_s = self.bundle.synthesizer(self.bundle.w_s)
        fn = base_feature_field(planes_s)
        ws_flat = self.bundle.w_s.flat()
        edits = self.edits if upto is None else self.edits[:upto]
        for edit in edits:
            _, w_t = map_latent(edit.mapper, self.bundle.w_s)
            planes_t = self.bundle.synthesizer(w_t)
            fn = edited_feature_field(fn, planes_t, edit, ws_flat, w_t.flat())
        return fn

    def field_fn(self, upto: int | None = None):
        return field_fn_with_mask(self.feature_field(upto), self.bundle.decoder)
