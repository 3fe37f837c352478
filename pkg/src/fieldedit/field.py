"""Latent-conditioned tri-plane feature fields.

A field is three axis-aligned feature planes (XY, XZ, YZ) synthesized from a
grouped latent code by a small modulated generator. A point's feature is the
sum of bilinear samples from the three planes; a shared decoder turns features
into color, extra feature channels, and non-negative density.

The synthesizer is deliberately compact: per plane, a learned constant grid is
passed through two 1x1 layers whose inputs are scaled channelwise by
``1 + affine(w_group)``. Zero parameters give identically zero planes, and a
zero latent gives bias-only planes with no dependence on the latent at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, bilinear_gather, compute_gradients, concat
from .nn import MLP, Linear, Module
from .optim import adam_init, adam_step
from .rendering import (PoseRanges, Upsampler, generate_rays, oracle_render_image,
                        render_rays, sample_pose)
from .scenes import AnalyticSceneSpec, recolor

__all__ = [
    "LatentCode",
    "TriPlaneSet",
    "PlaneSynthesizer",
    "FeatureDecoder",
    "FieldSample",
    "DecodedPoint",
    "sample_features",
    "sample_feature",
    "decode_point",
    "field_fn_from",
    "render_view",
    "FieldBundle",
    "PretrainConfig",
    "pretrain_field",
    "colors_from_latent",
]

LATENT_SPACES = ("w", "w_star")


@dataclass(frozen=True)
class LatentCode:
    """Grouped latent: N groups of dimension d, plus a space tag.

    ``space`` is ``"w"`` for codes drawn from the training distribution and
    ``"w_star"`` for out-of-range codes produced by the residual mapper.
    """

    groups: tuple[Tensor, ...]
    space: str = "w"

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.space not in LATENT_SPACES:
            raise ValueError(f"latent space must be one of {LATENT_SPACES}")
        if not self.groups:
            raise ValueError("latent code needs at least one group")
        d = self.groups[0].shape
        if len(d) != 1:
            raise ValueError("latent groups must be 1-D")
        for g in self.groups:
            if g.shape != d:
                raise ValueError("all latent groups must share one dimension")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_dim(self) -> int:
        return self.groups[0].shape[0]

    def flat(self) -> Tensor:
        return concat(list(self.groups), axis=0)

    def numpy(self) -> np.ndarray:
        return np.stack([g.data for g in self.groups])

    def detach(self) -> "LatentCode":
        return LatentCode(tuple(g.detach() for g in self.groups), self.space)

    @staticmethod
    def from_array(arr: np.ndarray, space: str = "w", dtype=np.float32) -> "LatentCode":
        arr = np.asarray(arr, dtype=dtype)
        if arr.ndim != 2:
            raise ValueError("expected (n_groups, group_dim) array")
        return LatentCode(tuple(Tensor(np.ascontiguousarray(row)) for row in arr), space)

    @staticmethod
    def sample(rng: np.random.Generator, n_groups: int = 4, group_dim: int = 16,
               dtype=np.float32) -> "LatentCode":
        return LatentCode.from_array(rng.standard_normal((n_groups, group_dim)),
                                     space="w", dtype=dtype)


@dataclass(frozen=True)
class TriPlaneSet:
    """Three feature planes (XY, XZ, YZ), each (R, R, C), over [-extent, extent]."""

    planes: tuple[Tensor, Tensor, Tensor]
    extent: float

    def __post_init__(self):
        object.__setattr__(self, "planes", tuple(self.planes))
        if len(self.planes) != 3:
            raise ValueError("a tri-plane set has exactly 3 planes")
        shape = self.planes[0].shape
        if len(shape) != 3 or shape[0] != shape[1]:
            raise ValueError("planes must be square (R, R, C)")
        for p in self.planes:
            if p.shape != shape:
                raise ValueError("planes must share one shape")
            if not np.all(np.isfinite(p.data)):
                raise ValueError("plane values must be finite")
        if not (self.extent > 0):
            raise ValueError("extent must be positive")

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[0]

    @property
    def channels(self) -> int:
        return self.planes[0].shape[2]

    def detach(self) -> "TriPlaneSet":
        return TriPlaneSet(tuple(p.detach() for p in self.planes), self.extent)


# Plane p reads the coordinate pair _PLANE_AXES[p]; the first axis indexes rows.
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def sample_features(planes: TriPlaneSet, x: Tensor) -> Tensor:
    """Sum of bilinear plane samples at world positions ``x`` (P, 3) -> (P, C).

    Positions map to plane coordinates with grid nodes on the cube boundary
    (align-corners); coordinates outside [-extent, extent] clamp to the edge,
    which also zeroes their position gradient there.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    R = planes.resolution
    C = planes.channels
    inv = 0.5 / planes.extent
    out = None
    for plane, (ia, ib) in zip(planes.planes, _PLANE_AXES):
        u = ((x[:, ia] * inv + 0.5) * (R - 1.0)).clip(0.0, R - 1.0)
        v = ((x[:, ib] * inv + 0.5) * (R - 1.0)).clip(0.0, R - 1.0)
        contrib = bilinear_gather(plane.reshape(R * R, C), u, v, R)
        out = contrib if out is None else out + contrib
    return out


@dataclass(frozen=True)
class FieldSample:
    """Feature vector sampled from a tri-plane set at one position."""

    position: np.ndarray
    feature: np.ndarray


@dataclass(frozen=True)
class DecodedPoint:
    """Decoder output at one point: RGB in [0,1], raw extras, density >= 0."""

    color: np.ndarray
    extras: np.ndarray
    sigma: float


def sample_feature(planes: TriPlaneSet, position) -> FieldSample:
    pos = np.asarray(position, dtype=np.float64).reshape(1, 3)
    feat = sample_features(planes, Tensor(pos.astype(planes.planes[0].dtype)))
    return FieldSample(position=pos[0], feature=np.array(feat.data[0]))


class PlaneSynthesizer(Module):
    """Latent-modulated generator of tri-plane sets.

    Each plane owns a learned constant grid and two 1x1 mixing layers; layer
    inputs are scaled by ``1 + affine(w_g)`` where the latent group ``g``
    rotates round-robin over the six (plane, layer) sites.
    """

    def __init__(self, rng: np.random.Generator, n_groups: int = 4,
                 group_dim: int = 16, resolution: int = 32, channels: int = 8,
                 hidden: int = 16, extent: float = 1.0, style_scale: float = 1.0,
                 dtype=np.float32):
        super().__init__()
        self.n_groups = n_groups
        self.group_dim = group_dim
        self.resolution = resolution
        self.channels = channels
        self.hidden = hidden
        self.extent = extent
        self.consts: list[Tensor] = []
        self.styles: list[list[Linear]] = []
        self.mixes: list[list[Linear]] = []
        for p in range(3):
            self.consts.append(self.add_param(
                f"p{p}_const", rng.standard_normal((resolution, resolution, hidden)).astype(dtype)))
            widths = [(hidden, hidden), (hidden, channels)]
            st, mx = [], []
            for layer, (cin, cout) in enumerate(widths):
                st.append(self.add_module(
                    f"p{p}_style{layer}",
                    Linear(group_dim, cin, rng, scale=style_scale / np.sqrt(group_dim), dtype=dtype)))
                mx.append(self.add_module(
                    f"p{p}_mix{layer}",
                    Linear(cin, cout, rng, dtype=dtype)))
            self.styles.append(st)
            self.mixes.append(mx)

    def site_group(self, plane: int, layer: int) -> int:
        return (2 * plane + layer) % self.n_groups

    def __call__(self, w: LatentCode) -> TriPlaneSet:
        if w.n_groups != self.n_groups or w.group_dim != self.group_dim:
            raise ValueError("latent code shape does not match synthesizer")
        R, C, h = self.resolution, self.channels, self.hidden
        planes = []
        for p in range(3):
            grid = self.consts[p].reshape(R * R, h)
            s0 = self.styles[p][0](w.groups[self.site_group(p, 0)].reshape(1, -1))
            h1 = self.mixes[p][0](grid * (1.0 + s0)).tanh()
            s1 = self.styles[p][1](w.groups[self.site_group(p, 1)].reshape(1, -1))
            out = self.mixes[p][1](h1 * (1.0 + s1))
            planes.append(out.reshape(R, R, C))
        return TriPlaneSet(tuple(planes), extent=self.extent)


class FeatureDecoder(Module):
    """Shared MLP decoder: feature -> (RGB in [0,1], raw extras, density >= 0)."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 8,
                 hidden: int = 64, out_channels: int = 8, dtype=np.float32):
        super().__init__()
        if out_channels < 3:
            raise ValueError("decoder needs at least RGB output channels")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.mlp = self.add_module("mlp", MLP([in_channels, hidden, out_channels + 1],
                                              rng, dtype=dtype))

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        z = self.mlp(features)
        rgb = z[:, :3].sigmoid()
        sigma = z[:, self.out_channels].softplus()
        if self.out_channels > 3:
            values = concat([rgb, z[:, 3:self.out_channels]], axis=1)
        else:
            values = rgb
        return values, sigma


def decode_point(decoder: FeatureDecoder, feature) -> DecodedPoint:
    f = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    values, sigma = decoder(Tensor(f.astype(np.float32)))
    vals = np.array(values.data[0])
    return DecodedPoint(color=vals[:3], extras=vals[3:], sigma=float(sigma.data[0]))


def field_fn_from(planes: TriPlaneSet, decoder: FeatureDecoder):
    """Plain field: sample tri-planes, decode. No mask channel."""

    def field_fn(x: Tensor):
        values, sigma = decoder(sample_features(planes, x))
        return values, sigma, {}

    return field_fn


def render_view(field_fn, upsampler: Upsampler, pose, feature_hw: int,
                n_samples: int, near: float, far: float,
                mode: str = "midpoint", seed: int = 0) -> tuple[Tensor, dict]:
    """Render a feature image at ``feature_hw`` and upsample to RGB at 2x."""
    bundle = generate_rays(pose, feature_hw, feature_hw, near, far)
    out = render_rays(field_fn, bundle, n_samples, mode=mode, seed=seed)
    C = out["values"].shape[1]
    feat_img = out["values"].reshape(feature_hw, feature_hw, C)
    rgb = upsampler(feat_img)
    return rgb, out


@dataclass
class FieldBundle:
    """A trained generator stack and its source latent. Frozen during edits."""

    synthesizer: PlaneSynthesizer
    decoder: FeatureDecoder
    upsampler: Upsampler
    w_s: LatentCode

    def modules(self) -> dict[str, Module]:
        return {"synthesizer": self.synthesizer, "decoder": self.decoder,
                "upsampler": self.upsampler}

    def set_trainable(self, flag: bool) -> "FieldBundle":
        for m in self.modules().values():
            m.set_trainable(flag)
        return self


# ---------------------------------------------------------------------------
# pretraining against the analytic oracle


def coupling_directions(scene: AnalyticSceneSpec, coupling_seed: int,
                        latent_dim: int) -> np.ndarray:
    """Fixed unit-scale latent directions controlling blob colors.

    Three rows per blob (one per color channel) in scene blob order,
    shape ``(3 * n_blobs, latent_dim)``.
    """
    rng = np.random.default_rng(coupling_seed)
    rows = [rng.standard_normal((3, latent_dim)) / np.sqrt(latent_dim)
            for _ in scene.blobs]
    return np.concatenate(rows, axis=0)


COUPLING_GAIN = 10.0


def colors_from_latent(w: LatentCode, w_s: LatentCode, scene: AnalyticSceneSpec,
                       coupling_seed: int, swing: float) -> dict[str, np.ndarray]:
    """Deterministic latent-to-color map anchored at the source latent.

    At ``w == w_s`` every blob keeps its scene color; moving the latent along
    fixed random directions (:func:`coupling_directions`) shifts blob colors
    smoothly within ``+-swing``. This couples color to the latent during
    pretraining so that latent-space edits can actually recolor content.
    """
    dw = (w.numpy() - w_s.numpy()).reshape(-1)
    dirs_all = coupling_directions(scene, coupling_seed, dw.shape[0])
    out = {}
    for i, b in enumerate(scene.blobs):
        dirs = dirs_all[3 * i:3 * i + 3]
        delta = swing * np.tanh(COUPLING_GAIN * dirs @ dw)
        out[b.name] = np.clip(b.color + delta, 0.0, 1.0)
    return out


@dataclass
class PretrainConfig:
    steps: int = 2500
    lr: float = 3e-3
    views: int = 10
    eval_views: int = 3
    eval_interval: int = 250
    oracle_steps: int = 512
    coupled_latents: int = 20
    coupling_radius: float = 0.18
    color_swing: float = 0.55
    coupling_seed: int = 777
    feature_hw: int = 32
    n_samples: int = 48
    near: float = 1.2
    far: float = 4.2
    lr_floor: float = 0.05


def pretrain_field(scene: AnalyticSceneSpec, w_s: LatentCode, ranges: PoseRanges,
                   cfg: PretrainConfig, rng: np.random.Generator,
                   synthesizer: PlaneSynthesizer | None = None,
                   decoder: FeatureDecoder | None = None,
                   upsampler: Upsampler | None = None,
                   ) -> tuple[FieldBundle, list[tuple[int, float]]]:
    """Fit the generator stack to oracle renders of the scene.

    Training pairs couple latents to recolored scene variants (see
    :func:`colors_from_latent`) with the source latent anchored to the scene
    itself. Returns the frozen bundle and ``(step, eval_l2)`` rows measured on
    held-out views of the source pair.
    """
    if synthesizer is None:
        synthesizer = PlaneSynthesizer(rng, n_groups=w_s.n_groups,
                                       group_dim=w_s.group_dim, extent=scene.extent)
    if decoder is None:
        decoder = FeatureDecoder(rng, in_channels=synthesizer.channels)
    if upsampler is None:
        upsampler = Upsampler(decoder.out_channels)
    for m in (synthesizer, decoder, upsampler):
        m.set_trainable(True)

    latents = [w_s]
    lat_rng = np.random.default_rng(cfg.coupling_seed)
    base = w_s.numpy()
    d = base.size
    dirs_all = coupling_directions(scene, cfg.coupling_seed, d)
    for _ in range(cfg.coupled_latents):
        # anchors live mostly inside the color-coupling subspace (plus a
        # little isotropic noise), so anchor-to-anchor distance tracks the
        # coupling's responsive scale and the fitted field keeps a steep
        # local latent-to-color response around the source latent
        coeff = cfg.coupling_radius * lat_rng.standard_normal(dirs_all.shape[0])
        offset = coeff @ dirs_all + 0.05 * lat_rng.standard_normal(d) / np.sqrt(d)
        latents.append(LatentCode.from_array(
            (base + offset.reshape(base.shape)).astype(base.dtype)))
    variants = [scene if i == 0 else
                recolor(scene, colors_from_latent(latents[i], w_s, scene,
                                                  cfg.coupling_seed, cfg.color_swing))
                for i in range(len(latents))]

    pose_rng = np.random.default_rng(rng.integers(2**63))
    train_poses = [sample_pose(ranges, pose_rng) for _ in range(cfg.views)]
    eval_poses = [sample_pose(ranges, pose_rng) for _ in range(cfg.eval_views)]
    hw = 2 * cfg.feature_hw

    targets = np.empty((len(latents), cfg.views, hw, hw, 3), dtype=np.float32)
    for i, variant in enumerate(variants):
        for v, pose in enumerate(train_poses):
            targets[i, v] = oracle_render_image(variant, pose, hw, hw, cfg.near,
                                                cfg.far, steps=cfg.oracle_steps)
    eval_targets = np.stack([
        oracle_render_image(scene, pose, hw, hw, cfg.near, cfg.far,
                            steps=cfg.oracle_steps)
        for pose in eval_poses]).astype(np.float32)

    params: dict[str, Tensor] = {}
    for mname, m in (("synth", synthesizer), ("dec", decoder), ("up", upsampler)):
        for pname, p in m.parameters().items():
            params[f"{mname}.{pname}"] = p
    opt = adam_init(params)

    def eval_l2() -> float:
        planes = synthesizer(w_s)
        fn = field_fn_from(planes, decoder)
        total = 0.0
        for v, pose in enumerate(eval_poses):
            rgb, _ = render_view(fn, upsampler, pose, cfg.feature_hw,
                                 cfg.n_samples, cfg.near, cfg.far, mode="midpoint")
            total += float(np.mean((rgb.data - eval_targets[v]) ** 2))
        return total / len(eval_poses)

    log: list[tuple[int, float]] = []
    step_rng = np.random.default_rng(rng.integers(2**63))
    for t in range(cfg.steps):
        if t % cfg.eval_interval == 0:
            log.append((t, eval_l2()))
        i = int(step_rng.integers(len(latents)))
        v = int(step_rng.integers(cfg.views))
        planes = synthesizer(latents[i])
        fn = field_fn_from(planes, decoder)
        rgb, _ = render_view(fn, upsampler, train_poses[v], cfg.feature_hw,
                             cfg.n_samples, cfg.near, cfg.far,
                             mode="stratified", seed=int(step_rng.integers(2**31)))
        diff = rgb - Tensor(targets[i, v])
        loss = (diff * diff).mean()
        grads = compute_gradients(loss, params)
        frac = t / max(cfg.steps - 1, 1)
        lr_t = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * (1.0 - frac))
        adam_step(opt, params, grads, lr_t)
    log.append((cfg.steps, eval_l2()))

    bundle = FieldBundle(synthesizer, decoder, upsampler, w_s.detach())
    bundle.set_trainable(False)
    return bundle, log
