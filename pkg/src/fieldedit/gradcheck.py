"""Central finite-difference verification of every gradient path.

Each named case builds a miniature but fully representative computation —
a one-ray render through all three edit networks, the regularizers, the
contrastive objective, the mask objective — exposes its leaf parameters,
and compares analytic gradients against central differences.

Numeric references are always evaluated in float64. ``wide=True`` also takes
the analytic gradients in float64 (tolerance 1e-6); ``wide=False`` takes them
from an identically-initialized float32 twin (tolerance 1e-4), measuring the
accuracy of single-precision backprop against the trusted reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, compute_gradients
from .distillation import mask_loss
from .editing import (AttentionFieldNet, DeformationNet, EditModules,
                      ResidualMapper, base_feature_field, edited_feature_field,
                      field_fn_with_mask, map_latent)
from .field import (FeatureDecoder, LatentCode, PlaneSynthesizer, TriPlaneSet,
                    sample_features)
from .guidance import (AugmentConfig, SyntheticOracleEncoder,
                       ToyTransformerEncoder, build_directions,
                       clip_contrastive_loss, clip_plus_loss, identity_embed,
                       identity_loss)
from .rendering import RayBundle, render_rays
from .training import sparsity_loss, tv_loss

__all__ = [
    "ParamResult", "CaseReport", "fd_gradient", "check_gradients",
    "run_case", "run_suite", "format_reports",
    "CASE_NAMES", "CRITERION_CASES", "MODULE_CHOICES",
]


def fd_gradient(forward: Callable[[], Tensor], param: Tensor,
                eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``forward()`` w.r.t. one leaf tensor."""
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f_hi = float(forward().data)
        flat[i] = keep - eps
        f_lo = float(forward().data)
        flat[i] = keep
        grad[i] = (f_hi - f_lo) / (2.0 * eps)
    return grad.reshape(param.data.shape)


@dataclass(frozen=True)
class ParamResult:
    name: str
    rel_err: float
    abs_err: float
    size: int


@dataclass(frozen=True)
class CaseReport:
    name: str
    tol: float
    eps: float
    results: tuple[ParamResult, ...]

    @property
    def max_rel(self) -> float:
        return max((r.rel_err for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol


def check_gradients(forward: Callable[[], Tensor], params: dict[str, Tensor],
                    eps: float = 1e-5, floor: float = 1e-8,
                    analytic: dict[str, np.ndarray] | None = None,
                    ) -> list[ParamResult]:
    """Compare analytic and central-difference gradients for each leaf.

    The relative error per leaf is ``max|a - n| / max(max|a|, max|n|, floor)``
    so all-zero gradients compare as exactly zero error.
    """
    if analytic is None:
        analytic = compute_gradients(forward(), params)
    out = []
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        n = fd_gradient(forward, p, eps)
        abs_err = float(np.max(np.abs(a - n))) if a.size else 0.0
        denom = max(float(np.max(np.abs(a))) if a.size else 0.0,
                    float(np.max(np.abs(n))) if n.size else 0.0, floor)
        out.append(ParamResult(name, abs_err / denom, abs_err, a.size))
    return out


# ---------------------------------------------------------------------------
# case builders: (seed, dtype) -> (forward, params)
#
# Every builder draws its raw values in float64 from a seeded generator and
# casts, so float32 and float64 twins share identical underlying numbers.


def _randomize(module, rng: np.random.Generator, scale: float = 0.35) -> None:
    for p in module.parameters().values():
        p.data = (rng.standard_normal(p.data.shape) * scale).astype(p.data.dtype)


def _case_sample_feature(seed, dtype):
    rng = np.random.default_rng(seed)
    planes = TriPlaneSet(tuple(
        Tensor((rng.standard_normal((5, 5, 2)) * 0.5).astype(dtype),
               requires_grad=True) for _ in range(3)), extent=1.0)
    x = Tensor(rng.uniform(-0.8, 0.8, (7, 3)).astype(dtype), requires_grad=True)
    wmix = Tensor(rng.standard_normal((7, 2)).astype(dtype))

    def forward():
        return (sample_features(planes, x) * wmix).sum()

    params = {f"plane{i}": p for i, p in enumerate(planes.planes)}
    params["positions"] = x
    return forward, params


def _case_decoder(seed, dtype):
    rng = np.random.default_rng(seed)
    decoder = FeatureDecoder(np.random.default_rng(seed + 1),
                             in_channels=6, hidden=7, out_channels=6)
    if dtype == np.float64:
        decoder = decoder.astype(np.float64)
    _randomize(decoder, rng)
    feats = Tensor((rng.standard_normal((5, 6)) * 0.6).astype(dtype),
                   requires_grad=True)
    wv = Tensor(rng.standard_normal((5, 6)).astype(dtype))
    ws = Tensor(rng.standard_normal((5,)).astype(dtype))

    def forward():
        values, sigma = decoder(feats)
        return (values * wv).sum() + (sigma * ws).sum()

    params = dict(decoder.parameters())
    params["features"] = feats
    return forward, params


def _case_render_edit(seed, dtype):
    rng = np.random.default_rng(seed)
    ctor = np.random.default_rng(seed + 1)
    synth = PlaneSynthesizer(ctor, n_groups=2, group_dim=3, resolution=6,
                             channels=4, hidden=5, extent=1.0)
    decoder = FeatureDecoder(ctor, in_channels=4, hidden=6, out_channels=4)
    lrm = ResidualMapper(ctor, n_groups=2, group_dim=3, hidden=4)
    afn = AttentionFieldNet(ctor, feature_dim=4, latent_dim=6, hidden=4)
    dn = DeformationNet(ctor, latent_dim=6, hidden=4, gamma=0.1)
    if dtype == np.float64:
        synth, decoder = synth.astype(np.float64), decoder.astype(np.float64)
        lrm, afn, dn = (m.astype(np.float64) for m in (lrm, afn, dn))
    for m in (synth, decoder, lrm, afn, dn):
        _randomize(m, rng)
    synth.set_trainable(False)
    decoder.set_trainable(False)
    edit = EditModules(lrm, afn, dn, deformation_enabled=True)

    w_s = LatentCode.from_array(rng.standard_normal((2, 3)) * 0.5,
                                space="w", dtype=dtype)
    planes_s = synth(w_s)
    source = base_feature_field(planes_s)
    bundle = RayBundle(origins=np.array([[0.0, 0.0, -2.5]]),
                       directions=np.array([[0.0, 0.0, 1.0]]),
                       near=1.7, far=3.3, height=1, width=1)
    wv = Tensor(rng.standard_normal((1, 4)).astype(dtype))

    def forward():
        _, w_t = map_latent(lrm, w_s)
        planes_t = synth(w_t)
        feature_fn = edited_feature_field(source, planes_t, edit,
                                          w_s.flat(), w_t.flat())
        out = render_rays(field_fn_with_mask(feature_fn, decoder), bundle,
                          n_samples=8, mode="midpoint", dtype=dtype)
        return ((out["values"] * wv).sum() + 0.5 * out["mask"].sum()
                + 0.25 * out["opacity"].sum())

    params: dict[str, Tensor] = {}
    for prefix, module in edit.modules().items():
        for name, p in module.parameters().items():
            params[f"{prefix}.{name}"] = p
    return forward, params


def _case_tv(seed, dtype):
    rng = np.random.default_rng(seed)
    grid = Tensor(rng.uniform(0.05, 0.95, (4, 4, 4)).astype(dtype),
                  requires_grad=True)
    return (lambda: tv_loss(grid)), {"grid": grid}


def _case_sparsity(seed, dtype):
    rng = np.random.default_rng(seed)
    # well-separated values so the top/bottom-k selection is stable under fd
    base = np.linspace(0.1, 0.9, 40) + rng.uniform(-0.004, 0.004, 40)
    m = Tensor(rng.permutation(base).astype(dtype), requires_grad=True)
    return (lambda: sparsity_loss(m, 4)), {"m": m}


def _case_clip(seed, dtype):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.standard_normal(6).astype(dtype), requires_grad=True)
    positives = [rng.standard_normal(6) for _ in range(2)]
    negatives = [rng.standard_normal(6) for _ in range(3)]
    return (lambda: clip_contrastive_loss(q, positives, negatives)), {"q": q}


def _case_mask(seed, dtype):
    rng = np.random.default_rng(seed)
    pred = Tensor(rng.uniform(0.0, 1.0, (8, 8)).astype(dtype),
                  requires_grad=True)
    label = rng.uniform(0.0, 1.0, (8, 8))
    return (lambda: mask_loss(pred, label)), {"pred": pred}


def _case_clip_plus_pixels(seed, dtype):
    rng = np.random.default_rng(seed)
    enc = SyntheticOracleEncoder()
    img_s = rng.uniform(0.2, 0.8, (16, 16, 3)).astype(dtype)
    pix = Tensor(rng.uniform(0.2, 0.8, (16, 16, 3)).astype(dtype),
                 requires_grad=True)
    dw = Tensor((rng.standard_normal(6) * 0.1).astype(dtype))
    e_src = np.asarray(identity_embed(Tensor(img_s)).data)
    aug = AugmentConfig(enabled=False)

    def forward():
        ds = build_directions(enc, Tensor(img_s), pix, "red left blob", "scene",
                              ["green left blob", "blue right blob"],
                              np.random.default_rng(0), aug)
        l_clip = clip_contrastive_loss(ds.q, ds.positives, ds.negatives)
        l_id = identity_loss(e_src, pix)
        total, _ = clip_plus_loss(l_clip, dw, l_id, 0.8, 0.1)
        return total

    return forward, {"pixels": pix}


def _case_encoder_pixels(seed, dtype):
    rng = np.random.default_rng(seed)
    enc = ToyTransformerEncoder()
    if dtype == np.float64:
        enc = enc.astype(np.float64)
    pix = Tensor(rng.uniform(0.1, 0.9, (16, 16, 3)).astype(dtype),
                 requires_grad=True)
    text = None

    def forward():
        nonlocal text
        if text is None:
            text = enc.embed_text("red left blob").astype(dtype)
        emb = enc.embed_image(pix)
        return (emb * Tensor(text)).sum()

    return forward, {"pixels": pix}


@dataclass(frozen=True)
class _CaseSpec:
    build: Callable
    tol_wide: float = 1e-6
    tol_standard: float = 1e-4


_CASES: dict[str, _CaseSpec] = {
    "sample_feature": _CaseSpec(_case_sample_feature),
    "decoder": _CaseSpec(_case_decoder),
    "render_edit": _CaseSpec(_case_render_edit),
    "tv": _CaseSpec(_case_tv),
    "sparsity": _CaseSpec(_case_sparsity),
    "clip": _CaseSpec(_case_clip),
    "mask": _CaseSpec(_case_mask),
    "clip_plus_pixels": _CaseSpec(_case_clip_plus_pixels, tol_wide=1e-5),
    "encoder_pixels": _CaseSpec(_case_encoder_pixels),
}

CASE_NAMES: tuple[str, ...] = tuple(_CASES)

# the five paths the release gate checks at 1e-6
CRITERION_CASES: tuple[str, ...] = ("render_edit", "tv", "sparsity", "clip",
                                    "mask")

# --module values: case name, or one network of the render case
_MODULE_MAP: dict[str, tuple[str, str]] = {name: (name, "") for name in _CASES}
_MODULE_MAP.update({
    "render": ("render_edit", ""),
    "lrm": ("render_edit", "lrm."),
    "afn": ("render_edit", "afn."),
    "dn": ("render_edit", "dn."),
})
MODULE_CHOICES: tuple[str, ...] = ("all",) + tuple(sorted(_MODULE_MAP))


def run_case(name: str, seed: int = 0, wide: bool = True,
             eps: float = 1e-5, param_prefix: str = "",
             tol: float | None = None) -> CaseReport:
    spec = _CASES[name]
    forward64, params64 = spec.build(seed, np.float64)
    if param_prefix:
        params64 = {k: v for k, v in params64.items()
                    if k.startswith(param_prefix)}
        if not params64:
            raise ValueError(f"case {name!r} has no params matching "
                             f"{param_prefix!r}")
    if wide:
        analytic = None  # computed from the float64 build
    else:
        forward32, params32 = spec.build(seed, np.float32)
        grads32 = compute_gradients(forward32(), params32)
        analytic = {k: np.asarray(v, dtype=np.float64)
                    for k, v in grads32.items() if k in params64}
    results = check_gradients(forward64, params64, eps=eps, analytic=analytic)
    if tol is None:
        tol = spec.tol_wide if wide else spec.tol_standard
    return CaseReport(name, tol, eps, tuple(results))


def run_suite(module: str = "all", seed: int = 0, wide: bool = True,
              eps: float = 1e-5, tol: float | None = None) -> list[CaseReport]:
    if module == "all":
        targets = [(name, "") for name in CASE_NAMES]
    elif module in _MODULE_MAP:
        targets = [_MODULE_MAP[module]]
    else:
        raise ValueError(f"unknown module {module!r}; "
                         f"choose from {', '.join(MODULE_CHOICES)}")
    return [run_case(name, seed=seed, wide=wide, eps=eps,
                     param_prefix=prefix, tol=tol)
            for name, prefix in targets]


def format_reports(reports: list[CaseReport]) -> str:
    lines = []
    for rep in reports:
        worst = max(rep.results, key=lambda r: r.rel_err, default=None)
        tag = "PASS" if rep.passed else "FAIL"
        lines.append(f"{rep.name}: max rel err {rep.max_rel:.3e} "
                     f"(tol {rep.tol:.0e}) {tag}")
        if worst is not None:
            lines.append(f"  worst leaf: {worst.name} "
                         f"rel {worst.rel_err:.3e} abs {worst.abs_err:.3e}")
    ok = all(r.passed for r in reports)
    lines.append(f"overall: {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
