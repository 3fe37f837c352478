"""Edit training: objectives, regularizers, and the optimization loop.

Loss routing follows the two-objective structure of the method:

* the residual mapper and deformation network are updated by the directional
  guidance objective (contrast + residual L2 leash + identity term) alone,
  differentiated through the full edited render;
* the attention field network is updated by the mask objective
  ``lambda_mask L_mask + lambda_tv L_tv + lambda_sparsity L_sparsity``
  plus ``lambda_clip_plus`` times its share of the guidance gradient.

The regularizer graph is built on detached copies of everything except the
attention network itself, so its backward pass cannot leak into the mapper or
the deformation network. Pseudo-labels refresh every ``label_interval`` steps
at that step's camera pose; between refreshes, the mask loss keeps rendering
from the stored label pose so prediction and label always share a viewpoint.

The generator stack (and any frozen base edits being chained) is digest-checked
against mutation; a non-finite loss aborts training with the last good
parameter snapshot preserved.
"""

from __future__ import annotations

import csv
import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tensor, compute_gradients, concat
from .distillation import mask_loss, pseudo_label
from .editing import (AttentionFieldNet, DeformationNet, EditModules,
                      ResidualMapper, base_feature_field,
                      edited_feature_field, field_fn_with_mask, fuse_features,
                      map_latent)
from .field import FieldBundle, field_fn_from, sample_features
from .guidance import (AugmentConfig, build_directions, clip_contrastive_loss,
                       clip_plus_loss, identity_embed, identity_loss)
from .nn import Module
from .optim import AdamState, adam_init, adam_step
from .rendering import PoseRanges, generate_rays, render_rays, sample_pose

__all__ = [
    "tv_loss",
    "sparsity_loss",
    "afn_total",
    "PromptSet",
    "TrainConfig",
    "TrainingError",
    "train_edit",
    "adam_init",
    "adam_step",
    "AdamState",
]

TV_EPS = 1e-12
MASK_CLAMP = 1e-6


def tv_loss(m_grid: Tensor) -> Tensor:
    """Total-variation smoothness of a mask lattice (G0, G1, G2).

    Forward differences with replicate padding (boundary differences are
    zero); per-voxel magnitude ``sqrt(dx^2 + dy^2 + dz^2 + eps)`` with
    eps = 1e-12, averaged over all voxels.
    """
    if m_grid.ndim != 3:
        raise ValueError("tv_loss expects a 3-D lattice")
    g0, g1, g2 = m_grid.shape
    dt = m_grid.dtype
    sq = None
    for axis, tail in ((0, (1, g1, g2)), (1, (g0, 1, g2)), (2, (g0, g1, 1))):
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(0, -1)
        d = m_grid[tuple(sl_hi)] - m_grid[tuple(sl_lo)]
        d2 = concat([d * d, Tensor(np.zeros(tail, dtype=dt))], axis=axis)
        sq = d2 if sq is None else sq + d2
    return (sq + TV_EPS).sqrt().mean()


def sparsity_loss(m: Tensor, k: int) -> Tensor:
    """Push the k largest mask samples toward 1 and the k smallest toward 0.

    ``-sum_top log m - sum_bottom log(1 - m)`` with values clamped to
    [1e-6, 1 - 1e-6]. Selection uses a stable argsort of the detached values
    (ascending; ties resolved by sample index), so it is deterministic and the
    loss is permutation-equivariant up to that tie rule.
    """
    if m.ndim != 1:
        raise ValueError("sparsity_loss expects flat mask samples")
    n = m.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range for {n} samples")
    order = np.argsort(m.data, kind="stable")
    bottom = np.sort(order[:k])
    top = np.sort(order[n - k:])
    mc = m.clip(MASK_CLAMP, 1.0 - MASK_CLAMP)
    return -(mc[top].log().sum()) - ((1.0 - mc[bottom]).log().sum())


def afn_total(l_mask: float, l_tv: float, l_sparsity: float, l_clip_plus: float,
              lambda_mask: float, lambda_tv: float, lambda_sparsity: float,
              lambda_clip_plus: float) -> float:
    """Scalar value of the full attention-field objective (for logging)."""
    return (lambda_mask * l_mask + lambda_tv * l_tv
            + lambda_sparsity * l_sparsity + lambda_clip_plus * l_clip_plus)


@dataclass(frozen=True)
class PromptSet:
    """Text conditioning of one edit."""

    edit: str
    mask: str
    source: str = "scene"
    distractors: tuple[str, ...] = ()


@dataclass
class TrainConfig:
    steps: int = 2000
    lr_lrm: float = 1e-3
    lr_afn: float = 1e-3
    lr_dn: float = 1e-4
    lambda_mask: float = 1.0
    lambda_tv: float = 0.05
    lambda_sparsity: float = 0.01
    lambda_clip_plus: float = 1.0
    lambda_l2: float = 0.8
    lambda_id: float = 0.1
    top_fraction: float = 0.01
    label_interval: int = 25
    tv_grid: int = 16
    deformation_enabled: bool = False
    feature_hw: int = 32
    n_samples: int = 48
    near: float = 1.2
    far: float = 4.2
    aug: AugmentConfig = dc_field(
        default_factory=lambda: AugmentConfig(enabled=False))
    lrm_hidden: int = 64
    afn_hidden: int = 64
    dn_hidden: int = 64
    dn_gamma: float = 0.1
    afn_bias: float = -4.0
    freeze_check_interval: int = 500
    image_interval: int = 0
    dump_pseudolabels: bool = False
    force_mask: float | None = None  # ablation: constant mask instead of AFN


class TrainingError(RuntimeError):
    """Raised when training aborts on a numeric failure."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


LOG_COLUMNS = ("step", "l_clip", "l_l2", "l_id", "l_mask", "l_tv",
               "l_sparsity", "total_lrm", "total_afn")


@contextmanager
def _frozen(*modules: Module):
    """Temporarily stop gradient tracking for the given modules."""
    saved = []
    for m in modules:
        params = m.parameters()
        saved.append((params, {k: p.requires_grad for k, p in params.items()}))
        m.set_trainable(False)
    try:
        yield
    finally:
        for params, flags in saved:
            for k, p in params.items():
                p.requires_grad = flags[k]


def _digest_state(modules: dict[str, Module]) -> dict[str, str]:
    out = {}
    for name, m in modules.items():
        h = hashlib.sha256()
        for pname in sorted(m.parameters()):
            h.update(pname.encode())
            h.update(np.ascontiguousarray(m.parameters()[pname].data).tobytes())
        out[name] = h.hexdigest()
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["step"]] + [f"{row[c]:.9e}" for c in LOG_COLUMNS[1:]])


def train_edit(bundle: FieldBundle, encoder, prompts: PromptSet,
               ranges: PoseRanges, cfg: TrainConfig, seed: int = 0,
               run_dir: str | Path | None = None,
               base_edits: list[EditModules] | None = None,
               edit: EditModules | None = None,
               ) -> tuple[EditModules, list[dict]]:
    """Train one edit against a frozen generator stack.

    ``base_edits`` are earlier, frozen edits; the new edit's source field is
    their composite output. Returns the trained edit and per-step loss rows
    (also written to ``run_dir/loss.csv`` when a run directory is given).
    """
    base_edits = list(base_edits or [])
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence(seed)
    pose_rng, jit_rng, aug_rng, init_rng = [np.random.default_rng(s)
                                            for s in ss.spawn(4)]

    synth, decoder, upsampler = (bundle.synthesizer, bundle.decoder,
                                 bundle.upsampler)
    w_s = bundle.w_s
    d_lat = w_s.n_groups * w_s.group_dim
    if edit is None:
        edit = EditModules(
            mapper=ResidualMapper(init_rng, w_s.n_groups, w_s.group_dim,
                                  hidden=cfg.lrm_hidden),
            afn=AttentionFieldNet(init_rng, feature_dim=synth.channels,
                                  latent_dim=d_lat, hidden=cfg.afn_hidden,
                                  initial_bias=cfg.afn_bias),
            dn=DeformationNet(init_rng, latent_dim=d_lat, hidden=cfg.dn_hidden,
                              gamma=cfg.dn_gamma),
            deformation_enabled=cfg.deformation_enabled,
        )
    edit.set_trainable(True)

    frozen_modules: dict[str, Module] = dict(bundle.modules())
    for i, be in enumerate(base_edits):
        be.set_trainable(False)
        for mname, m in be.modules().items():
            frozen_modules[f"base{i}.{mname}"] = m
    frozen_digest = _digest_state(frozen_modules)

    def check_frozen(where: str) -> None:
        now = _digest_state(frozen_modules)
        changed = [k for k in frozen_digest if now[k] != frozen_digest[k]]
        assert not changed, (f"frozen parameters mutated during training "
                             f"({where}): {changed}")

    # source stack: frozen, so its renders run without graph construction
    planes_s = synth(w_s)
    ws_flat = w_s.flat()
    src_field = base_feature_field(planes_s)
    for be in base_edits:
        _, w_tb = map_latent(be.mapper, w_s)
        planes_tb = synth(w_tb)
        src_field = edited_feature_field(src_field, planes_tb, be, ws_flat,
                                         w_tb.flat())
    src_render_fn = field_fn_with_mask(src_field, decoder)

    hv = cfg.feature_hw
    n_rays = hv * hv
    P = n_rays * cfg.n_samples
    k_sparse = max(1, int(round(cfg.top_fraction * P)))
    extent = planes_s.extent
    gl = np.linspace(-extent, extent, cfg.tv_grid, dtype=np.float32)
    lattice = np.stack(np.meshgrid(gl, gl, gl, indexing="ij"), axis=-1).reshape(-1, 3)

    params_lrm = {f"lrm.{k}": v for k, v in edit.mapper.parameters().items()}
    params_afn = {f"afn.{k}": v for k, v in edit.afn.parameters().items()}
    params_dn = {f"dn.{k}": v for k, v in edit.dn.parameters().items()}
    all_params = {**params_lrm, **params_afn, **params_dn}
    opt_lrm = adam_init(params_lrm)
    opt_afn = adam_init(params_afn)
    opt_dn = adam_init(params_dn)

    label: np.ndarray | None = None
    label_rays = None
    label_x = None
    rows: list[dict] = []
    last_good: dict[str, np.ndarray] | None = None

    def snapshot() -> dict[str, np.ndarray]:
        return {k: np.array(p.data, copy=True) for k, p in all_params.items()}

    def save_ckpt_state(path: Path, state: dict[str, np.ndarray]) -> None:
        from .checkpoint import save_edit_checkpoint
        stash = snapshot()
        for k, p in all_params.items():
            p.data = state[k]
        save_edit_checkpoint(path, edit, prompts)
        for k, p in all_params.items():
            p.data = stash[k]

    for t in range(cfg.steps):
        pose = sample_pose(ranges, pose_rng)
        jseed = int(jit_rng.integers(2**63))
        rays = generate_rays(pose, hv, hv, cfg.near, cfg.far)

        # ---- source render at this step's pose (no gradients) ----
        src_out = render_rays(src_render_fn, rays, cfg.n_samples,
                              mode="stratified", seed=jseed)
        C = src_out["values"].shape[1]
        img_s = upsampler(src_out["values"].reshape(hv, hv, C))
        img_s_np = np.asarray(img_s.data)

        # ---- edited render, full graph ----
        dw_flat, w_t = map_latent(edit.mapper, w_s)
        planes_t = synth(w_t)
        wt_flat = w_t.flat()
        edited_ff = edited_feature_field(src_field, planes_t, edit, ws_flat,
                                         wt_flat, force_mask=cfg.force_mask)
        ed_out = render_rays(field_fn_with_mask(edited_ff, decoder), rays,
                             cfg.n_samples, mode="stratified", seed=jseed)
        img_t = upsampler(ed_out["values"].reshape(hv, hv, C))

        # ---- pseudo-label refresh at this pose ----
        planes_t_d = planes_t.detach()
        if t % cfg.label_interval == 0:
            raw_out = render_rays(
                field_fn_from(planes_t_d, decoder), rays, cfg.n_samples,
                mode="stratified", seed=jseed)
            img_t_raw = np.asarray(
                upsampler(raw_out["values"].reshape(hv, hv, C)).data)
            label = pseudo_label(encoder, img_s_np, img_t_raw,
                                 prompts.mask, (hv, hv),
                                 cfg.deformation_enabled)
            label_rays = rays
            if run_path is not None and cfg.dump_pseudolabels:
                from .images import write_pgm
                pl_dir = run_path / "pseudolabels"
                pl_dir.mkdir(exist_ok=True)
                write_pgm(pl_dir / f"step_{t:05d}.pgm", label)

        # ---- guidance objective (mapper + deformation + attention) ----
        dirs = build_directions(encoder, img_s, img_t, prompts.edit,
                                prompts.source, list(prompts.distractors),
                                aug_rng, cfg.aug)
        l_clip = clip_contrastive_loss(dirs.q, dirs.positives, dirs.negatives)
        e_id_src = identity_embed(img_s.detach()).data
        l_id = identity_loss(e_id_src, img_t)
        l_cp, parts = clip_plus_loss(l_clip, dw_flat, l_id,
                                     cfg.lambda_l2, cfg.lambda_id)
        def abort(message: str, exc: Exception):
            if run_path is not None:
                if last_good is not None:
                    save_ckpt_state(run_path / "abort_last_good.ckpt", last_good)
                _write_csv(run_path / "loss.csv", rows)
            raise TrainingError(t, message) from exc

        try:
            grads_main = compute_gradients(l_cp, all_params)
        except NonFiniteError as e:
            abort(f"non-finite guidance loss ({e.op})", e)

        # ---- mask objective on detached inputs (attention network only) ----
        reg = _mask_objective(edit, decoder, label, label_rays, planes_s,
                              planes_t_d, ws_flat.detach(), wt_flat.detach(),
                              lattice, k_sparse, cfg, jseed)
        try:
            if reg["loss"].requires_grad:
                grads_reg = compute_gradients(reg["loss"], params_afn)
            else:  # constant-mask ablation: no attention net in the graph
                if not np.all(np.isfinite(reg["loss"].data)):
                    raise NonFiniteError("loss")
                grads_reg = {k: np.zeros_like(p.data)
                             for k, p in params_afn.items()}
        except NonFiniteError as e:
            abort(f"non-finite mask objective ({e.op})", e)

        last_good = snapshot()

        afn_grads = {k: cfg.lambda_clip_plus * grads_main[k] + grads_reg[k]
                     for k in params_afn}
        adam_step(opt_lrm, params_lrm,
                  {k: grads_main[k] for k in params_lrm}, cfg.lr_lrm)
        if cfg.deformation_enabled:
            adam_step(opt_dn, params_dn,
                      {k: grads_main[k] for k in params_dn}, cfg.lr_dn)
        adam_step(opt_afn, params_afn, afn_grads, cfg.lr_afn)

        row = {
            "step": t,
            "l_clip": parts["clip"],
            "l_l2": parts["l2"],
            "l_id": parts["id"],
            "l_mask": reg["l_mask"],
            "l_tv": reg["l_tv"],
            "l_sparsity": reg["l_sparsity"],
            "total_lrm": float(l_cp.data),
            "total_afn": afn_total(reg["l_mask"], reg["l_tv"], reg["l_sparsity"],
                                   float(l_cp.data), cfg.lambda_mask,
                                   cfg.lambda_tv, cfg.lambda_sparsity,
                                   cfg.lambda_clip_plus),
        }
        rows.append(row)

        if run_path is not None and cfg.image_interval and t % cfg.image_interval == 0:
            from .images import write_pgm, write_ppm
            img_dir = run_path / "images"
            img_dir.mkdir(exist_ok=True)
            write_ppm(img_dir / f"step_{t:05d}_source.ppm", img_s_np)
            write_ppm(img_dir / f"step_{t:05d}_edited.ppm",
                      np.asarray(img_t.data))
            write_pgm(img_dir / f"step_{t:05d}_mask.pgm",
                      reg["mask_image"])

        if cfg.freeze_check_interval and (t + 1) % cfg.freeze_check_interval == 0:
            check_frozen(f"step {t}")

    check_frozen("end of training")
    edit.set_trainable(False)
    if run_path is not None:
        _write_csv(run_path / "loss.csv", rows)
    return edit, rows


def _mask_objective(edit: EditModules, decoder, label: np.ndarray,
                    label_rays, planes_s, planes_t_d, ws_d: Tensor,
                    wt_d: Tensor, lattice: np.ndarray, k_sparse: int,
                    cfg: TrainConfig, jseed: int) -> dict:
    """Mask/TV/sparsity objective with gradients confined to the attention net.

    All inputs except the attention network's own parameters are detached:
    source features at (frozen) warped positions, target features, and both
    latents. The blended-density chain stays attached so the rendered mask's
    dependence on the attention output is differentiated exactly.
    """
    from .rendering import sample_depths

    hv = label_rays.height
    ks, deltas = sample_depths(label_rays.near, label_rays.far, cfg.n_samples,
                               label_rays.count, mode="stratified", seed=jseed)
    pts = (label_rays.origins[:, None, :]
           + ks[..., None] * label_rays.directions[:, None, :])
    x = Tensor(np.ascontiguousarray(pts.reshape(-1, 3), dtype=np.float32))

    with _frozen(edit.mapper, edit.afn, edit.dn):
        if edit.deformation_enabled:
            xw = edit.dn(x, ws_d, wt_d).detach()
        else:
            xw = x
        f_s = sample_features(planes_s, xw).detach()
        f_t = sample_features(planes_t_d, x).detach()

    if cfg.force_mask is None:
        m = edit.afn(f_s, xw, f_t, x, ws_d, wt_d)
    else:
        m = Tensor(np.full((x.shape[0],), cfg.force_mask, dtype=np.float32),
                   requires_grad=False)
    fused = fuse_features(f_s, f_t, m)
    _, sigma = decoder(fused)

    R = label_rays.count
    tau = sigma.reshape(R, cfg.n_samples) * Tensor(deltas)
    T = (tau - tau.cumsum(axis=1)).exp()
    alpha = 1.0 - (-tau).exp()
    weights = T * alpha
    m_img = (weights * m.reshape(R, cfg.n_samples)).sum(axis=1).reshape(hv, hv)
    l_mask = mask_loss(m_img, label)

    # lattice smoothness
    xg = Tensor(lattice)
    with _frozen(edit.mapper, edit.afn, edit.dn):
        if edit.deformation_enabled:
            xg_w = edit.dn(xg, ws_d, wt_d).detach()
        else:
            xg_w = xg
        fg_s = sample_features(planes_s, xg_w).detach()
        fg_t = sample_features(planes_t_d, xg).detach()
    if cfg.force_mask is None:
        mg = edit.afn(fg_s, xg_w, fg_t, xg, ws_d, wt_d)
    else:
        mg = Tensor(np.full((lattice.shape[0],), cfg.force_mask,
                            dtype=np.float32), requires_grad=False)
    g = cfg.tv_grid
    l_tv = tv_loss(mg.reshape(g, g, g))

    l_sp = sparsity_loss(m, k_sparse)

    loss = (cfg.lambda_mask * l_mask + cfg.lambda_tv * l_tv
            + cfg.lambda_sparsity * l_sp)
    return {
        "loss": loss,
        "l_mask": float(l_mask.data),
        "l_tv": float(l_tv.data),
        "l_sparsity": float(l_sp.data),
        "mask_image": np.asarray(m_img.data),
    }
