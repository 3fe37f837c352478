"""Command-line interface.

Commands: pretrain, edit-train, render, render-mask, eval, gradcheck,
dump-pseudolabels. Every command reads an optional config file plus repeated
``--set key=value`` overrides; commands that produce a run directory copy the
resolved config into it.

Exit codes: 0 success; 1 usage or configuration errors (including unknown
config keys and unreadable checkpoints); 2 numeric failures (training aborts,
non-finite values, gradient-check failures); 3 violated internal invariants.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import (CheckpointError, load_edit_checkpoint,
                         load_field_checkpoint, save_edit_checkpoint,
                         save_field_checkpoint)
from .config import (ConfigError, apply_overrides, encoder_from, load_config,
                     pose_ranges_from, pretrain_config_from, prompts_from,
                     save_config, scene_from, train_config_from)
from .editing import EditStack
from .field import (FeatureDecoder, LatentCode, PlaneSynthesizer,
                    pretrain_field, render_view)
from .gradcheck import MODULE_CHOICES, format_reports, run_suite
from .images import write_pgm, write_ppm
from .metrics import eval_edit
from .rendering import Upsampler, bilinear_resize_array, pose_from_angles
from .training import TrainingError, train_edit

__all__ = ["main", "entrypoint"]


def _add_common(p: argparse.ArgumentParser, out_help: str | None = None) -> None:
    p.add_argument("--config", default=None, help="config file path")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    if out_help:
        p.add_argument("--out", required=True, help=out_help)


def _resolved_config(args) -> dict:
    return apply_overrides(load_config(args.config), args.overrides)


def _parse_pose(spec: str, cfg: dict):
    vals = {"az": 0.0, "el": 0.0, "radius": cfg["pose.radius"],
            "fov": cfg["pose.fov_y"]}
    if spec:
        for part in spec.split(","):
            if "=" not in part:
                raise ConfigError(f"pose component {part!r} is not key=value")
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in vals:
                raise ConfigError(f"unknown pose key {key!r}; "
                                  f"valid: {', '.join(sorted(vals))}")
            try:
                vals[key] = float(value)
            except ValueError:
                raise ConfigError(f"pose {key}: {value!r} is not a number") from None
    return pose_from_angles(vals["az"], vals["el"], vals["radius"], vals["fov"])


def _load_stack(ckpt: str, edit_paths: list[str]):
    bundle, _ = load_field_checkpoint(ckpt)
    edits, metas = [], []
    for p in edit_paths:
        e, meta = load_edit_checkpoint(p)
        edits.append(e)
        metas.append(meta)
    return bundle, edits, metas


def _cmd_pretrain(args) -> int:
    cfg = _resolved_config(args)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.txt")
    scene = scene_from(cfg)
    ranges = pose_ranges_from(cfg)
    pcfg = pretrain_config_from(cfg)
    rng = np.random.default_rng(cfg["pretrain.seed"])
    channels = cfg["model.channels"]
    w_s = LatentCode.sample(rng, cfg["model.n_groups"], cfg["model.group_dim"])
    synth = PlaneSynthesizer(rng, n_groups=cfg["model.n_groups"],
                             group_dim=cfg["model.group_dim"],
                             resolution=cfg["model.resolution"],
                             channels=channels,
                             hidden=cfg["model.synth_hidden"],
                             extent=cfg["model.extent"],
                             style_scale=cfg["model.style_scale"])
    decoder = FeatureDecoder(rng, in_channels=channels,
                             hidden=cfg["model.decoder_hidden"],
                             out_channels=channels)
    upsampler = Upsampler(channels)
    bundle, log = pretrain_field(scene, w_s, ranges, pcfg, rng,
                                 synth, decoder, upsampler)
    save_field_checkpoint(run / "field.ckpt", bundle)
    with open(run / "pretrain_log.csv", "w") as f:
        f.write("step,eval_l2\n")
        for step, val in log:
            f.write(f"{step},{val:.9e}\n")
    final = log[-1][1]
    psnr = 10.0 * np.log10(1.0 / max(final, 1e-12))
    print(f"pretrained field -> {run / 'field.ckpt'} "
          f"(eval_l2 {final:.3e}, psnr {psnr:.1f} dB)")
    return 0


def _cmd_edit_train(args) -> int:
    cfg = _resolved_config(args)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.txt")
    bundle, base_edits, _ = _load_stack(args.ckpt, args.edit)
    field_dst = run / "field.ckpt"
    if Path(args.ckpt).resolve() != field_dst.resolve():
        shutil.copyfile(args.ckpt, field_dst)
    for i, src in enumerate(args.edit):
        dst = run / f"edit_{i:03d}.ckpt"
        if Path(src).resolve() != dst.resolve():
            shutil.copyfile(src, dst)
    encoder = encoder_from(cfg)
    prompts = prompts_from(cfg)
    edit, rows = train_edit(bundle, encoder, prompts, pose_ranges_from(cfg),
                            train_config_from(cfg), seed=cfg["edit.seed"],
                            run_dir=run, base_edits=base_edits)
    out_ckpt = run / f"edit_{len(base_edits):03d}.ckpt"
    save_edit_checkpoint(out_ckpt, edit, prompts,
                         extra_meta={"seed": str(cfg["edit.seed"]),
                                     "steps": str(cfg["edit.steps"])})
    print(f"trained edit {prompts.edit!r} -> {out_ckpt} "
          f"({len(rows)} steps, final guidance loss {rows[-1]['total_lrm']:.4f})")
    return 0


def _render_common(args, want_mask: bool):
    cfg = _resolved_config(args)
    if want_mask and not args.edit:
        raise ConfigError("render-mask needs at least one --edit checkpoint")
    bundle, edits, _ = _load_stack(args.ckpt, args.edit)
    stack = EditStack(bundle, edits)
    pose = _parse_pose(args.pose, cfg)
    hv = cfg["render.feature_hw"]
    rgb, out = render_view(stack.field_fn(), bundle.upsampler, pose,
                           hv, cfg["render.n_samples"],
                           cfg["render.near"], cfg["render.far"],
                           mode="midpoint")
    return cfg, hv, rgb, out


def _cmd_render(args) -> int:
    _, _, rgb, _ = _render_common(args, want_mask=False)
    write_ppm(args.out, np.clip(np.asarray(rgb.data), 0.0, 1.0))
    print(f"wrote {args.out}")
    return 0


def _cmd_render_mask(args) -> int:
    _, hv, _, out = _render_common(args, want_mask=True)
    m = np.asarray(out["mask"].data, dtype=np.float64).reshape(hv, hv)
    up = bilinear_resize_array(m[..., None], 2 * hv, 2 * hv)[..., 0]
    write_pgm(args.out, np.clip(up, 0.0, 1.0))
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    run = Path(args.run)
    cfg_path = run / "config.txt"
    if not cfg_path.is_file():
        raise ConfigError(f"run directory {run} has no config.txt")
    cfg = apply_overrides(load_config(cfg_path), args.overrides)
    edit_paths = sorted(str(p) for p in run.glob("edit_*.ckpt"))
    if not edit_paths:
        raise ConfigError(f"run directory {run} has no edit checkpoints")
    bundle, edits, metas = _load_stack(str(run / "field.ckpt"), edit_paths)
    prompt_edit = metas[-1].get("prompt_edit", cfg["edit.prompt"])
    prompt_mask = metas[-1].get("prompt_mask", cfg["edit.mask_prompt"])
    report = eval_edit(
        EditStack(bundle, []).field_fn(), EditStack(bundle, edits).field_fn(),
        bundle.upsampler, scene_from(cfg), tuple(cfg["eval.blobs"]),
        prompt_edit, prompt_mask, pose_ranges_from(cfg),
        n_views=cfg["eval.views"], seed=cfg["eval.seed"],
        feature_hw=cfg["render.feature_hw"], n_samples=cfg["render.n_samples"],
        near=cfg["render.near"], far=cfg["render.far"],
        region_scale=cfg["eval.region_scale"])
    (run / "metrics.csv").write_text(report.to_csv())
    (run / "metrics.txt").write_text(report.summary())
    print(report.summary(), end="")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_suite(args.module, seed=args.seed, wide=args.wide,
                        eps=args.eps, tol=args.tol)
    print(format_reports(reports))
    return 0 if all(r.passed for r in reports) else 2


def _cmd_dump_pseudolabels(args) -> int:
    cfg = _resolved_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle, edits, _ = _load_stack(args.ckpt, args.edit)
    encoder = encoder_from(cfg)
    ranges = pose_ranges_from(cfg)
    hv = cfg["render.feature_hw"]
    source_fn = EditStack(bundle, []).field_fn()
    target_fn = EditStack(bundle, edits).field_fn() if edits else source_fn
    rng = np.random.default_rng(args.seed)
    from .distillation import pseudo_label
    from .rendering import sample_pose
    for v in range(args.views):
        pose = sample_pose(ranges, rng)
        src, _ = render_view(source_fn, bundle.upsampler, pose, hv,
                             cfg["render.n_samples"], cfg["render.near"],
                             cfg["render.far"], mode="midpoint")
        tgt, _ = render_view(target_fn, bundle.upsampler, pose, hv,
                             cfg["render.n_samples"], cfg["render.near"],
                             cfg["render.far"], mode="midpoint")
        src_np = np.clip(np.asarray(src.data), 0.0, 1.0)
        tgt_np = np.clip(np.asarray(tgt.data), 0.0, 1.0)
        label = pseudo_label(encoder, src_np, tgt_np, cfg["edit.mask_prompt"],
                             (hv, hv), cfg["edit.deformation_enabled"])
        write_ppm(out / f"view_{v:02d}_source.ppm", src_np)
        write_ppm(out / f"view_{v:02d}_target.ppm", tgt_np)
        write_pgm(out / f"view_{v:02d}_label.pgm", label)
    print(f"wrote {args.views} pseudo-label views to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldedit",
        description="local text-driven edits of latent tri-plane fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="fit the generator stack to a scene")
    _add_common(p, out_help="run directory")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("edit-train", help="train one edit on a frozen field")
    _add_common(p, out_help="run directory")
    p.add_argument("--ckpt", required=True, help="field checkpoint")
    p.add_argument("--edit", action="append", default=[],
                   help="earlier edit checkpoint (repeat to chain)")
    p.set_defaults(func=_cmd_edit_train)

    for name, fn, helptext in (
            ("render", _cmd_render, "render an RGB view to a PPM file"),
            ("render-mask", _cmd_render_mask,
             "render the edit membership mask to a PGM file")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p, out_help="output image path")
        p.add_argument("--ckpt", required=True, help="field checkpoint")
        p.add_argument("--edit", action="append", default=[],
                       help="edit checkpoint (repeat to chain)")
        p.add_argument("--pose", default="",
                       help="comma list az=..,el=..[,radius=..][,fov=..] (radians)")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="score a finished edit run")
    p.add_argument("--run", required=True, help="run directory from edit-train")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", default="all", choices=list(MODULE_CHOICES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wide", action="store_true",
                   help="double precision, tolerance 1e-6")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=None,
                   help="override the pass tolerance")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("dump-pseudolabels",
                       help="write 2D relevance pseudo-labels for sample views")
    _add_common(p, out_help="output directory")
    p.add_argument("--ckpt", required=True, help="field checkpoint")
    p.add_argument("--edit", action="append", default=[],
                   help="edit checkpoint defining the target render")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_dump_pseudolabels)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, IsADirectoryError,
            KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, NonFiniteError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except AssertionError as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
