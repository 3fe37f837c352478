"""Checkpoint container: a text header plus little-endian float32 payload.

Layout::

    fieldedit-ckpt 1
    meta <key> <value ...>
    section <name>
    tensor <name> <d0,d1,...> <byte offset> <byte length>
    ...
    end
    <raw float32 data>

Sections and tensors are written in sorted order, so identical states produce
identical files and a save/load/save cycle is bitwise stable. Loading
validates the magic line, version, tensor bounds, and payload length.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .editing import (AttentionFieldNet, DeformationNet, EditModules,
                      ResidualMapper)
from .field import (FeatureDecoder, FieldBundle, LatentCode, PlaneSynthesizer)
from .rendering import Upsampler

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "save_field_checkpoint",
    "load_field_checkpoint",
    "save_edit_checkpoint",
    "load_edit_checkpoint",
]

MAGIC = "fieldedit-ckpt"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, sections: dict[str, dict[str, np.ndarray]],
                    meta: dict[str, str] | None = None) -> None:
    header: list[str] = [f"{MAGIC} {VERSION}"]
    for k, v in sorted((meta or {}).items()):
        k, v = str(k), str(v)
        if any(c in k for c in " \n") or "\n" in v:
            raise ValueError(f"meta entry {k!r} contains unsupported characters")
        header.append(f"meta {k} {v}")
    blobs: list[bytes] = []
    offset = 0
    for sname in sorted(sections):
        header.append(f"section {sname}")
        for tname in sorted(sections[sname]):
            # asarray with order="C" keeps 0-d arrays 0-d, unlike
            # ascontiguousarray which promotes them to shape (1,)
            arr = np.asarray(sections[sname][tname], dtype="<f4", order="C")
            raw = arr.tobytes()
            shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
            header.append(f"tensor {tname} {shape} {offset} {len(raw)}")
            blobs.append(raw)
            offset += len(raw)
    header.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path,
                    ) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, str]]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header")
    first = data[:nl].decode("utf-8", errors="replace").split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"not a {MAGIC} file")
    if first[1] != str(VERSION):
        raise CheckpointError(f"unsupported checkpoint version {first[1]!r}")

    sections: dict[str, dict[str, np.ndarray]] = {}
    meta: dict[str, str] = {}
    tensors: list[tuple[str, str, tuple[int, ...], int, int]] = []
    pos = nl + 1
    current = None
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("header not terminated by 'end'")
        line = data[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "section":
            current = rest
            if current in sections:
                raise CheckpointError(f"duplicate section {current!r}")
            sections[current] = {}
        elif kind == "tensor":
            if current is None:
                raise CheckpointError("tensor outside any section")
            try:
                tname, shape_s, off_s, len_s = rest.split(" ")
                shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
                off, length = int(off_s), int(len_s)
            except ValueError as e:
                raise CheckpointError(f"malformed tensor line {line!r}") from e
            expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if expected != length:
                raise CheckpointError(f"tensor {tname!r}: shape/length mismatch")
            tensors.append((current, tname, shape, off, length))
        else:
            raise CheckpointError(f"unknown header line {line!r}")

    payload = data[pos:]
    for sname, tname, shape, off, length in tensors:
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"tensor {tname!r} exceeds payload "
                                  f"({off}+{length} > {len(payload)})")
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off)
        sections[sname][tname] = arr.reshape(shape).copy()
    return sections, meta


# ---------------------------------------------------------------------------
# typed helpers


def save_field_checkpoint(path: str | Path, bundle: FieldBundle,
                          extra_meta: dict[str, str] | None = None) -> None:
    s = bundle.synthesizer
    meta = {
        "kind": "field",
        "n_groups": str(s.n_groups), "group_dim": str(s.group_dim),
        "resolution": str(s.resolution), "channels": str(s.channels),
        "hidden": str(s.hidden), "extent": repr(float(s.extent)),
        "decoder_hidden": str(bundle.decoder.mlp.layers[0].W.shape[1]),
        "out_channels": str(bundle.decoder.out_channels),
        "latent_space": bundle.w_s.space,
    }
    meta.update(extra_meta or {})
    sections = {
        "synthesizer": bundle.synthesizer.state(),
        "decoder": bundle.decoder.state(),
        "upsampler": bundle.upsampler.state(),
        "latent": {"w_s": bundle.w_s.numpy()},
    }
    save_checkpoint(path, sections, meta)


def load_field_checkpoint(path: str | Path) -> tuple[FieldBundle, dict[str, str]]:
    sections, meta = load_checkpoint(path)
    if meta.get("kind") != "field":
        raise CheckpointError(f"expected a field checkpoint, got kind={meta.get('kind')!r}")
    rng = np.random.default_rng(0)  # placeholder init, overwritten by load_state
    synth = PlaneSynthesizer(
        rng, n_groups=int(meta["n_groups"]), group_dim=int(meta["group_dim"]),
        resolution=int(meta["resolution"]), channels=int(meta["channels"]),
        hidden=int(meta["hidden"]), extent=float(meta["extent"]))
    decoder = FeatureDecoder(rng, in_channels=int(meta["channels"]),
                             hidden=int(meta["decoder_hidden"]),
                             out_channels=int(meta["out_channels"]))
    upsampler = Upsampler(int(meta["out_channels"]))
    try:
        synth.load_state(sections["synthesizer"])
        decoder.load_state(sections["decoder"])
        upsampler.load_state(sections["upsampler"])
        w_s = LatentCode.from_array(sections["latent"]["w_s"],
                                    space=meta.get("latent_space", "w"))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"field checkpoint is incomplete: {e}") from e
    bundle = FieldBundle(synth, decoder, upsampler, w_s)
    bundle.set_trainable(False)
    return bundle, meta


def save_edit_checkpoint(path: str | Path, edit: EditModules, prompts=None,
                         extra_meta: dict[str, str] | None = None) -> None:
    lrm, afn, dn = edit.mapper, edit.afn, edit.dn
    meta = {
        "kind": "edit",
        "n_groups": str(lrm.n_groups), "group_dim": str(lrm.group_dim),
        "lrm_hidden": str(lrm.heads[0].layers[0].W.shape[1]),
        "afn_feature_dim": str(afn.feature_dim),
        "afn_latent_dim": str(afn.latent_dim),
        "afn_hidden": str(afn.mlp.layers[0].W.shape[1]),
        "dn_latent_dim": str(dn.latent_dim),
        "dn_hidden": str(dn.mlp.layers[0].W.shape[1]),
        "dn_gamma": repr(float(dn.gamma)),
        "deformation_enabled": str(edit.deformation_enabled),
    }
    if prompts is not None:
        meta["prompt_edit"] = prompts.edit
        meta["prompt_mask"] = prompts.mask
        meta["prompt_source"] = prompts.source
        meta["prompt_distractors"] = ";".join(prompts.distractors)
    meta.update(extra_meta or {})
    sections = {"lrm": lrm.state(), "afn": afn.state(), "dn": dn.state()}
    save_checkpoint(path, sections, meta)


def load_edit_checkpoint(path: str | Path) -> tuple[EditModules, dict[str, str]]:
    sections, meta = load_checkpoint(path)
    if meta.get("kind") != "edit":
        raise CheckpointError(f"expected an edit checkpoint, got kind={meta.get('kind')!r}")
    rng = np.random.default_rng(0)
    lrm = ResidualMapper(rng, int(meta["n_groups"]), int(meta["group_dim"]),
                         hidden=int(meta["lrm_hidden"]))
    afn = AttentionFieldNet(rng, feature_dim=int(meta["afn_feature_dim"]),
                            latent_dim=int(meta["afn_latent_dim"]),
                            hidden=int(meta["afn_hidden"]))
    dn = DeformationNet(rng, latent_dim=int(meta["dn_latent_dim"]),
                        hidden=int(meta["dn_hidden"]),
                        gamma=float(meta["dn_gamma"]))
    try:
        lrm.load_state(sections["lrm"])
        afn.load_state(sections["afn"])
        dn.load_state(sections["dn"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"edit checkpoint is incomplete: {e}") from e
    edit = EditModules(lrm, afn, dn,
                       deformation_enabled=meta.get("deformation_enabled", "True") == "True")
    edit.set_trainable(False)
    return edit, meta
