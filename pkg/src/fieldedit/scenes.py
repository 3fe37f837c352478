"""Analytic test scenes: mixtures of Gaussian density blobs with fixed colors.

These scenes play the role of ground-truth 3D content. Density and color are
closed-form functions of position, so a slow reference integrator can render
them to arbitrary accuracy and every fitted field has an exact target.

Scene files are plain text::

    # two colored blobs
    extent = 1.0
    blob name=left center=-0.45,0.0,0.0 radius=0.24 color=0.15,0.25,0.85 density=14.0
    blob name=right center=0.45,0.0,0.0 radius=0.24 color=0.85,0.55,0.15 density=14.0
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "GaussianBlob",
    "AnalyticSceneSpec",
    "two_blob_scene",
    "empty_scene",
    "parse_scene",
    "load_scene",
    "format_scene",
    "recolor",
]


@dataclass(frozen=True)
class GaussianBlob:
    """Isotropic Gaussian density bump with a constant albedo color.

    ``radius`` is the Gaussian sigma; ``density`` the peak extinction at the
    center. The blob's visual edge sits near 1.5 to 2 sigma depending on how
    saturated the peak opacity is.
    """

    name: str
    center: np.ndarray
    radius: float
    color: np.ndarray
    density: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.center.shape != (3,):
            raise ValueError("blob center must be a 3-vector")
        if self.color.shape != (3,):
            raise ValueError("blob color must be a 3-vector")
        if not (self.radius > 0):
            raise ValueError("blob radius must be positive")
        if self.density < 0:
            raise ValueError("blob density must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("blob color channels must lie in [0, 1]")


@dataclass(frozen=True)
class AnalyticSceneSpec:
    """Closed-form scene: density/color mixtures of :class:`GaussianBlob`."""

    extent: float
    blobs: tuple[GaussianBlob, ...]

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(self.blobs))
        if not (self.extent > 0):
            raise ValueError("scene extent must be positive")
        names = [b.name for b in self.blobs]
        if len(set(names)) != len(names):
            raise ValueError("blob names must be unique")

    def blob(self, name: str) -> GaussianBlob:
        for b in self.blobs:
            if b.name == name:
                return b
        raise KeyError(f"no blob named {name!r}; known: {[b.name for b in self.blobs]}")

    def density(self, x: np.ndarray) -> np.ndarray:
        """Extinction coefficient at positions ``x`` (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape[:-1], dtype=np.float64)
        for b in self.blobs:
            d2 = np.sum((x - b.center) ** 2, axis=-1)
            out += b.density * np.exp(-0.5 * d2 / (b.radius * b.radius))
        return out

    def color(self, x: np.ndarray) -> np.ndarray:
        """Density-weighted albedo at positions ``x`` (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        num = np.zeros(x.shape[:-1] + (3,), dtype=np.float64)
        den = np.zeros(x.shape[:-1] + (1,), dtype=np.float64)
        for b in self.blobs:
            d2 = np.sum((x - b.center) ** 2, axis=-1, keepdims=True)
            w = b.density * np.exp(-0.5 * d2 / (b.radius * b.radius))
            num += w * b.color
            den += w
        return num / (den + 1e-12)


def two_blob_scene() -> AnalyticSceneSpec:
    """Default scene: a blue-ish blob on the left, an orange one on the right."""
    return AnalyticSceneSpec(
        extent=1.0,
        blobs=(
            GaussianBlob("left", (-0.45, 0.0, 0.0), 0.24, (0.15, 0.25, 0.85), 14.0),
            GaussianBlob("right", (0.45, 0.0, 0.0), 0.24, (0.85, 0.55, 0.15), 14.0),
        ),
    )


def empty_scene(extent: float = 1.0) -> AnalyticSceneSpec:
    return AnalyticSceneSpec(extent=extent, blobs=())


def recolor(scene: AnalyticSceneSpec, colors: dict[str, np.ndarray]) -> AnalyticSceneSpec:
    """Return a copy of ``scene`` with the named blobs' colors replaced."""
    known = {b.name for b in scene.blobs}
    unknown = sorted(set(colors) - known)
    if unknown:
        raise KeyError(f"no blobs named {unknown}; known: {sorted(known)}")
    blobs = []
    for b in scene.blobs:
        if b.name in colors:
            c = np.clip(np.asarray(colors[b.name], dtype=np.float64), 0.0, 1.0)
            blobs.append(replace(b, color=c))
        else:
            blobs.append(b)
    return AnalyticSceneSpec(extent=scene.extent, blobs=tuple(blobs))


def _parse_floats(text: str, n: int, what: str) -> np.ndarray:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != n:
        raise ValueError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return np.asarray([float(p) for p in parts], dtype=np.float64)


def parse_scene(text: str) -> AnalyticSceneSpec:
    extent = None
    blobs: list[GaussianBlob] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("blob "):
            fields = {}
            for token in line[len("blob "):].split():
                if "=" not in token:
                    raise ValueError(f"scene line {lineno}: malformed token {token!r}")
                k, v = token.split("=", 1)
                fields[k] = v
            required = {"name", "center", "radius", "color", "density"}
            missing = required - set(fields)
            if missing:
                raise ValueError(f"scene line {lineno}: blob missing {sorted(missing)}")
            blobs.append(GaussianBlob(
                name=fields["name"],
                center=_parse_floats(fields["center"], 3, "center"),
                radius=float(fields["radius"]),
                color=_parse_floats(fields["color"], 3, "color"),
                density=float(fields["density"]),
            ))
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            if k != "extent":
                raise ValueError(f"scene line {lineno}: unknown key {k!r}")
            extent = float(v)
        else:
            raise ValueError(f"scene line {lineno}: cannot parse {raw!r}")
    if extent is None:
        raise ValueError("scene file must set extent")
    return AnalyticSceneSpec(extent=extent, blobs=tuple(blobs))


def load_scene(path: str | Path) -> AnalyticSceneSpec:
    return parse_scene(Path(path).read_text())


def format_scene(scene: AnalyticSceneSpec) -> str:
    lines = [f"extent = {scene.extent!r}"]
    for b in scene.blobs:
        c = ",".join(repr(float(v)) for v in b.center)
        col = ",".join(repr(float(v)) for v in b.color)
        lines.append(f"blob name={b.name} center={c} radius={b.radius!r} "
                     f"color={col} density={b.density!r}")
    return "\n".join(lines) + "\n"
