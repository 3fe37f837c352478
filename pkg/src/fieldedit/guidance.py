"""Image/text guidance encoders and the directional contrastive loss.

Two stand-in encoders share one interface (``embed_image``, ``embed_text``,
plus a relevance mechanism consumed by the distillation module):

* :class:`SyntheticOracleEncoder` embeds an image as the normalized mean RGB
  of its left and right halves, and prompts as fixed coefficient vectors from
  a small vocabulary. Transparent geometry; every loss has a closed form.
* :class:`ToyTransformerEncoder` is a frozen two-layer ViT-style encoder with
  recorded attention maps, exercising the attention-based relevance path.

The directional loss compares the edit direction in image embedding space
``q = E(aug(I_t)) - E(aug(I_s))`` against positive text/image directions and
distractor negatives with a log-ratio of summed exponentials.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .nn import Module
from .rendering import bilinear_sample_axes

__all__ = [
    "AugmentConfig",
    "augment_image",
    "SyntheticOracleEncoder",
    "ToyTransformerEncoder",
    "parse_vocab",
    "DEFAULT_VOCAB",
    "l2_norm",
    "normalize_embedding",
    "clip_contrastive_loss",
    "build_directions",
    "identity_embed",
    "identity_loss",
    "clip_plus_loss",
]


def l2_norm(t: Tensor) -> Tensor:
    """Euclidean norm with a tiny bias so the gradient at zero is zero."""
    return ((t * t).sum() + 1e-24).sqrt()


def normalize_embedding(t: Tensor, fallback_dim: int | None = None) -> Tensor:
    """Unit-normalize; a (near-)zero vector falls back to a constant uniform
    unit vector, detached, so black images embed deterministically."""
    n2 = float((t.data * t.data).sum())
    dim = t.shape[0] if fallback_dim is None else fallback_dim
    if n2 < 1e-16:
        return Tensor(np.full((dim,), 1.0 / np.sqrt(dim), dtype=t.dtype))
    return t / l2_norm(t)


# ---------------------------------------------------------------------------
# differentiable augmentation


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    min_area: float = 0.9
    flip_prob: float = 0.5


def augment_image(img: Tensor, rng: np.random.Generator,
                  cfg: AugmentConfig = AugmentConfig()) -> Tensor:
    """Random crop (keeping at least ``min_area`` of the area) resized back to
    the input size, then a horizontal flip with probability ``flip_prob``.

    Fully differentiable w.r.t. the image. Draws exactly four variates from
    ``rng`` regardless of outcomes, so RNG streams stay aligned.
    """
    area = rng.uniform(cfg.min_area, 1.0)
    side = float(np.sqrt(area))
    oy = rng.uniform(0.0, 1.0 - side)
    ox = rng.uniform(0.0, 1.0 - side)
    flip = rng.uniform() < cfg.flip_prob
    if not cfg.enabled:
        return img
    H, W = img.shape[0], img.shape[1]
    ys = (oy + (np.arange(H) + 0.5) / H * side) * H - 0.5
    xs = (ox + (np.arange(W) + 0.5) / W * side) * W - 0.5
    out = bilinear_sample_axes(img, ys, xs)
    if flip:
        out = out[:, ::-1, :]
    return out


# ---------------------------------------------------------------------------
# synthetic oracle encoder

DEFAULT_VOCAB: dict[str, tuple[float, ...]] = {
    "scene": (1, 1, 1, 1, 1, 1),
    "left blob": (1, 1, 1, 0, 0, 0),
    "right blob": (0, 0, 0, 1, 1, 1),
    "red left blob": (1, 0, 0, 0, 0, 0),
    "green left blob": (0, 1, 0, 0, 0, 0),
    "blue left blob": (0, 0, 1, 0, 0, 0),
    "red right blob": (0, 0, 0, 1, 0, 0),
    "green right blob": (0, 0, 0, 0, 1, 0),
    "blue right blob": (0, 0, 0, 0, 0, 1),
}


def parse_vocab(text: str) -> dict[str, np.ndarray]:
    """Parse ``prompt = c1,c2,...`` lines into unit coefficient vectors."""
    vocab: dict[str, np.ndarray] = {}
    dim = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"vocab line {lineno}: expected 'prompt = numbers'")
        prompt, nums = (s.strip() for s in line.split("=", 1))
        vec = np.asarray([float(p) for p in nums.split(",") if p.strip()],
                         dtype=np.float64)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise ValueError(f"vocab line {lineno}: inconsistent dimension")
        n = np.linalg.norm(vec)
        if n < 1e-12:
            raise ValueError(f"vocab line {lineno}: zero vector for {prompt!r}")
        vocab[prompt] = vec / n
    if not vocab:
        raise ValueError("empty vocabulary")
    return vocab


class SyntheticOracleEncoder:
    """Half-image color statistics as a 6-dim embedding space.

    ``embed_image`` returns the L2-normalized vector of per-channel means of
    the left and right image halves; prompts map to fixed unit vectors in the
    same space. Relevance is clamped gradient-times-input saliency.
    """

    def __init__(self, vocab: dict[str, np.ndarray] | None = None):
        src = DEFAULT_VOCAB if vocab is None else vocab
        self.vocab = {}
        for k, v in src.items():
            vec = np.asarray(v, dtype=np.float64)
            self.vocab[k] = vec / np.linalg.norm(vec)
        self.text_dim = len(next(iter(self.vocab.values())))
        if self.text_dim != 6:
            raise ValueError("oracle vocabulary vectors must be 6-dimensional")

    def embed_image(self, img: Tensor) -> Tensor:
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) image")
        half = img.shape[1] // 2
        left = img[:, :half, :].mean(axis=(0, 1))
        right = img[:, half:, :].mean(axis=(0, 1))
        return normalize_embedding(concat([left, right], axis=0))

    def embed_text(self, prompt: str) -> np.ndarray:
        if prompt not in self.vocab:
            raise KeyError(f"unknown prompt {prompt!r}; known: {sorted(self.vocab)}")
        return self.vocab[prompt]

    def saliency(self, img: np.ndarray, prompt: str) -> np.ndarray:
        """Non-negative relevance at image resolution: clamp(grad * input)."""
        text = self.embed_text(prompt)
        x = Tensor(np.asarray(img, dtype=np.float64), requires_grad=True)
        emb = self.embed_image(x)
        y = (emb * Tensor(text)).sum()
        if not y.requires_grad:
            # constant embedding (e.g. black image): no usable gradient
            return np.zeros(img.shape[:2])
        y.backward()
        grad = x.grad if x.grad is not None else np.zeros_like(x.data)
        return np.maximum(grad * x.data, 0.0).sum(axis=2)


# ---------------------------------------------------------------------------
# toy transformer encoder


def _text_hash_seed(prompt: str, salt: int) -> int:
    digest = hashlib.sha256(f"{salt}:{prompt}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ToyTransformerEncoder(Module):
    """Frozen ViT-style encoder with recorded per-head attention maps.

    Patchify -> linear embed + positions + CLS -> ``layers`` pre-norm blocks of
    multi-head self-attention and a tanh MLP -> final norm -> linear head ->
    unit embedding. Text prompts embed as hash-seeded random unit vectors, so
    image/text similarity is arbitrary but fixed; the encoder's purpose is
    exercising the attention-relevance path with real recorded maps.
    """

    def __init__(self, seed: int = 11, patch: int = 8, dim: int = 32,
                 heads: int = 2, layers: int = 2, text_dim: int = 16,
                 dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.seed = seed
        self.patch = patch
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.text_dim = text_dim
        rng = np.random.default_rng(seed)

        def par(name, shape, scale):
            self.add_param(name, (rng.standard_normal(shape) * scale).astype(dtype))

        par("patch_W", (patch * patch * 3, dim), 1.0 / np.sqrt(patch * patch * 3))
        par("patch_b", (dim,), 0.0)
        par("cls", (dim,), 0.02)
        for li in range(layers):
            for nm in ("Wq", "Wk", "Wv", "Wo"):
                par(f"l{li}_{nm}", (dim, dim), 1.0 / np.sqrt(dim))
            par(f"l{li}_bo", (dim,), 0.0)
            par(f"l{li}_ln1_g", (dim,), 0.0)
            par(f"l{li}_ln1_b", (dim,), 0.0)
            par(f"l{li}_ln2_g", (dim,), 0.0)
            par(f"l{li}_ln2_b", (dim,), 0.0)
            par(f"l{li}_mlp_W1", (dim, 2 * dim), 1.0 / np.sqrt(dim))
            par(f"l{li}_mlp_b1", (2 * dim,), 0.0)
            par(f"l{li}_mlp_W2", (2 * dim, dim), 1.0 / np.sqrt(2 * dim))
            par(f"l{li}_mlp_b2", (dim,), 0.0)
        par("lnf_g", (dim,), 0.0)
        par("lnf_b", (dim,), 0.0)
        par("head_W", (dim, text_dim), 1.0 / np.sqrt(dim))
        # positions are added lazily because the token count depends on H, W
        self._pos_rng_seed = int(rng.integers(2**63))
        self.set_trainable(False)

    # LayerNorm gains store log-scale 0 => unit gain
    def _ln(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        mu = x.mean(axis=1, keepdims=True)
        d = x - mu
        var = (d * d).mean(axis=1, keepdims=True)
        return d / (var + 1e-5).sqrt() * (1.0 + g) + b

    def _positions(self, n_tokens: int) -> np.ndarray:
        rng = np.random.default_rng(self._pos_rng_seed)
        return (rng.standard_normal((n_tokens, self.dim)) * 0.02)

    def _patchify(self, img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
        H, W = img.shape[:2]
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"image size must be a multiple of patch={p}")
        gh, gw = H // p, W // p
        tok = img.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1)
        return tok, (gh, gw)

    def forward_tokens(self, tokens: Tensor) -> tuple[Tensor, list[list[Tensor]]]:
        """Run the stack on patch tokens (N, patch*patch*3).

        Returns the unit embedding and per-layer lists of per-head attention
        Tensors (T, T), which keep their gradients after a backward pass.
        """
        P = self.parameters()
        n = tokens.shape[0]
        x = tokens @ P["patch_W"] + P["patch_b"]
        x = concat([P["cls"].reshape(1, -1), x], axis=0)
        pos = self._positions(n + 1).astype(x.dtype)
        x = x + Tensor(pos)
        dh = self.dim // self.heads
        records: list[list[Tensor]] = []
        for li in range(self.layers):
            y = self._ln(x, P[f"l{li}_ln1_g"], P[f"l{li}_ln1_b"])
            q = y @ P[f"l{li}_Wq"]
            k = y @ P[f"l{li}_Wk"]
            v = y @ P[f"l{li}_Wv"]
            head_outs = []
            head_attn = []
            for h in range(self.heads):
                sl = slice(h * dh, (h + 1) * dh)
                qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
                scores = (qh @ kh.T) * (1.0 / np.sqrt(dh))
                shift = scores.data.max(axis=1, keepdims=True)
                e = (scores - shift).exp()
                attn = e / e.sum(axis=1, keepdims=True)
                head_attn.append(attn)
                head_outs.append(attn @ vh)
            records.append(head_attn)
            x = x + concat(head_outs, axis=1) @ P[f"l{li}_Wo"] + P[f"l{li}_bo"]
            y2 = self._ln(x, P[f"l{li}_ln2_g"], P[f"l{li}_ln2_b"])
            hmid = (y2 @ P[f"l{li}_mlp_W1"] + P[f"l{li}_mlp_b1"]).tanh()
            x = x + hmid @ P[f"l{li}_mlp_W2"] + P[f"l{li}_mlp_b2"]
        x = self._ln(x, P["lnf_g"], P["lnf_b"])
        emb = (x[0:1, :] @ P["head_W"]).reshape(-1)
        return normalize_embedding(emb), records

    def embed_image(self, img: Tensor) -> Tensor:
        H, W = img.shape[0], img.shape[1]
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"image size must be a multiple of patch={p}")
        gh, gw = H // p, W // p
        tokens = (img.reshape(gh, p, gw, p, 3)
                  .transpose((0, 2, 1, 3, 4))
                  .reshape(gh * gw, p * p * 3))
        emb, _ = self.forward_tokens(tokens)
        return emb

    def attention_records(self, img: np.ndarray, prompt: str,
                          ) -> tuple[list[tuple[np.ndarray, np.ndarray]], tuple[int, int]]:
        """Attention maps and their gradients w.r.t. text-image similarity.

        Returns one ``(attn (heads, T, T), grad (heads, T, T))`` pair per
        layer plus the patch-grid shape. Gradients are of
        ``cos(E_T(prompt), E_I(img))`` w.r.t. each attention matrix.
        """
        tok_np, grid = self._patchify(np.asarray(img, dtype=np.float64))
        tokens = Tensor(tok_np.astype(np.float32), requires_grad=True)
        emb, records = self.forward_tokens(tokens)
        text = self.embed_text(prompt)
        y = (emb * Tensor(text.astype(emb.dtype))).sum()
        if y.requires_grad:
            y.backward()
        out = []
        for head_attn in records:
            attn = np.stack([np.asarray(a.data, dtype=np.float64) for a in head_attn])
            grad = np.stack([
                np.zeros_like(np.asarray(a.data, dtype=np.float64)) if a.grad is None
                else np.asarray(a.grad, dtype=np.float64)
                for a in head_attn])
            out.append((attn, grad))
        return out, grid

    def embed_text(self, prompt: str) -> np.ndarray:
        rng = np.random.default_rng(_text_hash_seed(prompt, self.seed))
        v = rng.standard_normal(self.text_dim)
        return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# directional contrastive loss and companions


def clip_contrastive_loss(q: Tensor, positives: list[np.ndarray],
                          negatives: list[np.ndarray]) -> Tensor:
    """Log-ratio contrast of the query direction against direction sets.

    ``-log( sum_pos exp(q . s) / sum_all exp(q . s) )``; zero when there are
    no negatives, strictly positive otherwise. Invariant to shifting all dot
    products by a constant; stabilized against overflow by that same shift.
    """
    if not positives:
        raise ValueError("need at least one positive direction")
    dots = [(q * Tensor(np.asarray(s, dtype=q.dtype))).sum().reshape(1)
            for s in list(positives) + list(negatives)]
    all_dots = concat(dots, axis=0)
    pos_dots = concat(dots[:len(positives)], axis=0)
    shift = float(all_dots.data.max())
    lse_all = ((all_dots - shift).exp().sum()).log() + shift
    lse_pos = ((pos_dots - shift).exp().sum()).log() + shift
    return lse_all - lse_pos


@dataclass
class DirectionSets:
    """Query direction plus constant positive/negative direction vectors."""

    q: Tensor
    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    source_embedding: np.ndarray


def build_directions(encoder, img_source: Tensor, img_edited: Tensor,
                     t_edit: str, t_src: str, distractors: list[str],
                     rng: np.random.Generator,
                     aug: AugmentConfig = AugmentConfig()) -> DirectionSets:
    """Assemble the directional loss inputs from one rendered pair.

    One augmented source image anchors both the query and the text positives;
    the edited render is augmented independently. Draws from ``rng`` in a
    fixed order (edited first, then source).
    """
    aug_t = augment_image(img_edited, rng, aug)
    aug_s = augment_image(img_source.detach(), rng, aug)
    e_t = encoder.embed_image(aug_t)
    e_s = encoder.embed_image(aug_s).data
    q = e_t - Tensor(np.asarray(e_s, dtype=e_t.dtype))
    text_edit = encoder.embed_text(t_edit)
    text_src = encoder.embed_text(t_src)
    positives = [text_edit - e_s, text_edit - text_src]
    negatives = [encoder.embed_text(d) - e_s for d in distractors]
    return DirectionSets(q=q, positives=positives, negatives=negatives,
                         source_embedding=np.asarray(e_s))


def identity_embed(img: Tensor, grid: int = 8) -> Tensor:
    """Structure embedding: grayscale pooled to grid x grid, unit-normalized."""
    H, W = img.shape[0], img.shape[1]
    if H % grid or W % grid:
        raise ValueError(f"image size must be a multiple of {grid}")
    gray = img.mean(axis=2)
    pooled = gray.reshape(grid, H // grid, grid, W // grid).mean(axis=(1, 3))
    return normalize_embedding(pooled.reshape(grid * grid))


def identity_loss(source_embedding: np.ndarray, img_edited: Tensor) -> Tensor:
    """1 - cosine between pooled-grayscale embeddings; zero iff parallel."""
    e_t = identity_embed(img_edited)
    return 1.0 - (e_t * Tensor(np.asarray(source_embedding, dtype=e_t.dtype))).sum()


def clip_plus_loss(clip_loss: Tensor, dw_flat: Tensor, id_loss: Tensor,
                   lambda_l2: float, lambda_id: float) -> tuple[Tensor, dict]:
    """Full mapper objective: contrast + residual-norm leash + identity term."""
    l2 = l2_norm(dw_flat)
    total = clip_loss + lambda_l2 * l2 + lambda_id * id_loss
    parts = {"clip": float(clip_loss.data), "l2": float(l2.data),
             "id": float(id_loss.data)}
    return total, parts
