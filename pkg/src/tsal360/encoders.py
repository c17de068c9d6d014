"""Visual and textual feature providers.

The toy encoders are deterministic, training-free stand-ins for a real
vision-language backbone: patch statistics (means, spreads, gradient
energy) pushed through fixed seeded random projections.  Identical inputs
always produce identical features, and visually distinct viewports produce
distinct features, which is what the desk-scale training tests need.
Real features are loaded from "TSFT" files written by an external exporter.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import tensorfile

FEATURE_NAMES = ("V_G", "V_L0", "V_L1", "V_L2", "T_G", "T_L")
SCALE_DIVISORS = (8, 16, 32)


class FeatureShapeError(ValueError):
    """A feature bundle violates the shape contract."""


@dataclass(frozen=True)
class EncoderConfig:
    global_dim: int = 1024                              # shared visual/text global width
    scale_channels: tuple[int, ...] = (512, 1024, 2048)  # local widths, fine to coarse
    token_len: int = 77
    patch_res: int = 224
    seed: int = 0

    def __post_init__(self):
        if len(self.scale_channels) != 3:
            raise ValueError(f"exactly three local scales required, got {self.scale_channels}")
        if self.token_len < 1 or self.global_dim < 1:
            raise ValueError("global_dim and token_len must be positive")


@dataclass
class FeatureBundle:
    """Encoder outputs for one frame window and one text description."""

    global_visual: np.ndarray               # (F, T, C_G)
    local_visual: list[np.ndarray]          # three of (F, T, C_m, H_m, W_m)
    global_text: np.ndarray                 # (1, C_G)
    token_text: np.ndarray                  # (L_t, C_L), C_L == C_G

    def validate(self) -> "FeatureBundle":
        if self.global_visual.ndim != 3:
            raise FeatureShapeError(f"global visual must be (F, T, C), got {self.global_visual.shape}")
        f, t, cg = self.global_visual.shape
        if len(self.local_visual) != 3:
            raise FeatureShapeError(f"expected 3 local scales, got {len(self.local_visual)}")
        prev_h = None
        for m, lv in enumerate(self.local_visual):
            if lv.ndim != 5 or lv.shape[0] != f or lv.shape[1] != t:
                raise FeatureShapeError(
                    f"local scale {m} must be (F={f}, T={t}, C, H, W), got {lv.shape}"
                )
            h, w = lv.shape[3], lv.shape[4]
            if h != w:
                raise FeatureShapeError(f"local scale {m} must be square, got {lv.shape}")
            if prev_h is not None and h * 2 != prev_h:
                raise FeatureShapeError(
                    f"local scale {m} resolution {h} must halve the previous scale ({prev_h})"
                )
            prev_h = h
        if self.global_text.shape != (1, cg):
            raise FeatureShapeError(
                f"global text must be (1, {cg}) to match visual width, got {self.global_text.shape}"
            )
        if self.token_text.ndim != 2 or self.token_text.shape[1] != cg:
            raise FeatureShapeError(
                f"token text must be (L, {cg}), got {self.token_text.shape}"
            )
        return self

    @property
    def frames(self) -> int:
        return self.global_visual.shape[0]

    @property
    def viewports(self) -> int:
        return self.global_visual.shape[1]


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def _projection(rows: int, cols: int, *key) -> np.ndarray:
    rng = _seeded_rng(*key)
    return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32)


def _cell_stats(images: np.ndarray, cells: int) -> np.ndarray:
    """Per-cell statistics of (N, C, P, P) images on a cells x cells grid.

    Returns (N, cells, cells, K) with K = 3 stats per color channel plus
    three gradient-energy stats.
    """
    n, c, p, _ = images.shape
    s = p // cells
    blocks = images.reshape(n, c, cells, s, cells, s)
    mean = blocks.mean(axis=(3, 5))
    std = blocks.std(axis=(3, 5))
    gray = images.mean(axis=1)
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :, 1:] = np.abs(np.diff(gray, axis=2))
    gy[:, 1:, :] = np.abs(np.diff(gray, axis=1))
    gmag = np.sqrt(gx * gx + gy * gy)
    gb = lambda a: a.reshape(n, cells, s, cells, s).mean(axis=(2, 4))
    grad = np.stack([gb(gx), gb(gy), gb(gmag)], axis=1)
    stats = np.concatenate([mean, std, grad], axis=1)       # (N, 3C', cells, cells)
    return stats.transpose(0, 2, 3, 1)


def encode_visual(stack: np.ndarray, cfg: EncoderConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Toy visual encoder: (F, T, C, P, P) -> global (F, T, C_G) + 3 local scales."""
    stack = np.asarray(stack, dtype=np.float32)
    if stack.ndim != 5 or stack.shape[3] != stack.shape[4]:
        raise FeatureShapeError(f"tangent stack must be (F, T, C, P, P), got {stack.shape}")
    f, t, c, p, _ = stack.shape
    if p % 32:
        raise ValueError(f"patch resolution {p} is not divisible by 32")
    flat = stack.reshape(f * t, c, p, p)

    local = []
    for m, (div, cm) in enumerate(zip(SCALE_DIVISORS, cfg.scale_channels)):
        cells = p // div
        stats = _cell_stats(flat, cells)                     # (N, cells, cells, K)
        k = stats.shape[-1]
        proj = _projection(k, cm, cfg.seed, "visual-local", m, cm, k)
        feats = stats @ proj                                 # (N, cells, cells, C_m)
        local.append(feats.transpose(0, 3, 1, 2).reshape(f, t, cm, cells, cells))

    coarse = _cell_stats(flat, 2)                            # 2x2 quadrant stats
    gstats = np.concatenate([coarse.reshape(f * t, -1), _cell_stats(flat, 1).reshape(f * t, -1)], axis=1)
    proj = _projection(gstats.shape[1], cfg.global_dim, cfg.seed, "visual-global", cfg.global_dim)
    global_visual = (gstats @ proj).reshape(f, t, cfg.global_dim)
    return global_visual, local


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def encode_text(text: str, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Toy text encoder: hashed token embeddings, padded/truncated to token_len.

    Returns (global (1, C_G), tokens (L_t, C_L)); the global vector is the
    unit-normalized mean of the non-pad token embeddings.
    """
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("text description is empty")
    tokens = tokens[: cfg.token_len]
    emb = np.zeros((cfg.token_len, cfg.global_dim), dtype=np.float32)
    for i, tok in enumerate(tokens):
        rng = _seeded_rng(cfg.seed, "token", tok)
        emb[i] = rng.standard_normal(cfg.global_dim).astype(np.float32) / np.sqrt(cfg.global_dim)
    mean = emb[: len(tokens)].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ValueError("degenerate text embedding (zero norm)")
    return (mean / norm)[None, :].astype(np.float32), emb


class ToyEncoder:
    """Bundles the toy visual and text encoders behind one provider object."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    def encode(self, stack: np.ndarray, text: str) -> FeatureBundle:
        vg, vl = encode_visual(stack, self.cfg)
        tg, tl = encode_text(text, self.cfg)
        return FeatureBundle(
            global_visual=vg, local_visual=vl, global_text=tg, token_text=tl
        ).validate()


def write_feature_file(path, bundle: FeatureBundle) -> None:
    bundle.validate()
    tensors = {
        "V_G": bundle.global_visual,
        "V_L0": bundle.local_visual[0],
        "V_L1": bundle.local_visual[1],
        "V_L2": bundle.local_visual[2],
        "T_G": bundle.global_text,
        "T_L": bundle.token_text,
    }
    tensorfile.write_features(path, tensors)


def load_features(path) -> FeatureBundle:
    """Read a "TSFT" file and validate the bundle's shape contract."""
    records = tensorfile.read_features(path)
    missing = [n for n in FEATURE_NAMES if n not in records]
    if missing:
        raise FeatureShapeError(f"feature file {path} is missing tensors: {missing}")
    bundle = FeatureBundle(
        global_visual=records["V_G"],
        local_visual=[records["V_L0"], records["V_L1"], records["V_L2"]],
        global_text=records["T_G"],
        token_text=records["T_L"],
    )
    return bundle.validate()
