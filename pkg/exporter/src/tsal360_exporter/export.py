"""Run the backbone over tangent images and write a TSFT feature file.

Images arrive as an ordered list of F*T paths, frame-major (all T viewport
patches of frame 0, then frame 1, ...). The output file carries six
records with the wire names the saliency engine expects:
V_G (F,T,1024), V_L0 (F,T,512,P/8,P/8), V_L1 (F,T,1024,P/16,P/16),
V_L2 (F,T,2048,P/32,P/32), T_G (1,1024), T_L (77,1024).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .backbone import CONTEXT_LEN, build_model, tokenize

FEATURE_MAGIC = b"TSFT"
VERSION = 1


@dataclass
class ExportSpec:
    image_paths: list[str]      # F*T tangent patches, frame-major
    text: str
    out_path: str
    viewports: int
    seed: int = 0
    weights_path: str | None = None
    batch_size: int = 16


def write_tsft(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_images(paths: list[str]) -> torch.Tensor:
    """Stack P x P RGB images into (N, 3, P, P) float32 in [0, 1]."""
    arrays = []
    size = None
    for p in paths:
        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[0] != arr.shape[1]:
            raise ValueError(f"{p}: tangent image must be square, got {arr.shape[:2]}")
        if size is None:
            size = arr.shape[0]
            if size % 32:
                raise ValueError(f"{p}: patch resolution {size} is not divisible by 32")
        elif arr.shape[0] != size:
            raise ValueError(f"{p}: patch resolution {arr.shape[0]} differs from first image ({size})")
        arrays.append(arr.transpose(2, 0, 1))
    return torch.from_numpy(np.stack(arrays))


def run_export(spec: ExportSpec) -> dict[str, tuple]:
    """Extract features and write the TSFT file; returns the shape table."""
    if spec.viewports < 1:
        raise ValueError("viewport count must be positive")
    if len(spec.image_paths) % spec.viewports:
        raise ValueError(
            f"{len(spec.image_paths)} images do not divide into viewport groups of {spec.viewports}"
        )
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)

    images = load_images(spec.image_paths)
    n, _, p, _ = images.shape
    frames = n // spec.viewports
    model = build_model(patch_res=p, seed=spec.seed, weights_path=spec.weights_path)

    globs, locals_ = [], [[], [], []]
    with torch.no_grad():
        for lo in range(0, n, spec.batch_size):
            g, stages = model.visual(images[lo : lo + spec.batch_size])
            globs.append(g)
            for m in range(3):
                locals_[m].append(stages[m])
        tokens, eot = tokenize(spec.text)
        t_global, t_tokens = model.text(tokens, eot)

    f, t = frames, spec.viewports
    v_g = torch.cat(globs).reshape(f, t, -1).numpy()
    v_l = [torch.cat(chunks).numpy() for chunks in locals_]
    v_l = [x.reshape(f, t, *x.shape[1:]) for x in v_l]
    tensors = {
        "V_G": v_g,
        "V_L0": v_l[0],
        "V_L1": v_l[1],
        "V_L2": v_l[2],
        "T_G": t_global.numpy(),
        "T_L": t_tokens[0].numpy(),
    }
    assert tensors["T_L"].shape[0] == CONTEXT_LEN
    write_tsft(spec.out_path, tensors)
    return {name: tuple(arr.shape) for name, arr in tensors.items()}
