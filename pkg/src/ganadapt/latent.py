"""Latent spaces and code algebra.

A latent code is an L x D row matrix feeding the synthesis blocks (two rows
per block). Codes are tagged by space: W (one mapped vector replicated),
W_plus (independent rows, the inversion space), and W_sharp (style-fixed:
content rows from a sample, style rows from the reference).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SPACE_W = "W"
SPACE_W_PLUS = "W_plus"
SPACE_W_SHARP = "W_sharp"
_SPACES = (SPACE_W, SPACE_W_PLUS, SPACE_W_SHARP)


@dataclass
class LatentCode:
    rows: torch.Tensor  # (L, D)
    space_tag: str

    def __post_init__(self) -> None:
        if self.rows.ndim != 2:
            raise ValueError(f"latent rows must be 2-D, got shape {tuple(self.rows.shape)}")
        if self.space_tag not in _SPACES:
            raise ValueError(f"unknown space tag {self.space_tag!r}")
        if self.space_tag == SPACE_W and self.n_rows > 1:
            if not torch.equal(self.rows, self.rows[0:1].expand_as(self.rows)):
                raise ValueError("W-space codes must have identical rows")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def detach_clone(self) -> "LatentCode":
        return LatentCode(self.rows.detach().clone(), self.space_tag)


def sample_noise(dim: int, gen: torch.Generator) -> torch.Tensor:
    """Standard-normal noise vector z."""
    return torch.randn(dim, generator=gen)


def map_noise(mapping, z: torch.Tensor) -> LatentCode:
    """Run the mapping network and replicate its output to all rows (W space).

    `mapping` is any callable with an `n_rows` attribute mapping (D_z,) ->
    (D,); during adaptation it stays frozen so the source latent
    distribution is preserved.
    """
    if z.ndim != 1:
        raise ValueError("map_noise expects a single noise vector")
    w = mapping(z.unsqueeze(0)).squeeze(0)
    rows = w.unsqueeze(0).repeat(mapping.n_rows, 1)
    return LatentCode(rows=rows, space_tag=SPACE_W)


def style_fix(w: LatentCode, w_ref: LatentCode, l: int) -> LatentCode:
    """Keep content rows 1..l of w, take style rows l+1..L from w_ref."""
    if w.rows.shape != w_ref.rows.shape:
        raise ValueError("style_fix requires codes of identical shape")
    if not 1 <= l < w.n_rows:
        raise ValueError(f"split index must satisfy 1 <= l < {w.n_rows}, got {l}")
    rows = torch.cat([w.rows[:l], w_ref.rows[l:]], dim=0)
    return LatentCode(rows=rows, space_tag=SPACE_W_SHARP)


def mix(w1: LatentCode, w2: LatentCode, alpha: torch.Tensor) -> LatentCode:
    """Per-row linear combination diag(alpha) w1 + diag(1-alpha) w2."""
    if w1.rows.shape != w2.rows.shape:
        raise ValueError("mix requires codes of identical shape")
    alpha = torch.as_tensor(alpha, dtype=w1.rows.dtype).reshape(-1)
    if alpha.shape[0] != w1.n_rows:
        raise ValueError(f"alpha must have {w1.n_rows} entries")
    if torch.any(alpha < 0) or torch.any(alpha > 1):
        raise ValueError("alpha entries must lie in [0, 1]")
    rows = alpha[:, None] * w1.rows + (1.0 - alpha)[:, None] * w2.rows
    return LatentCode(rows=rows, space_tag=SPACE_W_PLUS)


# ---------------------------------------------------------------------------
# Serialization: one JSON header line, then a row-major float32 LE blob
# ---------------------------------------------------------------------------


def save_latent(path: str | Path, code: LatentCode) -> None:
    header = json.dumps(
        {"L": code.n_rows, "D": code.dim, "space_tag": code.space_tag}, sort_keys=True
    )
    blob = code.rows.detach().to(torch.float32).numpy().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header.encode() + b"\n")
        f.write(blob)


def load_latent(path: str | Path) -> LatentCode:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    arr = np.frombuffer(blob, dtype="<f4").reshape(header["L"], header["D"]).copy()
    return LatentCode(rows=torch.from_numpy(arr), space_tag=header["space_tag"])
