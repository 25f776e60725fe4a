"""Image-space training losses.

All losses are plain differentiable functions of (H, W, 3) images in [0,1]
or (H, W, d) feature tensors; none of them owns parameters. The sliced
Wasserstein distance treats a feature map as an empirical distribution of
per-pixel vectors: it projects every pixel onto random unit directions,
sorts, and averages the squared gaps. Gradients flow through the sorted
values with the permutation fixed by the forward pass (stable sort, so tied
values keep a deterministic order).

Per-projection terms are normalized by pixel count (a mean, not the raw
squared norm) so loss weights do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .domain import Reference
from .rng import torch_gen

AVAILABLE_LEVELS = (1, 2, 3, 4)


@dataclass
class SWDConfig:
    n_projections: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_projections < 1:
            raise ValueError("n_projections must be >= 1")


@dataclass
class LevelSet:
    style_levels: tuple[int, ...] = (3, 4)
    entity_levels: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self) -> None:
        for levels in (self.style_levels, self.entity_levels):
            if not levels:
                raise ValueError("level sets must be non-empty")
            if not set(levels) <= set(AVAILABLE_LEVELS):
                raise ValueError(f"levels must be within {AVAILABLE_LEVELS}")


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    w = g[:, None] * g[None, :]
    return w / w.sum()


def dssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Negative SSIM with a 7x7 Gaussian window and standard stabilizers."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    c1, c2 = 0.01**2, 0.03**2
    ch = a.shape[-1]
    win = _gaussian_window(7, 1.5, a.dtype, a.device).expand(ch, 1, 7, 7)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def blur(t):
        return F.conv2d(t, win, groups=ch)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x**2
    var_y = blur(y * y) - mu_y**2
    cov = blur(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return -ssim_map.mean()


def perceptual(a: torch.Tensor, b: torch.Tensor, fe) -> torch.Tensor:
    """Sum over pyramid levels of the mean squared feature gap."""
    fa, fb = fe.pyramid(a), fe.pyramid(b)
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))


def perceptual_batch(a: torch.Tensor, b: torch.Tensor, fe) -> torch.Tensor:
    """Batch mean of `perceptual` over (B, 3, H, W) image stacks."""
    fa, fb = fe.pyramid_batch(a), fe.pyramid_batch(b)
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))


def sample_projections(d: int, cfg: SWDConfig, dtype=torch.float32) -> torch.Tensor:
    """(P, d) unit vectors, uniform on the sphere via normalized Gaussians.

    Drawn in float64 then cast, so the direction set is the same for float32
    and float64 evaluations of the same config.
    """
    gen = torch_gen(cfg.seed, f"swd-proj-{d}")
    theta = torch.randn(cfg.n_projections, d, generator=gen, dtype=torch.float64)
    theta = theta / torch.linalg.norm(theta, dim=1, keepdim=True).clamp_min(1e-12)
    return theta.to(dtype)


def _flatten_pixels(t: torch.Tensor) -> torch.Tensor:
    if t.ndim != 3:
        raise ValueError(f"expected an (H, W, d) tensor, got shape {tuple(t.shape)}")
    return t.reshape(-1, t.shape[-1])


def swd_per_projection(a: torch.Tensor, b: torch.Tensor, cfg: SWDConfig) -> torch.Tensor:
    """Per-direction squared 1-D Wasserstein terms, (P,)."""
    fa, fb = _flatten_pixels(a), _flatten_pixels(b)
    if fa.shape != fb.shape:
        raise ValueError(
            f"internal distributions must match in pixel count and channels: "
            f"{tuple(a.shape)} vs {tuple(b.shape)}"
        )
    theta = sample_projections(fa.shape[1], cfg, dtype=fa.dtype)
    pa = fa @ theta.T  # (N, P)
    pb = fb @ theta.T
    sa, _ = torch.sort(pa, dim=0, stable=True)
    sb, _ = torch.sort(pb, dim=0, stable=True)
    return ((sa - sb) ** 2).mean(dim=0)


def swd(a: torch.Tensor, b: torch.Tensor, cfg: SWDConfig) -> torch.Tensor:
    """Sliced Wasserstein distance between per-pixel feature distributions."""
    return swd_per_projection(a, b, cfg).mean()


def rec_loss(
    y_rec: torch.Tensor,
    mask_up_rec: torch.Tensor | None,
    ref: Reference,
    fe,
    lam5: float = 100.0,
) -> torch.Tensor:
    """dssim + perceptual against the reference, plus the mask MSE term.

    The mask term is dropped for entity-free references, where the aux path
    is inert and the mask head has nothing to reconstruct.
    """
    target = torch.from_numpy(ref.image).to(y_rec.dtype)
    loss = dssim(y_rec, target) + perceptual(y_rec, target, fe)
    if ref.has_entity:
        if mask_up_rec is None:
            raise ValueError("reference has an entity but no reconstructed mask was given")
        target_mask = torch.from_numpy(ref.mask).to(y_rec.dtype)
        loss = loss + lam5 * ((mask_up_rec - target_mask) ** 2).mean()
    return loss


def style_loss(
    stylized_batch: list[torch.Tensor],
    y_rec_hat: torch.Tensor,
    fe,
    levels: LevelSet,
    cfg: SWDConfig,
) -> torch.Tensor:
    """Mean SWD between sample features and the no-aux reconstruction's.

    The target is the generator's own entity-free reconstruction, not the
    reference, so entity pixels cannot leak into the style signal.
    """
    if not stylized_batch:
        raise ValueError("style_loss needs at least one synthesis")
    target_pyr = fe.pyramid(y_rec_hat)
    total = 0.0
    for img in stylized_batch:
        pyr = fe.pyramid(img)
        for lv in levels.style_levels:
            total = total + swd(pyr[lv - 1], target_pyr[lv - 1], cfg)
    return total / (len(stylized_batch) * len(levels.style_levels))


def entity_loss(
    target_batch: list[tuple[torch.Tensor, torch.Tensor]],
    y_rec: torch.Tensor,
    mask_up_rec: torch.Tensor,
    fe,
    levels: LevelSet,
    cfg: SWDConfig,
) -> torch.Tensor:
    """Mean SWD between masked syntheses and the masked reconstruction."""
    if not target_batch:
        raise ValueError("entity_loss needs at least one synthesis")
    if mask_up_rec is None:
        raise ValueError("entity_loss requires the reconstructed mask")
    rec_masked = y_rec * mask_up_rec.unsqueeze(-1)
    target_pyr = fe.pyramid(rec_masked)
    total = 0.0
    for img, mask_up in target_batch:
        if mask_up is None:
            raise ValueError("entity_loss requires a mask for every synthesis")
        pyr = fe.pyramid(img * mask_up.unsqueeze(-1))
        for lv in levels.entity_levels:
            total = total + swd(pyr[lv - 1], target_pyr[lv - 1], cfg)
    return total / (len(target_batch) * len(levels.entity_levels))
