"""Training procedures: source pretraining, inversion, one-shot adaptation.

Pretraining is supervised: a fixed smooth map turns noise into scene
parameters, the procedural renderer supplies the target image, and the
generator regresses it. Half of each batch uses two-source codes (geometry
rows from one draw, palette rows from another, with the matching composite
render as target) so the row split genuinely separates content from style.

Adaptation runs one optimizer step per epoch over the combined loss:
reconstruction of the reference at its inverted code, sliced-Wasserstein
style/entity terms against the generator's own reconstruction, and a
manifold regularizer over a two-node latent graph (the reference code plus
the step's style-fixed sample). The mapping network never trains.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import domain, losses, manifold, nets
from .domain import Reference
from .latent import (
    SPACE_W_PLUS,
    LatentCode,
    map_noise,
    sample_noise,
    style_fix,
)
from .losses import LevelSet, SWDConfig
from .rng import derive_seed, np_gen, torch_gen

log = logging.getLogger(__name__)

REGULARIZERS = ("vlapr", "cdc", "none")


class ConfigError(ValueError):
    pass


@dataclass
class AdaptConfig:
    lam1: float = 10.0
    lam2: float = 0.2
    lam3: float = 2.0
    lam4: float = 1.0
    lam5: float = 100.0
    epochs: int = 2000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    split_l: int = 4
    n_projections: int = 256
    sigma: float = 0.0  # 0 means: derive from code size
    batch_m: int = 1
    graph_n: int = 2
    flip_augment: bool = True
    regularizer: str = "vlapr"
    seed: int = 0

    @classmethod
    def defaults_for(cls, has_entity: bool, **overrides) -> "AdaptConfig":
        """Full-entity defaults, or the faster mask-free variant."""
        cfg = cls() if has_entity else cls(lam2=2.0, lam4=0.5, epochs=1000)
        return dataclasses.replace(cfg, **overrides)

    def validate(self) -> None:
        for name in ("lam1", "lam2", "lam3", "lam4", "lam5"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if self.batch_m < 1:
            raise ConfigError("batch_m must be >= 1")
        if self.graph_n < 2:
            raise ConfigError("graph_n must be >= 2")
        if self.n_projections < 1:
            raise ConfigError("n_projections must be >= 1")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")

    def resolved_sigma(self, n_rows: int, dim: int) -> float:
        return self.sigma if self.sigma > 0 else manifold.default_sigma(n_rows, dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunLog:
    rec: list[float] = field(default_factory=list)
    style: list[float] = field(default_factory=list)
    ent: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def append(self, rec, style, ent, reg, total, lr, wall_time) -> None:
        self.rec.append(rec)
        self.style.append(style)
        self.ent.append(ent)
        self.reg.append(reg)
        self.total.append(total)
        self.lr.append(lr)
        self.wall_time.append(wall_time)

    def __len__(self) -> int:
        return len(self.total)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "rec", "style", "ent", "reg", "total", "lr"])
            for i in range(len(self.total)):
                writer.writerow(
                    [
                        i,
                        f"{self.rec[i]:.8g}",
                        f"{self.style[i]:.8g}",
                        f"{self.ent[i]:.8g}",
                        f"{self.reg[i]:.8g}",
                        f"{self.total[i]:.8g}",
                        f"{self.lr[i]:.8g}",
                    ]
                )


def cosine_lr(start: float, end: float, step: int, total: int) -> float:
    if total <= 1:
        return end
    t = min(step, total - 1) / (total - 1)
    return end + 0.5 * (start - end) * (1.0 + np.cos(np.pi * t))


# ---------------------------------------------------------------------------
# Source pretraining
# ---------------------------------------------------------------------------


def _render_batch(param_list, resolution) -> torch.Tensor:
    imgs = np.stack([domain.render(p, resolution) for p in param_list])
    return torch.from_numpy(imgs).permute(0, 3, 1, 2).float()


def pretrain_param_map(net_cfg: nets.NetConfig, seed: int) -> domain.ParamMap:
    """The exact noise-to-scene map a pretrain run with this seed uses."""
    return domain.ParamMap(net_cfg.noise_dim, seed=derive_seed(seed, "param-map"))


def pretrain(
    net_cfg: nets.NetConfig,
    seed: int = 0,
    max_steps: int = 4000,
    batch: int = 32,
    val_threshold: float = 0.03,
    val_size: int = 64,
    val_every: int = 250,
    lr: float = 3e-3,
) -> tuple[nets.GeneratorBundle, dict]:
    """Supervised regression of the generator onto the procedural domain.

    Stops once the held-out mean absolute pixel error drops below the
    threshold; running out of steps is reported in the result, not raised.
    """
    bundle = nets.build_bundle(net_cfg, seed=seed, with_aux=False)
    fe = nets.FeatureExtractor(derive_seed(seed, "pretrain-fe"))
    pm = pretrain_param_map(net_cfg, seed)
    gen = torch_gen(seed, "pretrain")
    params = list(bundle.mapping.parameters()) + list(bundle.synthesis.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    l = net_cfg.n_rows // 2
    res = net_cfg.resolution

    val_z = torch.randn(val_size, net_cfg.noise_dim, generator=torch_gen(seed, "pretrain-val"))
    val_targets = _render_batch([pm(z.numpy()) for z in val_z], res)

    def validate() -> float:
        with torch.no_grad():
            w = bundle.mapping(val_z)
            rows = w.unsqueeze(1).repeat(1, net_cfg.n_rows, 1)
            out, _ = bundle.synthesize_batch(rows, use_aux=False)
        return float((out - val_targets).abs().mean())

    steps_run, val_l1 = 0, float("inf")
    for step in range(max_steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(lr, lr / 20.0, step, max_steps)
        z1 = torch.randn(batch, net_cfg.noise_dim, generator=gen)
        z2 = torch.randn(batch, net_cfg.noise_dim, generator=gen)
        mix_flags = torch.rand(batch, generator=gen) < 0.5
        w1 = bundle.mapping(z1)
        w2 = bundle.mapping(z2)
        rows = w1.unsqueeze(1).repeat(1, net_cfg.n_rows, 1)
        rows[mix_flags, l:] = w2[mix_flags].unsqueeze(1).repeat(1, net_cfg.n_rows - l, 1)
        scene = [
            pm.mixed(z1[i].numpy(), z2[i].numpy()) if mix_flags[i] else pm(z1[i].numpy())
            for i in range(batch)
        ]
        targets = _render_batch(scene, res)
        out, _ = bundle.synthesize_batch(rows, use_aux=False)
        loss = (out - targets).abs().mean() + losses.perceptual_batch(out, targets, fe)
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps_run = step + 1
        if steps_run % val_every == 0 or steps_run == max_steps:
            val_l1 = validate()
            if val_l1 < val_threshold:
                break
    val_l1 = validate()
    converged = val_l1 < val_threshold
    if not converged:
        log.warning("pretrain did not reach val L1 < %.3f (got %.4f)", val_threshold, val_l1)
    report = {"val_l1": val_l1, "steps": steps_run, "converged": converged}
    return bundle, report


# ---------------------------------------------------------------------------
# Reference inversion
# ---------------------------------------------------------------------------


def invert(
    bundle: nets.GeneratorBundle,
    ref: Reference,
    fe,
    steps: int = 600,
    seed: int = 0,
    lr: float = 0.05,
    init_samples: int = 10_000,
    prior_weight: float = 0.1,
) -> LatentCode:
    """Optimize a free extended code to reconstruct the reference.

    Starts from the mean of many mapped codes and keeps the best-loss
    iterate, so the returned code never regresses on the objective. A mild
    quadratic prior toward the init keeps the code on the scale the
    synthesis blocks were trained on; without it the style rows drift to
    extreme norms that fake the target palette and destabilize everything
    downstream of the code.
    """
    cfg = bundle.net_config
    with torch.no_grad():
        z = torch.randn(init_samples, cfg.noise_dim, generator=torch_gen(seed, "invert-init"))
        mean_w = bundle.mapping(z).mean(dim=0)
    init_rows = mean_w.unsqueeze(0).repeat(cfg.n_rows, 1)
    rows = init_rows.clone().requires_grad_(True)
    target = torch.from_numpy(ref.image).float()
    opt = torch.optim.Adam([rows], lr=lr)
    best_loss, best_rows = float("inf"), rows.detach().clone()
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(lr, lr / 10.0, step, steps)
        img, _ = bundle.synthesize(LatentCode(rows, SPACE_W_PLUS), use_aux=False)
        fit = losses.dssim(img, target) + losses.perceptual(img, target, fe)
        loss = fit + prior_weight * ((rows - init_rows) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        fit_val = float(fit.detach())
        if fit_val < best_loss:
            best_loss = fit_val
            best_rows = rows.detach().clone()
    return LatentCode(best_rows, SPACE_W_PLUS)


# ---------------------------------------------------------------------------
# One-shot adaptation
# ---------------------------------------------------------------------------


def _flip_reference(ref: Reference) -> Reference:
    return Reference(
        image=np.ascontiguousarray(ref.image[:, ::-1]),
        mask=np.ascontiguousarray(ref.mask[:, ::-1]),
    )


def adapt(
    source: nets.GeneratorBundle,
    ref: Reference,
    cfg: AdaptConfig,
    fe,
    w_ref: LatentCode | None = None,
    checkpoint_dir: str | Path | None = None,
    levels: LevelSet | None = None,
) -> tuple[nets.GeneratorBundle, RunLog]:
    """Adapt a pretrained source bundle to one masked reference."""
    cfg.validate()
    levels = levels or LevelSet()
    has_entity = ref.has_entity
    net_cfg = source.net_config
    sigma = cfg.resolved_sigma(net_cfg.n_rows, net_cfg.latent_dim)

    target_bundle = source.clone()
    target_bundle.mapping.requires_grad_(False)
    if has_entity:
        target_bundle.aux = nets.attach_aux(net_cfg, derive_seed(cfg.seed, "aux-init"))
    else:
        target_bundle.aux = None

    if w_ref is None:
        w_ref = invert(source, ref, fe, seed=cfg.seed)
    w_ref = w_ref.detach_clone()

    flipped = _flip_reference(ref)
    gen = torch_gen(cfg.seed, "adapt")
    opt = torch.optim.Adam(
        target_bundle.adapt_parameters(),
        lr=cfg.lr_start,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )

    with torch.no_grad():
        x_rec, _ = source.synthesize(w_ref, use_aux=False)
        src_rec_embed = fe.embed(x_rec)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    ckpt_epochs = {0, cfg.epochs // 2, cfg.epochs}

    def save_ckpt(epoch: int) -> None:
        if ckpt_dir is None:
            return
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        nets.save_checkpoint(
            ckpt_dir / f"adapted_epoch_{epoch:05d}.ckpt",
            target_bundle,
            extra={"epoch": epoch, "config": cfg.to_dict()},
        )

    runlog = RunLog()
    save_ckpt(0)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr_start, cfg.lr_end, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        swd_cfg = SWDConfig(cfg.n_projections, derive_seed(cfg.seed, f"swd-{epoch}"))

        # phase 1: reconstruct the (possibly flipped) reference
        use_flip = cfg.flip_augment and bool(torch.rand(1, generator=gen) < 0.5)
        ref_step = flipped if use_flip else ref
        y_rec, mask_rec = target_bundle.synthesize(w_ref, use_aux=has_entity)
        rec = losses.rec_loss(y_rec, mask_rec, ref_step, fe, cfg.lam5)

        # phase 2: internal distribution learning on style-fixed samples
        codes = []
        for _ in range(max(cfg.batch_m, cfg.graph_n - 1)):
            z = sample_noise(net_cfg.noise_dim, gen)
            codes.append(style_fix(map_noise(target_bundle.mapping, z), w_ref, cfg.split_l))
        batch_codes = codes[: cfg.batch_m]
        if has_entity:
            y_rec_hat, _ = target_bundle.synthesize(w_ref, use_aux=False)
        else:
            y_rec_hat = y_rec
        styled = [target_bundle.synthesize(c, use_aux=False)[0] for c in batch_codes]
        style = losses.style_loss(styled, y_rec_hat, fe, levels, swd_cfg)
        if has_entity:
            with_aux = [target_bundle.synthesize(c, use_aux=True) for c in batch_codes]
            ent = losses.entity_loss(
                [(img, m) for img, m in with_aux], y_rec, mask_rec, fe, levels, swd_cfg
            )
            adapted_imgs = [img for img, _ in with_aux]
        else:
            ent = torch.zeros(())
            adapted_imgs = styled

        # phase 3: manifold regularization over {w_ref, sampled codes}
        if cfg.regularizer == "none" or cfg.lam4 == 0:
            reg = torch.zeros(())
        else:
            graph_codes = [w_ref] + [c.detach_clone() for c in codes[: cfg.graph_n - 1]]
            adapted_embeds = [fe.embed(y_rec)]
            source_embeds = [src_rec_embed]
            for i, c in enumerate(graph_codes[1:]):
                img_t = adapted_imgs[i] if i < len(adapted_imgs) else (
                    target_bundle.synthesize(c, use_aux=has_entity)[0]
                )
                adapted_embeds.append(fe.embed(img_t))
                with torch.no_grad():
                    x_img, _ = source.synthesize(c, use_aux=False)
                source_embeds.append(fe.embed(x_img))
            if cfg.regularizer == "vlapr":
                gw = manifold.graph_weights(graph_codes, sigma)
                residuals = torch.stack(
                    [a - s for a, s in zip(adapted_embeds, source_embeds)]
                )
                reg = manifold.vlapr(residuals, manifold.laplacian(gw))
            else:
                reg = manifold.cdc_loss(source_embeds, adapted_embeds)

        total = cfg.lam1 * rec + cfg.lam2 * style + cfg.lam3 * ent + cfg.lam4 * reg
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch}: rec={float(rec):.4g} "
                f"style={float(style):.4g} ent={float(ent):.4g} reg={float(reg):.4g}"
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        runlog.append(
            float(rec.detach()),
            float(style.detach()),
            float(ent.detach()),
            float(reg.detach()),
            float(total.detach()),
            lr,
            time.perf_counter() - t0,
        )
        if (epoch + 1) in ckpt_epochs:
            save_ckpt(epoch + 1)
    return target_bundle, runlog


# ---------------------------------------------------------------------------
# Figure emission
# ---------------------------------------------------------------------------


def tile_images(images: list[np.ndarray], cols: int | None = None) -> np.ndarray:
    cols = cols or len(images)
    rows = (len(images) + cols - 1) // cols
    h, w, c = images[0].shape
    grid = np.ones((rows * h, cols * w, c), dtype=np.float32)
    for i, img in enumerate(images):
        r, col = divmod(i, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = img
    return grid


def sample_grid(
    bundle: nets.GeneratorBundle,
    w_ref: LatentCode,
    seeds: list[int],
    use_aux: bool = True,
    split_l: int | None = None,
    cols: int | None = None,
) -> np.ndarray:
    """Style-fixed syntheses for each seed, tiled into one image."""
    l = split_l if split_l is not None else bundle.n_rows // 2
    tiles = []
    with torch.no_grad():
        for s in seeds:
            z = sample_noise(bundle.net_config.noise_dim, torch_gen(s, "grid"))
            w = style_fix(map_noise(bundle.mapping, z), w_ref, l)
            img, _ = bundle.synthesize(w, use_aux=use_aux and bundle.aux is not None)
            tiles.append(img.numpy())
    return tile_images(tiles, cols)
