"""Miniature style-based generator, aux UNet, and frozen feature extractors.

The synthesis network starts from a learned 4x4 constant and doubles
resolution per block up to the output size; each block holds two 3x3 convs,
each modulated per-channel (scale + shift) by the affine projection of one
latent row, so a resolution-32 generator consumes 8 rows. There is no noise
injection and no discriminator anywhere: synthesis is deterministic.

The aux UNet slots in at a block boundary and predicts an entity feature map
plus a soft mask; features downstream of that boundary see
(1 - m) * f_in + m * f_ent. The mask head starts at sigmoid(-4) and the
entity head at zero, so a fresh aux is a near-identity and the bundle
initially behaves like its no-aux twin.

Feature extractors are frozen conv pyramids with seeded orthogonal weights:
a self-contained stand-in for pretrained perceptual/semantic networks.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .latent import LatentCode
from .rng import torch_gen

_CHANNELS = {4: 64, 8: 64, 16: 32, 32: 16, 64: 16}


@dataclass
class NetConfig:
    resolution: int = 32
    noise_dim: int = 64
    latent_dim: int = 64
    aux_position: int = 2  # blend after this block (1-indexed)
    aux_channels: int = 32

    @property
    def block_resolutions(self) -> list[int]:
        res, out = 4, []
        while res <= self.resolution:
            out.append(res)
            res *= 2
        return out

    @property
    def n_rows(self) -> int:
        return 2 * len(self.block_resolutions)

    def validate(self) -> None:
        if self.resolution not in (16, 32, 64):
            raise ValueError("resolution must be one of 16/32/64")
        if not 1 <= self.aux_position <= len(self.block_resolutions):
            raise ValueError("aux_position must be a valid block index")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _fill_normal(t: torch.Tensor, std: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_(torch.randn(t.shape, generator=gen) * std)


def _orthogonal(shape: tuple[int, int], gain: float, gen: torch.Generator) -> torch.Tensor:
    """Rows-orthonormal matrix from a seeded Gaussian via QR."""
    rows, cols = shape
    a = torch.randn(cols, rows, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))  # fix QR sign ambiguity
    return (gain * q.T).to(torch.float32).contiguous()


class MappingNetwork(nn.Module):
    """3-layer fully-connected map from noise space to one latent row.

    The output is renormalized to a fixed radius, so latent distances live
    on a known scale: graph kernels over codes then have a meaningful
    bandwidth, and inversion cannot wander to extreme-norm codes the
    synthesis blocks never saw.
    """

    def __init__(self, noise_dim: int, latent_dim: int, n_rows: int):
        super().__init__()
        self.n_rows = n_rows
        self.output_radius = 0.25 * float(np.sqrt(latent_dim))
        self.fc1 = nn.Linear(noise_dim, latent_dim)
        self.fc2 = nn.Linear(latent_dim, latent_dim)
        self.fc3 = nn.Linear(latent_dim, latent_dim)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        for fc in (self.fc1, self.fc2, self.fc3):
            _fill_normal(fc.weight, 1.0 / np.sqrt(fc.in_features), gen)
            nn.init.zeros_(fc.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.fc1(z), 0.2)
        h = F.leaky_relu(self.fc2(h), 0.2)
        h = self.fc3(h)
        norm = torch.linalg.norm(h, dim=-1, keepdim=True).clamp_min(1e-8)
        return h * (self.output_radius / norm)


class StyledConv(nn.Module):
    """3x3 conv whose output is scaled and shifted per channel by one latent row."""

    def __init__(self, cin: int, cout: int, latent_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.affine = nn.Linear(latent_dim, 2 * cout)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        _fill_normal(self.conv.weight, np.sqrt(2.0 / (self.conv.in_channels * 9)), gen)
        nn.init.zeros_(self.conv.bias)
        _fill_normal(self.affine.weight, 0.05, gen)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x: torch.Tensor, w_row: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        h = self.conv(x)
        scale, shift = self.affine(w_row).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.leaky_relu(h, 0.2)


class SynthesisNetwork(nn.Module):
    """Constant-input conv stack, two styled convs per resolution."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        res_list = cfg.block_resolutions
        self.const = nn.Parameter(torch.zeros(1, _CHANNELS[4], 4, 4))
        layers = []
        cin = _CHANNELS[4]
        for res in res_list:
            cout = _CHANNELS[res]
            layers.append(StyledConv(cin, cout, cfg.latent_dim, upsample=res != 4))
            layers.append(StyledConv(cout, cout, cfg.latent_dim, upsample=False))
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.to_rgb = nn.Conv2d(cin, 3, 1)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        _fill_normal(self.const, 1.0, gen)
        for layer in self.layers:
            layer.reset_parameters_seeded(gen)
        _fill_normal(self.to_rgb.weight, np.sqrt(1.0 / self.to_rgb.in_channels), gen)
        nn.init.zeros_(self.to_rgb.bias)

    def channels_after_block(self, block: int) -> int:
        return _CHANNELS[self.cfg.block_resolutions[block - 1]]

    def forward(
        self,
        rows: torch.Tensor,  # (B, L, D)
        aux: "AuxUNet | None" = None,
        aux_position: int = 0,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        b = rows.shape[0]
        x = self.const.expand(b, -1, -1, -1)
        mask = None
        for i, layer in enumerate(self.layers):
            x = layer(x, rows[:, i])
            if aux is not None and i == 2 * aux_position - 1:
                f_ent, mask = aux(x)
                x = (1.0 - mask) * x + mask * f_ent
        img = torch.sigmoid(self.to_rgb(x))
        if mask is not None:
            mask = F.interpolate(
                mask, size=img.shape[-2:], mode="bilinear", align_corners=False
            )
        return img, mask


class AuxUNet(nn.Module):
    """2-down/2-up UNet predicting entity features and a soft mask."""

    def __init__(self, in_channels: int, base: int = 32):
        super().__init__()
        self.enc0 = nn.Conv2d(in_channels, base, 3, padding=1)
        self.enc1 = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(2 * base, 2 * base, 3, stride=2, padding=1)
        self.dec1 = nn.Conv2d(4 * base, 2 * base, 3, padding=1)
        self.dec0 = nn.Conv2d(3 * base, base, 3, padding=1)
        self.ent_head = nn.Conv2d(base, in_channels, 3, padding=1)
        self.mask_head = nn.Conv2d(base, 1, 3, padding=1)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        for conv in (self.enc0, self.enc1, self.enc2, self.dec1, self.dec0):
            _fill_normal(conv.weight, np.sqrt(2.0 / (conv.in_channels * 9)), gen)
            nn.init.zeros_(conv.bias)
        # near-identity start: zero entity features, mask ~ sigmoid(-4)
        nn.init.zeros_(self.ent_head.weight)
        nn.init.zeros_(self.ent_head.bias)
        nn.init.zeros_(self.mask_head.weight)
        nn.init.constant_(self.mask_head.bias, -4.0)

    def forward(self, f_in: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        e0 = F.leaky_relu(self.enc0(f_in), 0.2)
        e1 = F.leaky_relu(self.enc1(e0), 0.2)
        e2 = F.leaky_relu(self.enc2(e1), 0.2)
        u1 = F.interpolate(e2, scale_factor=2, mode="bilinear", align_corners=False)
        d1 = F.leaky_relu(self.dec1(torch.cat([u1, e1], dim=1)), 0.2)
        u0 = F.interpolate(d1, scale_factor=2, mode="bilinear", align_corners=False)
        d0 = F.leaky_relu(self.dec0(torch.cat([u0, e0], dim=1)), 0.2)
        return self.ent_head(d0), torch.sigmoid(self.mask_head(d0))


class FeatureExtractor(nn.Module):
    """Frozen 4-level conv pyramid with seeded orthogonal weights.

    Level k halves the spatial size k times; `embed` pools the deepest level
    into a unit vector. Weights never train, so feature distances are a
    fixed, reproducible measuring stick. tanh activations keep every
    feature-space loss smooth, so analytic gradients match finite
    differences everywhere, not just away from kinks.
    """

    channels = (16, 32, 64, 64)

    def __init__(self, seed: int):
        super().__init__()
        self.seed = seed
        gen = torch_gen(seed, "feature-extractor")
        cin = 3
        convs = []
        for cout in self.channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                w = _orthogonal((cout, cin * 9), gain=np.sqrt(2.0), gen=gen)
                conv.weight.copy_(w.reshape(cout, cin, 3, 3))
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    def _to_bchw(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValueError("expected an (H, W, 3) image")
        return image.permute(2, 0, 1).unsqueeze(0)

    def pyramid(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Features at levels 1..4, each (H_k, W_k, C_k)."""
        levels = self.pyramid_batch(self._to_bchw(image))
        return [x.squeeze(0).permute(1, 2, 0) for x in levels]

    def pyramid_batch(self, imgs: torch.Tensor) -> list[torch.Tensor]:
        """Batched features, (B, C_k, H_k, W_k) per level."""
        x = imgs * 2.0 - 1.0
        out = []
        for conv in self.convs:
            weight = conv.weight.to(x.dtype)
            bias = conv.bias.to(x.dtype)
            x = torch.tanh(F.conv2d(x, weight, bias, stride=2, padding=1))
            out.append(x)
        return out

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """Unit-normalized global embedding from the deepest level."""
        deepest = self.pyramid(image)[-1]
        v = deepest.mean(dim=(0, 1))
        return v / torch.linalg.norm(v).clamp_min(1e-12)

    def embed_batch(self, imgs: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images -> (B, E) unit embeddings."""
        deepest = self.pyramid_batch(imgs)[-1]
        v = deepest.mean(dim=(2, 3))
        return v / torch.linalg.norm(v, dim=1, keepdim=True).clamp_min(1e-12)


@dataclass
class GeneratorBundle:
    """Mapping + synthesis (+ optional aux): the triple of generators.

    With aux absent or use_aux=False the bundle is the plain stylizing
    generator; with aux engaged it is the full entity-aware generator.
    """

    mapping: MappingNetwork
    synthesis: SynthesisNetwork
    aux: AuxUNet | None
    aux_position: int

    @property
    def n_rows(self) -> int:
        return self.synthesis.cfg.n_rows

    @property
    def net_config(self) -> NetConfig:
        return self.synthesis.cfg

    def synthesize_batch(
        self, rows: torch.Tensor, use_aux: bool
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        if use_aux and self.aux is None:
            raise ValueError("bundle has no aux network")
        aux = self.aux if use_aux else None
        return self.synthesis(rows, aux=aux, aux_position=self.aux_position)

    def synthesize(
        self, code: LatentCode, use_aux: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """One image (H, W, 3) in [0,1]; mask upsampled to (H, W) when aux runs."""
        if code.n_rows != self.n_rows:
            raise ValueError(f"code has {code.n_rows} rows, bundle wants {self.n_rows}")
        img, mask = self.synthesize_batch(code.rows.unsqueeze(0), use_aux)
        img = img.squeeze(0).permute(1, 2, 0)
        return img, (mask.squeeze(0).squeeze(0) if mask is not None else None)

    def adapt_parameters(self) -> list[torch.Tensor]:
        params = list(self.synthesis.parameters())
        if self.aux is not None:
            params += list(self.aux.parameters())
        return params

    def clone(self) -> "GeneratorBundle":
        import copy

        return GeneratorBundle(
            mapping=copy.deepcopy(self.mapping),
            synthesis=copy.deepcopy(self.synthesis),
            aux=copy.deepcopy(self.aux),
            aux_position=self.aux_position,
        )


def build_bundle(cfg: NetConfig, seed: int, with_aux: bool = False) -> GeneratorBundle:
    cfg.validate()
    mapping = MappingNetwork(cfg.noise_dim, cfg.latent_dim, cfg.n_rows)
    mapping.reset_parameters_seeded(torch_gen(seed, "mapping"))
    synthesis = SynthesisNetwork(cfg)
    synthesis.reset_parameters_seeded(torch_gen(seed, "synthesis"))
    aux = None
    if with_aux:
        aux = attach_aux(cfg, seed)
    return GeneratorBundle(mapping=mapping, synthesis=synthesis, aux=aux, aux_position=cfg.aux_position)


def attach_aux(cfg: NetConfig, seed: int) -> AuxUNet:
    cin = _CHANNELS[cfg.block_resolutions[cfg.aux_position - 1]]
    aux = AuxUNet(cin, base=cfg.aux_channels)
    aux.reset_parameters_seeded(torch_gen(seed, "aux"))
    return aux


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest line + concatenated float32 LE blobs
# ---------------------------------------------------------------------------


def _bundle_state(bundle: GeneratorBundle) -> dict[str, torch.Tensor]:
    state = {}
    for prefix, module in (
        ("mapping", bundle.mapping),
        ("synthesis", bundle.synthesis),
        ("aux", bundle.aux),
    ):
        if module is None:
            continue
        for name, tensor in module.state_dict().items():
            state[f"{prefix}.{name}"] = tensor
    return state


def save_checkpoint(path: str | Path, bundle: GeneratorBundle, extra: dict | None = None) -> None:
    state = _bundle_state(bundle)
    manifest = {
        "format": "ganadapt-checkpoint-v1",
        "net_config": bundle.net_config.to_dict(),
        "has_aux": bundle.aux is not None,
        "aux_position": bundle.aux_position,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for v in state.values():
            f.write(v.detach().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[GeneratorBundle, dict]:
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode())
        blob = f.read()
    if manifest.get("format") != "ganadapt-checkpoint-v1":
        raise ValueError(f"not a ganadapt checkpoint: {path}")
    cfg = NetConfig.from_dict(manifest["net_config"])
    bundle = build_bundle(cfg, seed=0, with_aux=manifest["has_aux"])
    bundle.aux_position = manifest["aux_position"]
    offset = 0
    state = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += 4 * n
    for prefix, module in (
        ("mapping", bundle.mapping),
        ("synthesis", bundle.synthesis),
        ("aux", bundle.aux),
    ):
        if module is None:
            continue
        sub = {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".")}
        module.load_state_dict(sub)
    return bundle, manifest["extra"]
