import hashlib

import pytest
import torch
from torch import nn

from ganadapt import latent, nets
from ganadapt.rng import torch_gen


@pytest.fixture(scope="module")
def bundle():
    return nets.build_bundle(nets.NetConfig(), seed=3, with_aux=True)


@pytest.fixture(scope="module")
def code(bundle):
    z = latent.sample_noise(64, torch_gen(0))
    return latent.map_noise(bundle.mapping, z)


class FakeAux(nn.Module):
    """Aux stub with a fixed mask value; entity features optionally mirror f_in."""

    def __init__(self, mask_value, ent_mode="zero"):
        super().__init__()
        self.mask_value = mask_value
        self.ent_mode = ent_mode

    def forward(self, f_in):
        m = torch.full_like(f_in[:, :1], self.mask_value)
        f_ent = f_in if self.ent_mode == "identity" else torch.zeros_like(f_in)
        return f_ent, m


def test_net_config_geometry():
    cfg = nets.NetConfig(resolution=32)
    assert cfg.block_resolutions == [4, 8, 16, 32]
    assert cfg.n_rows == 8
    assert nets.NetConfig(resolution=16).n_rows == 6
    with pytest.raises(ValueError):
        nets.NetConfig(resolution=48).validate()
    with pytest.raises(ValueError):
        nets.NetConfig(aux_position=9).validate()


def test_mapping_output_radius(bundle):
    z = torch.randn(16, 64, generator=torch_gen(4))
    w = bundle.mapping(z)
    assert torch.allclose(torch.linalg.norm(w, dim=1), torch.full((16,), bundle.mapping.output_radius), atol=1e-4)


def test_synthesize_shapes_and_range(bundle, code):
    img, mask = bundle.synthesize(code, use_aux=True)
    assert img.shape == (32, 32, 3)
    assert mask.shape == (32, 32)
    assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
    img2, mask2 = bundle.synthesize(code, use_aux=False)
    assert mask2 is None
    assert torch.equal(img, bundle.synthesize(code, use_aux=True)[0])  # deterministic


def test_mask_zero_equals_no_aux_path(bundle, code):
    hacked = nets.GeneratorBundle(bundle.mapping, bundle.synthesis, FakeAux(0.0), bundle.aux_position)
    a, _ = hacked.synthesize(code, use_aux=True)
    b, _ = hacked.synthesize(code, use_aux=False)
    assert torch.equal(a, b)


def test_mask_one_blends_to_entity_features(bundle, code):
    # with m=1 everything downstream sees only f_ent: content rows are dead
    hacked = nets.GeneratorBundle(bundle.mapping, bundle.synthesis, FakeAux(1.0), bundle.aux_position)
    a, _ = hacked.synthesize(code, use_aux=True)
    other = code.rows.clone()
    other[: 2 * bundle.aux_position] = torch.randn(
        2 * bundle.aux_position, 64, generator=torch_gen(9)
    )
    b, _ = hacked.synthesize(latent.LatentCode(other, "W_plus"), use_aux=True)
    assert torch.equal(a, b)


def test_blend_identity_for_any_mask_value(bundle, code):
    # blending f_in with itself is exact for arbitrary m in [0,1]
    for m in (0.23, 0.5, 0.99):
        hacked = nets.GeneratorBundle(
            bundle.mapping, bundle.synthesis, FakeAux(m, ent_mode="identity"), bundle.aux_position
        )
        a, _ = hacked.synthesize(code, use_aux=True)
        b, _ = hacked.synthesize(code, use_aux=False)
        assert torch.allclose(a, b, atol=1e-6)


def test_fresh_aux_is_near_identity(bundle, code):
    img_aux, mask = bundle.synthesize(code, use_aux=True)
    img_plain, _ = bundle.synthesize(code, use_aux=False)
    assert float((img_aux - img_plain).abs().max()) < 1e-2
    assert float(mask.max()) < 0.05  # sigmoid(-4)


def test_synthesize_requires_matching_rows(bundle):
    bad = latent.LatentCode(torch.randn(6, 64), "W_plus")
    with pytest.raises(ValueError):
        bundle.synthesize(bad)


def test_missing_aux_raises():
    b = nets.build_bundle(nets.NetConfig(), seed=1, with_aux=False)
    z = latent.sample_noise(64, torch_gen(1))
    with pytest.raises(ValueError):
        b.synthesize(latent.map_noise(b.mapping, z), use_aux=True)


def test_pyramid_shapes_and_determinism():
    fe = nets.FeatureExtractor(seed=7)
    img = torch.rand(32, 32, 3, generator=torch_gen(2))
    levels = fe.pyramid(img)
    assert [tuple(l.shape[:2]) for l in levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    again = fe.pyramid(img.clone())
    for a, b in zip(levels, again):
        assert torch.equal(a, b)


def test_pyramid_sensitive_to_recolor():
    fe = nets.FeatureExtractor(seed=7)
    img = torch.rand(32, 32, 3, generator=torch_gen(3))
    recolored = img.flip(-1) * 0.8
    gap = sum(((a - b) ** 2).sum() for a, b in zip(fe.pyramid(img), fe.pyramid(recolored)))
    assert float(gap) > 0


def test_embed_unit_norm_and_determinism():
    fe = nets.FeatureExtractor(seed=8)
    img = torch.rand(32, 32, 3, generator=torch_gen(4))
    e = fe.embed(img)
    assert e.shape == (fe.embed_dim,)
    assert float(torch.linalg.norm(e)) == pytest.approx(1.0, abs=1e-6)
    assert torch.equal(e, fe.embed(img.clone()))


def test_embed_cosine_below_one_after_recolor():
    fe = nets.FeatureExtractor(seed=8)
    img = torch.rand(32, 32, 3, generator=torch_gen(5))
    recolored = (img * torch.tensor([0.5, 1.0, 1.3])).clamp(0, 1)
    assert float(fe.embed(img) @ fe.embed(recolored)) < 1.0


def test_extractor_frozen_and_seeded():
    a, b = nets.FeatureExtractor(seed=9), nets.FeatureExtractor(seed=9)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
        assert not pa.requires_grad
    c = nets.FeatureExtractor(seed=10)
    assert not torch.equal(next(a.parameters()), next(c.parameters()))


def test_checkpoint_roundtrip_and_hash(tmp_path, bundle, code):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    nets.save_checkpoint(p1, bundle, extra={"k": [1, 2]})
    loaded, extra = nets.load_checkpoint(p1)
    assert extra == {"k": [1, 2]}
    assert loaded.aux is not None
    a, am = bundle.synthesize(code, use_aux=True)
    b, bm = loaded.synthesize(code, use_aux=True)
    assert torch.equal(a, b) and torch.equal(am, bm)
    nets.save_checkpoint(p2, loaded, extra={"k": [1, 2]})
    h1 = hashlib.sha256(p1.read_bytes()).hexdigest()
    h2 = hashlib.sha256(p2.read_bytes()).hexdigest()
    assert h1 == h2


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        nets.load_checkpoint(bad)


def test_build_bundle_seeded_reproducible():
    a = nets.build_bundle(nets.NetConfig(), seed=11, with_aux=True)
    b = nets.build_bundle(nets.NetConfig(), seed=11, with_aux=True)
    for pa, pb in zip(a.synthesis.parameters(), b.synthesis.parameters()):
        assert torch.equal(pa, pb)
    c = nets.build_bundle(nets.NetConfig(), seed=12, with_aux=True)
    assert not torch.equal(a.synthesis.const, c.synthesis.const)
