import numpy as np
import pytest

from conftest import scalar_bilinear
from lrm.encoder import EncoderConfig, ViTEncoder, patchify, unpatchify, upsample_positional_embedding
from lrm.gradcheck import finite_difference_check
from lrm.model import desk_config, full_scale_config
from lrm.tensor import Tensor, precision


def test_patchify_round_trip(rng):
    img = rng.uniform(size=(3, 4, 4))
    p = patchify(img, 2)
    assert p.shape == (4, 12)
    assert np.array_equal(unpatchify(p, 2, 4, 4).data, img.astype(p.dtype))


def test_patchify_row_major_order():
    img = np.zeros((3, 4, 4))
    img[:, 0:2, 2:4] = 1.0  # top-right patch
    p = patchify(img, 2).data
    assert np.all(p[1] == 1.0) and np.all(np.delete(p, 1, axis=0) == 0.0)


def test_patchify_constant_image():
    p = patchify(np.full((3, 8, 8), 0.7), 4).data
    assert np.all(p == p[0])


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((3, 10, 10)), 4)
    with pytest.raises(ValueError):
        EncoderConfig(image_size=60, patch_size=8)
    with pytest.raises(ValueError):
        EncoderConfig(d_E=10, heads=4)


def test_full_scale_token_count():
    enc = full_scale_config().encoder
    assert enc.grid ** 2 == 1024 and enc.num_tokens == 1025 and enc.d_E == 768


def test_pe_upsample_identity_and_constant(rng):
    pe = Tensor(rng.normal(size=(3, 3, 5)))
    assert upsample_positional_embedding(pe, 3) is pe
    const = upsample_positional_embedding(np.full((2, 2, 4), 1.5), 7).data
    assert const.shape == (7, 7, 4) and np.allclose(const, 1.5)


def test_pe_upsample_matches_scalar_oracle(rng, f64):
    pe = rng.normal(size=(2, 2, 3))
    up = upsample_positional_embedding(pe, 4).data
    coords = np.linspace(-1, 1, 4)
    for r in range(4):
        for c in range(4):
            assert np.abs(up[r, c] - scalar_bilinear(pe, coords[c], coords[r])).max() < 1e-6


@pytest.fixture
def tiny_encoder(rng):
    return ViTEncoder(EncoderConfig(image_size=16, patch_size=4, d_E=8, layers=1, heads=2), rng)


def test_output_shape_and_determinism(tiny_encoder, rng):
    img = rng.uniform(size=(3, 16, 16))
    a = tiny_encoder(img).data
    assert a.shape == (17, 8)
    assert np.array_equal(a, tiny_encoder(img).data)


def test_desk_encoder_gives_65_tokens(rng):
    enc = ViTEncoder(desk_config().encoder, rng)
    assert enc(rng.uniform(size=(3, 64, 64))).shape == (65, 96)


def test_rejects_bad_image(tiny_encoder):
    with pytest.raises(ValueError):
        tiny_encoder(np.zeros((3, 16, 12)))
    with pytest.raises(ValueError):
        tiny_encoder(np.zeros((16, 16, 3)))


def test_permutation_equivariance_without_positions(tiny_encoder, rng, f64):
    tiny_encoder.astype(np.float64)
    tiny_encoder.pos_embed.data[:] = 0
    tiny_encoder.cls_pos.data[:] = 0
    img = rng.uniform(size=(3, 16, 16))
    swapped = img.copy()
    # swap patch (0, 0) with patch (2, 3): token 1 <-> token 1 + 2 * 4 + 3
    a, b = (slice(0, 4), slice(0, 4)), (slice(8, 12), slice(12, 16))
    swapped[:, a[0], a[1]], swapped[:, b[0], b[1]] = img[:, b[0], b[1]], img[:, a[0], a[1]]
    out, out_sw = tiny_encoder(img).data, tiny_encoder(swapped).data
    perm = np.arange(17)
    perm[[1, 12]] = perm[[12, 1]]
    assert np.abs(out_sw - out[perm]).max() < 1e-10


def test_one_layer_encoder_gradcheck(rng):
    with precision(np.float64):
        enc = ViTEncoder(EncoderConfig(image_size=8, patch_size=4, d_E=8, layers=1, heads=2), rng).astype(np.float64)
        for p in enc.parameters():
            p.data += rng.normal(size=p.shape) * 0.1
        img = Tensor(rng.uniform(size=(3, 8, 8)))
        probe = rng.normal(size=(5, 8))
        report = finite_difference_check(lambda: (enc(img) * probe).sum(), dict(enc.named_parameters()),
                                         max_elements=6)
    assert report.passed, report.table()
