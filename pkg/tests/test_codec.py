import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nldh.codec import (
    CodecBundle,
    FactorizedEntropyModel,
    LatentBlock,
    ToyAnalysis,
    ToySynthesis,
    build_toy_codec,
    init_module,
    load_codec,
    quantize,
    quantize_tensor,
    tables_from_pmf,
    tables_from_samples,
    wrap_external_codec,
)
from nldh.errors import (
    CodecMismatchError,
    DimensionError,
    PayloadCorruptError,
    ShapeMismatchError,
)
from nldh.rangecoder import MAX_TOTAL


# ---------------------------------------------------------------------------
# quantization


def test_round_matches_torch_round():
    y = torch.tensor([[-1.5, -0.5, 0.5, 1.5, 2.49, -2.51]])
    block = LatentBlock(y.unsqueeze(-1))
    out = quantize(block, "round")
    assert out.quantized
    assert torch.equal(out.data, torch.round(y.unsqueeze(-1)))


def test_round_idempotent():
    y = torch.randn(4, 8, 8) * 10
    once = quantize(LatentBlock(y), "round")
    twice = quantize(once, "round")
    assert torch.equal(once.data, twice.data)


def test_noise_surrogate_is_bounded_and_seeded():
    y = torch.zeros(2, 16, 16)
    gen = torch.Generator().manual_seed(5)
    a = quantize_tensor(y, "noise", gen)
    assert a.abs().max() <= 0.5
    gen2 = torch.Generator().manual_seed(5)
    b = quantize_tensor(y, "noise", gen2)
    assert torch.equal(a, b)


def test_ste_forward_rounds_backward_passes_gradient():
    y = torch.tensor([0.4, 0.6, -1.2], requires_grad=True)
    out = quantize_tensor(y, "ste")
    assert torch.equal(out.detach(), torch.round(y.detach()))
    out.sum().backward()
    assert torch.equal(y.grad, torch.ones_like(y))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        quantize_tensor(torch.zeros(1, 1, 1), "magic")


# ---------------------------------------------------------------------------
# entropy model


@pytest.fixture(scope="module")
def em():
    model = FactorizedEntropyModel(4)
    gen = torch.Generator().manual_seed(11)
    model.init_biases(gen)
    return model


def fit_prior(model, sigma=3.0, steps=300, seed=5):
    """Fit the factorized prior to N(0, sigma) samples so its support is narrow."""
    gen = torch.Generator().manual_seed(seed)
    samples = torch.randn(64, model.channels, 8, 8, generator=gen) * sigma
    opt = torch.optim.Adam(model.parameters(), lr=0.05)
    for _ in range(steps):
        opt.zero_grad()
        noisy = samples + torch.rand(samples.shape, generator=gen) - 0.5
        loss = model.bits(noisy) / samples.numel()
        loss.backward()
        opt.step()
    return model


def test_likelihood_positive_and_normalized(em):
    fit_prior(em)
    lo, hi = em.support()
    assert -40 <= lo < 0 < hi <= 40  # fitted density is narrow
    grid = torch.arange(lo, hi + 1, dtype=torch.float32)
    y = grid.reshape(1, 1, 1, -1).expand(1, 4, 1, -1)
    lik = em.likelihood(y)
    assert (lik > 0).all()
    total = lik.sum(dim=-1)
    assert torch.allclose(total, torch.ones_like(total), atol=2e-3)


def test_bits_nonnegative_and_additive(em):
    y = torch.randn(1, 4, 8, 8) * 3
    with torch.no_grad():
        single = em.bits(y)
        double = em.bits(torch.cat([y, y], dim=0))
    assert float(single) >= 0
    assert math.isclose(float(double), 2 * float(single), rel_tol=1e-5)


def test_integer_pmf_rows_sum_to_one(em):
    fit_prior(em)
    lo, hi = em.support(tail_mass=1e-6)
    pmf = em.integer_pmf(lo, hi)
    assert pmf.shape == (4, hi - lo + 1)
    assert (pmf >= 0).all()
    sums = pmf.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=2e-3)


def test_integer_pmf_matches_likelihood_on_grid(em):
    lo, hi = -8, 8
    pmf = em.integer_pmf(lo, hi)
    grid = torch.arange(lo, hi + 1, dtype=torch.float32)
    y = grid.reshape(1, 1, 1, -1).expand(1, 4, 1, -1)
    lik = em.likelihood(y)[0, :, 0, :]
    assert torch.allclose(pmf, lik, atol=1e-6)


# ---------------------------------------------------------------------------
# coder tables


def test_tables_from_pmf_shape_and_budget():
    pmf = np.tile(np.array([[0.1, 0.6, 0.2, 0.1]]), (3, 1))
    tables = tables_from_pmf(pmf, lo=-1)
    assert len(tables.lo) == 3
    for ch in range(3):
        freqs = tables.freqs[ch]
        assert len(freqs) == 5  # 4 symbols + escape
        assert all(f >= 1 for f in freqs)
        assert sum(freqs) <= MAX_TOTAL
        assert freqs[-1] == 1  # escape slot
    assert tables.lo[0] == -1


def test_tables_bits_of_tracks_probability():
    pmf = np.array([[0.5, 0.25, 0.25]])
    tables = tables_from_pmf(pmf, lo=0)
    b0 = tables.bits_of(0, 0)
    b1 = tables.bits_of(0, 1)
    assert b0 < b1  # more probable symbol costs fewer bits
    assert math.isclose(b0, 1.0, abs_tol=0.01)
    assert math.isclose(b1, 2.0, abs_tol=0.01)


def test_tables_escape_cost_includes_raw_bits():
    pmf = np.array([[0.5, 0.5]])
    tables = tables_from_pmf(pmf, lo=0)
    cost = tables.bits_of(0, 999)  # far out of range -> escape
    assert cost > 32


def test_tables_from_samples_covers_support():
    rng = np.random.default_rng(0)
    samples = rng.integers(-5, 6, size=(1, 2, 40, 100)).astype(np.int32)
    tables = tables_from_samples(samples, channels=2)
    assert tables.lo[0] <= -6  # margin below the observed minimum
    assert tables.symbol_of(0, -5) >= 0
    in_range = [tables.bits_of(0, v) for v in range(-5, 6)]
    assert all(b < 6 for b in in_range)  # ~uniform over 11 symbols: ~3.5 bits
    assert tables.bits_of(1, 500) > 32  # unseen outlier takes the escape path


# ---------------------------------------------------------------------------
# toy transforms / init determinism


def test_toy_transforms_are_inverse_shaped():
    analysis = ToyAnalysis(64)
    synthesis = ToySynthesis(64)
    x = torch.rand(1, 3, 64, 64)
    y = analysis(x)
    assert y.shape == (1, 64, 4, 4)
    x_hat = synthesis(y)
    assert x_hat.shape == x.shape


def test_init_module_is_deterministic():
    a = ToyAnalysis(16)
    b = ToyAnalysis(16)
    init_module(a, torch.Generator().manual_seed(3))
    init_module(b, torch.Generator().manual_seed(3))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = ToyAnalysis(16)
    init_module(c, torch.Generator().manual_seed(4))
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


# ---------------------------------------------------------------------------
# bundle behaviour (uses the session codec)


def test_shape_law(desk_codec):
    for h, w in [(64, 64), (65, 64), (160, 97), (128, 200)]:
        img = np.zeros((h, w, 3), dtype=np.uint8)
        block = desk_codec.encode_latent(img)
        assert block.data.shape[1] == math.ceil(h / 16)
        assert block.data.shape[2] == math.ceil(w / 16)
        assert block.image_hw == (h, w)


@settings(max_examples=10, deadline=None)
@given(st.integers(16, 150), st.integers(16, 150))
def test_shape_law_property(desk_codec, h, w):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    block = desk_codec.encode_latent(img)
    assert block.data.shape[1:] == (math.ceil(h / 16), math.ceil(w / 16))


def test_too_small_image_rejected(desk_codec):
    with pytest.raises(DimensionError):
        desk_codec.encode_latent(np.zeros((8, 64, 3), dtype=np.uint8))


def test_pad_to_grid_replicates_edges(desk_codec):
    x = torch.arange(20 * 18, dtype=torch.float32).reshape(1, 1, 20, 18).expand(1, 3, 20, 18)
    padded = desk_codec.pad_to_grid(x)
    assert padded.shape[-2:] == (32, 32)
    assert torch.equal(padded[..., :20, :18], x)
    assert torch.equal(padded[..., 20:, :18], x[..., 19:20, :].expand(1, 3, 12, 18))
    assert torch.equal(padded[..., :20, 18:], x[..., :, 17:18].expand(1, 3, 20, 14))


def test_decode_image_shape_and_range(desk_codec, small_images):
    block = quantize(desk_codec.encode_latent(small_images[0]), "round")
    out = desk_codec.decode_image(block)
    assert out.dtype == np.float32
    assert out.shape == (160, 160, 3)
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_entropy_roundtrip_lossless(desk_codec, small_images):
    for img in small_images[:3]:
        block = quantize(desk_codec.encode_latent(img), "round")
        payload = desk_codec.entropy_code(block)
        back = desk_codec.entropy_decode(payload, tuple(block.data.shape))
        assert torch.equal(back.data, block.data)
        assert back.quantized


def test_entropy_roundtrip_out_of_range_values(desk_codec):
    # values far outside the table range go through the escape/raw path
    shape = (desk_codec.latent_channels, 8, 8)
    y = torch.zeros(shape)
    y[0, 0, 0] = 5000.0
    y[1, 2, 3] = -4096.0
    block = LatentBlock(y, quantized=True)
    payload = desk_codec.entropy_code(block)
    back = desk_codec.entropy_decode(payload, shape)
    assert torch.equal(back.data, y)


def test_entropy_decode_validates_shape(desk_codec):
    y = torch.zeros(desk_codec.latent_channels, 4, 4)
    payload = desk_codec.entropy_code(LatentBlock(y, quantized=True))
    with pytest.raises(ShapeMismatchError):
        desk_codec.entropy_decode(payload, (desk_codec.latent_channels + 1, 4, 4))
    with pytest.raises(ShapeMismatchError):
        desk_codec.entropy_decode(payload, (4, 4))


def test_entropy_decode_truncated_payload(desk_codec, small_images):
    block = quantize(desk_codec.encode_latent(small_images[0]), "round")
    payload = desk_codec.entropy_code(block)
    with pytest.raises(PayloadCorruptError):
        desk_codec.entropy_decode(payload[: len(payload) // 3], tuple(block.data.shape))


def test_entropy_code_requires_quantized(desk_codec):
    y = torch.randn(desk_codec.latent_channels, 4, 4)
    with pytest.raises(ValueError):
        desk_codec.entropy_code(LatentBlock(y, quantized=False))


def test_estimate_bits_close_to_actual(desk_codec, small_images):
    block = quantize(desk_codec.encode_latent(small_images[1]), "round")
    est = desk_codec.estimate_bits(block)
    actual = len(desk_codec.entropy_code(block)) * 8
    assert est >= 0
    assert abs(est - actual) < 64  # coder termination overhead only


def test_estimate_bits_mode_is_minimal(desk_codec):
    # the per-channel most probable symbol minimizes the estimate
    shape = (desk_codec.latent_channels, 4, 4)
    modes = torch.empty(shape)
    for ch in range(shape[0]):
        freqs = desk_codec.tables.freqs[ch]
        best = int(np.argmax(freqs[:-1]))
        modes[ch] = desk_codec.tables.lo[ch] + best
    base = desk_codec.estimate_bits(LatentBlock(modes, quantized=True))
    rng = np.random.default_rng(0)
    for _ in range(5):
        jitter = modes.clone()
        ch = int(rng.integers(shape[0]))
        jitter[ch, 0, 0] += 1.0
        est = desk_codec.estimate_bits(LatentBlock(jitter, quantized=True))
        assert est >= base


def test_estimate_bits_additivity(desk_codec):
    rng = np.random.default_rng(4)
    y = torch.from_numpy(rng.integers(-3, 4, size=(desk_codec.latent_channels, 4, 4)).astype(np.float32))
    tiled = torch.cat([torch.cat([y, y], dim=1), torch.cat([y, y], dim=1)], dim=2)
    one = desk_codec.estimate_bits(LatentBlock(y, quantized=True))
    four = desk_codec.estimate_bits(LatentBlock(tiled, quantized=True))
    assert math.isclose(four, 4 * one, rel_tol=1e-9)


def test_save_load_roundtrip(desk_codec, tmp_path, small_images):
    path = tmp_path / "codec.nlc"
    desk_codec.save(path)
    loaded = load_codec(path)
    assert loaded.latent_channels == desk_codec.latent_channels
    assert loaded.codec_id == desk_codec.codec_id
    assert loaded.quality == desk_codec.quality
    assert loaded.parameter_snapshot() == desk_codec.parameter_snapshot()
    assert loaded.tables.freqs == desk_codec.tables.freqs
    assert loaded.tables.lo == desk_codec.tables.lo
    a = desk_codec.encode_latent(small_images[0])
    b = loaded.encode_latent(small_images[0])
    assert torch.equal(a.data, b.data)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.nlc"
    path.write_bytes(b"not a codec at all")
    with pytest.raises(CodecMismatchError):
        load_codec(path)


def test_load_rejects_truncated_codec(desk_codec, tmp_path):
    path = tmp_path / "cut.nlc"
    desk_codec.save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(PayloadCorruptError):
        load_codec(path)


def test_frozen_codec_has_no_grads(desk_codec):
    assert desk_codec.frozen
    assert all(not p.requires_grad for p in desk_codec.analysis.parameters())
    assert all(not p.requires_grad for p in desk_codec.synthesis.parameters())


# ---------------------------------------------------------------------------
# toy training + external adapter


def test_build_toy_codec_determinism():
    from nldh.sampledata import synth_corpus

    imgs = synth_corpus(256, size=96, seed=5)
    a = build_toy_codec(1, imgs, steps=6, batch_size=4, crop=64)
    b = build_toy_codec(1, imgs, steps=6, batch_size=4, crop=64)
    assert a.parameter_snapshot() == b.parameter_snapshot()
    assert a.tables.freqs == b.tables.freqs


def test_build_toy_codec_needs_corpus():
    from nldh.sampledata import synth_corpus

    with pytest.raises(ValueError):
        build_toy_codec(0, synth_corpus(10, size=96, seed=0), steps=1)


def test_toy_reconstruction_quality(desk_codec, val_images):
    # held-out reconstruction through round-trip must clear the desk gate
    from nldh.evaluation import psnr
    from nldh.data import tensor_to_image

    scores = []
    for img in val_images[:8]:
        block = quantize(desk_codec.encode_latent(img), "round")
        recon = desk_codec.decode_image(block)
        scores.append(psnr(img, np.round(recon * 255.0).astype(np.uint8)))
    assert float(np.mean(scores)) >= 28.0


class _StubExternal(torch.nn.Module):
    """Duck-typed pretrained-codec stand-in exposing g_a/g_s."""

    def __init__(self):
        super().__init__()
        self.g_a = torch.nn.Sequential(
            torch.nn.Conv2d(3, 8, 5, stride=4, padding=2),
            torch.nn.ReLU(),
            torch.nn.Conv2d(8, 12, 5, stride=4, padding=2),
        )
        self.g_s = torch.nn.Sequential(
            torch.nn.ConvTranspose2d(12, 8, 5, stride=4, padding=2, output_padding=3),
            torch.nn.ReLU(),
            torch.nn.ConvTranspose2d(8, 3, 5, stride=4, padding=2, output_padding=3),
        )


def test_wrap_external_codec_probes_geometry():
    torch.manual_seed(0)
    bundle = wrap_external_codec(_StubExternal())
    assert bundle.latent_channels == 12
    assert bundle.downsample_factor == 16
    assert bundle.frozen
    img = np.zeros((64, 48, 3), dtype=np.uint8)
    block = bundle.encode_latent(img)
    assert block.data.shape == (12, 4, 3)
    q = quantize(block, "round")
    payload = bundle.entropy_code(q)
    back = bundle.entropy_decode(payload, tuple(q.data.shape))
    assert torch.equal(back.data, q.data)
