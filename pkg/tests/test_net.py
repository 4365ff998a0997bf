import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mrigen.errors import NumericError, TokenizationError
from mrigen.net import (
    NULL_TOKENS, SEQ_LEN, SMALL_CONFIG, TOKEN_ID, VOCAB, UNet, UNetConfig, check_gradients,
    loss_and_grads, sinusoidal, tokenize,
)


def small_batch(seed=0, n=2, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    size = SMALL_CONFIG.image_size
    x = torch.randn(n, 1, size, size, generator=g, dtype=dtype)
    eps = torch.randn(n, 1, size, size, generator=g, dtype=dtype)
    t = torch.tensor([3, 700][:n])
    tokens = torch.tensor([tokenize("3T brain MRI, slice 2, T2 contrast"), NULL_TOKENS][:n])
    return x, t, tokens, eps


def randomized(model, seed=1):
    # the zero-initialized output conv would hide most gradients
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def test_vocabulary_layout():
    assert len(VOCAB) == 33 and VOCAB[:2] == ["<pad>", "<null>"]
    assert VOCAB[-4:] == ["sks0", "sks1", "sks2", "sks3"]


def test_tokenize_examples():
    ids = tokenize("3T brain MRI, slice 2, T2 contrast")
    words = ["3T", "brain", "MRI", "slice", "2", "T2", "contrast", "<pad>"]
    assert ids == tuple(TOKEN_ID[w] for w in words)
    assert tokenize("") == (TOKEN_ID["<null>"],) + (TOKEN_ID["<pad>"],) * 7
    with pytest.raises(TokenizationError) as info:
        tokenize("xyz scan")
    assert info.value.token == "xyz"


def test_identifier_prompt_fits():
    assert len(tokenize("sks3 0.3T brain MRI, slice 18, FLAIR contrast")) == SEQ_LEN


def test_embed_text_is_lookup():
    model = UNet(SMALL_CONFIG)
    pad = model.embed_text([TOKEN_ID["<pad>"]] * 8)
    assert torch.equal(pad, model.token_embedding.weight[0].expand(8, -1))
    a = model.embed_text(tokenize("3T brain MRI, slice 2, T2 contrast"))
    b = model.embed_text(tokenize("3T brain MRI, slice 2, T1 contrast"))
    differs = (a != b).any(dim=1)
    assert differs.tolist() == [False] * 5 + [True] + [False] * 2


def test_sinusoidal_properties():
    assert sinusoidal(0, 64).tolist() == [0.0, 1.0] * 32
    ts = torch.arange(0, 1001)
    emb = sinusoidal(ts, 64)
    assert torch.allclose((emb ** 2).sum(dim=1), torch.full((1001,), 32.0, dtype=torch.float64))
    # pairwise distinct over 0..T
    d = torch.cdist(emb, emb)
    d.fill_diagonal_(1.0)
    assert d.min() > 1e-6


def test_attention_rows_and_zero_query():
    model = UNet(UNetConfig(), seed=3)
    attn = model.attn_down2
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 32, 16, 16, generator=g)
    text = model.embed_text([tokenize("0.3T brain MRI, slice 5, T1 contrast")] * 2)
    w = attn.weights(x, text)
    assert torch.allclose(w.sum(-1), torch.ones(2, 256), atol=1e-6)
    with torch.no_grad():
        attn.q.weight.zero_()
    assert torch.allclose(attn.weights(x, text), torch.full((2, 256, 8), 1 / 8))


def test_zero_output_projection_is_identity():
    model = UNet(UNetConfig(), seed=3)
    text = model.embed_text([NULL_TOKENS])
    for block in model.attention_blocks():
        with torch.no_grad():
            block.o.weight.zero_()
        c = block.q.in_features
        x = torch.randn(1, c, 8, 8)
        assert torch.equal(block(x, text), x)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(1, 1000), st.integers(0, 10_000))
def test_forward_preserves_shape(n, t, seed):
    model = randomized(UNet(SMALL_CONFIG).double(), seed)
    x = torch.randn(n, 1, 8, 8, dtype=torch.float64)
    out = model(x, torch.full((n,), t), torch.tensor([NULL_TOKENS] * n))
    assert out.shape == x.shape


def test_default_manifest():
    model = UNet()
    out = model(torch.zeros(1, 1, 32, 32), torch.tensor([10]), torch.tensor([NULL_TOKENS]))
    assert out.shape == (1, 1, 32, 32)
    # output conv is zero at init
    assert not out.any()
    assert model.num_parameters() == 124_849
    assert UNet(seed=5).num_parameters() == 124_849
    assert UNet().manifest_hash() == UNet(seed=9).manifest_hash()
    assert UNet().manifest_hash() != UNet(SMALL_CONFIG).manifest_hash()


def test_init_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = UNet(seed=4)
    after = torch.rand(1)
    assert torch.equal(before, after)
    b = UNet(seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_zero_weights_give_constant_output():
    model = randomized(UNet(SMALL_CONFIG).double())
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not name.endswith("bias"):
                p.zero_()
    x, t, tokens, _ = small_batch()
    out = model(x, t, tokens)
    assert torch.allclose(out, out.flatten()[0].expand_as(out), atol=1e-12)


def test_forward_is_deterministic():
    model = randomized(UNet(SMALL_CONFIG).double())
    x, t, tokens, _ = small_batch()
    assert torch.equal(model(x, t, tokens), model(x, t, tokens))


def test_non_finite_input_names_layer():
    model = UNet(SMALL_CONFIG).double()
    x, t, tokens, _ = small_batch()
    x[0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericError) as info:
        model(x, t, tokens)
    assert info.value.where == "stem"


@pytest.mark.parametrize("precision, bound", [("double", 1e-6), ("single", 1e-3)])
def test_gradient_check(precision, bound):
    model = randomized(UNet(SMALL_CONFIG).double())
    x, t, tokens, eps = small_batch()
    assert check_gradients(model, x, t, tokens, eps, n_params=200, precision=precision) < bound


def test_zero_loss_batch_has_zero_gradients():
    model = randomized(UNet(SMALL_CONFIG).double())
    x, t, tokens, _ = small_batch()
    with torch.no_grad():
        eps = model(x, t, tokens)
    loss, grads = loss_and_grads(model, x, t, tokens, eps)
    assert loss == 0.0
    assert max(g.abs().max().item() for g in grads.values()) < 1e-12


def test_prompt_changes_output_after_randomizing():
    model = randomized(UNet(SMALL_CONFIG).double())
    x, t, _, _ = small_batch(n=1)
    a = model(x, t, torch.tensor([tokenize("3T brain MRI, slice 2, T2 contrast")]))
    b = model(x, t, torch.tensor([tokenize("3T brain MRI, slice 2, T1 contrast")]))
    assert (a - b).abs().max() > 0
    assert np.isfinite(a.detach().numpy()).all()
