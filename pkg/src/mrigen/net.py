"""Tiny text-conditioned UNet noise predictor.

Layout at the default config (32x32 input)::

    stem 1->16
    down1  ResBlock 16->16, cross-attn              (skip s1, 32x32) -> down 16x16
    down2  ResBlock 16->32, cross-attn              (skip s2, 16x16) -> down 8x8
    mid    ResBlock 32->32, cross-attn, ResBlock 32->32
    up2    upsample 16x16, concat s2, ResBlock 64->16, cross-attn, upsample 32x32
    up1    concat s1, ResBlock 32->16, cross-attn
    out    GroupNorm, SiLU, conv 16->1 (zero init)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, TokenizationError

SEQ_LEN = 8
PAD, NULL = "<pad>", "<null>"
VOCAB = (
    [PAD, NULL, "0.3T", "3T", "brain", "MRI", "slice", "contrast", "T1", "T2", "FLAIR"]
    + [str(i) for i in range(1, 19)]
    + [f"sks{i}" for i in range(4)]
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}


def tokenize(prompt: str) -> tuple[int, ...]:
    """Map a prompt onto a length-8 id sequence (commas dropped, right-padded).

    An empty prompt is the unconditional sequence ``[<null>, <pad> x 7]``.
    """
    words = prompt.replace(",", " ").split()
    if not words:
        words = [NULL]
    for w in words:
        if w not in TOKEN_ID:
            raise TokenizationError(f"unknown word {w!r}", w)
    if len(words) > SEQ_LEN:
        raise TokenizationError(f"prompt has {len(words)} words, max {SEQ_LEN}", words[SEQ_LEN])
    return tuple(TOKEN_ID[w] for w in words) + (TOKEN_ID[PAD],) * (SEQ_LEN - len(words))


NULL_TOKENS = tokenize("")


def sinusoidal(t, dim: int) -> torch.Tensor:
    """Interleaved ``[sin(t w_k), cos(t w_k)]`` pairs, ``w_k = 10000^(-2k/dim)``.

    ``t`` may be a scalar or a 1-D tensor of steps; returns ``(..., dim)``.
    """
    t = torch.as_tensor(t, dtype=torch.float64)
    k = torch.arange(dim // 2, dtype=torch.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    arg = t[..., None] * omega
    return torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1).flatten(-2)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    ch1: int = 16
    ch2: int = 32
    groups: int = 8
    d_txt: int = 32
    d_t: int = 64
    d_attn: int = 32
    vocab_size: int = len(VOCAB)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# a reduced manifest that keeps every block type; used for gradient checks
SMALL_CONFIG = UNetConfig(image_size=8, ch1=4, ch2=8, groups=2, d_txt=8, d_t=8, d_attn=8)


def _uniform_fan_in(module: nn.Module):
    for p in module.parameters(recurse=False):
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
        else:
            fan_in = module.in_features
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(p, -bound, bound)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, d_t, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(d_t, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttention(nn.Module):
    """Single-head attention from image positions (queries) to text tokens."""

    def __init__(self, channels, d_txt, d_attn):
        super().__init__()
        self.q = nn.Linear(channels, d_attn, bias=False)
        self.k = nn.Linear(d_txt, d_attn, bias=False)
        self.v = nn.Linear(d_txt, d_attn, bias=False)
        self.o = nn.Linear(d_attn, channels, bias=False)
        self.scale = 1.0 / math.sqrt(d_attn)

    def weights(self, x, text):
        """Attention matrix ``(B, H*W, tokens)``; rows are softmax-normalized."""
        q = self.q(x.flatten(2).transpose(1, 2))
        k = self.k(text)
        return torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)

    def forward(self, x, text):
        b, c, h, w = x.shape
        out = self.o(self.weights(x, text) @ self.v(text))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig = UNetConfig(), seed: int = 0):
        super().__init__()
        # default layer init draws from the global generator; keep it untouched
        gen_state = torch.random.get_rng_state()
        self.config = cfg = config
        c1, c2, g = cfg.ch1, cfg.ch2, cfg.groups
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_txt)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.d_t, cfg.d_t), nn.SiLU(), nn.Linear(cfg.d_t, cfg.d_t))
        self.stem = nn.Conv2d(1, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, cfg.d_t, g)
        self.attn_down1 = CrossAttention(c1, cfg.d_txt, cfg.d_attn)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, cfg.d_t, g)
        self.attn_down2 = CrossAttention(c2, cfg.d_txt, cfg.d_attn)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c2, cfg.d_t, g)
        self.attn_mid = CrossAttention(c2, cfg.d_txt, cfg.d_attn)
        self.mid2 = ResBlock(c2, c2, cfg.d_t, g)
        self.up2 = ResBlock(2 * c2, c1, cfg.d_t, g)
        self.attn_up2 = CrossAttention(c1, cfg.d_txt, cfg.d_attn)
        self.up1 = ResBlock(2 * c1, c1, cfg.d_t, g)
        self.attn_up1 = CrossAttention(c1, cfg.d_txt, cfg.d_attn)
        self.out_norm = nn.GroupNorm(g, c1)
        self.out_conv = nn.Conv2d(c1, 1, 3, padding=1)
        # number of optimizer steps this model has seen; persisted in checkpoints
        self.trained_steps = 0
        torch.random.set_rng_state(gen_state)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    _uniform_fan_in(m)
                elif isinstance(m, nn.GroupNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
            nn.init.normal_(self.token_embedding.weight)
        finally:
            torch.random.set_rng_state(gen_state)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    # conditioning -------------------------------------------------------
    def embed_text(self, tokens) -> torch.Tensor:
        """``(B, 8)`` ids (or a single sequence) to ``(B, 8, d_txt)``."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        return self.token_embedding(tokens)

    def embed_time(self, t) -> torch.Tensor:
        dtype = self.stem.weight.dtype
        return self.time_mlp(sinusoidal(t, self.config.d_t).to(dtype))

    def context(self, tokens, t):
        """Conditioning pair ``(text_emb, t_emb)`` for a batch."""
        return self.embed_text(tokens), self.embed_time(t)

    # forward ------------------------------------------------------------
    def denoise(self, x, text_emb, t_emb):
        """Predict the noise in ``x`` of shape ``(B, 1, H, W)``."""
        def check(h, name):
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations in {name}", name)
            return h

        h = check(self.stem(x), "stem")
        s1 = check(self.attn_down1(self.down1(h, t_emb), text_emb), "down1")
        h = self.pool1(s1)
        s2 = check(self.attn_down2(self.down2(h, t_emb), text_emb), "down2")
        h = self.pool2(s2)
        h = self.mid1(h, t_emb)
        h = self.attn_mid(h, text_emb)
        h = check(self.mid2(h, t_emb), "mid")
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.attn_up2(self.up2(torch.cat([h, s2], dim=1), t_emb), text_emb)
        h = check(F.interpolate(h, scale_factor=2, mode="nearest"), "up2")
        h = check(self.attn_up1(self.up1(torch.cat([h, s1], dim=1), t_emb), text_emb), "up1")
        return check(self.out_conv(F.silu(self.out_norm(h))), "out")

    def forward(self, x, t, tokens):
        text_emb, t_emb = self.context(tokens, t)
        return self.denoise(x, text_emb, t_emb)

    def attention_blocks(self):
        return [self.attn_down1, self.attn_down2, self.attn_mid, self.attn_up2, self.attn_up1]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]

    def manifest_hash(self) -> str:
        blob = self.config.to_json() + json.dumps(self.manifest())
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def loss_and_grads(model, x_t, t, tokens, eps):
    """MSE noise-prediction loss and its gradient for every parameter.

    Returns ``(loss, {name: grad})``; parameters that receive no gradient
    get zeros.
    """
    model.zero_grad(set_to_none=True)
    pred = model(x_t, t, tokens)
    loss = torch.mean((pred - eps) ** 2)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return loss.item(), grads


def check_gradients(model, x_t, t, tokens, eps, n_params=200, seed=0, precision="double"):
    """Compare backprop gradients with central finite differences.

    ``n_params`` scalar entries are drawn at random over all parameters
    (trainable or not). The finite-difference side always runs in double
    precision on a copy of the parameters; ``precision`` selects the dtype
    of the analytic side. The oracle is the fourth-order central stencil
    with step ``1e-4 * max(1, |p|)``.

    Returns the maximum relative error ``|a - n| / max(|a|, |n|, 1e-10)``.
    """
    import copy

    dtype = torch.float64 if precision == "double" else torch.float32
    analytic_model = copy.deepcopy(model).to(dtype)
    for p in analytic_model.parameters():
        p.requires_grad_(True)
    _, grads = loss_and_grads(analytic_model, x_t.to(dtype), t, tokens, eps.to(dtype))

    ref = copy.deepcopy(model).double()
    x64, e64 = x_t.double(), eps.double()
    params = dict(ref.named_parameters())
    names = list(params)
    sizes = torch.tensor([params[n].numel() for n in names], dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    picks = torch.multinomial(sizes / sizes.sum(), n_params, replacement=True, generator=g)

    def loss():
        with torch.no_grad():
            return torch.mean((ref(x64, t, tokens) - e64) ** 2).item()

    worst = 0.0
    for pi in picks.tolist():
        name = names[pi]
        flat = params[name].data.view(-1)
        j = int(torch.randint(flat.numel(), (1,), generator=g))
        orig = flat[j].item()
        h = 1e-4 * max(1.0, abs(orig))
        f = {}
        for k in (-2, -1, 1, 2):
            flat[j] = orig + k * h
            f[k] = loss()
        flat[j] = orig
        numeric = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h)
        analytic = grads[name].reshape(-1)[j].item()
        denom = max(abs(analytic), abs(numeric), 1e-10)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
