"""Noise-prediction training: loss, AdamW, LR schedules and DreamBooth."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .diffusion import NoiseSchedule, q_sample, sample_ddim
from .errors import InvalidInput, NumericError, PromptError
from .net import NULL_TOKENS, tokenize
from .prompts import IDENTIFIERS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_steps: int = 1000
    batch_size: int = 1
    grad_accum_steps: int = 1
    lr_schedule: str = "cosine"
    seed: int = 0
    cond_dropout_prob: float = 0.1
    precision: str = "single"
    weight_decay: float = 0.01
    train_text_encoder: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise InvalidInput("learning_rate, batch_size and grad_accum_steps must be positive")
        if self.max_steps < 0:
            raise InvalidInput("max_steps must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidInput(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.precision not in ("single", "double"):
            raise InvalidInput(f"unknown precision {self.precision!r}")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise InvalidInput("cond_dropout_prob must lie in [0, 1]")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "double" else torch.float32


def lr_at(step: int, config: TrainConfig) -> float:
    lr0 = config.learning_rate
    if config.lr_schedule == "constant" or config.max_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / config.max_steps))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, no_decay=()):
    """One AdamW update, applied in place to ``params`` (numpy or torch).

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``. Names listed
    in ``no_decay`` skip the weight-decay term.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = g * 0.0
            state.v[name] = g * 0.0
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / ((v / c2) ** 0.5 + state.eps)
        if name not in no_decay:
            update = update + state.weight_decay * p
        with torch.no_grad():
            p -= lr * update
    return params, state


# ------------------------------------------------------------------ data

@dataclass
class DiffusionDataset:
    """Images scaled to [-1, 1] as ``(N, 1, H, W)`` plus ``(N, 8)`` token ids."""

    images: torch.Tensor
    tokens: torch.Tensor

    @classmethod
    def from_arrays(cls, images, prompts):
        imgs = torch.as_tensor(np.asarray(images, dtype=np.float64) * 2.0 - 1.0)[:, None]
        toks = torch.tensor([p if isinstance(p, tuple) else tokenize(p) for p in prompts])
        if len(imgs) != len(toks):
            raise InvalidInput("images and prompts differ in length")
        if len(imgs) == 0:
            raise InvalidInput("empty dataset")
        return cls(imgs, toks)

    def __len__(self):
        return len(self.images)


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, loss):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("steps must increase")
        self.steps.append(int(step))
        self.losses.append(float(loss))

    def __len__(self):
        return len(self.steps)

    def window_mean(self, n, tail=True):
        vals = self.losses[-n:] if tail else self.losses[:n]
        return float(np.mean(vals))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for s, l in zip(self.steps, self.losses):
                w.writerow([s, repr(float(l))])


@dataclass
class _Draw:
    idx: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    drop: torch.Tensor


def _draw(gen, n, data: DiffusionDataset, schedule: NoiseSchedule, dropout_prob):
    shape = (n,) + tuple(data.images.shape[1:])
    return _Draw(
        idx=torch.randint(len(data), (n,), generator=gen),
        t=torch.randint(1, schedule.T + 1, (n,), generator=gen),
        eps=torch.randn(shape, generator=gen, dtype=torch.float64),
        drop=torch.rand(n, generator=gen, dtype=torch.float64) < dropout_prob,
    )


def _mse(model, data, schedule, d: _Draw, sl, dtype):
    x0 = data.images[d.idx[sl]].to(dtype)
    eps = d.eps[sl].to(dtype)
    t = d.t[sl]
    tokens = data.tokens[d.idx[sl]].clone()
    tokens[d.drop[sl]] = torch.tensor(NULL_TOKENS)
    x_t = q_sample(x0, t.numpy(), eps, schedule)
    pred = model(x_t, t, tokens)
    return torch.mean((pred - eps) ** 2)


def training_loss(model, x0, tokens, schedule: NoiseSchedule, gen: torch.Generator,
                  cond_dropout_prob: float = 0.0):
    """Loss and gradients for one batch of ``x0`` in [-1, 1].

    Each item gets its own ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` from
    ``gen``; with probability ``cond_dropout_prob`` its tokens are replaced by
    the unconditional sequence. Returns ``(loss, {name: grad})``.
    """
    x0 = torch.as_tensor(x0)
    if len(x0) == 0:
        raise InvalidInput("empty batch")
    data = DiffusionDataset(x0, torch.as_tensor(tokens))
    d = _draw(gen, len(x0), data, schedule, cond_dropout_prob)
    d.idx = torch.arange(len(x0))
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    loss = _mse(model, data, schedule, d, slice(None), x0.dtype)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    loss.backward()
    grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    for p in params.values():
        p.grad = None
    return loss.item(), grads


def trainable_parameters(model, config: TrainConfig) -> dict:
    return {
        name: p for name, p in model.named_parameters()
        if config.train_text_encoder or not name.startswith("token_embedding")
    }


def train(model, dataset: DiffusionDataset, schedule: NoiseSchedule, config: TrainConfig,
          prior: DiffusionDataset | None = None, lambda_prior: float = 0.0,
          checkpoint_path=None, log_every: int = 0):
    """Run ``config.max_steps`` AdamW steps of noise-prediction training.

    Each optimizer step averages the gradients of ``grad_accum_steps``
    micro-batches of ``batch_size`` items. All randomness for a step is drawn
    up front, so accumulation over k micro-batches sees exactly the items a
    single k-times-larger batch would. When ``prior`` is given and
    ``lambda_prior > 0`` every micro-batch adds ``lambda_prior`` times the
    loss on an equally sized prior batch (drawn from a separate stream).

    A non-finite loss is detected before the update, so the parameters are
    still the last finite ones; they are saved to ``checkpoint_path`` if
    given and :class:`NumericError` is raised.
    """
    if len(dataset) == 0:
        raise InvalidInput("empty dataset")
    dtype = config.dtype
    model.to(dtype)
    gen = torch.Generator().manual_seed(config.seed)
    prior_gen = torch.Generator().manual_seed(config.seed + 7919)
    use_prior = prior is not None and lambda_prior > 0
    params = trainable_parameters(model, config)
    for name, p in model.named_parameters():
        p.requires_grad_(name in params)
    state = AdamWState(weight_decay=config.weight_decay)
    no_decay = {n for n in params if n.startswith("token_embedding")}
    curve = LossCurve()
    k, b = config.grad_accum_steps, config.batch_size

    for step in range(config.max_steps):
        d = _draw(gen, k * b, dataset, schedule, config.cond_dropout_prob)
        dp = _draw(prior_gen, k * b, prior, schedule, config.cond_dropout_prob) if use_prior else None
        grads = {n: torch.zeros_like(p) for n, p in params.items()}
        total = 0.0
        for i in range(k):
            sl = slice(i * b, (i + 1) * b)
            try:
                loss = _mse(model, dataset, schedule, d, sl, dtype)
                if use_prior:
                    loss = loss + lambda_prior * _mse(model, prior, schedule, dp, sl, dtype)
                if not torch.isfinite(loss):
                    raise NumericError("non-finite loss")
            except NumericError as exc:
                if checkpoint_path is not None:
                    from .checkpoint import save_checkpoint
                    save_checkpoint(model, checkpoint_path)
                raise NumericError(f"step {step + 1}: {exc}", step + 1) from exc
            model.zero_grad(set_to_none=True)
            loss.backward()
            for n, p in params.items():
                if p.grad is not None:
                    grads[n] += p.grad
            total += loss.item()
        model.zero_grad(set_to_none=True)
        for n in grads:
            grads[n] /= k
        adamw_step(params, grads, state, lr_at(step, config), no_decay=no_decay)
        model.trained_steps += 1
        curve.append(step + 1, total / k)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f", step + 1, curve.window_mean(log_every))
    for p in model.parameters():
        p.requires_grad_(True)
    return model, curve


def train_dreambooth(model, instance_images, identifier: str, class_prompt: str,
                     schedule: NoiseSchedule, config: TrainConfig, lambda_prior: float = 1.0,
                     prior_steps: int = 50, prior_eta: float = 1.0):
    """DreamBooth fine-tuning with prior preservation.

    Instance images are paired with ``"<identifier> <class_prompt>"``. When
    ``lambda_prior > 0``, ``len(instance_images)`` class samples are first
    drawn from the unmodified model with ``class_prompt`` (DDIM,
    ``prior_steps`` steps, ``prior_eta``) and used as the prior set. The learning rate is
    held constant regardless of ``config.lr_schedule``.

    Returns ``(model, LossCurve)``.
    """
    if identifier not in IDENTIFIERS:
        raise PromptError(f"unregistered identifier {identifier!r}", identifier)
    if model.trained_steps == 0:
        raise InvalidInput("DreamBooth expects pretrained parameters")
    instance_prompt = f"{identifier} {class_prompt}"
    images = np.asarray(instance_images)
    instance = DiffusionDataset.from_arrays(images, [instance_prompt] * len(images))
    prior = None
    if lambda_prior > 0:
        samples = sample_ddim(model, class_prompt, schedule, n_steps=prior_steps, eta=prior_eta,
                              seed=config.seed, n=len(images), image_size=images.shape[-1])
        prior = DiffusionDataset.from_arrays(samples, [class_prompt] * len(images))
    config = replace(config, lr_schedule="constant")
    return train(model, instance, schedule, config, prior=prior, lambda_prior=lambda_prior)


def clone_model(model):
    m = copy.deepcopy(model)
    m.trained_steps = model.trained_steps
    return m
