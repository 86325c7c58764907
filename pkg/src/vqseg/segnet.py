"""UNet / VQ-UNet built from pre-activation residual blocks.

The forward pass factors as decode(quantise(encode(x))).  With skip
connections disabled the decoder sees only the quantised bottleneck.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .autodiff import Tensor, backward, detect_anomaly, no_grad, ops
from .errors import ConfigError, DimensionError, NumericalError
from .metrics import dice_ce_loss, evaluate_sample
from .quantiser import Codebook, QuantOutput, codebook_init, quantise, reseed_dead_codes, usage_counts
from .seeding import substream, subseed
from .synthdata import Corpus


@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 3
    skip_connections: bool = True
    vq_enabled: bool = True
    K: int = 8
    D: int = 32
    beta: float = 0.25
    groups: int = 4
    seed: int = 0
    unit_sphere: bool = False

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.levels - 1)

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("base_channels, in_channels must be >= 1 and num_classes >= 2")
        for lvl in range(self.levels):
            if self.channels(lvl) % self.groups:
                raise ConfigError(f"{self.channels(lvl)} channels at level {lvl} not divisible by groups={self.groups}")
        if self.vq_enabled:
            if self.D != self.bottleneck_channels:
                raise ConfigError(f"D={self.D} must equal the bottleneck channel count {self.bottleneck_channels}")
            if self.K < 2:
                raise ConfigError(f"K must be >= 2, got {self.K}")
            if self.beta < 0:
                raise ConfigError(f"beta must be non-negative, got {self.beta}")


# ---------------------------------------------------------------- layers
class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, gain: float = 1.0):
        std = gain * np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ResBlock(Module):
    """GN -> Swish -> conv, twice, plus identity or 1x1 shortcut."""

    def __init__(self, cin: int, cout: int, groups: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv2d(cout, cout, 3, rng, gain=0.5)
        self.shortcut = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ops.swish(self.norm1(x)))
        h = self.conv2(ops.swish(self.norm2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.add(skip, h)


@dataclass
class ForwardOutput:
    logits: Tensor
    latent_pre: Tensor
    latent_post: Tensor
    quant: QuantOutput | None = None


class SegNet(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = substream(config.seed, "weights")
        c = config.channels
        g = config.groups
        self.stem = Conv2d(config.in_channels, c(0), 3, rng)
        self.enc_blocks = [ResBlock(c(0), c(0), g, rng)]
        self.downs = []
        for lvl in range(1, config.levels):
            self.downs.append(Conv2d(c(lvl - 1), c(lvl), 3, rng, stride=2))
            self.enc_blocks.append(ResBlock(c(lvl), c(lvl), g, rng))
        self.ups = []
        self.dec_blocks = []
        for lvl in range(config.levels - 2, -1, -1):
            self.ups.append(Conv2d(c(lvl + 1), c(lvl), 3, rng))
            cin = 2 * c(lvl) if config.skip_connections else c(lvl)
            self.dec_blocks.append(ResBlock(cin, c(lvl), g, rng))
        self.head_norm = GroupNorm(c(0), g)
        self.head = Conv2d(c(0), config.num_classes, 1, rng)
        self.codebook: Codebook | None = None
        if config.vq_enabled:
            self.codebook = codebook_init(config.K, config.D, subseed(config.seed, "codebook"), config.unit_sphere)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from super().named_parameters(prefix)
        if self.codebook is not None:
            yield f"{prefix}codebook", self.codebook.vectors

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    # -- pieces of the forward pass ------------------------------------
    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"input must be [N,{cfg.in_channels},H,W], got {x.shape}")
        f = 2 ** (cfg.levels - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ConfigError(f"input spatial dims {x.shape[2:]} not divisible by 2^(levels-1) = {f}")

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Bottleneck embedding e and the per-scale skip outputs."""
        self.check_input(x)
        h = self.enc_blocks[0](self.stem(x))
        skips = []
        for down, block in zip(self.downs, self.enc_blocks[1:]):
            skips.append(h)
            h = block(down(h))
        return h, skips

    def decode(self, z: Tensor, skips: list[Tensor] | None = None) -> Tensor:
        use_skips = self.config.skip_connections
        if use_skips and (skips is None or len(skips) != len(self.ups)):
            raise DimensionError(f"decoder needs {len(self.ups)} skip tensors")
        h = z
        for i, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            h = up(ops.upsample2x(h))
            if use_skips:
                h = ops.concat([h, skips[-1 - i]], axis=1)
            h = block(h)
        return self.head(ops.swish(self.head_norm(h)))

    def __call__(self, x) -> ForwardOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        e, skips = self.encode(x)
        quant = None
        z = e
        if self.codebook is not None:
            quant = quantise(e, self.codebook, self.config.beta)
            z = quant.z_q
        return ForwardOutput(self.decode(z, skips), e, z, quant)

    forward = __call__


def build_model(config: ModelConfig) -> SegNet:
    return SegNet(config)


# ---------------------------------------------------------------- optimiser
@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    decoupled: bool = True


class Adam:
    """Adam with weight decay on convolution kernels only.

    ``decoupled`` shrinks weights directly (AdamW style); otherwise the decay
    is added to the gradient as an L2 term before the moment updates.
    """

    def __init__(self, params: dict[str, Tensor], config: AdamConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            decay = cfg.weight_decay if p.data.ndim == 4 else 0.0
            if decay and not cfg.decoupled:
                g = g + decay * p.data
            m, v = self.m[k], self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if decay and cfg.decoupled:
                update = update + cfg.lr * decay * p.data
            p.data = (p.data - update).astype(np.float32)


# ---------------------------------------------------------------- training
@dataclass
class EpochStats:
    loss: float
    dice_loss: float
    ce_loss: float
    codebook_loss: float
    commitment_loss: float
    codes_used: int
    usage: list = field(default_factory=list)
    reseeded: int = 0


def augment_batch(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator, max_shift: float = 0.1):
    """Random flips and integer translations of up to ``max_shift`` of the side length."""
    images = images.copy()
    masks = masks.copy()
    size = images.shape[-1]
    lim = int(round(max_shift * size))
    for i in range(len(images)):
        img, msk = images[i, 0], masks[i]
        if rng.random() < 0.5:
            img, msk = img[:, ::-1], msk[:, ::-1]
        if rng.random() < 0.5:
            img, msk = img[::-1], msk[::-1]
        dy, dx = rng.integers(-lim, lim + 1, size=2) if lim else (0, 0)
        if dy or dx:
            pad = ((lim, lim), (lim, lim))
            img = np.pad(img, pad, mode="edge")[lim - dy : lim - dy + size, lim - dx : lim - dx + size]
            msk = np.pad(msk, pad, constant_values=0)[lim - dy : lim - dy + size, lim - dx : lim - dx + size]
        images[i, 0] = img
        masks[i] = msk
    return images, masks


def compute_losses(model: SegNet, images: np.ndarray, masks: np.ndarray) -> dict[str, Tensor]:
    out = model(Tensor(images))
    dice_loss, ce_loss = dice_ce_loss(out.logits, masks)
    terms = {"dice_loss": dice_loss, "ce_loss": ce_loss}
    total = ops.add(dice_loss, ce_loss)
    if out.quant is not None:
        terms["codebook_loss"] = out.quant.codebook_loss
        terms["commitment_loss"] = out.quant.commitment_loss
        total = ops.add(ops.add(total, out.quant.codebook_loss), out.quant.commitment_loss)
    terms["loss"] = total
    terms["_indices"] = out.quant.indices if out.quant is not None else None
    terms["_latent"] = out.latent_pre
    return terms


def train_epoch(
    model: SegNet,
    corpus: Corpus,
    optimiser: Adam,
    rng: np.random.Generator,
    batch_size: int = 8,
    augment: bool = True,
    reseed_dead: bool = False,
) -> EpochStats:
    """One pass over ``corpus`` in a shuffled order drawn from ``rng``."""
    if len(corpus) == 0:
        raise ConfigError("training corpus is empty")
    order = rng.permutation(len(corpus))
    sums = {"loss": 0.0, "dice_loss": 0.0, "ce_loss": 0.0, "codebook_loss": 0.0, "commitment_loss": 0.0}
    K = model.config.K if model.codebook is not None else 0
    usage = np.zeros(K, dtype=np.int64)
    latents = []
    n_batches = 0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        images, masks = corpus.images[idx], corpus.masks[idx]
        if augment:
            images, masks = augment_batch(images, masks, rng)
        terms = compute_losses(model, images, masks)
        total = terms["loss"]
        if not np.isfinite(total.data).all():
            _diagnose_nan(model, images, masks)
        optimiser.zero_grad()
        backward(total, inputs=list(optimiser.params.values()))
        optimiser.step()
        parts = {k: float(terms[k].data) for k in sums if k != "loss" and k in terms}
        for k, v in parts.items():
            sums[k] += v
        # reported total is the float64 sum of the reported terms
        sums["loss"] += sum(parts.values())
        if K:
            usage += usage_counts(terms["_indices"], K)
            if reseed_dead:
                lat = terms["_latent"].data
                latents.append(lat.transpose(0, 2, 3, 1).reshape(-1, lat.shape[1]))
        n_batches += 1
    reseeded = 0
    if K and reseed_dead:
        reseeded = reseed_dead_codes(model.codebook, usage, np.concatenate(latents), rng)
    means = {k: v / n_batches for k, v in sums.items()}
    return EpochStats(
        means["loss"],
        means["dice_loss"],
        means["ce_loss"],
        means["codebook_loss"],
        means["commitment_loss"],
        int((usage > 0).sum()),
        usage.tolist(),
        reseeded,
    )


def _diagnose_nan(model: SegNet, images: np.ndarray, masks: np.ndarray):
    """Replay the batch with finiteness checks on and raise naming the first bad op."""
    try:
        with detect_anomaly(), no_grad():
            compute_losses(model, images, masks)
    except NumericalError as exc:
        raise NumericalError(f"NaN loss: first non-finite value from op '{exc.op}'", op=exc.op) from exc
    raise NumericalError("NaN loss: no op produced a non-finite value during replay", op=None)


# ---------------------------------------------------------------- inference
def predict_logits(model: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[s : s + batch_size])).logits.data)
    return np.concatenate(outs)


def predict(model: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    return predict_logits(model, images, batch_size).argmax(axis=1).astype(np.uint8)


def evaluate(model: SegNet, images: np.ndarray, masks: np.ndarray, spacing: float = 1.0, batch_size: int = 8):
    """Per-sample MetricReports and the mean of their mean Dice."""
    preds = predict(model, images, batch_size)
    reports = [
        evaluate_sample(preds[i], masks[i], model.config.num_classes, sample_id=i, spacing=spacing)
        for i in range(len(preds))
    ]
    return reports, float(np.mean([r.mean_dice for r in reports]))


def mean_dice(model: SegNet, images: np.ndarray, masks: np.ndarray, batch_size: int = 8) -> float:
    """Mean foreground Dice over samples (no surface distances)."""
    from .metrics import dice_score

    preds = predict(model, images, batch_size)
    vals = []
    C = model.config.num_classes
    for p, t in zip(preds, masks):
        d = dice_score(p, t, C)
        present = [c for c in range(1, C) if (t == c).any()]
        vals.append(float(np.mean(d[present])) if present else 1.0)
    return float(np.mean(vals))


def config_dict(config) -> dict:
    return asdict(config)


def config_from_dict(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


@dataclass
class EpochRecord:
    epoch: int
    stats: EpochStats
    val_dice: float | None
    seconds: float


def fit(
    model: SegNet,
    optimiser: Adam,
    train: Corpus,
    val: Corpus | None,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 8,
    augment: bool = True,
    reseed_dead: bool = False,
    eval_every: int = 5,
    target_dice: float | None = None,
    start_epoch: int = 0,
    callback=None,
) -> list[EpochRecord]:
    """Train until ``epochs`` or until validation Dice reaches ``target_dice``.

    Validation runs every ``eval_every`` epochs and after the final one.
    """
    import time

    history = []
    for ep in range(start_epoch, epochs):
        t0 = time.perf_counter()
        stats = train_epoch(model, train, optimiser, rng, batch_size, augment, reseed_dead)
        last = ep == epochs - 1
        vd = None
        if val is not None and (last or (eval_every > 0 and (ep + 1) % eval_every == 0)):
            vd = mean_dice(model, val.images, val.masks)
        rec = EpochRecord(ep + 1, stats, vd, time.perf_counter() - t0)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if target_dice is not None and vd is not None and vd >= target_dice:
            break
    return history
