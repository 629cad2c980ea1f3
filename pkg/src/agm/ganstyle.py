"""Grayscale normalization: an unpaired two-generator / two-discriminator
translation system that maps infrared images into the grayscale domain.

Generators are small residual encoder-decoders with a global skip
connection; with `identity_init` the final conv starts at zero, so an
untrained generator is exactly the identity map. Pixel values are
normalized to [-1, 1] inside this module and 8-bit at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, ModalityError, NumericError
from .imaging import Image, Modality
from .seeding import derive_seed

SCORE_FLOOR = 1e-7


@dataclass(frozen=True)
class GanConfig:
    """Weights, schedule and architecture knobs for grayscale normalization."""

    lambda1: float = 10.0
    lambda2: float = 5.0
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    base_channels_g: int = 16
    base_channels_d: int = 16
    residual_blocks: int = 3
    adv_mode: str = "log"
    identity_init: bool = True

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("cycle and identity weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.adv_mode not in ("log", "lsgan"):
            raise ConfigError(f"unknown adversarial mode {self.adv_mode!r}")


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResidualGenerator(nn.Module):
    """3-down / k-residual / 3-up encoder-decoder producing a correction
    that is added to the input (global skip)."""

    DOWN = 3

    def __init__(self, base: int = 16, residual_blocks: int = 3, identity_init: bool = True):
        super().__init__()
        c1, c2, c3, c4 = base, base * 2, base * 4, base * 8
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(3, c1, 7), nn.InstanceNorm2d(c1), nn.ReLU()
        )
        downs = []
        for cin, cout in ((c1, c2), (c2, c3), (c3, c4)):
            downs += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.InstanceNorm2d(cout), nn.ReLU()]
        self.down = nn.Sequential(*downs)
        self.res = nn.Sequential(*[_ResidualBlock(c4) for _ in range(residual_blocks)])
        ups = []
        for cin, cout in ((c4, c3), (c3, c2), (c2, c1)):
            ups += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.InstanceNorm2d(cout),
                nn.ReLU(),
            ]
        self.up = nn.Sequential(*ups)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c1, 3, 7))
        if identity_init:
            final = self.head[-1]
            nn.init.zeros_(final.weight)
            nn.init.zeros_(final.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        mult = 2**self.DOWN
        # Pad so the bottleneck is at least 2x2 (residual blocks reflect-pad
        # by one) and dimensions survive the down/up round trip exactly.
        target_h = max(h + (-h) % mult, 2 * mult)
        target_w = max(w + (-w) % mult, 2 * mult)
        y = x
        if (target_h, target_w) != (h, w):
            pad_h, pad_w = target_h - h, target_w - w
            mode = "replicate" if pad_h < h and pad_w < w else "constant"
            y = nn.functional.pad(y, (0, pad_w, 0, pad_h), mode=mode)
        y = self.head(self.up(self.res(self.down(self.stem(y)))))
        return x + y[..., :h, :w]


class PatchDiscriminator(nn.Module):
    """Patch-level realness scorer; outputs per-patch probabilities.

    The per-pixel channel spread (max - min) is appended as a fourth input
    channel: grayscale-domain images have it identically zero, which makes
    channel inequality a directly visible feature instead of one the
    discriminator must discover."""

    def __init__(self, base: int = 16):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 4
        self.net = nn.Sequential(
            nn.Conv2d(4, c1, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c2, c3, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c3),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c3, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spread = x.max(dim=1, keepdim=True).values - x.min(dim=1, keepdim=True).values
        return torch.sigmoid(self.net(torch.cat([x, spread], dim=1)))


@dataclass
class GanModel:
    """Two generators and two discriminators.

    `gen_gray_to_ir` maps the grayscale domain to infrared; `gen_ir_to_gray`
    is the normalization direction actually used downstream. `disc_gray`
    scores grayscale-domain images, `disc_ir` infrared-domain images.
    """

    gen_gray_to_ir: ResidualGenerator
    gen_ir_to_gray: ResidualGenerator
    disc_gray: PatchDiscriminator
    disc_ir: PatchDiscriminator
    arch: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: GanConfig) -> "GanModel":
        torch.manual_seed(derive_seed(cfg.seed, "gan-init"))
        arch = {
            "base_channels_g": cfg.base_channels_g,
            "base_channels_d": cfg.base_channels_d,
            "residual_blocks": cfg.residual_blocks,
            "identity_init": cfg.identity_init,
        }
        return cls(
            gen_gray_to_ir=ResidualGenerator(cfg.base_channels_g, cfg.residual_blocks, cfg.identity_init),
            gen_ir_to_gray=ResidualGenerator(cfg.base_channels_g, cfg.residual_blocks, cfg.identity_init),
            disc_gray=PatchDiscriminator(cfg.base_channels_d),
            disc_ir=PatchDiscriminator(cfg.base_channels_d),
            arch=arch,
        )

    def generator_parameters(self):
        yield from self.gen_gray_to_ir.parameters()
        yield from self.gen_ir_to_gray.parameters()

    def train(self, mode: bool = True) -> None:
        for m in (self.gen_gray_to_ir, self.gen_ir_to_gray, self.disc_gray, self.disc_ir):
            m.train(mode)

    def eval(self) -> None:
        self.train(False)


def normalize_batch(images: Sequence[Image] | np.ndarray) -> torch.Tensor:
    """Uint8 images to an N x 3 x H x W float tensor in [-1, 1]."""
    if isinstance(images, np.ndarray):
        arrays = images
    else:
        if len(images) == 0:
            raise DataError("empty image batch")
        arrays = np.stack([img.pixels for img in images])
    t = torch.from_numpy(np.ascontiguousarray(arrays)).float().permute(0, 3, 1, 2)
    return t / 127.5 - 1.0


def denormalize(batch: torch.Tensor) -> np.ndarray:
    """[-1, 1] tensors back to float arrays in [0, 255] (H x W x 3)."""
    arr = ((batch.detach().cpu() + 1.0) * 127.5).permute(0, 2, 3, 1).numpy()
    return np.clip(arr, 0.0, 255.0)


def _log_score(s: torch.Tensor) -> torch.Tensor:
    return torch.log(s.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR))


@dataclass
class AdversarialLosses:
    gen_gray_to_ir: torch.Tensor
    gen_ir_to_gray: torch.Tensor
    disc_gray: torch.Tensor
    disc_ir: torch.Tensor


def adversarial_losses(
    model: GanModel,
    batch_g: torch.Tensor,
    batch_t: torch.Tensor,
    mode: str = "log",
) -> AdversarialLosses:
    """Generator- and discriminator-side adversarial terms, mean-reduced.

    In the default log mode the discriminator loss for each domain is
    -E[log D(real)] - E[log(1 - D(fake))] with scores clamped away from
    {0, 1}; generators minimize -E[log D(fake)]. Fakes are detached for
    the discriminator terms. `lsgan` swaps in the least-squares form.
    """
    if batch_g.shape[0] == 0 or batch_t.shape[0] == 0:
        raise DataError("adversarial losses need non-empty batches for both domains")
    fake_ir = model.gen_gray_to_ir(batch_g)
    fake_gray = model.gen_ir_to_gray(batch_t)

    d_ir_real = model.disc_ir(batch_t)
    d_ir_fake = model.disc_ir(fake_ir.detach())
    d_gray_real = model.disc_gray(batch_g)
    d_gray_fake = model.disc_gray(fake_gray.detach())
    d_ir_fake_gen = model.disc_ir(fake_ir)
    d_gray_fake_gen = model.disc_gray(fake_gray)

    if mode == "log":
        gen_g2t = -_log_score(d_ir_fake_gen).mean()
        gen_t2g = -_log_score(d_gray_fake_gen).mean()
        disc_ir = -_log_score(d_ir_real).mean() - _log_score(1.0 - d_ir_fake).mean()
        disc_gray = -_log_score(d_gray_real).mean() - _log_score(1.0 - d_gray_fake).mean()
    elif mode == "lsgan":
        gen_g2t = (d_ir_fake_gen - 1.0).pow(2).mean()
        gen_t2g = (d_gray_fake_gen - 1.0).pow(2).mean()
        disc_ir = (d_ir_real - 1.0).pow(2).mean() + d_ir_fake.pow(2).mean()
        disc_gray = (d_gray_real - 1.0).pow(2).mean() + d_gray_fake.pow(2).mean()
    else:
        raise ConfigError(f"unknown adversarial mode {mode!r}")
    return AdversarialLosses(
        gen_gray_to_ir=gen_g2t,
        gen_ir_to_gray=gen_t2g,
        disc_gray=disc_gray,
        disc_ir=disc_ir,
    )


def cycle_consistency_loss(model: GanModel, batch_g: torch.Tensor, batch_t: torch.Tensor) -> torch.Tensor:
    """Mean L1 between cycle reconstructions and their source images."""
    if batch_g.shape[0] == 0 or batch_t.shape[0] == 0:
        raise DataError("cycle loss needs non-empty batches for both domains")
    rec_g = model.gen_ir_to_gray(model.gen_gray_to_ir(batch_g))
    rec_t = model.gen_gray_to_ir(model.gen_ir_to_gray(batch_t))
    if rec_g.shape != batch_g.shape or rec_t.shape != batch_t.shape:
        raise DataError("cycle reconstruction does not match the input shape")
    return (rec_g - batch_g).abs().mean() + (rec_t - batch_t).abs().mean()


def identity_mapping_loss(model: GanModel, batch_g: torch.Tensor, batch_t: torch.Tensor) -> torch.Tensor:
    """Mean L1 penalty pulling each generator toward the identity on its
    own target domain."""
    if batch_g.shape[0] == 0 or batch_t.shape[0] == 0:
        raise DataError("identity loss needs non-empty batches for both domains")
    same_t = model.gen_gray_to_ir(batch_t)
    same_g = model.gen_ir_to_gray(batch_g)
    if same_t.shape != batch_t.shape or same_g.shape != batch_g.shape:
        raise DataError("identity output does not match the input shape")
    return (same_t - batch_t).abs().mean() + (same_g - batch_g).abs().mean()


@dataclass
class GanLossBundle:
    adv_gray_to_ir: float
    adv_ir_to_gray: float
    disc_gray: float
    disc_ir: float
    cycle: float
    identity: float
    total: float

    def to_record(self) -> dict:
        return dict(self.__dict__)


def total_gan_objective(
    model: GanModel,
    batch_g: torch.Tensor,
    batch_t: torch.Tensor,
    cfg: GanConfig,
) -> tuple[torch.Tensor, GanLossBundle]:
    """Generator objective: adversarial terms + l1*cycle + l2*identity.

    Returns the differentiable total alongside a bundle reporting every
    term (including the discriminator terms, which are not part of the
    generator total).
    """
    adv = adversarial_losses(model, batch_g, batch_t, mode=cfg.adv_mode)
    cyc = cycle_consistency_loss(model, batch_g, batch_t)
    idt = identity_mapping_loss(model, batch_g, batch_t)
    total = adv.gen_gray_to_ir + adv.gen_ir_to_gray + cfg.lambda1 * cyc + cfg.lambda2 * idt
    bundle = GanLossBundle(
        adv_gray_to_ir=float(adv.gen_gray_to_ir.detach()),
        adv_ir_to_gray=float(adv.gen_ir_to_gray.detach()),
        disc_gray=float(adv.disc_gray.detach()),
        disc_ir=float(adv.disc_ir.detach()),
        cycle=float(cyc.detach()),
        identity=float(idt.detach()),
        total=float(total.detach()),
    )
    return total, bundle


def _check_finite(history_entry: dict) -> None:
    for name, value in history_entry.items():
        if isinstance(value, float) and not math.isfinite(value):
            raise NumericError(f"GAN loss {name} diverged to {value}")


def train_gn(
    dataset_g: Sequence[Image] | np.ndarray,
    dataset_t: Sequence[Image] | np.ndarray,
    cfg: GanConfig,
) -> tuple[GanModel, list[dict]]:
    """Alternating adversarial training of the normalization model.

    Per step the discriminators are updated first (generators frozen via
    detached fakes), then the generators. Deterministic for a fixed seed
    on one machine. Returns the trained model and per-epoch mean losses.
    """
    if len(dataset_g) == 0 or len(dataset_t) == 0:
        raise DataError("both training domains must be non-empty")
    model = GanModel.create(cfg)
    tensors_g = normalize_batch(dataset_g)
    tensors_t = normalize_batch(dataset_t)

    opt_gen = torch.optim.Adam(model.generator_parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    opt_disc_gray = torch.optim.Adam(model.disc_gray.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    opt_disc_ir = torch.optim.Adam(model.disc_ir.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))

    rng = np.random.default_rng(derive_seed(cfg.seed, "gan-batches"))
    torch.manual_seed(derive_seed(cfg.seed, "gan-train"))
    n_g, n_t = len(tensors_g), len(tensors_t)
    steps = max(1, int(np.ceil(max(n_g, n_t) / cfg.batch_size)))

    history: list[dict] = []
    model.train()
    for _epoch in range(cfg.epochs):
        perm_g = rng.permutation(n_g)
        perm_t = rng.permutation(n_t)
        sums: dict[str, float] = {}
        for step in range(steps):
            idx_g = perm_g[(step * cfg.batch_size + np.arange(cfg.batch_size)) % n_g]
            idx_t = perm_t[(step * cfg.batch_size + np.arange(cfg.batch_size)) % n_t]
            bundle = _train_step(
                model, tensors_g[idx_g], tensors_t[idx_t], cfg, opt_gen, opt_disc_gray, opt_disc_ir
            )
            _check_finite(bundle.to_record())
            for name, value in bundle.to_record().items():
                sums[name] = sums.get(name, 0.0) + value
        history.append({name: value / steps for name, value in sums.items()})
        _check_finite(history[-1])
    model.eval()
    return model, history


def _train_step(
    model: GanModel,
    batch_g: torch.Tensor,
    batch_t: torch.Tensor,
    cfg: GanConfig,
    opt_gen,
    opt_disc_gray,
    opt_disc_ir,
) -> GanLossBundle:
    """One alternating update. Fakes are computed once; the discriminator
    phase sees them detached, the generator phase reuses them against the
    freshly updated discriminators. Loss values match the standalone ops
    (covered by a unit test)."""
    fake_ir = model.gen_gray_to_ir(batch_g)
    fake_gray = model.gen_ir_to_gray(batch_t)

    if cfg.adv_mode == "log":
        disc_ir = (
            -_log_score(model.disc_ir(batch_t)).mean()
            - _log_score(1.0 - model.disc_ir(fake_ir.detach())).mean()
        )
        disc_gray = (
            -_log_score(model.disc_gray(batch_g)).mean()
            - _log_score(1.0 - model.disc_gray(fake_gray.detach())).mean()
        )
    else:
        disc_ir = (model.disc_ir(batch_t) - 1.0).pow(2).mean() + model.disc_ir(
            fake_ir.detach()
        ).pow(2).mean()
        disc_gray = (model.disc_gray(batch_g) - 1.0).pow(2).mean() + model.disc_gray(
            fake_gray.detach()
        ).pow(2).mean()
    opt_disc_ir.zero_grad()
    disc_ir.backward()
    opt_disc_ir.step()
    opt_disc_gray.zero_grad()
    disc_gray.backward()
    opt_disc_gray.step()

    if cfg.adv_mode == "log":
        gen_g2t = -_log_score(model.disc_ir(fake_ir)).mean()
        gen_t2g = -_log_score(model.disc_gray(fake_gray)).mean()
    else:
        gen_g2t = (model.disc_ir(fake_ir) - 1.0).pow(2).mean()
        gen_t2g = (model.disc_gray(fake_gray) - 1.0).pow(2).mean()
    rec_g = model.gen_ir_to_gray(fake_ir)
    rec_t = model.gen_gray_to_ir(fake_gray)
    cyc = (rec_g - batch_g).abs().mean() + (rec_t - batch_t).abs().mean()
    idt = (model.gen_gray_to_ir(batch_t) - batch_t).abs().mean() + (
        model.gen_ir_to_gray(batch_g) - batch_g
    ).abs().mean()
    total = gen_g2t + gen_t2g + cfg.lambda1 * cyc + cfg.lambda2 * idt
    opt_gen.zero_grad()
    total.backward()
    opt_gen.step()

    return GanLossBundle(
        adv_gray_to_ir=float(gen_g2t.detach()),
        adv_ir_to_gray=float(gen_t2g.detach()),
        disc_gray=float(disc_gray.detach()),
        disc_ir=float(disc_ir.detach()),
        cycle=float(cyc.detach()),
        identity=float(idt.detach()),
        total=float(total.detach()),
    )


def translate_raw(model: GanModel, batch: np.ndarray | torch.Tensor) -> np.ndarray:
    """Raw infrared-to-gray generator output, de-normalized to [0, 255].

    No grayscale projection is applied; use this to measure how closely the
    generator has learned to equalize channels.
    """
    if not torch.is_tensor(batch):
        batch = normalize_batch(batch)
    model.eval()
    with torch.no_grad():
        out = model.gen_ir_to_gray(batch)
    return denormalize(out)


def apply_gn(model: GanModel, images: Sequence[Image]) -> list[Image]:
    """Translate infrared images into the grayscale domain.

    Output images are tagged grayscale, so the generator output is
    projected onto exact channel equality by averaging the three channels.
    Batch order and spatial dimensions are preserved.
    """
    for img in images:
        if img.modality != Modality.INFRARED:
            raise ModalityError(
                f"grayscale normalization expects infrared input, got {img.modality.value}"
            )
    if not images:
        return []
    raw = translate_raw(model, normalize_batch(images))
    out = []
    for img, arr in zip(images, raw):
        g = np.clip(np.floor(arr.mean(axis=2) + 0.5), 0, 255).astype(np.uint8)
        out.append(
            Image(
                pixels=np.repeat(g[:, :, None], 3, axis=2),
                modality=Modality.GRAYSCALE,
                identity=img.identity,
                camera=img.camera,
            )
        )
    return out


def save_gan(model: GanModel, path: str | Path, cfg: GanConfig) -> None:
    """Versioned checkpoint: header (format version, architecture, seed)
    plus named parameter blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": 1,
        "kind": "agm-gan",
        "arch": dict(model.arch),
        "seed": cfg.seed,
        "state": {
            "gen_gray_to_ir": model.gen_gray_to_ir.state_dict(),
            "gen_ir_to_gray": model.gen_ir_to_gray.state_dict(),
            "disc_gray": model.disc_gray.state_dict(),
            "disc_ir": model.disc_ir.state_dict(),
        },
    }
    torch.save(payload, path)


def load_gan(path: str | Path) -> GanModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"GAN checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "agm-gan" or payload.get("format_version") != 1:
        raise DataError(f"not a recognisable GAN checkpoint: {path}")
    arch = payload["arch"]
    model = GanModel(
        gen_gray_to_ir=ResidualGenerator(
            arch["base_channels_g"], arch["residual_blocks"], arch["identity_init"]
        ),
        gen_ir_to_gray=ResidualGenerator(
            arch["base_channels_g"], arch["residual_blocks"], arch["identity_init"]
        ),
        disc_gray=PatchDiscriminator(arch["base_channels_d"]),
        disc_ir=PatchDiscriminator(arch["base_channels_d"]),
        arch=dict(arch),
    )
    model.gen_gray_to_ir.load_state_dict(payload["state"]["gen_gray_to_ir"])
    model.gen_ir_to_gray.load_state_dict(payload["state"]["gen_ir_to_gray"])
    model.disc_gray.load_state_dict(payload["state"]["disc_gray"])
    model.disc_ir.load_state_dict(payload["state"]["disc_ir"])
    model.eval()
    return model
