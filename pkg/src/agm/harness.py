"""End-to-end orchestration: preprocessing regimes, the training loop,
the piecewise learning-rate schedule, checkpointing and evaluation.

One logical training thread owns parameters and optimizer state. All
randomness flows through seeds derived from the run seed, so two runs with
the same seed produce identical logs and metrics on one machine.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import ganstyle, losses, metrics
from .backbone import (
    BranchConfig,
    BranchNet,
    EmbeddingBatch,
    GemPooler,
    fuse_concat,
    images_to_tensor,
)
from .datapipe import DatasetIndex, Record, pk_sample
from .errors import ConfigError, DataError
from .imaging import (
    AugmentPolicy,
    Image,
    Modality,
    augment,
    crop_head_shoulder,
    resize,
    save_image,
    to_grayscale,
)
from .losses import ClassifierHead, LossConfig
from .seeding import derive_seed

log = logging.getLogger(__name__)

PREPROCESS_MODES = ("rgb-ir", "rgb-ir+gn", "gray-ir", "gray-ir+gn")


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe: schedule, optimizer, batching and model size."""

    total_epochs: int = 80
    lr_start: float = 0.01
    lr_peak: float = 0.1
    warmup_epochs: int = 10
    peak_until: int = 20
    mid_lr: float = 0.01
    mid_until: int = 50
    final_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    pk_p: int = 16
    pk_k: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    global_hw: tuple[int, int] = (288, 144)
    hs_hw: tuple[int, int] = (128, 144)
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    norm: str = "batch"
    activation: str = "relu"
    use_hs: bool = True
    include_joint_losses: bool = True
    freeze_hs: bool = False
    update_mode: str = "combined"
    gem_p: float = 3.0
    gem_eps: float = 1e-6
    crop_padding: int = 10
    erase_probability: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.2)
    erase_aspect_range: tuple[float, float] = (0.3, 3.3)
    gan_ckpt: str | None = None
    seed: int = 0
    profile: str = "sysu"

    def __post_init__(self) -> None:
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be positive")
        if not 0 < self.warmup_epochs <= self.peak_until <= self.mid_until <= self.total_epochs:
            raise ConfigError("schedule anchors must be ordered within the epoch range")
        for name in ("lr_start", "lr_peak", "mid_lr", "final_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.pk_p * self.pk_k != self.batch_size:
            raise ConfigError(
                f"P*K must equal batch_size: {self.pk_p}*{self.pk_k} != {self.batch_size}"
            )
        if self.update_mode not in ("combined", "sequential"):
            raise ConfigError(f"unknown update mode {self.update_mode!r}")
        if self.profile not in ("sysu", "regdb"):
            raise ConfigError(f"unknown dataset profile {self.profile!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-everything profile for CPU-scale experiments and CI."""
        base = dict(
            total_epochs=20,
            warmup_epochs=5,
            peak_until=10,
            mid_until=15,
            batch_size=32,
            pk_p=8,
            pk_k=4,
            global_hw=(72, 36),
            hs_hw=(32, 36),
            stage_channels=(12, 24, 48, 96),
            crop_padding=4,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {})
        d["loss"] = LossConfig(**loss) if isinstance(loss, dict) else loss
        for key in ("global_hw", "hs_hw", "stage_channels", "erase_area_range", "erase_aspect_range"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise schedule: linear warmup, plateau, then two fixed drops."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / cfg.warmup_epochs
    if epoch < cfg.peak_until:
        return cfg.lr_peak
    if epoch < cfg.mid_until:
        return cfg.mid_lr
    return cfg.final_lr


def modality_gap_statistic(index: DatasetIndex) -> float:
    """Absolute difference between the modalities' mean per-pixel channel
    spread (max - min over channels)."""
    spreads: dict[Modality, list[float]] = {Modality.VISIBLE: [], Modality.INFRARED: []}
    for record in index.records:
        px = index.load(record).pixels.astype(np.float64)
        spread = float((px.max(axis=2) - px.min(axis=2)).mean())
        spreads[record.modality].append(spread)
    for modality, values in spreads.items():
        if not values:
            raise DataError(f"index has no {modality.value} records")
    vis = float(np.mean(spreads[Modality.VISIBLE]))
    ir = float(np.mean(spreads[Modality.INFRARED]))
    return abs(vis - ir)


def preprocess_agm(
    index: DatasetIndex,
    mode: str,
    out_dir: str | Path | None = None,
    gan_ckpt: str | Path | ganstyle.GanModel | None = None,
    batch_size: int = 16,
) -> DatasetIndex:
    """Route images through the image-space alignment for one regime.

    Modes: rgb-ir (pass-through), rgb-ir+gn, gray-ir, gray-ir+gn ("agm").
    Records keep their source modality tag so retrieval splits and the
    modality-gap statistic stay meaningful after alignment.
    """
    mode = mode.lower()
    if mode == "agm":
        mode = "gray-ir+gn"
    if mode not in PREPROCESS_MODES:
        raise ConfigError(f"unknown preprocess mode {mode!r}; choose from {PREPROCESS_MODES}")
    gray = mode.startswith("gray")
    gn = mode.endswith("+gn")
    if mode == "rgb-ir":
        return index
    if out_dir is None:
        raise ConfigError(f"mode {mode!r} writes transformed images and needs an output directory")
    out_dir = Path(out_dir)

    model: ganstyle.GanModel | None = None
    if gn:
        if gan_ckpt is None:
            raise ConfigError(f"mode {mode!r} needs a trained grayscale-normalization checkpoint")
        model = gan_ckpt if isinstance(gan_ckpt, ganstyle.GanModel) else ganstyle.load_gan(gan_ckpt)

    transformed: dict[Record, Record] = {}
    ir_batch: list[tuple[Record, Image]] = []

    def flush_ir() -> None:
        if not ir_batch:
            return
        translated = ganstyle.apply_gn(model, [img for _, img in ir_batch])
        for (record, _), out in zip(ir_batch, translated):
            path = _transformed_path(out_dir, record)
            save_image(out, path)
            transformed[record] = replace(record, path=path)
        ir_batch.clear()

    for record in index.records:
        img = index.load(record)
        if record.modality == Modality.VISIBLE and gray:
            out = to_grayscale(img)
            path = _transformed_path(out_dir, record)
            save_image(out, path)
            transformed[record] = replace(record, path=path)
        elif record.modality == Modality.INFRARED and gn:
            ir_batch.append((record, img))
            if len(ir_batch) >= batch_size:
                flush_ir()
    flush_ir()

    return DatasetIndex(records=[transformed.get(r, r) for r in index.records])


def _transformed_path(out_dir: Path, record: Record) -> Path:
    return out_dir / record.modality.value / f"{record.identity:04d}" / record.path.name


class AgmNet:
    """The two-branch model plus classifier heads, assembled from config."""

    def __init__(self, cfg: TrainConfig, num_classes: int):
        if num_classes < 2:
            raise ConfigError("training needs at least two identity classes")
        self.cfg = cfg
        self.num_classes = num_classes
        gen_g = torch.Generator().manual_seed(derive_seed(cfg.seed, "net", "global"))
        self.net_g = BranchNet(self._branch_cfg(cfg.global_hw), "global", gen_g)
        self.gem_g = GemPooler(cfg.gem_p, eps=cfg.gem_eps)
        dim = self.net_g.out_channels
        head_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "head", "global"))
        self.head_g = ClassifierHead(dim, num_classes, head_gen)
        if cfg.use_hs:
            gen_h = torch.Generator().manual_seed(derive_seed(cfg.seed, "net", "hs"))
            self.net_h = BranchNet(self._branch_cfg(cfg.hs_hw), "head_shoulder", gen_h)
            self.gem_h = GemPooler(cfg.gem_p, eps=cfg.gem_eps)
            head_gen_h = torch.Generator().manual_seed(derive_seed(cfg.seed, "head", "hs"))
            self.head_h = ClassifierHead(dim, num_classes, head_gen_h)
            head_gen_j = torch.Generator().manual_seed(derive_seed(cfg.seed, "head", "joint"))
            self.head_joint = ClassifierHead(2 * dim, num_classes, head_gen_j)
        else:
            self.net_h = self.gem_h = self.head_h = self.head_joint = None

    def _branch_cfg(self, hw: tuple[int, int]) -> BranchConfig:
        return BranchConfig(
            input_hw=hw,
            stage_channels=self.cfg.stage_channels,
            norm=self.cfg.norm,
            activation=self.cfg.activation,
        )

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"net_g": self.net_g, "gem_g": self.gem_g, "head_g": self.head_g}
        if self.cfg.use_hs:
            mods.update(
                net_h=self.net_h, gem_h=self.gem_h, head_h=self.head_h, head_joint=self.head_joint
            )
        return mods

    def global_branch_parameters(self):
        yield from self.net_g.parameters()
        yield from self.gem_g.parameters()

    def hs_branch_parameters(self):
        if self.cfg.use_hs:
            yield from self.net_h.parameters()
            yield from self.gem_h.parameters()

    def parameters(self):
        for module in self.modules().values():
            yield from module.parameters()

    def train(self, mode: bool = True) -> None:
        for module in self.modules().values():
            module.train(mode)

    def eval(self) -> None:
        self.train(False)

    def forward_batch(
        self, x_g: torch.Tensor, x_h: torch.Tensor | None, labels: torch.Tensor
    ) -> dict[str, EmbeddingBatch]:
        emb = {
            "global": EmbeddingBatch(self.gem_g(self.net_g(x_g)), labels, branch="global")
        }
        if self.cfg.use_hs:
            emb["hs"] = EmbeddingBatch(self.gem_h(self.net_h(x_h)), labels, branch="head_shoulder")
            emb["joint"] = fuse_concat(emb["global"], emb["hs"])
        return emb


@dataclass
class Checkpoint:
    """Versioned container for everything needed to resume or evaluate."""

    config: TrainConfig
    num_classes: int
    epoch: int
    state: dict
    optimizer_state: dict | None = None
    seed: int = 0

    FORMAT_VERSION = 1

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": self.FORMAT_VERSION,
                "kind": "agm-train",
                "config": self.config.to_dict(),
                "config_hash": config_hash(self.config),
                "num_classes": self.num_classes,
                "epoch": self.epoch,
                "seed": self.seed,
                "state": self.state,
                "optimizer_state": self.optimizer_state,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("kind") != "agm-train" or payload.get("format_version") != cls.FORMAT_VERSION:
            raise DataError(f"not a recognisable training checkpoint: {path}")
        return cls(
            config=TrainConfig.from_dict(payload["config"]),
            num_classes=payload["num_classes"],
            epoch=payload["epoch"],
            state=payload["state"],
            optimizer_state=payload.get("optimizer_state"),
            seed=payload.get("seed", 0),
        )

    def build_model(self) -> AgmNet:
        model = AgmNet(self.config, self.num_classes)
        for name, module in model.modules().items():
            module.load_state_dict(self.state[name])
        model.eval()
        return model


def _snapshot(model: AgmNet) -> dict:
    return {name: {k: v.clone() for k, v in module.state_dict().items()} for name, module in model.modules().items()}


def _augment_policy(cfg: TrainConfig, epoch: int, record_idx: int, branch: str) -> AugmentPolicy:
    return AugmentPolicy(
        crop_padding=cfg.crop_padding,
        erase_probability=cfg.erase_probability,
        erase_area_range=cfg.erase_area_range,
        erase_aspect_range=cfg.erase_aspect_range,
        seed=derive_seed(cfg.seed, "aug", epoch, record_idx, branch),
    )


def _prepare_pair(img: Image, cfg: TrainConfig) -> tuple[Image, Image | None]:
    """Global input plus the derived head-shoulder input (pre-augmentation)."""
    g = resize(img, *cfg.global_hw)
    if not cfg.use_hs:
        return g, None
    hs = resize(crop_head_shoulder(g), *cfg.hs_hw)
    return g, hs


class _ImageCache:
    """Decoded-image cache; the index is immutable once training starts."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._store: dict[Path, Image] = {}

    def get(self, record: Record) -> Image:
        img = self._store.get(record.path)
        if img is None:
            img = self.index.load(record)
            self._store[record.path] = img
        return img


def train(
    index: DatasetIndex,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log_hook: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Run the full training loop and return the final checkpoint.

    Per batch: derive head-shoulder crops, forward both branches, fuse,
    compute every objective term, one combined backward pass and an SGD
    step at the scheduled rate. Writes per-epoch checkpoints and a
    JSON-lines loss log when an output directory is given.
    """
    index.validate_training()
    torch.manual_seed(derive_seed(cfg.seed, "train"))
    model = AgmNet(cfg, num_classes=index.num_classes)
    model.train()
    if cfg.freeze_hs:
        for p in model.hs_branch_parameters():
            p.requires_grad_(False)

    if cfg.update_mode == "combined":
        optimizers = {
            "all": torch.optim.SGD(
                [p for p in model.parameters() if p.requires_grad],
                lr=cfg.lr_start,
                momentum=cfg.momentum,
                weight_decay=cfg.weight_decay,
            )
        }
    else:
        optimizers = _sequential_optimizers(model, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")

    cache = _ImageCache(index)
    record_pos = {record: i for i, record in enumerate(index.records)}
    step = 0
    try:
        for epoch in range(cfg.total_epochs):
            lr = lr_at(epoch, cfg)
            for opt in optimizers.values():
                for group in opt.param_groups:
                    group["lr"] = lr
            batches = pk_sample(index, cfg.pk_p, cfg.pk_k, derive_seed(cfg.seed, "sampler", epoch))
            for batch in batches:
                bundle = _train_step(model, cfg, cache, record_pos, batch, epoch, optimizers)
                record = bundle.to_record(step, epoch)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                if log_hook is not None:
                    log_hook(record)
                step += 1
            if out_dir is not None:
                _make_checkpoint(model, cfg, index.num_classes, epoch + 1, optimizers).save(
                    out_dir / "last.pt"
                )
    finally:
        if log_file is not None:
            log_file.close()

    model.eval()
    return _make_checkpoint(model, cfg, index.num_classes, cfg.total_epochs, optimizers)


def _sequential_optimizers(model: AgmNet, cfg: TrainConfig) -> dict:
    def sgd(params):
        params = [p for p in params if p.requires_grad]
        return torch.optim.SGD(params, lr=cfg.lr_start, momentum=cfg.momentum, weight_decay=cfg.weight_decay) if params else None

    opts = {
        "global": sgd(model.global_branch_parameters()),
        "hs": sgd(model.hs_branch_parameters()),
        "all": sgd(model.parameters()),
    }
    return {k: v for k, v in opts.items() if v is not None}


def _make_checkpoint(model: AgmNet, cfg: TrainConfig, num_classes: int, epoch: int, optimizers) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        num_classes=num_classes,
        epoch=epoch,
        state=_snapshot(model),
        optimizer_state={k: o.state_dict() for k, o in optimizers.items()},
        seed=cfg.seed,
    )


def _train_step(
    model: AgmNet,
    cfg: TrainConfig,
    cache: _ImageCache,
    record_pos: dict[Record, int],
    batch: list[Record],
    epoch: int,
    optimizers: dict,
) -> losses.LossBundle:
    globals_, heads = [], []
    labels = []
    for record in batch:
        img = cache.get(record)
        g, hs = _prepare_pair(img, cfg)
        pos = record_pos[record]
        g = augment(g, _augment_policy(cfg, epoch, pos, "global"))
        globals_.append(g)
        if hs is not None:
            heads.append(augment(hs, _augment_policy(cfg, epoch, pos, "hs")))
        labels.append(cache.index.label_for(record))

    x_g = images_to_tensor(globals_)
    x_h = images_to_tensor(heads) if heads else None
    label_t = torch.as_tensor(labels, dtype=torch.int64)

    emb = model.forward_batch(x_g, x_h, label_t)
    bundle = compute_objective(model, emb, label_t, cfg)

    if cfg.update_mode == "combined":
        opt = optimizers["all"]
        opt.zero_grad()
        bundle.total.backward()
        opt.step()
    else:
        _sequential_update(model, cfg, emb, label_t, bundle, optimizers)
    return bundle


def compute_objective(
    model: AgmNet, emb: dict[str, EmbeddingBatch], labels: torch.Tensor, cfg: TrainConfig
) -> losses.LossBundle:
    """All terms of the training objective for one forward pass."""
    lc = cfg.loss
    t_g = losses.hard_triplet(emb["global"], lc.margin)
    p_g = losses.posterior(model.head_g, emb["global"])
    if not cfg.use_hs:
        id_g = losses.identity_ce(p_g, labels)
        return losses.total_loss(id_g, 0.0, 0.0, t_g, 0.0, 0.0)

    t_h = losses.hard_triplet(emb["hs"], lc.margin)
    p_h = losses.posterior(model.head_h, emb["hs"])
    p_joint = losses.posterior(model.head_joint, emb["joint"])
    kl_g = losses.kl_feedback(p_joint, p_g)
    kl_h = losses.kl_feedback(p_joint, p_h)
    id_g, id_h = losses.regularized_branch_losses(p_g, p_h, p_joint, labels, lc)
    if cfg.include_joint_losses:
        t_joint = losses.hard_triplet(emb["joint"], lc.margin)
        id_joint = losses.joint_hybrid_loss(p_joint, labels, lc)
    else:
        t_joint = torch.zeros(())
        id_joint = torch.zeros(())
    return losses.total_loss(id_g, id_h, id_joint, t_g, t_h, t_joint, kl_g=kl_g, kl_h=kl_h)


def _sequential_update(model, cfg, emb, labels, bundle, optimizers) -> None:
    """Sequential updates in the branch-triplet, branch-triplet, remainder
    order. All gradients come from the single forward pass (parameters are
    stepped afterwards, so every gradient is taken at the same iterate)."""
    updates = []
    g_params = [p for p in model.global_branch_parameters() if p.requires_grad]
    grads = torch.autograd.grad(bundle.t_g, g_params, retain_graph=True, allow_unused=True)
    updates.append(("global", g_params, grads))
    if "hs" in optimizers:
        h_params = [p for p in model.hs_branch_parameters() if p.requires_grad]
        grads = torch.autograd.grad(bundle.t_h, h_params, retain_graph=True, allow_unused=True)
        updates.append(("hs", h_params, grads))
    rest = bundle.id_g + bundle.id_h + bundle.id_joint + bundle.t_joint
    all_params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(rest, all_params, allow_unused=True)
    updates.append(("all", all_params, grads))

    for name, params, grads in updates:
        opt = optimizers[name]
        opt.zero_grad()
        for p, g in zip(params, grads):
            p.grad = torch.zeros_like(p) if g is None else g.clone()
        opt.step()
        opt.zero_grad()


def extract_embeddings(
    model: AgmNet, index: DatasetIndex, batch_size: int = 64
) -> EmbeddingBatch:
    """Joint (or global, for single-branch models) eval-mode embeddings.

    Labels are the original dataset identities, so query/gallery relevance
    works across independently loaded indexes.
    """
    model.eval()
    cfg = model.cfg
    vec_chunks = []
    labels = []
    records = index.records
    cache = _ImageCache(index)
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            pairs = [_prepare_pair(cache.get(r), cfg) for r in chunk]
            x_g = images_to_tensor([g for g, _ in pairs])
            chunk_labels = torch.as_tensor([r.identity for r in chunk], dtype=torch.int64)
            if cfg.use_hs:
                x_h = images_to_tensor([h for _, h in pairs])
                emb = model.forward_batch(x_g, x_h, chunk_labels)["joint"]
            else:
                emb = model.forward_batch(x_g, None, chunk_labels)["global"]
            vec_chunks.append(emb.vectors)
            labels.append(chunk_labels)
    return EmbeddingBatch(
        vectors=torch.cat(vec_chunks),
        labels=torch.cat(labels),
        branch="joint" if cfg.use_hs else "global",
    )


def evaluate(
    ckpt: Checkpoint | str | Path,
    query_index: DatasetIndex,
    gallery_index: DatasetIndex,
    exclusion: Callable[[Record, Record], bool] | None = None,
    out_path: str | Path | None = None,
) -> dict:
    """Retrieve gallery items for every query and report CMC/mAP/mINP.

    `exclusion` is an optional per-pair hook (query record, gallery record)
    -> bool; True drops the pair (e.g. same-camera filtering).
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    model = ckpt.build_model()
    q_emb = extract_embeddings(model, query_index)
    g_emb = extract_embeddings(model, gallery_index)
    mask = None
    if exclusion is not None:
        mask = np.array(
            [[exclusion(q, g) for g in gallery_index.records] for q in query_index.records],
            dtype=bool,
        )
    ranking = metrics.rank(q_emb, g_emb, mask)
    payload = metrics.summarize(ranking)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload
