"""Dataset index, identity-balanced PK batch sampling, and a deterministic
synthetic two-modality dataset for desk-scale experiments.

Synthetic identities are procedural stick figures with identity-keyed
colors and proportions. Visible copies are full color with small pose
jitter. Infrared copies render the same geometry with a thermal palette
(body warm, background cold), a slight sensor tint and a per-image
luminance multiplier, so the modality gap and the luminance gap are both
present and measurable, and raw pixel values are decorrelated across
modalities while the identity geometry is shared.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .imaging import Image, Modality, load_image, save_image
from .seeding import rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Record:
    path: Path
    identity: int
    modality: Modality
    camera: int | None = None


@dataclass
class DatasetIndex:
    """All records of a dataset plus the contiguous label mapping.

    `identity` on a record is the original dataset id; classifier labels
    are remapped to [0, num_classes) stably by sorted original id.
    """

    records: list[Record]
    id_to_label: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.records:
            raise DataError("dataset index has no records")
        if not self.id_to_label:
            ids = sorted({r.identity for r in self.records})
            self.id_to_label = {orig: i for i, orig in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.id_to_label)

    @property
    def identities(self) -> list[int]:
        return sorted(self.id_to_label)

    def label_for(self, record: Record) -> int:
        return self.id_to_label[record.identity]

    def by_modality(self, modality: Modality) -> list[Record]:
        return [r for r in self.records if r.modality == modality]

    def select(
        self,
        identities: Sequence[int] | None = None,
        modality: Modality | None = None,
    ) -> "DatasetIndex":
        """Sub-index by identity and/or modality, labels remapped afresh."""
        keep = set(identities) if identities is not None else None
        records = [
            r
            for r in self.records
            if (keep is None or r.identity in keep)
            and (modality is None or r.modality == modality)
        ]
        if not records:
            raise DataError("selection produced an empty index")
        return DatasetIndex(records=records)

    def load(self, record: Record) -> Image:
        return load_image(record.path, record.modality, record.identity, record.camera)

    def validate_training(self) -> None:
        """Training splits need every identity in both modalities."""
        per_id: dict[int, set[Modality]] = {}
        for r in self.records:
            per_id.setdefault(r.identity, set()).add(r.modality)
        lonely = sorted(i for i, mods in per_id.items() if len(mods) < 2)
        if lonely:
            raise DataError(
                "identities present in only one modality: "
                + ", ".join(str(i) for i in lonely)
            )


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic two-modality generator."""

    num_identities: int = 20
    images_per_identity_per_modality: int = 10
    height: int = 72
    width: int = 36
    luminance_jitter_range: tuple[float, float] = (0.6, 1.3)
    modality_color_shift: tuple[float, float, float] = (1.08, 1.0, 0.9)
    pose_jitter: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_identities < 2 or self.images_per_identity_per_modality < 2:
            raise ConfigError("need at least 2 identities and 2 images per modality")
        if self.height < 12 or self.width < 8:
            raise ConfigError("synthetic images must be at least 12 x 8")
        lo, hi = self.luminance_jitter_range
        if lo <= 0 or lo > hi:
            raise ConfigError("luminance jitter range must be positive and ordered")
        if min(self.modality_color_shift) <= 0:
            raise ConfigError("modality color shift multipliers must be positive")


def _identity_figure(cfg: SynthConfig, identity: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one identity's base figure in both domains.

    Returns (visible, thermal): the same identity-keyed geometry drawn with
    a full-color palette and with a thermal palette (warm body on a cold
    background), so the two modalities share structure but not raw pixel
    statistics.
    """
    rng = rng_for(cfg.seed, "figure", identity)
    h, w = cfg.height, cfg.width
    vis = np.zeros((h, w, 3), dtype=np.float64)
    thermal = np.zeros((h, w, 3), dtype=np.float64)
    vis[:] = rng.uniform(25, 75, size=3)  # background
    thermal[:] = rng.uniform(8, 28)  # cold background

    def block(y0, y1, x0, x1, color, heat):
        ys, ye = int(y0 * h), int(y1 * h)
        xs, xe = int(x0 * w), int(x1 * w)
        vis[ys:ye, xs:xe] = color
        thermal[ys:ye, xs:xe] = heat

    def color(lo=40, hi=230):
        return rng.uniform(lo, hi, size=3)

    head_w = rng.uniform(0.22, 0.4)
    head_h = rng.uniform(0.10, 0.18)
    shoulder_w = rng.uniform(0.55, 0.95)
    torso_w = rng.uniform(0.4, 0.7)
    torso_bottom = rng.uniform(0.55, 0.68)
    leg_gap = rng.uniform(0.04, 0.14)
    leg_w = (torso_w - leg_gap) / 2

    skin = color(100, 220)
    shirt = color()
    pants = color()
    hair = color(10, 120)
    # Thermal levels: exposed skin hottest, clothed areas cooler with a
    # small identity-keyed variation.
    heat_skin = rng.uniform(200, 235)
    heat_hair = rng.uniform(165, 195)
    heat_shirt = rng.uniform(90, 150)
    heat_pants = rng.uniform(60, 120)

    # Head and hair sit in the upper third so the head-shoulder crop
    # carries most of the identity-specific geometry.
    block(0.02, 0.02 + head_h * 0.45, 0.5 - head_w / 2, 0.5 + head_w / 2, hair, heat_hair)
    block(0.02 + head_h * 0.45, 0.02 + head_h, 0.5 - head_w / 2, 0.5 + head_w / 2, skin, heat_skin)
    # Shoulders / collar stripe.
    block(0.02 + head_h, 0.02 + head_h + 0.06, 0.5 - shoulder_w / 2, 0.5 + shoulder_w / 2, shirt, heat_shirt)
    # Torso with an identity-keyed accent stripe.
    block(0.02 + head_h + 0.06, torso_bottom, 0.5 - torso_w / 2, 0.5 + torso_w / 2, shirt, heat_shirt)
    stripe_y = rng.uniform(0.3, 0.5)
    block(stripe_y, stripe_y + 0.05, 0.5 - torso_w / 2, 0.5 + torso_w / 2, color(), rng.uniform(70, 170))
    # Legs.
    block(torso_bottom, 0.95, 0.5 - torso_w / 2, 0.5 - torso_w / 2 + leg_w, pants, heat_pants)
    block(torso_bottom, 0.95, 0.5 + torso_w / 2 - leg_w, 0.5 + torso_w / 2, pants, heat_pants)
    return vis, thermal


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with edge replication, keeping the canvas size."""
    h, w = img.shape[:2]
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w]


_LUMA = np.array([0.299, 0.587, 0.114])


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> DatasetIndex:
    """Write the synthetic dataset as PNGs in the id_dirs layout.

    Deterministic at the byte level for a fixed config. Infrared copies of
    one identity differ only by their luminance multiplier, so a collapsed
    jitter range makes them pixel-identical.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    records: list[Record] = []
    for identity in range(cfg.num_identities):
        vis_base, thermal_base = _identity_figure(cfg, identity)

        for idx in range(cfg.images_per_identity_per_modality):
            rng = rng_for(cfg.seed, "visible", identity, idx)
            dy = int(rng.integers(-cfg.pose_jitter, cfg.pose_jitter + 1))
            dx = int(rng.integers(-cfg.pose_jitter, cfg.pose_jitter + 1))
            arr = np.clip(np.floor(_shift(vis_base, dy, dx) + 0.5), 0, 255).astype(np.uint8)
            img = Image(arr, Modality.VISIBLE, identity, camera=0)
            path = out_dir / "visible" / f"{identity:04d}" / f"{idx:04d}.png"
            save_image(img, path)
            records.append(Record(path, identity, Modality.VISIBLE, camera=0))

        heat = thermal_base @ _LUMA  # already near-gray; collapse exactly
        tinted = heat[:, :, None] * np.asarray(cfg.modality_color_shift)[None, None, :]
        for idx in range(cfg.images_per_identity_per_modality):
            rng = rng_for(cfg.seed, "infrared", identity, idx)
            lum = rng.uniform(*cfg.luminance_jitter_range)
            arr = np.clip(np.floor(tinted * lum + 0.5), 0, 255).astype(np.uint8)
            img = Image(arr, Modality.INFRARED, identity, camera=1)
            path = out_dir / "infrared" / f"{identity:04d}" / f"{idx:04d}.png"
            save_image(img, path)
            records.append(Record(path, identity, Modality.INFRARED, camera=1))
    return DatasetIndex(records=records)


def load_dataset(root: str | Path, layout: str = "id_dirs", training: bool = True) -> DatasetIndex:
    """Index a dataset from disk.

    `id_dirs` expects root/{visible,infrared}/<id>/<img>.png; `flat_manifest`
    expects root/manifest.csv with columns path,identity,modality,camera.
    Training indexes are validated to hold every identity in both
    modalities.
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root not found: {root}")
    if layout == "id_dirs":
        records = _load_id_dirs(root)
    elif layout == "flat_manifest":
        records = _load_manifest(root)
    else:
        raise ConfigError(f"unknown dataset layout {layout!r}")
    if not records:
        raise DataError(f"no records found under {root}")
    index = DatasetIndex(records=records)
    if training:
        index.validate_training()
    return index


_MODALITY_DIRS = {"visible": Modality.VISIBLE, "infrared": Modality.INFRARED, "grayscale": Modality.GRAYSCALE}


def _load_id_dirs(root: Path) -> list[Record]:
    records = []
    for dirname, modality in _MODALITY_DIRS.items():
        mod_dir = root / dirname
        if not mod_dir.is_dir():
            continue
        for id_dir in sorted(mod_dir.iterdir()):
            if not id_dir.is_dir():
                continue
            try:
                identity = int(id_dir.name)
            except ValueError as exc:
                raise DataError(f"identity directory name is not an integer: {id_dir}") from exc
            camera = 0 if modality == Modality.VISIBLE else 1
            for png in sorted(id_dir.glob("*.png")):
                records.append(Record(png, identity, modality, camera))
    return records


def _load_manifest(root: Path) -> list[Record]:
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    records = []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            path = root / row["path"]
            if not path.exists():
                raise DataError(f"manifest names a missing file: {path}")
            camera = row.get("camera", "")
            records.append(
                Record(
                    path=path,
                    identity=int(row["identity"]),
                    modality=Modality(row["modality"]),
                    camera=int(camera) if camera not in ("", None) else None,
                )
            )
    return records


def write_manifest(index: DatasetIndex, root: str | Path) -> Path:
    """Write a flat_manifest's manifest.csv for an index rooted at `root`."""
    root = Path(root)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "identity", "modality", "camera"])
        for r in index.records:
            writer.writerow(
                [r.path.relative_to(root), r.identity, r.modality.value, r.camera if r.camera is not None else ""]
            )
    return manifest


def pk_sample(
    index: DatasetIndex,
    p: int,
    k: int,
    seed: int,
    epochs: int = 1,
) -> Iterator[list[Record]]:
    """Yield identity-balanced batches of exactly P identities x K samples.

    Per epoch, each identity's records are shuffled and chunked into groups
    of K (padded by resampling when fewer than K remain); batches take the
    P identities with the most work left, so every identity appears at
    least once per epoch. Deterministic for a fixed seed.
    """
    if k < 2:
        raise ConfigError("K must be at least 2 so triplet mining has positives")
    if p < 2:
        raise ConfigError("P must be at least 2 so triplet mining has negatives")
    ids = index.identities
    if len(ids) < p:
        raise ConfigError(f"P={p} exceeds the {len(ids)} identities in the index")
    per_id: dict[int, list[Record]] = {i: [] for i in ids}
    for r in index.records:
        per_id[r.identity].append(r)
    short = sorted(i for i in ids if len(per_id[i]) < k)
    if short:
        log.info("identities with fewer than K=%d samples (sampling with replacement): %s", k, short)

    rng = np.random.default_rng(seed)
    for _epoch in range(epochs):
        queues: dict[int, list[list[Record]]] = {}
        for i in ids:
            recs = list(per_id[i])
            rng.shuffle(recs)
            groups = []
            for start in range(0, len(recs), k):
                chunk = recs[start : start + k]
                while len(chunk) < k:
                    chunk.append(recs[int(rng.integers(0, len(recs)))])
                groups.append(chunk)
            rng.shuffle(groups)
            queues[i] = groups
        while sum(1 for g in queues.values() if g) >= p:
            # Most-loaded identities first; ties broken by a seeded shuffle.
            avail = [i for i in ids if queues[i]]
            rng.shuffle(avail)
            avail.sort(key=lambda i: -len(queues[i]))
            batch: list[Record] = []
            for i in avail[:p]:
                batch.extend(queues[i].pop())
            yield batch
