"""Synthetic multi-view image/text pair generation and the dataset file format.

Each identity owns a latent vector.  Its image for view v is a view-specific
linear map of the latent plus Gaussian noise; its text is a shared linear map
whose coordinates are independently masked per record, so descriptions from
different views of the same identity agree only partially.  That masking is
what makes same-identity cross-view pairs "weak": correlated but not
interchangeable.

File format (one dataset per file):
    line 1:  #weakpair-dataset v1 split=<tag> key=value ...  (generator config)
    line 2+: identity<TAB>view<TAB>image values<TAB>text values
Vector values are comma-separated decimals with 17 significant digits, which
round-trips IEEE float64 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = "v1"
_HEADER_MAGIC = "#weakpair-dataset"


class DatasetFormatError(ValueError):
    """Unreadable or inconsistent dataset file."""


@dataclass(frozen=True)
class GenConfig:
    num_identities: int
    views_per_identity: int
    latent_dim: int
    raw_dim_image: int
    raw_dim_text: int
    view_noise: float
    annotation_mask_rate: float
    seed: int

    def validate(self) -> None:
        counts = {
            "num_identities": self.num_identities,
            "views_per_identity": self.views_per_identity,
            "latent_dim": self.latent_dim,
            "raw_dim_image": self.raw_dim_image,
            "raw_dim_text": self.raw_dim_text,
        }
        for name, v in counts.items():
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.view_noise < 0:
            raise ValueError(f"view_noise must be >= 0, got {self.view_noise}")
        if not 0.0 <= self.annotation_mask_rate < 1.0:
            raise ValueError(
                f"annotation_mask_rate must be in [0, 1), got {self.annotation_mask_rate}")


@dataclass
class PairRecord:
    """One identity/view observation: raw image and text feature vectors."""

    identity: int
    view: int
    image_raw: np.ndarray
    text_raw: np.ndarray


@dataclass
class DatasetManifest:
    version: str
    gen_config: GenConfig
    records: list[PairRecord]
    split_tag: str = "none"

    def by_identity(self) -> dict[int, list[PairRecord]]:
        pools: dict[int, list[PairRecord]] = {}
        for rec in self.records:
            pools.setdefault(rec.identity, []).append(rec)
        return pools

    def identities(self) -> list[int]:
        return sorted({rec.identity for rec in self.records})


def generate(cfg: GenConfig) -> DatasetManifest:
    """Deterministic dataset synthesis; a pure function of the config."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    scale = 1.0 / np.sqrt(cfg.latent_dim)
    view_maps = [rng.normal(0.0, scale, size=(cfg.raw_dim_image, cfg.latent_dim))
                 for _ in range(cfg.views_per_identity)]
    text_map = rng.normal(0.0, scale, size=(cfg.raw_dim_text, cfg.latent_dim))

    records: list[PairRecord] = []
    for identity in range(cfg.num_identities):
        latent = rng.normal(0.0, 1.0, size=cfg.latent_dim)
        for view in range(cfg.views_per_identity):
            mask = rng.random(cfg.raw_dim_text) >= cfg.annotation_mask_rate
            image = view_maps[view] @ latent
            image = image + cfg.view_noise * rng.normal(0.0, 1.0, size=cfg.raw_dim_image)
            text = mask * (text_map @ latent)
            text = text + cfg.view_noise * rng.normal(0.0, 1.0, size=cfg.raw_dim_text)
            records.append(PairRecord(identity, view, image, text))
    return DatasetManifest(FORMAT_VERSION, cfg, records)


def split(d: DatasetManifest, train_fraction: float, seed: int
          ) -> tuple[DatasetManifest, DatasetManifest]:
    """Identity-disjoint train/test partition; record order is preserved."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = d.identities()
    if len(ids) < 2:
        raise ValueError("cannot split fewer than 2 identities")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(round(len(ids) * train_fraction))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train_ids = set(order[:n_train])
    train = [r for r in d.records if r.identity in train_ids]
    test = [r for r in d.records if r.identity not in train_ids]
    return (DatasetManifest(d.version, d.gen_config, train, "train"),
            DatasetManifest(d.version, d.gen_config, test, "test"))


def _fmt_vector(v: np.ndarray) -> str:
    return ",".join(format(x, ".17g") for x in v)


_CONFIG_FIELDS = ("num_identities", "views_per_identity", "latent_dim",
                  "raw_dim_image", "raw_dim_text", "view_noise",
                  "annotation_mask_rate", "seed")
_FLOAT_FIELDS = {"view_noise", "annotation_mask_rate"}


def write(d: DatasetManifest, path: str | Path) -> None:
    cfg = d.gen_config
    parts = [_HEADER_MAGIC, d.version, f"split={d.split_tag}"]
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        rendered = format(value, ".17g") if name in _FLOAT_FIELDS else str(value)
        parts.append(f"{name}={rendered}")
    lines = [" ".join(parts)]
    for rec in d.records:
        lines.append("\t".join((str(rec.identity), str(rec.view),
                                _fmt_vector(rec.image_raw),
                                _fmt_vector(rec.text_raw))))
    Path(path).write_text("\n".join(lines) + "\n")


def read(path: str | Path) -> DatasetManifest:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_HEADER_MAGIC):
        raise DatasetFormatError(f"{path}: missing dataset header")
    header = lines[0].split()
    if len(header) < 2 or header[1] != FORMAT_VERSION:
        got = header[1] if len(header) > 1 else "<none>"
        raise DatasetFormatError(f"{path}: format version {got!r}, expected {FORMAT_VERSION!r}")
    kv: dict[str, str] = {}
    for token in header[2:]:
        if "=" not in token:
            raise DatasetFormatError(f"{path}: malformed header token {token!r}")
        key, _, value = token.partition("=")
        kv[key] = value
    try:
        split_tag = kv.pop("split")
        cfg = GenConfig(**{name: (float(kv[name]) if name in _FLOAT_FIELDS else int(kv[name]))
                           for name in _CONFIG_FIELDS})
    except KeyError as exc:
        raise DatasetFormatError(f"{path}: header missing {exc}") from exc

    records: list[PairRecord] = []
    seen: set[tuple[int, int]] = set()
    for index, line in enumerate(lines[1:]):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise DatasetFormatError(f"{path}: record {index}: expected 4 fields, got {len(fields)}")
        try:
            identity, view = int(fields[0]), int(fields[1])
            image = np.array([float(x) for x in fields[2].split(",")])
            text_vec = np.array([float(x) for x in fields[3].split(",")])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: record {index}: {exc}") from exc
        if image.shape[0] != cfg.raw_dim_image or text_vec.shape[0] != cfg.raw_dim_text:
            raise DatasetFormatError(f"{path}: record {index}: vector length mismatch")
        if (identity, view) in seen:
            raise DatasetFormatError(f"{path}: record {index}: duplicate (identity, view)")
        seen.add((identity, view))
        records.append(PairRecord(identity, view, image, text_vec))
    return DatasetManifest(FORMAT_VERSION, cfg, records, split_tag)


def manifests_equal(a: DatasetManifest, b: DatasetManifest) -> bool:
    if (a.version, a.gen_config, a.split_tag) != (b.version, b.gen_config, b.split_tag):
        return False
    if len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.records, b.records):
        if (ra.identity, ra.view) != (rb.identity, rb.view):
            return False
        if not (np.array_equal(ra.image_raw, rb.image_raw)
                and np.array_equal(ra.text_raw, rb.text_raw)):
            return False
    return True
