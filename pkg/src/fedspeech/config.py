"""Experiment configuration: one JSON file, flag overrides, resolved snapshots.

A config file may omit anything; resolution fills paper-recipe defaults
(k=10, 5 repetitions, 50 epochs, batch 16, lr 8e-5, decay 5e-6) and the
three-site synthetic preset. The resolved form is written next to run outputs
as config.snapshot and re-running from a snapshot reproduces outputs byte for
byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import SiteSpec, default_site_presets
from .errors import ConfigurationError
from .evaluation import SETUPS
from .federation import AGGREGATION_KINDS
from .network import TrainConfig

DEFAULT_K = 10
DEFAULT_REPETITIONS = 5
DEFAULT_MASTER_SEED = 2024


@dataclass
class SiteEntry:
    """One corpus source: either a generator spec or a corpus file path."""

    site_id: str
    spec: SiteSpec | None = None
    corpus_path: str | None = None


@dataclass
class ExperimentConfig:
    sites: list[SiteEntry]
    setups: list[str]
    train: TrainConfig
    k: int = DEFAULT_K
    repetitions: int = DEFAULT_REPETITIONS
    master_seed: int = DEFAULT_MASTER_SEED
    aggregation: str = "weighted_by_samples"
    aggregate_bn_stats: bool = True
    persist_optimizer_state: bool = False
    out_dir: str = "out"
    jobs: int = 1


_TRAIN_FIELDS = ("learning_rate", "weight_decay", "batch_size", "epochs",
                 "bn_momentum", "bn_epsilon", "adam_beta1", "adam_beta2",
                 "adam_epsilon", "seed")
_SITE_FIELDS = ("site_id", "n_pd", "n_hc", "embedding_dim", "frames_min",
                "frames_max", "class_separation", "site_shift", "noise_scale", "seed")


def _check_keys(mapping: dict, allowed: tuple, where: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {sorted(unknown)}")


def resolve_config(raw: dict | None = None, overrides: dict | None = None,
                   base_dir: Path | None = None) -> ExperimentConfig:
    """Fill defaults and validate. overrides (from CLI flags) win over file keys."""
    raw = dict(raw or {})
    overrides = dict(overrides or {})
    _check_keys(raw, ("sites", "setups", "train", "k", "repetitions", "master_seed",
                      "aggregation", "aggregate_bn_stats", "persist_optimizer_state",
                      "out_dir", "jobs", "embedding_dim"), "config")

    def pick(key, default):
        if key in overrides and overrides[key] is not None:
            return overrides[key]
        return raw.get(key, default)

    master_seed = int(pick("master_seed", DEFAULT_MASTER_SEED))
    embedding_dim = pick("embedding_dim", None)
    train_raw = dict(raw.get("train", {}))
    _check_keys(train_raw, _TRAIN_FIELDS, "train")
    train_raw.setdefault("seed", master_seed)
    try:
        train = TrainConfig(**train_raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad train section: {exc}") from None

    sites_raw = raw.get("sites")
    sites: list[SiteEntry] = []
    if sites_raw is None:
        for spec in default_site_presets(
                embedding_dim=int(embedding_dim) if embedding_dim else 768,
                base_seed=master_seed):
            sites.append(SiteEntry(site_id=spec.site_id, spec=spec))
    else:
        if not sites_raw:
            raise ConfigurationError("sites list is empty")
        for index, entry in enumerate(sites_raw):
            entry = dict(entry)
            if "site_id" not in entry:
                raise ConfigurationError(f"site {index} has no site_id")
            site_id = str(entry["site_id"])
            if "corpus_path" in entry:
                _check_keys(entry, ("site_id", "corpus_path"), f"site {site_id!r}")
                path = Path(entry["corpus_path"])
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                if not path.exists():
                    raise ConfigurationError(f"corpus path {path} does not exist")
                sites.append(SiteEntry(site_id=site_id, corpus_path=str(path)))
            else:
                _check_keys(entry, _SITE_FIELDS, f"site {site_id!r}")
                entry.setdefault("seed", master_seed + index)
                if embedding_dim is not None:
                    entry["embedding_dim"] = int(embedding_dim)
                try:
                    sites.append(SiteEntry(site_id=site_id, spec=SiteSpec(**entry)))
                except TypeError as exc:
                    raise ConfigurationError(f"bad site {site_id!r}: {exc}") from None
    if len({s.site_id for s in sites}) != len(sites):
        raise ConfigurationError("duplicate site_id in sites list")

    setups = list(pick("setups", list(SETUPS)))
    for setup in setups:
        if setup not in SETUPS:
            raise ConfigurationError(f"unknown setup {setup!r}")
    if not setups:
        raise ConfigurationError("no setups requested")

    aggregation = str(pick("aggregation", "weighted_by_samples"))
    if aggregation not in AGGREGATION_KINDS:
        raise ConfigurationError(f"unknown aggregation {aggregation!r}")

    k = int(pick("k", DEFAULT_K))
    repetitions = int(pick("repetitions", DEFAULT_REPETITIONS))
    jobs = int(pick("jobs", 1))
    if k < 1 or repetitions < 1 or jobs < 1:
        raise ConfigurationError("k, repetitions and jobs must be >= 1")

    return ExperimentConfig(
        sites=sites,
        setups=setups,
        train=train,
        k=k,
        repetitions=repetitions,
        master_seed=master_seed,
        aggregation=aggregation,
        aggregate_bn_stats=bool(pick("aggregate_bn_stats", True)),
        persist_optimizer_state=bool(pick("persist_optimizer_state", False)),
        out_dir=str(pick("out_dir", "out")),
        jobs=jobs,
    )


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return resolve_config(raw, overrides, base_dir=path.parent)


def snapshot_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config as a JSON-serializable dict; feeding it back
    through resolve_config reproduces the same configuration."""
    sites = []
    for entry in cfg.sites:
        if entry.corpus_path is not None:
            sites.append({"site_id": entry.site_id, "corpus_path": entry.corpus_path})
        else:
            sites.append(asdict(entry.spec))
    return {
        "sites": sites,
        "setups": list(cfg.setups),
        "train": asdict(cfg.train),
        "k": cfg.k,
        "repetitions": cfg.repetitions,
        "master_seed": cfg.master_seed,
        "aggregation": cfg.aggregation,
        "aggregate_bn_stats": cfg.aggregate_bn_stats,
        "persist_optimizer_state": cfg.persist_optimizer_state,
        "out_dir": cfg.out_dir,
        "jobs": cfg.jobs,
    }


def write_snapshot(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(snapshot_dict(cfg), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
