"""Repeated stratified cross-validation over the local / central / federated
setups, with per-fold metrics and per-sample scores.

Within one repetition every site holds out the same fold index, so the
central and federated training sets never overlap any site's test fold. All
models of one (repetition, fold) cell share the same weight initialization,
and a training run's shuffle stream depends only on the set of sites whose
data it sees; a single-site corpus therefore yields bit-identical local,
central, and one-client federated results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, TrainingError
from .federation import (AggregationScheme, ClientState, run_federated_training)
from .metrics import confusion_metrics, roc_auc
from .network import TrainConfig, classifier_stack, predict, train_model
from .pooling import FeatureVector, stack_features

SETUPS = ("local", "central", "federated")

# Seed-stream tags keep fold shuffling, weight init, and batch shuffling
# statistically independent while remaining pure functions of the master seed.
_FOLD_TAG = 7
_INIT_TAG = 11
_SHUFFLE_TAG = 13


def stratified_kfold(labels_by_subject: Mapping[str, int], k: int,
                     seed) -> dict[str, int]:
    """Assign each subject to one of k folds, stratified by class.

    Subjects of each class are shuffled by the seeded generator and dealt
    round-robin, so per-class fold sizes differ by at most one.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for cls in (0, 1):
        members = sorted(s for s, lab in labels_by_subject.items() if lab == cls)
        if not members:
            continue
        if len(members) < k:
            raise ConfigurationError(
                f"class {cls} has {len(members)} subjects, fewer than k={k}")
        order = rng.permutation(len(members))
        for position, idx in enumerate(order):
            assignment[members[idx]] = position % k
    return assignment


@dataclass
class SiteData:
    """One site's stacked features plus the subject roster used for folding."""

    site_id: str
    x: np.ndarray
    y: np.ndarray
    subjects: list[str]
    roster: dict[str, int]


def prepare_sites(corpora: Mapping[str, Sequence[FeatureVector]]) -> list[SiteData]:
    """Stack per-site feature sets and validate cross-site consistency."""
    if not corpora:
        raise DataError("need at least one site")
    sites = []
    seen_subjects: dict[str, str] = {}
    width = None
    for site_id in sorted(corpora):
        vectors = corpora[site_id]
        x, y, subjects = stack_features(vectors)
        if width is None:
            width = x.shape[1]
        elif x.shape[1] != width:
            raise DataError(f"site {site_id!r} has feature width {x.shape[1]}, "
                            f"expected {width}")
        roster: dict[str, int] = {}
        for subject, label in zip(subjects, y):
            if subject in roster and roster[subject] != label:
                raise DataError(f"subject {subject!r} at site {site_id!r} has "
                                f"conflicting labels")
            roster[subject] = int(label)
        for subject in roster:
            if subject in seen_subjects:
                raise DataError(f"subject {subject!r} appears at both "
                                f"{seen_subjects[subject]!r} and {site_id!r}")
            seen_subjects[subject] = site_id
        sites.append(SiteData(site_id, x, y, subjects, roster))
    return sites


def build_fold_plan(sites: Sequence[SiteData], k: int, master_seed: int,
                    repetition: int) -> dict[str, dict[str, int]]:
    """Per-site subject-to-fold assignment for one repetition."""
    plan = {}
    for site_index, site in enumerate(sites):
        seed = np.random.SeedSequence([master_seed, _FOLD_TAG, repetition, site_index])
        plan[site.site_id] = stratified_kfold(site.roster, k, seed)
    return plan


@dataclass
class FoldRecord:
    site_id: str
    setup: str
    repetition: int
    fold: int
    accuracy: float
    auc: float            # NaN when the test fold has a single class
    sensitivity: float    # NaN when the test fold has no positives
    specificity: float    # NaN when the test fold has no negatives


@dataclass
class SampleRecord:
    site_id: str
    setup: str
    repetition: int
    fold: int
    subject_id: str
    label: int
    score: float


@dataclass
class RoundTelemetry:
    repetition: int
    fold: int
    round_index: int
    site_id: str
    loss: float
    weight: float


@dataclass
class MetricsTable:
    fold_records: list[FoldRecord]
    sample_records: list[SampleRecord]
    telemetry: list[RoundTelemetry]

    def sort(self) -> None:
        self.fold_records.sort(key=lambda r: (r.site_id, r.setup, r.repetition, r.fold))
        self.sample_records.sort(key=lambda r: (r.site_id, r.setup, r.repetition,
                                                r.fold, r.subject_id))
        self.telemetry.sort(key=lambda r: (r.repetition, r.fold, r.round_index, r.site_id))

    def extend(self, other: "MetricsTable") -> None:
        self.fold_records.extend(other.fold_records)
        self.sample_records.extend(other.sample_records)
        self.telemetry.extend(other.telemetry)

    def metric_values(self, site_id: str, setup: str, metric: str) -> dict[tuple[int, int], float]:
        """(repetition, fold) -> metric value for one site and setup."""
        return {(r.repetition, r.fold): getattr(r, metric)
                for r in self.fold_records
                if r.site_id == site_id and r.setup == setup}

    def summarize(self) -> list[dict]:
        """Mean and sample std of each metric per (site, setup), NaNs excluded."""
        groups: dict[tuple[str, str], list[FoldRecord]] = {}
        for rec in self.fold_records:
            groups.setdefault((rec.site_id, rec.setup), []).append(rec)
        rows = []
        for (site_id, setup) in sorted(groups):
            recs = groups[(site_id, setup)]
            row = {"site": site_id, "setup": setup, "n_records": len(recs)}
            for metric in ("accuracy", "auc", "sensitivity", "specificity"):
                values = [getattr(r, metric) for r in recs
                          if not math.isnan(getattr(r, metric))]
                row[f"{metric}_mean"] = float(np.mean(values)) if values else math.nan
                row[f"{metric}_std"] = (float(np.std(values, ddof=1))
                                        if len(values) > 1 else math.nan)
                row[f"{metric}_defined"] = len(values)
            rows.append(row)
        return rows


def _train_rows(site: SiteData, fold_of_subject: dict[str, int], fold: int) -> np.ndarray:
    return np.array([fold_of_subject[s] != fold for s in site.subjects])


def _shuffle_rng(master_seed: int, repetition: int, fold: int,
                 scope: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, _SHUFFLE_TAG, repetition, fold, *scope]))


def _init_rng(master_seed: int, repetition: int, fold: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, _INIT_TAG, repetition, fold]))


def _evaluate(params, site: SiteData, test_mask: np.ndarray, setup: str,
              repetition: int, fold: int) -> tuple[FoldRecord, list[SampleRecord]]:
    x_test = site.x[test_mask]
    y_test = site.y[test_mask]
    subjects = [s for s, keep in zip(site.subjects, test_mask) if keep]
    scores = predict(params, x_test)
    cm = confusion_metrics(scores, y_test)
    if y_test.min() == y_test.max():
        auc = math.nan
    else:
        auc, _ = roc_auc(scores, y_test)
    record = FoldRecord(site.site_id, setup, repetition, fold,
                        cm.accuracy, auc, cm.sensitivity, cm.specificity)
    samples = [SampleRecord(site.site_id, setup, repetition, fold, subj,
                            int(lab), float(score))
               for subj, lab, score in zip(subjects, y_test, scores)]
    return record, samples


def run_fold_job(sites: Sequence[SiteData], setups: Sequence[str], cfg: TrainConfig,
                 k: int, master_seed: int, repetition: int, fold: int,
                 scheme: AggregationScheme = AggregationScheme(),
                 aggregate_bn_stats: bool = True,
                 persist_optimizer_state: bool = False) -> MetricsTable:
    """Train and evaluate every requested setup on one (repetition, fold) cell."""
    for setup in setups:
        if setup not in SETUPS:
            raise ConfigurationError(f"unknown setup {setup!r}")
    plan = build_fold_plan(sites, k, master_seed, repetition)
    specs = classifier_stack(sites[0].x.shape[1])
    train_masks = {s.site_id: _train_rows(s, plan[s.site_id], fold) for s in sites}
    test_masks = {s.site_id: ~train_masks[s.site_id] for s in sites}
    all_scope = tuple(range(len(sites)))
    table = MetricsTable([], [], [])

    def context(exc, setup):
        return TrainingError(f"{setup} training failed at repetition {repetition}, "
                             f"fold {fold}: {exc}")

    for setup in setups:
        if setup == "local":
            for site_index, site in enumerate(sites):
                mask = train_masks[site.site_id]
                try:
                    params, _ = train_model(
                        specs, site.x[mask], site.y[mask], cfg,
                        init_rng=_init_rng(master_seed, repetition, fold),
                        shuffle_rng=_shuffle_rng(master_seed, repetition, fold,
                                                 (site_index,)),
                        persist_optimizer_state=persist_optimizer_state)
                except TrainingError as exc:
                    raise context(f"site {site.site_id!r}: {exc}", setup) from exc
                record, samples = _evaluate(params, site, test_masks[site.site_id],
                                            setup, repetition, fold)
                table.fold_records.append(record)
                table.sample_records.extend(samples)
        elif setup == "central":
            x_train = np.concatenate([s.x[train_masks[s.site_id]] for s in sites])
            y_train = np.concatenate([s.y[train_masks[s.site_id]] for s in sites])
            try:
                params, _ = train_model(
                    specs, x_train, y_train, cfg,
                    init_rng=_init_rng(master_seed, repetition, fold),
                    shuffle_rng=_shuffle_rng(master_seed, repetition, fold, all_scope),
                    persist_optimizer_state=persist_optimizer_state)
            except TrainingError as exc:
                raise context(exc, setup) from exc
            for site in sites:
                record, samples = _evaluate(params, site, test_masks[site.site_id],
                                            setup, repetition, fold)
                table.fold_records.append(record)
                table.sample_records.extend(samples)
        else:
            clients = []
            for site_index, site in enumerate(sites):
                mask = train_masks[site.site_id]
                clients.append(ClientState(
                    site_id=site.site_id,
                    features=np.ascontiguousarray(site.x[mask]),
                    labels=site.y[mask],
                    rng=_shuffle_rng(master_seed, repetition, fold, (site_index,))))
            try:
                params, rounds = run_federated_training(
                    clients, specs, rounds=cfg.epochs, cfg=cfg, scheme=scheme,
                    init_rng=_init_rng(master_seed, repetition, fold),
                    persist_optimizer_state=persist_optimizer_state,
                    aggregate_bn_stats=aggregate_bn_stats)
            except TrainingError as exc:
                raise context(exc, setup) from exc
            table.telemetry.extend(
                RoundTelemetry(repetition, fold, t.round_index, t.site_id,
                               t.loss, t.weight)
                for t in rounds)
            for site in sites:
                record, samples = _evaluate(params, site, test_masks[site.site_id],
                                            setup, repetition, fold)
                table.fold_records.append(record)
                table.sample_records.extend(samples)
    return table


def run_experiments(corpora: Mapping[str, Sequence[FeatureVector]],
                    setups: Sequence[str], cfg: TrainConfig, k: int = 10,
                    repetitions: int = 5, master_seed: int = 0,
                    scheme: AggregationScheme = AggregationScheme(),
                    aggregate_bn_stats: bool = True,
                    persist_optimizer_state: bool = False) -> MetricsTable:
    """Run the full repetitions x folds grid for the requested setups."""
    sites = prepare_sites(corpora)
    _validate_fold_feasibility(sites, k)
    table = MetricsTable([], [], [])
    for repetition in range(repetitions):
        for fold in range(k):
            table.extend(run_fold_job(sites, setups, cfg, k, master_seed,
                                      repetition, fold, scheme,
                                      aggregate_bn_stats, persist_optimizer_state))
    table.sort()
    return table


def run_experiment(corpora: Mapping[str, Sequence[FeatureVector]], setup: str,
                   cfg: TrainConfig, k: int = 10, repetitions: int = 5,
                   master_seed: int = 0, **kwargs) -> MetricsTable:
    """Single-setup convenience wrapper around run_experiments."""
    return run_experiments(corpora, [setup], cfg, k, repetitions, master_seed, **kwargs)


def _validate_fold_feasibility(sites: Sequence[SiteData], k: int) -> None:
    for site in sites:
        for cls in (0, 1):
            count = sum(1 for lab in site.roster.values() if lab == cls)
            if 0 < count < k:
                raise ConfigurationError(
                    f"site {site.site_id!r} has {count} class-{cls} subjects, "
                    f"fewer than k={k}")
