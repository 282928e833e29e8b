"""Per-fold construction of the phased training sets.

Every phase shares the same COVID-19 core and a small shared pneumonia core
(drawn from the Cohen collection); on top of that each phase gets its own
pneumonia and normal pools, disjoint from every other phase's pools.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from xrc.common import CLASSES, ClassLabel, DataError, Source, rng_for
from xrc.data_ingest import Manifest, SplitSpec


@dataclass(frozen=True)
class PhaseLayout:
    n_phases: int = 8
    covid_core: int = 149
    shared_pneumonia: int = 34
    unique_pneumonia: int = 200
    unique_normal: int = 250

    def __post_init__(self):
        for name in ("n_phases", "covid_core", "shared_pneumonia", "unique_pneumonia", "unique_normal"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")

    @property
    def phase_size(self) -> int:
        return self.covid_core + self.shared_pneumonia + self.unique_pneumonia + self.unique_normal

    @property
    def train_counts(self) -> dict[ClassLabel, int]:
        return {
            ClassLabel.COVID19: self.covid_core,
            ClassLabel.PNEUMONIA: self.shared_pneumonia + self.n_phases * self.unique_pneumonia,
            ClassLabel.NORMAL: self.n_phases * self.unique_normal,
        }

    def split_spec(self, patient_level: bool = False) -> SplitSpec:
        """TRAIN counts this layout consumes; the shared pneumonia core comes from the Cohen source."""
        quotas = {(ClassLabel.PNEUMONIA, Source.COHEN_XRAY): self.shared_pneumonia} if self.shared_pneumonia else {}
        return SplitSpec(train_counts=self.train_counts, source_quotas=quotas, patient_level=patient_level)


DEFAULT_LAYOUT = PhaseLayout()


@dataclass(frozen=True)
class PhaseSet:
    phase_index: int
    image_ids: frozenset[str]
    class_histogram: dict[ClassLabel, int]

    def __len__(self):
        return len(self.image_ids)


@dataclass(frozen=True)
class PhasePlan:
    fold_id: int
    phases: tuple[PhaseSet, ...]
    covid_core: frozenset[str]
    shared_pneumonia: frozenset[str]

    @property
    def core(self) -> frozenset[str]:
        return self.covid_core | self.shared_pneumonia

    def union(self) -> frozenset[str]:
        return frozenset().union(*(p.image_ids for p in self.phases))

    def summary(self) -> list[dict]:
        return [{"phase_index": p.phase_index, **{c.name: p.class_histogram[c] for c in CLASSES}, "total": len(p)}
                for p in self.phases]


def _take(pool: list[str], k: int, rng, what: str) -> tuple[list[str], list[str]]:
    if k > len(pool):
        raise DataError(f"{what}: need {k}, only {len(pool)} left (shortfall {k - len(pool)})")
    order = rng.permutation(len(pool))
    taken = [pool[i] for i in order[:k]]
    rest = [pool[i] for i in sorted(order[k:])]
    return taken, rest


def build_phase_plan(manifest: Manifest, fold_id: int = 1, seed: int = 0, layout: PhaseLayout = DEFAULT_LAYOUT) -> PhasePlan:
    """Draw the phase sets for one fold from the manifest's TRAIN records.

    Each draw uses its own generator keyed by (seed, fold_id, class, phase),
    over candidates sorted by image_id, so plans are reproducible across
    machines and differ between folds.
    """
    train = sorted(manifest.train, key=lambda r: r.image_id)
    covid = [r.image_id for r in train if r.class_label is ClassLabel.COVID19]
    pneu_cohen = [r.image_id for r in train if r.class_label is ClassLabel.PNEUMONIA and r.source is Source.COHEN_XRAY]
    pneu_other = [r.image_id for r in train if r.class_label is ClassLabel.PNEUMONIA and r.source is not Source.COHEN_XRAY]
    normal = [r.image_id for r in train if r.class_label is ClassLabel.NORMAL]

    covid_core, _ = _take(covid, layout.covid_core, rng_for(seed, fold_id, ClassLabel.COVID19, "core"),
                          f"fold {fold_id}, core, class COVID19")
    # Shared pneumonia prefers Cohen images; RSNA tops up only if Cohen runs short.
    n_cohen = min(layout.shared_pneumonia, len(pneu_cohen))
    shared, cohen_left = _take(pneu_cohen, n_cohen, rng_for(seed, fold_id, ClassLabel.PNEUMONIA, "shared"),
                               f"fold {fold_id}, shared core, class PNEUMONIA")
    pneu_pool = sorted(cohen_left + pneu_other)
    extra, pneu_pool = _take(pneu_pool, layout.shared_pneumonia - n_cohen,
                             rng_for(seed, fold_id, ClassLabel.PNEUMONIA, "shared-topup"),
                             f"fold {fold_id}, shared core, class PNEUMONIA")
    shared += extra

    core = set(covid_core) | set(shared)
    phases = []
    normal_pool = normal
    for p in range(layout.n_phases):
        up, pneu_pool = _take(pneu_pool, layout.unique_pneumonia, rng_for(seed, fold_id, ClassLabel.PNEUMONIA, p),
                              f"fold {fold_id}, phase {p}, class PNEUMONIA")
        un, normal_pool = _take(normal_pool, layout.unique_normal, rng_for(seed, fold_id, ClassLabel.NORMAL, p),
                                f"fold {fold_id}, phase {p}, class NORMAL")
        hist = {ClassLabel.NORMAL: len(un), ClassLabel.PNEUMONIA: len(shared) + len(up), ClassLabel.COVID19: len(covid_core)}
        phases.append(PhaseSet(p, frozenset(core | set(up) | set(un)), hist))
    return PhasePlan(fold_id, tuple(phases), frozenset(covid_core), frozenset(shared))


def phase_schedule(plan_or_n_phases, epochs_per_phase: int) -> list[tuple[int, range]]:
    """(phase_index, epochs) pairs, epochs numbered from 1 and contiguous across phases."""
    if epochs_per_phase < 1:
        raise ValueError("epochs_per_phase must be >= 1")
    n = plan_or_n_phases if isinstance(plan_or_n_phases, int) else len(plan_or_n_phases.phases)
    return [(p, range(p * epochs_per_phase + 1, (p + 1) * epochs_per_phase + 1)) for p in range(n)]


def write_phase_plan(plan: PhasePlan, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase_index", "image_id", "role"])
        for p in plan.phases:
            for iid in sorted(p.image_ids):
                w.writerow([p.phase_index, iid, "core" if iid in plan.core else "unique"])
    return path


def read_phase_plan(path, manifest: Manifest, fold_id: int) -> PhasePlan:
    """Rebuild a plan from its CSV against the fold's manifest."""
    members: dict[int, set[str]] = {}
    core_ids: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            members.setdefault(int(row["phase_index"]), set()).add(row["image_id"])
            if row.get("role") == "core":
                core_ids.add(row["image_id"])
    if not members:
        raise DataError(f"{path}: empty phase plan")
    lookup = manifest.by_id()
    unknown = sorted(set().union(*members.values()) - set(lookup))
    if unknown:
        raise DataError(f"{path}: image ids not in manifest, e.g. {unknown[0]}")
    covid = frozenset(i for i in core_ids if lookup[i].class_label is ClassLabel.COVID19)
    shared = frozenset(i for i in core_ids if lookup[i].class_label is ClassLabel.PNEUMONIA)
    phases = []
    for idx in sorted(members):
        hist = {c: 0 for c in CLASSES}
        for i in members[idx]:
            hist[lookup[i].class_label] += 1
        phases.append(PhaseSet(idx, frozenset(members[idx]), hist))
    return PhasePlan(fold_id, tuple(phases), covid, shared)
