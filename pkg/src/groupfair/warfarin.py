"""Warfarin-style patient pipeline: CSV rows to a grouped linear contextual instance.

Five features are binarized (continuous ones at their median, value >= median
maps to 1), each observed bit pattern becomes a context X = (bits, 1), and
three dose bins become arms. Arm a's mean reward in context X is <X, theta_a>,
where theta_a is the least-squares fit of the indicator "the patient's dose
lies in bin a".
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from groupfair.contextual.model import ContextualInstance
from groupfair.contextual.programs import (
    allocate_regret_optimal,
    disagreement_values,
    solve_L,
    solve_Lfair,
)
from groupfair.errors import ConstantFeature, EmptyFile, SchemaMismatch, SingularDesign
from groupfair.instance import FORMAT_VERSION
from groupfair.nash import NEG_INFINITY

FEATURES = ("age", "weight", "amiodarone", "cyp2c9", "vkorc1")
CONTINUOUS = ("age", "weight")
ARMS = ("Low", "Medium", "High")
LOW_MAX = 3.0
HIGH_MIN = 7.0
AGE_THRESHOLD = 70.0
RIDGE = 1e-8


@dataclass(frozen=True)
class Schema:
    """Maps the pipeline's fields to CSV column names.

    ``dose_per_week`` divides the dose column by 7. Genotype columns accept
    0/1 or genotype strings: a Cyp2C9 value other than ``*1/*1`` and a
    VKORC1 value containing ``A`` count as carrying the variant.
    """

    race: str = "race"
    age: str = "age"
    weight: str = "weight"
    amiodarone: str = "amiodarone"
    cyp2c9: str = "cyp2c9"
    vkorc1: str = "vkorc1"
    dose: str = "dose_mg_per_day"
    dose_per_week: bool = False
    delimiter: str = ","

    def columns(self) -> dict:
        return {f: getattr(self, f) for f in ("race",) + FEATURES + ("dose",)}


# Column names of the public PharmGKB warfarin export. Not checked against a
# copy of the file here; see the project notes.
PHARMGKB = Schema(
    race="Race (Reported)",
    age="Age",
    weight="Weight (kg)",
    amiodarone="Amiodarone (Cordarone)",
    cyp2c9="Cyp2C9 genotypes",
    vkorc1="VKORC1 genotype:   -1639 G>A (3673); chr16:31015190; rs9923231; C/T",
    dose="Therapeutic Dose of Warfarin",
    dose_per_week=True,
)


@dataclass
class PatientTable:
    race: np.ndarray
    age: np.ndarray
    weight: np.ndarray
    amiodarone: np.ndarray
    cyp2c9: np.ndarray
    vkorc1: np.ndarray
    dose: np.ndarray
    n_read: int
    dropped: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.dose.size

    def feature(self, name: str) -> np.ndarray:
        return getattr(self, name)


def _parse_float(s: str) -> float:
    s = s.strip()
    if not s or s.upper() in ("NA", "NAN", "NULL"):
        return math.nan
    if " - " in s:
        # age recorded as a decade band such as "60 - 69": use the lower end
        return float(s.split(" - ")[0])
    if s.endswith("+"):
        return float(s[:-1])
    return float(s)


def _parse_binary(s: str, kind: str) -> float:
    s = s.strip()
    if not s or s.upper() in ("NA", "NAN", "NULL"):
        return math.nan
    try:
        v = float(s)
        if v in (0.0, 1.0):
            return v
        return math.nan
    except ValueError:
        pass
    if kind == "cyp2c9":
        return float(s.replace(" ", "") != "*1/*1")
    if kind == "vkorc1":
        return float("A" in s.upper())
    return math.nan


def load_patients(path, schema: Schema = Schema()) -> PatientTable:
    """Read patient rows; rows with a missing or unparsable field are dropped and counted."""
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise EmptyFile(f"{path} is empty")
    text = raw.decode("utf-8-sig")
    reader = csv.DictReader(io.StringIO(text), delimiter=schema.delimiter)
    header = reader.fieldnames or []
    missing = [c for c in schema.columns().values() if c not in header]
    if missing:
        raise SchemaMismatch(f"columns not found in header: {missing}; header has {len(header)} field(s)")
    cols = {k: [] for k in ("race",) + FEATURES + ("dose",)}
    dropped = Counter()
    n_read = 0
    for row in reader:
        n_read += 1
        rec = {}
        try:
            rec["race"] = (row[schema.race] or "").strip()
            rec["age"] = _parse_float(row[schema.age])
            rec["weight"] = _parse_float(row[schema.weight])
            for b in ("amiodarone", "cyp2c9", "vkorc1"):
                rec[b] = _parse_binary(row[getattr(schema, b)] or "", b)
            dose = _parse_float(row[schema.dose])
            rec["dose"] = dose / 7.0 if schema.dose_per_week else dose
        except (ValueError, TypeError):
            dropped["unparsable"] += 1
            continue
        if not rec["race"] or rec["race"].lower() in ("na", "unknown"):
            dropped["missing race"] += 1
            continue
        bad = [k for k in FEATURES + ("dose",) if math.isnan(rec[k])]
        if bad:
            dropped[f"missing {bad[0]}"] += 1
            continue
        if rec["dose"] <= 0:
            dropped["non-positive dose"] += 1
            continue
        for k, v in rec.items():
            cols[k].append(v)
    if n_read == 0:
        raise EmptyFile(f"{path} has a header but no rows")
    return PatientTable(
        race=np.array(cols["race"], dtype=object),
        **{k: np.array(cols[k], dtype=float) for k in FEATURES + ("dose",)},
        n_read=n_read, dropped=dict(dropped),
    )


def bin_dose(dose_mg_per_day: float) -> int:
    """0 = Low [0, 3), 1 = Medium [3, 7], 2 = High (7, inf)."""
    if dose_mg_per_day < LOW_MAX:
        return 0
    if dose_mg_per_day <= HIGH_MIN:
        return 1
    return 2


def rank_features_by_correlation(table: PatientTable) -> list:
    """Feature names sorted by |Pearson correlation| with the dose, strongest first."""
    out = []
    for f in FEATURES:
        x = table.feature(f)
        if np.std(x) == 0:
            continue
        out.append((abs(float(np.corrcoef(x, table.dose)[0, 1])), f))
    return [f for _, f in sorted(out, key=lambda t: (-t[0], t[1]))]


@dataclass
class ContextCatalog:
    features: tuple
    medians: dict
    bits: np.ndarray            # (n_patients, 5)
    contexts: np.ndarray        # (M, 5) observed bit patterns, lexicographic
    context_of: np.ndarray      # patient -> context index
    counts: np.ndarray          # patients per context

    @property
    def M(self) -> int:
        return len(self.contexts)

    def design(self) -> np.ndarray:
        """Context feature vectors X = (bits, 1), shape (M, 6)."""
        return np.hstack([self.contexts, np.ones((self.M, 1))]).astype(float)


def build_contexts(table: PatientTable, features=FEATURES) -> ContextCatalog:
    if table.n == 0:
        raise EmptyFile("no patient rows survived loading")
    cols, medians = [], {}
    for f in features:
        x = table.feature(f)
        if np.all(x == x[0]):
            raise ConstantFeature(f"feature {f!r} has zero variance")
        if f in CONTINUOUS:
            med = float(np.median(x))
            medians[f] = med
            cols.append((x >= med).astype(np.int64))
        else:
            cols.append(x.astype(np.int64))
    bits = np.column_stack(cols)
    uniq, inv, counts = np.unique(bits, axis=0, return_inverse=True, return_counts=True)
    return ContextCatalog(tuple(features), medians, bits, uniq, inv.ravel(), counts)


@dataclass
class Grouping:
    labels: tuple             # display names
    member: np.ndarray        # patient -> group index
    source: dict              # display name -> raw label / rule


def group_by_race(table: PatientTable) -> Grouping:
    """Race labels mapped to A, B, C, ... by descending patient count (ties by label)."""
    counts = Counter(table.race.tolist())
    order = sorted(counts, key=lambda r: (-counts[r], r))
    names = [chr(ord("A") + i) for i in range(len(order))]
    idx = {r: i for i, r in enumerate(order)}
    return Grouping(tuple(names), np.array([idx[r] for r in table.race], dtype=np.int64),
                    dict(zip(names, order)))


def group_by_age(table: PatientTable, threshold: float = AGE_THRESHOLD) -> Grouping:
    member = (table.age >= threshold).astype(np.int64)
    return Grouping((f"<{threshold:g}", f">={threshold:g}"), member,
                    {f"<{threshold:g}": f"age < {threshold:g}", f">={threshold:g}": f"age >= {threshold:g}"})


def context_weights(catalog: ContextCatalog, grouping: Grouping) -> np.ndarray:
    """w^g(m): share of context m's patients in group g, shape (G, M)."""
    G = len(grouping.labels)
    counts = np.zeros((G, catalog.M))
    np.add.at(counts, (grouping.member, catalog.context_of), 1.0)
    return counts / counts.sum(axis=0, keepdims=True)


@dataclass
class ArmModels:
    theta_arms: np.ndarray      # (3, 6)
    ridge_used: bool
    rank: int

    @property
    def theta(self) -> np.ndarray:
        return self.theta_arms.ravel()


def fit_arm_models(table: PatientTable, catalog: ContextCatalog, allow_ridge: bool = True) -> ArmModels:
    """Least squares of each dose-bin indicator on (bits, 1).

    A rank-deficient design raises SingularDesign unless ``allow_ridge``, in
    which case a 1e-8 ridge solution is returned and flagged.
    """
    X = np.hstack([catalog.bits, np.ones((table.n, 1))]).astype(float)
    arms = np.array([bin_dose(d) for d in table.dose])
    Y = np.stack([(arms == a).astype(float) for a in range(len(ARMS))], axis=1)
    rank = int(np.linalg.matrix_rank(X))
    if rank < X.shape[1]:
        if not allow_ridge:
            raise SingularDesign(f"design has rank {rank} < {X.shape[1]}")
        coef = np.linalg.solve(X.T @ X + RIDGE * np.eye(X.shape[1]), X.T @ Y)
        return ArmModels(coef.T.copy(), True, rank)
    coef = np.linalg.lstsq(X, Y, rcond=None)[0]
    return ArmModels(coef.T.copy(), False, rank)


def action_set(x: np.ndarray, n_arms: int = len(ARMS)) -> np.ndarray:
    """Block one-hot actions (X,0,0), (0,X,0), (0,0,X)."""
    d = x.size
    out = np.zeros((n_arms, n_arms * d))
    for a in range(n_arms):
        out[a, a * d:(a + 1) * d] = x
    return out


def build_instance(catalog: ContextCatalog, models: ArmModels, grouping: Grouping,
                   name: str = "warfarin") -> ContextualInstance:
    design = catalog.design()
    G = len(grouping.labels)
    counts = np.zeros((G, catalog.M))
    np.add.at(counts, (grouping.member, catalog.context_of), 1.0)
    n_g = counts.sum(axis=1)
    return ContextualInstance(
        theta=models.theta,
        contexts=[action_set(x) for x in design],
        p=n_g / n_g.sum(),
        context_probs=counts / n_g[:, None],
        name=name,
    )


@dataclass
class WarfarinReport:
    """Per-group disagreement, regret and utility gain under both allocations."""

    groups: tuple
    disagreement: np.ndarray
    regret_optimal: np.ndarray
    fair: np.ndarray
    fair_welfare: object
    n_patients: int
    n_contexts: int
    contexts_per_group: list
    dropped: dict
    ridge_used: bool
    stats: dict = field(default_factory=dict)

    @property
    def gains_regret_optimal(self) -> np.ndarray:
        return self.disagreement - self.regret_optimal

    @property
    def gains_fair(self) -> np.ndarray:
        return self.disagreement - self.fair

    def rows(self) -> list:
        cols = list(self.groups) + ["Total"]

        def line(kind, label, v):
            return [kind, label] + [float(x) for x in v] + [float(np.sum(v))]

        return [["quantity", "allocation"] + cols,
                line("regret", "disagreement point", self.disagreement),
                line("regret", "regret optimal", self.regret_optimal),
                line("regret", "fair", self.fair),
                line("utility gain", "regret optimal", self.gains_regret_optimal),
                line("utility gain", "fair", self.gains_fair)]

    def to_dict(self) -> dict:
        w = self.fair_welfare
        return {
            "format_version": FORMAT_VERSION,
            "groups": list(self.groups),
            "disagreement": self.disagreement.tolist(),
            "regret_optimal": self.regret_optimal.tolist(),
            "fair": self.fair.tolist(),
            "gains_regret_optimal": self.gains_regret_optimal.tolist(),
            "gains_fair": self.gains_fair.tolist(),
            "totals": {
                "disagreement": float(self.disagreement.sum()),
                "regret_optimal": float(self.regret_optimal.sum()),
                "fair": float(self.fair.sum()),
            },
            "fair_welfare": "NEG_INFINITY" if w is NEG_INFINITY else float(w),
            "n_patients": self.n_patients,
            "n_contexts": self.n_contexts,
            "contexts_per_group": self.contexts_per_group,
            "dropped": self.dropped,
            "ridge_used": self.ridge_used,
            "stats": self.stats,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for r in self.rows():
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
        return buf.getvalue()


def analyze_instance(inst: ContextualInstance, groups: tuple, **meta) -> WarfarinReport:
    Y = disagreement_values(inst)
    base = solve_L(inst)
    ro = allocate_regret_optimal(base, inst.group_weights)
    fair = solve_Lfair(inst)
    return WarfarinReport(
        groups=tuple(groups), disagreement=Y, regret_optimal=ro, fair=fair.regrets,
        fair_welfare=fair.welfare, n_contexts=inst.M,
        contexts_per_group=[int(len(s)) for s in inst.supports],
        stats={"regret_optimal_total": base.value, "fair": fair.stats}, **meta,
    )


def run_pipeline(path, group_by: str = "race", schema: Schema = Schema()):
    """CSV file to (instance, report)."""
    table = load_patients(path, schema)
    catalog = build_contexts(table)
    models = fit_arm_models(table, catalog)
    if group_by == "race":
        grouping = group_by_race(table)
    elif group_by == "age":
        grouping = group_by_age(table)
    else:
        raise ValueError(f"unknown grouping {group_by!r}")
    inst = build_instance(catalog, models, grouping, name=f"warfarin-{group_by}")
    report = analyze_instance(inst, grouping.labels, n_patients=table.n, dropped=table.dropped,
                              ridge_used=models.ridge_used)
    return inst, report
