"""Batch drivers: the price-of-fairness table over random instance families."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from groupfair.errors import BoundViolated, GroupFairError, InstanceFailure
from groupfair.generators import GeneratorConfig, generate
from groupfair.instance import FORMAT_VERSION, analyze
from groupfair.nash import price_of_fairness, solve_nash

log = logging.getLogger(__name__)

KINDS = ("iid", "skewed")
G_LIST = (3, 5, 10, 50)
_KIND_CODE = {"iid": 0, "skewed": 1}
BOUND_SLACK = 1e-9


def instance_seed(master_seed: int, kind: str, G: int, i: int) -> int:
    """Per-instance generator seed derived from the master seed and the cell."""
    ss = np.random.SeedSequence([master_seed, _KIND_CODE[kind], G, i])
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class PofCell:
    kind: str
    G: int
    n: int
    master_seed: int
    pof: np.ndarray
    bound: np.ndarray
    seeds: np.ndarray
    attempts: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.pof))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.pof, 95))

    @property
    def rejection_rate(self) -> float:
        """Share of generator draws discarded by rejection sampling."""
        total = float(self.attempts.sum())
        return float((total - self.attempts.size) / total) if total else 0.0

    @property
    def max_excess(self) -> float:
        return float(np.max(self.pof - self.bound))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "G": self.G, "n": self.n, "master_seed": self.master_seed,
                "median": self.median, "p95": self.p95, "rejection_rate": self.rejection_rate,
                "max_excess_over_bound": self.max_excess}


def pof_cell(kind: str, G: int, n: int, master_seed: int) -> PofCell:
    pof, bound, seeds, attempts = [], [], [], []
    for i in range(n):
        seed = instance_seed(master_seed, kind, G, i)
        try:
            inst, tries = generate(GeneratorConfig(kind, G, seed=seed))
            an = analyze(inst)
            rep = price_of_fairness(an, solve_nash(an))
        except GroupFairError as e:
            raise InstanceFailure(kind, G, seed, e) from e
        if rep.pof > rep.bound_general + BOUND_SLACK:
            raise BoundViolated(f"{kind} G={G} seed {seed}: PoF {rep.pof!r} exceeds bound {rep.bound_general!r}")
        pof.append(rep.pof)
        bound.append(rep.bound_general)
        seeds.append(seed)
        attempts.append(tries)
    log.info("%s G=%d: %d instances", kind, G, n)
    return PofCell(kind, G, n, master_seed, np.array(pof), np.array(bound),
                   np.array(seeds, dtype=np.int64), np.array(attempts, dtype=np.int64))


@dataclass
class PofTable:
    cells: list
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "config": self.config,
                "rows": [c.to_dict() for c in self.cells]}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "G", "n", "median", "p95", "rejection_rate", "master_seed"])
        for c in self.cells:
            w.writerow([c.kind, c.G, c.n, f"{c.median:.6g}", f"{c.p95:.6g}", f"{c.rejection_rate:.6g}",
                        c.master_seed])
        return buf.getvalue()


def pof_table(kinds=KINDS, G_list=G_LIST, n: int = 500, master_seed: int = 0) -> PofTable:
    """Median and 95th percentile of the PoF for each (kind, G) cell."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cells = [pof_cell(k, G, n, master_seed) for k in kinds for G in G_list]
    return PofTable(cells, {"kinds": list(kinds), "G_list": list(G_list), "n": n, "master_seed": master_seed})
