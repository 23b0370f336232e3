"""Synthetic patient tables shaped like the warfarin export."""
import csv

import numpy as np

RACES = ("White", "Asian", "Black or African American")


def synthetic_rows(n: int, seed: int, race_probs=(0.55, 0.3, 0.15)):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        r = rng.choice(len(RACES), p=race_probs)
        age = float(rng.integers(2, 9) * 10)
        weight = round(float(rng.normal(75 + 5 * (r == 0) - 8 * (r == 1), 14)), 1)
        amio = int(rng.random() < 0.08)
        cyp = int(rng.random() < (0.35 if r == 0 else 0.1))
        vk = int(rng.random() < (0.4 if r == 0 else (0.85 if r == 1 else 0.1)))
        dose = 5.5 - 0.03 * (age - 60) + 0.02 * (weight - 75) - 1.2 * amio - 1.0 * cyp - 1.8 * vk
        dose = max(0.5, dose + rng.normal(0, 1.2))
        rows.append({"race": RACES[r], "age": age, "weight": weight, "amiodarone": amio,
                     "cyp2c9": cyp, "vkorc1": vk, "dose_mg_per_day": round(dose, 3)})
    return rows


def write_csv(path, rows, delimiter=","):
    fields = ["race", "age", "weight", "amiodarone", "cyp2c9", "vkorc1", "dose_mg_per_day"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, delimiter=delimiter)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
