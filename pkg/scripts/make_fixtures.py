"""Regenerate the synthetic fixture CSVs shipped in src/vfldp/fixtures.

The fixtures share the column schemas of the real datasets but hold at most
200 synthetic rows whose labels depend on attributes spread across the whole
header, so every owner's block carries signal.
"""
import csv
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "vfldp" / "fixtures"


def write(name, header, rows):
    OUT.mkdir(parents=True, exist_ok=True)
    with (OUT / f"{name}.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fmt(x, nd=4):
    return f"{x:.{nd}f}"


def adult(rng, n=200):
    workclass = np.array(["Private", "Self-emp", "Gov", "Other"])
    marital = np.array(["Married", "Never-married", "Divorced"])
    occupation = np.array(["Tech", "Sales", "Craft", "Service", "Exec"])
    relationship = np.array(["Husband", "Wife", "Own-child", "Unmarried"])
    sex = np.array(["Male", "Female"])
    age = rng.integers(18, 80, n)
    wc = rng.integers(0, 4, n)
    edu = rng.integers(1, 17, n)
    ms = rng.integers(0, 3, n)
    occ = rng.integers(0, 5, n)
    rel = rng.integers(0, 4, n)
    sx = rng.integers(0, 2, n)
    hours = rng.integers(10, 80, n)
    gain = np.where(rng.random(n) < 0.15, rng.integers(2000, 20000, n), 0)
    logit = (
        0.06 * (age - 40) + 0.45 * (edu - 10) + 1.8 * (ms == 0) + 1.2 * (occ == 4)
        + 0.6 * (occ == 0) - 0.9 * (rel == 2) + 0.5 * (wc == 1) + 0.3 * (sx == 0)
        + 0.05 * (hours - 40) + 0.0003 * gain - 1.0
    )
    y = logit + 0.5 * rng.logistic(size=n) > 0
    rows = []
    for i in range(n):
        rows.append([
            age[i], workclass[wc[i]], edu[i], marital[ms[i]], occupation[occ[i]],
            relationship[rel[i]], sex[sx[i]], hours[i], gain[i], ">50K" if y[i] else "<=50K",
        ])
    for i in (17, 88, 141):
        rows[i][1] = "?"
    header = ["age", "workclass", "education_num", "marital_status", "occupation",
              "relationship", "sex", "hours_per_week", "capital_gain", "income"]
    write("adult", header, rows)


def sport(rng, n=50, d=5625):
    x = rng.normal(size=(n, d))
    w = np.zeros(d)
    w[rng.choice(d, 60, replace=False)] = rng.normal(size=60)
    y = x @ w + 0.3 * rng.normal(size=n) > 0
    header = [f"f{i:04d}" for i in range(d)] + ["label"]
    rows = [[f"{v:.2f}" for v in x[i]] + ["1" if y[i] else "0"] for i in range(n)]
    write("sport", header, rows)


def energy(rng, n=200):
    x1 = rng.uniform(0.62, 0.98, n)
    x2 = rng.uniform(514.5, 808.5, n)
    x3 = rng.uniform(245.0, 416.5, n)
    x4 = rng.uniform(110.25, 220.5, n)
    x5 = rng.choice([3.5, 7.0], n)
    x6 = rng.integers(2, 6, n)
    x7 = rng.choice([0.0, 0.1, 0.25, 0.4], n)
    x8 = rng.integers(0, 6, n)
    y1 = 4 + 3.0 * x5 + 20 * x7 + 0.02 * (x3 - 300) - 8 * (x1 - 0.8) + 0.01 * (x2 - 650) + 0.3 * (x8 > 0) + rng.normal(0, 0.6, n)
    y2 = 10 + 2.4 * x5 + 14 * x7 + 0.015 * (x3 - 300) - 6 * (x1 - 0.8) + 0.02 * (x4 - 160) + 0.2 * x6 + rng.normal(0, 0.8, n)
    header = [f"X{i}" for i in range(1, 9)] + ["Y1", "Y2"]
    rows = [
        [fmt(x1[i], 2), fmt(x2[i], 1), fmt(x3[i], 1), fmt(x4[i], 2), fmt(x5[i], 1), x6[i],
         fmt(x7[i], 2), x8[i], fmt(y1[i], 2), fmt(y2[i], 2)]
        for i in range(n)
    ]
    write("energy", header, rows)


def boston(rng, n=200):
    crim = rng.exponential(3.0, n)
    zn = np.where(rng.random(n) < 0.3, rng.uniform(0, 100, n), 0.0)
    indus = rng.uniform(0.5, 27.7, n)
    chas = (rng.random(n) < 0.07).astype(int)
    nox = rng.uniform(0.38, 0.87, n)
    rm = rng.normal(6.3, 0.7, n)
    age = rng.uniform(3, 100, n)
    dis = rng.uniform(1.1, 12.1, n)
    rad = rng.choice([1, 2, 3, 4, 5, 6, 7, 8, 24], n)
    tax = rng.uniform(187, 711, n)
    ptratio = rng.uniform(12.6, 22.0, n)
    lstat = rng.uniform(1.7, 38.0, n)
    medv = (
        22 + 6.0 * (rm - 6.3) - 0.45 * (lstat - 12) - 0.15 * crim + 2.5 * chas - 8 * (nox - 0.55)
        - 0.6 * (ptratio - 18) - 0.01 * (tax - 400) + 0.02 * zn - 0.3 * (dis - 4) - 0.02 * (age - 60)
        - 0.05 * (indus - 11) + 0.05 * rad + rng.normal(0, 2.0, n)
    )
    medv = np.clip(medv, 5, 50)
    header = ["CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO", "LSTAT", "MEDV"]
    rows = [
        [fmt(crim[i]), fmt(zn[i], 1), fmt(indus[i], 2), chas[i], fmt(nox[i], 3), fmt(rm[i], 3),
         fmt(age[i], 1), fmt(dis[i]), rad[i], fmt(tax[i], 0), fmt(ptratio[i], 1), fmt(lstat[i], 2),
         fmt(medv[i], 1)]
        for i in range(n)
    ]
    write("boston", header, rows)


def california(rng, n=200):
    inc = rng.gamma(4.0, 1.0, n)
    age = rng.integers(1, 53, n)
    rooms = rng.normal(5.4, 1.2, n)
    bed = rng.normal(1.1, 0.1, n)
    pop = rng.gamma(2.0, 700, n)
    occ = rng.normal(3.0, 0.7, n)
    lat = rng.uniform(32.5, 42.0, n)
    lon = rng.uniform(-124.3, -114.3, n)
    val = (
        0.45 * inc + 0.01 * age + 0.1 * (rooms - 5.4) - 0.3 * (bed - 1.1) - 0.00005 * pop
        - 0.2 * (occ - 3) - 0.15 * (lat - 36) - 0.12 * (lon + 119) + rng.normal(0, 0.3, n)
    )
    val = np.clip(val, 0.15, 5.0)
    header = ["MedInc", "HouseAge", "AveRooms", "AveBedrms", "Population", "AveOccup", "Latitude", "Longitude", "MedHouseVal"]
    rows = [
        [fmt(inc[i]), age[i], fmt(rooms[i]), fmt(bed[i]), fmt(pop[i], 0), fmt(occ[i]),
         fmt(lat[i], 2), fmt(lon[i], 2), fmt(val[i], 3)]
        for i in range(n)
    ]
    write("california", header, rows)


def main():
    rng = np.random.default_rng(20240601)
    adult(rng)
    sport(rng)
    energy(rng)
    boston(rng)
    california(rng)


if __name__ == "__main__":
    main()
