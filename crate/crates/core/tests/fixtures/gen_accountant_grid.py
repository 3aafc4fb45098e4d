"""Regenerate accountant_grid.csv with 50-digit mpmath arithmetic.

Inputs are stored as exact shortest-repr doubles so the Rust side reads the
same binary values the oracle used.
"""
import random

from mpmath import mp, mpf, log, sqrt

mp.dps = 50
rng = random.Random(20261017)

def eps_oracle(rounds, data_size, sigma_sq, s, delta):
    total = mpf(rounds) / (mpf(s) ** 2 * mpf(sigma_sq))
    x = total / (2 * mpf(data_size) ** 2)
    return 2 * sqrt(x * log(1 / mpf(delta))) + x

def a_oracle(eps, delta):
    l = log(1 / mpf(delta))
    return -l + sqrt(l * l + mpf(eps) * l)

rows = []
for _ in range(1000):
    rounds = rng.randint(1, 200)
    data_size = int(10 ** rng.uniform(1, 5))
    sigma_sq = 10 ** rng.uniform(-6, 1)
    s = 10 ** rng.uniform(0, 1) if rng.random() < 0.7 else 1.0
    delta = 10 ** rng.uniform(-8, -1)
    eps = 10 ** rng.uniform(-2, 1.5)
    rows.append((rounds, data_size, sigma_sq, s, delta, eps,
                 eps_oracle(rounds, data_size, sigma_sq, s, delta), a_oracle(eps, delta)))

with open("accountant_grid.csv", "w") as f:
    f.write("rounds,data_size,sigma_sq,s,delta,eps,eps_client,a\n")
    for r in rows:
        f.write(",".join([str(r[0]), str(r[1]), repr(r[2]), repr(r[3]), repr(r[4]), repr(r[5]),
                          mp.nstr(r[6], 30), mp.nstr(r[7], 30)]) + "\n")
