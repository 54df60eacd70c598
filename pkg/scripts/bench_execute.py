"""Median execute_tool latency on a large seeded retail store.

    python3 scripts/bench_execute.py --population 3300 --calls 2000
"""

import argparse
import random
import statistics
import time
from decimal import Decimal

from envsynth.cli import bundled_env
from envsynth.taskgen import seeded_state
from envsynth.tooling import execute_tool


def bench(population: int, calls: int, seed: int = 0) -> dict:
    env = bundled_env("retail")
    doc = seeded_state(env.schema, seed, population)
    entries = sum(len(doc.root[a.name]) for a in env.schema.attributes if a.kind == "list")
    rng = random.Random(seed)
    users = [u["user_id"] for u in doc.root["users"]]
    products = [p["product_id"] for p in doc.root["products"]]
    mixes = [
        ("deposit", lambda: {"user_id": rng.choice(users), "amount": Decimal("5.00")}),
        ("get_balance", lambda: {"user_id": rng.choice(users)}),
        ("transfer", lambda: {"from_user_id": rng.choice(users), "to_user_id": rng.choice(users),
                              "amount": Decimal("0.01")}),
        ("get_product", lambda: {"product_id": rng.choice(products)}),
        ("update_address", lambda: {"user_id": rng.choice(users), "address": "1 Bench Road"}),
    ]
    timings = []
    for i in range(calls):
        name, make = mixes[i % len(mixes)]
        args = make()
        t0 = time.perf_counter()
        doc, _ = execute_tool(env.tools[name], args, doc)
        timings.append(time.perf_counter() - t0)
    return {"entries": entries, "calls": calls, "median_ms": statistics.median(timings) * 1e3,
            "p95_ms": sorted(timings)[int(0.95 * len(timings))] * 1e3}


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--population", type=int, default=3300)
    ap.add_argument("--calls", type=int, default=2000)
    a = ap.parse_args()
    print(bench(a.population, a.calls))
