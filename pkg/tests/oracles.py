"""Independent reference implementations the tests check the package against.

Nothing here imports the code under test except for schema metadata.
"""

from __future__ import annotations

import copy
from collections.abc import Mapping
import random
from decimal import Decimal
from fractions import Fraction

import mpmath

mpmath.mp.dps = 50


# -- state comparison --------------------------------------------------------


def deep_equal(a, b, attr) -> bool:
    """Recursive structural compare of two plain states under schema ``attr``.

    Volatile fields are skipped, decimals compare by numeric value, lists
    compare element by element in order.
    """
    if attr.kind == "list":
        if len(a) != len(b):
            return False
        el = attr.element()
        return all(deep_equal(x, y, el) for x, y in zip(a, b))
    if attr.kind == "record":
        for f in attr.fields:
            if f.volatile:
                continue
            if f.name not in a or f.name not in b:
                return False
            if not deep_equal(a[f.name], b[f.name], f):
                return False
        return True
    if attr.value_kind == "decimal":
        return Decimal(a) == Decimal(b)
    return type(a) is type(b) and a == b


def _shuffled_dict(d: dict, rng: random.Random) -> dict:
    keys = list(d)
    rng.shuffle(keys)
    return {k: d[k] for k in keys}


def perturb(plain: dict, rng: random.Random) -> dict:
    """A copy of a retail state with a few random edits.

    Some edits change meaning (a field value, element order, a dropped
    order), others do not (volatile counter, decimal spelling, dict key
    order).  Edits never leave a dangling reference.
    """
    out = copy.deepcopy(plain)
    for _ in range(rng.randint(0, 3)):
        kind = rng.choice(["volatile", "decimal_repr", "keyorder", "text", "int", "decimal", "swap", "drop", "noop"])
        users, products, orders = out["users"], out["products"], out["orders"]
        if kind == "volatile":
            out["ops_counter"] += rng.randint(1, 5)
        elif kind == "decimal_repr" and users:
            u = rng.choice(users)
            u["balance"] = Decimal(u["balance"]).normalize()
        elif kind == "keyorder":
            coll = rng.choice([users, products, orders])
            for i, rec in enumerate(coll):
                coll[i] = _shuffled_dict(rec, rng)
        elif kind == "text" and users:
            u = rng.choice(users)
            u["address"] = rng.choice([u["address"], "1 New Street", u["address"] + " "])
        elif kind == "int" and products:
            p = rng.choice(products)
            p["stock"] += rng.choice([0, 1, -1])
        elif kind == "decimal" and orders:
            o = rng.choice(orders)
            o["total"] = Decimal(o["total"]) + rng.choice([Decimal("0"), Decimal("0.01")])
        elif kind == "swap" and len(orders) >= 2:
            i, j = rng.sample(range(len(orders)), 2)
            orders[i], orders[j] = orders[j], orders[i]
        elif kind == "drop" and orders:
            orders.pop()
    return out


# -- advantages --------------------------------------------------------------


def exact_std(values) -> mpmath.mpf:
    n = len(values)
    m = Fraction(sum(values), n)
    var = sum((Fraction(v) - m) ** 2 for v in values) / n
    return mpmath.sqrt(mpmath.mpf(var.numerator) / var.denominator)


def exact_group_advantages(rewards) -> list:
    m = Fraction(sum(rewards), len(rewards))
    s = exact_std(rewards)
    return [mpmath.mpf((r - m).numerator) / (r - m).denominator / s for r in rewards]


def exact_env_advantages(questions: dict) -> dict:
    """``questions``: question id -> list of (traj_id, reward).  Returns traj_id -> mpf."""
    pooled = [r for ts in questions.values() for _, r in ts]
    s = exact_std(pooled)
    out = {}
    for ts in questions.values():
        m = Fraction(sum(r for _, r in ts), len(ts))
        for tid, r in ts:
            num = Fraction(r) - m
            out[tid] = mpmath.mpf(num.numerator) / num.denominator / s
    return out


# -- graphs ------------------------------------------------------------------


def has_cycle(nodes, edges) -> bool:
    """Plain recursive DFS with white/grey/black colouring."""
    succ = {n: [] for n in nodes}
    for s, d in edges:
        succ.setdefault(s, []).append(d)
        succ.setdefault(d, [])
    colour = dict.fromkeys(succ, 0)

    def dfs(n) -> bool:
        colour[n] = 1
        for m in succ[n]:
            if colour[m] == 1 or (colour[m] == 0 and dfs(m)):
                return True
        colour[n] = 2
        return False

    return any(colour[n] == 0 and dfs(n) for n in list(succ))


def is_topological(order, edges) -> bool:
    pos = {n: i for i, n in enumerate(order)}
    return len(pos) == len(order) and all(pos[s] < pos[d] for s, d in edges)


def pairwise_edges(tools) -> set:
    """Brute force over all ordered pairs: u->v if some required param of v
    shares name and kind class with an output of u."""
    def cls(k):
        if not isinstance(k, str):
            return None  # containers never feed a scalar parameter
        return "text" if k == "reference" else k

    out = set()
    for u in tools:
        rets = {k: cls(v) for k, v in (u.returns or {}).items()} if isinstance(u.returns, Mapping) else {}
        for v in tools:
            if u.name == v.name:
                continue
            if any(p.required and p.name in rets and rets[p.name] is not None and rets[p.name] == cls(p.value_kind) for p in v.params):
                out.add((u.name, v.name))
    return out


def binomial_sigma(n: int, p: float) -> float:
    return (n * p * (1 - p)) ** 0.5
