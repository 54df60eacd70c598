"""Deterministic rule-based backend for every generator template.

It stands in for a language model when recording the bundled fixture
cassette and in offline tests.  Answers depend only on the template id and
payload, so a recording made with it replays byte-for-byte.  The intent
writer phrases each tool step as one sentence with a fixed pattern, and
the argument binder parses those sentences back, which keeps intents and
bindings consistent without any model in the loop.
"""

from __future__ import annotations

import json
import random
import re
from decimal import Decimal
from typing import Any, Mapping

from .client import STOP_TOKEN, ClientUnavailable
from .statestore import AttributeSchema, canonical_json, decode_value, encode_value
from .tooling import ToolSpec

READ_ONLY_PREFIXES = ("Look up", "Check", "Tell me", "Show me", "List")
COMPUTED = "the computed amount"
DONE_MARKERS = ("all done", "completed", "is done")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")
_SUM_RE = re.compile(r"sum of `(\w+)` over `(\w+)`")
_COUNT_RE = re.compile(r"number of `(\w+)`")
_FACT_RE = re.compile(r"\d[\w.,-]*|'[^']+'")

PATTERNS = {
    "intro": re.compile(r"I'm ([A-Z][\w'-]* [A-Z][\w'-]*) \(([^)\s]+@[^)\s]+)\)"),
    "create_order": re.compile(r"[Oo]rder (\d+) units? of product (\w+)"),
    "pay_order": re.compile(r"[Pp]ay for (that order|order (\w+))"),
    "cancel_order": re.compile(r"[Cc]ancel (that order|order (\w+))"),
    "deposit": re.compile(r"[Dd]eposit (\d+\.\d{2}|the computed amount)"),
    "transfer": re.compile(r"[Ss]end (\d+\.\d{2}|the computed amount) to ([A-Z][\w'-]* [A-Z][\w'-]*)"),
    "update_address": re.compile(r"address to '([^']+)'"),
    "get_product": re.compile(r"[Cc]heck product (\w+)"),
}
NEW_STREETS = ("Birch Lane", "Elm Court", "Willow Road", "Aspen Way", "Juniper Drive", "Linden Place")


def _dump(obj: Any) -> str:
    return canonical_json(encode_value(obj))


def _decimal(x: Any) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


class HeuristicBackend:
    """Backend callable ``(template_id, prompt, payload) -> str``.

    ``reference_env`` (an :class:`~envsynth.environment.Environment`) lets
    the synthesis templates answer with a known schema and tool set.
    """

    def __init__(self, reference_env=None):
        self.reference_env = reference_env

    def __call__(self, template_id: str, prompt: str, payload: Mapping) -> str:
        handler = getattr(self, f"_{template_id}", None)
        if handler is None:
            raise ClientUnavailable(f"heuristic backend has no rule for {template_id}")
        return handler(payload)

    # -- environment synthesis ------------------------------------------------

    def _state_structure(self, payload):
        if self.reference_env is None:
            raise ClientUnavailable("no reference environment")
        return json.dumps(self.reference_env.schema.to_json(), sort_keys=True)

    def _function_set(self, payload):
        if self.reference_env is None:
            raise ClientUnavailable("no reference environment")
        name = payload["tool_doc"]["name"]
        if name not in self.reference_env.tools:
            raise ClientUnavailable(f"no reference tool {name}")
        return json.dumps(self.reference_env.tools[name].to_json(), sort_keys=True)

    def _instantiate_env(self, payload):
        from .taskgen import seeded_state

        schema = AttributeSchema.from_json(payload["schema"])
        doc = seeded_state(schema, payload.get("seed", 0), payload.get("population", 20))
        return canonical_json(doc.to_json())

    _instantiate_env_repair = _instantiate_env

    # -- graphs ---------------------------------------------------------------

    def _edge_judge(self, payload):
        from .graphgen import heuristic_matches

        hits = heuristic_matches(ToolSpec.from_json(payload["source"]), ToolSpec.from_json(payload["target"]))
        return json.dumps({"edge": bool(hits), "rationale": "output feeds " + ",".join(hits) if hits else "no overlap"})

    def _merge_redundancy(self, payload):
        # a read-only tool is redundant when an earlier read-only tool returns the same fields
        tools = {t["name"]: t for t in payload.get("tools", []) if isinstance(t, Mapping)}
        seen: dict[str, str] = {}
        pairs = []
        for name in payload["sequence"]:
            t = tools.get(name)
            if not t or not t.get("read_only"):
                continue
            sig = canonical_json(t.get("returns"))
            if sig in seen:
                pairs.append([seen[sig], name])
            else:
                seen[sig] = name
        return json.dumps({"redundant": pairs})

    def _reasoning_nodes(self, payload):
        nodes = []
        for step in payload["steps"]:
            returns = step.get("returns")
            if not isinstance(returns, Mapping):
                continue
            for coll, kind in sorted(returns.items()):
                if not (isinstance(kind, list) and len(kind) == 2 and isinstance(kind[1], Mapping)):
                    continue
                decimals = sorted(f for f, k in kind[1].items() if k == "decimal")
                if decimals:
                    f = decimals[0]
                    nodes.append({
                        "after": step["id"],
                        "instruction": f"Compute the sum of `{f}` over `{coll}` returned by {step['id']}.",
                        "inputs": [step["id"]],
                        "output": f"{f}_sum_{step['id']}",
                    })
        return json.dumps({"nodes": nodes[: payload.get("max_nodes", len(nodes))]})

    def _reasoning_edges(self, payload):
        tools = {t["name"]: t for t in payload.get("tools", [])}
        node_tool = {n["id"]: n["tool"] for n in payload["tool_nodes"]}
        order = payload["order"]
        taken: set[str] = set()
        edges = []
        for r in payload["reasoning_nodes"]:
            after = order[order.index(r["id"]) + 1:]
            for nid in after:
                t = tools.get(node_tool.get(nid, ""))
                if nid in taken or not t or t.get("read_only"):
                    continue
                if any(p["name"] == "amount" and p["value_kind"] == "decimal" for p in t["params"]):
                    edges.append({"src": r["id"], "dst": nid, "rationale": f"{r['output']} sets the amount"})
                    taken.add(nid)
                    break
        return json.dumps({"edges": edges})

    # -- tasks ----------------------------------------------------------------

    def _initial_question(self, payload):
        rng = random.Random(canonical_json(payload))
        state = {k: decode_value(v) for k, v in payload.get("state", {}).items()}
        users = list(state.get("users", ()))
        products = [p for p in state.get("products", ()) if p.get("stock", 0) > 0]
        orders = list(state.get("orders", ()))
        nodes = [n for n in payload["nodes"] if "tool" in n]
        reasoning_parent = {e["dst"] for e in payload["edges"] if e["kind"] == "reasoning"}
        order_tools = [n["tool"] for n in nodes]

        # pay/cancel steps not preceded by an unconsumed create_order need existing pending orders
        need_pending, open_created = 0, 0
        for t in order_tools:
            if t == "create_order":
                open_created += 1
            elif t in ("pay_order", "cancel_order"):
                if open_created:
                    open_created -= 1
                else:
                    need_pending += 1

        def pending_of(u):
            return [o for o in orders if o.get("user_id") == u.get("user_id") and o.get("status") == "pending"
                    and (o.get("total", 0) <= u.get("balance", 0))]

        if users:
            best = max(min(len(pending_of(u)), need_pending) for u in users)
            pool = [u for u in users if min(len(pending_of(u)), need_pending) == best]
            me = rng.choice(pool)
        else:
            me = {"name": "Alex Doe", "email": "alex.doe@example.com", "balance": Decimal("0")}
        others = [u for u in users if u is not me]
        pending = sorted(pending_of(me), key=lambda o: o["order_id"]) if users else []
        budget = _decimal(me.get("balance", 0))

        sentences = [f"Hi, I'm {me['name']} ({me['email']})."]
        open_created = 0
        main_product = rng.choice(products) if products else None
        for n in nodes:
            t = n["tool"]
            if t == "find_user_id_by_name":
                sentences.append("Look up my account by my name.")
            elif t == "find_user_id_by_email":
                sentences.append("Look up my account by my email.")
            elif t == "get_user_details":
                sentences.append("Check my account details.")
            elif t == "get_balance":
                sentences.append("Tell me my current balance.")
            elif t == "list_products":
                sentences.append("Show me the product catalogue.")
            elif t == "list_user_orders":
                sentences.append("List my orders.")
            elif t == "get_product" and main_product:
                sentences.append(f"Check product {main_product['product_id']} for me.")
            elif t == "create_order" and products:
                affordable = [p for p in products if p["price"] <= budget] or products
                prod = rng.choice(affordable)
                qty = max(1, min(prod["stock"], rng.randint(1, 3), int(budget / prod["price"])))
                budget -= prod["price"] * qty
                sentences.append(f"Order {qty} unit{'s' if qty > 1 else ''} of product {prod['product_id']}.")
                open_created += 1
            elif t in ("pay_order", "cancel_order"):
                verb = "Pay for" if t == "pay_order" else "Cancel"
                if open_created:
                    open_created -= 1
                    sentences.append(f"{verb} that order.")
                elif pending:
                    sentences.append(f"{verb} order {pending.pop(0)['order_id']}.")
                else:
                    sentences.append(f"{verb} my latest order.")
            elif t == "deposit":
                amt = COMPUTED if n["id"] in reasoning_parent else f"{rng.randint(5, 80)}.00"
                sentences.append(f"Deposit {amt} into my account.")
            elif t == "transfer":
                amt = COMPUTED if n["id"] in reasoning_parent else f"{max(1, min(25, int(budget / 4)))}.00"
                target = rng.choice(others)["name"] if others else "Sam Roe"
                sentences.append(f"Send {amt} to {target}.")
            elif t == "update_address":
                addr = f"{rng.randint(10, 999)} {rng.choice(NEW_STREETS)}"
                sentences.append(f"Please change my address to '{addr}'.")
            else:
                sentences.append(f"Use {t.replace('_', ' ')} as needed.")
        return " ".join(sentences)

    def _bind_args(self, payload):
        question = payload["question"]
        tool = payload["tool"]
        name = tool["name"]
        history = payload.get("history", [])
        occurrence = sum(1 for h in history if h["tool"] == name)
        state = {k: decode_value(v) for k, v in payload.get("state", {}).items()}
        outputs = {k: decode_value(v) for k, v in payload.get("outputs", {}).items()}
        reasoning_parents = [p["src"] for p in payload.get("parents", []) if p["kind"] == "reasoning"]
        intro = PATTERNS["intro"].search(question)

        def nth(key):
            found = list(PATTERNS[key].finditer(question))
            if not found:
                return None
            return found[min(occurrence, len(found) - 1)]

        def user_by_name(full):
            for u in state.get("users", ()):
                if u.get("name") == full:
                    return u["user_id"]
            return None

        def my_user_id():
            for h in reversed(history):
                if h["tool"].startswith("find_user_id") and isinstance(outputs.get(h["node"]), Mapping):
                    return {"ref": h["node"], "field": "user_id"}
            return user_by_name(intro.group(1)) if intro else None

        def last_created():
            for h in reversed(history):
                if h["tool"] == "create_order":
                    return {"ref": h["node"], "field": "order_id"}
            return None

        def amount(text):
            if text == COMPUTED:
                return {"ref": reasoning_parents[-1]} if reasoning_parents else None
            return encode_value(Decimal(text))

        args: dict[str, Any] = {}
        for p in tool["params"]:
            pname = p["name"]
            value: Any = None
            if pname in ("user_id", "from_user_id"):
                value = my_user_id()
            elif pname == "to_user_id":
                m = nth("transfer")
                value = user_by_name(m.group(2)) if m else None
            elif pname == "name" and intro:
                value = intro.group(1)
            elif pname == "email" and intro:
                value = intro.group(2)
            elif pname == "product_id":
                m = nth("create_order") if name == "create_order" else nth("get_product")
                value = m.group(2 if name == "create_order" else 1) if m else None
            elif pname == "quantity":
                m = nth("create_order")
                value = int(m.group(1)) if m else None
            elif pname == "order_id":
                m = nth(name) if name in ("pay_order", "cancel_order") else None
                if m and m.group(1) == "that order":
                    value = last_created()
                elif m and m.group(2):
                    value = m.group(2)
                else:
                    mine = my_user_id()
                    mine = mine if isinstance(mine, str) else None
                    ids = sorted(o["order_id"] for o in state.get("orders", ()) if o.get("user_id") == mine)
                    value = ids[-1] if ids else None
            elif pname == "amount":
                m = nth(name) if name in ("deposit", "transfer") else None
                value = amount(m.group(1)) if m else None
            elif pname == "address":
                m = nth("update_address")
                value = m.group(1) if m else None
            if value is None:
                if p.get("required", True):
                    return json.dumps({"error": f"cannot bind {pname}"})
                continue
            args[pname] = value
        return canonical_json({"args": args})

    def _reasoning_eval(self, payload):
        instruction = payload["instruction"]
        inputs = [decode_value(v) for _, v in sorted(payload["inputs"].items())]
        m = _SUM_RE.search(instruction)
        if m and inputs:
            field, coll = m.groups()
            items = inputs[0].get(coll, ()) if isinstance(inputs[0], Mapping) else inputs[0]
            return _dump({"value": sum((_decimal(it[field]) for it in items), Decimal("0.00"))})
        m = _COUNT_RE.search(instruction)
        if m and inputs:
            coll = m.group(1)
            items = inputs[0].get(coll, ()) if isinstance(inputs[0], Mapping) else inputs[0]
            return _dump({"value": len(items)})
        return json.dumps({"error": "unsupported reasoning step"})

    def _refine_task(self, payload):
        sentences = _SENTENCE_SPLIT.split(payload["question"])
        kept = [s for i, s in enumerate(sentences) if i == 0 or not s.startswith(READ_ONLY_PREFIXES)]
        if len(kept) <= 1:
            kept = sentences
        return " ".join(kept)

    def _refine_task_retry(self, payload):
        return payload["question"]

    # -- rollout --------------------------------------------------------------

    def _user_turn(self, payload):
        conversation = payload.get("conversation", [])
        if not conversation:
            return payload["instruction"]
        last = conversation[-1]["text"].lower()
        if any(m in last for m in DONE_MARKERS):
            return STOP_TOKEN
        return "Please handle everything in my request: " + payload["instruction"]

    def _policy_turn(self, payload):
        return json.dumps({"reasoning": "No plan available offline.", "ask_user": "I have completed your request."})

    def _meu_judge(self, payload):
        # True (user erred) when a user turn states a fact absent from the instruction
        instruction = payload.get("instruction", "")
        for turn in payload.get("conversation", []):
            if turn.get("role") != "user" or turn.get("text", "").strip() == STOP_TOKEN:
                continue
            for fact in _FACT_RE.findall(turn["text"]):
                if fact.strip(".,'") not in instruction:
                    return "True"
        return "False"

