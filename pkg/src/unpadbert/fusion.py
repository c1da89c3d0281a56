"""Kernel-count accounting for fusion rules over a BERT operator graph.

Every node of an :class:`OpGraph` is one primitive kernel. A fusion rule
matches a chain of forward nodes (plus the backward nodes derived from them)
and regroups those nodes into fewer kernels. Nothing is executed; the result
is a list of kernels, each a set of primitive nodes, from which forward and
backward counts are read off.

The primitive decomposition behind each pattern is a reconstruction chosen to
be a plausible unfused implementation:

* Linear: GEMM + bias add; backward is data-grad GEMM, weight-grad GEMM and
  a bias reduction. Fused: GEMM with bias epilogue; weight-grad GEMM with
  bias-reduce epilogue.
* Linear_GeLU_Linear: two Linears around a GeLU. Fused: GeLU folded into the
  first GEMM epilogue and GeLU-grad into the second data-grad GEMM.
* Dropout_Add_LayerNorm: backward is LayerNorm input grad, a two-stage
  gamma/beta reduction, the branch-gradient copy of the add, and the dropout
  mask multiply. Fused into one elementwise+LayerNorm kernel and one reduction.
* ResidualGrad: where a residual input fans out to a Linear and the skip
  path, its two gradients are summed by an add kernel. The fused form
  accumulates into the data-grad GEMM output (GEMM ``beta = 1``), so the add
  is absorbed into that GEMM, whichever kernel the GEMM itself belongs to.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import AmbiguousFusionError, InvalidInputError


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    phase: str  # "forward" | "backward"
    inputs: tuple[int, ...] = ()
    source: int | None = None  # forward node a backward node differentiates
    scope: str = ""


@dataclass
class OpGraph:
    nodes: list[Node] = field(default_factory=list)

    def add(self, op: str, inputs: Sequence[int] = (), phase: str = "forward",
            source: int | None = None, scope: str = "") -> int:
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise InvalidInputError(f"node {nid} ({op}) reads from unknown node {i}")
        if phase == "backward" and source is None:
            raise InvalidInputError(f"backward node {op} needs a forward source")
        self.nodes.append(Node(nid, op, phase, tuple(inputs), source, scope))
        return nid

    def grad(self, source: int, op: str, inputs: Sequence[int] = ()) -> int:
        return self.add(op, inputs, "backward", source, self.nodes[source].scope)

    def forward_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.phase == "forward"]

    def consumers(self, nid: int) -> list[int]:
        return [n.id for n in self.nodes if n.phase == "forward" and nid in n.inputs]

    def backward_of(self, source: int, op: str) -> list[int]:
        return [n.id for n in self.nodes if n.source == source and n.op == op]

    def validate(self) -> None:
        for n in self.nodes:
            if n.phase == "backward":
                src = self.nodes[n.source] if n.source is not None and n.source < len(self.nodes) else None
                if src is None or src.phase != "forward":
                    raise InvalidInputError(f"backward node {n.id} is not linked to a forward node")
            elif n.phase != "forward":
                raise InvalidInputError(f"node {n.id} has unknown phase {n.phase!r}")


@dataclass(frozen=True)
class FusionRule:
    """A forward op chain and how its nodes regroup into fused kernels.

    ``forward_groups`` holds chain positions; ``backward_groups`` holds
    ``(chain position, backward op)`` pairs. Each group is one fused kernel.
    """

    name: str
    chain: tuple[str, ...]
    forward_groups: tuple[tuple[int, ...], ...]
    backward_groups: tuple[tuple[tuple[int, str], ...], ...]

    @property
    def unfused(self) -> tuple[int, int]:
        return (len(self.chain), sum(len(g) for g in self.backward_groups))

    @property
    def fused(self) -> tuple[int, int]:
        return (len(self.forward_groups), len(self.backward_groups))


LINEAR = FusionRule(
    "Linear",
    ("gemm", "bias_add"),
    ((0, 1),),
    (((0, "gemm_dgrad"),), ((0, "gemm_wgrad"), (1, "bias_grad"))),
)
LINEAR_GELU_LINEAR = FusionRule(
    "Linear_GeLU_Linear",
    ("gemm", "bias_add", "gelu", "gemm", "bias_add"),
    ((0, 1, 2), (3, 4)),
    (
        ((3, "gemm_dgrad"), (2, "gelu_grad")),
        ((3, "gemm_wgrad"), (4, "bias_grad")),
        ((0, "gemm_dgrad"),),
        ((0, "gemm_wgrad"), (1, "bias_grad")),
    ),
)
DROPOUT_ADD_LAYERNORM = FusionRule(
    "Dropout_Add_LayerNorm",
    ("dropout", "add", "layernorm"),
    ((0, 1, 2),),
    (
        ((2, "layernorm_grad_input"), (1, "add_grad"), (0, "dropout_grad")),
        ((2, "layernorm_grad_params_partial"), (2, "layernorm_grad_params_final")),
    ),
)
RESIDUAL_GRAD = "ResidualGrad"

# matching priority: longer patterns first so a bare Linear cannot take half of one
RULE_ORDER = (LINEAR_GELU_LINEAR.name, DROPOUT_ADD_LAYERNORM.name, LINEAR.name, RESIDUAL_GRAD)
CHAIN_RULES = {r.name: r for r in (LINEAR_GELU_LINEAR, DROPOUT_ADD_LAYERNORM, LINEAR)}
ALL_RULES = frozenset(RULE_ORDER)

# published per-pattern counts: (forward, backward) unfused -> fused
PUBLISHED_COUNTS = {
    "Linear": ((2, 3), (1, 2)),
    "Linear_GeLU_Linear": ((5, 7), (2, 4)),
    "Dropout_Add_LayerNorm": ((3, 5), (1, 2)),
    "ResidualGrad": ((0, 2), (0, 1)),
}


def rule_counts(name: str) -> tuple[tuple[int, int], tuple[int, int]]:
    """Per-instance (forward, backward) counts, unfused then fused."""
    if name == RESIDUAL_GRAD:
        return (0, 2), (0, 1)
    r = CHAIN_RULES[name]
    return r.unfused, r.fused


# -- canonical graph ---------------------------------------------------------


def _linear(g: OpGraph, x: int, scope: str) -> tuple[int, int]:
    mm = g.add("gemm", [x], scope=scope)
    return mm, g.add("bias_add", [mm], scope=scope)


def canonical_encoder_graph(num_layers: int = 1) -> OpGraph:
    """Embedding block followed by ``num_layers`` post-LN encoder layers, with backward."""
    if num_layers < 1:
        raise InvalidInputError("num_layers must be >= 1")
    g = OpGraph()
    word = g.add("embedding_lookup", scope="embeddings.word")
    pos = g.add("embedding_lookup", scope="embeddings.position")
    typ = g.add("embedding_lookup", scope="embeddings.token_type")
    s = g.add("add", [word, pos], scope="embeddings")
    s = g.add("add", [s, typ], scope="embeddings")
    s = g.add("layernorm", [s], scope="embeddings")
    x = g.add("dropout", [s], scope="embeddings")

    layers = []
    for i in range(num_layers):
        p = f"encoder.{i}"
        qkv_mm, qkv = _linear(g, x, f"{p}.attn.qkv")
        ctx = g.add("fmha", [qkv], scope=f"{p}.attn.core")
        o_mm, o = _linear(g, ctx, f"{p}.attn.out")
        d1 = g.add("dropout", [o], scope=f"{p}.attn.residual")
        a1 = g.add("add", [d1, x], scope=f"{p}.attn.residual")
        h = g.add("layernorm", [a1], scope=f"{p}.attn.residual")
        f1_mm, f1 = _linear(g, h, f"{p}.ffn.in")
        act = g.add("gelu", [f1], scope=f"{p}.ffn.act")
        f2_mm, f2 = _linear(g, act, f"{p}.ffn.out")
        d2 = g.add("dropout", [f2], scope=f"{p}.ffn.residual")
        a2 = g.add("add", [d2, h], scope=f"{p}.ffn.residual")
        y = g.add("layernorm", [a2], scope=f"{p}.ffn.residual")
        layers.append(dict(x=x, qkv=(qkv_mm, qkv), ctx=ctx, o=(o_mm, o), r1=(d1, a1, h),
                           f1=(f1_mm, f1), act=act, f2=(f2_mm, f2), r2=(d2, a2, y)))
        x = y

    def linear_grad(mm, bias):
        db = g.grad(bias, "bias_grad")
        dx = g.grad(mm, "gemm_dgrad", [db])
        g.grad(mm, "gemm_wgrad", [db])
        return dx

    def dal_grad(d, a, ln):
        gi = g.grad(ln, "layernorm_grad_input")
        part = g.grad(ln, "layernorm_grad_params_partial")
        g.grad(ln, "layernorm_grad_params_final", [part])
        # the add's gradient is materialized separately for the dropout branch
        branch = g.grad(a, "add_grad", [gi])
        return gi, g.grad(d, "dropout_grad", [branch])

    for L in reversed(layers):
        skip2, branch2 = dal_grad(*L["r2"])
        dact = linear_grad(*L["f2"])
        dgelu = g.grad(L["act"], "gelu_grad", [dact])
        dh_lin = linear_grad(*L["f1"])
        # residual input h fans out to ffn.in and the skip: sum both gradients
        g.grad(L["r1"][2], "residual_grad_add", [dh_lin, skip2])
        skip1, branch1 = dal_grad(*L["r1"])
        dctx = linear_grad(*L["o"])
        dqkv = g.grad(L["ctx"], "fmha_grad", [dctx])
        dx_lin = linear_grad(*L["qkv"])
        g.grad(L["x"], "residual_grad_add", [dx_lin, skip1])
    # embedding block: dropout and LayerNorm grads, then one weight grad per
    # table (the sum feeding each table needs no kernel of its own)
    emb_drop = layers[0]["x"]
    emb_ln = g.nodes[emb_drop].inputs[0]
    g.grad(emb_drop, "dropout_grad")
    g.grad(emb_ln, "layernorm_grad_input")
    part = g.grad(emb_ln, "layernorm_grad_params_partial")
    g.grad(emb_ln, "layernorm_grad_params_final", [part])
    for emb in (word, pos, typ):
        g.grad(emb, "embedding_grad")
    g.validate()
    return g


# -- matching and counting ---------------------------------------------------


@dataclass(frozen=True)
class Match:
    rule: str
    forward: tuple[int, ...]
    kernels: tuple[tuple[int, ...], ...]  # fused groups of node ids
    host: int | None = None  # ResidualGrad: the GEMM kernel node absorbing the add


def _match_chain(g: OpGraph, rule: FusionRule, start: Node) -> tuple[int, ...] | None:
    if start.op != rule.chain[0]:
        return None
    ids = [start.id]
    for op in rule.chain[1:]:
        cons = g.consumers(ids[-1])
        # interior results must feed only the next op, or fusing them is illegal
        if len(cons) != 1 or g.nodes[cons[0]].op != op:
            return None
        ids.append(cons[0])
    return tuple(ids)


def find_matches(g: OpGraph, enabled_rules: Iterable[str]) -> list[Match]:
    enabled = set(enabled_rules)
    unknown = enabled - ALL_RULES
    if unknown:
        raise InvalidInputError(f"unknown fusion rules: {sorted(unknown)}")
    claimed: dict[int, str] = {}
    matches: list[Match] = []

    def claim(nodes: Sequence[int], rule: str) -> None:
        for n in nodes:
            claimed[n] = rule

    for name in RULE_ORDER:
        if name not in enabled:
            continue
        if name == RESIDUAL_GRAD:
            for n in g.nodes:
                if n.op != "residual_grad_add":
                    continue
                hosts = [i for i in n.inputs if g.nodes[i].op == "gemm_dgrad"]
                if len(hosts) != 1:
                    raise AmbiguousFusionError(f"residual add {n.id} needs exactly one data-grad GEMM input")
                if n.id in claimed:
                    raise AmbiguousFusionError(f"residual add {n.id} already claimed by {claimed[n.id]}")
                claim([n.id], name)
                matches.append(Match(name, (), (), hosts[0]))
            continue
        rule = CHAIN_RULES[name]
        for start in g.forward_nodes():
            fwd = _match_chain(g, rule, start)
            if fwd is None:
                continue
            groups = [tuple(fwd[i] for i in grp) for grp in rule.forward_groups]
            for grp in rule.backward_groups:
                ids = []
                for pos, op in grp:
                    found = g.backward_of(fwd[pos], op)
                    if len(found) != 1:
                        break
                    ids.append(found[0])
                else:
                    groups.append(tuple(ids))
                    continue
                groups = None
                break
            if groups is None:
                continue
            nodes = [n for grp in groups for n in grp]
            taken = [n for n in nodes if n in claimed]
            if len(taken) == len(nodes):
                continue  # subsumed by a higher-priority match
            if taken:
                raise AmbiguousFusionError(
                    f"{name} match at node {start.id} overlaps {sorted({claimed[n] for n in taken})}"
                )
            claim(nodes, name)
            matches.append(Match(name, fwd, tuple(groups)))
    return matches


def fused_kernels(g: OpGraph, enabled_rules: Iterable[str]) -> list[tuple[int, ...]]:
    """The kernel list after fusion; every node appears in exactly one kernel."""
    matches = find_matches(g, enabled_rules)
    kernels: list[list[int]] = []
    owner: dict[int, int] = {}
    for m in matches:
        for grp in m.kernels:
            owner.update({n: len(kernels) for n in grp})
            kernels.append(list(grp))
    for n in g.nodes:
        if n.id not in owner and n.op != "residual_grad_add":
            owner[n.id] = len(kernels)
            kernels.append([n.id])
    residual_hosts = {}
    for m in matches:
        if m.rule == RESIDUAL_GRAD:
            residual_hosts[next(n.id for n in g.nodes if n.op == "residual_grad_add" and m.host in n.inputs)] = m.host
    for n in g.nodes:
        if n.op == "residual_grad_add":
            if n.id in residual_hosts:
                kernels[owner[residual_hosts[n.id]]].append(n.id)
            else:
                kernels.append([n.id])
    return [tuple(k) for k in kernels]


def _phase_counts(g: OpGraph, kernels: Sequence[Sequence[int]]) -> dict:
    fwd = sum(1 for k in kernels if g.nodes[k[0]].phase == "forward")
    bwd = len(kernels) - fwd
    return {"forward": fwd, "backward": bwd, "total": fwd + bwd}


def count_kernels(g: OpGraph, enabled_rules: Iterable[str] = ALL_RULES) -> dict:
    """Kernel counts per pattern and overall, unfused vs with ``enabled_rules``."""
    enabled = set(enabled_rules)
    matches = find_matches(g, enabled)
    patterns = {}
    for name in RULE_ORDER:
        inst = [m for m in matches if m.rule == name]
        (uf, ub), (ff, fb) = rule_counts(name)
        k = len(inst)
        patterns[name] = {
            "enabled": name in enabled,
            "instances": k,
            "per_instance": {
                "forward": [uf, ff],
                "backward": [ub, fb],
                "total": [uf + ub, ff + fb],
            },
            "forward": [k * uf, k * ff],
            "backward": [k * ub, k * fb],
            "total": [k * (uf + ub), k * (ff + fb)],
        }
    unfused = _phase_counts(g, [(n.id,) for n in g.nodes])
    fused = _phase_counts(g, fused_kernels(g, enabled))
    return {"patterns": patterns, "overall": {"unfused": unfused, "fused": fused}}


def table_rows(g: OpGraph | None = None) -> list[dict]:
    """Per-pattern rows in the published table layout, read off the matched graph."""
    g = g or canonical_encoder_graph()
    counts = count_kernels(g, ALL_RULES)["patterns"]
    rows = []
    for name in PUBLISHED_COUNTS:
        p = counts[name]["per_instance"]
        if counts[name]["instances"] == 0:
            raise InvalidInputError(f"graph has no {name} instance")
        rows.append({
            "pattern": name,
            "instances": counts[name]["instances"],
            "forward_unfused": p["forward"][0],
            "forward_fused": p["forward"][1],
            "backward_unfused": p["backward"][0],
            "backward_fused": p["backward"][1],
            "total_unfused": p["total"][0],
            "total_fused": p["total"][1],
            "reduction": p["total"][0] / p["total"][1],
        })
    return rows
