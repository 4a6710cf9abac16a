"""MLP classifiers read as quantitative bipolar argumentation frameworks.

Every neuron becomes an argument whose base score is its bias; every nonzero
weight becomes a support (positive) or attack (negative) edge. Final strengths
under the MLP's own semantics equal the neuron activations, so the QBAF is an
exact reading of the classifier. Sparsification clusters hidden neurons with
similar activation profiles and merges each cluster into one argument.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from .tensor import softmax

INFLUENCES = ("identity", "relu", "softmax")


@dataclass
class Argument:
    id: str
    layer: int
    base: float
    kind: str  # input | hidden | output
    members: list[int]


@dataclass
class Edge:
    src: str
    dst: str
    weight: float

    @property
    def relation(self) -> str:
        return "support" if self.weight > 0 else "attack"


@dataclass
class Qbaf:
    arguments: list[Argument]
    edges: list[Edge]
    influence: list[str]
    source_hash: str = ""
    _mats: list | None = field(default=None, repr=False, compare=False)

    def layer(self, index: int) -> list[Argument]:
        return [a for a in self.arguments if a.layer == index]

    @property
    def n_layers(self) -> int:
        return len(self.influence)

    def hidden_arguments(self) -> list[Argument]:
        return [a for a in self.arguments if a.kind == "hidden"]

    def matrices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Dense ``(weights [n_l, n_l+1], base scores [n_l+1])`` per layer transition."""
        if self._mats is None:
            pos = {}
            sizes = []
            for l in range(self.n_layers):
                args = self.layer(l)
                sizes.append(len(args))
                for i, a in enumerate(args):
                    pos[a.id] = (l, i)
            mats = []
            for l in range(self.n_layers - 1):
                base = np.array([a.base for a in self.layer(l + 1)], dtype=np.float64)
                mats.append([np.zeros((sizes[l], sizes[l + 1])), base])
            for e in self.edges:
                (ls, i), (ld, j) = pos[e.src], pos[e.dst]
                if ld != ls + 1:
                    raise ValueError(f"edge {e.src}->{e.dst} skips a layer")
                mats[ls][0][i, j] = e.weight
            self._mats = [tuple(m) for m in mats]
        return self._mats


@dataclass
class StrengthAssignment:
    strengths: dict[str, float]
    logits: np.ndarray
    probabilities: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits))


def _influence(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x  # identity; softmax is applied separately to the output layer


def mlp_to_qbaf(layers: list[tuple[np.ndarray, np.ndarray]], source_hash: str = "") -> Qbaf:
    """One argument per input feature, hidden neuron and class.

    ``layers`` holds ``(W [n_in, n_out], b [n_out])`` pairs; hidden layers use
    ReLU and the last layer is linear with softmax read-out.
    """
    n_in = layers[0][0].shape[0]
    args = [Argument(f"in{j}", 0, 0.0, "input", [j]) for j in range(n_in)]
    ids = [[a.id for a in args]]
    for l, (w, b) in enumerate(layers, start=1):
        last = l == len(layers)
        kind = "output" if last else "hidden"
        layer_ids = [f"out{i}" if last else f"h{l}.{i}" for i in range(w.shape[1])]
        args += [Argument(layer_ids[i], l, float(b[i]), kind, [i]) for i in range(w.shape[1])]
        ids.append(layer_ids)
    edges = []
    for l, (w, _) in enumerate(layers):
        src, dst = np.nonzero(w)
        edges += [Edge(ids[l][i], ids[l + 1][j], float(w[i, j])) for i, j in zip(src, dst)]
    influence = ["identity"] + ["relu"] * (len(layers) - 1) + ["softmax"]
    return Qbaf(args, edges, influence, source_hash)


def layer_strengths(qbaf: Qbaf, inputs: np.ndarray) -> list[np.ndarray]:
    """Per-layer final strengths ``[S, n_l]`` for a batch of inputs ``[S, n_0]``.

    The output layer entry holds pre-softmax strengths.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    n_in = len(qbaf.layer(0))
    if x.shape[1] != n_in:
        raise ValueError(f"expected {n_in} input strengths, got {x.shape[1]}")
    out = [x]
    for l, (w, b) in enumerate(qbaf.matrices(), start=1):
        x = _influence(qbaf.influence[l], x @ w + b)
        out.append(x)
    return out


def forward_strengths(qbaf: Qbaf, ss) -> StrengthAssignment:
    layers = layer_strengths(qbaf, ss)
    strengths = {}
    for l, values in enumerate(layers):
        for a, v in zip(qbaf.layer(l), values[0]):
            strengths[a.id] = float(v)
    logits = layers[-1][0]
    return StrengthAssignment(strengths, logits, softmax(logits))


def mlp_activations(layers: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> list[np.ndarray]:
    """Reference MLP forward pass: ``[inputs, hidden..., logits]``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = [x]
    for l, (w, b) in enumerate(layers):
        x = x @ w + b
        if l < len(layers) - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return acts


# ---------------------------------------------------------------------------
# sparsification


def n_clusters(width: int, ratio: float) -> int:
    return max(1, int(round((1 - ratio) * width)))


def cluster_hidden(profiles: np.ndarray, ratio: float, seed: int = 0,
                   max_iter: int = 100, tol: float = 1e-9) -> np.ndarray:
    """k-means partition of neurons (rows of ``profiles``) into
    ``max(1, round((1 - ratio) * width))`` clusters.

    Labels are renumbered by first occurrence. Rows that are exactly equal
    always share a cluster, so fewer clusters come back when the profile
    matrix has fewer distinct rows than requested (except at ``ratio=0``,
    which is the identity partition).
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    if not 0 <= ratio < 1:
        raise ValueError(f"compression ratio must lie in [0, 1), got {ratio}")
    width = profiles.shape[0]
    if profiles.ndim != 2 or profiles.shape[1] == 0:
        raise ValueError("activation profiles need at least one reference sample")
    k = n_clusters(width, ratio)
    if k > width:
        warnings.warn(f"requested {k} clusters for {width} neurons; clamping", stacklevel=2)
        k = width
    if k == width:
        return np.arange(width)
    distinct, inverse = np.unique(profiles, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if k >= len(distinct):
        labels = inverse
    else:
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, tol=tol,
                    random_state=seed, algorithm="lloyd")
        # identical rows collapse onto one weighted point so they cannot split
        counts = np.bincount(inverse)
        labels = km.fit(distinct, sample_weight=counts).labels_[inverse]
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[np.unique(labels)[order]] = np.arange(len(order))
    return remap[labels]


def _assignment(labels: np.ndarray) -> np.ndarray:
    a = np.zeros((len(labels), labels.max() + 1))
    a[np.arange(len(labels)), labels] = 1.0
    return a


def sparsify(qbaf: Qbaf, partitions: list[np.ndarray]) -> Qbaf:
    """Merge each cluster of hidden arguments into one argument.

    ``partitions[l]`` labels the arguments of hidden layer ``l + 1``. A merged
    argument takes the mean of its members' base scores and incoming weights,
    and the sum of their outgoing weights.
    """
    n_hidden = qbaf.n_layers - 2
    if len(partitions) != n_hidden:
        raise ValueError(f"need one partition per hidden layer ({n_hidden}), got {len(partitions)}")
    mats = qbaf.matrices()
    layer_args = [qbaf.layer(l) for l in range(qbaf.n_layers)]
    assign = [np.eye(len(layer_args[0]))]
    for l, labels in enumerate(partitions, start=1):
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != len(layer_args[l]):
            raise ValueError(f"partition of layer {l} covers {len(labels)} of "
                             f"{len(layer_args[l])} arguments")
        if np.any(np.bincount(labels) == 0):
            raise ValueError(f"partition of layer {l} has empty clusters")
        assign.append(_assignment(labels))
    assign.append(np.eye(len(layer_args[-1])))

    args = list(layer_args[0])
    new_ids = [[a.id for a in layer_args[0]]]
    for l in range(1, qbaf.n_layers):
        a = assign[l]
        mean = a / a.sum(axis=0)
        base = mean.T @ mats[l - 1][1]
        if l == qbaf.n_layers - 1:
            layer_new = [Argument(x.id, l, float(base[i]), x.kind, list(x.members))
                         for i, x in enumerate(layer_args[l])]
        else:
            layer_new = []
            for c in range(a.shape[1]):
                idx = np.nonzero(a[:, c])[0]
                members = sorted(m for i in idx for m in layer_args[l][i].members)
                layer_new.append(Argument(f"h{l}.c{c}", l, float(base[c]), "hidden", members))
        args += layer_new
        new_ids.append([x.id for x in layer_new])

    edges = []
    for l, (w, _) in enumerate(mats):
        mean_dst = assign[l + 1] / assign[l + 1].sum(axis=0)
        w_new = assign[l].T @ w @ mean_dst
        src, dst = np.nonzero(w_new)
        edges += [Edge(new_ids[l][i], new_ids[l + 1][j], float(w_new[i, j]))
                  for i, j in zip(src, dst)]
    return Qbaf(args, edges, list(qbaf.influence), qbaf.source_hash)


def sparsify_mlp(layers, reference_inputs: np.ndarray, ratio: float, seed: int = 0,
                 source_hash: str = "") -> Qbaf:
    """Cluster every hidden layer independently on its activations over the
    reference inputs and return the merged QBAF."""
    qbaf = mlp_to_qbaf(layers, source_hash)
    acts = mlp_activations(layers, reference_inputs)
    partitions = [cluster_hidden(a.T, ratio, seed) for a in acts[1:-1]]
    return sparsify(qbaf, partitions)


def unfaithfulness(layers, sparse: Qbaf, inputs: np.ndarray,
                   labels: np.ndarray | None = None) -> dict[str, float]:
    """Deviation of a sparsified QBAF from the MLP it summarises.

    ``hidden``: mean over samples and cluster arguments of
    |cluster strength - mean activation of its member neurons|.
    ``output``: mean absolute difference of class probabilities.
    ``accuracy`` (with labels): accuracy of the sparsified QBAF.
    """
    inputs = np.atleast_2d(inputs)
    if len(inputs) == 0:
        raise ValueError("evaluation set is empty")
    acts = mlp_activations(layers, inputs)
    strengths = layer_strengths(sparse, inputs)
    diffs = []
    for l in range(1, sparse.n_layers - 1):
        for c, arg in enumerate(sparse.layer(l)):
            member_mean = acts[l][:, arg.members].mean(axis=1)
            diffs.append(np.abs(strengths[l][:, c] - member_mean))
    hidden = float(np.mean(diffs)) if diffs else 0.0
    p_orig = softmax(acts[-1])
    p_sparse = softmax(strengths[-1])
    out = {"hidden": hidden, "output": float(np.mean(np.abs(p_orig - p_sparse)))}
    if labels is not None:
        out["accuracy"] = float(np.mean(strengths[-1].argmax(axis=1) == np.asarray(labels)))
    return out


def cognitive_complexity(qbaf: Qbaf, n_super_prototypes: int, include_outputs: bool = True) -> int:
    """Super-prototypes + hidden arguments (+ output arguments unless excluded)."""
    n = n_super_prototypes + len(qbaf.hidden_arguments())
    if include_outputs:
        n += len(qbaf.layer(qbaf.n_layers - 1))
    return n


# ---------------------------------------------------------------------------
# export


def _fmt(x: float) -> str:
    return repr(float(x))


def to_graph_text(qbaf: Qbaf, strengths: StrengthAssignment | None = None) -> str:
    """One ``node`` line per argument and one ``edge`` line per relation.

    ``node <id> <layer> <base> <kind> <member_count> [<strength>]``
    ``edge <from> <to> <weight> attack|support``
    """
    lines = [f"# qbaf 1 source={qbaf.source_hash} influence={','.join(qbaf.influence)}"]
    for a in qbaf.arguments:
        line = f"node {a.id} {a.layer} {_fmt(a.base)} {a.kind} {len(a.members)}"
        if strengths is not None:
            line += f" {_fmt(strengths.strengths[a.id])}"
        lines.append(line)
    for e in qbaf.edges:
        lines.append(f"edge {e.src} {e.dst} {_fmt(e.weight)} {e.relation}")
    return "\n".join(lines) + "\n"


def to_dict(qbaf: Qbaf, strengths: StrengthAssignment | None = None) -> dict:
    d = {
        "format": "protoargnet-qbaf",
        "version": 1,
        "source_hash": qbaf.source_hash,
        "influence": list(qbaf.influence),
        "arguments": [{"id": a.id, "layer": a.layer, "base": a.base, "kind": a.kind,
                       "members": list(a.members)} for a in qbaf.arguments],
        "edges": [{"from": e.src, "to": e.dst, "weight": e.weight, "relation": e.relation}
                  for e in qbaf.edges],
    }
    if strengths is not None:
        d["strengths"] = dict(strengths.strengths)
        d["probabilities"] = [float(p) for p in strengths.probabilities]
    return d


def from_dict(d: dict) -> Qbaf:
    if d.get("format") != "protoargnet-qbaf":
        raise ValueError("not a QBAF document")
    args = [Argument(a["id"], a["layer"], a["base"], a["kind"], list(a["members"]))
            for a in d["arguments"]]
    edges = [Edge(e["from"], e["to"], e["weight"]) for e in d["edges"]]
    return Qbaf(args, edges, list(d["influence"]), d.get("source_hash", ""))


def save_json(qbaf: Qbaf, path, strengths: StrengthAssignment | None = None) -> None:
    Path(path).write_text(json.dumps(to_dict(qbaf, strengths), indent=1) + "\n")


def load_json(path) -> Qbaf:
    return from_dict(json.loads(Path(path).read_text()))
