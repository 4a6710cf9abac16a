"""Local explanations: super-prototype overlays plus the QBAF with strengths."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import qbaf as Q

FORMATS = ("structured-text", "graph-file", "raster-bundle")
GREEN = np.array([0.0, 1.0, 0.0])
RED = np.array([1.0, 0.0, 0.0])


class SourceMismatchError(ValueError):
    pass


@dataclass
class Provenance:
    prototype: int
    image_index: int
    h: int
    w: int
    similarity: float


@dataclass
class Explanation:
    image: np.ndarray
    image_index: int | None
    predicted_class: int
    probability: float
    probabilities: list[float]
    ss: list[float]
    heatmaps: np.ndarray                    # [K, size, size], signed
    provenance: list[Provenance]
    qbaf: Q.Qbaf
    strengths: Q.StrengthAssignment
    cluster_labels: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image_index": self.image_index,
            "predicted_class": self.predicted_class,
            "probability": self.probability,
            "probabilities": list(self.probabilities),
            "ss": list(self.ss),
            "image": self.image.tolist(),
            "heatmaps": self.heatmaps.tolist(),
            "provenance": [vars(p) for p in self.provenance],
            "cluster_labels": dict(self.cluster_labels),
            "qbaf": Q.to_dict(self.qbaf, self.strengths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        qd = d["qbaf"]
        qbaf = Q.from_dict(qd)
        strengths = Q.StrengthAssignment(
            dict(qd["strengths"]),
            np.array([qd["strengths"][a.id] for a in qbaf.layer(qbaf.n_layers - 1)]),
            np.array(qd["probabilities"]))
        return cls(np.array(d["image"]), d["image_index"], d["predicted_class"],
                   d["probability"], list(d["probabilities"]), list(d["ss"]),
                   np.array(d["heatmaps"]), [Provenance(**p) for p in d["provenance"]],
                   qbaf, strengths, dict(d["cluster_labels"]))


def label_clusters(qbaf: Q.Qbaf) -> dict[str, str]:
    """Tag each hidden argument with the input argument that supports it most.

    Arguments without any supporting input are left out.
    """
    inputs = {a.id for a in qbaf.layer(0)}
    best: dict[str, tuple[float, str]] = {}
    for e in qbaf.edges:
        if e.src in inputs and e.weight > 0:
            if e.dst not in best or e.weight > best[e.dst][0]:
                best[e.dst] = (e.weight, e.src)
    return {a.id: best[a.id][1] for a in qbaf.hidden_arguments() if a.id in best}


def explain(params: M.ModelParams, qbaf: Q.Qbaf, image: np.ndarray,
            projection: M.ProjectionReport | None = None,
            image_index: int | None = None) -> Explanation:
    cfg = params.config
    if qbaf.source_hash != params.digest():
        raise SourceMismatchError(
            f"QBAF was built from model {qbaf.source_hash[:12] or '<unknown>'}, "
            f"not from {params.digest()[:12]}")
    if not cfg.use_super_prototypes:
        raise ValueError("explanations need a model with super-prototypes")
    trace = M.forward(params, image)
    ss = trace.ss.data[0]
    strengths = Q.forward_strengths(qbaf, ss)
    size = cfg.image_size
    heatmaps = np.stack([M.upscale_heatmap(trace.sp.data[0, k], cfg.stride, size)
                         for k in range(cfg.n_classes)])
    provenance = []
    if projection is not None:
        provenance = [Provenance(i, int(projection.image_index[i]), int(projection.h[i]),
                                 int(projection.w[i]), float(projection.similarity[i]))
                      for i in range(len(projection.image_index))]
    pred = strengths.predicted
    return Explanation(
        image=np.asarray(image, dtype=np.float64),
        image_index=image_index,
        predicted_class=pred,
        probability=float(strengths.probabilities[pred]),
        probabilities=[float(p) for p in strengths.probabilities],
        ss=[float(v) for v in ss],
        heatmaps=heatmaps,
        provenance=provenance,
        qbaf=qbaf,
        strengths=strengths,
        cluster_labels=label_clusters(qbaf),
    )


def render_overlay(image: np.ndarray, heatmap: np.ndarray, max_alpha: float = 0.6) -> np.ndarray:
    """Blend green over positive (supporting) and red over negative (attacking)
    regions, with alpha proportional to ``|value| / max|value|``."""
    image = np.asarray(image, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.shape != image.shape[:2]:
        raise ValueError(f"heatmap {heatmap.shape} does not match image {image.shape[:2]}")
    peak = np.abs(heatmap).max()
    if peak == 0:
        return image.copy()
    a = heatmap / peak
    alpha = (max_alpha * np.abs(a))[..., None]
    color = np.where((a > 0)[..., None], GREEN, RED)
    return (1 - alpha) * image + alpha * color


def crop_provenance(image: np.ndarray, h: int, w: int, stride: int = 4) -> np.ndarray:
    """Pixel block of a latent position, using the same block as upscaling."""
    return image[stride * h:stride * (h + 1), stride * w:stride * (w + 1)]


def ppm_bytes(raster: np.ndarray, scale: int = 1) -> bytes:
    """Binary PPM (P6) of a float RGB raster in [0, 1]."""
    px = np.clip(np.round(np.asarray(raster) * 255), 0, 255).astype(np.uint8)
    if scale > 1:
        px = np.repeat(np.repeat(px, scale, axis=0), scale, axis=1)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def export(explanation: Explanation, fmt: str, path, scale: int = 1,
           max_alpha: float = 0.6) -> list[Path]:
    """Write one export format; returns the files written.

    ``raster-bundle`` treats ``path`` as a directory and writes the input
    image plus one overlay per class.
    """
    path = Path(path)
    if fmt == "structured-text":
        path.write_text(json.dumps(explanation.to_dict()) + "\n")
        return [path]
    if fmt == "graph-file":
        path.write_text(Q.to_graph_text(explanation.qbaf, explanation.strengths))
        return [path]
    if fmt == "raster-bundle":
        path.mkdir(parents=True, exist_ok=True)
        files = [path / "input.ppm"]
        files[0].write_bytes(ppm_bytes(explanation.image, scale))
        for k, heat in enumerate(explanation.heatmaps):
            f = path / f"overlay_class{k}.ppm"
            f.write_bytes(ppm_bytes(render_overlay(explanation.image, heat, max_alpha), scale))
            files.append(f)
        return files
    raise ValueError(f"unknown export format {fmt!r}; expected one of {', '.join(FORMATS)}")


def load_structured(path) -> Explanation:
    return Explanation.from_dict(json.loads(Path(path).read_text()))
