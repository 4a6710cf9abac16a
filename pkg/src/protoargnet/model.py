"""Prototype network with channel-wise max, super-prototypes and an MLP head.

Forward pipeline, per image::

    x -> backbone -> z [H,W,D] -> similarity map SM [H,W,N]
      -> channel-wise max CWM [H,W,N] -> linear combinations LC [K,M,H,W]
      -> super-prototypes SP [K,H,W] -> similarity scores ss [K] -> logits [K]

All functions operate on a leading batch axis.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIMILARITIES = ("cosine", "negL2")
CLASSIFIERS = ("mlp", "fixed")


@dataclass
class ModelConfig:
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32])
    head_channels: list[int] = field(default_factory=lambda: [32])   # unpooled 3x3 stages
    n_prototypes: int = 64
    n_combinations: int = 8
    proto_h: int = 1
    proto_w: int = 1
    n_classes: int = 2
    mlp_hidden: list[int] = field(default_factory=lambda: [100])
    similarity: str = "cosine"
    classifier: str = "mlp"
    use_super_prototypes: bool = True
    epsilon: float = 1e-8
    image_size: int = 28
    in_channels: int = 3
    init_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_prototypes < 1 or self.n_combinations < 1:
            raise ValueError("n_prototypes and n_combinations must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if (self.proto_h, self.proto_w) != (1, 1):
            raise ValueError("only 1x1 prototypes are supported")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}, got {self.classifier!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise ValueError("backbone_channels must be a non-empty list of positive widths")
        if min(self.head_channels, default=1) < 1:
            raise ValueError("head_channels widths must be positive")
        if min(self.mlp_hidden, default=1) < 1:
            raise ValueError("mlp_hidden widths must be positive")
        if self.latent_size < 1:
            raise ValueError(f"{len(self.backbone_channels)} pooling stages collapse a "
                             f"{self.image_size}px image")

    @property
    def latent_size(self) -> int:
        s = self.image_size
        for _ in self.backbone_channels:
            s //= 2
        return s

    @property
    def latent_dim(self) -> int:
        return (self.head_channels or self.backbone_channels)[-1]

    @property
    def conv_channels(self) -> list[int]:
        return list(self.backbone_channels) + list(self.head_channels)

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def classifier_inputs(self) -> int:
        return self.n_classes if self.use_super_prototypes else self.n_prototypes

    @property
    def hidden_layers(self) -> list[int]:
        return list(self.mlp_hidden) if self.classifier == "mlp" else []

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        return cls(**{k: parse_field(cls, k, v) for k, v in kv.items()})


def parse_field(cls, name: str, value: str):
    """Parse a textual value into the declared type of dataclass field ``name``."""
    types = {f.name: f.type for f in fields(cls)}
    if name not in types:
        raise KeyError(name)
    t = str(types[name])
    if t.startswith("list"):
        return [int(v) for v in value.split(",") if v.strip()]
    if t == "bool":
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return value


class ModelParams:
    """Named trainable tensors, in a fixed insertion order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.frozen: set[str] = set()
        if config.classifier == "fixed":
            self.frozen.add("mlp.0.weight")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k not in self.frozen}

    def groups(self) -> dict[str, list[str]]:
        """Parameter names per group: conv, prototypes, lc, sp, mlp."""
        out: dict[str, list[str]] = {"conv": [], "prototypes": [], "lc": [], "sp": [], "mlp": []}
        for name in self.tensors:
            out[name.split(".")[0] if not name.startswith("backbone") else "conv"].append(name)
        return {k: v for k, v in out.items() if v}

    def mlp_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        layers, i = [], 0
        while f"mlp.{i}.weight" in self.tensors:
            w = self.tensors[f"mlp.{i}.weight"].data
            b = self.tensors.get(f"mlp.{i}.bias")
            layers.append((w, b.data if b is not None else np.zeros(w.shape[1])))
            i += 1
        return layers

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), name=k)
                                         for k, t in self.tensors.items()})

    def digest(self) -> str:
        """sha256 over config text and raw parameter bytes."""
        h = hashlib.sha256(self.config.to_text().encode())
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.asarray(t.shape, dtype="<i8").tobytes())
            h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """He-uniform backbone/MLP weights, zero biases, N(0,1) prototypes,
    U(-0.01, 0.01) combination and super-prototype weights."""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    t: dict[str, Tensor] = {}

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    cin = config.in_channels
    for i, cout in enumerate(config.conv_channels):
        t[f"backbone.{i}.weight"] = Tensor(he((3, 3, cin, cout), 9 * cin))
        t[f"backbone.{i}.bias"] = Tensor(np.zeros(cout))
        cin = cout

    N, D, K, M = config.n_prototypes, config.latent_dim, config.n_classes, config.n_combinations
    H = W = config.latent_size
    t["prototypes"] = Tensor(rng.standard_normal((N, config.proto_h, config.proto_w, D)))
    if config.use_super_prototypes:
        t["lc.weight"] = Tensor(rng.uniform(-0.01, 0.01, size=(K, M, N)))
        t["sp.weight"] = Tensor(rng.uniform(-0.01, 0.01, size=(K, M, H, W)))

    n_in = config.classifier_inputs
    if config.classifier == "fixed":
        t["mlp.0.weight"] = Tensor(fixed_class_connections(n_in, K))
    else:
        widths = [n_in] + list(config.mlp_hidden) + [K]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            t[f"mlp.{i}.weight"] = Tensor(he((a, b), a))
            t[f"mlp.{i}.bias"] = Tensor(np.zeros(b))
    for name, tensor in t.items():
        tensor.name = name
    return ModelParams(config, t)


def fixed_class_connections(n_in: int, n_classes: int) -> np.ndarray:
    """Frozen last layer: +1 from each feature to its own class, -0.5 to the others.

    Feature ``j`` belongs to class ``j % n_classes``.
    """
    w = np.full((n_in, n_classes), -0.5)
    w[np.arange(n_in), np.arange(n_in) % n_classes] = 1.0
    return w


# ---------------------------------------------------------------------------
# layers


def backbone(x: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    if x.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValueError(f"backbone expects [..., {cfg.image_size}, {cfg.image_size}, "
                         f"{cfg.in_channels}] input, got {x.shape}")
    h = x
    pooled = len(cfg.backbone_channels)
    for i in range(len(cfg.conv_channels)):
        h = T.conv2d(h, params[f"backbone.{i}.weight"], stride=1, padding=1)
        h = T.relu(T.add(h, params[f"backbone.{i}.bias"]))
        if i < pooled:
            h = T.max_pool2d(h)
    return h


def prototype_layer(z: Tensor, prototypes: Tensor, epsilon: float = 1e-8,
                    similarity: str = "cosine") -> Tensor:
    """Similarity of every latent patch to every prototype: ``[B,H,W,D] -> [B,H,W,N]``.

    Cosine similarity is a 1x1 convolution of the patch-normalized latent map
    with normalized prototype kernels.
    """
    N = prototypes.shape[0]
    D = prototypes.shape[-1]
    if z.shape[-1] != D:
        raise ValueError(f"latent depth {z.shape[-1]} != prototype depth {D}")
    p = T.reshape(prototypes, (N, D))
    if similarity == "cosine":
        zn = T.l2_normalize_patches(z, epsilon)
        pn = T.l2_normalize_patches(p, epsilon)
        kernel = T.reshape(T.transpose(pn, (1, 0)), (1, 1, D, N))
        return T.conv2d(zn, kernel)
    if similarity == "negL2":
        # log((d^2 + 1) / (d^2 + eps)), the distance-to-similarity map used by ProtoPNet
        zz = T.sum_(T.mul(z, z), axis=-1, keepdims=True)
        pp = T.sum_(T.mul(p, p), axis=-1)
        zp = T.conv2d(z, T.reshape(T.transpose(p, (1, 0)), (1, 1, D, N)))
        d2 = T.relu(T.sub(T.add(zz, pp), T.mul(zp, 2.0)))
        return T.sub(T.log(T.add(d2, 1.0)), T.log(T.add(d2, epsilon)))
    raise ValueError(f"unknown similarity {similarity!r}")


def linear_combinations(cwm: Tensor, w_lc: Tensor) -> Tensor:
    """``LC[b,k,i,h,w] = sum_j W[k,i,j] * CWM[b,h,w,j]``."""
    return T.einsum("bhwn,kmn->bkmhw", cwm, w_lc)


def super_prototype(lc: Tensor, w_sp: Tensor) -> tuple[Tensor, Tensor]:
    """Weighted sum of the M combinations per class, and its spatial total."""
    sp = T.einsum("bkmhw,kmhw->bkhw", lc, w_sp)
    ss = T.sum_(sp, axis=(2, 3))
    return sp, ss


def classify(features: Tensor, params: ModelParams) -> tuple[Tensor, list[Tensor]]:
    """MLP (ReLU hidden layers, linear output) or the frozen linear layer."""
    h = features
    hidden = []
    n_layers = len(params.config.hidden_layers) + 1
    for i in range(n_layers):
        h = T.matmul(h, params[f"mlp.{i}.weight"])
        if f"mlp.{i}.bias" in params:
            h = T.add(h, params[f"mlp.{i}.bias"])
        if i < n_layers - 1:
            h = T.relu(h)
            hidden.append(h)
    return h, hidden


@dataclass
class ForwardTrace:
    z: Tensor
    sm: Tensor
    cwm: Tensor | None
    lc: Tensor | None
    sp: Tensor | None
    ss: Tensor | None
    features: Tensor
    logits: Tensor
    hidden: list[Tensor]


def forward(params: ModelParams, x) -> ForwardTrace:
    cfg = params.config
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    z = backbone(x, params)
    sm = prototype_layer(z, params["prototypes"], cfg.epsilon, cfg.similarity)
    if cfg.use_super_prototypes:
        cwm = T.channel_wise_max(sm)
        lc = linear_combinations(cwm, params["lc.weight"])
        sp, ss = super_prototype(lc, params["sp.weight"])
        features = ss
    else:
        cwm = lc = sp = ss = None
        features = T.global_max_pool(sm)
    logits, hidden = classify(features, params)
    return ForwardTrace(z, sm, cwm, lc, sp, ss, features, logits, hidden)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image (ties go to the lowest class id)."""
    return np.concatenate([forward(params, images[i:i + batch_size]).logits.data.argmax(axis=1)
                           for i in range(0, len(images), batch_size)])


def latent(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([backbone(Tensor(images[i:i + batch_size]), params).data
                           for i in range(0, len(images), batch_size)])


# ---------------------------------------------------------------------------
# projection and visualisation


@dataclass
class ProjectionReport:
    image_index: np.ndarray
    h: np.ndarray
    w: np.ndarray
    similarity: np.ndarray

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {f"projection.{k}": np.asarray(v, dtype=np.float64) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ProjectionReport | None":
        if "projection.image_index" not in arrays:
            return None
        return cls(arrays["projection.image_index"].astype(np.int64),
                   arrays["projection.h"].astype(np.int64),
                   arrays["projection.w"].astype(np.int64),
                   arrays["projection.similarity"])


def project_prototypes(params: ModelParams, images: np.ndarray, image_ids=None,
                       batch_size: int = 256) -> ProjectionReport:
    """Replace each prototype with the most similar latent patch of ``images``.

    Updates ``params`` in place. Ties keep the first patch in (image, h, w)
    order; ``image_ids`` maps positions in ``images`` to dataset indices.
    """
    if len(images) == 0:
        raise ValueError("projection needs a non-empty training set")
    cfg = params.config
    P = params["prototypes"]
    N, D = P.shape[0], P.shape[-1]
    best_sim = np.full(N, -np.inf)
    best_patch = np.zeros((N, D))
    best_loc = np.zeros((N, 3), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        z = backbone(Tensor(images[start:start + batch_size]), params)
        sm = prototype_layer(z, P, cfg.epsilon, cfg.similarity).data
        B, H, W, _ = sm.shape
        flat = sm.reshape(B * H * W, N)
        arg = flat.argmax(axis=0)
        val = flat[arg, np.arange(N)]
        better = val > best_sim
        if np.any(better):
            b, rem = np.divmod(arg[better], H * W)
            h, w = np.divmod(rem, W)
            best_sim[better] = val[better]
            best_patch[better] = z.data[b, h, w]
            best_loc[better] = np.stack([b + start, h, w], axis=1)
    P.data = best_patch.reshape(P.shape).copy()
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids)
    return ProjectionReport(ids[best_loc[:, 0]], best_loc[:, 1], best_loc[:, 2], best_sim)


def upscale_heatmap(sp_map: np.ndarray, stride: int = 4, size: int | None = None) -> np.ndarray:
    """Nearest-neighbour upscale: latent cell (h, w) fills pixel block
    ``[s*h, s*h+s) x [s*w, s*w+s)``; zero-padded to ``size`` if given."""
    sp_map = np.asarray(sp_map, dtype=np.float64)
    up = np.repeat(np.repeat(sp_map, stride, axis=0), stride, axis=1)
    if size is not None and up.shape[0] < size:
        out = np.zeros((size, size))
        out[:up.shape[0], :up.shape[1]] = up
        up = out
    return up


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"PANCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, projection: ProjectionReport | None = None) -> None:
    """Versioned container: config key=value text, then named little-endian f64 arrays."""
    arrays = {k: t.data for k, t in params.items()}
    if projection is not None:
        arrays.update(projection.as_arrays())
    cfg = params.config.to_text().encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ProjectionReport | None]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    try:
        version, clen = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        config = ModelConfig.from_text(raw[pos:pos + clen].decode())
        pos += clen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 4)
            pos += 4 + 8 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8,
                                         offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    projection = ProjectionReport.from_arrays(arrays)
    tensors = {k: Tensor(v, name=k) for k, v in arrays.items() if not k.startswith("projection.")}
    expected = init_params(config)
    if list(tensors) != list(expected.tensors) or any(
            tensors[k].shape != expected[k].shape for k in tensors):
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return ModelParams(config, tensors), projection
