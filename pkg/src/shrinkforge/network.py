"""Declarative sequential CNN specs, parameter stores, forward pass, checkpoints.

A *stage* is the ``conv -> bn`` pair (usually followed by relu and an optional
pool). Stages are the unit that cost accounting and pruning work on: the bn
scale vector of a stage is the per-channel sparsity signal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_bytes, atomic_write_json
from .errors import (
    CheckpointError,
    CheckpointInconsistentError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeError,
    SpecError,
)

KINDS = ("conv", "bn", "relu", "avgpool", "dense", "flatten")
_KIND_FIELDS = {
    "conv": {"out_channels", "kernel", "stride", "padding"},
    "dense": {"out_features"},
    "bn": set(),
    "relu": set(),
    "avgpool": set(),
    "flatten": set(),
}
_OPTIONAL = {"stride": 1, "padding": 0}
TRAINABLE_SUFFIXES = ("kernel", "gamma", "beta", "weight", "bias")
FORMAT_VERSION = 1
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None
    out_features: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        for f in sorted(_KIND_FIELDS.get(self.kind, ())):
            d[f] = getattr(self, f)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        kind = d.get("kind")
        if kind not in KINDS:
            raise SpecError(f"layer {d.get('name')!r}: unknown kind {kind!r}")
        if not isinstance(d.get("name"), str) or not d["name"]:
            raise SpecError(f"{kind} layer without a name")
        allowed = _KIND_FIELDS[kind]
        extra = set(d) - allowed - {"kind", "name"}
        if extra:
            raise SpecError(f"layer {d['name']!r}: fields {sorted(extra)} not valid for kind {kind!r}")
        kw = {}
        for f in allowed:
            if f in d:
                kw[f] = d[f]
            elif f in _OPTIONAL:
                kw[f] = _OPTIONAL[f]
            else:
                raise SpecError(f"layer {d['name']!r}: missing field {f!r}")
            if not isinstance(kw[f], int) or isinstance(kw[f], bool) or kw[f] < (0 if f == "padding" else 1):
                raise SpecError(f"layer {d['name']!r}: field {f!r} must be a positive integer, got {kw[f]!r}")
        return cls(kind=kind, name=d["name"], **kw)


def conv(name, out_channels, kernel=3, stride=1, padding=1) -> LayerSpec:
    return LayerSpec("conv", name, out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def bn(name) -> LayerSpec:
    return LayerSpec("bn", name)


def relu(name) -> LayerSpec:
    return LayerSpec("relu", name)


def avgpool(name) -> LayerSpec:
    return LayerSpec("avgpool", name)


def flatten(name) -> LayerSpec:
    return LayerSpec("flatten", name)


def dense(name, out_features) -> LayerSpec:
    return LayerSpec("dense", name, out_features=out_features)


@dataclass(frozen=True)
class Stage:
    index: int  # 0-based
    conv: str
    bn: str
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    prev: Optional[int]  # stage feeding this one's input channels

    @property
    def channels(self) -> int:
        return self.out_shape[0]


@dataclass(frozen=True)
class CostLayer:
    """One cost-bearing layer (conv or dense) with its cost-formula symbols."""

    name: str
    kind: str
    w: int
    s_out: int
    c_in: int
    c_out: int
    in_stage: Optional[int]
    out_stage: Optional[int]
    in_multiplicity: int = 1  # flattened features per input channel (dense only)


@dataclass
class NetworkSpec:
    layers: List[LayerSpec]
    input_shape: Tuple[int, int, int]
    num_classes: int
    _shapes: Optional[list] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        try:
            layers = [LayerSpec.from_dict(l) for l in d["layers"]]
            return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]))
        except KeyError as exc:
            raise SpecError(f"network spec missing field {exc.args[0]!r}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    # -- validation & derived structure ------------------------------------
    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be [C, H, W] of positive ints, got {list(self.input_shape)}")
        if not isinstance(self.num_classes, int) or self.num_classes < 1:
            raise SpecError(f"num_classes must be a positive int, got {self.num_classes!r}")
        if not self.layers:
            raise SpecError("network has no layers")
        names = [l.name for l in self.layers]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise SpecError(f"duplicate layer names: {sorted(dup)}")

        shapes = []
        shape: Tuple[int, ...] = self.input_shape
        prev = "<input>"
        for i, layer in enumerate(self.layers):
            pair = f"{prev!r} -> {layer.name!r}"
            k = layer.kind
            if k in ("conv", "bn", "avgpool", "flatten") and len(shape) != 3:
                raise SpecError(f"{pair}: {k} needs a [C, H, W] input, got {list(shape)}")
            if k == "conv":
                c, h, w = shape
                p, s, kk = layer.padding, layer.stride, layer.kernel
                if kk > h + 2 * p or kk > w + 2 * p:
                    raise SpecError(f"{pair}: kernel {kk} larger than padded input {h + 2 * p}x{w + 2 * p}")
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if nxt is None or nxt.kind != "bn":
                    raise SpecError(f"{pair}: conv must be immediately followed by a bn layer")
                out = (layer.out_channels, (h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1)
            elif k == "bn":
                if i == 0 or self.layers[i - 1].kind != "conv":
                    raise SpecError(f"{pair}: bn layers are only supported directly after a conv")
                out = shape
            elif k == "relu":
                out = shape
            elif k == "avgpool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise SpecError(f"{pair}: avgpool 2x2 needs even spatial dims, got {h}x{w}")
                out = (c, h // 2, w // 2)
            elif k == "flatten":
                out = (shape[0] * shape[1] * shape[2],)
            else:  # dense
                if len(shape) != 1:
                    raise SpecError(f"{pair}: dense needs a flat input, got {list(shape)}; add a flatten layer")
                if i != len(self.layers) - 1:
                    raise SpecError(f"{pair}: only a single final dense classifier is supported")
                out = (layer.out_features,)
            shapes.append((shape, out))
            shape = out
            prev = layer.name
        last = self.layers[-1]
        if last.kind != "dense" or last.out_features != self.num_classes:
            raise SpecError(f"network must end in a dense classifier with {self.num_classes} outputs")
        self._shapes = shapes

    def layer_shapes(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """(input shape, output shape) per layer, per sample."""
        return list(self._shapes)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def index(self, name: str) -> int:
        return [l.name for l in self.layers].index(name)

    @property
    def stages(self) -> List[Stage]:
        out = []
        for i, l in enumerate(self.layers):
            if l.kind == "conv":
                in_s, out_s = self._shapes[i]
                out.append(Stage(len(out), l.name, self.layers[i + 1].name, in_s, out_s,
                                 len(out) - 1 if out else None))
        return out

    @property
    def classifier(self) -> LayerSpec:
        return self.layers[-1]

    def cost_layers(self) -> List[CostLayer]:
        stages = self.stages
        res = []
        for st in stages:
            l = self.layer(st.conv)
            res.append(CostLayer(l.name, "conv", l.kernel, st.out_shape[1] * st.out_shape[2],
                                 st.in_shape[0], st.out_shape[0], st.prev, st.index))
        clf = self.classifier
        f_in = self._shapes[-1][0][0]
        last = stages[-1] if stages else None
        mult = f_in // last.channels if last else 1
        res.append(CostLayer(clf.name, "dense", 1, 1, f_in, clf.out_features,
                             last.index if last else None, None, mult))
        return res

    def downstream_of(self, stage: Stage) -> Tuple[List[LayerSpec], LayerSpec]:
        """Layers between a stage's bn and the next cost-bearing layer, and that layer."""
        i = self.index(stage.bn) + 1
        between = []
        while self.layers[i].kind not in ("conv", "dense"):
            between.append(self.layers[i])
            i += 1
        return between, self.layers[i]

    def with_channels(self, channels: Sequence[int]) -> "NetworkSpec":
        """Same topology with stage output channel counts replaced."""
        it = iter(channels)
        layers = [
            LayerSpec(**{**{f.name: getattr(l, f.name) for f in fields(LayerSpec)}, "out_channels": next(it)})
            if l.kind == "conv" else l
            for l in self.layers
        ]
        return NetworkSpec(layers, self.input_shape, self.num_classes)


# ---------------------------------------------------------------------------
# reference architectures

def _stage(i, c):
    return [conv(f"conv{i}", c), bn(f"bn{i}"), relu(f"relu{i}")]


def tiny3(input_shape=(3, 32, 32), num_classes=10) -> NetworkSpec:
    """Three conv stages 3->16->32->64, each followed by 2x2 average pooling."""
    layers = []
    for i, c in enumerate((16, 32, 64), start=1):
        layers += _stage(i, c) + [avgpool(f"pool{i}")]
    layers += [flatten("flatten"), dense("fc", num_classes)]
    return NetworkSpec(layers, tuple(input_shape), num_classes)


def tiny6(input_shape=(3, 32, 32), num_classes=10) -> NetworkSpec:
    """Six conv stages (16,16,32,32,64,64) with pooling after every second stage."""
    layers = []
    for i, c in enumerate((16, 16, 32, 32, 64, 64), start=1):
        layers += _stage(i, c)
        if i % 2 == 0:
            layers.append(avgpool(f"pool{i // 2}"))
    layers += [flatten("flatten"), dense("fc", num_classes)]
    return NetworkSpec(layers, tuple(input_shape), num_classes)


REFERENCE_SPECS = {"tiny3": tiny3, "tiny6": tiny6}


def resolve_spec(ref, input_shape=None, num_classes=None) -> NetworkSpec:
    """Turn a reference name, JSON path, dict, or spec into a NetworkSpec."""
    if isinstance(ref, NetworkSpec):
        return ref
    if isinstance(ref, Mapping):
        return NetworkSpec.from_dict(ref)
    if ref in REFERENCE_SPECS:
        kw = {}
        if input_shape is not None:
            kw["input_shape"] = tuple(input_shape)
        if num_classes is not None:
            kw["num_classes"] = num_classes
        return REFERENCE_SPECS[ref](**kw)
    path = Path(ref)
    if not path.is_file():
        raise SpecError(f"{ref!r} is neither a reference spec ({', '.join(REFERENCE_SPECS)}) nor a file")
    try:
        return NetworkSpec.from_json(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ParamStore:
    tensors: Dict[str, np.ndarray]
    seed: int = 0
    step: int = 0

    def clone(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.seed, self.step)

    def trainable(self) -> List[str]:
        return [k for k in self.tensors if k.rsplit(".", 1)[-1] in TRAINABLE_SUFFIXES]

    def __getitem__(self, name):
        return self.tensors[name]

    def gamma(self, bn_name: str) -> np.ndarray:
        return self.tensors[f"{bn_name}.gamma"]

    def nbytes(self) -> int:
        return sum(v.size for v in self.tensors.values()) * 8

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact equality of every tensor."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


CLASSIFIER_INIT_STD = 0.01


def build(spec: NetworkSpec, seed: int) -> ParamStore:
    """He-normal conv kernels, unit bn scales, zero shifts and biases.

    The classifier weights are drawn with std 0.01 so a fresh network starts
    from near-uniform predictions.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    t: Dict[str, np.ndarray] = {}
    for layer, (in_shape, out_shape) in zip(spec.layers, spec.layer_shapes()):
        if layer.kind == "conv":
            fan_in = in_shape[0] * layer.kernel ** 2
            shape = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
            t[f"{layer.name}.kernel"] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif layer.kind == "bn":
            c = in_shape[0]
            t[f"{layer.name}.gamma"] = np.ones(c)
            t[f"{layer.name}.beta"] = np.zeros(c)
            t[f"{layer.name}.running_mean"] = np.zeros(c)
            t[f"{layer.name}.running_var"] = np.ones(c)
        elif layer.kind == "dense":
            f_in = in_shape[0]
            t[f"{layer.name}.weight"] = rng.standard_normal((layer.out_features, f_in)) * CLASSIFIER_INIT_STD
            t[f"{layer.name}.bias"] = np.zeros(layer.out_features)
    return ParamStore(t, seed=seed, step=0)


def forward(store: ParamStore, spec: NetworkSpec, batch, mode: str = "eval",
            tape: Optional[ad.Tape] = None, params: Optional[Mapping[str, ad.Tensor]] = None,
            update_stats: Optional[bool] = None, bn_momentum: float = BN_MOMENTUM) -> ad.Tensor:
    """Run the network on an NCHW batch and return logits [N, num_classes].

    With ``tape`` the trainable tensors are registered on it (or taken from
    ``params`` when the caller registered them already) so that
    :func:`autodiff.backward` can differentiate the result. Train mode updates
    bn running statistics in ``store`` unless ``update_stats`` is False.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError("input", f"batch shape {x.shape} does not match input_shape {list(spec.input_shape)}")
    if update_stats is None:
        update_stats = mode == "train"

    def p(name):
        if params is not None and name in params:
            return params[name]
        if tape is not None:
            if name in tape.params:
                return ad.Tensor(store.tensors[name], tape, tape.params[name])
            return tape.param(name, store.tensors[name])
        return ad.Tensor(store.tensors[name])

    for layer in spec.layers:
        n = layer.name
        if layer.kind == "conv":
            x = ad.conv2d(x, p(f"{n}.kernel"), layer.stride, layer.padding, name=n)
            offset = store.tensors.get(f"{n}.offset")
            if offset is not None:
                x = ad.add_const(x, offset[None], name=f"{n}.offset")
        elif layer.kind == "bn":
            stats = None
            rm, rv = store.tensors[f"{n}.running_mean"], store.tensors[f"{n}.running_var"]
            if mode == "eval":
                stats = (rm, rv)
            elif update_stats:
                stats = (rm, rv)
            x = ad.batchnorm(x, p(f"{n}.gamma"), p(f"{n}.beta"), mode, stats,
                             epsilon=BN_EPSILON, momentum=bn_momentum, name=n)
        elif layer.kind == "relu":
            x = ad.relu(x, name=n)
        elif layer.kind == "avgpool":
            x = ad.avgpool2d(x, 2, name=n)
        elif layer.kind == "flatten":
            x = ad.flatten(x, name=n)
        elif layer.kind == "dense":
            x = ad.dense(x, p(f"{n}.weight"), p(f"{n}.bias"), name=n)
    return x


def predict(store: ParamStore, spec: NetworkSpec, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits for a whole array, computed in chunks."""
    out = [forward(store, spec, images[i:i + batch_size], "eval").data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.num_classes))


def accuracy(store: ParamStore, spec: NetworkSpec, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    pred = predict(store, spec, images).argmax(axis=1)
    return float(100.0 * np.mean(pred == labels))


def grad_check(spec: NetworkSpec, store: ParamStore, batch: np.ndarray, tolerance: float = 1e-6,
               labels: Optional[np.ndarray] = None, mode: str = "train", step: float = 1e-5):
    """Finite-difference check of every trainable tensor under a cross-entropy loss."""
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        raise ValueError("grad_check needs a non-empty batch")
    if labels is None:
        labels = np.arange(len(batch)) % spec.num_classes
    targets = np.eye(spec.num_classes)[labels]
    frozen = store.clone()

    def loss_fn(tape, tensors):
        logits = forward(frozen, spec, batch, mode, tape=tape, params=tensors, update_stats=False)
        return ad.cross_entropy_with_logits(logits, targets)

    return ad.check_gradients(loss_fn, {k: frozen.tensors[k] for k in frozen.trainable()}, tolerance, step)


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"
BLOB = "params.bin"


def _manifest(store: ParamStore, spec: NetworkSpec) -> dict:
    entries, offset = [], 0
    for name, arr in store.tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset_bytes": offset, "len": int(arr.size)})
        offset += arr.size * 8
    return {
        "format_version": FORMAT_VERSION,
        "dtype": "float64-le",
        "spec": spec.to_dict(),
        "tensors": entries,
        "seed": int(store.seed),
        "step": int(store.step),
    }


def checkpoint_size(store: ParamStore) -> int:
    """Expected size in bytes of ``params.bin`` for ``store``."""
    return store.nbytes()


def save_checkpoint(store: ParamStore, spec: NetworkSpec, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in store.tensors.values())
    atomic_write_bytes(path / BLOB, blob)
    atomic_write_json(path / MANIFEST, _manifest(store, spec))
    return path


def load_checkpoint(path) -> Tuple[ParamStore, NetworkSpec]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing checkpoint file {Path(exc.filename).name}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointInconsistentError(f"{path}: manifest is not valid JSON ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version!r}, expected {FORMAT_VERSION}")
    spec = NetworkSpec.from_dict(manifest["spec"])
    tensors = {}
    expected = 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n != e["len"]:
            raise CheckpointInconsistentError(f"{e['name']}: len {e['len']} != product of shape {e['shape']}")
        if e["offset_bytes"] != expected:
            raise CheckpointInconsistentError(f"{e['name']}: offset {e['offset_bytes']} != expected {expected}")
        end = expected + 8 * n
        if end > len(blob):
            raise CheckpointTruncatedError(f"{path / BLOB}: {len(blob)} bytes, need at least {end}")
        tensors[e["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=expected).astype(np.float64).reshape(e["shape"])
        expected = end
    if expected != len(blob):
        raise CheckpointInconsistentError(f"{path / BLOB}: {len(blob)} bytes but manifest describes {expected}")
    store = ParamStore(tensors, seed=int(manifest.get("seed", 0)), step=int(manifest.get("step", 0)))
    _check_store(store, spec)
    return store, spec


def _check_store(store: ParamStore, spec: NetworkSpec) -> None:
    ref = build(spec, 0)
    for name, arr in ref.tensors.items():
        if name not in store.tensors:
            raise CheckpointInconsistentError(f"checkpoint lacks tensor {name!r} required by its spec")
        if store.tensors[name].shape != arr.shape:
            raise CheckpointInconsistentError(
                f"tensor {name!r} has shape {store.tensors[name].shape}, spec implies {arr.shape}")
