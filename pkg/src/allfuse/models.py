"""The three hybrid CNN+GRU architectures, their training loop and persistence.

Every model shares one head: the backbone's final feature map is read as a
row-major sequence of channel vectors, passed through dropout and a GRU, then
two dense layers end in a 2-way softmax. Only the backbone differs per arch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import DecodeError, MissingArtifactError, ShapeError, TrainingError
from .hyperparams import HyperParams
from .nn import checkpoint
from .nn.init import glorot_uniform, he_uniform
from .seeding import rng_for

ARCHS = ("a", "b", "c")
ARCH_NAMES = {"a": "A_inception_like", "b": "B_mobile_like", "c": "C_efficient_like"}
DESK_INPUT = (64, 64, 3)

# per-block filter counts at desk scale; A counts are per branch, B counts are for the
# 3x3 half of each pair (its 1x1 partner doubles them)
DEFAULT_FILTERS = {"a": (8, 12, 16), "b": (8, 16, 24), "c": (12, 16, 24, 32)}


def parse_arch(arch) -> str:
    key = str(arch).strip().lower()
    for k, name in ARCH_NAMES.items():
        if key in (k, name.lower()):
            return k
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple = DESK_INPUT
    backbone_blocks: tuple = ()  # (filters, kernel, pool) per block
    gru_units: int = 512
    dense_units: tuple = (256, 2)
    dropout_rate: float = 0.1
    n_classes: int = 2
    stem_pool: bool = True  # 2x2 max-pool on the raw input before the first block

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.gru_units <= 0:
            raise ValueError("gru_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.dense_units) != 2 or self.dense_units[-1] != self.n_classes:
            raise ValueError("the head has two dense layers ending in n_classes units")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "backbone_blocks": [list(b) for b in self.backbone_blocks],
            "gru_units": self.gru_units,
            "dense_units": list(self.dense_units),
            "dropout_rate": self.dropout_rate,
            "n_classes": self.n_classes,
            "stem_pool": self.stem_pool,
        }

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(
            arch=d["arch"],
            input_shape=tuple(d["input_shape"]),
            backbone_blocks=tuple(tuple(b) for b in d["backbone_blocks"]),
            gru_units=int(d["gru_units"]),
            dense_units=tuple(d["dense_units"]),
            dropout_rate=float(d["dropout_rate"]),
            n_classes=int(d["n_classes"]),
            stem_pool=bool(d.get("stem_pool", True)),
        )


def make_spec(arch, h: HyperParams, input_shape=DESK_INPUT, gru_units=None, filters=None,
              stem_pool=True) -> ModelSpec:
    """Spec for ``arch`` under ``h``; ``gru_units`` overrides h.units for desk-scale runs."""
    arch = parse_arch(arch)
    units = int(gru_units) if gru_units is not None else h.units
    filters = tuple(filters) if filters is not None else DEFAULT_FILTERS[arch]
    blocks = [(int(f), 3, True) for f in filters]
    if arch == "c":
        # the deep plain stack keeps full resolution through its first block
        blocks[0] = (blocks[0][0], 3, False)
    blocks = tuple(blocks)
    return ModelSpec(
        arch=arch,
        input_shape=tuple(input_shape),
        backbone_blocks=blocks,
        gru_units=units,
        dense_units=(max(1, units // 2), 2),
        dropout_rate=h.dropout_rate,
        stem_pool=bool(stem_pool),
    )


# ------------------------------------------------------------------ graph plan


def layer_plan(spec: ModelSpec) -> list:
    """Ordered layer descriptors ``(kind, name, info)``; ``forward`` walks exactly this list."""
    plan = [("pool", "stem", {})] if spec.stem_pool else []
    cin = spec.input_shape[2]
    for i, (f, k, pool) in enumerate(spec.backbone_blocks, start=1):
        if spec.arch == "a":
            plan.append(("branch", f"blk{i}", {"cin": cin, "f": f, "k": k}))
            cin = 2 * f
        elif spec.arch == "b":
            plan.append(("conv", f"blk{i}_dw", {"cin": cin, "cout": f, "k": k}))
            plan.append(("conv", f"blk{i}_pw", {"cin": f, "cout": 2 * f, "k": 1}))
            cin = 2 * f
        else:
            plan.append(("conv", f"blk{i}", {"cin": cin, "cout": f, "k": k}))
            cin = f
        if pool:
            plan.append(("pool", f"pool{i}", {}))
    plan.append(("sequence", "seq", {}))
    plan.append(("dropout", "drop", {"rate": spec.dropout_rate}))
    plan.append(("gru", "gru", {"d": cin, "u": spec.gru_units}))
    plan.append(("dense", "fc1", {"din": spec.gru_units, "dout": spec.dense_units[0], "relu": True}))
    plan.append(("dense", "fc2", {"din": spec.dense_units[0], "dout": spec.dense_units[1], "relu": False}))
    plan.append(("softmax", "out", {}))
    return plan


def feature_map_shape(spec: ModelSpec) -> tuple:
    h, w, c = spec.input_shape
    for kind, _, info in layer_plan(spec):
        if kind in ("conv", "branch"):
            h, w = h - info["k"] + 1, w - info["k"] + 1
            c = info["cout"] if kind == "conv" else 2 * info["f"]
        elif kind == "pool":
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError(f"input {spec.input_shape} is too small for the {spec.arch} backbone")
    return h, w, c


def _conv_params(rng, name, k, cin, cout):
    return {
        f"{name}/kernel": he_uniform(rng, (k, k, cin, cout), k * k * cin),
        f"{name}/bias": np.zeros(cout, dtype=np.float32),
    }


def init_params(spec: ModelSpec, seed: int) -> dict:
    feature_map_shape(spec)
    params = {}
    for kind, name, info in layer_plan(spec):
        rng = rng_for(seed, "init", name)
        if kind == "conv":
            params.update(_conv_params(rng, name, info["k"], info["cin"], info["cout"]))
        elif kind == "branch":
            f, k, cin = info["f"], info["k"], info["cin"]
            params.update(_conv_params(rng, f"{name}/b3", k, cin, f))
            params.update(_conv_params(rng, f"{name}/b1", 1, cin, max(1, f // 2)))
            params.update(_conv_params(rng, f"{name}/b13", k, max(1, f // 2), f))
        elif kind == "gru":
            d, u = info["d"], info["u"]
            for p in nn.GRU_PARAM_NAMES:
                if p.startswith("b_"):
                    params[f"{name}/{p}"] = np.zeros(u, dtype=np.float32)
                elif p.startswith("w_x"):
                    params[f"{name}/{p}"] = glorot_uniform(rng, (d, u), d, u)
                else:
                    params[f"{name}/{p}"] = glorot_uniform(rng, (u, u), u, u)
        elif kind == "dense":
            din, dout = info["din"], info["dout"]
            params[f"{name}/kernel"] = glorot_uniform(rng, (din, dout), din, dout)
            params[f"{name}/bias"] = np.zeros(dout, dtype=np.float32)
    return params


def forward(spec: ModelSpec, params: dict, x, training=False, rng=None) -> nn.Tensor:
    """Class probabilities [N, n_classes]; ``params`` maps names to Tensors or arrays."""
    p = params
    # inputs arrive scaled to [0, 1]; the backbones see them centred on [-1, 1]
    out = nn.as_tensor(np.asarray(x) * np.float32(2.0) - np.float32(1.0))
    for kind, name, info in layer_plan(spec):
        if kind == "conv":
            out = nn.relu(nn.conv2d(out, p[f"{name}/kernel"], p[f"{name}/bias"]))
        elif kind == "branch":
            a = nn.relu(nn.conv2d(out, p[f"{name}/b3/kernel"], p[f"{name}/b3/bias"]))
            b = nn.relu(nn.conv2d(out, p[f"{name}/b1/kernel"], p[f"{name}/b1/bias"]))
            b = nn.relu(nn.conv2d(b, p[f"{name}/b13/kernel"], p[f"{name}/b13/bias"]))
            out = nn.concat([a, b], axis=-1)
        elif kind == "pool":
            out = nn.maxpool2d(out, 2, 2)
        elif kind == "sequence":
            out = nn.features_to_sequence(out)
        elif kind == "dropout":
            out = nn.dropout(out, info["rate"], rng, training)
        elif kind == "gru":
            h0 = np.zeros((out.data.shape[0], info["u"]), dtype=out.data.dtype)
            out = nn.gru_sequence(out, h0, {k: p[f"{name}/{k}"] for k in nn.GRU_PARAM_NAMES})
        elif kind == "dense":
            out = nn.dense(out, p[f"{name}/kernel"], p[f"{name}/bias"])
            if info["relu"]:
                out = nn.relu(out)
        elif kind == "softmax":
            out = nn.softmax(out)
    return out


# ------------------------------------------------------------------ model objects


@dataclass
class TrainedModel:
    spec: ModelSpec
    hyperparams: HyperParams
    params: dict
    seed: int
    history: list = field(default_factory=list)

    @property
    def arch(self) -> str:
        return self.spec.arch


def build_model(arch, h: HyperParams, seed: int, input_shape=DESK_INPUT, gru_units=None,
                filters=None, stem_pool=True) -> TrainedModel:
    spec = make_spec(arch, h, input_shape, gru_units, filters, stem_pool)
    return TrainedModel(spec, h, init_params(spec, seed), int(seed))


def _check_images(spec: ModelSpec, images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"expected images of shape (N, {', '.join(map(str, spec.input_shape))}), got {x.shape}")
    return x.astype(np.float32, copy=False)


def predict_proba(model: TrainedModel, images, batch_size: int = 64) -> np.ndarray:
    x = _check_images(model.spec, images)
    outs = []
    with nn.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(forward(model.spec, model.params, x[i:i + batch_size], training=False).data)
    if not outs:
        return np.zeros((0, model.spec.n_classes), dtype=np.float32)
    return np.concatenate(outs, axis=0)


def evaluate_loss(model: TrainedModel, images, labels, batch_size: int = 64):
    """(mean cross-entropy, accuracy) at inference."""
    probs = predict_proba(model, images, batch_size)
    labels = np.asarray(labels)
    loss = float(nn.cross_entropy(probs, labels).data)
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, acc


def train(model: TrainedModel, train_set, val_set, epochs: int, batch_size: int = 16,
          h: HyperParams | None = None, seed: int | None = None, log=None, stop=None) -> TrainedModel:
    """Minimise cross-entropy; returns a new model holding the best-validation-loss snapshot.

    ``train_set`` and ``val_set`` are ``(images, labels)`` pairs. Shuffling and
    dropout streams derive from ``seed`` (default: the model's seed). ``stop`` is an
    optional predicate on each epoch record that ends training early when true.
    """
    h = h or model.hyperparams
    seed = model.seed if seed is None else int(seed)
    xtr, ytr = _check_images(model.spec, train_set[0]), np.asarray(train_set[1], dtype=np.int64)
    xva, yva = _check_images(model.spec, val_set[0]), np.asarray(val_set[1], dtype=np.int64)
    if len(xtr) == 0 or len(xva) == 0:
        raise ValueError("training and validation splits must be non-empty")
    if len(ytr) != len(xtr) or len(yva) != len(xva):
        raise ShapeError("images and labels differ in length")
    if not 1 <= batch_size <= len(xtr):
        raise ValueError(f"batch_size {batch_size} must lie in [1, {len(xtr)}]")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")

    params = {k: nn.Tensor(v.copy(), requires_grad=True, name=k) for k, v in model.params.items()}
    state = nn.init_state(h.optimizer, params, h.learning_rate, h.momentum)
    best = {k: v.copy() for k, v in model.params.items()}
    best_loss = np.inf
    history = []
    n = len(xtr)
    for epoch in range(epochs):
        order = rng_for(seed, "shuffle", epoch).permutation(n)
        drop_rng = rng_for(seed, "dropout", epoch)
        tot_loss, tot_correct = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            probs = forward(model.spec, params, xtr[idx], training=True, rng=drop_rng)
            loss = nn.cross_entropy(probs, ytr[idx])
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            grads = nn.backward(loss)
            nn.step(params, {k: grads.get(t, np.zeros_like(t.data)) for k, t in params.items()}, state)
            if not all(np.isfinite(t.data).all() for t in params.values()):
                raise TrainingError(f"parameters diverged at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            tot_loss += lv * len(idx)
            tot_correct += int((probs.data.argmax(axis=1) == ytr[idx]).sum())
        snapshot = TrainedModel(model.spec, h, {k: t.data for k, t in params.items()}, seed)
        val_loss, val_acc = evaluate_loss(snapshot, xva, yva)
        rec = {
            "epoch": epoch,
            "train_loss": tot_loss / n,
            "train_acc": tot_correct / n,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        history.append(rec)
        if log is not None:
            log(rec)
        if val_loss < best_loss:
            best_loss = val_loss
            best = {k: t.data.copy() for k, t in params.items()}
        if stop is not None and stop(rec):
            break
    return TrainedModel(model.spec, h, best, seed, history)


# ------------------------------------------------------------------ persistence


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def model_meta(model: TrainedModel) -> dict:
    return {
        "arch": model.spec.arch,
        "hyperparams": model.hyperparams.to_dict(),
        "seed": model.seed,
        "history": model.history,
        "spec": model.spec.to_dict(),
    }


def save_model(model: TrainedModel, path) -> tuple:
    """Write ``<path>`` (AFCK tensors) and ``<path>.json`` (sidecar); returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model.params)
    side = path.with_name(path.name + ".json")
    side.write_text(_dump_json(model_meta(model)), encoding="utf-8", newline="\n")
    return path, side


def load_model(path) -> TrainedModel:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise MissingArtifactError(f"missing model sidecar {side}") from e
    except (ValueError, UnicodeDecodeError) as e:
        raise DecodeError(f"{side}: malformed model sidecar ({e})") from e
    spec = ModelSpec.from_dict(meta["spec"])
    params = checkpoint.load(path)
    expected = init_params(spec, 0)
    if set(params) != set(expected) or any(params[k].shape != expected[k].shape for k in expected):
        raise DecodeError(f"{path}: tensors do not match the {spec.arch} spec")
    return TrainedModel(spec, HyperParams.from_dict(meta["hyperparams"]), params,
                        int(meta["seed"]), list(meta["history"]))
