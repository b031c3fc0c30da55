"""A small feed-forward network with a bubble classifier and a defect regressor.

Architecture: input -> ReLU(h1) -> ReLU(h2) -> {softmax(2), linear(1)}.
The loss is ``ce_weight * mean cross-entropy + lam * mean squared defect
error`` and is minimised with Adam.  Everything is float64 and computed
with explicit reverse-mode formulas, so the gradients can be checked
against finite differences to tight tolerances.
"""

import copy
import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as _rng
from .errors import ConstructionError, FormatError, TrainingError, WidthMismatchError

MAGIC = b"BDNN"
VERSION = 1
LAYERS = ("W1", "b1", "W2", "b2", "Wc", "bc", "Wd", "bd")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 50
    lam: float = 0.1
    ce_weight: float = 1.0
    seed: int = 0
    standardize: bool = False
    hidden: tuple = (128, 64)
    shared_trunk: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.learning_rate > 0:
            raise ConstructionError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConstructionError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConstructionError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(eq=False)
class MlpModel:
    dims: tuple
    params: dict
    init_seed: int
    shift: np.ndarray = None    # optional input standardisation
    scale: np.ndarray = None
    adam: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return copy.deepcopy(self)


def parameter_count(dims):
    d0, h1, h2 = dims
    return (d0 + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * 2 + (h2 + 1) * 1


def init(dims, seed=0):
    """He-initialised weights (std sqrt(2 / fan_in)) and zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConstructionError("dims must be [input, h1, h2] with positive entries")
    d0, h1, h2 = dims
    gen = _rng.substream(seed, _rng.INIT)
    he = lambda fan_in, fan_out: gen.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    params = {
        "W1": he(d0, h1), "b1": np.zeros(h1),
        "W2": he(h1, h2), "b2": np.zeros(h2),
        "Wc": he(h2, 2), "bc": np.zeros(2),
        "Wd": he(h2, 1), "bd": np.zeros(1),
    }
    return MlpModel(dims, params, int(seed))


def _inputs(model, features):
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != model.dims[0]:
        raise WidthMismatchError(f"feature width {x.shape[1]} != model input width {model.dims[0]}")
    if model.shift is not None:
        x = (x - model.shift) / model.scale
    return x


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(p, x):
    a1 = x @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p["W2"] + p["b2"]
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ p["Wc"] + p["bc"]
    defect = (h2 @ p["Wd"] + p["bd"])[:, 0]
    return (a1, h1, a2, h2), logits, defect


def forward(model, features):
    """(class probabilities of shape (n, 2), defect estimates of shape (n,))."""
    _, logits, defect = _forward(model.params, _inputs(model, features))
    return _softmax(logits), defect


def predict_bubble_probability(model, features):
    """P_b, the softmax probability of the bubble class."""
    return forward(model, features)[0][:, 1]


def predict_label(model, features):
    return predict_bubble_probability(model, features) > 0.5


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_gradients(model, features, labels, defects=None, lam=0.1, ce_weight=1.0,
                       standardized=False):
    """Mean loss over the batch and its gradient for every parameter array.

    ``standardized=True`` means ``features`` already went through the
    model's input scaling.
    """
    p = model.params
    x = np.atleast_2d(np.asarray(features, dtype=float)) if standardized else _inputs(model, features)
    y = np.asarray(labels, dtype=int)
    n = x.shape[0]
    (a1, h1, a2, h2), logits, pred = _forward(p, x)
    logp = _log_softmax(logits)
    ce = -logp[np.arange(n), y].mean()
    loss = ce_weight * ce
    d_logits = np.exp(logp)
    d_logits[np.arange(n), y] -= 1.0
    d_logits *= ce_weight / n
    d_pred = np.zeros(n)
    if lam and defects is not None:
        resid = pred - np.asarray(defects, dtype=float)
        loss += lam * np.mean(resid ** 2)
        d_pred = (2.0 * lam / n) * resid
    grads = {
        "Wc": h2.T @ d_logits, "bc": d_logits.sum(axis=0),
        "Wd": h2.T @ d_pred[:, None], "bd": np.array([d_pred.sum()]),
    }
    d_h2 = d_logits @ p["Wc"].T + d_pred[:, None] @ p["Wd"].T
    d_a2 = d_h2 * (a2 > 0)
    grads["W2"] = h1.T @ d_a2
    grads["b2"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ p["W2"].T) * (a1 > 0)
    grads["W1"] = x.T @ d_a1
    grads["b1"] = d_a1.sum(axis=0)
    return float(loss), grads


def adam_step(model, grads, config, t):
    """One bias-corrected Adam update (in place); ``t`` counts from 1."""
    if t < 1:
        raise ConstructionError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name in LAYERS:
        g = grads[name]
        m = model.adam.setdefault("m_" + name, np.zeros_like(g))
        v = model.adam.setdefault("v_" + name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    model.adam["t"] = t
    return model


def row_identities(features, labels, defects):
    """64-bit content hash per row, used to key the epoch shuffles."""
    ids = np.empty(len(features), dtype=np.uint64)
    for i, row in enumerate(features):
        h = hashlib.blake2b(np.ascontiguousarray(row).tobytes(), digest_size=8)
        h.update(struct.pack("<d?", float(defects[i]) if defects is not None else 0.0,
                             bool(labels[i])))
        ids[i] = int.from_bytes(h.digest(), "little")
    return ids


def _epoch_order(ids, seed, epoch):
    keys = _rng.hash_indices(seed, _rng.EPOCH, epoch, ids)
    return np.lexsort((ids, keys))


def accuracy_of(model, features, labels):
    return float(np.mean(predict_label(model, features) == np.asarray(labels, dtype=bool)))


def _fit(model, x, labels, defects, cfg, ids, lam, ce_weight, history):
    t = model.adam.get("t", 0)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = _epoch_order(ids, cfg.seed, epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_gradients(
                model, x[idx], labels[idx], None if defects is None else defects[idx],
                lam, ce_weight, standardized=True)
            if not np.isfinite(loss):
                # parameters still hold the last finite-loss state
                raise TrainingError(f"non-finite loss at epoch {epoch}", model.copy())
            t += 1
            adam_step(model, grads, cfg, t)
            total += loss * idx.size
        probs = _softmax(_forward(model.params, x)[1])
        history.append({"epoch": epoch, "loss": total / n,
                        "accuracy": float(np.mean((probs[:, 1] > 0.5) == labels.astype(bool)))})
    return model


def train(features, labels, defects=None, config=None, row_ids=None):
    """Train from scratch; returns (model, history).

    Epoch ``e`` visits the rows sorted by a hash of (seed, e, row identity),
    so the result does not depend on the order rows are supplied in.
    """
    cfg = config or TrainConfig()
    x = np.ascontiguousarray(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=int)
    defects = None if defects is None else np.asarray(defects, dtype=float)
    if x.shape[0] < 1:
        raise ConstructionError("training needs at least one row")
    ids = row_identities(x, labels, defects) if row_ids is None else np.asarray(row_ids, np.uint64)
    dims = (x.shape[1],) + cfg.hidden
    shift = scale = None
    if cfg.standardize:
        from .datasets import Standardizer

        st = Standardizer.fit(x)
        shift, scale = st.mean, st.scale
        x = st.transform(x)
    history = []
    if cfg.shared_trunk:
        model = init(dims, cfg.seed)
        model.shift, model.scale, model.config = shift, scale, cfg.to_dict()
        _fit(model, x, labels, defects, cfg, ids, cfg.lam, cfg.ce_weight, history)
        return model, history
    classifier = init(dims, cfg.seed)
    regressor = init(dims, int(_rng.hash_indices(cfg.seed, _rng.INIT, 1)))
    for m in (classifier, regressor):
        m.shift, m.scale, m.config = shift, scale, cfg.to_dict()
    _fit(classifier, x, labels, None, cfg, ids, 0.0, cfg.ce_weight, history)
    if defects is not None and cfg.lam:
        reg_history = []
        _fit(regressor, x, labels, defects, cfg, ids, cfg.lam, 0.0, reg_history)
        for h, r in zip(history, reg_history):
            h["defect_loss"] = r["loss"]
    return TwinModel(classifier, regressor), history


@dataclass(eq=False)
class TwinModel:
    """Separately trained classifier and defect regressor behind one interface."""

    classifier: MlpModel
    regressor: MlpModel

    @property
    def dims(self):
        return self.classifier.dims


def predict(model, features):
    """(P_b, defect estimate) for either a shared-trunk or a twin model."""
    if isinstance(model, TwinModel):
        return (predict_bubble_probability(model.classifier, features),
                forward(model.regressor, features)[1])
    probs, defect = forward(model, features)
    return probs[:, 1], defect


def gradient_check(model, features, labels, defects=None, lam=0.1, h=1e-5, coords=None,
                   seed=0, n_coords=100):
    """Compare analytic gradients with central differences on sampled coordinates.

    Returns a list of (layer, flat index, analytic, numeric) tuples.
    """
    _, grads = loss_and_gradients(model, features, labels, defects, lam)
    gen = _rng.substream(seed, _rng.INIT, 99)
    if coords is None:
        sizes = np.array([model.params[k].size for k in LAYERS])
        flat = gen.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
        bounds = np.cumsum(sizes)
        coords = []
        for f in np.sort(flat):
            layer = int(np.searchsorted(bounds, f, side="right"))
            start = bounds[layer - 1] if layer else 0
            coords.append((LAYERS[layer], int(f - start)))
    out = []
    for name, idx in coords:
        arr = model.params[name].reshape(-1)
        keep = arr[idx]
        arr[idx] = keep + h
        up = loss_and_gradients(model, features, labels, defects, lam)[0]
        arr[idx] = keep - h
        down = loss_and_gradients(model, features, labels, defects, lam)[0]
        arr[idx] = keep
        out.append((name, idx, float(grads[name].reshape(-1)[idx]), (up - down) / (2 * h)))
    return out


# --------------------------------------------------------------------------
# Weight files
# --------------------------------------------------------------------------

def _model_arrays(model):
    arrays = [model.params[k] for k in LAYERS]
    if model.shift is not None:
        arrays += [model.shift, model.scale]
    return arrays


def _pack_model(model):
    header = {"dims": list(model.dims), "init_seed": model.init_seed,
              "standardized": model.shift is not None, "config": model.config}
    payload = np.concatenate([a.ravel() for a in _model_arrays(model)]).astype("<f8").tobytes()
    return header, payload


def save_weights(model, path):
    """JSON header + little-endian float64 payload + CRC32."""
    if isinstance(model, TwinModel):
        parts = [_pack_model(model.classifier), _pack_model(model.regressor)]
    else:
        parts = [_pack_model(model)]
    header = {"version": VERSION, "kind": "twin" if len(parts) == 2 else "shared",
              "models": [h for h, _ in parts], "sizes": [len(p) for _, p in parts]}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + b"".join(p for _, p in parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    return path


def _unpack_model(header, payload):
    dims = tuple(header["dims"])
    d0, h1, h2 = dims
    shapes = {"W1": (d0, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,),
              "Wc": (h2, 2), "bc": (2,), "Wd": (h2, 1), "bd": (1,)}
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, pos = {}, 0
    for k in LAYERS:
        size = int(np.prod(shapes[k]))
        params[k] = flat[pos:pos + size].reshape(shapes[k]).copy()
        pos += size
    model = MlpModel(dims, params, header["init_seed"], config=header.get("config", {}))
    if header["standardized"]:
        model.shift = flat[pos:pos + d0].copy()
        model.scale = flat[pos + d0:pos + 2 * d0].copy()
        pos += 2 * d0
    if pos != flat.size:
        raise FormatError("weight payload size does not match header")
    return model


def load_weights(path):
    data = open(path, "rb").read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a weights file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    header = json.loads(data[12:12 + hlen])
    payload = data[12 + hlen:-4]
    if sum(header["sizes"]) != len(payload):
        raise FormatError(f"{path}: payload size does not match header")
    models, pos = [], 0
    for h, size in zip(header["models"], header["sizes"]):
        models.append(_unpack_model(h, payload[pos:pos + size]))
        pos += size
    return TwinModel(*models) if header["kind"] == "twin" else models[0]
