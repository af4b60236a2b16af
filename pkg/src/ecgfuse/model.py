"""Classifier heads over window-feature sequences, with analytic gradients.

Three wirings share a softmax head:

* dense (spectral): ReLU dense layer per window, head per window, per-window
  probabilities averaged into one record-level prediction;
* lstm (longitudinal): single-layer LSTM over the window sequence, head on
  the final hidden state;
* dense-lstm (joint): dense layer per window feeding the LSTM, head on the
  final hidden state.

Everything is float64 numpy. backward() returns exact reverse-mode gradients
of the mean batch loss (sparse softmax cross-entropy), including
backpropagation through time; adam_step applies standard bias-corrected Adam.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "MODES",
    "ModelError",
    "ShapeMismatch",
    "InvalidTarget",
    "EmptySequence",
    "ModelDims",
    "DenseParams",
    "HeadParams",
    "LstmParams",
    "ModelParams",
    "Prediction",
    "OptimizerState",
    "dense_forward",
    "head_forward",
    "lstm_step",
    "forward_sequence",
    "sequence_probs",
    "loss",
    "batch_loss",
    "backward",
    "init_params",
    "init_optimizer",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("dense", "lstm", "dense-lstm")


class ModelError(Exception):
    pass


class ShapeMismatch(ModelError):
    pass


class InvalidTarget(ModelError):
    pass


class EmptySequence(ModelError):
    pass


@dataclass(frozen=True)
class ModelDims:
    """Layer widths for one wiring; defaults follow the reference setup."""

    mode: str
    tau_in: int
    n_classes: int
    kappa: int = 16
    nu: int = 16

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ModelError(f"unknown mode {self.mode!r}")
        if min(self.tau_in, self.n_classes) < 1:
            raise ModelError("tau_in and n_classes must be positive")

    @property
    def has_dense(self) -> bool:
        return self.mode in ("dense", "dense-lstm")

    @property
    def has_lstm(self) -> bool:
        return self.mode in ("lstm", "dense-lstm")

    @property
    def lstm_in(self) -> int:
        return self.kappa if self.mode == "dense-lstm" else self.tau_in

    @property
    def head_in(self) -> int:
        return self.kappa if self.mode == "dense" else self.nu


@dataclass
class DenseParams:
    w: np.ndarray  # (kappa, tau_in)
    b: np.ndarray  # (kappa,)


@dataclass
class HeadParams:
    w: np.ndarray  # (n_classes, head_in); no bias, matching the printed head


@dataclass
class LstmParams:
    """Gate weights over the concatenated (input, previous hidden) vector."""

    wi: np.ndarray
    bi: np.ndarray
    wf: np.ndarray
    bf: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    wc: np.ndarray
    bc: np.ndarray


@dataclass
class ModelParams:
    dims: ModelDims
    dense: DenseParams | None
    lstm: LstmParams | None
    head: HeadParams

    def _arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        if self.dense is not None:
            out += [self.dense.w, self.dense.b]
        if self.lstm is not None:
            out += [
                self.lstm.wi, self.lstm.bi,
                self.lstm.wf, self.lstm.bf,
                self.lstm.wo, self.lstm.bo,
                self.lstm.wc, self.lstm.bc,
            ]
        out.append(self.head.w)
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self._arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays())

    def from_flat(self, flat: np.ndarray) -> "ModelParams":
        """Rebuild a params object with the same shapes from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeMismatch(f"flat vector has {flat.size} entries, need {self.size}")
        pos = 0

        def take(like: np.ndarray) -> np.ndarray:
            nonlocal pos
            chunk = flat[pos : pos + like.size].reshape(like.shape).copy()
            pos += like.size
            return chunk

        dense = None
        if self.dense is not None:
            dense = DenseParams(w=take(self.dense.w), b=take(self.dense.b))
        lstm = None
        if self.lstm is not None:
            lstm = LstmParams(
                wi=take(self.lstm.wi), bi=take(self.lstm.bi),
                wf=take(self.lstm.wf), bf=take(self.lstm.bf),
                wo=take(self.lstm.wo), bo=take(self.lstm.bo),
                wc=take(self.lstm.wc), bc=take(self.lstm.bc),
            )
        head = HeadParams(w=take(self.head.w))
        return ModelParams(dims=self.dims, dense=dense, lstm=lstm, head=head)

    def zeros_like(self) -> "ModelParams":
        return self.from_flat(np.zeros(self.size))


@dataclass
class Prediction:
    """Class probabilities plus the argmax label index."""

    probs: np.ndarray
    label: int

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Prediction":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs=probs, label=int(np.argmax(probs)))


def _glorot(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Glorot-uniform weights; zero biases except forget-gate bias = 1."""
    rng = np.random.default_rng(seed)
    dense = None
    if dims.has_dense:
        dense = DenseParams(
            w=_glorot(rng, (dims.kappa, dims.tau_in), dims.tau_in, dims.kappa),
            b=np.zeros(dims.kappa),
        )
    lstm = None
    if dims.has_lstm:
        d_in = dims.lstm_in
        z = d_in + dims.nu

        def gate() -> np.ndarray:
            return _glorot(rng, (dims.nu, z), z, dims.nu)

        lstm = LstmParams(
            wi=gate(), bi=np.zeros(dims.nu),
            wf=gate(), bf=np.ones(dims.nu),
            wo=gate(), bo=np.zeros(dims.nu),
            wc=gate(), bc=np.zeros(dims.nu),
        )
    head = HeadParams(w=_glorot(rng, (dims.n_classes, dims.head_in), dims.head_in, dims.n_classes))
    return ModelParams(dims=dims, dense=dense, lstm=lstm, head=head)


# ---------------------------------------------------------------------------
# Forward primitives
# ---------------------------------------------------------------------------

def dense_forward(d: np.ndarray, params: DenseParams) -> np.ndarray:
    """ReLU(W d + b)."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != params.w.shape[1]:
        raise ShapeMismatch(f"input length {d.shape[-1]}, weight expects {params.w.shape[1]}")
    return np.maximum(d @ params.w.T + params.b, 0.0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(r: np.ndarray, params: HeadParams) -> Prediction:
    """Softmax over W r; ties in the argmax go to the lowest index."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != params.w.shape[1]:
        raise ShapeMismatch(f"input length {r.shape[-1]}, head expects {params.w.shape[1]}")
    return Prediction.from_probs(_softmax(params.w @ r))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_step(
    x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: LstmParams
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update: gates from (x ++ h_prev), then c and h."""
    x = np.asarray(x, dtype=np.float64)
    z = np.concatenate([x, h_prev], axis=-1)
    if z.shape[-1] != params.wi.shape[1]:
        raise ShapeMismatch(f"gate input length {z.shape[-1]}, weights expect {params.wi.shape[1]}")
    i = _sigmoid(z @ params.wi.T + params.bi)
    f = _sigmoid(z @ params.wf.T + params.bf)
    o = _sigmoid(z @ params.wo.T + params.bo)
    cbar = np.tanh(z @ params.wc.T + params.bc)
    c = f * c_prev + i * cbar
    h = o * np.tanh(c)
    return h, c


# ---------------------------------------------------------------------------
# Batched forward/backward over (B, gamma, d_in) sequences
# ---------------------------------------------------------------------------

def _check_batch(x: np.ndarray, dims: ModelDims) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (batch, gamma, d_in), got shape {x.shape}")
    if x.shape[1] == 0:
        raise EmptySequence("sequence of zero windows")
    if x.shape[2] != dims.tau_in:
        raise ShapeMismatch(f"feature width {x.shape[2]}, model expects {dims.tau_in}")
    return x


def _forward(x: np.ndarray, params: ModelParams) -> dict:
    """Run the batch forward and keep every intermediate needed by backward."""
    dims = params.dims
    cache: dict = {"x": x}
    feats = x
    if dims.has_dense:
        a = x @ params.dense.w.T + params.dense.b  # (B, g, kappa)
        r = np.maximum(a, 0.0)
        cache["dense_pre"] = a
        cache["dense_out"] = r
        feats = r
    if dims.has_lstm:
        b, g, _ = feats.shape
        nu = dims.nu
        h = np.zeros((b, nu))
        c = np.zeros((b, nu))
        steps = []
        for n in range(g):
            z = np.concatenate([feats[:, n, :], h], axis=1)
            i = _sigmoid(z @ params.lstm.wi.T + params.lstm.bi)
            f = _sigmoid(z @ params.lstm.wf.T + params.lstm.bf)
            o = _sigmoid(z @ params.lstm.wo.T + params.lstm.bo)
            cbar = np.tanh(z @ params.lstm.wc.T + params.lstm.bc)
            c_new = f * c + i * cbar
            t = np.tanh(c_new)
            h_new = o * t
            steps.append({"z": z, "i": i, "f": f, "o": o, "cbar": cbar,
                          "c_prev": c, "c": c_new, "t": t})
            h, c = h_new, c_new
        cache["steps"] = steps
        cache["logits"] = h @ params.head.w.T  # (B, n_classes)
    else:
        cache["logits"] = feats @ params.head.w.T  # (B, g, n_classes)
    return cache


def sequence_probs(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Record-level class probabilities for a batch, shape (B, n_classes).

    Dense mode averages per-window softmax probabilities; the sequence modes
    apply softmax to the final-step logits.
    """
    x = _check_batch(x, params.dims)
    cache = _forward(x, params)
    logits = cache["logits"]
    if params.dims.mode == "dense":
        return _softmax(logits).mean(axis=1)
    return _softmax(logits)


def forward_sequence(inputs: np.ndarray, params: ModelParams) -> Prediction:
    """One record's gamma ordered feature vectors -> one Prediction."""
    probs = sequence_probs(np.asarray(inputs, dtype=np.float64)[None], params)[0]
    return Prediction.from_probs(probs)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, target: int) -> float:
    """Sparse softmax cross-entropy of one logit vector, in log-space."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise InvalidTarget(f"target {target} outside [0, {logits.shape[-1]})")
    return float(-_log_softmax(logits)[..., target])


def batch_loss(x: np.ndarray, y: np.ndarray, params: ModelParams) -> float:
    """Mean record loss; dense mode averages per-window losses within a record."""
    x = _check_batch(x, params.dims)
    y = np.asarray(y, dtype=np.intp)
    cache = _forward(x, params)
    logp = _log_softmax(cache["logits"])
    if params.dims.mode == "dense":
        picked = logp[np.arange(x.shape[0])[:, None], np.arange(x.shape[1])[None, :], y[:, None]]
        return float(-picked.mean())
    picked = logp[np.arange(x.shape[0]), y]
    return float(-picked.mean())


def backward(
    x: np.ndarray, y: np.ndarray, params: ModelParams
) -> tuple[float, ModelParams]:
    """Loss and exact gradients of the mean batch loss, BPTT included."""
    dims = params.dims
    x = _check_batch(x, dims)
    y = np.asarray(y, dtype=np.intp)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} sequences but {y.shape[0]} targets")
    if y.size and (y.min() < 0 or y.max() >= dims.n_classes):
        raise InvalidTarget(f"targets outside [0, {dims.n_classes})")
    b, g, _ = x.shape
    cache = _forward(x, params)
    logits = cache["logits"]
    logp = _log_softmax(logits)
    probs = np.exp(logp)

    grads = params.zeros_like()
    onehot = np.eye(dims.n_classes)[y]

    if dims.mode == "dense":
        loss_val = float(-logp[np.arange(b)[:, None], np.arange(g)[None, :], y[:, None]].mean())
        dlogits = (probs - onehot[:, None, :]) / (b * g)  # (B, g, Nc)
        r = cache["dense_out"]
        grads.head.w[:] = np.einsum("bnc,bnk->ck", dlogits, r)
        dr = dlogits @ params.head.w  # (B, g, kappa)
        da = dr * (cache["dense_pre"] > 0)
        grads.dense.w[:] = np.einsum("bnk,bnd->kd", da, x)
        grads.dense.b[:] = da.sum(axis=(0, 1))
        return loss_val, grads

    loss_val = float(-logp[np.arange(b), y].mean())
    dlogits = (probs - onehot) / b  # (B, Nc)
    steps = cache["steps"]
    h_last = steps[-1]["o"] * steps[-1]["t"]
    grads.head.w[:] = dlogits.T @ h_last
    dh = dlogits @ params.head.w
    dc = np.zeros_like(dh)
    d_in = dims.lstm_in
    lstm = params.lstm
    dfeats = np.empty((b, g, d_in))
    for n in range(g - 1, -1, -1):
        s = steps[n]
        do = dh * s["t"]
        dc = dc + dh * s["o"] * (1.0 - s["t"] ** 2)
        di = dc * s["cbar"]
        dcbar = dc * s["i"]
        df = dc * s["c_prev"]
        dc = dc * s["f"]
        d_ai = di * s["i"] * (1.0 - s["i"])
        d_af = df * s["f"] * (1.0 - s["f"])
        d_ao = do * s["o"] * (1.0 - s["o"])
        d_ac = dcbar * (1.0 - s["cbar"] ** 2)
        z = s["z"]
        grads.lstm.wi += d_ai.T @ z
        grads.lstm.bi += d_ai.sum(axis=0)
        grads.lstm.wf += d_af.T @ z
        grads.lstm.bf += d_af.sum(axis=0)
        grads.lstm.wo += d_ao.T @ z
        grads.lstm.bo += d_ao.sum(axis=0)
        grads.lstm.wc += d_ac.T @ z
        grads.lstm.bc += d_ac.sum(axis=0)
        dz = d_ai @ lstm.wi + d_af @ lstm.wf + d_ao @ lstm.wo + d_ac @ lstm.wc
        dfeats[:, n, :] = dz[:, :d_in]
        dh = dz[:, d_in:]
    if dims.mode == "dense-lstm":
        da = dfeats * (cache["dense_pre"] > 0)
        grads.dense.w[:] = np.einsum("bnk,bnd->kd", da, x)
        grads.dense.b[:] = da.sum(axis=(0, 1))
    return loss_val, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(
    params: ModelParams,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    n = params.size
    return OptimizerState(m=np.zeros(n), v=np.zeros(n), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: ModelParams, grads: ModelParams, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """Standard Adam with bias correction; returns fresh params and state."""
    theta = params.flatten()
    g = grads.flatten()
    if g.size != theta.size or state.m.size != theta.size:
        raise ShapeMismatch("parameter, gradient, and moment sizes must agree")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.from_flat(theta), replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# Checkpoints: magic "ECGM1", JSON header, float64 little-endian payload
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"ECGM1"


def save_checkpoint(
    path: str | Path,
    models: list[tuple[ModelParams, OptimizerState]],
    seed: int,
    config: dict | None = None,
    config_hash: str | None = None,
    extra: dict | None = None,
) -> None:
    """Write params + optimizer state for one model (or 12 per-lead models)."""
    if not models:
        raise ModelError("nothing to checkpoint")
    dims = models[0][0].dims
    state0 = models[0][1]
    header = {
        "version": 1,
        "mode": dims.mode,
        "dims": {
            "tau_in": dims.tau_in,
            "n_classes": dims.n_classes,
            "kappa": dims.kappa,
            "nu": dims.nu,
        },
        "seed": seed,
        "n_models": len(models),
        "param_count": models[0][0].size,
        "steps": [state.step for _, state in models],
        "hyper": {
            "lr": state0.lr,
            "beta1": state0.beta1,
            "beta2": state0.beta2,
            "eps": state0.eps,
        },
        "config": config,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for params, state in models:
            if params.dims != dims:
                raise ShapeMismatch("all checkpointed models must share dims")
            fh.write(params.flatten().astype("<f8").tobytes())
            fh.write(state.m.astype("<f8").tobytes())
            fh.write(state.v.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint into {header, models: [(ModelParams, OptimizerState)]}."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise ModelError(f"{path}: bad checkpoint magic {raw[:5]!r}")
    (hlen,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    dims = ModelDims(
        mode=header["mode"],
        tau_in=header["dims"]["tau_in"],
        n_classes=header["dims"]["n_classes"],
        kappa=header["dims"]["kappa"],
        nu=header["dims"]["nu"],
    )
    template = init_params(dims, 0)
    count = template.size
    if count != header["param_count"]:
        raise ModelError(f"{path}: header param_count {header['param_count']} != {count}")
    body = np.frombuffer(raw, dtype="<f8", offset=9 + hlen)
    expect = header["n_models"] * count * 3
    if body.size != expect:
        raise ModelError(f"{path}: payload holds {body.size} floats, need {expect}")
    hyper = header["hyper"]
    models = []
    for k in range(header["n_models"]):
        base = k * count * 3
        params = template.from_flat(body[base : base + count])
        state = OptimizerState(
            m=body[base + count : base + 2 * count].copy(),
            v=body[base + 2 * count : base + 3 * count].copy(),
            step=header["steps"][k],
            lr=hyper["lr"],
            beta1=hyper["beta1"],
            beta2=hyper["beta2"],
            eps=hyper["eps"],
        )
        models.append((params, state))
    return {"header": header, "models": models}
