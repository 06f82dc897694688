"""Stacked LSTM next-key classifier with hand-written backpropagation through time.

Inputs are one-hot keys, so the first layer's input projection reduces to a
row gather. Only the last hidden state of the top layer feeds the softmax.
Gate order inside every ``(.., 4 * alpha)`` block is input, forget, output,
candidate.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TTLSTM\x00\x00"
CHECKPOINT_VERSION = 1


class EmptyTrainingSet(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    """Training loss became NaN or infinite; the learning rate is too high."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    G: int  # alphabet size, 2n + 1 for a base vocabulary of n keys
    w: int = 15
    L: int = 2
    alpha: int = 64
    B: int = 2048
    epochs: int = 160
    lr0: float = 0.05
    decay: float = 0.97
    seed: int = 0
    clip: float = 5.0  # global gradient-norm cap, 0 disables
    init_scale: float = 0.08
    val_fraction: float = 0.05

    def __post_init__(self) -> None:
        for name in ("G", "w", "L", "alpha", "B", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr0 <= 0 or self.decay <= 0:
            raise ValueError("lr0 and decay must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay**epoch


def param_names(L: int) -> list[str]:
    names = []
    for layer in range(L):
        names += [f"Wx{layer}", f"Wh{layer}", f"b{layer}"]
    return names + ["V", "c"]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to stay finite for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class LstmModel:
    hp: Hyperparams
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    @classmethod
    def initialize(cls, hp: Hyperparams, rng: np.random.Generator | None = None) -> "LstmModel":
        rng = rng if rng is not None else np.random.default_rng(hp.seed)
        a, s = hp.alpha, hp.init_scale
        params: dict[str, np.ndarray] = {}
        for layer in range(hp.L):
            n_in = hp.G if layer == 0 else a
            params[f"Wx{layer}"] = rng.uniform(-s, s, (n_in, 4 * a))
            params[f"Wh{layer}"] = rng.uniform(-s, s, (a, 4 * a))
            params[f"b{layer}"] = np.zeros(4 * a)
        params["V"] = rng.uniform(-s, s, (hp.G, a))
        params["c"] = np.zeros(hp.G)
        return cls(hp, params)

    @property
    def G(self) -> int:
        return self.hp.G

    @property
    def w(self) -> int:
        return self.hp.w

    def copy(self) -> "LstmModel":
        return LstmModel(self.hp, {k: v.copy() for k, v in self.params.items()},
                         [dict(h) for h in self.history])

    # -- forward / backward -------------------------------------------------

    def _forward(self, X: np.ndarray, keep: bool = False):
        """Run the stack over int contexts ``X`` of shape (B, T); returns logits."""
        p, a = self.params, self.hp.alpha
        n, T = X.shape
        caches = []
        below = None  # (T, n, a) hidden states of the layer underneath
        for layer in range(self.hp.L):
            Wx, Wh, b = p[f"Wx{layer}"], p[f"Wh{layer}"], p[f"b{layer}"]
            if layer == 0:
                xw = Wx[X.T]  # (T, n, 4a)
            else:
                xw = below @ Wx
            hs = np.zeros((T + 1, n, a))
            cs = np.zeros((T + 1, n, a))
            gates = np.empty((T, n, 4 * a))
            for t in range(T):
                z = xw[t] + hs[t] @ Wh + b
                gates[t, :, : 3 * a] = _sigmoid(z[:, : 3 * a])
                gates[t, :, 3 * a :] = np.tanh(z[:, 3 * a :])
                i, f = gates[t, :, :a], gates[t, :, a : 2 * a]
                o, g = gates[t, :, 2 * a : 3 * a], gates[t, :, 3 * a :]
                cs[t + 1] = f * cs[t] + i * g
                hs[t + 1] = o * np.tanh(cs[t + 1])
            if keep:
                caches.append((below, hs, cs, gates))
            below = hs[1:]
        h_last = below[-1]
        logits = h_last @ p["V"].T + p["c"]
        return logits, (caches, h_last)

    def loss_and_grads(
        self, X: np.ndarray, y: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy over the batch and its gradient for every parameter."""
        X = np.asarray(X, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise ValueError("batch must be a non-empty (n, T) array with T >= 1")
        p, a = self.params, self.hp.alpha
        n, T = X.shape
        logits, (caches, h_last) = self._forward(X, keep=True)
        logp = _log_softmax(logits)
        loss = float(-logp[np.arange(n), y].mean())

        grads: dict[str, np.ndarray] = {}
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        grads["V"] = dlogits.T @ h_last
        grads["c"] = dlogits.sum(axis=0)

        dh_above = np.zeros((T, n, a))
        dh_above[-1] = dlogits @ p["V"]
        for layer in reversed(range(self.hp.L)):
            below, hs, cs, gates = caches[layer]
            Wx, Wh = p[f"Wx{layer}"], p[f"Wh{layer}"]
            dz = np.empty((T, n, 4 * a))
            dh_next = np.zeros((n, a))
            dc_next = np.zeros((n, a))
            for t in reversed(range(T)):
                i, f = gates[t, :, :a], gates[t, :, a : 2 * a]
                o, g = gates[t, :, 2 * a : 3 * a], gates[t, :, 3 * a :]
                dh = dh_above[t] + dh_next
                tc = np.tanh(cs[t + 1])
                dc = dc_next + dh * o * (1.0 - tc * tc)
                dz[t, :, :a] = dc * g * i * (1.0 - i)
                dz[t, :, a : 2 * a] = dc * cs[t] * f * (1.0 - f)
                dz[t, :, 2 * a : 3 * a] = dh * tc * o * (1.0 - o)
                dz[t, :, 3 * a :] = dc * i * (1.0 - g * g)
                dc_next = dc * f
                dh_next = dz[t] @ Wh.T
            flat_dz = dz.reshape(T * n, 4 * a)
            grads[f"Wh{layer}"] = hs[:-1].reshape(T * n, a).T @ flat_dz
            grads[f"b{layer}"] = flat_dz.sum(axis=0)
            if layer == 0:
                onehot = np.zeros((T * n, self.hp.G))
                onehot[np.arange(T * n), X.T.reshape(-1)] = 1.0
                grads["Wx0"] = onehot.T @ flat_dz
            else:
                grads[f"Wx{layer}"] = below.reshape(T * n, a).T @ flat_dz
                dh_above = dz @ Wx.T
        return loss, grads

    def loss(self, X: np.ndarray, y: np.ndarray, chunk: int = 8192) -> float:
        X = np.asarray(X, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        total = 0.0
        for s in range(0, len(y), chunk):
            logits, _ = self._forward(X[s : s + chunk])
            logp = _log_softmax(logits)
            total += float(-logp[np.arange(len(logp)), y[s : s + chunk]].sum())
        return total / max(1, len(y))

    def predict_proba(self, X: np.ndarray, chunk: int = 8192) -> np.ndarray:
        """Next-key distributions for contexts ``X`` of shape (N, w)."""
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[None, :]
        if X.size and (X.min() < 0 or X.max() >= self.G):
            from tasktrace.encoder import KeyOutOfRange

            raise KeyOutOfRange(f"context keys must lie in [0, {self.G})")
        out = np.empty((len(X), self.G))
        for s in range(0, len(X), chunk):
            logits, _ = self._forward(X[s : s + chunk])
            out[s : s + chunk] = np.exp(_log_softmax(logits))
        return out

    def predict(self, context: Sequence[int]) -> np.ndarray:
        if len(context) != self.w:
            raise ValueError(f"context must have {self.w} keys, got {len(context)}")
        return self.predict_proba(np.asarray(context)[None, :])[0]

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Little-endian binary: magic, version, (G, w, L, alpha), then every
        parameter as ndim, shape, float32 values in row-major order."""
        hp = self.hp
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<5I", CHECKPOINT_VERSION, hp.G, hp.w, hp.L, hp.alpha))
            for name in param_names(hp.L):
                arr = np.ascontiguousarray(self.params[name], dtype="<f4")
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "LstmModel":
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an LSTM checkpoint")
        version, G, w, L, alpha = struct.unpack_from("<5I", data, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off = 8 + 20
        params = {}
        for name in param_names(L):
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            params[name] = arr.astype(np.float64)
        hp = Hyperparams(G=G, w=w, L=L, alpha=alpha, **overrides)
        return cls(hp, params)


def _as_arrays(windows) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(windows, tuple) and len(windows) == 2:
        X, y = windows
    elif hasattr(windows, "contexts") and hasattr(windows, "labels"):
        X, y = windows.contexts, windows.labels
    else:
        windows = list(windows)
        if not windows:
            return np.zeros((0, 0), np.int64), np.zeros(0, np.int64)
        X = [w.context for w in windows]
        y = [w.label for w in windows]
    return np.asarray(X, dtype=np.int64), np.asarray(y, dtype=np.int64)


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def _sgd(model: LstmModel, X: np.ndarray, y: np.ndarray, epochs: int,
         rng: np.random.Generator, epoch_offset: int = 0) -> None:
    hp = model.hp
    n_val = int(len(y) * hp.val_fraction) if len(y) >= 20 else 0
    Xt, yt = X[: len(y) - n_val], y[: len(y) - n_val]
    Xv, yv = X[len(y) - n_val :], y[len(y) - n_val :]
    for e in range(epochs):
        epoch = epoch_offset + e
        lr = hp.lr(epoch)
        order = rng.permutation(len(yt))
        total, seen = 0.0, 0
        for s in range(0, len(order), hp.B):
            idx = order[s : s + hp.B]
            loss, grads = model.loss_and_grads(Xt[idx], yt[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} in epoch {epoch}")
            scale = 1.0
            if hp.clip > 0:
                norm = _grad_norm(grads)
                if norm > hp.clip:
                    scale = hp.clip / norm
            for name, g in grads.items():
                model.params[name] -= (lr * scale) * g
            total += loss * len(idx)
            seen += len(idx)
        for name, v in model.params.items():
            if not np.all(np.isfinite(v)):
                raise DivergedLoss(f"parameter {name} became non-finite in epoch {epoch}")
        entry = {"epoch": epoch, "mean_loss": total / seen, "lr": lr}
        entry["val_loss"] = model.loss(Xv, yv) if n_val else float("nan")
        model.history.append(entry)
        logger.info("epoch %d loss %.5f val %.5f lr %.5g", epoch, entry["mean_loss"],
                    entry["val_loss"], lr)


def _round_to_f32(model: LstmModel) -> None:
    # in-memory weights match what a checkpoint round-trip yields
    for name, v in model.params.items():
        model.params[name] = v.astype(np.float32).astype(np.float64)


def train_lstm(windows, hp: Hyperparams) -> LstmModel:
    """Mini-batch SGD on mean cross-entropy with learning rate ``lr0 * decay**epoch``.

    ``windows`` is a list of :class:`~tasktrace.sequencer.Window`, a
    :class:`~tasktrace.sequencer.WindowBatch`, or an ``(X, y)`` pair. The last
    ``val_fraction`` of windows is held out for the validation loss column of
    the training log.
    """
    X, y = _as_arrays(windows)
    if len(y) == 0:
        raise EmptyTrainingSet("no training windows")
    if X.shape[1] != hp.w:
        raise DimensionMismatch(f"windows have width {X.shape[1]}, expected {hp.w}")
    if X.min() < 0 or max(X.max(), y.max()) >= hp.G or y.min() < 0:
        raise DimensionMismatch(f"keys must lie in [0, {hp.G})")
    rng = np.random.default_rng(hp.seed)
    model = LstmModel.initialize(hp, rng)
    _sgd(model, X, y, hp.epochs, rng)
    _round_to_f32(model)
    return model


def fine_tune(model: LstmModel, new_windows, hp: Hyperparams | None = None) -> LstmModel:
    """Continue SGD from ``model``'s weights on new windows; the input model is not modified."""
    hp = hp if hp is not None else model.hp
    if (hp.G, hp.w, hp.L, hp.alpha) != (model.hp.G, model.hp.w, model.hp.L, model.hp.alpha):
        raise DimensionMismatch(
            f"model has G={model.hp.G}, w={model.hp.w}, L={model.hp.L}, alpha={model.hp.alpha}"
        )
    tuned = model.copy()
    tuned.hp = hp
    X, y = _as_arrays(new_windows)
    if len(y) == 0:
        return tuned
    if X.shape[1] != hp.w or X.min() < 0 or max(X.max(), y.max()) >= hp.G:
        raise DimensionMismatch("new windows do not fit the model dimensions")
    rng = np.random.default_rng(hp.seed)
    start = len(model.history)
    _sgd(tuned, X, y, hp.epochs, rng, epoch_offset=start)
    _round_to_f32(tuned)
    return tuned


def write_training_log(model: LstmModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "val_loss", "lr"])
        for h in model.history:
            writer.writerow([h["epoch"], f"{h['mean_loss']:.8f}", f"{h['val_loss']:.8f}",
                             f"{h['lr']:.8g}"])


def with_overrides(hp: Hyperparams, **changes) -> Hyperparams:
    return replace(hp, **changes)
