"""Sequence model: embedding, a stack of multi-channel layers with
inter-layer dropout, and a loss head.

Two heads share the same forward/backward contract: "softmax" (token
prediction, mean cross-entropy in nats/token, optional per-position mask)
and "mse" (scalar regression from the final step, used by the adding task).

Checkpoints use a small deterministic binary container so that identical
runs produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError, ShapeError, TapeMismatchError
from .layer import (
    LayerCarry,
    LayerParams,
    LayerTape,
    carry_out,
    init_layer_params,
    layer_backward,
    layer_forward,
    make_carry,
)
from .numerics import make_rng, uniform_init
from .topology import Topology

CHECKPOINT_MAGIC = b"MCRNNCKPT"
CHECKPOINT_VERSION = 1

HEAD_SOFTMAX = "softmax"
HEAD_MSE = "mse"


@dataclass
class Batch:
    """Token batch: targets are the inputs shifted one step within each lane.

    mask (optional) weights each target position; zero-masked positions
    contribute neither loss nor gradient.
    """

    inputs: np.ndarray  # (B, T) int
    targets: np.ndarray  # (B, T) int
    mask: np.ndarray | None = None  # (B, T) float


@dataclass
class AddingBatch:
    """Regression batch: real-valued feature sequences and one scalar target
    per lane, predicted from the final step."""

    features: np.ndarray  # (B, T, F)
    targets: np.ndarray  # (B,)


@dataclass
class ModelCarry:
    """Per-layer trailing states plus the absolute step offset, carried
    across TBPTT windows. States are data only: no gradient crosses."""

    layers: list[LayerCarry]
    t0: int = 0


@dataclass
class ModelTape:
    mode: str
    batch: object
    layer_tapes: list[LayerTape]
    dropout_masks: list[np.ndarray | None]
    probs: np.ndarray | None = None  # (T*B, V) softmax head
    flat_targets: np.ndarray | None = None
    flat_mask: np.ndarray | None = None
    mask_total: float = 0.0
    h_stack: np.ndarray | None = None  # (T*B, H) final layer outputs
    pred: np.ndarray | None = None  # (B,) mse head
    h_last: np.ndarray | None = None


class Model:
    def __init__(
        self,
        head: str,
        layers: list[LayerParams],
        emb: np.ndarray | None,
        out_w: np.ndarray | None,
        out_b: np.ndarray,
        tie_weights: bool,
        dropout_p: float,
    ):
        if head not in (HEAD_SOFTMAX, HEAD_MSE):
            raise ValueError(f"unknown head {head!r}")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout_p}")
        if tie_weights:
            if emb is None or emb.shape[1] != layers[-1].n_h:
                raise ValueError("weight tying requires embedding dim == hidden dim")
        self.head = head
        self.layers = layers
        self.emb = emb
        self.out_w = out_w  # None when tied (the embedding doubles as projection)
        self.out_b = out_b
        self.tie_weights = tie_weights
        self.dropout_p = dropout_p

    # -- construction ------------------------------------------------------

    @classmethod
    def create(
        cls,
        head: str,
        n: int,
        cell_kind: str,
        n_layers: int,
        n_h: int,
        n_e: int | None,
        vocab_size: int | None,
        seed: int,
        tie_weights: bool = False,
        dropout_p: float = 0.0,
        in_dim: int | None = None,
        identity_mix: bool = False,
        mix_cell_state: bool = False,
        freeze_mix: bool = False,
    ) -> "Model":
        rng = make_rng(seed)
        topo = Topology(n)
        first_in = n_e if head == HEAD_SOFTMAX else in_dim
        if first_in is None:
            raise ValueError("softmax head needs n_e and vocab_size; mse head needs in_dim")
        layers = []
        for i in range(n_layers):
            layers.append(
                init_layer_params(
                    topo,
                    cell_kind,
                    n_h,
                    first_in if i == 0 else n_h,
                    rng,
                    identity_mix=identity_mix,
                    mix_cell_state=mix_cell_state,
                    freeze_mix=freeze_mix,
                )
            )
        if head == HEAD_SOFTMAX:
            emb = uniform_init(rng, (vocab_size, n_e), 0.1)
            if tie_weights:
                out_w = None
            else:
                out_w = uniform_init(rng, (vocab_size, n_h), 1.0 / np.sqrt(n_h))
            out_b = np.zeros(vocab_size)
        else:
            emb = None
            out_w = uniform_init(rng, (n_h,), 1.0 / np.sqrt(n_h))
            out_b = np.zeros(1)
        return cls(head, layers, emb, out_w, out_b, tie_weights, dropout_p)

    # -- parameter plumbing ------------------------------------------------

    def named_params(self) -> list[tuple[str, np.ndarray, bool]]:
        """(name, array, trainable) for every parameter tensor, stable order."""
        out = []
        if self.emb is not None:
            out.append(("emb", self.emb, True))
        for i, lp in enumerate(self.layers):
            out.extend(lp.named(prefix=f"layers.{i}."))
        if self.out_w is not None:
            out.append(("out_w", self.out_w, True))
        out.append(("out_b", self.out_b, True))
        return out

    def trainable_params(self) -> list[tuple[str, np.ndarray]]:
        return [(n, a) for n, a, t in self.named_params() if t]

    def trainable_param_count(self) -> int:
        return sum(a.size for _, a in self.trainable_params())

    @property
    def n_h(self) -> int:
        return self.layers[-1].n_h

    @property
    def vocab_size(self) -> int | None:
        return self.emb.shape[0] if self.emb is not None else None

    def init_carry(self, batch: int) -> ModelCarry:
        return ModelCarry(layers=[make_carry(lp, batch) for lp in self.layers], t0=0)

    # -- forward / backward ------------------------------------------------

    def forward_loss(
        self,
        batch: Batch | AddingBatch,
        mode: str = "train",
        rng: np.random.Generator | None = None,
        carry: ModelCarry | None = None,
        workers: int = 1,
    ) -> tuple[float, ModelTape]:
        """Mean loss over the batch plus the tape for backward.

        Dropout fires only in train mode (inverted scaling, so eval needs no
        rescale); train mode with dropout > 0 requires an rng.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if self.head == HEAD_SOFTMAX:
            xs, B, T = self._embed(batch)
        else:
            f = batch.features
            if f.ndim != 3 or f.shape[2] != self.layers[0].n_x:
                raise ShapeError(f"features must be (B, T, {self.layers[0].n_x}), got {f.shape}")
            B, T = f.shape[0], f.shape[1]
            xs = [np.ascontiguousarray(f[:, t, :], dtype=np.float64) for t in range(T)]

        drop = self.dropout_p if mode == "train" else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("train-mode dropout needs an rng for reproducible masks")

        t0 = carry.t0 if carry is not None else 0
        tapes: list[LayerTape] = []
        masks: list[np.ndarray | None] = []
        cur = xs
        for i, lp in enumerate(self.layers):
            lc = carry.layers[i] if carry is not None else None
            h_atts, tape = layer_forward(lp, cur, t0=t0, carry=lc, workers=workers)
            tapes.append(tape)
            if i < len(self.layers) - 1:
                if drop > 0.0:
                    m = (rng.random((T, B, self.n_h)) >= drop) / (1.0 - drop)
                    masks.append(m)
                    cur = [h_atts[t] * m[t] for t in range(T)]
                else:
                    masks.append(None)
                    cur = h_atts
            else:
                cur = h_atts

        tape = ModelTape(mode=mode, batch=batch, layer_tapes=tapes, dropout_masks=masks)
        if self.head == HEAD_SOFTMAX:
            loss = self._softmax_loss(batch, cur, B, T, tape)
        else:
            loss = self._mse_loss(batch, cur, tape)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss}")
        return loss, tape

    def _embed(self, batch: Batch) -> tuple[list[np.ndarray], int, int]:
        ids = batch.inputs
        if ids.ndim != 2:
            raise ShapeError(f"batch inputs must be (B, T), got {ids.shape}")
        V = self.emb.shape[0]
        if ids.min() < 0 or ids.max() >= V or batch.targets.min() < 0 or batch.targets.max() >= V:
            raise DataError(f"token id out of range for vocabulary of size {V}")
        B, T = ids.shape
        embedded = self.emb[ids]  # (B, T, Ne)
        return [np.ascontiguousarray(embedded[:, t, :]) for t in range(T)], B, T

    def _softmax_loss(self, batch: Batch, h_atts: list[np.ndarray], B: int, T: int, tape: ModelTape) -> float:
        hs = np.concatenate(h_atts, axis=0)  # (T*B, H), step-major
        proj = self.emb if self.tie_weights else self.out_w
        logits = hs @ proj.T + self.out_b
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        flat_targets = batch.targets.T.reshape(-1)
        if batch.mask is None:
            flat_mask = np.ones(T * B)
        else:
            flat_mask = batch.mask.T.reshape(-1).astype(np.float64)
        total = float(flat_mask.sum())
        if total <= 0:
            raise DataError("batch mask excludes every position")
        logp = np.log(probs[np.arange(T * B), flat_targets])
        loss = -float(np.sum(logp * flat_mask)) / total
        tape.probs = probs
        tape.flat_targets = flat_targets
        tape.flat_mask = flat_mask
        tape.mask_total = total
        tape.h_stack = hs
        return loss

    def _mse_loss(self, batch: AddingBatch, h_atts: list[np.ndarray], tape: ModelTape) -> float:
        h_last = h_atts[-1]
        pred = h_last @ self.out_w + self.out_b[0]
        diff = pred - batch.targets
        tape.pred = pred
        tape.h_last = h_last
        return float(np.mean(diff * diff))

    def backward(self, tape: ModelTape, workers: int = 1) -> dict[str, np.ndarray]:
        """Exact gradients of the mean loss for every parameter tensor."""
        grads: dict[str, np.ndarray] = {}
        if self.head == HEAD_SOFTMAX:
            dh_list, B, T = self._softmax_head_backward(tape, grads)
        else:
            dh_list, B, T = self._mse_head_backward(tape, grads)

        demb = np.zeros_like(self.emb) if self.emb is not None else None
        upstream = dh_list
        for i in range(len(self.layers) - 1, -1, -1):
            lgrads, dxs = layer_backward(self.layers[i], tape.layer_tapes[i], upstream, workers=workers)
            for name, g in lgrads.named(prefix=f"layers.{i}."):
                grads[name] = g
            if i > 0:
                m = tape.dropout_masks[i - 1]
                upstream = [dxs[t] * m[t] for t in range(T)] if m is not None else dxs
            else:
                if self.head == HEAD_SOFTMAX:
                    ids = tape.batch.inputs
                    for t in range(T):
                        np.add.at(demb, ids[:, t], dxs[t])
        if demb is not None:
            # tied weights already wrote the projection gradient under "emb"
            grads["emb"] = grads["emb"] + demb if "emb" in grads else demb
        return grads

    def _softmax_head_backward(self, tape: ModelTape, grads: dict) -> tuple[list[np.ndarray], int, int]:
        if tape.probs is None:
            raise TapeMismatchError("tape has no softmax head record")
        batch: Batch = tape.batch
        B, T = batch.inputs.shape
        dlogits = tape.probs.copy()
        dlogits[np.arange(dlogits.shape[0]), tape.flat_targets] -= 1.0
        dlogits *= (tape.flat_mask / tape.mask_total)[:, None]
        proj = self.emb if self.tie_weights else self.out_w
        dproj = dlogits.T @ tape.h_stack
        grads["out_b"] = dlogits.sum(axis=0)
        dh = dlogits @ proj  # (T*B, H)
        if self.tie_weights:
            grads["emb"] = dproj
        else:
            grads["out_w"] = dproj
        dh_list = [dh[t * B : (t + 1) * B] for t in range(T)]
        return dh_list, B, T

    def _mse_head_backward(self, tape: ModelTape, grads: dict) -> tuple[list[np.ndarray], int, int]:
        if tape.pred is None:
            raise TapeMismatchError("tape has no regression head record")
        batch: AddingBatch = tape.batch
        B, T = batch.features.shape[0], batch.features.shape[1]
        dpred = 2.0 * (tape.pred - batch.targets) / B
        grads["out_w"] = tape.h_last.T @ dpred
        grads["out_b"] = np.array([dpred.sum()])
        dh_last = dpred[:, None] * self.out_w[None, :]
        dh_list = [np.zeros((B, self.n_h)) for _ in range(T)]
        dh_list[-1] = dh_last
        return dh_list, B, T

    def carry_forward(self, tape: ModelTape, carry: ModelCarry | None) -> ModelCarry:
        """Next-window carry from this window's tape (states only, detached)."""
        T = len(tape.layer_tapes[0].xs)
        t0 = (carry.t0 if carry is not None else 0) + T
        return ModelCarry(
            layers=[carry_out(lp, lt) for lp, lt in zip(self.layers, tape.layer_tapes)],
            t0=t0,
        )

    def forward_states(self, batch: Batch | AddingBatch, carry: ModelCarry | None = None,
                       workers: int = 1) -> ModelCarry:
        """Advance the recurrence over a window without scoring it.

        Truncated BPTT on sequences longer than the window uses this for the
        spans that carry no targets: their final states feed the next window
        but nothing is lost by skipping the head. Runs without dropout, like
        eval mode.
        """
        if self.head == HEAD_SOFTMAX:
            xs, _, _ = self._embed(batch)
        else:
            f = batch.features
            if f.ndim != 3 or f.shape[2] != self.layers[0].n_x:
                raise ShapeError(f"features must be (B, T, {self.layers[0].n_x}), got {f.shape}")
            xs = [np.ascontiguousarray(f[:, t, :], dtype=np.float64) for t in range(f.shape[1])]
        t0 = carry.t0 if carry is not None else 0
        tapes: list[LayerTape] = []
        cur = xs
        for i, lp in enumerate(self.layers):
            lc = carry.layers[i] if carry is not None else None
            cur, tape = layer_forward(lp, cur, t0=t0, carry=lc, workers=workers)
            tapes.append(tape)
        shell = ModelTape(mode="eval", batch=batch, layer_tapes=tapes,
                          dropout_masks=[None] * max(0, len(self.layers) - 1))
        return self.carry_forward(shell, carry)

    # -- checkpointing -----------------------------------------------------

    def meta(self) -> dict:
        lp = self.layers[0]
        return {
            "version": CHECKPOINT_VERSION,
            "head": self.head,
            "cell": lp.cell.kind,
            "n": lp.topo.n,
            "n_layers": len(self.layers),
            "n_h": self.n_h,
            "n_e": self.emb.shape[1] if self.emb is not None else None,
            "in_dim": None if self.head == HEAD_SOFTMAX else lp.n_x,
            "vocab_size": self.vocab_size,
            "tie_weights": self.tie_weights,
            "dropout": self.dropout_p,
            "mix_cell_state": lp.mix_cell_state,
            "freeze_mix": lp.freeze_mix,
        }


def perplexity(loss: float) -> float:
    """exp(mean cross-entropy in nats/token)."""
    if loss < 0:
        raise ValueError(f"cross-entropy loss cannot be negative, got {loss}")
    try:
        return math.exp(loss)
    except OverflowError:  # diverged runs still deserve a finite-format log line
        return float("inf")


# -- checkpoint container ----------------------------------------------------


def save_checkpoint(path: str, model: Model, extra_meta: dict | None = None) -> None:
    """Deterministic binary container: magic, JSON meta, then each parameter
    tensor (sorted by name) as dtype/shape header + raw C-order bytes."""
    meta = model.meta()
    if extra_meta:
        meta = {**meta, **extra_meta}
    arrays = {name: a for name, a, _ in model.named_params()}
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header = json.dumps(meta, sort_keys=True, ensure_ascii=True).encode("utf-8")
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    buf.write(len(arrays).to_bytes(4, "little"))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        desc = json.dumps({"name": name, "dtype": str(a.dtype), "shape": list(a.shape)}).encode("utf-8")
        buf.write(len(desc).to_bytes(4, "little"))
        buf.write(desc)
        raw = a.tobytes()
        buf.write(len(raw).to_bytes(8, "little"))
        buf.write(raw)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    hlen = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    meta = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version {meta.get('version')} not supported (expected {CHECKPOINT_VERSION})")
    count = int.from_bytes(blob[off : off + 4], "little")
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        dlen = int.from_bytes(blob[off : off + 4], "little")
        off += 4
        desc = json.loads(blob[off : off + dlen].decode("utf-8"))
        off += dlen
        rlen = int.from_bytes(blob[off : off + 8], "little")
        off += 8
        a = np.frombuffer(blob[off : off + rlen], dtype=desc["dtype"]).reshape(desc["shape"]).copy()
        off += rlen
        arrays[desc["name"]] = a

    model = Model.create(
        head=meta["head"],
        n=meta["n"],
        cell_kind=meta["cell"],
        n_layers=meta["n_layers"],
        n_h=meta["n_h"],
        n_e=meta["n_e"],
        vocab_size=meta["vocab_size"],
        seed=0,
        tie_weights=meta["tie_weights"],
        dropout_p=meta["dropout"],
        in_dim=meta["in_dim"],
        mix_cell_state=meta["mix_cell_state"],
        freeze_mix=meta["freeze_mix"],
    )
    for name, a, _ in model.named_params():
        if name not in arrays:
            raise DataError(f"checkpoint missing parameter tensor {name!r}")
        if arrays[name].shape != a.shape:
            raise DataError(f"checkpoint tensor {name!r} has shape {arrays[name].shape}, expected {a.shape}")
        a[...] = arrays[name]
    return model, meta


def matched_hidden_size(count_for_hidden, target: int, lo: int = 2, hi: int = 4096) -> int:
    """Smallest hidden size whose trainable-parameter count reaches `target`.

    Used to size a conventional baseline at least as large as the
    multi-channel model it is compared against (model-size control).
    """
    if count_for_hidden(hi) < target:
        raise ValueError("target parameter count unreachable in search range")
    while lo < hi:
        mid = (lo + hi) // 2
        if count_for_hidden(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo
