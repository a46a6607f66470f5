"""Embedding network, SoftMax + reciprocal triplet loss, batch-hard mining, SGD training.

The network is a plain 3-block convnet in NHWC layout with hand-written
reverse mode.  Inputs are 64x64 chips with RGB plus a validity-mask
channel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DatasetError, EmptyChipError, InputError, NoTripletError
from .texture import PatternChip, chip_tensor

EMBED_DIM = 128
INPUT_SIZE = 64
CHANNELS = (8, 16, 32)
IN_CHANNELS = 4


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 0.1
    rtl_lambda: float = 1e-4
    identities_per_batch: int = 4
    samples_per_identity: int = 2
    steps_per_epoch: int | None = None  # default: len(dataset) // batch_size
    use_rtl: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise InputError("epochs, batch_size and learning_rate must be positive")
        if self.rtl_lambda < 0:
            raise InputError("rtl_lambda must be non-negative")
        if self.identities_per_batch * self.samples_per_identity != self.batch_size:
            raise InputError("batch must be P identities x K samples with P*K = batch_size")


# --------------------------------------------------------------------------
# network


class EmbeddingNet:
    def __init__(self, params: dict[str, np.ndarray], n_classes: int):
        self.params = params
        self.n_classes = n_classes

    @classmethod
    def create(cls, n_classes: int, seed: int = 0, dtype=np.float64) -> "EmbeddingNet":
        rng = np.random.default_rng(seed)
        params = {}
        cin = IN_CHANNELS
        for i, cout in enumerate(CHANNELS, 1):
            bound = 1.0 / math.sqrt(9 * cin)
            params[f"conv{i}.w"] = rng.uniform(-bound, bound, (3, 3, cin, cout))
            params[f"conv{i}.b"] = rng.uniform(-bound, bound, cout)
            cin = cout
        for name, fan_in, fan_out in (("embed", cin, EMBED_DIM), ("head", EMBED_DIM, n_classes)):
            bound = 1.0 / math.sqrt(fan_in)
            params[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            params[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)
        return cls({k: v.astype(dtype) for k, v in params.items()}, n_classes)

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet({k: v.copy() for k, v in self.params.items()}, self.n_classes)

    # forward / backward -----------------------------------------------------

    def forward(self, x: np.ndarray):
        """Return (embeddings, logits, cache) for a (B, 64, 64, 4) batch."""
        cache = []
        a = x
        for i in range(1, len(CHANNELS) + 1):
            cols = _im2col(a)
            w = self.params[f"conv{i}.w"]
            z = cols @ w.reshape(-1, w.shape[-1]) + self.params[f"conv{i}.b"]
            m, arg = _maxpool(z)
            # max-pool and ReLU commute; pooling first halves the work
            cache.append((a.shape, cols, m, arg))
            a = np.maximum(m, 0.0)
        pooled = a.mean(axis=(1, 2))
        emb = pooled @ self.params["embed.w"] + self.params["embed.b"]
        logits = emb @ self.params["head.w"] + self.params["head.b"]
        return emb, logits, (cache, a.shape, pooled, emb)

    def backward(self, cache, d_emb: np.ndarray, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        convs, pshape, pooled, emb = cache
        g = {}
        g["head.w"] = emb.T @ d_logits
        g["head.b"] = d_logits.sum(axis=0)
        d_emb = d_emb + d_logits @ self.params["head.w"].T
        g["embed.w"] = pooled.T @ d_emb
        g["embed.b"] = d_emb.sum(axis=0)
        d_pooled = d_emb @ self.params["embed.w"].T
        b, h, w, c = pshape
        da = np.broadcast_to(d_pooled[:, None, None, :] / (h * w), pshape)
        for i in range(len(CHANNELS), 0, -1):
            in_shape, cols, m, arg = convs[i - 1]
            dz = _maxpool_backward(da * (m > 0), arg)
            wname = f"conv{i}.w"
            wt = self.params[wname]
            co = wt.shape[-1]
            g[wname] = (cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, co)).reshape(wt.shape)
            g[f"conv{i}.b"] = dz.reshape(-1, co).sum(axis=0)
            if i > 1:
                da = _conv_input_grad(dz, wt)
        return g

    # persistence ----------------------------------------------------------

    def to_json(self, meta: dict | None = None) -> dict:
        layers = [{"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                  for k, v in self.params.items()]
        dtype = str(next(iter(self.params.values())).dtype)
        return {"layers": layers, "meta": {"n_classes": self.n_classes, "dtype": dtype, **(meta or {})}}

    @classmethod
    def from_json(cls, data: dict) -> "EmbeddingNet":
        dtype = np.dtype(data["meta"].get("dtype", "float64"))
        params = {l["name"]: np.asarray(l["data"], dtype).reshape(l["shape"]) for l in data["layers"]}
        return cls(params, int(data["meta"]["n_classes"]))

    def save(self, path, meta: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(meta)))

    @classmethod
    def load(cls, path) -> "EmbeddingNet":
        return cls.from_json(json.loads(Path(path).read_text()))


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, 9C) patches of a 3x3 'same' convolution."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), x.dtype)
    xp[:, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, 9 * c)


def _conv_input_grad(dz: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the conv input: a 'full' correlation with the flipped kernel."""
    flipped = w[::-1, ::-1].transpose(0, 1, 3, 2)
    return _im2col(dz) @ flipped.reshape(-1, w.shape[2])


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _maxpool(x: np.ndarray):
    """2x2 max-pool; `arg` holds the winning offset (first one on ties)."""
    p = [x[:, i::2, j::2] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(p[0], p[1]), np.maximum(p[2], p[3]))
    arg = np.where(p[0] == out, 0, np.where(p[1] == out, 1, np.where(p[2] == out, 2, 3)))
    return out, arg.astype(np.int8)


def _maxpool_backward(dout: np.ndarray, arg: np.ndarray) -> np.ndarray:
    b, h2, w2, c = dout.shape
    dx = np.empty((b, 2 * h2, 2 * w2, c), dout.dtype)
    for k, (i, j) in enumerate(_POOL_OFFSETS):
        dx[:, i::2, j::2] = dout * (arg == k)
    return dx


# --------------------------------------------------------------------------
# losses and mining


def softmax_loss(logits, label: int) -> float:
    """Cross-entropy of one logit vector, via the shifted log-sum-exp."""
    logits = np.asarray(logits, float).reshape(-1)
    if not 0 <= label < len(logits):
        raise InputError(f"label {label} out of range for {len(logits)} classes")
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[label])


def _softmax_batch(logits: np.ndarray, labels: np.ndarray):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    loss = (m[:, 0] + np.log(s[:, 0])) - logits[np.arange(len(labels)), labels]
    grad = e / s
    grad[np.arange(len(labels)), labels] -= 1.0
    return loss, grad


def rtl(d_ap: float, d_an: float, eps: float = 1e-6) -> float:
    """Reciprocal triplet loss: pull the positive in, push the negative by 1/distance."""
    return d_ap + 1.0 / (d_an + eps)


def pairwise_distances(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def batch_hard(embeddings, labels):
    """Hardest positive and negative per anchor; returns (anchors, positives, negatives)."""
    emb = np.asarray(embeddings, float)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise NoTripletError("batch holds a single identity")
    d = pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    pos_mask = same & ~np.eye(n, dtype=bool)
    anchors = np.nonzero(pos_mask.any(axis=1))[0]
    if len(anchors) == 0:
        raise NoTripletError("no anchor has a positive")
    # argmax/argmin return the first extremum, i.e. the lowest index on ties
    dp = np.where(pos_mask, d, -np.inf)[anchors]
    dn = np.where(~same, d, np.inf)[anchors]
    return anchors, dp.argmax(axis=1), dn.argmin(axis=1)


def _rtl_batch(emb: np.ndarray, labels: np.ndarray, eps: float = 1e-6):
    a, p, n = batch_hard(emb, labels)
    dap_v = emb[a] - emb[p]
    dan_v = emb[a] - emb[n]
    dap = np.sqrt((dap_v ** 2).sum(axis=1))
    dan = np.sqrt((dan_v ** 2).sum(axis=1))
    loss = dap + 1.0 / (dan + eps)
    m = len(a)
    grad = np.zeros_like(emb)
    gp = np.where(dap > 0, 1.0 / np.where(dap > 0, dap, 1.0), 0.0)[:, None] * dap_v / m
    coef = -1.0 / (dan + eps) ** 2
    gn = (coef * np.where(dan > 0, 1.0 / np.where(dan > 0, dan, 1.0), 0.0))[:, None] * dan_v / m
    np.add.at(grad, a, gp + gn)
    np.add.at(grad, p, -gp)
    np.add.at(grad, n, -gn)
    return float(loss.mean()), grad


def total_loss(net: EmbeddingNet, x: np.ndarray, labels: np.ndarray, lam: float,
               use_rtl: bool = True, with_grad: bool = True):
    """Mean softmax + lam * mean RTL; returns (total, softmax, rtl, grads)."""
    emb, logits, cache = net.forward(x)
    sl, dlog = _softmax_batch(logits, labels)
    soft = float(sl.mean())
    dlog /= len(labels)
    rt, demb = 0.0, np.zeros_like(emb)
    if use_rtl:
        rt, demb = _rtl_batch(emb, labels)
        demb *= lam
    total = soft + lam * rt
    if not with_grad:
        return total, soft, rt, None
    return total, soft, rt, net.backward(cache, demb, dlog)


# --------------------------------------------------------------------------
# inference


def embed(net: EmbeddingNet, chip: PatternChip) -> np.ndarray:
    if not np.any(chip.mask):
        raise EmptyChipError("cannot embed an empty chip")
    x = chip_tensor(chip, INPUT_SIZE)[None].astype(net.params["conv1.w"].dtype)
    emb, _, _ = net.forward(x)
    return emb[0]


def embed_batch(net: EmbeddingNet, tensors: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [net.forward(tensors[i:i + batch])[0] for i in range(0, len(tensors), batch)]
    return np.concatenate(out) if out else np.zeros((0, EMBED_DIM))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    def epoch_means(self) -> np.ndarray:
        if not self.rows:
            return np.zeros(0)
        arr = np.array(self.rows)
        epochs = np.unique(arr[:, 0])
        return np.array([arr[arr[:, 0] == e, 4].mean() for e in epochs])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "step", "softmax", "rtl", "total"])
            for e, s, a, b, c in self.rows:
                wr.writerow([e, s, repr(a), repr(b), repr(c)])


def _sample_batch(rng: np.random.Generator, by_label: list[np.ndarray], p: int, k: int):
    eligible = [i for i, idx in enumerate(by_label) if len(idx) >= k]
    ids = rng.choice(len(eligible), size=p, replace=False)
    picks, labels = [], []
    for i in sorted(ids):
        lab = eligible[i]
        picks.extend(rng.choice(by_label[lab], size=k, replace=False).tolist())
        labels.extend([lab] * k)
    return np.array(picks), np.array(labels)


def train(tensors: np.ndarray, labels, config: TrainConfig, n_classes: int | None = None,
          progress=None) -> tuple[EmbeddingNet, TrainLog]:
    """Train on pre-built (N, 64, 64, 4) inputs with integer identity labels."""
    config.validate()
    labels = np.asarray(labels, np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    by_label = [np.nonzero(labels == c)[0] for c in range(n_classes)]
    rich = sum(len(idx) >= config.samples_per_identity for idx in by_label)
    if rich < max(2, config.identities_per_batch):
        raise DatasetError(f"need at least {max(2, config.identities_per_batch)} identities "
                           f"with {config.samples_per_identity}+ samples, found {rich}")
    net = EmbeddingNet.create(n_classes, config.seed, tensors.dtype)
    rng = np.random.default_rng([config.seed, 1])
    steps = config.steps_per_epoch or max(1, len(tensors) // config.batch_size)
    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        for step in range(1, steps + 1):
            idx, lab = _sample_batch(rng, by_label, config.identities_per_batch,
                                     config.samples_per_identity)
            total, soft, rt, grads = total_loss(net, tensors[idx], lab, config.rtl_lambda,
                                                config.use_rtl)
            for k, g in grads.items():
                net.params[k] -= config.learning_rate * g
            log.rows.append((epoch, step, soft, rt, total))
        if progress is not None:
            progress(epoch, log)
    return net, log


# --------------------------------------------------------------------------
# gradient verification


def grad_check(net: EmbeddingNet, x: np.ndarray, labels, lam: float = 0.0, use_rtl: bool = False,
               coords_per_array: int = 50, step: float = 1e-5, seed: int = 0,
               arrays=None) -> dict:
    """Max relative error between analytic and central-difference gradients.

    Coordinates whose +/- step crosses a ReLU kink, flips a max-pool
    winner or changes a batch-hard triplet are skipped; the relative error uses max(|a|, |n|, 1e-6) as the
    denominator so exact zeros compare cleanly.
    """
    labels = np.asarray(labels)
    x = np.asarray(x, np.float64)
    net = EmbeddingNet({k: v.astype(np.float64) for k, v in net.params.items()}, net.n_classes)
    _, _, _, grads = total_loss(net, x, labels, lam, use_rtl)
    base = _pattern(net, x, labels, use_rtl)
    rng = np.random.default_rng(seed)
    report, worst, skipped = {}, 0.0, 0
    for name in arrays or net.params:
        w = net.params[name]
        n = w.size
        picks = rng.choice(n, size=min(coords_per_array, n), replace=False)
        errs = []
        for flat in picks:
            idx = np.unravel_index(flat, w.shape)
            old = w[idx]
            w[idx] = old + step
            fp = total_loss(net, x, labels, lam, use_rtl, with_grad=False)[0]
            pat_p = _pattern(net, x, labels, use_rtl)
            w[idx] = old - step
            fm = total_loss(net, x, labels, lam, use_rtl, with_grad=False)[0]
            pat_m = _pattern(net, x, labels, use_rtl)
            w[idx] = old
            if not (_same(pat_p, base) and _same(pat_m, base)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            ana = grads[name][idx]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        report[name] = max(errs) if errs else 0.0
        worst = max(worst, report[name])
    return {"max_rel_error": worst, "per_array": report, "skipped": skipped}


def _pattern(net, x, labels, use_rtl):
    """Every discrete choice of the forward pass: ReLU signs, pool winners, triplets."""
    emb, _, (convs, *_r) = net.forward(x)
    pat = [m > 0 for _, _, m, _ in convs] + [arg for _, _, _, arg in convs]
    if use_rtl:
        try:
            pat.extend(batch_hard(emb, labels))
        except NoTripletError:
            pass
    return pat


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def write_weights(net: EmbeddingNet, path, config: TrainConfig | None = None) -> None:
    meta = {"config": asdict(config)} if config else {}
    net.save(path, meta)
